"""Matching cost and minimum-cost bipartite assignment.

Rows are predictions, columns are ground truths. Among equally good
assignments the lexicographically smallest pair list (sorted by prediction
index) is returned, by both the Hungarian solver and the brute-force oracle.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from ._validation import check_class_index, check_finite_matrix, check_nonnegative_weights, check_probabilities
from .errors import SizeLimit
from .losses import Normalization, giou_loss, l1_regression_loss

BRUTE_FORCE_LIMIT = 8


@dataclass(frozen=True)
class CostWeights:
    beta_cls: float = 2.0
    beta_reg: float = 0.75
    beta_iou: float = 0.25

    def __post_init__(self):
        check_nonnegative_weights((self.beta_cls, self.beta_reg, self.beta_iou), "CostWeights")


@dataclass
class Assignment:
    pairs: List[Tuple[int, int]]
    unmatched_preds: List[int] = field(default_factory=list)
    unmatched_gts: List[int] = field(default_factory=list)
    total_cost: float = 0.0


def classification_cost(pred_class_probs, gt_class: int) -> float:
    probs = check_probabilities(pred_class_probs)
    return 1.0 - float(probs[check_class_index(gt_class, probs.size)])


def regression_cost(pred, gt, image_height: float, d_max: float) -> float:
    return l1_regression_loss(pred, gt, image_height, d_max)


def iou_cost(pred, gt) -> float:
    return giou_loss(pred, gt)


def build_cost_matrix(preds, gts, weights: CostWeights = CostWeights(), norm=None) -> np.ndarray:
    """C[i, j] = beta_cls * C_cls + beta_reg * C_reg + beta_iou * C_iou.

    ``preds`` holds ``(box, class_probs)``, ``gts`` holds ``(box, class_id)``;
    ``norm`` is a ``Normalization`` or an ``(image_height, d_max)`` pair.
    """
    if not preds or not gts:
        raise ValueError("cost matrix needs at least one prediction and one ground truth")
    if norm is None:
        raise ValueError("norm (image height, d_max) is required")
    if not isinstance(norm, Normalization):
        norm = Normalization(*norm)
    costs = np.empty((len(preds), len(gts)))
    for i, (pbox, probs) in enumerate(preds):
        probs = check_probabilities(probs)
        for j, (gbox, gcls) in enumerate(gts):
            costs[i, j] = (
                weights.beta_cls * (1.0 - probs[check_class_index(gcls, probs.size)])
                + weights.beta_reg * regression_cost(pbox, gbox, norm.image_height, norm.d_max)
                + weights.beta_iou * iou_cost(pbox, gbox)
            )
    return costs


def _pairs_cost(costs: np.ndarray, pairs) -> float:
    total = 0.0
    for i, j in pairs:
        total += float(costs[i, j])
    return total


def _tie_tol(costs: np.ndarray) -> float:
    k = min(costs.shape)
    scale = float(np.abs(costs).max()) if costs.size else 0.0
    return 1e-10 * (1.0 + k * scale)


def _finish(costs: np.ndarray, pairs) -> Assignment:
    n, m = costs.shape
    pairs = sorted((int(i), int(j)) for i, j in pairs)
    rows = {i for i, _ in pairs}
    cols = {j for _, j in pairs}
    return Assignment(
        pairs,
        [i for i in range(n) if i not in rows],
        [j for j in range(m) if j not in cols],
        _pairs_cost(costs, pairs),
    )


def _solve_rows_le_cols(cost: np.ndarray):
    """Shortest-augmenting-path Hungarian method for n <= m.

    Returns ``(col_of_row, u, v)`` where u, v are dual potentials with
    ``cost - u[:, None] - v[None, :] >= 0`` and equality on matched cells.
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    row_of = np.zeros(m + 1, dtype=int)  # 1-based row matched to column j, 0 = free
    way = np.zeros(m + 1, dtype=int)
    padded = np.zeros((n + 1, m + 1))
    padded[1:, 1:] = cost
    for i in range(1, n + 1):
        row_of[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = row_of[j0]
            free = ~used
            free[0] = False
            cur = padded[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            cand = np.where(free, minv, np.inf)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            u[row_of[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if row_of[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            row_of[j0] = row_of[j1]
            j0 = j1
    col_of_row = np.full(n, -1, dtype=int)
    for j in range(1, m + 1):
        if row_of[j]:
            col_of_row[row_of[j] - 1] = j - 1
    return col_of_row, u[1:], v[1:]


def _solve(costs: np.ndarray):
    """Optimal pairs of a (possibly rectangular) matrix, plus duals in its orientation."""
    n, m = costs.shape
    if n <= m:
        col_of_row, u, v = _solve_rows_le_cols(costs)
        return [(i, int(col_of_row[i])) for i in range(n)], u, v
    row_of_col, v, u = _solve_rows_le_cols(costs.T)
    return [(int(row_of_col[j]), j) for j in range(m)], u, v


def _optimum(costs: np.ndarray) -> float:
    if costs.size == 0:
        return 0.0
    pairs, _, _ = _solve(costs)
    return _pairs_cost(costs, pairs)


def _may_have_ties(costs, pairs, u, v, tol) -> bool:
    reduced = costs - u[:, None] - v[None, :]
    tight = np.abs(reduced) <= tol
    for i, j in pairs:
        tight[i, j] = False
    return bool(tight.any())


def _lexicographic_optimum(costs: np.ndarray, best: float, tol: float):
    """Greedy row-by-row choice of the lexicographically smallest optimal pair list."""
    n, m = costs.shape
    target = min(n, m)
    fixed: List[Tuple[int, int]] = []
    fixed_cost = 0.0
    cols_left = list(range(m))
    for i in range(n):
        rows_after = list(range(i + 1, n))
        chosen = None
        for j in cols_left:
            rest_cols = [c for c in cols_left if c != j]
            if len(fixed) + 1 + min(len(rows_after), len(rest_cols)) != target:
                continue
            rest = _optimum(costs[np.ix_(rows_after, rest_cols)]) if rows_after and rest_cols else 0.0
            if abs(fixed_cost + costs[i, j] + rest - best) <= tol:
                chosen = j
                break
        if chosen is not None:
            fixed.append((i, chosen))
            fixed_cost += costs[i, chosen]
            cols_left.remove(chosen)
        if len(fixed) == target:
            break
    return fixed


def hungarian(costs) -> Assignment:
    """Minimum-total-cost assignment of size min(n, m)."""
    costs = check_finite_matrix(costs)
    n, m = costs.shape
    if n == 0 or m == 0:
        return _finish(costs, [])
    pairs, u, v = _solve(costs)
    tol = _tie_tol(costs)
    if _may_have_ties(costs, pairs, u, v, tol):
        pairs = _lexicographic_optimum(costs, _pairs_cost(costs, sorted(pairs)), tol)
    return _finish(costs, pairs)


def brute_force_assignment(costs) -> Assignment:
    """Exhaustive search over all injections; the oracle for ``hungarian``."""
    costs = check_finite_matrix(costs)
    n, m = costs.shape
    k = min(n, m)
    if k > BRUTE_FORCE_LIMIT:
        raise SizeLimit(f"brute force is limited to min(n, m) <= {BRUTE_FORCE_LIMIT}, got {k}")
    if k == 0:
        return _finish(costs, [])
    candidates = []
    if n >= m:
        for rows in itertools.permutations(range(n), m):
            pairs = sorted(zip(rows, range(m)))
            candidates.append((_pairs_cost(costs, pairs), pairs))
    else:
        for cols in itertools.permutations(range(m), n):
            pairs = list(zip(range(n), cols))
            candidates.append((_pairs_cost(costs, pairs), pairs))
    best = min(c for c, _ in candidates)
    tol = _tie_tol(costs)
    optimal = [pairs for c, pairs in candidates if c - best <= tol]
    return _finish(costs, min(optimal))


def match_predictions(preds: Sequence, gts: Sequence, weights: CostWeights, norm) -> Tuple[np.ndarray, Assignment]:
    """Cost matrix plus Hungarian assignment for one camera view."""
    costs = build_cost_matrix(preds, gts, weights, norm)
    return costs, hungarian(costs)
