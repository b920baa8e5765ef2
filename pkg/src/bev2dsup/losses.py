"""Focal / L1 / GIoU losses on projected boxes and their analytic gradients.

Class scores always carry one trailing background slot. Matched predictions
are supervised toward their ground-truth class plus box regression and GIoU;
unmatched predictions only get the focal term toward background. Each
component is averaged over the terms that feed it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np

from ._validation import check_nonnegative_weights
from .errors import EmptyMatch
from .geometry import Box2D, project_params

EPS_P = 1e-7
DEFAULT_D_MAX = 61.2


@dataclass(frozen=True)
class LossWeights:
    lambda_cls: float = 2.0
    lambda_reg: float = 0.75
    lambda_iou: float = 0.25

    def __post_init__(self):
        check_nonnegative_weights((self.lambda_cls, self.lambda_reg, self.lambda_iou), "LossWeights")


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("focal alpha must lie in (0, 1]")
        if self.gamma < 0:
            raise ValueError("focal gamma must be >= 0")


@dataclass(frozen=True)
class Normalization:
    """Scales for the regression terms: pixels by image height, depth by d_max."""

    image_height: float
    d_max: float = DEFAULT_D_MAX

    def __post_init__(self):
        if not (self.image_height > 0 and self.d_max > 0):
            raise ValueError("image_height and d_max must be positive")

    @property
    def scales(self) -> np.ndarray:
        h = self.image_height
        return np.array([h, h, h, h, self.d_max])


class Pred2D(NamedTuple):
    box: Box2D
    logits: np.ndarray


class Target2D(NamedTuple):
    box: Box2D
    class_id: int


@dataclass
class PairContribution:
    pred_index: int
    gt_index: Optional[int]  # None: supervised as background
    cls: float
    reg: float = 0.0
    iou: float = 0.0


@dataclass
class LossBreakdown:
    l_cls: float
    l_reg: float
    l_iou: float
    total: float
    contributions: List[PairContribution] = field(default_factory=list)

    def __add__(self, other: "LossBreakdown") -> "LossBreakdown":
        return LossBreakdown(
            self.l_cls + other.l_cls,
            self.l_reg + other.l_reg,
            self.l_iou + other.l_iou,
            self.total + other.total,
            self.contributions + other.contributions,
        )

    @classmethod
    def zero(cls) -> "LossBreakdown":
        return cls(0.0, 0.0, 0.0, 0.0)


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    e = np.exp(z - z.max())
    return e / e.sum()


def focal_loss(p: float, params: FocalParams = FocalParams()) -> float:
    """``-alpha (1-p)^gamma log p`` with p clamped to [1e-7, 1]."""
    p = min(max(float(p), EPS_P), 1.0)
    return -params.alpha * (1.0 - p) ** params.gamma * math.log(p)


def focal_loss_dp(p: float, params: FocalParams = FocalParams()) -> float:
    """d focal / d p; zero inside the clamped region."""
    p = float(p)
    if p < EPS_P or p > 1.0:
        return 0.0
    q = 1.0 - p
    lead = 0.0
    if params.gamma > 0 and q > 0:
        lead = params.gamma * q ** (params.gamma - 1.0) * math.log(p)
    return params.alpha * (lead - q**params.gamma / p)


def focal_from_logits(logits, target: int, params: FocalParams):
    """Focal loss toward ``target`` and its gradient w.r.t. the logits."""
    probs = softmax(logits)
    p = probs[target]
    grad = -probs * p
    grad[target] += p
    return focal_loss(p, params), focal_loss_dp(p, params) * grad


def _as_array(box) -> np.ndarray:
    if isinstance(box, Box2D):
        return box.as_array()
    return np.asarray(box, dtype=float)


def l1_regression_loss(pred, gt, image_height: float, d_max: float = DEFAULT_D_MAX) -> float:
    """Normalized L1 over (x, y, w, h) / image_height plus |depth diff| / d_max."""
    scales = Normalization(image_height, d_max).scales
    return float(np.sum(np.abs(_as_array(pred) - _as_array(gt)) / scales))


def l1_regression_grad(pred, gt, image_height: float, d_max: float = DEFAULT_D_MAX) -> np.ndarray:
    """Gradient w.r.t. ``pred``; exactly 0 where a component equals its target."""
    scales = Normalization(image_height, d_max).scales
    return np.sign(_as_array(pred) - _as_array(gt)) / scales


def _extent(box):
    x, y, w, h = _as_array(box)[:4]
    return x - w / 2, x + w / 2, y - h / 2, y + h / 2


def _giou_parts(a, b):
    ax1, ax2, ay1, ay2 = _extent(a)
    bx1, bx2, by1, by2 = _extent(b)
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    iw, ih = max(iw, 0.0), max(ih, 0.0)
    ew = max(ax2, bx2) - min(ax1, bx1)
    eh = max(ay2, by2) - min(ay1, by1)
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    inter = iw * ih
    union = area_a + area_b - inter
    return inter, union, ew * eh


def iou(a, b) -> float:
    inter, union, _ = _giou_parts(a, b)
    return inter / union


def giou(a, b) -> float:
    """Generalized IoU of two axis-aligned boxes, in (-1, 1]."""
    inter, union, hull = _giou_parts(a, b)
    return inter / union - (hull - union) / hull


def giou_loss(a, b) -> float:
    return 1.0 - giou(a, b)


def _axis_terms(a_lo, a_hi, b_lo, b_hi):
    """Overlap/hull lengths along one axis and their derivatives w.r.t. (a_lo, a_hi).

    Ties hand control to ``a``; either choice gives a zero gradient for
    identical boxes.
    """
    inter = min(a_hi, b_hi) - max(a_lo, b_lo)
    if inter > 0:
        d_inter = (-1.0 if a_lo >= b_lo else 0.0, 1.0 if a_hi <= b_hi else 0.0)
    else:
        inter, d_inter = 0.0, (0.0, 0.0)
    hull = max(a_hi, b_hi) - min(a_lo, b_lo)
    d_hull = (-1.0 if a_lo <= b_lo else 0.0, 1.0 if a_hi >= b_hi else 0.0)
    return inter, d_inter, hull, d_hull


def giou_grad(a, b) -> np.ndarray:
    """d giou(a, b) / d (x, y, w, h) of ``a``."""
    ax1, ax2, ay1, ay2 = _extent(a)
    bx1, bx2, by1, by2 = _extent(b)
    iw, d_iw, ew, d_ew = _axis_terms(ax1, ax2, bx1, bx2)
    ih, d_ih, eh, d_eh = _axis_terms(ay1, ay2, by1, by2)
    aw, ah = ax2 - ax1, ay2 - ay1
    inter = iw * ih
    union = aw * ah + (bx2 - bx1) * (by2 - by1) - inter
    hull = ew * eh

    # derivatives w.r.t. the edges (x_lo, x_hi, y_lo, y_hi) of a
    d_inter = np.array([d_iw[0] * ih, d_iw[1] * ih, iw * d_ih[0], iw * d_ih[1]])
    d_hull = np.array([d_ew[0] * eh, d_ew[1] * eh, ew * d_eh[0], ew * d_eh[1]])
    d_area = np.array([-ah, ah, -aw, aw])
    d_union = d_area - d_inter
    d_edges = (d_inter * union - inter * d_union) / union**2 + (d_union * hull - union * d_hull) / hull**2

    # edges -> (x, y, w, h)
    return np.array(
        [
            d_edges[0] + d_edges[1],
            d_edges[2] + d_edges[3],
            0.5 * (d_edges[1] - d_edges[0]),
            0.5 * (d_edges[3] - d_edges[2]),
        ]
    )


def giou_kink_gap(a, b) -> float:
    """Distance (pixels) to the nearest edge coincidence or touching overlap.

    Near zero, the GIoU gradient switches branch and finite differences
    straddle the kink.
    """
    ax1, ax2, ay1, ay2 = _extent(a)
    bx1, bx2, by1, by2 = _extent(b)
    gaps = [abs(ax1 - bx1), abs(ax2 - bx2), abs(ay1 - by1), abs(ay2 - by2)]
    gaps.append(abs(min(ax2, bx2) - max(ax1, bx1)))
    gaps.append(abs(min(ay2, by2) - max(ay1, by1)))
    return float(min(gaps))


def _pairs_of(assignment):
    pairs = getattr(assignment, "pairs", assignment)
    return [(int(i), int(j)) for i, j in pairs]


def _background_preds(n_preds, pairs):
    matched = {i for i, _ in pairs}
    return [i for i in range(n_preds) if i not in matched]


def _evaluate(assignment, preds, gts, weights, focal, norm, want_grad):
    n = len(preds)
    if n == 0:
        raise EmptyMatch("no predictions to supervise")
    pairs = _pairs_of(assignment)
    background = _background_preds(n, pairs)
    n_classes = len(np.asarray(preds[0].logits))
    bg_slot = n_classes - 1
    scales = norm.scales

    contributions = []
    sum_cls = sum_reg = sum_iou = 0.0
    g_box = np.zeros((n, 5))
    g_logit = np.zeros((n, n_classes))
    n_cls_terms = len(pairs) + len(background)
    n_pairs = len(pairs)

    for i, j in sorted(pairs):
        pred_box = _as_array(preds[i].box)
        gt_box = _as_array(gts[j].box)
        cls, d_cls = focal_from_logits(preds[i].logits, int(gts[j].class_id), focal)
        diff = pred_box - gt_box
        reg = float(np.sum(np.abs(diff) / scales))
        iou_term = giou_loss(pred_box, gt_box)
        sum_cls += cls
        sum_reg += reg
        sum_iou += iou_term
        contributions.append(PairContribution(i, j, cls, reg, iou_term))
        if want_grad:
            g_logit[i] += weights.lambda_cls / n_cls_terms * d_cls
            g_box[i] += weights.lambda_reg / n_pairs * np.sign(diff) / scales
            g_box[i, :4] -= weights.lambda_iou / n_pairs * giou_grad(pred_box, gt_box)

    for i in background:
        cls, d_cls = focal_from_logits(preds[i].logits, bg_slot, focal)
        sum_cls += cls
        contributions.append(PairContribution(i, None, cls))
        if want_grad:
            g_logit[i] += weights.lambda_cls / n_cls_terms * d_cls

    l_cls = sum_cls / n_cls_terms
    l_reg = sum_reg / n_pairs if n_pairs else 0.0
    l_iou = sum_iou / n_pairs if n_pairs else 0.0
    total = weights.lambda_cls * l_cls + weights.lambda_reg * l_reg + weights.lambda_iou * l_iou
    breakdown = LossBreakdown(l_cls, l_reg, l_iou, total, contributions)
    return breakdown, g_box, g_logit


def total_loss(
    assignment,
    preds: Sequence[Pred2D],
    gts: Sequence[Target2D],
    weights: LossWeights = LossWeights(),
    focal: FocalParams = FocalParams(),
    norm: Optional[Normalization] = None,
) -> LossBreakdown:
    """Weighted focal + L1 + GIoU loss for one matched camera view."""
    if norm is None:
        raise ValueError("norm (image height, d_max) is required")
    breakdown, _, _ = _evaluate(assignment, preds, gts, weights, focal, norm, False)
    return breakdown


def total_loss_grad_2d(
    assignment,
    preds: Sequence[Pred2D],
    gts: Sequence[Target2D],
    weights: LossWeights = LossWeights(),
    focal: FocalParams = FocalParams(),
    norm: Optional[Normalization] = None,
):
    """Loss plus gradients w.r.t. each prediction's (x, y, w, h, depth) and logits.

    Returns ``(breakdown, grad_box, grad_logits)`` with shapes ``(n, 5)`` and
    ``(n, n_classes + 1)``.
    """
    if norm is None:
        raise ValueError("norm (image height, d_max) is required")
    return _evaluate(assignment, preds, gts, weights, focal, norm, True)


@dataclass
class CameraTerm:
    camera_id: str
    pred_indices: List[int]  # scene-level index of each visible prediction
    assignment: object
    breakdown: LossBreakdown
    jacobians: List[np.ndarray]
    boxes2d: np.ndarray
    cost_matrix: Optional[np.ndarray] = None


@dataclass
class Grad3DResult:
    loss: LossBreakdown
    grad_params: np.ndarray  # (n, 7)
    grad_logits: np.ndarray  # (n, n_classes + 1)
    visible: np.ndarray  # bool (n,): visible in at least one camera
    cameras: List[CameraTerm]

    @property
    def invisible(self) -> List[int]:
        return [int(i) for i in np.flatnonzero(~self.visible)]


def total_loss_grad_3d(
    params,
    logits,
    cameras,
    targets: Dict[str, Sequence[Target2D]],
    weights: LossWeights = LossWeights(),
    focal: FocalParams = FocalParams(),
    d_max: float = DEFAULT_D_MAX,
    cost_weights=None,
    assignments: Optional[Dict[str, object]] = None,
) -> Grad3DResult:
    """Multi-camera loss and its gradient w.r.t. every box's 3D parameters.

    ``params`` is ``(n, 7)`` in ``geometry.PARAM_NAMES`` order. In each camera
    the visible boxes are projected, matched to that camera's targets (unless
    ``assignments`` fixes the match, indexed by local visible order) and the
    2D gradient is pulled back through the projection Jacobian. Per-camera
    losses and gradients are summed. Boxes visible nowhere get a zero
    gradient and are reported in ``Grad3DResult.invisible``.
    """
    from .matching import CostWeights, build_cost_matrix, hungarian, Assignment

    params = np.atleast_2d(np.asarray(params, dtype=float))
    logits = np.atleast_2d(np.asarray(logits, dtype=float))
    n = params.shape[0]
    if cost_weights is None:
        cost_weights = CostWeights()
    grad_params = np.zeros_like(params)
    grad_logits = np.zeros_like(logits)
    visible = np.zeros(n, dtype=bool)
    total = LossBreakdown.zero()
    terms = []

    for cam in cameras:
        projections = []
        for i in range(n):
            proj = project_params(cam, params[i], with_jacobian=True)
            if proj is not None:
                projections.append((i, proj))
        if not projections:
            continue
        idx = [i for i, _ in projections]
        visible[idx] = True
        preds = [Pred2D(proj.box, logits[i]) for i, proj in projections]
        gts = list(targets.get(cam.id, ()))
        norm = Normalization(cam.height, d_max)
        costs = None
        if assignments is not None and cam.id in assignments:
            assignment = assignments[cam.id]
        elif gts:
            costs = build_cost_matrix(
                [(p.box, softmax(p.logits)) for p in preds],
                [(g.box, g.class_id) for g in gts],
                cost_weights,
                norm,
            )
            assignment = hungarian(costs)
        else:
            assignment = Assignment([], list(range(len(preds))), [], 0.0)

        breakdown, g_box, g_logit = total_loss_grad_2d(assignment, preds, gts, weights, focal, norm)
        for k, (i, proj) in enumerate(projections):
            grad_params[i] += proj.jacobian.T @ g_box[k]
            grad_logits[i] += g_logit[k]
        total = total + breakdown
        terms.append(
            CameraTerm(
                cam.id,
                idx,
                assignment,
                breakdown,
                [proj.jacobian for _, proj in projections],
                np.array([proj.box for _, proj in projections]),
                costs,
            )
        )

    return Grad3DResult(total, grad_params, grad_logits, visible, terms)
