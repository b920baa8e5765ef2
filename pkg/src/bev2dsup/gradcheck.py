"""Finite-difference audit of the analytic loss gradients.

Each trial draws a random camera, a few boxes in front of it, 2D targets
from perturbed copies of those boxes, and random logits. The assignment is
fixed at the base point so that matching does not switch during the
differences. Two gradients are audited against central differences:

* the 3D gradient w.r.t. every box's seven parameters (through projection),
* the 2D gradient w.r.t. each projected (x, y, w, h, depth) and the logits.

Trials sitting within a small margin of a non-smooth point (a corner tie in
the projected AABB, a GIoU branch switch, an L1 kink or the visibility
boundary) are excluded and reported rather than audited.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence
from unittest import mock

import numpy as np

from . import losses
from .geometry import EPS_Z, Box2D, Camera, corner_tie_gap, project_params
from .losses import (
    DEFAULT_D_MAX,
    Normalization,
    Pred2D,
    Target2D,
    giou_kink_gap,
    softmax,
    total_loss_grad_2d,
    total_loss_grad_3d,
)
from .matching import build_cost_matrix, hungarian
from .scenegen import DEFAULT_CLASSES, RigConfig, derive_seed, make_rig


@dataclass(frozen=True)
class GradCheckConfig:
    trials: int = 200
    seed: int = 0
    h: float = 1e-5
    tol_3d: float = 1e-3
    tol_2d: float = 1e-4
    max_excluded: float = 0.05  # fraction of trials that may be excluded
    margin: float = 3.0  # exclusion margin, in multiples of the step's largest pixel effect
    rig: RigConfig = RigConfig(width=400, height=225)


@dataclass
class TrialResult:
    index: int
    camera: str
    n_preds: int
    n_gts: int
    rel_err_3d: float = math.nan
    rel_err_2d: float = math.nan
    excluded: Optional[str] = None


@dataclass
class GradCheckReport:
    config: GradCheckConfig
    trials: List[TrialResult] = field(default_factory=list)

    @property
    def audited(self) -> List[TrialResult]:
        return [t for t in self.trials if t.excluded is None]

    @property
    def n_excluded(self) -> int:
        return len(self.trials) - len(self.audited)

    @property
    def max_rel_err_3d(self) -> float:
        return max((t.rel_err_3d for t in self.audited), default=0.0)

    @property
    def max_rel_err_2d(self) -> float:
        return max((t.rel_err_2d for t in self.audited), default=0.0)

    @property
    def failures(self) -> List[TrialResult]:
        c = self.config
        return [t for t in self.audited if not (t.rel_err_3d <= c.tol_3d and t.rel_err_2d <= c.tol_2d)]

    @property
    def passed(self) -> bool:
        too_many = self.n_excluded > self.config.max_excluded * len(self.trials)
        return bool(self.trials) and not self.failures and not too_many

    def to_text(self) -> str:
        c = self.config
        lines = [
            f"trials: {len(self.trials)}",
            f"audited: {len(self.audited)}",
            f"excluded: {self.n_excluded} (limit {c.max_excluded:.0%})",
            f"max relative error 3D: {self.max_rel_err_3d:.3e} (tol {c.tol_3d:g})",
            f"max relative error 2D: {self.max_rel_err_2d:.3e} (tol {c.tol_2d:g})",
        ]
        for t in self.trials:
            if t.excluded:
                lines.append(f"  trial {t.index}: excluded ({t.excluded})")
        for t in self.failures:
            lines.append(f"  trial {t.index}: FAIL 3D {t.rel_err_3d:.3e} 2D {t.rel_err_2d:.3e}")
        lines.append("result: " + ("PASS" if self.passed else "FAIL"))
        return "\n".join(lines) + "\n"


def relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    a = np.ravel(analytic)
    f = np.ravel(numeric)
    return float(np.linalg.norm(a - f) / max(np.linalg.norm(a), np.linalg.norm(f), floor))


def central_difference(fn, x: np.ndarray, h: float) -> np.ndarray:
    x = np.array(x, dtype=float)
    grad = np.zeros_like(x)
    for k in np.ndindex(x.shape):
        old = x[k]
        x[k] = old + h
        up = fn(x)
        x[k] = old - h
        down = fn(x)
        x[k] = old
        grad[k] = (up - down) / (2 * h)
    return grad


def _random_box(rng: np.random.Generator, cam: Camera) -> np.ndarray:
    forward = cam.ego_to_cam.rotation[2]
    heading = math.atan2(forward[1], forward[0]) + rng.uniform(-0.45, 0.45)
    dist = rng.uniform(6.0, 30.0)
    spec = DEFAULT_CLASSES[rng.integers(len(DEFAULT_CLASSES))]
    dims = np.asarray(spec.dims) * np.exp(rng.normal(0.0, 0.1, 3))
    center = [dist * math.cos(heading), dist * math.sin(heading), dims[2] / 2 + rng.normal(0.0, 0.1)]
    return np.array([*center, *dims, rng.uniform(-math.pi, math.pi)])


def _sample(rng: np.random.Generator, cameras: Sequence[Camera]):
    """Boxes, logits and targets with every box visible in the chosen camera."""
    while True:
        cam = cameras[rng.integers(len(cameras))]
        n_obj = int(rng.integers(1, 3))
        n_extra = int(rng.integers(0, 2))
        params = np.array([_random_box(rng, cam) for _ in range(n_obj + n_extra)])
        projections = [project_params(cam, p, with_jacobian=True) for p in params]
        if any(p is None for p in projections):
            continue
        targets = []
        for k in range(n_obj):
            gt = params[k].copy()
            gt[:3] += rng.normal(0.0, 0.4, 3)
            gt[3:6] *= np.exp(rng.normal(0.0, 0.1, 3))
            gt[6] += rng.normal(0.0, 0.2)
            proj = project_params(cam, gt)
            if proj is None:
                break
            box = proj.box.copy()
            box[4] *= math.exp(rng.normal(0.0, 0.05))
            targets.append(Target2D(Box2D.from_array(box), int(rng.integers(len(DEFAULT_CLASSES)))))
        else:
            logits = rng.normal(0.0, 1.5, (len(params), len(DEFAULT_CLASSES) + 1))
            return cam, params, logits, targets, projections


def _exclusion(cam: Camera, projections, assignment, targets, margin: float, h: float) -> Optional[str]:
    """Reason a trial is too close to a non-smooth point, or None."""
    for k, proj in enumerate(projections):
        du, dv = proj.corner_grads
        shift = margin * h * max(np.abs(du).max(), np.abs(dv).max(), 1.0)
        if corner_tie_gap(proj) < shift:
            return f"corner tie on box {k}"
        x0, y0, x1, y1 = proj.aabb
        if min(x1, y1, cam.width - x0, cam.height - y0) < shift or proj.z.min() - EPS_Z < margin * h * 10:
            return f"visibility margin on box {k}"
        for i, j in assignment.pairs:
            if i != k:
                continue
            gt = targets[j].box.as_array()
            if giou_kink_gap(proj.box, gt) < shift:
                return f"GIoU kink on box {k}"
            diff = np.abs(proj.box - gt)
            if diff[:4].min() < shift or diff[4] < margin * h * 2:
                return f"L1 kink on box {k}"
    return None


def run_trial(index: int, rng: np.random.Generator, cameras: Sequence[Camera], config: GradCheckConfig) -> TrialResult:
    cam, params, logits, targets, projections = _sample(rng, cameras)
    preds = [Pred2D(p.box, logits[k]) for k, p in enumerate(projections)]
    norm = Normalization(cam.height, DEFAULT_D_MAX)
    costs = build_cost_matrix([(p.box, softmax(p.logits)) for p in preds], [(t.box, t.class_id) for t in targets], norm=norm)
    assignment = hungarian(costs)
    result = TrialResult(index, cam.id, len(preds), len(targets))
    result.excluded = _exclusion(cam, projections, assignment, targets, config.margin, config.h)
    if result.excluded:
        return result

    fixed = {cam.id: assignment}
    targets_by_cam = {cam.id: targets}
    analytic = total_loss_grad_3d(params, logits, [cam], targets_by_cam, assignments=fixed)

    def loss_of_params(p):
        return total_loss_grad_3d(p, logits, [cam], targets_by_cam, assignments=fixed).loss.total

    def loss_of_logits(z):
        return total_loss_grad_3d(params, z, [cam], targets_by_cam, assignments=fixed).loss.total

    num_params = central_difference(loss_of_params, params, config.h)
    num_logits = central_difference(loss_of_logits, logits, config.h)
    result.rel_err_3d = max(
        relative_error(analytic.grad_params, num_params),
        relative_error(analytic.grad_logits, num_logits),
    )

    boxes = np.array([p.box for p in projections])
    _, g_box, g_logit = total_loss_grad_2d(assignment, preds, targets, norm=norm)

    def loss_of_boxes(b):
        return losses.total_loss(assignment, [Pred2D(b[k], logits[k]) for k in range(len(b))], targets, norm=norm).total

    num_boxes = central_difference(loss_of_boxes, boxes, config.h)
    result.rel_err_2d = max(relative_error(g_box, num_boxes), relative_error(g_logit, num_logits))
    return result


@contextlib.contextmanager
def _injected_fault():
    """Scale the GIoU gradient slightly, as a stand-in for a buggy build."""
    original = losses.giou_grad
    with mock.patch.object(losses, "giou_grad", lambda a, b: 1.01 * original(a, b)):
        yield


def run_grad_check(config: GradCheckConfig = GradCheckConfig(), inject_fault: bool = False) -> GradCheckReport:
    if config.trials < 1:
        raise ValueError("trials must be >= 1")
    cameras = make_rig(config.rig)
    report = GradCheckReport(config)
    guard = _injected_fault() if inject_fault else contextlib.nullcontext()
    with guard:
        for k in range(config.trials):
            rng = np.random.default_rng(derive_seed(config.seed, "gradcheck", k))
            report.trials.append(run_trial(k, rng, cameras, config))
    return report
