"""Toy detector and the 2D-supervised fine-tuning loop.

The detector stores one set of box parameters per scene plus a small
calibration shared by every scene (a log-scale on box size and a yaw
offset). Only the shared part lets 3D supervision on some scenes influence
the boxes of other scenes, which is what joint training relies on.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .depth import box_depth_from_map
from .errors import ConfigError, NoDepth
from .geometry import Box2D, Box3D, wrap_angle
from .losses import (
    DEFAULT_D_MAX,
    FocalParams,
    LossBreakdown,
    LossWeights,
    PairContribution,
    Target2D,
    focal_from_logits,
    softmax,
    total_loss_grad_3d,
)
from .matching import CostWeights, hungarian
from .metrics import TP_NAMES, MetricConfig, MetricReport, evaluate_detections
from .scenegen import FULL3D, ONLY2D, Dataset, NoiseConfig, Scene, derive_seed, perturb_predictions

log = logging.getLogger(__name__)

LOGIT_FLOOR = -40.0
# 3D supervision scales: meters for center and size, pi for yaw
SCALE_3D = np.array([10.0, 10.0, 10.0, 10.0, 10.0, 10.0, math.pi])


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 4.0
    cosine: bool = True
    epochs: int = 12
    loss_weights: LossWeights = LossWeights()
    focal: FocalParams = FocalParams()
    cost_weights: CostWeights = CostWeights()
    mix_ratio: float = 0.0
    seed: int = 0
    d_max: float = DEFAULT_D_MAX
    min_dim: float = 0.1
    shared_lr_scale: float = 0.003  # step multiplier for the calibration shared across scenes
    # step multiplier for each box's own yaw; a lone AABB barely constrains orientation,
    # so by default yaw moves only through the shared offset
    box_yaw_lr_scale: float = 0.0
    eval_split: str = ONLY2D
    # learning rate used for the full network in the original experiments; kept for reference only
    reference_lr: float = 2e-6

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not 0 <= self.mix_ratio <= 1:
            raise ConfigError("mix_ratio must lie in [0, 1]")
        if self.eval_split not in (ONLY2D, FULL3D, "all"):
            raise ConfigError("eval_split must be 'only2d', 'full3d' or 'all'")
        if not self.min_dim > 0:
            raise ConfigError("min_dim must be positive")
        if self.shared_lr_scale < 0 or self.box_yaw_lr_scale < 0:
            raise ConfigError("shared_lr_scale and box_yaw_lr_scale must be >= 0")


@dataclass
class SceneParams:
    params: np.ndarray  # (n, 7): center, raw dims, raw yaw
    logits: np.ndarray  # (n, n_classes + 1), background last
    velocity: np.ndarray  # (n, 2), not trained
    attributes: np.ndarray  # (n,), not trained

    def copy(self) -> "SceneParams":
        return SceneParams(self.params.copy(), self.logits.copy(), self.velocity.copy(), self.attributes.copy())


def logits_for(class_id: int, score: float, n_classes: int) -> np.ndarray:
    """Logits whose softmax puts ``score`` on ``class_id`` and splits the rest evenly."""
    others = n_classes  # remaining foreground slots plus background
    logits = np.full(n_classes + 1, LOGIT_FLOOR)
    rest = (1.0 - score) / others
    if rest > 0:
        logits[:] = max(math.log(rest), LOGIT_FLOOR)
    logits[class_id] = math.log(max(score, 1e-12))
    return logits


class ToyDetector:
    """Directly parameterized boxes standing in for a detection head."""

    def __init__(self, n_classes: int, scenes=None, log_scale=None, yaw_offset: float = 0.0, min_dim: float = 0.1):
        self.n_classes = int(n_classes)
        self.scenes: Dict[str, SceneParams] = dict(scenes or {})
        self.log_scale = np.zeros(3) if log_scale is None else np.asarray(log_scale, dtype=float).copy()
        self.yaw_offset = float(yaw_offset)
        self.min_dim = float(min_dim)

    @classmethod
    def from_boxes(cls, boxes_by_scene: Dict[str, Sequence[Box3D]], n_classes: int, min_dim: float = 0.1):
        scenes = {}
        for sid, boxes in boxes_by_scene.items():
            n = len(boxes)
            scenes[sid] = SceneParams(
                np.array([b.params for b in boxes]).reshape(n, 7),
                np.array([logits_for(b.class_id, b.score, n_classes) for b in boxes]).reshape(n, n_classes + 1),
                np.array([b.velocity for b in boxes]).reshape(n, 2),
                np.array([b.attribute_id for b in boxes], dtype=int),
            )
        return cls(n_classes, scenes, min_dim=min_dim)

    @classmethod
    def initialize(cls, dataset: Dataset, noise: NoiseConfig = NoiseConfig(), seed: int = 0, min_dim: float = 0.1):
        """Simulated pre-trained detector: perturbed truth for every scene."""
        n_classes = len(dataset.class_names)
        boxes = {
            s.id: perturb_predictions(s, noise, derive_seed(seed, "perturb", s.id), n_classes)
            for s in dataset.scenes
        }
        return cls.from_boxes(boxes, n_classes, min_dim)

    def copy(self) -> "ToyDetector":
        return ToyDetector(
            self.n_classes,
            {k: v.copy() for k, v in self.scenes.items()},
            self.log_scale,
            self.yaw_offset,
            self.min_dim,
        )

    def effective_params(self, scene_id: str) -> np.ndarray:
        raw = self.scenes[scene_id].params
        out = raw.copy()
        out[:, 3:6] = raw[:, 3:6] * np.exp(self.log_scale)
        out[:, 6] = wrap_angle(raw[:, 6] + self.yaw_offset)
        return out

    def logits(self, scene_id: str) -> np.ndarray:
        return self.scenes[scene_id].logits

    def boxes(self, scene_id: str) -> List[Box3D]:
        sp = self.scenes[scene_id]
        params = self.effective_params(scene_id)
        out = []
        for k in range(params.shape[0]):
            probs = softmax(sp.logits[k])
            cls_id = int(np.argmax(probs[:-1]))
            out.append(
                Box3D(params[k, :3], params[k, 3:6], params[k, 6], sp.velocity[k], cls_id, float(probs[cls_id]), int(sp.attributes[k]))
            )
        return out

    def apply_gradient(
        self,
        scene_id: str,
        grad_params,
        grad_logits,
        lr: float,
        shared_lr: Optional[float] = None,
        yaw_lr: Optional[float] = None,
    ) -> None:
        """One gradient-descent step; gradients are w.r.t. the effective box parameters.

        The shared calibration moves with ``shared_lr`` and each box's own
        yaw with ``yaw_lr``; both default to ``lr``.
        """
        shared_lr = lr if shared_lr is None else shared_lr
        yaw_lr = lr if yaw_lr is None else yaw_lr
        sp = self.scenes[scene_id]
        grad_params = np.asarray(grad_params, dtype=float)
        if grad_params.size == 0:
            return
        scale = np.exp(self.log_scale)
        eff_dims = sp.params[:, 3:6] * scale
        g_raw = grad_params.copy()
        g_raw[:, 3:6] = grad_params[:, 3:6] * scale
        g_log_scale = np.sum(grad_params[:, 3:6] * eff_dims, axis=0)
        g_yaw_offset = float(np.sum(grad_params[:, 6]))

        sp.params[:, :6] -= lr * g_raw[:, :6]
        sp.params[:, 6] -= yaw_lr * g_raw[:, 6]
        sp.logits -= lr * np.asarray(grad_logits, dtype=float)
        self.log_scale = self.log_scale - shared_lr * g_log_scale
        self.yaw_offset = wrap_angle(self.yaw_offset - shared_lr * g_yaw_offset)

        scale = np.exp(self.log_scale)
        sp.params[:, 3:6] = np.maximum(sp.params[:, 3:6], self.min_dim / scale)
        sp.params[:, 6] = wrap_angle(sp.params[:, 6])

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "n_classes": self.n_classes,
            "log_scale": self.log_scale.tolist(),
            "yaw_offset": self.yaw_offset,
            "min_dim": self.min_dim,
            "scenes": {
                sid: {
                    "params": sp.params.tolist(),
                    "logits": sp.logits.tolist(),
                    "velocity": sp.velocity.tolist(),
                    "attributes": sp.attributes.tolist(),
                }
                for sid, sp in sorted(self.scenes.items())
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ToyDetector":
        if data.get("version") != 1:
            raise ConfigError(f"unsupported detector parameter version {data.get('version')!r}")
        n_classes = int(data["n_classes"])
        scenes = {}
        for sid, d in data["scenes"].items():
            n = len(d["params"])
            scenes[sid] = SceneParams(
                np.array(d["params"], dtype=float).reshape(n, 7),
                np.array(d["logits"], dtype=float).reshape(n, n_classes + 1),
                np.array(d["velocity"], dtype=float).reshape(n, 2),
                np.array(d["attributes"], dtype=int).reshape(n),
            )
        return cls(n_classes, scenes, data["log_scale"], data["yaw_offset"], data.get("min_dim", 0.1))


# ---------------------------------------------------------------- supervision targets


def camera_targets(scene: Scene) -> Dict[str, List[Target2D]]:
    """2D targets per camera, with depth read from the scene's depth maps."""
    targets = {}
    for cam in scene.cameras:
        dmap = scene.depth_maps.get(cam.id)
        items = []
        for ann in scene.ann2d.get(cam.id, ()):
            depth = ann.box.depth
            if dmap is not None:
                try:
                    depth = box_depth_from_map(dmap, ann.box)
                except NoDepth:
                    log.warning("scene %s camera %s: no depth under a 2D label, using its own depth", scene.id, cam.id)
            items.append(Target2D(Box2D(ann.box.x, ann.box.y, ann.box.w, ann.box.h, depth), ann.class_id))
        targets[cam.id] = items
    return targets


@dataclass
class StepResult:
    loss: LossBreakdown
    grad_params: np.ndarray
    grad_logits: np.ndarray
    details: object = None


def loss_2d(detector: ToyDetector, scene: Scene, config: TrainConfig, targets=None):
    """Multi-camera 2D loss and gradient for one scene, without updating."""
    if targets is None:
        targets = camera_targets(scene)
    return total_loss_grad_3d(
        detector.effective_params(scene.id),
        detector.logits(scene.id),
        scene.cameras,
        targets,
        config.loss_weights,
        config.focal,
        config.d_max,
        config.cost_weights,
    )


def step_2d(detector: ToyDetector, scene: Scene, config: TrainConfig, lr: Optional[float] = None, targets=None) -> StepResult:
    """Project, match, and take one gradient step from a scene's 2D labels."""
    if scene.label_mode != ONLY2D:
        raise ValueError(f"step_2d expects an only2d scene, {scene.id} is {scene.label_mode}")
    lr = config.lr if lr is None else lr
    result = loss_2d(detector, scene, config, targets)
    if not result.visible.any():
        warnings.warn(f"scene {scene.id}: no prediction is visible in any camera; skipping update", stacklevel=2)
        return StepResult(result.loss, result.grad_params, result.grad_logits, result)
    detector.apply_gradient(
        scene.id, result.grad_params, result.grad_logits, lr, lr * config.shared_lr_scale, lr * config.box_yaw_lr_scale
    )
    return StepResult(result.loss, result.grad_params, result.grad_logits, result)


def loss_3d(params, logits, truth: Sequence[Box3D], config: TrainConfig):
    """Direct 3D supervision: normalized L1 on box parameters plus focal on class.

    Predictions are matched to truth by Hungarian assignment on 3D center
    distance. Returns ``(breakdown, grad_params, grad_logits)``; the IoU
    component is always 0.
    """
    params = np.asarray(params, dtype=float).reshape(-1, 7)
    logits = np.asarray(logits, dtype=float)
    n = params.shape[0]
    g_params = np.zeros_like(params)
    g_logits = np.zeros_like(logits)
    if n == 0:
        return LossBreakdown.zero(), g_params, g_logits
    bg = logits.shape[1] - 1
    pairs = []
    if truth:
        gt_params = np.array([b.params for b in truth])
        dist = np.linalg.norm(params[:, None, :3] - gt_params[None, :, :3], axis=2)
        pairs = hungarian(dist).pairs
    matched = {i for i, _ in pairs}
    n_pairs = len(pairs)
    w = config.loss_weights
    sum_cls = sum_reg = 0.0
    contributions = []
    for i, j in pairs:
        diff = params[i] - gt_params[j]
        diff[6] = wrap_angle(diff[6])
        reg = float(np.sum(np.abs(diff) / SCALE_3D))
        cls, d_cls = focal_from_logits(logits[i], truth[j].class_id, config.focal)
        sum_cls += cls
        sum_reg += reg
        g_params[i] += w.lambda_reg / n_pairs * np.sign(diff) / SCALE_3D
        g_logits[i] += w.lambda_cls / n * d_cls
        contributions.append(PairContribution(i, j, cls, reg, 0.0))
    for i in range(n):
        if i in matched:
            continue
        cls, d_cls = focal_from_logits(logits[i], bg, config.focal)
        sum_cls += cls
        g_logits[i] += w.lambda_cls / n * d_cls
        contributions.append(PairContribution(i, None, cls))
    l_cls = sum_cls / n
    l_reg = sum_reg / n_pairs if n_pairs else 0.0
    total = w.lambda_cls * l_cls + w.lambda_reg * l_reg
    return LossBreakdown(l_cls, l_reg, 0.0, total, contributions), g_params, g_logits


def step_3d(detector: ToyDetector, scene: Scene, config: TrainConfig, lr: Optional[float] = None) -> StepResult:
    """One gradient step from a scene's 3D labels."""
    lr = config.lr if lr is None else lr
    breakdown, g_params, g_logits = loss_3d(
        detector.effective_params(scene.id), detector.logits(scene.id), scene.gt_boxes, config
    )
    detector.apply_gradient(scene.id, g_params, g_logits, lr, lr * config.shared_lr_scale, lr * config.box_yaw_lr_scale)
    return StepResult(breakdown, g_params, g_logits)


# ---------------------------------------------------------------- training loop


@dataclass
class HistoryRow:
    epoch: int
    lr: float
    l_cls: float
    l_reg: float
    l_iou: float
    total: float
    report: MetricReport

    def values(self) -> list:
        tp = self.report.tp
        return [
            self.epoch,
            self.lr,
            self.l_cls,
            self.l_reg,
            self.l_iou,
            self.total,
            self.report.mAP,
            self.report.NDS,
            *(getattr(tp, name) for name in TP_NAMES),
        ]


HISTORY_COLUMNS = ("epoch", "lr", "l_cls", "l_reg", "l_iou", "total", "mAP", "NDS", *TP_NAMES)


def history_to_csv(history: Sequence[HistoryRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HISTORY_COLUMNS)
    for row in history:
        writer.writerow([v if isinstance(v, int) else repr(float(v)) for v in row.values()])
    return buf.getvalue()


def evaluation_scenes(dataset: Dataset, split: str) -> List[Scene]:
    if split == "all":
        return list(dataset.scenes)
    return dataset.split(split)


def metric_config_for(dataset: Dataset, base: Optional[MetricConfig] = None) -> MetricConfig:
    base = base or MetricConfig()
    return replace(base, class_names=dataset.class_names)


def evaluate(detector: ToyDetector, scenes: Sequence[Scene], metric_config: MetricConfig = MetricConfig()) -> MetricReport:
    """Metrics of the detector's boxes against the scenes' held-out 3D truth."""
    preds = {s.id: detector.boxes(s.id) for s in scenes}
    truth = {s.id: s.evaluation_boxes() for s in scenes}
    return evaluate_detections(preds, truth, metric_config)


def center_errors(detector: ToyDetector, scenes: Sequence[Scene]) -> np.ndarray:
    """3D center distance of every truth box to its Hungarian-matched prediction."""
    out = []
    for s in scenes:
        truth = s.evaluation_boxes()
        params = detector.effective_params(s.id)
        if not truth or params.shape[0] == 0:
            continue
        gt = np.array([b.center for b in truth])
        dist = np.linalg.norm(params[:, None, :3] - gt[None], axis=2)
        for i, j in hungarian(dist).pairs:
            out.append(dist[i, j])
    return np.array(out)


def _lr_at(config: TrainConfig, step: int, total_steps: int) -> float:
    if not config.cosine or total_steps <= 0:
        return config.lr
    return 0.5 * config.lr * (1.0 + math.cos(math.pi * step / total_steps))


def epoch_schedule(n2: int, n3_pool: int, mix_ratio: float, rng: np.random.Generator, cursor: List[int]):
    """Shuffled list of ``("2d", k)`` / ``("3d", k)`` visits for one epoch.

    Every 2D scene is visited once; 3D visits are added so they make up
    ``mix_ratio`` of the epoch, cycling through the 3D pool.
    """
    visits = [("2d", k) for k in range(n2)]
    if mix_ratio > 0 and n3_pool:
        n3 = n3_pool if mix_ratio >= 1 else int(round(n2 * mix_ratio / (1.0 - mix_ratio)))
        for _ in range(n3):
            visits.append(("3d", cursor[0] % n3_pool))
            cursor[0] += 1
    if mix_ratio >= 1:
        visits = [v for v in visits if v[0] == "3d"]
    order = rng.permutation(len(visits))
    return [visits[k] for k in order]


def finetune(
    detector: ToyDetector,
    dataset: Dataset,
    config: TrainConfig = TrainConfig(),
    metric_config: Optional[MetricConfig] = None,
    eval_scenes: Optional[Sequence[Scene]] = None,
) -> List[HistoryRow]:
    """Joint 2D/3D fine-tuning; updates ``detector`` in place.

    Row 0 of the history is the evaluation before any update.
    """
    metric_config = metric_config_for(dataset, metric_config)
    train2d = dataset.split(ONLY2D)
    train3d = dataset.split(FULL3D)
    if eval_scenes is None:
        eval_scenes = evaluation_scenes(dataset, config.eval_split)
    if config.mix_ratio > 0 and not train3d:
        warnings.warn("mix_ratio > 0 but the dataset has no full3d scenes; training on 2D labels only", stacklevel=2)
    targets = {s.id: camera_targets(s) for s in train2d}

    def mean_losses(items: List[LossBreakdown]):
        if not items:
            return (math.nan,) * 4
        return tuple(float(np.mean([getattr(b, k) for b in items])) for k in ("l_cls", "l_reg", "l_iou", "total"))

    initial = [loss_2d(detector, s, config, targets[s.id]).loss for s in train2d]
    history = [HistoryRow(0, _lr_at(config, 0, 1), *mean_losses(initial), evaluate(detector, eval_scenes, metric_config))]

    rng = np.random.default_rng(derive_seed(config.seed, "schedule"))
    pool3d = [train3d[k] for k in rng.permutation(len(train3d))] if train3d else []
    cursor = [0]
    schedules = [epoch_schedule(len(train2d), len(pool3d), config.mix_ratio, rng, cursor) for _ in range(config.epochs)]
    total_steps = sum(len(s) for s in schedules)
    step = 0
    for epoch, schedule in enumerate(schedules, start=1):
        epoch_lr = _lr_at(config, step, total_steps)
        losses = []
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            for kind, k in schedule:
                lr = _lr_at(config, step, total_steps)
                if kind == "2d":
                    scene = train2d[k]
                    losses.append(step_2d(detector, scene, config, lr, targets[scene.id]).loss)
                else:
                    step_3d(detector, pool3d[k], config, lr)
                step += 1
        report = evaluate(detector, eval_scenes, metric_config)
        history.append(HistoryRow(epoch, epoch_lr, *mean_losses(losses), report))
        log.info("epoch %d: loss %.5f mAP %.4f NDS %.4f", epoch, history[-1].total, report.mAP, report.NDS)
    return history
