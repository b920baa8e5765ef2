"""Center-distance detection metrics: per-class AP, TP errors, mAP and NDS.

Follows the nuScenes detection conventions: greedy score-ordered matching
on BEV center distance, a 101-point precision/recall curve with low recall
and low precision clipped away, and NDS built from mAP and five clamped TP
errors. A class with no ground truth and no predictions in the evaluated
set is left out of every average.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import Box3D, wrap_angle

TP_NAMES = ("mATE", "mASE", "mAOE", "mAVE", "mAAE")


@dataclass(frozen=True)
class MetricConfig:
    class_names: Tuple[str, ...] = ("car", "pedestrian", "cyclist")
    thresholds: Tuple[float, ...] = (0.5, 1.0, 2.0, 4.0)
    tp_threshold: float = 2.0
    min_recall: float = 0.1
    min_precision: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "class_names", tuple(self.class_names))
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))
        if list(self.thresholds) != sorted(self.thresholds) or not self.thresholds:
            raise ValueError("thresholds must be a non-empty ascending list")
        if not (0 <= self.min_recall < 1 and 0 <= self.min_precision < 1):
            raise ValueError("min_recall and min_precision must lie in [0, 1)")


@dataclass(frozen=True)
class TPErrors:
    mATE: float = 1.0
    mASE: float = 1.0
    mAOE: float = 1.0
    mAVE: float = 1.0
    mAAE: float = 1.0

    def as_tuple(self):
        return tuple(getattr(self, name) for name in TP_NAMES)


@dataclass
class MetricReport:
    ap: Dict[str, Dict[float, float]]
    tp: TPErrors
    mAP: float
    NDS: float
    class_tp: Dict[str, TPErrors] = field(default_factory=dict)

    def to_rows(self) -> List[Tuple[str, str, str, float]]:
        """Rows ``(metric, class, threshold, value)`` in fixed order.

        AP cells come first (class order, then ascending threshold), then the
        per-class TP errors, then the summary metrics with empty class and
        threshold fields.
        """
        rows = []
        for cls, cells in self.ap.items():
            for th, value in cells.items():
                rows.append(("AP", cls, repr(float(th)), value))
        for cls, errs in self.class_tp.items():
            for name in TP_NAMES:
                rows.append((name[1:], cls, "", getattr(errs, name)))
        rows.append(("mAP", "", "", self.mAP))
        rows.append(("NDS", "", "", self.NDS))
        for name in TP_NAMES:
            rows.append((name, "", "", getattr(self.tp, name)))
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["metric", "class", "threshold", "value"])
        for metric, cls, th, value in self.to_rows():
            writer.writerow([metric, cls, th, repr(float(value))])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"mAP: {self.mAP:.4f}", f"NDS: {self.NDS:.4f}"]
        lines += [f"{name}: {getattr(self.tp, name):.4f}" for name in TP_NAMES]
        if self.ap:
            ths = next(iter(self.ap.values())).keys()
            lines.append("")
            lines.append("class".ljust(12) + "".join(f"AP@{t:g}m".rjust(10) for t in ths))
            for cls, cells in self.ap.items():
                lines.append(cls.ljust(12) + "".join(f"{v:10.4f}" for v in cells.values()))
        return "\n".join(lines) + "\n"


def bev_distance(a: Box3D, b: Box3D) -> float:
    return math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1])


def _accumulate(preds, gts, threshold):
    """Greedy matching over several samples.

    ``preds``/``gts`` are lists of ``(sample_key, Box3D)``. Returns the TP flag
    of each prediction in descending-score order and the matched
    ``(pred, gt)`` boxes.
    """
    order = sorted(range(len(preds)), key=lambda k: -preds[k][1].score)
    taken = [False] * len(gts)
    by_sample: Dict[object, List[int]] = {}
    for j, (key, _) in enumerate(gts):
        by_sample.setdefault(key, []).append(j)
    labels, pairs = [], []
    for k in order:
        key, box = preds[k]
        best_j, best_d = None, math.inf
        for j in by_sample.get(key, ()):
            if taken[j]:
                continue
            d = bev_distance(box, gts[j][1])
            if d < best_d:
                best_j, best_d = j, d
        if best_j is not None and best_d < threshold:
            taken[best_j] = True
            labels.append(True)
            pairs.append((box, gts[best_j][1]))
        else:
            labels.append(False)
    return labels, pairs


def match_by_center_distance(preds: Sequence[Box3D], gts: Sequence[Box3D], threshold: float):
    """Greedy score-ordered BEV center matching within one sample.

    Returns ``(labels, pairs)``: TP flags for the predictions sorted by
    descending score, and the matched ``(pred, gt)`` boxes.
    """
    return _accumulate([(0, p) for p in preds], [(0, g) for g in gts], threshold)


def average_precision(labels, n_gt: int, config: MetricConfig = MetricConfig()) -> float:
    """Clipped, normalized area under the 101-point precision/recall curve.

    ``labels`` are TP flags of the predictions in descending score order.
    """
    labels = np.asarray(labels, dtype=bool)
    if n_gt == 0 or labels.size == 0:
        return 0.0
    tp = np.cumsum(labels)
    fp = np.cumsum(~labels)
    precision = tp / (tp + fp)
    recall = tp / float(n_gt)
    grid = np.linspace(0.0, 1.0, 101)
    curve = np.interp(grid, recall, precision, right=0.0)
    start = int(round(100 * config.min_recall)) + 1
    curve = curve[start:] - config.min_precision
    curve[curve < 0] = 0.0
    # clamp away rounding above 1 for a perfect curve
    return min(float(np.mean(curve)) / (1.0 - config.min_precision), 1.0)


def mean_ap(table: Dict[str, Dict[float, float]]) -> float:
    cells = [v for row in table.values() for v in row.values()]
    return float(np.mean(cells)) if cells else 0.0


def scale_error(pred: Box3D, gt: Box3D) -> float:
    """1 - IoU of the two boxes after aligning centers and yaw."""
    inter = float(np.prod(np.minimum(pred.dims, gt.dims)))
    union = float(np.prod(pred.dims)) + float(np.prod(gt.dims)) - inter
    return 1.0 - inter / union


def orientation_error(pred: Box3D, gt: Box3D) -> float:
    return abs(wrap_angle(pred.yaw - gt.yaw))


def tp_errors(pairs_by_class: Dict[str, List[Tuple[Box3D, Box3D]]]) -> Tuple[TPErrors, Dict[str, TPErrors]]:
    """Mean TP errors per class, then averaged over classes.

    A class without any matched pair scores 1 on every error.
    """
    per_class = {}
    for cls, pairs in pairs_by_class.items():
        if not pairs:
            per_class[cls] = TPErrors()
            continue
        ate = np.mean([bev_distance(p, g) for p, g in pairs])
        ase = np.mean([scale_error(p, g) for p, g in pairs])
        aoe = np.mean([orientation_error(p, g) for p, g in pairs])
        ave = np.mean([math.dist(p.velocity, g.velocity) for p, g in pairs])
        aae = 1.0 - np.mean([p.attribute_id == g.attribute_id for p, g in pairs])
        per_class[cls] = TPErrors(float(ate), float(ase), float(aoe), float(ave), float(aae))
    if not per_class:
        return TPErrors(), per_class
    means = [float(np.mean([getattr(e, name) for e in per_class.values()])) for name in TP_NAMES]
    return TPErrors(*means), per_class


def nds(mAP: float, tp: TPErrors) -> float:
    """Detection score: (5 mAP + sum of (1 - min(1, err))) / 10."""
    penalty = sum(1.0 - min(1.0, err) for err in tp.as_tuple())
    return (5.0 * mAP + penalty) / 10.0


def evaluate_detections(
    preds_by_sample: Dict[object, Sequence[Box3D]],
    gts_by_sample: Dict[object, Sequence[Box3D]],
    config: MetricConfig = MetricConfig(),
    override_tp: Optional[Dict[str, float]] = None,
) -> MetricReport:
    """Score predictions against ground truth over a set of samples.

    ``override_tp`` pins selected TP errors (e.g. ``{"mAVE": 1, "mAAE": 1}``
    for data without velocity or attribute labels).
    """
    keys = list(gts_by_sample) + [k for k in preds_by_sample if k not in gts_by_sample]
    ap_table: Dict[str, Dict[float, float]] = {}
    tp_pairs: Dict[str, List[Tuple[Box3D, Box3D]]] = {}
    for cls_id, cls in enumerate(config.class_names):
        preds = [(k, b) for k in keys for b in preds_by_sample.get(k, ()) if b.class_id == cls_id]
        gts = [(k, b) for k in keys for b in gts_by_sample.get(k, ()) if b.class_id == cls_id]
        if not preds and not gts:
            continue
        ap_table[cls] = {}
        for th in config.thresholds:
            labels, _ = _accumulate(preds, gts, th)
            ap_table[cls][th] = average_precision(labels, len(gts), config)
        _, pairs = _accumulate(preds, gts, config.tp_threshold)
        tp_pairs[cls] = pairs
    m_ap = mean_ap(ap_table)
    tp, per_class = tp_errors(tp_pairs)
    if override_tp:
        tp = TPErrors(**{**{n: getattr(tp, n) for n in TP_NAMES}, **override_tp})
    return MetricReport(ap_table, tp, m_ap, nds(m_ap, tp), per_class)
