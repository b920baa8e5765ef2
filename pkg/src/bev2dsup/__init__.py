"""Fine-tuning 3D box predictions with 2D image labels.

Modules: ``geometry`` (projection and its Jacobian), ``matching`` (cost and
assignment), ``losses`` (focal, L1, GIoU and the multi-camera gradient),
``depth`` (depth maps), ``metrics`` (mAP/NDS), ``scenegen`` (synthetic
datasets), ``finetune`` (toy detector and training loop), ``cli``.
"""

from .errors import (
    BehindCamera,
    Bev2DError,
    ChecksumMismatch,
    ConfigError,
    EmptyMatch,
    FormatError,
    LabelAccessError,
    NoDepth,
    NotVisible,
    PlacementFailure,
    SizeLimit,
    UnsupportedVersion,
)
from .estimator import BoxFineTuner
from .finetune import ToyDetector, TrainConfig, finetune
from .geometry import Box2D, Box3D, Camera, Intrinsics, RigidTransform, project_box, project_box_jacobian
from .losses import FocalParams, LossBreakdown, LossWeights, focal_loss, giou, total_loss, total_loss_grad_3d
from .matching import CostWeights, brute_force_assignment, build_cost_matrix, hungarian
from .metrics import MetricConfig, MetricReport, evaluate_detections, nds
from .scenegen import Dataset, NoiseConfig, RigConfig, SceneConfig, generate_dataset, read_dataset, write_dataset

__version__ = "0.1.0"
