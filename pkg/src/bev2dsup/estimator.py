"""scikit-learn style wrapper around the fine-tuning loop."""

from __future__ import annotations

from typing import Dict, List, Optional, Sequence, Union

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .errors import ConfigError
from .finetune import ToyDetector, TrainConfig, evaluate, evaluation_scenes, finetune, metric_config_for
from .geometry import Box3D
from .metrics import MetricConfig, MetricReport
from .scenegen import Dataset, NoiseConfig, Scene


def _scenes_of(data: Union[Dataset, Sequence[Scene]], split: str) -> List[Scene]:
    if isinstance(data, Dataset):
        return evaluation_scenes(data, split)
    return list(data)


class BoxFineTuner(BaseEstimator):
    """Fine-tune a simulated pre-trained detector on a dataset's 2D (and 3D) labels.

    ``fit`` takes a ``Dataset``; when no starting ``detector`` is given one
    is drawn from ``noise`` with ``init_seed``. ``predict`` returns boxes per
    scene and ``score`` the detection score (NDS) on held-out 3D truth.
    """

    def __init__(
        self,
        lr: float = 4.0,
        epochs: int = 12,
        mix_ratio: float = 0.0,
        cosine: bool = True,
        shared_lr_scale: float = 0.003,
        box_yaw_lr_scale: float = 0.0,
        seed: int = 0,
        init_seed: int = 0,
        noise: Optional[NoiseConfig] = None,
        eval_split: str = "only2d",
    ):
        self.lr = lr
        self.epochs = epochs
        self.mix_ratio = mix_ratio
        self.cosine = cosine
        self.shared_lr_scale = shared_lr_scale
        self.box_yaw_lr_scale = box_yaw_lr_scale
        self.seed = seed
        self.init_seed = init_seed
        self.noise = noise
        self.eval_split = eval_split

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr,
            cosine=self.cosine,
            epochs=self.epochs,
            mix_ratio=self.mix_ratio,
            seed=self.seed,
            shared_lr_scale=self.shared_lr_scale,
            box_yaw_lr_scale=self.box_yaw_lr_scale,
            eval_split=self.eval_split,
        )

    def fit(self, dataset: Dataset, detector: Optional[ToyDetector] = None) -> "BoxFineTuner":
        if not isinstance(dataset, Dataset):
            raise ConfigError(f"fit expects a Dataset, got {type(dataset).__name__}")
        config = self.train_config()
        if detector is None:
            detector = ToyDetector.initialize(dataset, self.noise or NoiseConfig(), self.init_seed, config.min_dim)
        self.initial_detector_ = detector.copy()
        self.detector_ = detector.copy()
        self.metric_config_ = metric_config_for(dataset)
        self.history_ = finetune(self.detector_, dataset, config, self.metric_config_)
        return self

    def predict(self, data: Union[Dataset, Sequence[Scene]]) -> Dict[str, List[Box3D]]:
        check_is_fitted(self, "detector_")
        return {s.id: self.detector_.boxes(s.id) for s in _scenes_of(data, self.eval_split)}

    def evaluate(self, data: Union[Dataset, Sequence[Scene]], metric_config: Optional[MetricConfig] = None) -> MetricReport:
        check_is_fitted(self, "detector_")
        return evaluate(self.detector_, _scenes_of(data, self.eval_split), metric_config or self.metric_config_)

    def score(self, data: Union[Dataset, Sequence[Scene]]) -> float:
        return self.evaluate(data).NDS
