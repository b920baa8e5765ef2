"""Run configuration for the command line: one YAML (or JSON) file, strict keys.

Layout, every key optional::

    rig:      {preset, width, height, hfov_deg, mount_height}
    scene:    SceneConfig fields (min_boxes, max_boxes, ..., classes: [{name, dims, speed}, ...])
    noise:    NoiseConfig fields
    train:    TrainConfig fields; loss_weights, focal and cost_weights are nested maps
    metrics:  MetricConfig fields
    init_seed: seed of the simulated pre-trained detector

Unknown keys anywhere raise ``ConfigError``. ``RunConfig.to_dict`` writes the
fully resolved values back out, so a saved config documents every default.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

import yaml

from .errors import ConfigError
from .losses import FocalParams, LossWeights
from .matching import CostWeights
from .metrics import MetricConfig
from .scenegen import NoiseConfig, RigConfig, SceneConfig
from .finetune import TrainConfig

# the rig the acceptance runs use: the default preset at quarter resolution
ACCEPTANCE_RIG = RigConfig(width=400, height=225)
# pre-trained detector of the acceptance runs: random errors plus a shared size/yaw bias
ACCEPTANCE_NOISE = NoiseConfig(dims_bias=0.1, yaw_bias=0.1)

_NESTED_TRAIN = {"loss_weights": LossWeights, "focal": FocalParams, "cost_weights": CostWeights}


def _build(cls, data: Optional[Mapping], where: str, nested: Optional[Dict[str, type]] = None):
    """Instantiate a frozen dataclass from a mapping, rejecting unknown keys."""
    if data is None:
        return cls()
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if nested and key in nested:
            value = _build(nested[key], value, f"{where}.{key}")
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass(frozen=True)
class RunConfig:
    rig: RigConfig = ACCEPTANCE_RIG
    scene: SceneConfig = SceneConfig()
    noise: NoiseConfig = ACCEPTANCE_NOISE
    train: TrainConfig = TrainConfig()
    metrics: MetricConfig = MetricConfig()
    init_seed: int = 0

    @classmethod
    def from_dict(cls, data: Optional[Mapping]) -> "RunConfig":
        data = dict(data or {})
        unknown = sorted(set(data) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigError(f"unknown top-level key(s) {', '.join(unknown)}")
        scene = SceneConfig()
        if data.get("scene") is not None:
            if not isinstance(data["scene"], Mapping):
                raise ConfigError("scene: expected a mapping")
            try:
                scene = SceneConfig.from_dict(data["scene"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"scene: {exc}") from exc
        init_seed = data.get("init_seed", 0)
        if not isinstance(init_seed, int) or isinstance(init_seed, bool):
            raise ConfigError("init_seed must be an integer")
        return cls(
            rig=_build(RigConfig, data.get("rig"), "rig") if "rig" in data else ACCEPTANCE_RIG,
            scene=scene,
            noise=_build(NoiseConfig, data.get("noise"), "noise") if "noise" in data else ACCEPTANCE_NOISE,
            train=_build(TrainConfig, data.get("train"), "train", _NESTED_TRAIN),
            metrics=_build(MetricConfig, data.get("metrics"), "metrics"),
            init_seed=init_seed,
        )

    def to_dict(self) -> Dict[str, Any]:
        def plain(obj):
            if dataclasses.is_dataclass(obj):
                return {f.name: plain(getattr(obj, f.name)) for f in fields(obj)}
            if isinstance(obj, (tuple, list)):
                return [plain(v) for v in obj]
            return obj

        out = {
            "rig": plain(self.rig),
            "scene": self.scene.to_dict(),
            "noise": plain(self.noise),
            "train": plain(self.train),
            "metrics": plain(self.metrics),
            "init_seed": self.init_seed,
        }
        return out

    def with_train(self, **overrides) -> "RunConfig":
        """Copy with selected ``train`` fields replaced; ``None`` values are ignored."""
        overrides = {k: v for k, v in overrides.items() if v is not None}
        if not overrides:
            return self
        try:
            return replace(self, train=replace(self.train, **overrides))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def load_run_config(path) -> RunConfig:
    """Read a YAML or JSON config file (JSON is valid YAML)."""
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    if data is not None and not isinstance(data, Mapping):
        raise ConfigError(f"{path}: top level must be a mapping")
    return RunConfig.from_dict(data)


def dump_run_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"
