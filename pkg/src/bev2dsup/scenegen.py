"""Deterministic synthetic surround-camera scenes and their on-disk format.

Dataset directory layout (all records carry ``"version": 1``)::

    manifest.json               rig, classes, split, seeds, sha256 of every file
    scenes.jsonl                one scene record per line
    depth/<scene>_<cam>.dpm     one depth map per scene and camera

Scene record fields: ``version``, ``id``, ``label_mode`` (``full3d`` or
``only2d``), ``gt_boxes`` (list for full3d, null for only2d), ``eval_gt``
(held-out boxes of an only2d scene, read only by the evaluator; null for
full3d), ``ann2d`` (camera id -> list of ``{"box": [x, y, w, h, depth],
"class": c, "attribute": a}``) and ``depth`` (camera id -> relative path).
Boxes are ``{"center": [x, y, z], "dims": [l, w, h], "yaw": r, "vel": [vx,
vy], "class": c, "attribute": a}`` in the ego frame.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .depth import DepthMap, decode_depth_map, encode_depth_map, render_synthetic_depth
from .errors import ChecksumMismatch, ConfigError, FormatError, LabelAccessError, PlacementFailure, UnsupportedVersion
from .geometry import Box2D, Box3D, Camera, Intrinsics, RigidTransform, project_box

FORMAT_VERSION = 1
MAX_REJECTIONS = 1000
FULL3D, ONLY2D = "full3d", "only2d"

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(master: int, *keys) -> int:
    """Independent child seed for ``keys`` (ints or strings) under ``master``."""
    state = splitmix64(int(master) & _MASK64)
    for key in keys:
        if isinstance(key, str):
            key = int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "little")
        state = splitmix64(state ^ (int(key) & _MASK64))
    return state


# ---------------------------------------------------------------- camera rigs

RIG_PRESETS = {
    # six cameras every 60 degrees, nuScenes-like surround view
    "surround6": (
        ("CAM_FRONT", 0.0),
        ("CAM_FRONT_LEFT", 60.0),
        ("CAM_BACK_LEFT", 120.0),
        ("CAM_BACK", 180.0),
        ("CAM_BACK_RIGHT", -120.0),
        ("CAM_FRONT_RIGHT", -60.0),
    ),
    # front and side cameras only, Waymo-like
    "front5": (
        ("FRONT", 0.0),
        ("FRONT_LEFT", 45.0),
        ("SIDE_LEFT", 90.0),
        ("FRONT_RIGHT", -45.0),
        ("SIDE_RIGHT", -90.0),
    ),
}


@dataclass(frozen=True)
class RigConfig:
    preset: str = "surround6"
    width: int = 1600
    height: int = 900
    hfov_deg: float = 70.0
    mount_height: float = 1.6

    def __post_init__(self):
        if self.preset not in RIG_PRESETS:
            raise ConfigError(f"unknown rig preset {self.preset!r}; choose from {sorted(RIG_PRESETS)}")
        if self.width <= 0 or self.height <= 0 or not 0 < self.hfov_deg < 180:
            raise ConfigError("rig needs positive image size and 0 < hfov < 180")


def camera_looking_at(cam_id: str, heading_deg: float, rig: RigConfig) -> Camera:
    """Level pinhole camera at the rig mount, looking along ``heading_deg`` (ego yaw)."""
    th = math.radians(heading_deg)
    forward = np.array([math.cos(th), math.sin(th), 0.0])
    right = np.array([math.sin(th), -math.cos(th), 0.0])
    down = np.array([0.0, 0.0, -1.0])
    rotation = np.stack([right, down, forward])
    position = np.array([0.0, 0.0, rig.mount_height])
    f = (rig.width / 2.0) / math.tan(math.radians(rig.hfov_deg) / 2.0)
    intr = Intrinsics(f, f, rig.width / 2.0, rig.height / 2.0)
    return Camera(cam_id, intr, RigidTransform(rotation, -rotation @ position), rig.width, rig.height)


def make_rig(rig: RigConfig = RigConfig()) -> Tuple[Camera, ...]:
    return tuple(camera_looking_at(cid, heading, rig) for cid, heading in RIG_PRESETS[rig.preset])


# ---------------------------------------------------------------- scene config


@dataclass(frozen=True)
class ClassSpec:
    name: str
    dims: Tuple[float, float, float]
    speed: float  # typical speed of a moving instance, m/s
    n_attributes: int = 2


DEFAULT_CLASSES = (
    ClassSpec("car", (4.5, 1.9, 1.6), 8.0),
    ClassSpec("pedestrian", (0.7, 0.7, 1.75), 1.3),
    ClassSpec("cyclist", (1.8, 0.7, 1.6), 4.0),
)


@dataclass(frozen=True)
class SceneConfig:
    min_boxes: int = 4
    max_boxes: int = 10
    min_radius: float = 8.0
    max_radius: float = 40.0
    classes: Tuple[ClassSpec, ...] = DEFAULT_CLASSES
    class_probs: Tuple[float, ...] = (0.6, 0.25, 0.15)
    dims_jitter: float = 0.08  # log-normal sigma of per-instance size variation

    def __post_init__(self):
        if not 0 <= self.min_boxes <= self.max_boxes:
            raise ConfigError("need 0 <= min_boxes <= max_boxes")
        if not 0 < self.min_radius < self.max_radius:
            raise ConfigError("need 0 < min_radius < max_radius")
        if len(self.class_probs) != len(self.classes) or abs(sum(self.class_probs) - 1) > 1e-9:
            raise ConfigError("class_probs must match classes and sum to 1")

    @property
    def class_names(self) -> Tuple[str, ...]:
        return tuple(c.name for c in self.classes)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["classes"] = [asdict(c) for c in self.classes]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SceneConfig":
        data = dict(data)
        if "classes" in data:
            data["classes"] = tuple(
                ClassSpec(c["name"], tuple(c["dims"]), c["speed"], c.get("n_attributes", 2)) for c in data["classes"]
            )
        if "class_probs" in data:
            data["class_probs"] = tuple(data["class_probs"])
        return cls(**data)


# ---------------------------------------------------------------- scenes


@dataclass(frozen=True)
class Annotation2D:
    box: Box2D
    class_id: int
    attribute_id: int = 0


@dataclass(eq=False)
class Scene:
    id: str
    cameras: Tuple[Camera, ...]
    ann2d: Dict[str, List[Annotation2D]]
    depth_maps: Dict[str, DepthMap]
    label_mode: str
    _boxes: Tuple[Box3D, ...] = field(repr=False, default=())

    def __post_init__(self):
        if self.label_mode not in (FULL3D, ONLY2D):
            raise ValueError(f"label_mode must be {FULL3D!r} or {ONLY2D!r}")
        self._boxes = tuple(self._boxes)

    @property
    def gt_boxes(self) -> Tuple[Box3D, ...]:
        """3D labels; only scenes labelled ``full3d`` expose them."""
        if self.label_mode != FULL3D:
            raise LabelAccessError(f"scene {self.id} carries 2D labels only")
        return self._boxes

    def evaluation_boxes(self) -> Tuple[Box3D, ...]:
        """Held-out 3D truth for metric computation; never used for training."""
        return self._boxes

    def camera(self, cam_id: str) -> Camera:
        for cam in self.cameras:
            if cam.id == cam_id:
                return cam
        raise KeyError(f"scene {self.id} has no camera {cam_id!r}")

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.id == other.id
            and self.label_mode == other.label_mode
            and self.cameras == other.cameras
            and self.ann2d == other.ann2d
            and self.depth_maps == other.depth_maps
            and self._boxes == other._boxes
        )

    __hash__ = None


def _overlaps(center, radius, placed) -> bool:
    for other_center, other_radius in placed:
        if math.hypot(center[0] - other_center[0], center[1] - other_center[1]) < radius + other_radius:
            return True
    return False


def sample_boxes(rng: np.random.Generator, config: SceneConfig) -> List[Box3D]:
    count = int(rng.integers(config.min_boxes, config.max_boxes + 1))
    boxes: List[Box3D] = []
    placed = []
    rejections = 0
    while len(boxes) < count:
        cls_id = int(rng.choice(len(config.classes), p=config.class_probs))
        spec = config.classes[cls_id]
        dims = np.asarray(spec.dims) * np.exp(rng.normal(0.0, config.dims_jitter, 3))
        r = rng.uniform(config.min_radius, config.max_radius)
        theta = rng.uniform(-math.pi, math.pi)
        yaw = rng.uniform(-math.pi, math.pi)
        attribute = int(rng.integers(0, spec.n_attributes))
        center = (r * math.cos(theta), r * math.sin(theta), dims[2] / 2.0)
        # BEV bounding circle: conservative non-overlap in 3D since all boxes rest on the ground
        radius = 0.5 * math.hypot(dims[0], dims[1])
        if _overlaps(center, radius, placed):
            rejections += 1
            if rejections > MAX_REJECTIONS:
                raise PlacementFailure(f"could not place box {len(boxes)} after {MAX_REJECTIONS} rejections")
            continue
        speed = spec.speed * attribute  # attribute 0 = stationary
        velocity = (speed * math.cos(yaw), speed * math.sin(yaw))
        boxes.append(Box3D(center, tuple(dims), yaw, velocity, cls_id, 1.0, attribute))
        placed.append((center, radius))
    return boxes


def annotate(boxes: Sequence[Box3D], cameras: Sequence[Camera]) -> Dict[str, List[Annotation2D]]:
    """2D labels: the projection of every box visible in each camera, in box order."""
    ann = {}
    for cam in cameras:
        ann[cam.id] = [
            Annotation2D(b2d, box.class_id, box.attribute_id)
            for box in boxes
            if (b2d := project_box(cam, box)) is not None
        ]
    return ann


def generate_scene(
    seed: int,
    config: SceneConfig = SceneConfig(),
    cameras: Optional[Sequence[Camera]] = None,
    scene_id: str = "scene_0000",
    label_mode: str = FULL3D,
) -> Scene:
    cameras = tuple(cameras) if cameras is not None else make_rig()
    rng = np.random.default_rng(seed)
    boxes = sample_boxes(rng, config)
    depth_maps = {cam.id: render_synthetic_depth(boxes, cam) for cam in cameras}
    return Scene(scene_id, cameras, annotate(boxes, cameras), depth_maps, label_mode, tuple(boxes))


@dataclass
class Dataset:
    manifest: dict
    scenes: List[Scene]

    @property
    def class_names(self) -> Tuple[str, ...]:
        return tuple(self.manifest["class_names"])

    @property
    def cameras(self) -> Tuple[Camera, ...]:
        return self.scenes[0].cameras if self.scenes else make_rig(RigConfig(**self.manifest["rig"]["config"]))

    def split(self, label_mode: str) -> List[Scene]:
        return [s for s in self.scenes if s.label_mode == label_mode]

    def scene(self, scene_id: str) -> Scene:
        for s in self.scenes:
            if s.id == scene_id:
                return s
        raise KeyError(f"no scene {scene_id!r}")


def generate_dataset(
    seed: int,
    n_scenes: int,
    full3d_fraction: float = 1.0 / 3.0,
    config: SceneConfig = SceneConfig(),
    rig: RigConfig = RigConfig(),
) -> Dataset:
    if n_scenes < 0 or not 0 <= full3d_fraction <= 1:
        raise ConfigError("need n_scenes >= 0 and full3d_fraction in [0, 1]")
    cameras = make_rig(rig)
    n_full = int(round(n_scenes * full3d_fraction))
    order = np.random.default_rng(derive_seed(seed, "split")).permutation(n_scenes)
    full = set(int(k) for k in order[:n_full])
    scenes = [
        generate_scene(
            derive_seed(seed, "scene", k),
            config,
            cameras,
            f"scene_{k:04d}",
            FULL3D if k in full else ONLY2D,
        )
        for k in range(n_scenes)
    ]
    manifest = {
        "version": FORMAT_VERSION,
        "seed": int(seed),
        "scene_count": n_scenes,
        "split": {"full3d_fraction": float(full3d_fraction), "full3d": sorted(s.id for s in scenes if s.label_mode == FULL3D)},
        "class_names": list(config.class_names),
        "rig": {"config": asdict(rig), "cameras": [_camera_to_dict(c) for c in cameras]},
        "scene_config": config.to_dict(),
    }
    return Dataset(manifest, scenes)


# ---------------------------------------------------------------- predictions


@dataclass(frozen=True)
class NoiseConfig:
    center_sigma: float = 0.5
    dims_sigma: float = 0.15  # log-normal sigma of the multiplicative size error
    yaw_sigma: float = 0.2
    yaw_bias: float = 0.0
    dims_bias: float = 0.0  # log-scale bias shared by all boxes
    velocity_sigma: float = 0.5
    score_range: Tuple[float, float] = (0.3, 1.0)
    class_flip_rate: float = 0.05
    attribute_flip_rate: float = 0.1
    drop_rate: float = 0.0
    spurious_rate: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "score_range", tuple(self.score_range))
        lo, hi = self.score_range
        if not 0 <= lo <= hi <= 1:
            raise ConfigError("score_range must satisfy 0 <= lo <= hi <= 1")
        for name in ("class_flip_rate", "attribute_flip_rate", "drop_rate", "spurious_rate"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]")

    @classmethod
    def zero(cls) -> "NoiseConfig":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, (1.0, 1.0), 0.0, 0.0, 0.0, 0.0)


def perturb_predictions(
    scene: Scene,
    noise: NoiseConfig = NoiseConfig(),
    seed: int = 0,
    n_classes: Optional[int] = None,
    n_attributes: int = 2,
) -> List[Box3D]:
    """Simulated pre-trained detector output for ``scene``.

    Every ground-truth box draws the same number of random variates
    whatever the rates, so changing one rate does not reshuffle the rest.
    """
    rng = np.random.default_rng(seed)
    truth = scene.evaluation_boxes()
    if n_classes is None:
        n_classes = max((b.class_id for b in truth), default=0) + 1
    out = []
    for box in truth:
        d_center = rng.normal(0.0, 1.0, 3) * noise.center_sigma
        d_dims = rng.normal(0.0, 1.0, 3) * noise.dims_sigma + noise.dims_bias
        d_yaw = rng.normal() * noise.yaw_sigma + noise.yaw_bias
        d_vel = rng.normal(0.0, 1.0, 2) * noise.velocity_sigma
        score = rng.uniform(*noise.score_range)
        u_drop, u_flip, u_attr = rng.random(3)
        new_cls = int(rng.integers(0, max(n_classes - 1, 1)))
        new_attr = int(rng.integers(0, max(n_attributes - 1, 1)))
        if u_drop < noise.drop_rate:
            continue
        cls_id = box.class_id
        if n_classes > 1 and u_flip < noise.class_flip_rate:
            cls_id = new_cls if new_cls < box.class_id else new_cls + 1
        attr = box.attribute_id
        if n_attributes > 1 and u_attr < noise.attribute_flip_rate:
            attr = new_attr if new_attr < box.attribute_id else new_attr + 1
        out.append(
            Box3D(
                np.asarray(box.center) + d_center,
                np.asarray(box.dims) * np.exp(d_dims),
                box.yaw + d_yaw,
                np.asarray(box.velocity) + d_vel,
                cls_id,
                score,
                attr,
            )
        )
    n_spurious = int(rng.binomial(len(truth), noise.spurious_rate)) if truth and noise.spurious_rate else 0
    for _ in range(n_spurious):
        r = rng.uniform(8.0, 40.0)
        theta = rng.uniform(-math.pi, math.pi)
        cls_id = int(rng.integers(0, n_classes))
        dims = DEFAULT_CLASSES[cls_id % len(DEFAULT_CLASSES)].dims
        out.append(
            Box3D(
                (r * math.cos(theta), r * math.sin(theta), dims[2] / 2),
                dims,
                rng.uniform(-math.pi, math.pi),
                (0.0, 0.0),
                cls_id,
                rng.uniform(noise.score_range[0], (noise.score_range[0] + noise.score_range[1]) / 2),
                0,
            )
        )
    return out


# ---------------------------------------------------------------- serialization


def _camera_to_dict(cam: Camera) -> dict:
    k = cam.intrinsics
    return {
        "id": cam.id,
        "fx": k.fx,
        "fy": k.fy,
        "cx": k.cx,
        "cy": k.cy,
        "rotation": cam.ego_to_cam.rotation.tolist(),
        "translation": cam.ego_to_cam.translation.tolist(),
        "width": cam.width,
        "height": cam.height,
    }


def _camera_from_dict(d: dict) -> Camera:
    return Camera(
        d["id"],
        Intrinsics(d["fx"], d["fy"], d["cx"], d["cy"]),
        RigidTransform(np.array(d["rotation"]), np.array(d["translation"])),
        d["width"],
        d["height"],
    )


def box_to_dict(box: Box3D) -> dict:
    return {
        "center": list(box.center),
        "dims": list(box.dims),
        "yaw": box.yaw,
        "vel": list(box.velocity),
        "class": box.class_id,
        "attribute": box.attribute_id,
        "score": box.score,
    }


def box_from_dict(d: dict) -> Box3D:
    return Box3D(d["center"], d["dims"], d["yaw"], d.get("vel", (0.0, 0.0)), d["class"], d.get("score", 1.0), d.get("attribute", 0))


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def depth_path(scene_id: str, cam_id: str) -> str:
    return f"depth/{scene_id}_{cam_id}.dpm"


def scene_record(scene: Scene) -> dict:
    boxes = [box_to_dict(b) for b in scene.evaluation_boxes()]
    return {
        "version": FORMAT_VERSION,
        "id": scene.id,
        "label_mode": scene.label_mode,
        "gt_boxes": boxes if scene.label_mode == FULL3D else None,
        "eval_gt": boxes if scene.label_mode == ONLY2D else None,
        "ann2d": {
            cam_id: [
                {"box": a.box.as_array().tolist(), "class": a.class_id, "attribute": a.attribute_id} for a in anns
            ]
            for cam_id, anns in scene.ann2d.items()
        },
        "depth": {cam.id: depth_path(scene.id, cam.id) for cam in scene.cameras},
    }


def write_dataset(dataset: Dataset, path) -> dict:
    """Write ``dataset`` under ``path``; returns the manifest that was written."""
    root = Path(path)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    files = {}
    lines = []
    for scene in dataset.scenes:
        lines.append(_dumps(scene_record(scene)))
        for cam in scene.cameras:
            rel = depth_path(scene.id, cam.id)
            data = encode_depth_map(scene.depth_maps[cam.id])
            (root / rel).write_bytes(data)
            files[rel] = _sha256(data)
    scenes_bytes = ("\n".join(lines) + "\n").encode() if lines else b""
    (root / "scenes.jsonl").write_bytes(scenes_bytes)
    files["scenes.jsonl"] = _sha256(scenes_bytes)
    manifest = dict(dataset.manifest)
    manifest["files"] = dict(sorted(files.items()))
    (root / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    dataset.manifest = manifest
    return manifest


def _require(record: dict, key: str, line: int):
    if key not in record:
        raise FormatError(f"scene record is missing {key!r}", line=line)
    return record[key]


def read_dataset(path, verify: bool = True) -> Dataset:
    """Load a dataset directory, checking version, checksums and label invariants."""
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest.json is not valid JSON: {exc.msg}", line=exc.lineno) from exc
    if manifest.get("version") != FORMAT_VERSION:
        raise UnsupportedVersion(f"dataset version {manifest.get('version')!r} is not supported (expected {FORMAT_VERSION})")
    files = manifest.get("files", {})
    blobs = {}
    for rel, digest in files.items():
        data = (root / rel).read_bytes()
        if verify and _sha256(data) != digest:
            raise ChecksumMismatch(f"{rel}: checksum does not match manifest")
        blobs[rel] = data
    cameras = tuple(_camera_from_dict(d) for d in manifest["rig"]["cameras"])
    by_id = {c.id: c for c in cameras}

    scenes = []
    text = blobs.get("scenes.jsonl", b"").decode()
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"invalid JSON: {exc.msg}", line=lineno) from exc
        if rec.get("version") != FORMAT_VERSION:
            raise UnsupportedVersion(f"scene record version {rec.get('version')!r} on line {lineno}")
        try:
            scenes.append(_scene_from_record(rec, by_id, blobs, lineno))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"malformed scene record: {exc}", line=lineno) from exc
    if len(scenes) != manifest.get("scene_count", len(scenes)):
        raise FormatError(f"manifest lists {manifest.get('scene_count')} scenes, found {len(scenes)}")
    return Dataset(manifest, scenes)


def _scene_from_record(rec, cameras_by_id, blobs, lineno) -> Scene:
    mode = _require(rec, "label_mode", lineno)
    raw = _require(rec, "gt_boxes" if mode == FULL3D else "eval_gt", lineno)
    boxes = tuple(box_from_dict(d) for d in raw or ())
    listed = _require(rec, "depth", lineno)
    unknown = set(listed) - set(cameras_by_id)
    if unknown:
        raise FormatError(f"unknown camera ids {sorted(unknown)}", line=lineno)
    # rig order, not the sorted key order of the record
    cameras = tuple(c for c in cameras_by_id.values() if c.id in listed)
    ann2d = {
        cam_id: [Annotation2D(Box2D.from_array(a["box"]), a["class"], a.get("attribute", 0)) for a in anns]
        for cam_id, anns in _require(rec, "ann2d", lineno).items()
    }
    depth_maps = {}
    for cam in cameras:
        rel = rec["depth"][cam.id]
        if rel not in blobs:
            raise FormatError(f"depth file {rel} is not listed in the manifest", line=lineno)
        dmap = decode_depth_map(blobs[rel])
        try:
            dmap.check_camera(cam)
        except ValueError as exc:
            raise FormatError(str(exc), line=lineno) from exc
        depth_maps[cam.id] = dmap
    # externally converted 2D-only data may carry no held-out boxes at all
    if raw is not None and annotate(boxes, cameras) != ann2d:
        raise FormatError(f"2D annotations of scene {rec['id']} are not the projections of its boxes", line=lineno)
    return Scene(rec["id"], cameras, ann2d, depth_maps, mode, boxes)
