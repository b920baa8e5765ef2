"""Per-camera depth maps: synthetic rendering, box depth lookup and ``.dpm`` I/O.

``.dpm`` layout (little-endian)::

    offset  size  field
    0       4     magic b"DPM1"
    4       4     u32 width
    8       4     u32 height
    12      4     u32 reserved, must be 0
    16      4*W*H float32 depths, row-major; +inf marks background

Real offline depth maps can be dropped in as ``.dpm`` files; they must
already be metric.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import FormatError, NoDepth
from .geometry import Box2D, Box3D, Camera, project_params

MAGIC = b"DPM1"
HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True, eq=False)
class DepthMap:
    width: int
    height: int
    values: np.ndarray  # (height, width) float32, meters

    def __post_init__(self):
        vals = np.array(self.values, dtype="<f4")
        if vals.shape != (self.height, self.width):
            raise ValueError(f"depth values shape {vals.shape} != ({self.height}, {self.width})")
        finite = vals[np.isfinite(vals)]
        if np.any(finite <= 0) or np.any(np.isnan(vals)) or np.any(vals == -np.inf):
            raise ValueError("depth values must be positive or +inf")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @classmethod
    def empty(cls, width: int, height: int) -> "DepthMap":
        return cls(width, height, np.full((height, width), np.inf, dtype="<f4"))

    def check_camera(self, cam: Camera) -> None:
        if (self.width, self.height) != (cam.width, cam.height):
            raise ValueError(
                f"depth map is {self.width}x{self.height} but camera {cam.id} is {cam.width}x{cam.height}"
            )

    def __eq__(self, other):
        if not isinstance(other, DepthMap):
            return NotImplemented
        return (self.width, self.height) == (other.width, other.height) and np.array_equal(
            self.values, other.values
        )


def pixel_window(aabb, width: int, height: int) -> Optional[Tuple[int, int, int, int]]:
    """Pixel rows/cols ``(r0, r1, c0, c1)`` (half-open) covered by an image box.

    A pixel is covered when its center lies inside the box. A box narrower
    than one pixel pitch still covers the pixel holding its center. Returns
    None if the box misses the image.
    """
    x_min, y_min, x_max, y_max = aabb
    if x_max <= 0 or y_max <= 0 or x_min >= width or y_min >= height:
        return None

    def span(lo, hi, size):
        first = max(math.ceil(lo - 0.5), 0)
        last = min(math.floor(hi - 0.5), size - 1)
        if first > last:
            mid = min(max(int(math.floor((lo + hi) / 2)), 0), size - 1)
            first = last = mid
        return first, last + 1

    c0, c1 = span(x_min, x_max, width)
    r0, r1 = span(y_min, y_max, height)
    return r0, r1, c0, c1


def render_synthetic_depth(gt_boxes: Sequence[Box3D], cam: Camera) -> DepthMap:
    """Fill each visible box's clipped AABB with its center depth, nearest wins."""
    values = np.full((cam.height, cam.width), np.inf, dtype="<f4")
    for box in gt_boxes:
        proj = project_params(cam, box.params)
        if proj is None:
            continue
        window = pixel_window(proj.aabb, cam.width, cam.height)
        if window is None:
            continue
        r0, r1, c0, c1 = window
        patch = values[r0:r1, c0:c1]
        np.minimum(patch, np.float32(proj.box[4]), out=patch)
    return DepthMap(cam.width, cam.height, values)


def box_depth_from_map(depth_map: DepthMap, box) -> float:
    """Median finite depth inside a box's clipped extent (mean of middle two when even)."""
    if isinstance(box, Box2D):
        aabb = box.extent
    else:
        x, y, w, h = np.asarray(box, dtype=float)[:4]
        aabb = (x - w / 2, y - h / 2, x + w / 2, y + h / 2)
    window = pixel_window(aabb, depth_map.width, depth_map.height)
    if window is None:
        raise NoDepth("box does not intersect the depth map")
    r0, r1, c0, c1 = window
    patch = depth_map.values[r0:r1, c0:c1]
    finite = patch[np.isfinite(patch)].astype(float)
    if finite.size == 0:
        raise NoDepth("no finite depth inside box")
    return float(np.median(finite))


def encode_depth_map(depth_map: DepthMap) -> bytes:
    header = HEADER.pack(MAGIC, depth_map.width, depth_map.height, 0)
    return header + depth_map.values.astype("<f4").tobytes(order="C")


def decode_depth_map(data: bytes) -> DepthMap:
    if len(data) < HEADER.size:
        raise FormatError("truncated header", offset=len(data))
    magic, width, height, reserved = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if reserved != 0:
        raise FormatError("reserved header field must be 0", offset=12)
    if width == 0 or height == 0:
        raise FormatError("zero-sized depth map", offset=4)
    expected = HEADER.size + 4 * width * height
    if len(data) != expected:
        raise FormatError(f"payload is {len(data) - HEADER.size} bytes, expected {expected - HEADER.size}", offset=min(len(data), expected))
    values = np.frombuffer(data, dtype="<f4", offset=HEADER.size).reshape(height, width)
    bad = np.isnan(values) | (values <= 0)
    if bad.any():
        first = int(np.flatnonzero(bad.ravel())[0])
        raise FormatError("depth values must be positive or +inf", offset=HEADER.size + 4 * first)
    return DepthMap(width, height, values)


def save_depth_map(depth_map: DepthMap, path) -> None:
    Path(path).write_bytes(encode_depth_map(depth_map))


def load_depth_map(path) -> DepthMap:
    return decode_depth_map(Path(path).read_bytes())
