"""Rigid transforms, pinhole projection and the 3D box -> image AABB map.

Conventions
-----------
Ego frame: x forward, y left, z up. Camera frame: x right, y down, z along
the optical axis. A box's local frame has x along its length, y along its
width and z along its height; yaw rotates it about the ego z axis.

Corner ``k`` (0..7) of a box uses the local offset
``(s0 * l/2, s1 * w/2, s2 * h/2)`` where ``s_i = +1`` if bit ``i`` of ``k``
is set and ``-1`` otherwise. All argmin/argmax ties over corners resolve to
the lowest corner index.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .errors import BehindCamera, NotVisible

EPS_Z = 1e-3

# rows follow the corner enumeration above
CORNER_SIGNS = np.array(
    [[1.0 if k & (1 << i) else -1.0 for i in range(3)] for k in range(8)]
)

# parameter order of every 3D-box Jacobian / gradient in the package
PARAM_NAMES = ("cx", "cy", "cz", "length", "width", "height", "yaw")
BOX2D_NAMES = ("x", "y", "w", "h", "depth")


def wrap_angle(angle):
    """Map an angle (scalar or array) into (-pi, pi]."""
    wrapped = np.pi - np.mod(np.pi - np.asarray(angle, dtype=float), 2.0 * np.pi)
    wrapped = np.where(wrapped <= -np.pi, wrapped + 2.0 * np.pi, wrapped)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


def rot_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _drot_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])


def _readonly(arr):
    arr = np.array(arr, dtype=float)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """``p_out = rotation @ p_in + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = _readonly(self.rotation).reshape(3, 3)
        trans = _readonly(self.translation).reshape(3)
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > 1e-9:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > 1e-9:
            raise ValueError("rotation must have determinant +1")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points):
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return ``self o other`` (apply ``other`` first)."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    __hash__ = None

    def as_matrix(self) -> np.ndarray:
        mat = np.eye(4)
        mat[:3, :3] = self.rotation
        mat[:3, 3] = self.translation
        return mat


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    def as_matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class Camera:
    id: str
    intrinsics: Intrinsics
    ego_to_cam: RigidTransform
    width: int
    height: int

    def __post_init__(self):
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise ValueError("image width and height must be positive")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        k = self.intrinsics
        if not (0 <= k.cx <= self.width and 0 <= k.cy <= self.height):
            warnings.warn(f"camera {self.id}: principal point lies outside the image", stacklevel=2)

    def __eq__(self, other):
        if not isinstance(other, Camera):
            return NotImplemented
        return (self.id, self.intrinsics, self.width, self.height) == (
            other.id,
            other.intrinsics,
            other.width,
            other.height,
        ) and self.ego_to_cam == other.ego_to_cam

    __hash__ = None


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D box in the ego frame."""

    center: Tuple[float, float, float]
    dims: Tuple[float, float, float]
    yaw: float = 0.0
    velocity: Tuple[float, float] = (0.0, 0.0)
    class_id: int = 0
    score: float = 1.0
    attribute_id: int = 0

    def __post_init__(self):
        center = tuple(float(v) for v in self.center)
        dims = tuple(float(v) for v in self.dims)
        velocity = tuple(float(v) for v in self.velocity)
        if len(center) != 3 or len(dims) != 3 or len(velocity) != 2:
            raise ValueError("center/dims need 3 components, velocity needs 2")
        if min(dims) <= 0:
            raise ValueError(f"box dims must be strictly positive, got {dims}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "velocity", velocity)
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))
        object.__setattr__(self, "class_id", int(self.class_id))
        object.__setattr__(self, "score", float(self.score))
        object.__setattr__(self, "attribute_id", int(self.attribute_id))

    @property
    def params(self) -> np.ndarray:
        """The 7 optimizable parameters in ``PARAM_NAMES`` order."""
        return np.array([*self.center, *self.dims, self.yaw])


@dataclass(frozen=True)
class Box2D:
    """Axis-aligned image box (center/extent in pixels) with a depth in meters."""

    x: float
    y: float
    w: float
    h: float
    depth: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0 and self.depth > 0):
            raise ValueError(f"Box2D needs w, h, depth > 0, got {self}")
        for name in BOX2D_NAMES:
            object.__setattr__(self, name, float(getattr(self, name)))

    @classmethod
    def from_array(cls, arr) -> "Box2D":
        return cls(*(float(v) for v in arr))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h, self.depth])

    @property
    def extent(self):
        """(x_min, y_min, x_max, y_max)"""
        return (self.x - self.w / 2, self.y - self.h / 2, self.x + self.w / 2, self.y + self.h / 2)


def corners_from_params(params) -> np.ndarray:
    center = np.asarray(params[:3], dtype=float)
    half = 0.5 * np.asarray(params[3:6], dtype=float)
    local = CORNER_SIGNS * half
    return local @ rot_z(float(params[6])).T + center


def box_corners(box: Box3D) -> np.ndarray:
    """The 8 corners of ``box`` as an (8, 3) array in corner-index order."""
    return corners_from_params(box.params)


def project_point(cam: Camera, p_ego, eps_z: float = EPS_Z):
    """Pinhole projection of one ego-frame point: returns ``(u, v, z_cam)``."""
    x, y, z = cam.ego_to_cam.apply(np.asarray(p_ego, dtype=float))
    if z <= eps_z:
        raise BehindCamera(f"point has camera depth {z:.6g} <= {eps_z}")
    k = cam.intrinsics
    return k.fx * x / z + k.cx, k.fy * y / z + k.cy, float(z)


def _project_points(cam: Camera, pts_cam: np.ndarray):
    k = cam.intrinsics
    z = pts_cam[:, 2]
    u = k.fx * pts_cam[:, 0] / z + k.cx
    v = k.fy * pts_cam[:, 1] / z + k.cy
    return u, v


@dataclass
class Projection:
    """Full record of one box projected into one camera."""

    box: np.ndarray  # (x, y, w, h, depth)
    u: np.ndarray  # per-corner pixel columns
    v: np.ndarray  # per-corner pixel rows
    z: np.ndarray  # per-corner camera depths
    extremes: Tuple[int, int, int, int] = field(default=(0, 0, 0, 0))  # argmin u, argmax u, argmin v, argmax v
    jacobian: Optional[np.ndarray] = None
    corner_grads: Optional[Tuple[np.ndarray, np.ndarray]] = None  # (du, dv), each (8, 7)

    @property
    def aabb(self):
        return (float(self.u.min()), float(self.v.min()), float(self.u.max()), float(self.v.max()))


def project_params(
    cam: Camera, params, *, with_jacobian: bool = False, eps_z: float = EPS_Z
) -> Optional[Projection]:
    """Project a box given as 7 parameters; None when it is not visible.

    Visible means every corner has camera depth above ``eps_z`` and the
    corner AABB overlaps the image rectangle. The AABB itself is not clipped.
    """
    params = np.asarray(params, dtype=float)
    rot, trans = cam.ego_to_cam.rotation, cam.ego_to_cam.translation
    corners = corners_from_params(params)
    q = corners @ rot.T + trans
    if np.any(q[:, 2] <= eps_z):
        return None
    u, v = _project_points(cam, q)
    iu0, iu1 = int(np.argmin(u)), int(np.argmax(u))
    iv0, iv1 = int(np.argmin(v)), int(np.argmax(v))
    x_min, x_max, y_min, y_max = u[iu0], u[iu1], v[iv0], v[iv1]
    if not (x_max > 0 and x_min < cam.width and y_max > 0 and y_min < cam.height):
        return None
    depth = float(rot[2] @ params[:3] + trans[2])
    box = np.array(
        [(x_min + x_max) / 2, (y_min + y_max) / 2, x_max - x_min, y_max - y_min, depth]
    )
    proj = Projection(box=box, u=u, v=v, z=q[:, 2], extremes=(iu0, iu1, iv0, iv1))
    if with_jacobian:
        proj.corner_grads = _corner_grads(cam, params, q)
        proj.jacobian = _aabb_jacobian(cam, proj.corner_grads, proj.extremes)
    return proj


def _corner_grads(cam: Camera, params, q):
    rot = cam.ego_to_cam.rotation
    yaw = float(params[6])
    rz, drz = rot_z(yaw), _drot_z(yaw)
    half = 0.5 * np.asarray(params[3:6])

    # d corner / d params, shape (8, 3, 7)
    dp = np.zeros((8, 3, 7))
    dp[:, :, 0:3] = np.eye(3)
    dp[:, :, 3:6] = rz[None, :, :] * (0.5 * CORNER_SIGNS)[:, None, :]
    dp[:, :, 6] = (CORNER_SIGNS * half) @ drz.T
    dq = np.einsum("ij,kjp->kip", rot, dp)

    k = cam.intrinsics
    z = q[:, 2]
    du = (k.fx / z)[:, None] * dq[:, 0, :] - (k.fx * q[:, 0] / z**2)[:, None] * dq[:, 2, :]
    dv = (k.fy / z)[:, None] * dq[:, 1, :] - (k.fy * q[:, 1] / z**2)[:, None] * dq[:, 2, :]
    return du, dv


def _aabb_jacobian(cam: Camera, corner_grads, extremes) -> np.ndarray:
    du, dv = corner_grads
    rot = cam.ego_to_cam.rotation
    iu0, iu1, iv0, iv1 = extremes
    jac = np.zeros((5, 7))
    jac[0] = 0.5 * (du[iu0] + du[iu1])
    jac[1] = 0.5 * (dv[iv0] + dv[iv1])
    jac[2] = du[iu1] - du[iu0]
    jac[3] = dv[iv1] - dv[iv0]
    jac[4, 0:3] = rot[2]
    return jac


def project_box(cam: Camera, box: Box3D) -> Optional[Box2D]:
    """Image AABB of a box's projected corners, or None if not visible."""
    proj = project_params(cam, box.params)
    if proj is None:
        return None
    return Box2D.from_array(proj.box)


def project_box_jacobian(cam: Camera, box: Box3D) -> np.ndarray:
    """5x7 Jacobian of (x, y, w, h, depth) w.r.t. (center, dims, yaw).

    Uses the subgradient of the controlling (argmin/argmax) corners.
    """
    proj = project_params(cam, box.params, with_jacobian=True)
    if proj is None:
        raise NotVisible(f"box is not visible in camera {cam.id}")
    return proj.jacobian


def corner_tie_gap(proj: Projection) -> float:
    """Smallest pixel gap between a controlling corner and a competing one.

    A small gap means a tiny parameter change can hand an AABB edge to a
    different corner, so the Jacobian is only a one-sided subgradient there.
    Competitors whose derivative row equals the controller's (e.g. corners
    that differ only in height under a level camera) are ignored because a
    switch between them leaves the derivative unchanged.
    """
    if proj.corner_grads is None:
        raise ValueError("projection was computed without the Jacobian")
    du, dv = proj.corner_grads
    iu0, iu1, iv0, iv1 = proj.extremes
    gap = np.inf
    for coords, grads, idx, sign in (
        (proj.u, du, iu0, 1.0),
        (proj.u, du, iu1, -1.0),
        (proj.v, dv, iv0, 1.0),
        (proj.v, dv, iv1, -1.0),
    ):
        scale = 1e-9 * (1.0 + np.abs(grads[idx]).max())
        for j in range(8):
            if j == idx or np.abs(grads[j] - grads[idx]).max() <= scale:
                continue
            gap = min(gap, sign * (coords[j] - coords[idx]))
    return float(gap)
