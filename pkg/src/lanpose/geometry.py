"""SE(3) pose algebra, pinhole projection, and rotation parametrizations.

Conventions used throughout the package: lengths in millimetres, angles in
degrees at API boundaries, pixels for image-plane quantities. The camera
looks along +z, u grows to the right, v grows downward. Rotation matrices
act on column vectors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera, DegenerateInput

ORTHO_TOL = 1e-9


def _vec3(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64).reshape(3).copy()
    v.setflags(write=False)
    return v


@dataclass(frozen=True, eq=False)
class Rotation3:
    """A proper rotation matrix, validated on construction.

    Invariant: ||R^T R - I||_max < 1e-9 and det(R) = 1 within 1e-9.
    """

    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        if m.shape != (3, 3):
            raise DegenerateInput(f"rotation must be 3x3, got shape {m.shape}")
        ortho_err = np.abs(m.T @ m - np.eye(3)).max()
        det_err = abs(np.linalg.det(m) - 1.0)
        if ortho_err >= ORTHO_TOL or det_err >= ORTHO_TOL:
            raise DegenerateInput(
                f"not a rotation matrix (orthogonality error {ortho_err:.3e}, "
                f"det error {det_err:.3e})"
            )
        m = m.copy()
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    @staticmethod
    def identity() -> "Rotation3":
        return Rotation3(np.eye(3))

    @staticmethod
    def rot_x(deg: float) -> "Rotation3":
        c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
        return Rotation3(np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=np.float64))

    @staticmethod
    def rot_y(deg: float) -> "Rotation3":
        c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
        return Rotation3(np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=np.float64))

    @staticmethod
    def rot_z(deg: float) -> "Rotation3":
        c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
        return Rotation3(np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64))

    def __matmul__(self, other: "Rotation3") -> "Rotation3":
        return Rotation3(self.m @ other.m)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        """Rotate points given as (..., 3)."""
        return np.asarray(pts, dtype=np.float64) @ self.m.T

    def inv(self) -> "Rotation3":
        return Rotation3(self.m.T)


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform: rotation plus translation in millimetres."""

    rot: Rotation3
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "t", _vec3(self.t))

    @staticmethod
    def identity() -> "Pose":
        return Pose(Rotation3.identity(), np.zeros(3))

    def apply(self, pts: np.ndarray) -> np.ndarray:
        """Transform points given as (..., 3)."""
        return self.rot.apply(pts) + self.t

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rot.m
        m[:3, 3] = self.t
        return m


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DegenerateInput("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise DegenerateInput("principal point must lie inside the image")


@dataclass(frozen=True)
class BBox2D:
    """Axis-aligned box given by center and extent, in pixels."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise DegenerateInput(f"box extent must be positive, got {self.w}x{self.h}")

    def contains_box(self, other: "BBox2D") -> bool:
        return (
            self.cx - self.w / 2 <= other.cx - other.w / 2 + 1e-9
            and self.cx + self.w / 2 >= other.cx + other.w / 2 - 1e-9
            and self.cy - self.h / 2 <= other.cy - other.h / 2 + 1e-9
            and self.cy + self.h / 2 >= other.cy + other.h / 2 - 1e-9
        )


@dataclass(frozen=True)
class SiteTranslation:
    """Box-relative translation encoding (dx, dy, dz).

    dx, dy are offsets of the projected object center from the box center in
    box-size units; dz is depth scaled by box size over focal length, which
    makes the triple invariant to crop scale and exactly invertible.
    """

    dx: float
    dy: float
    dz: float

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dz], dtype=np.float64)


def rot6d_to_matrix(a1, a2) -> Rotation3:
    """Orthonormalize two 3-vectors into a rotation via Gram-Schmidt.

    The columns of the result are (b1, b2, b3) with b1 = a1/|a1|,
    b2 the normalized rejection of a2 from b1, b3 = b1 x b2.

    Raises DegenerateInput when |a1| <= 1e-12 or the vectors are parallel
    within 1e-6 rad (both signal an untrained or diverged regression head).
    """
    a1 = np.asarray(a1, dtype=np.float64).reshape(3)
    a2 = np.asarray(a2, dtype=np.float64).reshape(3)
    n1 = np.linalg.norm(a1)
    if n1 <= 1e-12:
        raise DegenerateInput("first rotation column has near-zero norm")
    b1 = a1 / n1
    n2 = np.linalg.norm(a2)
    if n2 <= 1e-12:
        raise DegenerateInput("second rotation column has near-zero norm")
    resid = a2 - (b1 @ a2) * b1
    # |resid| = |a2| sin(angle between a1 and a2)
    if np.linalg.norm(resid) <= 1e-6 * n2:
        raise DegenerateInput("rotation columns are parallel")
    b2 = resid / np.linalg.norm(resid)
    b3 = np.cross(b1, b2)
    return Rotation3(np.stack([b1, b2, b3], axis=1))


def matrix_to_rot6d(r: Rotation3) -> np.ndarray:
    """First two columns of the rotation matrix, flattened to 6 values."""
    return np.concatenate([r.m[:, 0], r.m[:, 1]])


def compose(p: Pose, q: Pose) -> Pose:
    """p then q in p's frame: (p.q).x = p.R (q.R x + q.t) + p.t."""
    return Pose(p.rot @ q.rot, p.rot.apply(q.t) + p.t)


def invert(p: Pose) -> Pose:
    rt = p.rot.inv()
    return Pose(rt, -rt.apply(p.t))


def project(k: CameraIntrinsics, p: Pose, pts) -> np.ndarray:
    """Pinhole-project object-frame points (N, 3) mm to pixels (N, 2).

    Raises BehindCamera when any transformed point has z <= 1e-6.
    """
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    cam = p.apply(pts)
    z = cam[:, 2]
    if np.any(z <= 1e-6):
        raise BehindCamera(f"{int(np.sum(z <= 1e-6))} point(s) at or behind the camera")
    u = k.fx * cam[:, 0] / z + k.cx
    v = k.fy * cam[:, 1] / z + k.cy
    return np.stack([u, v], axis=1)


def site_encode(t, box: BBox2D, k: CameraIntrinsics) -> SiteTranslation:
    """Encode a camera-frame translation relative to a 2D box.

    dx = (u0 - box.cx)/box.w, dy = (v0 - box.cy)/box.h with (u0, v0) the
    projection of the translation itself; dz = t_z * max(box.w, box.h) / fx.
    """
    t = np.asarray(t, dtype=np.float64).reshape(3)
    if t[2] <= 1e-6:
        raise BehindCamera("translation is at or behind the camera")
    u0 = k.fx * t[0] / t[2] + k.cx
    v0 = k.fy * t[1] / t[2] + k.cy
    return SiteTranslation(
        dx=(u0 - box.cx) / box.w,
        dy=(v0 - box.cy) / box.h,
        dz=t[2] * max(box.w, box.h) / k.fx,
    )


def site_decode(s: SiteTranslation, box: BBox2D, k: CameraIntrinsics) -> np.ndarray:
    """Exact inverse of site_encode; returns the translation in mm."""
    tz = s.dz * k.fx / max(box.w, box.h)
    u0 = s.dx * box.w + box.cx
    v0 = s.dy * box.h + box.cy
    tx = (u0 - k.cx) * tz / k.fx
    ty = (v0 - k.cy) * tz / k.fy
    return np.array([tx, ty, tz], dtype=np.float64)


def geodesic_angle(r1: Rotation3, r2: Rotation3) -> float:
    """Angle in degrees between two rotations; trace formula, clamped."""
    c = (np.trace(r1.m.T @ r2.m) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def sym_align(r_gt: Rotation3, r_pred: Rotation3, sym: list) -> Rotation3:
    """Rotate r_gt by the symmetry element that best matches r_pred.

    Returns r_gt @ s* minimizing the geodesic angle to r_pred; ties are
    broken by the lowest index in `sym`. `sym` must contain the identity.
    """
    if not sym:
        raise DegenerateInput("symmetry group must be non-empty")
    best = None
    best_angle = None
    for s in sym:
        cand = r_gt @ s
        ang = geodesic_angle(cand, r_pred)
        if best_angle is None or ang < best_angle:
            best, best_angle = cand, ang
    return best
