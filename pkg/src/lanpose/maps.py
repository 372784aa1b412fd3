"""Dense 2D-3D correspondence maps rendered analytically by ray casting.

Each map stores, per pixel of a square crop, the normalized object-frame
coordinates of the visible surface point (three channels in [0, 1]) and a
visibility mask. Maps are rendered directly at the working resolution, so no
resampling is involved. A seeded perturbation emulates upstream prediction
error (coordinate noise plus mask bit flips).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blocks import BlockModel, ray_hits
from .errors import BehindCamera, DegenerateInput
from .geometry import BBox2D, CameraIntrinsics, Pose, invert


@dataclass(frozen=True)
class NoiseConfig:
    sigma: float = 0.02  # gaussian noise on visible coords, clamped to [0, 1]
    flip_p: float = 0.02  # per-pixel mask flip probability

    def to_dict(self) -> dict:
        return {"sigma": self.sigma, "flip_p": self.flip_p}

    @staticmethod
    def from_dict(d: dict) -> "NoiseConfig":
        return NoiseConfig(sigma=float(d["sigma"]), flip_p=float(d["flip_p"]))


@dataclass(frozen=True, eq=False)
class GeomMaps:
    coords: np.ndarray  # (3, S, S), zero where mask is zero
    mask: np.ndarray  # (S, S) in {0, 1}
    roi: BBox2D  # square crop region, pixels

    @property
    def size(self) -> int:
        return self.coords.shape[1]


def square_roi(box: BBox2D, pad_ratio: float = 0.1) -> BBox2D:
    """Square crop around a box: side max(w, h) * (1 + pad_ratio), same center."""
    side = max(box.w, box.h) * (1.0 + pad_ratio)
    return BBox2D(cx=box.cx, cy=box.cy, w=side, h=side)


def pixel_centers(roi: BBox2D, s: int) -> tuple:
    """(u, v) grids of the s x s pixel centers inside a square roi."""
    side = roi.w
    left = roi.cx - side / 2
    top = roi.cy - side / 2
    step = side / s
    us = left + (np.arange(s) + 0.5) * step
    vs = top + (np.arange(s) + 0.5) * step
    return np.meshgrid(us, vs, indexing="xy")


def render_maps(k: CameraIntrinsics, pose: Pose, model: BlockModel, roi: BBox2D, s: int) -> GeomMaps:
    """Ray-cast the block through the crop's pixel grid.

    Hits are stored as (p + r) / (2 r) per axis, with r the block's bounding
    half-extents, so visible coordinates lie in [0, 1]^3.
    """
    if abs(roi.w - roi.h) > 1e-9:
        raise DegenerateInput("roi must be square")
    if s < 8:
        raise DegenerateInput("map resolution must be at least 8")
    if pose.t[2] <= 1e-6:
        raise BehindCamera("object center at or behind the camera")
    uu, vv = pixel_centers(roi, s)
    dirs = np.stack(
        [(uu.ravel() - k.cx) / k.fx, (vv.ravel() - k.cy) / k.fy, np.ones(s * s)], axis=1
    )
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    inv = invert(pose)
    origin_obj = inv.t  # camera center in the object frame
    dirs_obj = inv.rot.apply(dirs)
    hit, pts = ray_hits(model, origin_obj, dirs_obj)
    half = model.half_extents
    coords = np.zeros((s * s, 3))
    coords[hit] = (pts[hit] + half) / (2 * half)
    coords = coords.reshape(s, s, 3).transpose(2, 0, 1)
    mask = hit.astype(np.float64).reshape(s, s)
    return GeomMaps(coords=coords, mask=mask, roi=roi)


def perturb_maps(maps: GeomMaps, noise: NoiseConfig, rng_seed: int) -> GeomMaps:
    """Seeded corruption: gaussian coordinate noise and Bernoulli mask flips.

    Coordinates stay clamped to [0, 1] and are zeroed wherever the perturbed
    mask is zero, so the GeomMaps invariants still hold.
    """
    rng = np.random.default_rng(np.random.SeedSequence([rng_seed]))
    s = maps.size
    coords = maps.coords.copy()
    mask = maps.mask.copy()
    if noise.sigma > 0:
        noise_arr = rng.normal(0.0, noise.sigma, size=coords.shape)
        vis = maps.mask[None, :, :] > 0
        coords = np.where(vis, np.clip(coords + noise_arr, 0.0, 1.0), coords)
    if noise.flip_p > 0:
        flips = rng.random(size=(s, s)) < noise.flip_p
        mask = np.where(flips, 1.0 - mask, mask)
    coords = coords * (mask[None, :, :] > 0)
    return GeomMaps(coords=coords, mask=mask, roi=maps.roi)
