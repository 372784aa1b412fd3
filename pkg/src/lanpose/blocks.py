"""Parametric block catalog: primitives, surface samples, symmetry groups.

Blocks are unions of axis-aligned cuboids and z-axis cylinders in an object
frame whose origin is the geometric center of the bounding cuboid. All
dimensions live in data/blocks.json so the catalog is data, not code.

Surface sampling is symmetric under each block's declared rotation group:
grids are centered per face and per-axis counts depend only on edge length,
so a group rotation maps the sample set onto itself (up to float roundoff).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Optional

import numpy as np

from .errors import DegenerateInput
from .geometry import Rotation3

_TARGET_SAMPLES = 550  # per block; metric cost grows with N^2 in the ADD-S oracle
_RAY_EPS = 1e-9


@dataclass(frozen=True)
class Cuboid:
    center: np.ndarray  # (3,)
    dims: np.ndarray  # full extents (3,)

    @property
    def lo(self) -> np.ndarray:
        return self.center - self.dims / 2

    @property
    def hi(self) -> np.ndarray:
        return self.center + self.dims / 2


@dataclass(frozen=True)
class CylinderZ:
    center: np.ndarray  # (3,)
    radius: float
    height: float


@dataclass(frozen=True)
class PegFeature:
    x: float
    y: float
    base_z: float  # plane where the peg meets the body
    tip_z: float
    radius: float


@dataclass(frozen=True)
class HoleFeature:
    x: float
    y: float
    top_z: float
    bottom_z: float
    radius: float  # half-width of the opening


@dataclass(frozen=True, eq=False)
class BlockModel:
    id: str
    name: str
    primitives: tuple
    sym_kind: str  # "z4" | "z2" | "id"
    sym_group: tuple  # Rotation3 elements, identity first
    vertices: np.ndarray  # (N, 3) surface samples, mm
    diameter: float  # max pairwise vertex distance
    radius: float  # max vertex norm (bounding sphere about the origin)
    half_extents: np.ndarray  # bounding cuboid half extents (3,)
    peg: Optional[PegFeature] = None
    hole: Optional[HoleFeature] = None

    @property
    def width(self) -> float:
        return 2 * self.half_extents[0]

    @property
    def depth(self) -> float:
        return 2 * self.half_extents[1]

    @property
    def height(self) -> float:
        return 2 * self.half_extents[2]


def _sym_group(kind: str) -> tuple:
    if kind == "z4":
        return tuple(Rotation3.rot_z(a) for a in (0.0, 90.0, 180.0, 270.0))
    if kind == "z2":
        return (Rotation3.identity(), Rotation3.rot_z(180.0))
    if kind == "id":
        return (Rotation3.identity(),)
    raise DegenerateInput(f"unknown symmetry kind {kind!r}")


def _centered_axis(length: float, spacing: float) -> np.ndarray:
    """Grid along one edge, symmetric about the edge center."""
    n = max(2, int(round(length / spacing)) + 1)
    return (np.arange(n) - (n - 1) / 2.0) * (length / (n - 1))


def _sample_cuboid(c: Cuboid, spacing: float) -> np.ndarray:
    xs = _centered_axis(c.dims[0], spacing)
    ys = _centered_axis(c.dims[1], spacing)
    zs = _centered_axis(c.dims[2], spacing)
    pts = []
    for axis, (a, b) in ((0, (ys, zs)), (1, (xs, zs)), (2, (xs, ys))):
        aa, bb = np.meshgrid(a, b, indexing="ij")
        flat = np.stack([aa.ravel(), bb.ravel()], axis=1)
        for sign in (-1.0, 1.0):
            face = np.zeros((flat.shape[0], 3))
            face[:, axis] = sign * c.dims[axis] / 2
            other = [i for i in range(3) if i != axis]
            face[:, other[0]] = flat[:, 0]
            face[:, other[1]] = flat[:, 1]
            pts.append(face)
    return np.concatenate(pts, axis=0) + c.center


def _sample_cylinder(c: CylinderZ, spacing: float) -> np.ndarray:
    # Angular count is a multiple of 4 so 90-degree rotations map the
    # sample rings onto themselves.
    n_ang = max(8, 4 * max(1, int(round(2 * math.pi * c.radius / spacing / 4))))
    ang = np.arange(n_ang) * (2 * math.pi / n_ang)
    ca, sa = np.cos(ang), np.sin(ang)
    zs = _centered_axis(c.height, spacing)
    pts = []
    for z in zs:
        ring = np.stack([c.radius * ca, c.radius * sa, np.full(n_ang, z)], axis=1)
        pts.append(ring)
    n_rad = max(1, int(round(c.radius / spacing)))
    for sign in (-1.0, 1.0):
        z = sign * c.height / 2
        pts.append(np.array([[0.0, 0.0, z]]))
        for j in range(1, n_rad + 1):
            r = c.radius * j / n_rad
            if j == n_rad:
                continue  # rim already covered by the side rings
            ring = np.stack([r * ca, r * sa, np.full(n_ang, z)], axis=1)
            pts.append(ring)
    return np.concatenate(pts, axis=0) + c.center


def _surface_area(prim) -> float:
    if isinstance(prim, Cuboid):
        d = prim.dims
        return 2 * (d[0] * d[1] + d[0] * d[2] + d[1] * d[2])
    return 2 * math.pi * prim.radius * prim.height + 2 * math.pi * prim.radius ** 2


def _sample_block(prims: tuple) -> np.ndarray:
    area = sum(_surface_area(p) for p in prims)
    spacing = math.sqrt(area / _TARGET_SAMPLES)
    pts = []
    for p in prims:
        if isinstance(p, Cuboid):
            pts.append(_sample_cuboid(p, spacing))
        else:
            pts.append(_sample_cylinder(p, spacing))
    return np.concatenate(pts, axis=0)


def _bounds(prims: tuple) -> tuple:
    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    for p in prims:
        if isinstance(p, Cuboid):
            lo = np.minimum(lo, p.lo)
            hi = np.maximum(hi, p.hi)
        else:
            plo = p.center - np.array([p.radius, p.radius, p.height / 2])
            phi = p.center + np.array([p.radius, p.radius, p.height / 2])
            lo = np.minimum(lo, plo)
            hi = np.maximum(hi, phi)
    return lo, hi


def _parse_block(doc: dict) -> BlockModel:
    prims = []
    for p in doc["primitives"]:
        center = np.asarray(p["center"], dtype=np.float64)
        if p["kind"] == "cuboid":
            prims.append(Cuboid(center, np.asarray(p["dims"], dtype=np.float64)))
        elif p["kind"] == "cylinder":
            prims.append(CylinderZ(center, float(p["dims"][0]), float(p["dims"][1])))
        else:
            raise DegenerateInput(f"unknown primitive kind {p['kind']!r}")
    prims = tuple(prims)
    lo, hi = _bounds(prims)
    if np.abs(lo + hi).max() > 1e-9:
        raise DegenerateInput(f"block {doc['id']}: bounding cuboid not centered at origin")
    verts = _sample_block(prims)
    dists = np.linalg.norm(verts[:, None, :] - verts[None, :, :], axis=2)
    peg = PegFeature(**doc["peg"]) if "peg" in doc else None
    hole = HoleFeature(**doc["hole"]) if "hole" in doc else None
    return BlockModel(
        id=doc["id"],
        name=doc["name"],
        primitives=prims,
        sym_kind=doc["sym"],
        sym_group=_sym_group(doc["sym"]),
        vertices=verts,
        diameter=float(dists.max()),
        radius=float(np.linalg.norm(verts, axis=1).max()),
        half_extents=hi,
        peg=peg,
        hole=hole,
    )


def load_catalog_doc() -> dict:
    with resources.files("lanpose.data").joinpath("blocks.json").open("r") as f:
        return json.load(f)


@lru_cache(maxsize=1)
def block_catalog() -> tuple:
    """The 7 block models, ordered by id."""
    doc = load_catalog_doc()
    models = tuple(_parse_block(b) for b in doc["blocks"])
    if len(models) != 7:
        raise DegenerateInput(f"catalog must define 7 blocks, got {len(models)}")
    return models


@lru_cache(maxsize=1)
def catalog_by_id() -> dict:
    return {m.id: m for m in block_catalog()}


def catalog_json() -> str:
    """Serialize the catalog in the documented interchange schema."""
    doc = load_catalog_doc()
    return json.dumps(doc, indent=2)


def _ray_cuboid(c: Cuboid, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Slab test; returns hit parameter per ray (inf on miss)."""
    inv = np.where(np.abs(dirs) > 1e-15, 1.0 / np.where(dirs == 0, 1.0, dirs), np.inf)
    lo = (c.lo - origin) * inv
    hi = (c.hi - origin) * inv
    # rays parallel to an axis: hit only if origin is inside that slab
    par = np.abs(dirs) <= 1e-15
    inside = (origin >= c.lo - 1e-12) & (origin <= c.hi + 1e-12)
    t1 = np.minimum(lo, hi)
    t2 = np.maximum(lo, hi)
    t1 = np.where(par, np.where(inside, -np.inf, np.inf), t1)
    t2 = np.where(par, np.where(inside, np.inf, -np.inf), t2)
    tmin = t1.max(axis=1)
    tmax = t2.min(axis=1)
    t = np.where(tmin > _RAY_EPS, tmin, tmax)
    miss = (tmax < tmin - 1e-12) | (t <= _RAY_EPS) | ~np.isfinite(t)
    return np.where(miss, np.inf, t)


def _ray_cylinder(cy: CylinderZ, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    o = origin - cy.center
    dx, dy, dz = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    hz = cy.height / 2
    best = np.full(dirs.shape[0], np.inf)

    a = dx * dx + dy * dy
    b = 2 * (o[0] * dx + o[1] * dy)
    c0 = o[0] * o[0] + o[1] * o[1] - cy.radius ** 2
    disc = b * b - 4 * a * c0
    ok = (disc >= 0) & (a > 1e-15)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        for sign in (-1.0, 1.0):
            t = (-b + sign * sq) / (2 * a)
            z = o[2] + t * dz
            valid = ok & (t > _RAY_EPS) & (np.abs(z) <= hz + 1e-12)
            best = np.where(valid & (t < best), t, best)
        for zcap in (-hz, hz):
            t = (zcap - o[2]) / dz
            x = o[0] + t * dx
            y = o[1] + t * dy
            valid = (np.abs(dz) > 1e-15) & (t > _RAY_EPS) & (x * x + y * y <= cy.radius ** 2 + 1e-9)
            best = np.where(valid & (t < best), t, best)
    return best


def ray_hits(model: BlockModel, origin, dirs) -> tuple:
    """Cast unit rays from one origin; nearest positive hit per ray.

    Returns (mask (N,), points (N, 3)) in the object frame; points are zero
    where mask is False.
    """
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    t = np.full(dirs.shape[0], np.inf)
    for p in model.primitives:
        if isinstance(p, Cuboid):
            tp = _ray_cuboid(p, origin, dirs)
        else:
            tp = _ray_cylinder(p, origin, dirs)
        t = np.minimum(t, tp)
    mask = np.isfinite(t)
    pts = np.zeros_like(dirs)
    pts[mask] = origin + t[mask, None] * dirs[mask]
    return mask, pts


def ray_intersect(model: BlockModel, origin, direction) -> Optional[np.ndarray]:
    """Nearest hit of a single unit ray against the block, or None."""
    direction = np.asarray(direction, dtype=np.float64).reshape(3)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
        raise DegenerateInput("ray direction must be a unit vector")
    mask, pts = ray_hits(model, origin, direction[None, :])
    return pts[0] if mask[0] else None


def _sdf_cuboid(c: Cuboid, pts: np.ndarray) -> np.ndarray:
    q = np.abs(pts - c.center) - c.dims / 2
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.minimum(q.max(axis=1), 0.0)
    return outside + inside


def _sdf_cylinder(cy: CylinderZ, pts: np.ndarray) -> np.ndarray:
    rel = pts - cy.center
    dr = np.linalg.norm(rel[:, :2], axis=1) - cy.radius
    dz = np.abs(rel[:, 2]) - cy.height / 2
    d = np.stack([dr, dz], axis=1)
    outside = np.linalg.norm(np.maximum(d, 0.0), axis=1)
    inside = np.minimum(d.max(axis=1), 0.0)
    return outside + inside


def signed_distance(model: BlockModel, pts) -> np.ndarray:
    """Signed distance to the block's solid union (negative inside)."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    d = np.full(pts.shape[0], np.inf)
    for p in model.primitives:
        if isinstance(p, Cuboid):
            d = np.minimum(d, _sdf_cuboid(p, pts))
        else:
            d = np.minimum(d, _sdf_cylinder(p, pts))
    return d


def penetration_depth(model: BlockModel, pts) -> float:
    """Max depth by which any point pokes into the block (>= 0)."""
    return float(np.maximum(-signed_distance(model, pts), 0.0).max())
