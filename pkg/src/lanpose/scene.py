"""Synthetic scene sampling and dataset generation.

Scenes are solved analytically instead of simulated: blocks rest flat on a
tilted plane with a random yaw, the camera is sampled in a view cone around
the scene, and every pose is stored in the camera frame. Records are written
as JSON-lines with a manifest; identical (config, seed) inputs produce
byte-identical files.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .blocks import BlockModel, catalog_by_id
from .errors import ConfigError, IncompatiblePair, SamplingExhausted
from .geometry import BBox2D, CameraIntrinsics, Pose, Rotation3, compose, project
from .grammar import (
    ACTIONS,
    AssemblyAction,
    Command,
    Grammar,
    ObjectDescriptor,
    default_grammar,
    generate_expression,
)

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class GenConfig:
    n_objects_min: int = 2
    n_objects_max: int = 4
    tilt_deg: tuple = (0.0, 15.0)
    height_mm: tuple = (0.0, 100.0)
    elevation_deg: tuple = (30.0, 60.0)
    distance_mm: tuple = (600.0, 1200.0)
    lookat_jitter_mm: float = 50.0
    placement_mm: float = 160.0
    tz_range_mm: tuple = (400.0, 1600.0)
    fx: float = 600.0
    fy: float = 600.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480
    max_rejects: int = 1000

    def __post_init__(self):
        for name in ("tilt_deg", "height_mm", "elevation_deg", "distance_mm", "tz_range_mm"):
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi) and lo <= hi):
                raise ConfigError(f"gen config field {name!r} has an empty range")
        if not (1 <= self.n_objects_min <= self.n_objects_max):
            raise ConfigError("gen config field 'n_objects_min/max' invalid")

    def camera(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy, self.width, self.height)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @staticmethod
    def from_dict(d: dict) -> "GenConfig":
        known = {f.name for f in dataclasses.fields(GenConfig)}
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown gen config field(s): {sorted(bad)}")
        kwargs = {}
        for k, v in d.items():
            kwargs[k] = tuple(v) if isinstance(v, list) else v
        try:
            return GenConfig(**kwargs)
        except TypeError as e:
            raise ConfigError(f"bad gen config: {e}") from e


@dataclass(frozen=True)
class SceneObject:
    id: int
    block_id: str
    color: str
    pose: Pose  # camera frame

    @property
    def descriptor(self) -> ObjectDescriptor:
        return ObjectDescriptor(shape=default_grammar().shape_by_block[self.block_id], color=self.color)


@dataclass(frozen=True)
class Scene:
    plane_tilt: float
    plane_height: float
    camera: CameraIntrinsics
    objects: tuple


@dataclass(frozen=True)
class DatasetRecord:
    id: int
    scene: Scene
    instruction: str
    cmd: Command
    base_id: int
    target_id: int
    boxes: dict  # object id -> BBox2D
    gt_base: Pose
    gt_target: Pose
    gt_assembly: Pose


def relative_assembly(action: AssemblyAction, base: BlockModel, target: BlockModel) -> Pose:
    """Target placement relative to the base block (identity rotation)."""
    hb, ht = base.height, target.height
    wb, wt = base.width, target.width
    db, dt = base.depth, target.depth
    A = AssemblyAction
    if action == A.STACK_ON:
        t = (0.0, 0.0, (hb + ht) / 2)
    elif action == A.ASSEMBLE_FRONT:
        t = (0.0, -(db + dt) / 2, 0.0)
    elif action == A.ASSEMBLE_BACK:
        t = (0.0, (db + dt) / 2, 0.0)
    elif action == A.ASSEMBLE_LEFT:
        t = (-(wb + wt) / 2, 0.0, 0.0)
    elif action in (A.ASSEMBLE_RIGHT, A.COMBINE_WITH):
        t = ((wb + wt) / 2, 0.0, 0.0)  # combine-with is flush contact on +x
    elif action == A.INSERT_TO:
        if target.peg is None or base.hole is None:
            raise IncompatiblePair(
                f"insert needs a pegged target and a holed base, got {target.id}/{base.id}"
            )
        if target.peg.radius > base.hole.radius + 1e-9:
            raise IncompatiblePair("peg is wider than the hole")
        if (target.peg.base_z - target.peg.tip_z) > (base.hole.top_z - base.hole.bottom_z) + 1e-9:
            raise IncompatiblePair("peg is longer than the hole is deep")
        t = (
            base.hole.x - target.peg.x,
            base.hole.y - target.peg.y,
            base.hole.top_z - target.peg.base_z,
        )
    else:
        raise IncompatiblePair(f"unknown action {action}")
    return Pose(Rotation3.identity(), np.array(t))


def assembly_pose(base_pose: Pose, action: AssemblyAction, base: BlockModel, target: BlockModel) -> Pose:
    """Camera-frame pose the target must reach, given the base pose."""
    return compose(base_pose, relative_assembly(action, base, target))


def tight_bbox(k: CameraIntrinsics, pose: Pose, model: BlockModel) -> BBox2D:
    """Tight hull of the projected model vertices, as center/extent."""
    uv = project(k, pose, model.vertices)
    lo = uv.min(axis=0)
    hi = uv.max(axis=0)
    return BBox2D(
        cx=float((lo[0] + hi[0]) / 2),
        cy=float((lo[1] + hi[1]) / 2),
        w=float(hi[0] - lo[0]),
        h=float(hi[1] - lo[1]),
    )


def _look_at_rotation(cam_pos: np.ndarray, target: np.ndarray) -> Rotation3:
    """World-to-camera rotation for a camera at cam_pos looking at target."""
    z = target - cam_pos
    z = z / np.linalg.norm(z)
    x = np.cross(z, np.array([0.0, 0.0, 1.0]))
    n = np.linalg.norm(x)
    if n < 1e-9:
        x = np.array([1.0, 0.0, 0.0])
    else:
        x = x / n
    y = np.cross(z, x)
    return Rotation3(np.stack([x, y, z], axis=0))


class _SceneRejected(Exception):
    pass


def _try_scene(cfg: GenConfig, rng, required_blocks, catalog, grammar) -> tuple:
    tilt = float(rng.uniform(*cfg.tilt_deg))
    height = float(rng.uniform(*cfg.height_mm))
    n = int(rng.integers(cfg.n_objects_min, cfg.n_objects_max + 1))
    block_ids = sorted(catalog.keys())

    if required_blocks is not None:
        n = max(n, 2)
        chosen = [required_blocks[0], required_blocks[1]]
        chosen += [block_ids[int(rng.integers(7))] for _ in range(n - 2)]
    else:
        chosen = [block_ids[int(rng.integers(7))] for _ in range(n)]

    # colors unique per shape so every descriptor is unique in the scene
    colors = list(grammar.colors)
    used = {}
    obj_colors = []
    for bid in chosen:
        avail = [c for c in colors if c not in used.get(bid, ())]
        if not avail:
            raise _SceneRejected
        c = avail[int(rng.integers(len(avail)))]
        used.setdefault(bid, set()).add(c)
        obj_colors.append(c)

    # resting placements with non-overlapping bounding spheres
    placed = []  # (u, v, half_height, radius)
    for bid in chosen:
        model = catalog[bid]
        ok = False
        for _ in range(100):
            u = float(rng.uniform(-cfg.placement_mm, cfg.placement_mm))
            v = float(rng.uniform(-cfg.placement_mm, cfg.placement_mm))
            hz = model.height / 2
            clear = True
            for (u2, v2, hz2, r2) in placed:
                d = math.sqrt((u - u2) ** 2 + (v - v2) ** 2 + (hz - hz2) ** 2)
                if d <= model.radius + r2:
                    clear = False
                    break
            if clear:
                placed.append((u, v, hz, model.radius))
                ok = True
                break
        if not ok:
            raise _SceneRejected
    yaws = [float(rng.uniform(0.0, 360.0)) for _ in chosen]

    # camera in a view cone around the jittered scene center
    azim = float(rng.uniform(0.0, 360.0))
    elev = float(rng.uniform(*cfg.elevation_deg))
    dist = float(rng.uniform(*cfg.distance_mm))
    jitter = rng.uniform(-cfg.lookat_jitter_mm, cfg.lookat_jitter_mm, size=3)
    lookat = np.array([0.0, 0.0, height]) + jitter
    direction = np.array(
        [
            math.cos(math.radians(elev)) * math.cos(math.radians(azim)),
            math.cos(math.radians(elev)) * math.sin(math.radians(azim)),
            math.sin(math.radians(elev)),
        ]
    )
    cam_pos = lookat + dist * direction
    r_w2c = _look_at_rotation(cam_pos, lookat)

    r_plane = Rotation3.rot_x(tilt)
    order = rng.permutation(n)
    objects = []
    for new_id, src in enumerate(order):
        bid = chosen[src]
        model = catalog[bid]
        u, v, hz, _ = placed[src]
        center_w = r_plane.apply(np.array([u, v, hz])) + np.array([0.0, 0.0, height])
        r_obj_w = r_plane @ Rotation3.rot_z(yaws[src])
        pose = Pose(r_w2c @ r_obj_w, r_w2c.apply(center_w - cam_pos))
        lo, hi = cfg.tz_range_mm
        if not (lo <= pose.t[2] <= hi):
            raise _SceneRejected
        objects.append(SceneObject(id=new_id, block_id=bid, color=obj_colors[src], pose=pose))

    scene = Scene(plane_tilt=tilt, plane_height=height, camera=cfg.camera(), objects=tuple(objects))
    if required_blocks is not None:
        base_idx = int(np.where(order == 0)[0][0])
        target_idx = int(np.where(order == 1)[0][0])
        return scene, base_idx, target_idx
    return scene, None, None


def _sample_scene(cfg: GenConfig, rng, required_blocks=None, grammar=None) -> tuple:
    catalog = catalog_by_id()
    g = grammar or default_grammar()
    for _ in range(cfg.max_rejects):
        try:
            return _try_scene(cfg, rng, required_blocks, catalog, g)
        except _SceneRejected:
            continue
    raise SamplingExhausted(f"no valid scene after {cfg.max_rejects} attempts")


def sample_scene(cfg: GenConfig, rng_seed: int) -> Scene:
    """Sample one scene; deterministic in the seed."""
    rng = np.random.default_rng(np.random.SeedSequence([rng_seed]))
    scene, _, _ = _sample_scene(cfg, rng)
    return scene


def build_record(cfg: GenConfig, record_id: int, base_seed: int, grammar: Optional[Grammar] = None) -> DatasetRecord:
    """One dataset record; the action cycles with the record id so action
    counts stay near-uniform by construction."""
    g = grammar or default_grammar()
    catalog = catalog_by_id()
    rng = np.random.default_rng(np.random.SeedSequence([base_seed, record_id]))
    action = ACTIONS[record_id % len(ACTIONS)]
    required = ("07", "06") if action == AssemblyAction.INSERT_TO else None

    lo, hi = cfg.tz_range_mm
    for _ in range(cfg.max_rejects):
        scene, base_idx, target_idx = _sample_scene(cfg, rng, required_blocks=required, grammar=g)
        expr_seed = int(rng.integers(2**63))
        text, cmd, base_id, target_id = generate_expression(
            scene, expr_seed, action=action, base_id=base_idx, target_id=target_idx, grammar=g
        )
        base_obj = scene.objects[base_id]
        target_obj = scene.objects[target_id]
        asm = assembly_pose(base_obj.pose, action, catalog[base_obj.block_id], catalog[target_obj.block_id])
        if not (lo <= asm.t[2] <= hi):
            continue
        boxes = {o.id: tight_bbox(scene.camera, o.pose, catalog[o.block_id]) for o in scene.objects}
        return DatasetRecord(
            id=record_id,
            scene=scene,
            instruction=text,
            cmd=cmd,
            base_id=base_id,
            target_id=target_id,
            boxes=boxes,
            gt_base=base_obj.pose,
            gt_target=target_obj.pose,
            gt_assembly=asm,
        )
    raise SamplingExhausted(f"record {record_id}: no valid assembly after {cfg.max_rejects} attempts")


def pose_to_json(p: Pose) -> dict:
    return {"R": [float(x) for x in p.rot.m.reshape(-1)], "t": [float(x) for x in p.t]}


def pose_from_json(d: dict) -> Pose:
    return Pose(Rotation3(np.array(d["R"], dtype=np.float64).reshape(3, 3)), np.array(d["t"]))


def _box_to_json(b: BBox2D) -> dict:
    return {"cx": b.cx, "cy": b.cy, "w": b.w, "h": b.h}


def record_to_json(rec: DatasetRecord) -> dict:
    s = rec.scene
    return {
        "v": SCHEMA_VERSION,
        "id": rec.id,
        "plane": {"tilt_deg": s.plane_tilt, "height_mm": s.plane_height},
        "camera": {
            "fx": s.camera.fx,
            "fy": s.camera.fy,
            "cx": s.camera.cx,
            "cy": s.camera.cy,
            "width": s.camera.width,
            "height": s.camera.height,
        },
        "objects": [
            {
                "id": o.id,
                "block_id": o.block_id,
                "color": o.color,
                "pose": pose_to_json(o.pose),
            }
            for o in s.objects
        ],
        "instruction": rec.instruction,
        "cmd": rec.cmd.to_json(),
        "base_id": rec.base_id,
        "target_id": rec.target_id,
        "boxes": {str(i): _box_to_json(b) for i, b in sorted(rec.boxes.items())},
        "gt": {
            "base": pose_to_json(rec.gt_base),
            "target": pose_to_json(rec.gt_target),
            "assembly": pose_to_json(rec.gt_assembly),
        },
    }


def record_from_json(d: dict, verify: bool = False) -> DatasetRecord:
    if d.get("v") != SCHEMA_VERSION:
        raise ConfigError(f"unsupported record schema version {d.get('v')!r}")
    cam = CameraIntrinsics(**d["camera"])
    objects = tuple(
        SceneObject(
            id=o["id"], block_id=o["block_id"], color=o["color"], pose=pose_from_json(o["pose"])
        )
        for o in d["objects"]
    )
    scene = Scene(
        plane_tilt=d["plane"]["tilt_deg"],
        plane_height=d["plane"]["height_mm"],
        camera=cam,
        objects=objects,
    )
    boxes = {int(i): BBox2D(**b) for i, b in d["boxes"].items()}
    rec = DatasetRecord(
        id=d["id"],
        scene=scene,
        instruction=d["instruction"],
        cmd=Command.from_json(d["cmd"]),
        base_id=d["base_id"],
        target_id=d["target_id"],
        boxes=boxes,
        gt_base=pose_from_json(d["gt"]["base"]),
        gt_target=pose_from_json(d["gt"]["target"]),
        gt_assembly=pose_from_json(d["gt"]["assembly"]),
    )
    if verify:
        catalog = catalog_by_id()
        base = scene.objects[rec.base_id]
        target = scene.objects[rec.target_id]
        asm = assembly_pose(base.pose, rec.cmd.action, catalog[base.block_id], catalog[target.block_id])
        if not (np.array_equal(asm.rot.m, rec.gt_assembly.rot.m) and np.array_equal(asm.t, rec.gt_assembly.t)):
            raise ConfigError(f"record {rec.id}: stored assembly pose does not re-derive")
    return rec


def load_records(path: str, verify: bool = False) -> list:
    records = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(record_from_json(json.loads(line), verify=verify))
    return records


def config_hash(cfg: GenConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def generate_dataset(cfg: GenConfig, n_records: int, rng_seed: int, out_path: str,
                     grammar: Optional[Grammar] = None) -> dict:
    """Write n_records JSON-lines records plus a manifest; returns the manifest."""
    action_counts = {a.value: 0 for a in ACTIONS}
    block_counts = {bid: 0 for bid in sorted(catalog_by_id())}
    sha = hashlib.sha256()
    with open(out_path, "w", encoding="utf-8") as f:
        for i in range(n_records):
            rec = build_record(cfg, i, rng_seed, grammar=grammar)
            action_counts[rec.cmd.action.value] += 1
            for o in rec.scene.objects:
                block_counts[o.block_id] += 1
            line = json.dumps(record_to_json(rec), separators=(",", ":")) + "\n"
            sha.update(line.encode("utf-8"))
            f.write(line)
    manifest = {
        "v": SCHEMA_VERSION,
        "seed": rng_seed,
        "n_records": n_records,
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg),
        "counts": {"actions": action_counts, "blocks": block_counts},
        "content_sha256": sha.hexdigest(),
    }
    with open(out_path + ".manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest
