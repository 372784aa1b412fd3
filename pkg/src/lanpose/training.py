"""Two-stage training: the direct pose branch first, then the language
branch with the direct branch frozen.

Everything random is derived functionally from (seed, stage, epoch, record,
role), so runs are deterministic, per-epoch checkpoints resume bit-exactly,
and no RNG state needs to be serialized. Training runs in float32 so the
float32 checkpoint arrays round-trip without loss.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .blocks import catalog_by_id
from .errors import CheckpointError, ConfigError, DegenerateInput, NonFiniteLoss
from .geometry import Pose, Rotation3, compose, site_encode
from .grammar import Grammar, default_grammar, tokenize
from .maps import GeomMaps, NoiseConfig, perturb_maps, render_maps, square_roi
from .metrics import METRIC_KEYS, recall_table
from .network import (
    NetConfig,
    ParamSet,
    PoseLossBatch,
    VARIANTS,
    decode_head,
    decode_relative,
    direct_branch,
    init_params,
    language_branch,
    loss_geom,
    loss_pose,
    refine_maps,
)
from .scene import relative_assembly

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
_CKPT_MAGIC = b"LPCK"
_VAL_TAG = 9  # seed namespace for validation-time map noise


@dataclass(frozen=True)
class TrainConfig:
    epochs_stage1: int = 30
    epochs_stage2: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    d_model: int = 64
    n_patches: int = 64
    map_size: int = 32
    patch: int = 4
    warmup_steps: int = 100
    pad_ratio: float = 0.1
    variant: str = "attention"

    def __post_init__(self):
        for name in ("epochs_stage1", "epochs_stage2", "batch_size", "d_model", "n_patches", "map_size", "patch"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"train config field {name!r} must be positive")
        if self.lr <= 0:
            raise ConfigError("train config field 'lr' must be positive")
        if self.variant not in VARIANTS:
            raise ConfigError(f"train config field 'variant' must be one of {VARIANTS}")
        if self.n_patches != (self.map_size // self.patch) ** 2:
            raise ConfigError("train config field 'n_patches' must equal (map_size/patch)^2")

    def net(self) -> NetConfig:
        return NetConfig(map_size=self.map_size, d_model=self.d_model, patch=self.patch)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["noise"] = self.noise.to_dict()
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(TrainConfig)}
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown train config field(s): {sorted(bad)}")
        kwargs = dict(d)
        if "noise" in kwargs:
            kwargs["noise"] = NoiseConfig.from_dict(kwargs["noise"])
        try:
            return TrainConfig(**kwargs)
        except TypeError as e:
            raise ConfigError(f"bad train config: {e}") from e


def train_config_hash(cfg: TrainConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()


def derive_seed(*parts) -> int:
    """Stable scalar seed from a tuple of non-negative integers."""
    state = np.random.SeedSequence(list(parts)).generate_state(1, np.uint64)[0]
    return int(state >> np.uint64(1))


# --------------------------------------------------------------------------
# training data preparation


@dataclass(eq=False)
class CropSample:
    record_id: int
    role: int  # 0 = base, 1 = target
    block_id: str
    box: object
    clean: GeomMaps
    gt_site: np.ndarray  # (3,)
    gt_cands: np.ndarray  # (K, 3, 3) symmetry-equivalent gt rotations
    gt_pose: Pose


@dataclass(eq=False)
class AssemblySample:
    record_id: int
    crop_idx: int  # base crop feeding the language branch
    tokens: np.ndarray  # (L,)
    target_block: str
    gt_site: np.ndarray  # (3,) absolute-site supervision
    gt_cands: np.ndarray  # (K, 3, 3)
    gt_rel_t: np.ndarray  # (3,) relative translation (mm)
    gt_rel_cands: np.ndarray  # (K, 3, 3), symmetry elements
    gt_pose: Pose


class TrainingData:
    """Pre-rendered clean maps and constant supervision for a record list."""

    def __init__(self, records, cfg: TrainConfig, grammar: Grammar = None):
        g = grammar or default_grammar()
        catalog = catalog_by_id()
        s = cfg.map_size
        if g.max_tokens != cfg.net().max_tokens:
            raise ConfigError("grammar token length does not match the network")
        self.records = records
        self.verts = {bid: m.vertices.T.copy() for bid, m in catalog.items()}  # (3, N)
        self.camera = {rec.id: rec.scene.camera for rec in records}
        self.crops = []
        self.crop_index = {}
        self.assembly = []
        for rec in records:
            k = rec.scene.camera
            for role, oid, gt in ((0, rec.base_id, rec.gt_base), (1, rec.target_id, rec.gt_target)):
                obj = rec.scene.objects[oid]
                model = catalog[obj.block_id]
                box = rec.boxes[oid]
                roi = square_roi(box, cfg.pad_ratio)
                clean = render_maps(k, obj.pose, model, roi, s)
                clean32 = GeomMaps(
                    coords=clean.coords.astype(np.float32),
                    mask=clean.mask.astype(np.float32),
                    roi=clean.roi,
                )
                cands = np.stack([obj.pose.rot.m @ sym.m for sym in model.sym_group])
                self.crop_index[(rec.id, role)] = len(self.crops)
                self.crops.append(
                    CropSample(
                        record_id=rec.id,
                        role=role,
                        block_id=obj.block_id,
                        box=box,
                        clean=clean32,
                        gt_site=site_encode(obj.pose.t, box, k).as_array(),
                        gt_cands=cands,
                        gt_pose=obj.pose,
                    )
                )
            base_obj = rec.scene.objects[rec.base_id]
            target_obj = rec.scene.objects[rec.target_id]
            target_model = catalog[target_obj.block_id]
            asm = rec.gt_assembly
            rel = relative_assembly(rec.cmd.action, catalog[base_obj.block_id], target_model)
            self.assembly.append(
                AssemblySample(
                    record_id=rec.id,
                    crop_idx=self.crop_index[(rec.id, 0)],
                    tokens=np.asarray(tokenize(rec.instruction, g), dtype=np.int64),
                    target_block=target_obj.block_id,
                    gt_site=site_encode(asm.t, rec.boxes[rec.base_id], k).as_array(),
                    gt_cands=np.stack([asm.rot.m @ sym.m for sym in target_model.sym_group]),
                    gt_rel_t=rel.t.copy(),
                    gt_rel_cands=np.stack([sym.m for sym in target_model.sym_group]),
                    gt_pose=asm,
                )
            )

    def noisy_input(self, crop: CropSample, noise: NoiseConfig, seed: int) -> np.ndarray:
        per = perturb_maps(crop.clean, noise, seed)
        s = per.mask.shape[0]
        x = np.empty((4, s, s), dtype=np.float32)
        x[:3] = per.coords
        x[3] = per.mask
        return x

    def _pose_batch(self, samples, verts_key, site_key, cands_key) -> PoseLossBatch:
        verts_list = [self.verts[getattr(sm, verts_key)] for sm in samples]
        nmax = max(v.shape[1] for v in verts_list)
        kmax = max(getattr(sm, cands_key).shape[0] for sm in samples)
        b = len(samples)
        verts = np.zeros((b, 3, nmax))
        counts = np.empty(b)
        cands = np.empty((b, kmax, 3, 3))
        sites = np.empty((b, 3))
        for j, (sm, v) in enumerate(zip(samples, verts_list)):
            verts[j, :, : v.shape[1]] = v
            counts[j] = v.shape[1]
            c = getattr(sm, cands_key)
            cands[j, : c.shape[0]] = c
            cands[j, c.shape[0] :] = c[0]  # pad with the first candidate (ties pick it)
            sites[j] = getattr(sm, site_key)
        return PoseLossBatch(verts=verts, counts=counts, gt_candidates=cands, gt_site=sites)

    def stage1_batch(self, idxs, cfg: TrainConfig, epoch: int, val: bool = False):
        samples = [self.crops[i] for i in idxs]
        s = cfg.map_size
        x = np.empty((len(samples), 4, s, s), dtype=np.float32)
        clean_coords = np.empty((len(samples), 3, s, s), dtype=np.float32)
        mask = np.empty((len(samples), s, s), dtype=np.float32)
        tag = _VAL_TAG if val else 1
        ep = 0 if val else epoch
        for j, c in enumerate(samples):
            seed = derive_seed(cfg.seed, tag, ep, c.record_id, c.role)
            x[j] = self.noisy_input(c, cfg.noise, seed)
            clean_coords[j] = c.clean.coords
            mask[j] = c.clean.mask
        batch = self._pose_batch(samples, "block_id", "gt_site", "gt_cands")
        return x, clean_coords, mask, batch, samples

    def stage2_batch(self, idxs, cfg: TrainConfig, epoch: int, val: bool = False):
        samples = [self.assembly[i] for i in idxs]
        crops = [self.crops[sm.crop_idx] for sm in samples]
        s = cfg.map_size
        x = np.empty((len(samples), 4, s, s), dtype=np.float32)
        tag = _VAL_TAG if val else 2
        ep = 0 if val else epoch
        for j, c in enumerate(crops):
            seed = derive_seed(cfg.seed, tag, ep, c.record_id, c.role)
            x[j] = self.noisy_input(c, cfg.noise, seed)
        tokens = np.stack([sm.tokens for sm in samples])
        if cfg.variant == "relpose":
            batch = self._pose_batch(samples, "target_block", "gt_rel_t", "gt_rel_cands")
        else:
            batch = self._pose_batch(samples, "target_block", "gt_site", "gt_cands")
        return x, tokens, batch, samples, crops


# --------------------------------------------------------------------------
# optimizer


class AdamState:
    def __init__(self):
        self.m = {}
        self.v = {}
        self.step = 0

    def arrays(self) -> dict:
        out = {}
        for k, v in self.m.items():
            out[f"opt.m.{k}"] = v
        for k, v in self.v.items():
            out[f"opt.v.{k}"] = v
        return out


def optimizer_step(params: ParamSet, state: AdamState, lr: float, warmup_steps: int = 100):
    """Adam with linear warmup; frozen parameters are skipped entirely."""
    state.step += 1
    lr_t = lr * min(1.0, state.step / warmup_steps) if warmup_steps > 0 else lr
    b1c = 1.0 - ADAM_BETA1 ** state.step
    b2c = 1.0 - ADAM_BETA2 ** state.step
    for name in params.names():
        if name in params.frozen:
            continue
        t = params[name]
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        g = g.astype(t.data.dtype, copy=False)
        if name not in state.m:
            state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        update = (lr_t / b1c) * m / (np.sqrt(v / b2c) + ADAM_EPS)
        t.data = t.data - update.astype(t.data.dtype, copy=False)


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str, header: dict, arrays: dict):
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", 1))
        f.write(struct.pack("<Q", len(payload)))
        f.write(payload)
        names = sorted(arrays)
        f.write(struct.pack("<Q", len(names)))
        for name in names:
            arr = np.ascontiguousarray(arrays[name], dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<Q", d))
            raw = arr.tobytes()
            f.write(struct.pack("<Q", len(raw)))
            f.write(raw)


def load_checkpoint(path: str) -> tuple:
    with open(path, "rb") as f:
        if f.read(4) != _CKPT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != 1:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        (count,) = struct.unpack("<Q", f.read(8))
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = tuple(struct.unpack("<Q", f.read(8))[0] for _ in range(ndim))
            (nbytes,) = struct.unpack("<Q", f.read(8))
            arrays[name] = np.frombuffer(f.read(nbytes), dtype="<f4").reshape(shape).copy()
    return header, arrays


def _split_opt_arrays(arrays: dict) -> tuple:
    params = {}
    state = AdamState()
    for k, v in arrays.items():
        if k.startswith("opt.m."):
            state.m[k[len("opt.m.") :]] = v
        elif k.startswith("opt.v."):
            state.v[k[len("opt.v.") :]] = v
        else:
            params[k] = v
    return params, state


# --------------------------------------------------------------------------
# prediction and evaluation


_FALLBACK_POSE = Pose(Rotation3.identity(), np.array([1e6, 1e6, 1e6]))


def _decode_or_fallback(kind: str, r6d, site, box, k):
    try:
        if kind == "site":
            return decode_head(r6d, site, box, k)
        return decode_relative(r6d, site)
    except DegenerateInput:
        return _FALLBACK_POSE


class no_grad:
    """Temporarily clear requires_grad on all parameters (inference mode)."""

    def __init__(self, params: ParamSet):
        self.params = params
        self.saved = {}

    def __enter__(self):
        for name, t in self.params.params.items():
            self.saved[name] = t.requires_grad
            t.requires_grad = False
        return self

    def __exit__(self, *exc):
        for name, t in self.params.params.items():
            t.requires_grad = self.saved[name]
        return False


def predict_records(params: ParamSet, cfg: TrainConfig, data: TrainingData,
                    with_assembly: bool = True, batch: int = 64) -> list:
    """Run both branches on every record; returns prediction dicts with
    camera-frame poses, ready for recall_table or the predictions file."""
    net = cfg.net()
    preds = {rec.id: {"record_id": rec.id, "base": None, "target": None, "assembly": None}
             for rec in data.records}
    n = len(data.crops)
    base_poses = {}
    with no_grad(params):
        for lo in range(0, n, batch):
            idxs = list(range(lo, min(lo + batch, n)))
            x, _, _, _, samples = data.stage1_batch(idxs, cfg, epoch=0, val=True)
            _, r6d, site = direct_branch(params, x, net)
            for j, c in enumerate(samples):
                rec = preds[c.record_id]
                pose = _decode_or_fallback(
                    "site", r6d.data[j], site.data[j], c.box, data.camera[c.record_id]
                )
                rec["base" if c.role == 0 else "target"] = pose
                if c.role == 0:
                    base_poses[c.record_id] = pose
        if with_assembly:
            m = len(data.assembly)
            for lo in range(0, m, batch):
                idxs = list(range(lo, min(lo + batch, m)))
                x, tokens, _, samples, crops = data.stage2_batch(idxs, cfg, epoch=0, val=True)
                refined = refine_maps(params, x, net)
                r6d, site = language_branch(params, refined, tokens, net, cfg.variant)
                for j, (sm, c) in enumerate(zip(samples, crops)):
                    if cfg.variant == "relpose":
                        rel = _decode_or_fallback("rel", r6d.data[j], site.data[j], None, None)
                        preds[sm.record_id]["assembly"] = compose(base_poses[sm.record_id], rel)
                    else:
                        preds[sm.record_id]["assembly"] = _decode_or_fallback(
                            "site", r6d.data[j], site.data[j], c.box, data.camera[sm.record_id]
                        )
    return [preds[rec.id] for rec in data.records]


# --------------------------------------------------------------------------
# the training loop


def _metrics_row(report, section: str) -> dict:
    if section not in report.means:
        return {k: float("nan") for k in METRIC_KEYS}
    return dict(report.means[section])


class Trainer:
    def __init__(self, train_records, val_records, cfg: TrainConfig, out_dir: str,
                 grammar: Grammar = None, log=None):
        self.cfg = cfg
        self.g = grammar or default_grammar()
        self.net = cfg.net()
        self.out_dir = out_dir
        os.makedirs(out_dir, exist_ok=True)
        self.log = log if log is not None else (lambda msg: None)
        self.data = TrainingData(train_records, cfg, self.g)
        self.val_data = TrainingData(val_records, cfg, self.g)
        self.val_records = val_records
        self.params = init_params(self.net, len(self.g.vocab), cfg.seed, cfg.variant)
        self.opt = AdamState()
        self.stage = 1
        self.epoch = 0  # completed epochs within the current stage
        self.ckpt_path = os.path.join(out_dir, "checkpoint.bin")
        self.metrics_path = os.path.join(out_dir, "metrics.csv")
        self.records_by_id = {r.id: r for r in val_records}
        self.last_val = {}

    # -- state --------------------------------------------------------

    def _record_map_cache(self):
        return None

    def save(self, path: str = None):
        header = {
            "schema": 1,
            "kind": "lanpose-checkpoint",
            "config": self.cfg.to_dict(),
            "config_hash": train_config_hash(self.cfg),
            "variant": self.cfg.variant,
            "stage": self.stage,
            "epoch": self.epoch,
            "opt_step": self.opt.step,
            "has_optimizer": True,
            "vocab_size": len(self.g.vocab),
        }
        arrays = dict(self.params.state_arrays())
        arrays.update(self.opt.arrays())
        save_checkpoint(path or self.ckpt_path, header, arrays)

    def load(self, path: str):
        header, arrays = load_checkpoint(path)
        if header.get("config_hash") != train_config_hash(self.cfg):
            raise CheckpointError("checkpoint was produced with a different training config")
        params_arrays, opt = _split_opt_arrays(arrays)
        self.stage = int(header["stage"])
        self.epoch = int(header["epoch"])
        if self.stage == 2:
            self._enter_stage2(fresh_opt=False)
        self.params.load_arrays(params_arrays)
        opt.step = int(header["opt_step"])
        self.opt = opt

    def _enter_stage2(self, fresh_opt: bool = True):
        self.params.freeze_prefix("direct.")
        self.stage = 2
        if fresh_opt:
            self.opt = AdamState()

    # -- epochs -------------------------------------------------------

    def _train_epoch_stage1(self, epoch: int) -> float:
        cfg = self.cfg
        n = len(self.data.crops)
        perm = np.random.default_rng(np.random.SeedSequence([cfg.seed, 101, epoch])).permutation(n)
        total, steps = 0.0, 0
        for lo in range(0, n, cfg.batch_size):
            idxs = perm[lo : lo + cfg.batch_size]
            x, clean_coords, mask, batch, _ = self.data.stage1_batch(idxs, cfg, epoch)
            self.params.zero_grad()
            refined, r6d, site = direct_branch(self.params, x, self.net)
            loss = ad.add(loss_pose(r6d, site, batch), loss_geom(refined, clean_coords, mask))
            val = loss.item()
            if not np.isfinite(val):
                raise NonFiniteLoss(f"stage 1 epoch {epoch} step {steps}: loss={val}")
            loss.backward()
            optimizer_step(self.params, self.opt, cfg.lr, cfg.warmup_steps)
            total += val
            steps += 1
        return total / max(steps, 1)

    def _train_epoch_stage2(self, epoch: int) -> float:
        cfg = self.cfg
        n = len(self.data.assembly)
        perm = np.random.default_rng(np.random.SeedSequence([cfg.seed, 102, epoch])).permutation(n)
        total, steps = 0.0, 0
        for lo in range(0, n, cfg.batch_size):
            idxs = perm[lo : lo + cfg.batch_size]
            x, tokens, batch, _, _ = self.data.stage2_batch(idxs, cfg, epoch)
            self.params.zero_grad()
            refined = refine_maps(self.params, x, self.net)  # frozen: no graph
            r6d, site = language_branch(self.params, refined, tokens, self.net, cfg.variant)
            loss = loss_pose(r6d, site, batch)
            val = loss.item()
            if not np.isfinite(val):
                raise NonFiniteLoss(f"stage 2 epoch {epoch} step {steps}: loss={val}")
            loss.backward()
            optimizer_step(self.params, self.opt, cfg.lr, cfg.warmup_steps)
            total += val
            steps += 1
        return total / max(steps, 1)

    def validate(self, with_assembly: bool) -> dict:
        preds = predict_records(self.params, self.cfg, self.val_data, with_assembly=with_assembly)
        if not with_assembly:
            for p in preds:
                p["assembly"] = None
        report = recall_table(self.val_records, preds)
        out = {"object": _metrics_row(report, "object")}
        if with_assembly:
            out["assembly"] = _metrics_row(report, "assembly")
        self.last_val = out
        return out

    def _log_metrics(self, stage: int, epoch: int, loss: float, rows: dict):
        new = not os.path.exists(self.metrics_path)
        with open(self.metrics_path, "a", encoding="utf-8") as f:
            if new:
                f.write("stage,epoch,branch,loss," + ",".join(METRIC_KEYS) + "\n")
            for branch, vals in rows.items():
                cells = [str(stage), str(epoch), branch, f"{loss:.6f}"]
                cells += [f"{vals[k]:.2f}" for k in METRIC_KEYS]
                f.write(",".join(cells) + "\n")

    def run(self, stop_after: tuple = None) -> dict:
        """Train both stages; stop_after=(stage, epoch) halts early after
        saving the checkpoint (used to exercise resume)."""
        cfg = self.cfg
        while True:
            if self.stage == 1 and self.epoch >= cfg.epochs_stage1:
                self._enter_stage2()
                self.epoch = 0
                continue
            if self.stage == 2 and self.epoch >= cfg.epochs_stage2:
                break
            epoch = self.epoch
            if self.stage == 1:
                loss = self._train_epoch_stage1(epoch)
                rows = self.validate(with_assembly=False)
            else:
                loss = self._train_epoch_stage2(epoch)
                rows = self.validate(with_assembly=True)
            self.epoch += 1
            self.save()
            self._log_metrics(self.stage, epoch, loss, rows)
            pretty = " ".join(f"{b}:0.1d={v['add_s_010']:.1f}" for b, v in rows.items())
            self.log(f"stage {self.stage} epoch {epoch}: loss={loss:.4f} {pretty}")
            if stop_after is not None and (self.stage, self.epoch) >= tuple(stop_after):
                return {"stopped": True, "stage": self.stage, "epoch": self.epoch}
        return {
            "stopped": False,
            "checkpoint": self.ckpt_path,
            "metrics_csv": self.metrics_path,
            "val": self.last_val,
        }


def train(train_records, val_records, cfg: TrainConfig, out_dir: str,
          grammar: Grammar = None, resume_from: str = None,
          stop_after: tuple = None, log=None) -> dict:
    trainer = Trainer(train_records, val_records, cfg, out_dir, grammar=grammar, log=log)
    if resume_from:
        trainer.load(resume_from)
    return trainer.run(stop_after=stop_after)


def load_trained(checkpoint_path: str, grammar: Grammar = None) -> tuple:
    """Restore (params, cfg) from a checkpoint for inference."""
    header, arrays = load_checkpoint(checkpoint_path)
    cfg = TrainConfig.from_dict(header["config"])
    g = grammar or default_grammar()
    if header.get("vocab_size") != len(g.vocab):
        raise CheckpointError("checkpoint vocabulary size does not match the grammar")
    params = init_params(cfg.net(), len(g.vocab), cfg.seed, cfg.variant)
    params_arrays, _ = _split_opt_arrays(arrays)
    params.load_arrays(params_arrays)
    if int(header.get("stage", 1)) == 2:
        params.freeze_prefix("direct.")
    return params, cfg
