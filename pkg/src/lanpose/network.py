"""The two-branch pose regression network and its losses.

The direct branch denoises correspondence maps with a small conv
encoder-decoder and regresses the observed object's pose from the refined
maps (6D rotation + box-relative translation). The language branch fuses
the refined maps, cut into patches, with a learned text encoding through
single-head cross-attention and regresses the assembly pose with a head of
the same topology.

All convolutions are 3x3 / stride 2 / pad 1; decoding upsamples first so a
stride-2 convolution becomes resolution-preserving or 2x upsampling.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CheckpointError, ConfigError
from .geometry import (
    BBox2D,
    CameraIntrinsics,
    Pose,
    SiteTranslation,
    rot6d_to_matrix,
    site_decode,
)
from .grammar import PAD_ID

VARIANTS = ("attention", "concat", "relpose")


@dataclass(frozen=True)
class NetConfig:
    map_size: int = 32
    d_model: int = 64
    patch: int = 4
    refiner_channels: tuple = (16, 32, 16)
    head_channels: tuple = (32, 64, 128)
    fc_dim: int = 256
    groups: int = 4
    max_tokens: int = 16

    def __post_init__(self):
        if self.map_size % (2 * self.patch):
            raise ConfigError("map_size must be divisible by 2*patch")
        side = self.map_size // self.patch
        if side % 8:
            raise ConfigError("patch grid side must be a multiple of 8 for the conv head")

    @property
    def n_patches(self) -> int:
        side = self.map_size // self.patch
        return side * side

    @property
    def patch_dim(self) -> int:
        return 4 * self.patch * self.patch


@dataclass(frozen=True)
class PoseHeadOutput:
    r6d: np.ndarray  # (6,)
    site: SiteTranslation


class ParamSet:
    """Named trainable tensors with per-name freeze flags."""

    def __init__(self):
        self.params: dict = {}
        self.frozen: set = set()

    def add(self, name: str, array: np.ndarray):
        if name in self.params:
            raise CheckpointError(f"duplicate parameter {name!r}")
        self.params[name] = Tensor(array, requires_grad=True)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def names(self) -> list:
        return sorted(self.params)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def freeze_prefix(self, prefix: str):
        for name, t in self.params.items():
            if name.startswith(prefix):
                self.frozen.add(name)
                t.requires_grad = False

    def state_arrays(self) -> dict:
        return {k: v.data for k, v in self.params.items()}

    def load_arrays(self, arrays: dict):
        if set(arrays) != set(self.params):
            missing = set(self.params) - set(arrays)
            extra = set(arrays) - set(self.params)
            raise CheckpointError(f"parameter set mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for k, v in arrays.items():
            if v.shape != self.params[k].data.shape:
                raise CheckpointError(f"shape mismatch for {k}: {v.shape} vs {self.params[k].data.shape}")
            self.params[k].data = v.astype(self.params[k].data.dtype)


def _uniform(rng, shape, fan_in, dtype):
    s = np.sqrt(1.0 / fan_in)
    return rng.uniform(-s, s, size=shape).astype(dtype)


def _add_conv(ps: ParamSet, rng, name: str, cin: int, cout: int, dtype):
    ps.add(name + ".w", _uniform(rng, (cout, cin, 3, 3), cin * 9, dtype))
    ps.add(name + ".b", np.zeros(cout, dtype=dtype))


def _add_conv_gn(ps, rng, name, cin, cout, dtype):
    _add_conv(ps, rng, name, cin, cout, dtype)
    ps.add(name + ".gn_g", np.ones(cout, dtype=dtype))
    ps.add(name + ".gn_b", np.zeros(cout, dtype=dtype))


def _add_linear(ps, rng, name, din, dout, dtype, bias_init=None):
    ps.add(name + ".w", _uniform(rng, (din, dout), din, dtype))
    b = np.zeros(dout, dtype=dtype) if bias_init is None else np.asarray(bias_init, dtype=dtype)
    ps.add(name + ".b", b)


def _add_head(ps, rng, prefix, cin, cfg: NetConfig, side: int, dtype, site_bias):
    c1, c2, c3 = cfg.head_channels
    _add_conv_gn(ps, rng, prefix + ".c1", cin, c1, dtype)
    _add_conv_gn(ps, rng, prefix + ".c2", c1, c2, dtype)
    _add_conv_gn(ps, rng, prefix + ".c3", c2, c3, dtype)
    flat = c3 * (side // 8) ** 2
    _add_linear(ps, rng, prefix + ".fc1", flat, cfg.fc_dim, dtype)
    _add_linear(ps, rng, prefix + ".fc2", cfg.fc_dim, cfg.fc_dim, dtype)
    # identity-rotation bias keeps the 6D head decodable from step zero
    _add_linear(ps, rng, prefix + ".r6d", cfg.fc_dim, 6, dtype, bias_init=[1, 0, 0, 0, 1, 0])
    _add_linear(ps, rng, prefix + ".site", cfg.fc_dim, 3, dtype, bias_init=site_bias)


def init_params(cfg: NetConfig, vocab_size: int, seed: int, variant: str = "attention",
                dtype=np.float32) -> ParamSet:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0FFEE]))
    ps = ParamSet()
    r0, r1, r2 = cfg.refiner_channels
    _add_conv_gn(ps, rng, "direct.enc1", 4, r0, dtype)
    _add_conv_gn(ps, rng, "direct.enc2", r0, r1, dtype)
    _add_conv_gn(ps, rng, "direct.dec1", r1, r2, dtype)
    _add_conv(ps, rng, "direct.out", r2, 4, dtype)
    _add_head(ps, rng, "direct.head", 4, cfg, cfg.map_size, dtype, site_bias=[0.0, 0.0, 80.0])

    d = cfg.d_model
    ps.add("lang.embed.tok", (rng.normal(0.0, 0.02, size=(vocab_size, d))).astype(dtype))
    ps.add("lang.embed.pos", (rng.normal(0.0, 0.02, size=(cfg.max_tokens, d))).astype(dtype))
    _add_linear(ps, rng, "lang.patch", cfg.patch_dim, d, dtype)
    if variant == "concat":
        _add_linear(ps, rng, "lang.mix", 2 * d, d, dtype)
    else:
        ps.add("lang.attn.wq", _uniform(rng, (d, d), d, dtype))
        ps.add("lang.attn.wk", _uniform(rng, (d, d), d, dtype))
        ps.add("lang.attn.wv", _uniform(rng, (d, d), d, dtype))
    side = cfg.map_size // cfg.patch
    site_bias = [0.0, 0.0, 0.0] if variant == "relpose" else [0.0, 0.0, 80.0]
    _add_head(ps, rng, "lang.head", d, cfg, side, dtype, site_bias=site_bias)
    return ps


def _conv_gn_gelu(ps: ParamSet, name: str, x: Tensor, groups: int) -> Tensor:
    h = ad.conv2d(x, ps[name + ".w"], ps[name + ".b"])
    h = ad.group_norm(h, ps[name + ".gn_g"], ps[name + ".gn_b"], groups=groups)
    return ad.gelu(h)


def refine_maps(ps: ParamSet, x, cfg: NetConfig) -> Tensor:
    """Conv encoder-decoder: noisy (B,4,S,S) maps -> refined maps.

    Output channels: 3 coordinate channels plus a visibility logit.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    e1 = _conv_gn_gelu(ps, "direct.enc1", x, cfg.groups)
    e2 = _conv_gn_gelu(ps, "direct.enc2", e1, cfg.groups)
    d1 = _conv_gn_gelu(ps, "direct.dec1", ad.upsample2(ad.upsample2(e2)), cfg.groups)
    return ad.conv2d(ad.upsample2(ad.upsample2(d1)), ps["direct.out.w"], ps["direct.out.b"])


def _pose_head(ps: ParamSet, prefix: str, x: Tensor, cfg: NetConfig) -> tuple:
    h = _conv_gn_gelu(ps, prefix + ".c1", x, cfg.groups)
    h = _conv_gn_gelu(ps, prefix + ".c2", h, cfg.groups)
    h = _conv_gn_gelu(ps, prefix + ".c3", h, cfg.groups)
    b = h.data.shape[0]
    f = ad.reshape(h, (b, -1))
    f = ad.gelu(ad.linear(f, ps[prefix + ".fc1.w"], ps[prefix + ".fc1.b"]))
    f = ad.gelu(ad.linear(f, ps[prefix + ".fc2.w"], ps[prefix + ".fc2.b"]))
    r6d = ad.linear(f, ps[prefix + ".r6d.w"], ps[prefix + ".r6d.b"])
    site = ad.linear(f, ps[prefix + ".site.w"], ps[prefix + ".site.b"])
    return r6d, site


def direct_branch(ps: ParamSet, x, cfg: NetConfig) -> tuple:
    """(refined maps, r6d (B,6), site (B,3)) from noisy maps (B,4,S,S)."""
    refined = refine_maps(ps, x, cfg)
    r6d, site = _pose_head(ps, "direct.head", refined, cfg)
    return refined, r6d, site


def text_encode(ps: ParamSet, tokens: np.ndarray) -> Tensor:
    """Token + position embeddings summed: (B, L) ids -> (B, L, d)."""
    emb = ad.embedding(ps["lang.embed.tok"], tokens)
    return ad.add(emb, ps["lang.embed.pos"])


def padding_bias(tokens: np.ndarray, dtype=np.float32) -> np.ndarray:
    """(B, 1, L) additive attention bias: MASK_NEG at padding positions."""
    mask = (tokens == PAD_ID)
    bias = np.where(mask, ad.MASK_NEG, 0.0).astype(dtype)
    return bias[:, None, :]


def cross_attention(q_src: Tensor, kv_src: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
                    bias: Optional[np.ndarray] = None) -> Tensor:
    """Single-head cross-attention with residual: q + softmax(QK^T/sqrt(d)) V.

    `bias` is an additive constant applied to the scores before softmax;
    padding positions use a large negative value so they get exactly zero
    attention weight.
    """
    d = wq.data.shape[1]
    q = ad.matmul(q_src, wq)
    k = ad.matmul(kv_src, wk)
    v = ad.matmul(kv_src, wv)
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(d))
    attn = ad.softmax(scores, bias=bias)
    return ad.add(q_src, ad.matmul(attn, v))


def patchify(refined: Tensor, cfg: NetConfig) -> Tensor:
    """(B, 4, S, S) -> (B, n_patches, 4*patch*patch) in row-major patch order."""
    b = refined.data.shape[0]
    p = cfg.patch
    side = cfg.map_size // p
    x = ad.reshape(refined, (b, 4, side, p, side, p))
    x = ad.transpose(x, (0, 2, 4, 1, 3, 5))
    return ad.reshape(x, (b, side * side, 4 * p * p))


def language_branch(ps: ParamSet, refined, tokens: np.ndarray, cfg: NetConfig,
                    variant: str = "attention") -> tuple:
    """(r6d, site) for the assembly pose from refined maps + instruction.

    `variant` selects the fusion: cross-attention (default), channel-wise
    concat of the pooled text encoding + linear mix, or the relative-pose
    head (same fusion as default, translation interpreted as mm offsets).
    """
    refined = refined if isinstance(refined, Tensor) else Tensor(refined)
    b = refined.data.shape[0]
    patches = ad.linear(patchify(refined, cfg), ps["lang.patch.w"], ps["lang.patch.b"])
    tenc = text_encode(ps, tokens)
    if variant == "concat":
        nonpad = (tokens != PAD_ID).astype(refined.data.dtype)
        weights = nonpad / np.maximum(nonpad.sum(axis=1, keepdims=True), 1.0)
        pooled = ad.matmul(ad.transpose(tenc, (0, 2, 1)), Tensor(weights[:, :, None]))
        pooled = ad.transpose(pooled, (0, 2, 1))  # (B, 1, d)
        tiled = ad.mul(pooled, np.ones((1, cfg.n_patches, 1), dtype=refined.data.dtype))
        fused = ad.linear(ad.concat([patches, tiled], axis=2), ps["lang.mix.w"], ps["lang.mix.b"])
    else:
        fused = cross_attention(
            patches, tenc, ps["lang.attn.wq"], ps["lang.attn.wk"], ps["lang.attn.wv"],
            bias=padding_bias(tokens, refined.data.dtype),
        )
    side = cfg.map_size // cfg.patch
    grid = ad.transpose(ad.reshape(fused, (b, side, side, cfg.d_model)), (0, 3, 1, 2))
    return _pose_head(ps, "lang.head", grid, cfg)


def rot6d_tensor(a: Tensor) -> Tensor:
    """Differentiable Gram-Schmidt: (B, 6) -> (B, 3, 3) rotation matrices."""
    a1 = ad.slice_axis(a, 1, 0, 3)
    a2 = ad.slice_axis(a, 1, 3, 6)
    n1 = ad.sqrt_(ad.sum_(ad.mul(a1, a1), axis=1, keepdims=True))
    b1 = ad.div(a1, n1)
    dot = ad.sum_(ad.mul(b1, a2), axis=1, keepdims=True)
    resid = ad.sub(a2, ad.mul(dot, b1))
    n2 = ad.sqrt_(ad.sum_(ad.mul(resid, resid), axis=1, keepdims=True))
    b2 = ad.div(resid, n2)
    b3 = ad.cross3(b1, b2)
    bsz = a.data.shape[0]
    cols = [ad.reshape(v, (bsz, 3, 1)) for v in (b1, b2, b3)]
    return ad.concat(cols, axis=2)


def align_gt_rotations(r_pred: np.ndarray, gt_candidates: np.ndarray) -> np.ndarray:
    """Pick, per sample, the symmetry-equivalent ground truth closest to the
    prediction (max trace of R_gt_s^T R_pred; ties -> lowest index)."""
    traces = np.einsum("bkij,bij->bk", gt_candidates, r_pred)
    best = traces.argmax(axis=1)
    return gt_candidates[np.arange(len(best)), best]


@dataclass
class PoseLossBatch:
    """Constant per-sample supervision for the disentangled pose loss."""

    verts: np.ndarray  # (B, 3, Nmax), zero-padded
    counts: np.ndarray  # (B,)
    gt_candidates: np.ndarray  # (B, K, 3, 3) symmetry-equivalent gt rotations
    gt_site: np.ndarray  # (B, 3)


def loss_pose(r6d: Tensor, site: Tensor, batch: PoseLossBatch) -> Tensor:
    """Point-matching rotation loss + L1 on the site translation encoding.

    The symmetry alignment is chosen from the current prediction and treated
    as a constant for gradients.
    """
    dtype = r6d.data.dtype
    r_hat = rot6d_tensor(r6d)
    gt_rot = align_gt_rotations(r_hat.data.astype(np.float64), batch.gt_candidates.astype(np.float64))
    verts = batch.verts.astype(dtype)
    gt_pts = np.matmul(gt_rot, batch.verts).astype(dtype)
    diff = ad.sub(ad.matmul(r_hat, Tensor(verts)), Tensor(gt_pts))
    per_sample = ad.sum_(ad.abs_(diff), axis=(1, 2))
    l_rot = ad.mean_(ad.mul(per_sample, (1.0 / batch.counts).astype(dtype)))
    site_diff = ad.abs_(ad.sub(site, Tensor(batch.gt_site.astype(dtype))))
    l_site = ad.mean_(ad.sum_(site_diff, axis=1))
    return ad.add(l_rot, l_site)


def loss_geom(refined: Tensor, clean_coords: np.ndarray, mask: np.ndarray) -> Tensor:
    """L1 on coordinate channels inside the gt mask + BCE on the mask logit."""
    dtype = refined.data.dtype
    coords_pred = ad.slice_axis(refined, 1, 0, 3)
    logit = ad.reshape(ad.slice_axis(refined, 1, 3, 4), mask.shape)
    m3 = np.broadcast_to(mask[:, None, :, :], coords_pred.data.shape).astype(dtype)
    visible = max(float(mask.sum()), 1.0)
    l1_sum = ad.sum_(ad.mul(ad.abs_(ad.sub(coords_pred, clean_coords.astype(dtype))), m3))
    l1 = ad.mul(l1_sum, 1.0 / (3.0 * visible))
    bce = ad.bce_with_logits(logit, mask.astype(dtype))
    return ad.add(l1, bce)


def decode_head(r6d: np.ndarray, site: np.ndarray, box: BBox2D, k: CameraIntrinsics) -> Pose:
    """Decode head outputs into a camera-frame pose (raises DegenerateInput
    when the 6D rotation vector is collapsed)."""
    rot = rot6d_to_matrix(np.asarray(r6d[:3], dtype=np.float64), np.asarray(r6d[3:], dtype=np.float64))
    st = SiteTranslation(float(site[0]), float(site[1]), float(site[2]))
    return Pose(rot, site_decode(st, box, k))


def decode_relative(r6d: np.ndarray, trel: np.ndarray) -> Pose:
    """Decode the relative-pose head: rotation + raw mm translation."""
    rot = rot6d_to_matrix(np.asarray(r6d[:3], dtype=np.float64), np.asarray(r6d[3:], dtype=np.float64))
    return Pose(rot, np.asarray(trel, dtype=np.float64))


def head_output(r6d: np.ndarray, site: np.ndarray) -> PoseHeadOutput:
    return PoseHeadOutput(
        r6d=np.asarray(r6d, dtype=np.float64),
        site=SiteTranslation(float(site[0]), float(site[1]), float(site[2])),
    )
