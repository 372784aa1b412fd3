"""Minimal reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps an ndarray plus an optional backprop record. Graphs are
built only when an operand requires gradients, so frozen submodules run at
plain numpy speed. Convolutions are expressed as im2col matrix products and
their input gradient as a dilated correlation, keeping both passes in BLAS.

float64 is used by gradient checks and loss oracles; training runs in
float32 so checkpoints round-trip bit-exactly.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import ShapeMismatch

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)
MASK_NEG = -1e30  # additive pre-softmax bias; exp underflows to exactly 0


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def item(self) -> float:
        return float(self.data)

    def backward(self):
        if self.data.size != 1:
            raise ShapeMismatch("backward() requires a scalar loss")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"


def _ensure(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None and arr.dtype != dtype:
        arr = arr.astype(dtype)
    return Tensor(arr)


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a = _ensure(a)
    b = _ensure(b, a.dtype)
    out_data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _ensure(a)
    b = _ensure(b, a.dtype)
    out_data = a.data - b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _ensure(a)
    b = _ensure(b, a.dtype)
    out_data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward)


def div(a, b) -> Tensor:
    a = _ensure(a)
    b = _ensure(b, a.dtype)
    out_data = a.data / b.data

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out_data, (a, b), backward)


def neg(a) -> Tensor:
    a = _ensure(a)

    def backward(g):
        _accum(a, -g)

    return _make(-a.data, (a,), backward)


def abs_(a) -> Tensor:
    a = _ensure(a)
    sign = np.sign(a.data)

    def backward(g):
        _accum(a, g * sign)

    return _make(np.abs(a.data), (a,), backward)


def sqrt_(a) -> Tensor:
    a = _ensure(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        _accum(a, g / (2.0 * out_data))

    return _make(out_data, (a,), backward)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _ensure(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape).copy())

    return _make(out_data, (a,), backward)


def mean_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _ensure(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    scale = a.data.size / out_data.size

    def backward(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape) / scale)

    return _make(out_data, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = _ensure(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(out_data, (a,), backward)


def transpose(a, axes) -> Tensor:
    a = _ensure(a)
    out_data = a.data.transpose(axes)
    inv = np.argsort(axes)

    def backward(g):
        _accum(a, g.transpose(inv))

    return _make(out_data, (a,), backward)


def slice_axis(a, axis: int, start: int, end: int) -> Tensor:
    a = _ensure(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, end)
    idx = tuple(idx)

    def backward(g):
        gg = np.zeros_like(a.data)
        gg[idx] = g
        _accum(a, gg)

    return _make(a.data[idx], (a,), backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = [_ensure(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def backward(g):
        offset = 0
        for t, s in zip(tensors, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offset, offset + s)
            _accum(t, g[tuple(idx)])
            offset += s

    return _make(out_data, tuple(tensors), backward)


def matmul(a, b) -> Tensor:
    a = _ensure(a)
    b = _ensure(b, a.dtype)
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _accum(a, _unbroadcast(ga, a.data.shape))
        _accum(b, _unbroadcast(gb, b.data.shape))

    return _make(out_data, (a, b), backward)


def cross3(a, b) -> Tensor:
    """Cross product along the last axis (size 3)."""
    a = _ensure(a)
    b = _ensure(b, a.dtype)
    if a.data.shape[-1] != 3 or b.data.shape[-1] != 3:
        raise ShapeMismatch("cross3 needs trailing dimension 3")
    out_data = np.cross(a.data, b.data)

    def backward(g):
        _accum(a, _unbroadcast(np.cross(b.data, g), a.data.shape))
        _accum(b, _unbroadcast(np.cross(g, a.data), b.data.shape))

    return _make(out_data, (a, b), backward)


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    a = _ensure(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out_data = x * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        _accum(a, g * (cdf + x * pdf))

    return _make(out_data, (a,), backward)


def sigmoid(a) -> Tensor:
    a = _ensure(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        _accum(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


def softmax(a, bias=None, axis: int = -1) -> Tensor:
    """Row-wise softmax of (a + bias); bias is a constant additive mask."""
    a = _ensure(a)
    x = a.data
    if bias is not None:
        bias = np.asarray(bias, dtype=x.dtype)
        try:
            x = x + bias
        except ValueError as e:
            raise ShapeMismatch(f"softmax bias shape {bias.shape} vs {x.shape}") from e
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accum(a, out_data * (g - dot))

    return _make(out_data, (a,), backward)


def linear(x, w, b=None) -> Tensor:
    """y = x @ w (+ b) over the trailing feature axis."""
    x = _ensure(x)
    w = _ensure(w)
    din, dout = w.data.shape
    if x.data.shape[-1] != din:
        raise ShapeMismatch(f"linear: input {x.data.shape} vs weight {w.data.shape}")
    out_data = x.data @ w.data
    if b is not None:
        b = _ensure(b)
        out_data = out_data + b.data

    def backward(g):
        gf = g.reshape(-1, dout)
        xf = x.data.reshape(-1, din)
        _accum(w, xf.T @ gf)
        if b is not None:
            _accum(b, gf.sum(axis=0))
        _accum(x, (gf @ w.data.T).reshape(x.data.shape))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out_data, parents, backward)


def _im2col(xp: np.ndarray, stride: int) -> np.ndarray:
    """(B, C, Hp, Wp) -> (B, P, C*9) windows of 3x3 with the given stride."""
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho * wo, c * 9), ho, wo


def conv2d(x, w, b) -> Tensor:
    """3x3 convolution, stride 2, zero padding 1.

    Input (B, C, H, W) with even H, W; output (B, Co, H/2, W/2).
    """
    x = _ensure(x)
    w = _ensure(w)
    b = _ensure(b)
    if x.data.ndim != 4 or w.data.ndim != 4 or w.data.shape[2:] != (3, 3):
        raise ShapeMismatch(f"conv2d: input {x.data.shape}, weight {w.data.shape}")
    bsz, cin, h, wid = x.data.shape
    cout = w.data.shape[0]
    if w.data.shape[1] != cin or b.data.shape != (cout,):
        raise ShapeMismatch(f"conv2d: weight {w.data.shape} or bias {b.data.shape} mismatch")
    if h % 2 or wid % 2:
        raise ShapeMismatch("conv2d expects even spatial dims")
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols, ho, wo = _im2col(xp, 2)
    out_flat = cols @ w.data.reshape(cout, cin * 9).T + b.data
    out_data = out_flat.transpose(0, 2, 1).reshape(bsz, cout, ho, wo)

    def backward(g):
        gf = g.reshape(bsz, cout, ho * wo).transpose(0, 2, 1)  # (B, P, Co)
        _accum(w, np.tensordot(gf, cols, axes=([0, 1], [0, 1])).reshape(w.data.shape))
        _accum(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            # input gradient = stride-1 correlation of the dilated output
            # gradient with the flipped, channel-transposed kernel
            dil = np.zeros((bsz, cout, h, wid), dtype=g.dtype)
            dil[:, :, ::2, ::2] = g
            dilp = np.pad(dil, ((0, 0), (0, 0), (1, 1), (1, 1)))
            wt = w.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1].reshape(cin, cout * 9)
            cols_b, hb, wb = _im2col(dilp, 1)
            gx = (cols_b @ wt.T).transpose(0, 2, 1).reshape(bsz, cin, hb, wb)
            _accum(x, gx)

    return _make(out_data, (x, w, b), backward)


def upsample2(x) -> Tensor:
    """Nearest-neighbour 2x upsampling of (B, C, H, W)."""
    x = _ensure(x)
    out_data = x.data.repeat(2, axis=2).repeat(2, axis=3)
    bsz, c, h, w = x.data.shape

    def backward(g):
        _accum(x, g.reshape(bsz, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _make(out_data, (x,), backward)


def group_norm(x, gamma, beta, groups: int = 4, eps: float = 1e-5) -> Tensor:
    """GroupNorm over (B, C, H, W) with per-channel affine parameters."""
    x = _ensure(x)
    gamma = _ensure(gamma)
    beta = _ensure(beta)
    bsz, c, h, w = x.data.shape
    if c % groups:
        raise ShapeMismatch(f"group_norm: {c} channels not divisible by {groups} groups")
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeMismatch("group_norm: affine parameters must be per-channel")
    xg = x.data.reshape(bsz, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat_g = (xg - mu) * inv_std
    xhat = xhat_g.reshape(bsz, c, h, w)
    out_data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g):
        _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        _accum(beta, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxhat = (g * gamma.data[None, :, None, None]).reshape(bsz, groups, -1)
            m1 = dxhat.mean(axis=2, keepdims=True)
            m2 = (dxhat * xhat_g).mean(axis=2, keepdims=True)
            dx = inv_std * (dxhat - m1 - xhat_g * m2)
            _accum(x, dx.reshape(x.data.shape))

    return _make(out_data, (x, gamma, beta), backward)


def embedding(table, ids) -> Tensor:
    """Row lookup: table (V, d), ids any integer shape -> (*ids.shape, d)."""
    table = _ensure(table)
    ids = np.asarray(ids)
    if ids.max(initial=0) >= table.data.shape[0] or ids.min(initial=0) < 0:
        raise ShapeMismatch("embedding: id out of range")
    out_data = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        _accum(table, gt)

    return _make(out_data, (table,), backward)


def bce_with_logits(z, target) -> Tensor:
    """Mean binary cross-entropy on logits; numerically stable."""
    z = _ensure(z)
    t = np.asarray(target, dtype=z.dtype)
    if t.shape != z.data.shape:
        raise ShapeMismatch(f"bce: target {t.shape} vs logits {z.data.shape}")
    x = z.data
    loss = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    out_data = np.asarray(loss.mean(), dtype=z.dtype)

    def backward(g):
        sig = 1.0 / (1.0 + np.exp(-x))
        _accum(z, g * (sig - t) / x.size)

    return _make(out_data, (z,), backward)
