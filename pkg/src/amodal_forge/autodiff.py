"""Minimal dense tensor engine with reverse-mode differentiation.

Covers exactly the operator set the adapter networks and losses need.
Feature maps are rank-4 channels-last (batch, height, width, channels);
pooled vectors are (batch, channels); losses are rank-0 scalars.

A Tape records operations in execution order (a Wengert list); backward
walks it once in reverse. Training runs in 32-bit; 64-bit exists for
gradient checking. No broadcasting beyond bias-add.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    CheckpointError,
    DegenerateVectorError,
    EmptyMaskError,
    ShapeMismatchError,
    TapeError,
)

_EPS_NORM = 1e-8


class Tape:
    """Ordered record of differentiable operations; single use per forward."""

    def __init__(self):
        self.entries = []  # (out_tensor, input_tensors, backward_fn)
        self.consumed = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


_TAPE_STACK: list = []


def _active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim > 4:
            raise ShapeMismatchError(f"rank {arr.ndim} > 4 unsupported")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


def _record(out: Tensor, inputs: Sequence[Tensor], bwd: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.entries.append((out, tuple(inputs), bwd))
    return out


def _check_same(a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeMismatchError(f"shape mismatch {a.data.shape} vs {b.data.shape}")
    if a.data.dtype != b.data.dtype:
        raise ShapeMismatchError(f"dtype mismatch {a.data.dtype} vs {b.data.dtype}")


# ---------------------------------------------------------------------------
# elementwise and arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b)
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b)
    out = Tensor(a.data * b.data)
    return _record(out, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data * a.data.dtype.type(s))
    return _record(out, (a,), lambda g: (g * a.data.dtype.type(s),))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    y = np.empty_like(xd)
    pos = xd >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Tensor(y)
    return _record(out, (x,), lambda g: (g * y * (1.0 - y),))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    xd = x.data
    out = Tensor(np.where(xd > 0, xd, xd * xd.dtype.type(slope)))
    return _record(out, (x,), lambda g: (g * np.where(xd > 0, 1.0, slope).astype(xd.dtype),))


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), overflow-safe; softplus(-z) is -log(sigmoid(z))."""
    xd = x.data
    y = np.maximum(xd, 0) + np.log1p(np.exp(-np.abs(xd)))
    out = Tensor(y)

    def bwd(g):
        s = np.empty_like(xd)
        pos = xd >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
        ex = np.exp(xd[~pos])
        s[~pos] = ex / (1.0 + ex)
        return (g * s,)

    return _record(out, (x,), bwd)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != b.data.ndim or a.data.shape[:-1] != b.data.shape[:-1]:
        raise ShapeMismatchError(
            f"concat requires equal non-channel dims, got {a.data.shape} vs {b.data.shape}"
        )
    if a.data.dtype != b.data.dtype:
        raise ShapeMismatchError("concat dtype mismatch")
    ca = a.data.shape[-1]
    out = Tensor(np.concatenate([a.data, b.data], axis=-1))
    return _record(out, (a, b), lambda g: (g[..., :ca], g[..., ca:]))


# ---------------------------------------------------------------------------
# convolution and spatial ops


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """Cross-correlation with zero same-padding, channels-last.

    x: (B, H, W, Cin); w: (kh, kw, Cin, Cout); b: (Cout,). Odd kernels only
    (same-padding is defined by p = k // 2).
    """
    if x.data.ndim != 4 or w.data.ndim != 4 or b.data.ndim != 1:
        raise ShapeMismatchError("conv2d expects rank-4 x/w and rank-1 bias")
    B, H, W, Cin = x.data.shape
    kh, kw, wc, Cout = w.data.shape
    if wc != Cin:
        raise ShapeMismatchError(f"conv2d channel mismatch: input {Cin}, weight {wc}")
    if b.data.shape[0] != Cout:
        raise ShapeMismatchError("conv2d bias length != Cout")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeMismatchError("conv2d requires odd kernels for same-padding")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    Ho = (H + 2 * ph - kh) // stride + 1
    Wo = (W + 2 * pw - kw) // stride + 1
    lim_i = H + 2 * ph - kh + 1
    lim_j = W + 2 * pw - kw + 1
    out_d = np.zeros((B, Ho, Wo, Cout), dtype=x.data.dtype)
    out_d += b.data
    # float64 accumulates one (di, dj, ci) term at a time in fixed order so
    # results are reproducible against a plain-loop reference; float32 (the
    # training path) batches each offset through one GEMM.
    exact_order = x.data.dtype == np.float64
    for di in range(kh):
        for dj in range(kw):
            xs = xp[:, di : di + lim_i : stride, dj : dj + lim_j : stride, :]
            if exact_order:
                for ci in range(Cin):
                    out_d += xs[..., ci, None] * w.data[di, dj, ci]
            else:
                out_d += xs @ w.data[di, dj]
    out = Tensor(out_d)

    def bwd(g):
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for di in range(kh):
                for dj in range(kw):
                    gxp[:, di : di + lim_i : stride, dj : dj + lim_j : stride, :] += (
                        g @ w.data[di, dj].T
                    )
            gx = gxp[:, ph : ph + H, pw : pw + W, :]
            if ph or pw:
                gx = np.ascontiguousarray(gx)
        if w.requires_grad:
            gw = np.empty_like(w.data)
            gflat = g.reshape(-1, Cout)
            for di in range(kh):
                for dj in range(kw):
                    xs = xp[:, di : di + lim_i : stride, dj : dj + lim_j : stride, :]
                    gw[di, dj] = xs.reshape(-1, Cin).T @ gflat
        if b.requires_grad:
            gb = g.sum(axis=(0, 1, 2))
        return (gx, gw, gb)

    return _record(out, (x, w, b), bwd)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeMismatchError("upsample_nearest expects rank-4")
    out = Tensor(x.data.repeat(factor, axis=1).repeat(factor, axis=2))

    def bwd(g):
        B, Ho, Wo, C = g.shape
        gr = g.reshape(B, Ho // factor, factor, Wo // factor, factor, C)
        return (gr.sum(axis=(2, 4)),)

    return _record(out, (x,), bwd)


def avg_downsample(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping window average over the spatial dims."""
    if x.data.ndim != 4:
        raise ShapeMismatchError("avg_downsample expects rank-4")
    B, H, W, C = x.data.shape
    if H % factor or W % factor:
        raise ShapeMismatchError(f"spatial dims {H}x{W} not divisible by {factor}")
    xr = x.data.reshape(B, H // factor, factor, W // factor, factor, C)
    out = Tensor(xr.mean(axis=(2, 4)))

    def bwd(g):
        scale_ = 1.0 / (factor * factor)
        gfull = (g * scale_)[:, :, None, :, None, :]
        gfull = np.broadcast_to(gfull, (B, H // factor, factor, W // factor, factor, C))
        return (gfull.reshape(B, H, W, C).astype(x.data.dtype),)

    return _record(out, (x,), bwd)


def masked_mean(e: Tensor, m: Tensor) -> Tensor:
    """Channelwise mean over masked positions: sum(E * m) / sum(m) per sample.

    e: (B, H, W, C); m: (B, H, W, 1) with values in [0, 1] (m is treated as a
    constant, no gradient flows into it). Raises EmptyMaskError when any
    sample's mask sums to zero.
    """
    if e.data.ndim != 4 or m.data.ndim != 4 or m.data.shape[-1] != 1:
        raise ShapeMismatchError("masked_mean expects (B,H,W,C) and (B,H,W,1)")
    if e.data.shape[:3] != m.data.shape[:3]:
        raise ShapeMismatchError(
            f"spatial dims differ: {e.data.shape} vs {m.data.shape}"
        )
    denom = m.data.sum(axis=(1, 2))  # (B, 1)
    if (denom <= 0).any():
        raise EmptyMaskError("masked_mean over an empty region")
    sums = (e.data * m.data).sum(axis=(1, 2))  # (B, C)
    out = Tensor(sums / denom)

    def bwd(g):
        ge = (g / denom)[:, None, None, :] * m.data
        return (ge.astype(e.data.dtype), None)

    return _record(out, (e, m), bwd)


def cosine(u: Tensor, v: Tensor) -> Tensor:
    """Row-wise cosine similarity for (B, C) inputs -> (B,)."""
    if u.data.ndim != 2 or v.data.ndim != 2:
        raise ShapeMismatchError("cosine expects (B, C) inputs")
    _check_same(u, v)
    nu = np.sqrt((u.data**2).sum(axis=1))
    nv = np.sqrt((v.data**2).sum(axis=1))
    if (nu <= _EPS_NORM).any() or (nv <= _EPS_NORM).any():
        raise DegenerateVectorError("cosine of near-zero vector")
    dot = (u.data * v.data).sum(axis=1)
    c = dot / (nu * nv)
    out = Tensor(c)

    def bwd(g):
        gu = g[:, None] * (v.data / (nu * nv)[:, None] - c[:, None] * u.data / (nu**2)[:, None])
        gv = g[:, None] * (u.data / (nu * nv)[:, None] - c[:, None] * v.data / (nv**2)[:, None])
        return (gu.astype(u.data.dtype), gv.astype(v.data.dtype))

    return _record(out, (u, v), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """(B, K) @ (K, M) + (M,)."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeMismatchError("linear expects rank-2 x and w")
    if x.data.shape[1] != w.data.shape[0]:
        raise ShapeMismatchError("linear inner dims differ")
    out = Tensor(x.data @ w.data + b.data)

    def bwd(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return (gx, gw, gb)

    return _record(out, (x, w, b), bwd)


def broadcast_spatial(x: Tensor, h: int, w: int) -> Tensor:
    """(B, C) -> (B, h, w, C) dense spatial broadcast."""
    if x.data.ndim != 2:
        raise ShapeMismatchError("broadcast_spatial expects (B, C)")
    B, C = x.data.shape
    out = Tensor(np.broadcast_to(x.data[:, None, None, :], (B, h, w, C)).copy())
    return _record(out, (x,), lambda g: (g.sum(axis=(1, 2)),))


# ---------------------------------------------------------------------------
# reductions and losses


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=x.data.dtype))
    return _record(out, (x,), lambda g: (np.full_like(x.data, g),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = Tensor(np.asarray(x.data.mean(), dtype=x.data.dtype))
    return _record(out, (x,), lambda g: (np.full_like(x.data, g / n),))


def mean_per_sample(x: Tensor) -> Tensor:
    """Mean over all non-batch axes -> (B,)."""
    if x.data.ndim < 2:
        raise ShapeMismatchError("mean_per_sample expects rank >= 2")
    axes = tuple(range(1, x.data.ndim))
    n = int(np.prod(x.data.shape[1:]))
    out = Tensor(x.data.mean(axis=axes))

    def bwd(g):
        gexp = g.reshape((g.shape[0],) + (1,) * (x.data.ndim - 1))
        return ((np.broadcast_to(gexp, x.data.shape) / n).astype(x.data.dtype),)

    return _record(out, (x,), bwd)


def bce_with_logits(pred: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross entropy on logits, log-sum-exp stabilized.

    Never NaN/Inf for finite logits; target values in {0, 1} are constants.
    """
    _check_same(pred, target)
    x = pred.data
    t = target.data
    per = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    n = x.size
    out = Tensor(np.asarray(per.mean(), dtype=x.dtype))

    def bwd(g):
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        return ((g * (s - t) / n).astype(x.dtype), None)

    return _record(out, (pred, target), bwd)


DICE_SMOOTH = 1.0


def dice_loss(pred_prob: Tensor, target: Tensor) -> Tensor:
    """1 - (2*sum(p*t) + s) / (sum(p) + sum(t) + s), smoothing s = 1."""
    _check_same(pred_prob, target)
    p = pred_prob.data
    t = target.data
    a = 2.0 * (p * t).sum() + DICE_SMOOTH
    d = p.sum() + t.sum() + DICE_SMOOTH
    out = Tensor(np.asarray(1.0 - a / d, dtype=p.dtype))

    def bwd(g):
        gp = g * (a - 2.0 * t * d) / (d * d)
        return (gp.astype(p.dtype), None)

    return _record(out, (pred_prob, target), bwd)


# ---------------------------------------------------------------------------
# backward pass and gradient checking


def backward(loss: Tensor) -> None:
    """Reverse-topological gradient accumulation from a scalar loss.

    Populates .grad on every tensor on the path that requires grad. A tape
    can be walked once per forward; re-running without a fresh forward is an
    error.
    """
    if loss.data.ndim != 0:
        raise TapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    tape = loss._tape
    if tape is None:
        raise TapeError("loss was not recorded on an active tape")
    if tape.consumed:
        raise TapeError("tape already consumed; re-run the forward pass")
    tape.consumed = True
    grads: dict = {id(loss): np.ones_like(loss.data)}
    leaves: dict = {}
    out_ids = {id(out) for out, _, _ in tape.entries}
    for out, inputs, bwd in reversed(tape.entries):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        out.grad = g if out.grad is None else out.grad + g
        for t, ig in zip(inputs, bwd(g)):
            if ig is None or not t.requires_grad:
                continue
            key = id(t)
            grads[key] = grads[key] + ig if key in grads else ig
            if key not in out_ids:
                leaves[key] = t
    for key, t in leaves.items():
        g = grads[key]
        t.grad = g if t.grad is None else t.grad + g


def grad_check(fn: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    fn must be a deterministic scalar-valued function of x. Relative error
    is |analytic - cd| / max(|analytic|, |cd|, 1e-8) per coordinate.
    """
    x.data = np.ascontiguousarray(x.data)
    x.grad = None
    with Tape():
        y = fn(x)
    backward(y)
    if x.grad is None:
        analytic = np.zeros_like(x.data)
    else:
        analytic = x.grad.copy()
    worst = 0.0
    flat = x.data.reshape(-1)
    aflat = analytic.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        yp = fn(x).item()
        flat[i] = orig - h
        ym = fn(x).item()
        flat[i] = orig
        cd = (yp - ym) / (2.0 * h)
        err = abs(aflat[i] - cd) / max(abs(aflat[i]), abs(cd), 1e-8)
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoint I/O: one-line JSON header, then little-endian float32 payload


CHECKPOINT_MAGIC = "amodal-forge-checkpoint-v1"


def save_checkpoint(path, named_params: dict, topology: Optional[dict] = None) -> None:
    """Write parameters in registration order.

    Header line: JSON with format tag, topology echo and name -> {shape,
    offset} (offset counted in float32 elements from the payload start).
    """
    tensors = {}
    offset = 0
    blobs = []
    for name, t in named_params.items():
        arr = np.ascontiguousarray(t.data.astype("<f4"))
        tensors[name] = {"shape": list(arr.shape), "offset": offset}
        offset += arr.size
        blobs.append(arr.tobytes())
    header = {
        "format": CHECKPOINT_MAGIC,
        "topology": topology or {},
        "tensors": tensors,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode("utf-8"))
        f.write(b"\n")
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> tuple:
    """Return (topology, dict name -> float32 ndarray)."""
    with open(path, "rb") as f:
        header_line = f.readline()
        payload = f.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable checkpoint header: {e}") from e
    if header.get("format") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"unknown checkpoint format {header.get('format')!r}")
    flat = np.frombuffer(payload, dtype="<f4")
    out = {}
    for name, meta in header["tensors"].items():
        shape = tuple(meta["shape"])
        size = int(np.prod(shape)) if shape else 1
        start = meta["offset"]
        if start + size > flat.size:
            raise CheckpointError(f"checkpoint truncated at tensor {name!r}")
        out[name] = flat[start : start + size].reshape(shape).copy()
    return header["topology"], out
