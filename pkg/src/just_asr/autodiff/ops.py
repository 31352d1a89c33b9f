"""Differentiable primitives.

Shapes are explicit: binary elementwise ops need identical shapes, except
that one side may be a Python scalar or a 0-d tensor.  Ops that combine a
vector with every row of a tensor (``bias_add``, ``outer_add``) say so in
their name instead of relying on broadcasting.
"""

from __future__ import annotations

import builtins
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, record

_Scalar = (int, float, np.floating, np.integer)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _binary(a, b, op: str):
    """Normalise operands; returns (a, b, scalar_side) where scalar_side in {None, 'a', 'b'}."""
    if isinstance(b, _Scalar):
        return a, b, "b"
    if isinstance(a, _Scalar):
        return a, b, "a"
    if a.ndim == 0 and b.ndim != 0:
        return a, b, "a0"
    if b.ndim == 0 and a.ndim != 0:
        return a, b, "b0"
    _same_shape(a, b, op)
    return a, b, None


def _sum_to_scalar(g: np.ndarray) -> np.ndarray:
    return np.asarray(g.sum(), dtype=g.dtype)


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b, side = _binary(a, b, "add")
    if side == "b":
        return record(a.data + b, (a,), lambda g: (g,))
    if side == "a":
        return add(b, a)
    if side == "a0":
        return record(a.data + b.data, (a, b), lambda g: (_sum_to_scalar(g), g))
    if side == "b0":
        return record(a.data + b.data, (a, b), lambda g: (g, _sum_to_scalar(g)))
    return record(a.data + b.data, (a, b), lambda g: (g, g))


def neg(a: Tensor) -> Tensor:
    return record(-a.data, (a,), lambda g: (-g,))


def sub(a, b) -> Tensor:
    if isinstance(b, _Scalar):
        return add(a, -b)
    return add(a, neg(b))


def mul(a, b) -> Tensor:
    a, b, side = _binary(a, b, "mul")
    if side == "b":
        return record(a.data * b, (a,), lambda g: (g * b,))
    if side == "a":
        return mul(b, a)
    if side == "a0":
        return record(a.data * b.data, (a, b), lambda g: (_sum_to_scalar(g * b.data), g * a.data))
    if side == "b0":
        return record(a.data * b.data, (a, b), lambda g: (g * b.data, _sum_to_scalar(g * a.data)))
    return record(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b) -> Tensor:
    if isinstance(b, _Scalar):
        return mul(a, 1.0 / b)
    a, b, side = _binary(a, b, "div")
    if side == "a":
        out = a / b.data
        return record(out, (b,), lambda g: (-g * out / b.data,))
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        gb = -g * out / b.data
        if side == "a0":
            ga = _sum_to_scalar(ga)
        elif side == "b0":
            gb = _sum_to_scalar(gb)
        return ga, gb

    return record(out, (a, b), backward)


def bias_add(x: Tensor, bias: Tensor) -> Tensor:
    """Add a vector of length ``x.shape[-1]`` to every row of ``x``."""
    if bias.ndim != 1 or bias.shape[0] != x.shape[-1]:
        raise ShapeError(f"bias_add: bias shape {bias.shape} does not fit {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return record(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=lead)))


def outer_add(a: Tensor, b: Tensor) -> Tensor:
    """(B, T, J) and (B, U, J) -> (B, T, U, J) with out[b,t,u] = a[b,t] + b[b,u]."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[2]:
        raise ShapeError(f"outer_add: shape mismatch {a.shape} vs {b.shape}")
    out = a.data[:, :, None, :] + b.data[:, None, :, :]
    return record(out, (a, b), lambda g: (g.sum(axis=2), g.sum(axis=1)))


# ---------------------------------------------------------------- elementwise


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return record(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return record(np.log(x.data), (x,), lambda g: (g / x.data,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return record(out, (x,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * v) + 1.0)


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return record(out, (x,), lambda g: (g * out * (1.0 - out),))


def swish(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = x.data * s
    return record(out, (x,), lambda g: (g * (s + out * (1.0 - s)),))


def square(x: Tensor) -> Tensor:
    return record(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum(x, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``(..., m, k) @ (k, n)`` or batched ``(..., m, k) @ (..., k, n)`` with equal leading dims."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    out = np.matmul(a.data, b.data)
    if b.ndim == 2:
        k, n = b.shape

        def backward(g):
            ga = g @ b.data.T
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb

        return record(out, (a, b), backward)
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ {a.shape} vs {b.shape}")

    def backward(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return record(out, (a, b), backward)


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)
    return record(out, (x,), lambda g: (g.reshape(x.shape),))


def slice(x: Tensor, index) -> Tensor:  # noqa: A001
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return record(np.array(out), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    axis = axis % tensors[0].ndim
    for t in tensors[1:]:
        rest = lambda s: s[:axis] + s[axis + 1:]  # noqa: E731
        if t.ndim != tensors[0].ndim or rest(t.shape) != rest(tensors[0].shape):
            raise ShapeError(f"concat: shape mismatch {tensors[0].shape} vs {t.shape}")
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return record(out, tuple(tensors), lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    for t in tensors[1:]:
        _same_shape(tensors[0], t, "stack")
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return record(out, tuple(tensors), lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of a (N, d) table; result has shape ``ids.shape + (d,)``."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-d, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding_lookup: ids out of range for table of {table.shape[0]} rows")
    out = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return record(out, (table,), backward)


def mask_select(x: Tensor, mask) -> Tensor:
    """Rows of ``x`` (shape ``mask.shape + (d,)``) where ``mask`` is true, as (n, d)."""
    mask = np.asarray(mask, dtype=bool)
    if x.shape[: mask.ndim] != mask.shape or x.ndim != mask.ndim + 1:
        raise ShapeError(f"mask_select: mask shape {mask.shape} does not fit {x.shape}")
    out = x.data[mask]

    def backward(g):
        full = np.zeros_like(x.data)
        full[mask] = g
        return (full,)

    return record(out, (x,), backward)


def where(cond, a: Tensor, b: Tensor) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    _same_shape(a, b, "where")
    if cond.shape != a.shape:
        raise ShapeError(f"where: condition shape {cond.shape} vs operand {a.shape}")
    out = np.where(cond, a.data, b.data)
    return record(out, (a, b), lambda g: (np.where(cond, g, 0.0), np.where(cond, 0.0, g)))


def masked_fill(x: Tensor, mask, value: float) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeError(f"masked_fill: mask shape {mask.shape} vs {x.shape}")
    out = np.where(mask, np.asarray(value, dtype=x.dtype), x.data)
    return record(out, (x,), lambda g: (np.where(mask, 0.0, g).astype(g.dtype),))


def straight_through(hard, soft: Tensor) -> Tensor:
    """Forward value ``hard`` exactly; gradient passes to ``soft`` unchanged."""
    hard = np.asarray(hard, dtype=soft.dtype)
    if hard.shape != soft.shape:
        raise ShapeError(f"straight_through: shape mismatch {hard.shape} vs {soft.shape}")
    return record(hard.copy(), (soft,), lambda g: (g,))


# ---------------------------------------------------------------- normalisation


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return record(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    return record(out, (x,), lambda g: (g - np.exp(out) * g.sum(axis=axis, keepdims=True),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias {gamma.shape}/{beta.shape} vs features {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return record(out, (x, gamma, beta), backward)


class BatchNormStats:
    """Running statistics of a batch-norm layer (not trainable)."""

    def __init__(self, channels: int, momentum: float = 0.1, dtype=np.float32) -> None:
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.batches = 0


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, stats: BatchNormStats,
               train: bool, mask=None, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis using statistics over every other position.

    ``mask`` (shape ``x.shape[:-1]``) restricts which positions contribute to
    the batch statistics, so padding never leaks into them.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gain/bias {gamma.shape}/{beta.shape} vs channels {c}")
    lead = tuple(range(x.ndim - 1))
    if not train:
        if stats.batches == 0:
            raise RuntimeError("batch_norm: eval mode requested before any training statistics exist")
        inv = 1.0 / np.sqrt(stats.var + eps)
        xhat = (x.data - stats.mean) * inv
        out = (xhat * gamma.data + beta.data).astype(x.dtype)
        return record(out, (x, gamma, beta),
                      lambda g: (g * gamma.data * inv, (g * xhat).sum(axis=lead), g.sum(axis=lead)))
    w = np.ones(x.shape[:-1], dtype=x.dtype) if mask is None else np.asarray(mask, dtype=x.dtype)
    w = w[..., None]
    n = w.sum()
    if n == 0:
        raise ValueError("batch_norm: no positions contribute to the statistics")
    mu = (x.data * w).sum(axis=lead) / n
    xc = x.data - mu
    var = (xc * xc * w).sum(axis=lead) / n
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    m = stats.momentum
    stats.mean = ((1 - m) * stats.mean + m * mu).astype(stats.mean.dtype)
    stats.var = ((1 - m) * stats.var + m * var).astype(stats.var.dtype)
    stats.batches += 1

    def backward(g):
        gg = g * gamma.data
        d_mu = -(gg * inv).sum(axis=lead)
        d_var = -0.5 * (gg * xc).sum(axis=lead) * inv ** 3
        gx = gg * inv + w * (d_mu / n + d_var * 2.0 * xc / n)
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return record(out, (x, gamma, beta), backward)


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    """Cosine similarity along the last axis; output drops that axis."""
    _same_shape(a, b, "cosine_similarity")
    na = np.maximum(np.sqrt((a.data * a.data).sum(axis=-1)), eps)
    nb = np.maximum(np.sqrt((b.data * b.data).sum(axis=-1)), eps)
    dot = (a.data * b.data).sum(axis=-1)
    out = dot / (na * nb)

    def backward(g):
        g = g[..., None]
        ga = g * (b.data / (na * nb)[..., None] - (out / (na * na))[..., None] * a.data)
        gb = g * (a.data / (na * nb)[..., None] - (out / (nb * nb))[..., None] * b.data)
        return ga, gb

    return record(out, (a, b), backward)


# ---------------------------------------------------------------- convolution


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None,
           stride=(1, 1), padding=(0, 0)) -> Tensor:
    """2-d cross-correlation of (B, C_in, H, W) with (C_out, C_in, kh, kw)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: shape mismatch {x.shape} vs {w.shape}")
    sh, sw = stride
    ph, pw = padding
    _, _, kh, kw = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    ho, wo = cols.shape[2], cols.shape[3]
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {w.shape}")
    out = np.tensordot(cols, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        if bias.shape != (w.shape[0],):
            raise ShapeError(f"conv2d: bias shape {bias.shape} vs {w.shape[0]} channels")
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        gcols = np.tensordot(g, w.data, axes=([1], [0]))  # B, ho, wo, C_in, kh, kw
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += gcols[..., i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, ph:ph + x.shape[2], pw:pw + x.shape[3]]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, w) if bias is None else (x, w, bias)
    return record(out, parents, backward)


def depthwise_conv1d(x: Tensor, w: Tensor) -> Tensor:
    """Per-channel 'same' convolution over time of (B, T, C) with an odd (k, C) kernel."""
    k, c = w.shape
    if x.ndim != 3 or x.shape[2] != c or k % 2 == 0:
        raise ShapeError(f"depthwise_conv1d: shape mismatch {x.shape} vs {w.shape}")
    t = x.shape[1]
    half = k // 2
    xp = np.pad(x.data, ((0, 0), (half, half), (0, 0)))
    out = builtins.sum(xp[:, i:i + t] * w.data[i] for i in range(k))

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w.data)
        for i in range(k):
            gxp[:, i:i + t] += g * w.data[i]
            gw[i] = (g * xp[:, i:i + t]).sum(axis=(0, 1))
        return gxp[:, half:half + t], gw

    return record(out, (x, w), backward)
