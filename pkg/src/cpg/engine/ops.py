"""Differentiable ops on :class:`Tensor`.

Elementwise binary ops accept numpy broadcasting; backward sums gradients
back down to each operand's shape. Everything else takes explicit shapes.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .tensor import DomainError, ShapeError, Tensor, as_tensor, make_op


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


def _bshape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return make_op(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return make_op(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("mul", a, b)

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)
    return make_op(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("div", a, b)
    if np.any(b.data == 0):
        raise DomainError("div: zero in denominator")
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None)
    return make_op(out, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_op(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(~(a.data > 0)):
        raise DomainError("log: non-positive or NaN input")
    return make_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(~(a.data > 0)):
        raise DomainError("sqrt: non-positive or NaN input")
    out = np.sqrt(a.data)
    return make_op(out, (a,), lambda g: (g * 0.5 / out,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** p
    return make_op(out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    return make_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("maximum", a, b)
    pick = a.data >= b.data

    def bw(g):
        return _unbroadcast(g * pick, a.shape), _unbroadcast(g * ~pick, b.shape)
    return make_op(np.where(pick, a.data, b.data), (a, b), bw)


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("minimum", a, b)
    pick = a.data <= b.data

    def bw(g):
        return _unbroadcast(g * pick, a.shape), _unbroadcast(g * ~pick, b.shape)
    return make_op(np.where(pick, a.data, b.data), (a, b), bw)


def clamp(a, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    live = np.ones(a.shape, dtype=bool)
    if lo is not None:
        live &= a.data >= lo
    if hi is not None:
        live &= a.data <= hi
    return make_op(out, (a,), lambda g: (g * live,))


def relu(a) -> Tensor:
    return clamp(a, lo=0.0)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return make_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_op(out, (a,), lambda g: (g * (1.0 - out * out),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """Tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)
    return make_op(out, (a,), bw)


# ---------------------------------------------------------------- linear algebra
def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy semantics (both operands >= 2-D)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb
    return make_op(out, (a, b), bw)


# ---------------------------------------------------------------- shape ops
def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return make_op(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose axes={axes}", a.shape)
    inv = np.argsort(axes)
    return make_op(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: (g.transpose(inv),))


def swapaxes(a, i: int, j: int) -> Tensor:
    axes = list(range(as_tensor(a).ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def getitem(a, idx) -> Tensor:
    """Basic slicing and integer-array indexing."""
    a = as_tensor(a)
    out = a.data[idx]
    if np.isscalar(out) or out.ndim == 0:
        out = np.asarray(out, dtype=np.float64)

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (slice, int, type(None), type(Ellipsis))) for p in parts)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)
    return make_op(np.array(out, dtype=np.float64), (a,), bw)


slice_ = getitem


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat(axis={axis})", ts[0].shape, t.shape)
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(ts)))
    return make_op(out, ts, bw)


def masked_fill(a, mask, value: float) -> Tensor:
    """Replace entries where boolean ``mask`` (broadcastable) is True."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    try:
        m = np.broadcast_to(mask, a.shape)
    except ValueError:
        raise ShapeError("masked_fill", a.shape, mask.shape) from None
    out = np.where(m, value, a.data)
    return make_op(out, (a,), lambda g: (np.where(m, 0.0, g),))


# ---------------------------------------------------------------- reductions
def _norm_axis(axis, nd):
    if axis is None:
        return tuple(range(nd))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(x % nd for x in axis)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=ax, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape).copy(),)
    return make_op(np.asarray(out), (a,), bw)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in ax])) if ax else 1
    return reduce_sum(a, axis, keepdims) * (1.0 / n)


def reduce_max(a, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; ties split the gradient evenly."""
    a = as_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    m = a.data.max(axis=ax, keepdims=True)
    hit = (a.data == m)
    count = hit.sum(axis=ax, keepdims=True)
    out = m if keepdims else np.squeeze(m, axis=ax)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (g * hit / count,)
    return make_op(np.asarray(out), (a,), bw)


# ---------------------------------------------------------------- nn-flavoured
def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return make_op(out, (a,), bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)
    return make_op(out, (a,), bw)


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm", a.shape, gamma.shape, beta.shape)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = gb = gg = None
        if a.requires_grad:
            gh = g * gamma.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gb
    return make_op(out, (a, gamma, beta), bw)


def embedding_lookup(table, ids) -> Tensor:
    """Gather rows of a (V, d) table by an integer id array of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if table.ndim != 2 or not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding_lookup", table.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DomainError("embedding_lookup: id out of range")
    out = table.data[ids]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)
    return make_op(out, (table,), bw)


def _im2col_index(h, w, k, s, p):
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1
    rows = (np.arange(ho) * s)[:, None] + np.arange(k)[None, :]  # ho,k
    cols = (np.arange(wo) * s)[:, None] + np.arange(k)[None, :]  # wo,k
    return ho, wo, rows, cols


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Channels-last convolution.

    x: (B, H, W, Cin); weight: (k, k, Cin, Cout); bias: (Cout,).
    Output: (B, Ho, Wo, Cout).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[2] != x.shape[3] or weight.shape[0] != weight.shape[1]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    B, H, W, C = x.shape
    k, _, _, co = weight.shape
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    ho, wo, rows, cols = _im2col_index(H, W, k, stride, padding)
    # (B, ho, k, wo, k, C) -> (B, ho, wo, k, k, C)
    patches = xp[:, rows[:, :, None, None], cols[None, None, :, :], :]
    patches = patches.transpose(0, 1, 3, 2, 4, 5).reshape(B, ho, wo, k * k * C)
    wmat = weight.data.reshape(k * k * C, co)
    out = patches @ wmat
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (co,):
            raise ShapeError("conv2d bias", bias.shape, (co,))
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (patches.reshape(-1, k * k * C).T @ g.reshape(-1, co)).reshape(weight.shape)
        if x.requires_grad:
            gp = (g @ wmat.T).reshape(B, ho, wo, k, k, C)
            gxp = np.zeros_like(xp)
            hi, wi = stride * (ho - 1) + 1, stride * (wo - 1) + 1
            for di in range(k):
                for dj in range(k):
                    gxp[:, di:di + hi:stride, dj:dj + wi:stride, :] += gp[:, :, :, di, dj, :]
            gx = gxp[:, padding:padding + H, padding:padding + W, :] if padding else gxp
        if bias is not None and bias.requires_grad:
            gb = g.reshape(-1, co).sum(axis=0)
        return (gx, gw, gb) if bias is not None else (gx, gw)
    return make_op(out, parents, bw)


def l2_normalize(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    a = as_tensor(a)
    n = sqrt(reduce_sum(a * a, axis=axis, keepdims=True) + eps)
    return a / n


def check_finite(a: Tensor, where: str = "") -> Tensor:
    """Raise :class:`DomainError` if ``a`` holds NaN or Inf."""
    if not np.all(np.isfinite(a.data)):
        raise DomainError(f"non-finite values at {where or 'checked boundary'}")
    return a
