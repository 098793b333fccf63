"""Differentiable primitives.

Each function takes Tensors (or array-likes, treated as constants) and
returns a Tensor whose backward closure maps the output adjoint onto the
inputs. Broadcasting follows numpy; adjoints of broadcast inputs are summed
back to the input shape.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, make_node


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise binary -----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_node(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("div", a, b)
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return make_node(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return make_node(out, (a, b), bw, "matmul")


# -- elementwise unary ------------------------------------------------------

def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # split by sign so exp never overflows
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return make_node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return make_node(out, (a,), lambda g: (g / a.data,), "log")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (a,), bw, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_node(out, (a,), bw, "log_softmax")


# -- reductions and shape ---------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_node(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.data.size // max(out.size, 1)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return make_node(out, (a,), bw, "mean")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return make_node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return make_node(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def index(a, idx) -> Tensor:
    """``a[idx]`` for basic or integer-array indexing."""
    a = as_tensor(a)
    out = a.data[idx]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return make_node(out, (a,), bw, "index")


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in ts)) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_node(out, ts, bw, "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("stack", *(t.shape for t in ts)) from None

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return make_node(out, ts, bw, "stack")


# -- lookups and sampling ---------------------------------------------------

def embedding(table, ids) -> Tensor:
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError("embedding", table.shape, ids.shape)

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return make_node(table.data[ids], (table,), bw, "embedding")


def gather_mix(x, idx: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted gather: ``out[n, i] = sum_k weights[i, k] * x[n, idx[i, k]]``.

    ``x`` is (n, P, d); ``idx`` and ``weights`` are (N, K). This is the
    sampling kernel behind bilinear grid sampling: each output row mixes K
    taps of the flattened input grid. Summation runs over k in order, so the
    result depends only on the tap lists, not on where taps sit in ``x``.
    """
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    w = np.asarray(weights, dtype=x.dtype)
    if x.ndim != 3 or idx.shape != w.shape or idx.ndim != 2:
        raise ShapeError("gather_mix", x.shape, idx.shape, w.shape)
    out = (x.data[:, idx, :] * w[None, :, :, None]).sum(axis=2)

    def bw(g):
        contrib = g[:, :, None, :] * w[None, :, :, None]  # (n, N, K, d)
        full = np.zeros((x.shape[1], x.shape[0], x.shape[2]), dtype=g.dtype)
        np.add.at(full, idx.reshape(-1), contrib.reshape(x.shape[0], -1, x.shape[2]).transpose(1, 0, 2))
        return (full.transpose(1, 0, 2),)

    return make_node(out, (x,), bw, "gather_mix")


def _pad(x: np.ndarray, pad: int, wrap_width: bool) -> np.ndarray:
    if pad == 0:
        return x
    if wrap_width:
        x = np.concatenate([x[:, :, -pad:], x, x[:, :, :pad]], axis=2)
        return np.pad(x, ((0, 0), (pad, pad), (0, 0), (0, 0)))
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0, wrap_width: bool = False) -> Tensor:
    """2-D convolution over NHWC input with an (kh, kw, C, O) kernel.

    With ``wrap_width`` the width axis is padded cyclically (longitude wrap)
    and the height axis with zeros.
    """
    x, w = as_tensor(x), as_tensor(w)
    b = None if b is None else as_tensor(b)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError("conv2d", x.shape, w.shape)
    if wrap_width and pad > x.shape[2]:
        raise ShapeError("conv2d", x.shape, w.shape)
    n, hgt, wid, cin = x.shape
    kh, kw, _, cout = w.shape
    oh = (hgt + 2 * pad - kh) // stride + 1
    ow = (wid + 2 * pad - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError("conv2d", x.shape, w.shape)
    xp = _pad(x.data, pad, wrap_width)
    cols = np.stack(
        [xp[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] for i in range(kh) for j in range(kw)],
        axis=3,
    ).reshape(n * oh * ow, kh * kw * cin)
    w2 = w.data.reshape(kh * kw * cin, cout)
    out = cols @ w2
    if b is not None:
        out = out + b.data
    out = out.reshape(n, oh, ow, cout)

    def bw(g):
        g2 = g.reshape(n * oh * ow, cout)
        gw = (cols.T @ g2).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(n, oh, ow, kh * kw, cin)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for t in range(kh * kw):
                i, j = divmod(t, kw)
                gxp[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += gcols[:, :, :, t, :]
            if pad == 0:
                gx = gxp
            elif wrap_width:
                gx = gxp[:, pad:pad + hgt, pad:pad + wid, :].copy()
                gx[:, :, wid - pad:, :] += gxp[:, pad:pad + hgt, :pad, :]
                gx[:, :, :pad, :] += gxp[:, pad:pad + hgt, pad + wid:, :]
            else:
                gx = gxp[:, pad:pad + hgt, pad:pad + wid, :]
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return make_node(out, parents, bw, "conv2d")

