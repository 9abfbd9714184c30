"""Neural-net ops on top of the tensor engine.

Feature maps are B x C x H x W throughout; token matrices put channels
last. Interpolation and pooling are expressed as fixed row/column
mixing matrices, which keeps both directions of each op a pair of
matmuls and makes the same-size case an exact identity.
"""

from __future__ import annotations

import functools

import numpy as np

from .errors import ShapeError
from .tensor import Array, Tensor

__all__ = [
    "linear", "conv1x1", "depthwise_conv3x3", "softmax", "log_softmax",
    "layer_norm", "bilinear_resize", "adaptive_avg_pool",
]


def linear(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the trailing axis: y[..., o] = sum_c x[..., c] w[o, c] + b[o]."""
    if w.ndim != 2:
        raise ShapeError(f"linear weight must be 2-d (out, in), got {w.shape}")
    if x.ndim < 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    out_dim, in_dim = w.shape
    if bias is not None and bias.shape != (out_dim,):
        raise ShapeError(f"linear bias must have shape ({out_dim},), got {bias.shape}")
    xd, wd = x.data, w.data
    y = xd @ wd.T
    if bias is not None:
        y = y + bias.data

    def bwd(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.reshape(-1, out_dim).T @ xd.reshape(-1, in_dim) if w.requires_grad else None
        gb = None
        if bias is not None and bias.requires_grad:
            gb = g.reshape(-1, out_dim).sum(axis=0)
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, w) if bias is None else (x, w, bias)
    return Tensor._result(y, inputs, "linear", bwd)


def conv1x1(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Pointwise convolution: a per-position channel mix of a B x C x H x W map."""
    if x.ndim != 4:
        raise ShapeError(f"conv1x1 expects a 4-d map, got {x.shape}")
    if w.ndim != 2 or w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv1x1: weight {w.shape} does not match input {x.shape}")
    b_, c_in, h_, w_ = x.shape
    c_out = w.shape[0]
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv1x1 bias must have shape ({c_out},), got {bias.shape}")
    xd = x.data.reshape(b_, c_in, h_ * w_)
    y = np.matmul(w.data, xd).reshape(b_, c_out, h_, w_)
    if bias is not None:
        y = y + bias.data[None, :, None, None]

    def bwd(g):
        g3 = g.reshape(b_, c_out, h_ * w_)
        gx = np.matmul(w.data.T, g3).reshape(x.shape) if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = np.matmul(g3, xd.transpose(0, 2, 1)).sum(axis=0)
        gb = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, w) if bias is None else (x, w, bias)
    return Tensor._result(y, inputs, "conv1x1", bwd)


def depthwise_conv3x3(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-channel 3x3 convolution, stride 1, zero padding 1."""
    if x.ndim != 4:
        raise ShapeError(f"depthwise_conv3x3 expects a 4-d map, got {x.shape}")
    b_, c_, h_, w_ = x.shape
    if w.shape != (c_, 3, 3):
        raise ShapeError(f"depthwise weight must have shape ({c_}, 3, 3), got {w.shape}")
    if bias is not None and bias.shape != (c_,):
        raise ShapeError(f"depthwise bias must have shape ({c_},), got {bias.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    wd = w.data
    y = np.zeros_like(x.data)
    for di in range(3):
        for dj in range(3):
            y += wd[None, :, di, dj, None, None] * xp[:, :, di:di + h_, dj:dj + w_]
    if bias is not None:
        y = y + bias.data[None, :, None, None]

    def bwd(g):
        gx = None
        if x.requires_grad:
            gp = np.zeros_like(xp)
            for di in range(3):
                for dj in range(3):
                    gp[:, :, di:di + h_, dj:dj + w_] += wd[None, :, di, dj, None, None] * g
            gx = gp[:, :, 1:1 + h_, 1:1 + w_]
        gw = None
        if w.requires_grad:
            gw = np.empty_like(wd)
            for di in range(3):
                for dj in range(3):
                    gw[:, di, dj] = (g * xp[:, :, di:di + h_, dj:dj + w_]).sum(axis=(0, 2, 3))
        gb = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, w) if bias is None else (x, w, bias)
    return Tensor._result(y, inputs, "depthwise_conv3x3", bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along one axis."""
    axis = axis % x.ndim
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._result(y, (x,), "softmax", bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    """log(softmax(x)) computed without forming tiny probabilities."""
    axis = axis % x.ndim
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bwd(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return Tensor._result(y, (x,), "log_softmax", bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6,
               axis: int = -1) -> Tensor:
    """Normalize over one (channel) axis per remaining position, then affine."""
    axis = axis % x.ndim
    c = x.shape[axis]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm affine params must have shape ({c},), "
                         f"got {gamma.shape} and {beta.shape}")
    bshape = [1] * x.ndim
    bshape[axis] = c
    gd = gamma.data.reshape(bshape)
    bd = beta.data.reshape(bshape)
    mean = x.data.mean(axis=axis, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    y = xhat * gd + bd
    other_axes = tuple(a for a in range(x.ndim) if a != axis)

    def bwd(g):
        gx = None
        if x.requires_grad:
            gxh = g * gd
            gx = inv * (gxh - gxh.mean(axis=axis, keepdims=True)
                        - xhat * (gxh * xhat).mean(axis=axis, keepdims=True))
        gg = (g * xhat).sum(axis=other_axes) if gamma.requires_grad else None
        gb = g.sum(axis=other_axes) if beta.requires_grad else None
        return gx, gg, gb

    return Tensor._result(y, (x, gamma, beta), "layer_norm", bwd)


@functools.lru_cache(maxsize=256)
def _resize_matrix(in_len: int, out_len: int) -> Array:
    """Row-mixing matrix for 1-d bilinear resampling, half-pixel centers."""
    m = np.zeros((out_len, in_len))
    if out_len == in_len:
        np.fill_diagonal(m, 1.0)
        return m
    src = (np.arange(out_len) + 0.5) * (in_len / out_len) - 0.5
    src = np.clip(src, 0.0, in_len - 1.0)
    lo = np.floor(src).astype(np.int64)
    frac = src - lo
    hi = np.minimum(lo + 1, in_len - 1)
    rows = np.arange(out_len)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


@functools.lru_cache(maxsize=256)
def _pool_matrix(in_len: int, out_len: int) -> Array:
    """Row-averaging matrix with floor/ceil window bounds per output cell."""
    m = np.zeros((out_len, in_len))
    for o in range(out_len):
        start = (o * in_len) // out_len
        end = -(-((o + 1) * in_len) // out_len)  # ceil division
        m[o, start:end] = 1.0 / (end - start)
    return m


def _separable_apply(x: Tensor, row_m: Array, col_m: Array, op: str) -> Tensor:
    xd = x.data

    def bwd(g):
        return (np.matmul(row_m.T, np.matmul(g, col_m)),)

    y = np.matmul(np.matmul(row_m, xd), col_m.T)
    return Tensor._result(y, (x,), op, bwd)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resample of a B x C x H x W map, half-pixel alignment.

    Same-size calls reproduce the input exactly; edges clamp to the
    nearest source pixel.
    """
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resize expects a 4-d map, got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize target must be positive, got ({out_h}, {out_w})")
    _, _, h, w = x.shape
    return _separable_apply(x, _resize_matrix(h, out_h), _resize_matrix(w, out_w),
                            "bilinear_resize")


def adaptive_avg_pool(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Average pooling onto an arbitrary smaller (or equal) grid.

    Window o covers input rows [floor(o*H/out), ceil((o+1)*H/out)), the
    usual adaptive partition; same-size calls are an exact identity.
    """
    if x.ndim != 4:
        raise ShapeError(f"adaptive_avg_pool expects a 4-d map, got {x.shape}")
    _, _, h, w = x.shape
    if not (1 <= out_h <= h) or not (1 <= out_w <= w):
        raise ShapeError(f"adaptive_avg_pool target ({out_h}, {out_w}) must lie in "
                         f"[1, {h}] x [1, {w}]")
    return _separable_apply(x, _pool_matrix(h, out_h), _pool_matrix(w, out_w),
                            "adaptive_avg_pool")
