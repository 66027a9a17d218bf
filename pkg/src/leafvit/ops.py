"""Differentiable primitive operations.

Every function takes and returns :class:`~leafvit.tensor.Tensor` values and
registers its adjoint with the recorder. Contractions report their
multiply-accumulate counts to the active :class:`~leafvit.tensor.OpCounter`.
"""
from __future__ import annotations

import builtins

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError, StatisticsError
from .tensor import Tensor, as_tensor, record_ops

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
GN_EPS = 1e-5
MODES = ("train", "eval")


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    record_ops(adds=out.size)

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._wrap(out, (a, b), _bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    record_ops(adds=out.size)

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._wrap(out, (a, b), _bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    record_ops(muls=out.size)

    def _bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._wrap(out, (a, b), _bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    record_ops(divs=out.size)

    def _bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return Tensor._wrap(out, (a, b), _bw)


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """``max(x, floor)``; the gradient is blocked where the floor is active."""
    mask = x.data >= floor
    out = np.where(mask, x.data, floor).astype(x.dtype, copy=False)

    def _bw(g):
        return (g * mask,)

    return Tensor._wrap(out, (x,), _bw)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    record_ops(adds=x.size)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._wrap(out, (x,), _bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def _bw(g):
        return (g.reshape(x.shape),)

    return Tensor._wrap(out, (x,), _bw)


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    out = x.data.transpose(axes)
    inverse = np.argsort(axes)

    def _bw(g):
        return (g.transpose(inverse),)

    return Tensor._wrap(out, (x,), _bw)


def index(x: Tensor, key) -> Tensor:
    out = x.data[key]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)

    def _bw(g):
        full = np.zeros_like(x.data)
        if _is_advanced(key):
            np.add.at(full, key, g)
        else:
            full[key] = g
        return (full,)

    return Tensor._wrap(out, (x,), _bw)


def _is_advanced(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return builtins.any(isinstance(k, (list, np.ndarray)) for k in keys)


def pad2d(x: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    """Zero-pad the last two axes."""
    if min(top, bottom, left, right) < 0:
        raise ConfigError("padding must be non-negative")
    widths = [(0, 0)] * (x.ndim - 2) + [(top, bottom), (left, right)]
    out = np.pad(x.data, widths)
    h, w = x.shape[-2:]

    def _bw(g):
        return (g[..., top : top + h, left : left + w].copy(),)

    return Tensor._wrap(out, (x,), _bw)


def crop2d(x: Tensor, height: int, width: int) -> Tensor:
    """Keep the top-left ``height`` x ``width`` window of the last two axes."""
    return index(x, (Ellipsis, slice(0, height), slice(0, width)))


# ---------------------------------------------------------------------------
# contractions
# ---------------------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product ``a @ b``.

    ``a`` may carry leading batch axes; ``b`` is either a plain matrix shared
    across the batch or has the same leading axes as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul batch extents differ: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)
    m, k = a.shape[-2:]
    n = b.shape[-1]
    batch = int(np.prod(a.shape[:-2], dtype=np.int64))
    record_ops(macs=batch * m * n * k)

    def _bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2:
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return Tensor._wrap(out, (a, b), _bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight (+ bias)`` with ``weight`` stored as [in, out]."""
    y = matmul(x, weight)
    return add(y, bias) if bias is not None else y


def conv_output_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation (no kernel flip) with zero padding and channel groups."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    bsz, cin, h, w = x.shape
    cout, cg, kh, kw = weight.shape
    if groups < 1 or cin % groups or cout % groups:
        raise ConfigError(f"groups={groups} must divide Cin={cin} and Cout={cout}")
    if cg != cin // groups:
        raise DimensionError(f"weight {weight.shape} expects {cg * groups} input channels, input has {cin}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"invalid stride={stride} / padding={padding}")
    ho = conv_output_extent(h, kh, stride, padding)
    wo = conv_output_extent(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d output extent {ho}x{wo} < 1 for input {x.shape}, kernel {kh}x{kw}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"bias shape {bias.shape} != ({cout},)")
    record_ops(macs=bsz * cout * ho * wo * cg * kh * kw)

    if groups == cin and cout == cin and cg == 1:
        out, bw = _conv_depthwise(x.data, weight.data, stride, padding, ho, wo)
    elif kh == 1 and kw == 1 and padding == 0 and groups == 1:
        out, bw = _conv_pointwise(x.data, weight.data, stride, ho, wo)
    else:
        out, bw = _conv_im2col(x.data, weight.data, stride, padding, groups, ho, wo)

    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1)
        record_ops(adds=out.size)

    def _bw(g):
        gx, gw = bw(g)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._wrap(out, parents, _bw)


def _strided(arr: np.ndarray, i: int, j: int, stride: int, ho: int, wo: int) -> np.ndarray:
    return arr[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]


def _pad_hw(arr: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return arr
    return np.pad(arr, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _conv_depthwise(x, w, stride, padding, ho, wo):
    bsz, c, h, wd = x.shape
    kh, kw = w.shape[2:]
    xp = _pad_hw(x, padding)
    out = np.zeros((bsz, c, ho, wo), dtype=np.result_type(x, w))
    for i in range(kh):
        for j in range(kw):
            out += _strided(xp, i, j, stride, ho, wo) * w[:, 0, i, j].reshape(1, c, 1, 1)

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w)
        for i in range(kh):
            for j in range(kw):
                gw[:, 0, i, j] = np.einsum("bchw,bchw->c", g, _strided(xp, i, j, stride, ho, wo))
                _strided(gxp, i, j, stride, ho, wo)[...] += g * w[:, 0, i, j].reshape(1, c, 1, 1)
        gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        return gx, gw

    return out, bw


def _conv_pointwise(x, w, stride, ho, wo):
    bsz, cin = x.shape[:2]
    cout = w.shape[0]
    xs = x[:, :, ::stride, ::stride] if stride > 1 else x
    xs = np.ascontiguousarray(xs).reshape(bsz, cin, ho * wo)
    wm = w.reshape(cout, cin)
    out = np.matmul(wm, xs).reshape(bsz, cout, ho, wo)

    def bw(g):
        gm = g.reshape(bsz, cout, ho * wo)
        gw = np.tensordot(gm, xs, axes=([0, 2], [0, 2])).reshape(w.shape)
        gxs = np.matmul(wm.T, gm).reshape(bsz, cin, ho, wo)
        if stride > 1:
            gx = np.zeros_like(x)
            gx[:, :, ::stride, ::stride] = gxs
        else:
            gx = gxs
        return gx, gw

    return out, bw


def _conv_im2col(x, w, stride, padding, groups, ho, wo):
    bsz, cin, h, wd = x.shape
    cout, cg, kh, kw = w.shape
    og = cout // groups
    xp = _pad_hw(x, padding)
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = np.empty((bsz, cout, ho, wo), dtype=np.result_type(x, w))
    for gi in range(groups):
        cols = windows[:, gi * cg : (gi + 1) * cg]
        wg = w[gi * og : (gi + 1) * og]
        res = np.tensordot(cols, wg, axes=([1, 4, 5], [1, 2, 3]))  # B, Ho, Wo, og
        out[:, gi * og : (gi + 1) * og] = res.transpose(0, 3, 1, 2)

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w)
        for gi in range(groups):
            cols = windows[:, gi * cg : (gi + 1) * cg]
            gg = g[:, gi * og : (gi + 1) * og]
            wg = w[gi * og : (gi + 1) * og]
            gw[gi * og : (gi + 1) * og] = np.tensordot(gg, cols, axes=([0, 2, 3], [0, 2, 3]))
            gcols = np.tensordot(gg, wg, axes=([1], [0]))  # B, Ho, Wo, cg, kh, kw
            target = gxp[:, gi * cg : (gi + 1) * cg]
            for i in range(kh):
                for j in range(kw):
                    _strided(target, i, j, stride, ho, wo)[...] += gcols[..., i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        return gx, gw

    return out, bw


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------
def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    record_ops(exps=x.size, divs=x.size)

    def _bw(g):
        return (g * s * (1.0 - s),)

    return Tensor._wrap(s, (x,), _bw)


def silu(x: Tensor) -> Tensor:
    """``t * sigmoid(t)``."""
    s = _sigmoid(x.data)
    out = x.data * s
    record_ops(exps=x.size, divs=x.size, muls=x.size)

    def _bw(g):
        return (g * (s * (1.0 + x.data * (1.0 - s))),)

    return Tensor._wrap(out, (x,), _bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def _bw(g):
        return (g * mask,)

    return Tensor._wrap(out, (x,), _bw)


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax; every slice along ``axis`` sums to one."""
    axis = _check_axis(x, axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    record_ops(exps=x.size, divs=x.size, adds=2 * x.size)

    def _bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._wrap(out, (x,), _bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    record_ops(exps=x.size, adds=3 * x.size)

    def _bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._wrap(out, (x,), _bw)


def log(x: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log of ``max(x, floor)``; the clamp blocks the gradient."""
    clipped = np.maximum(x.data, floor) if floor > 0 else x.data
    out = np.log(clipped)

    def _bw(g):
        gx = g / clipped
        return ((gx * (x.data >= floor)) if floor > 0 else gx,)

    return Tensor._wrap(out, (x,), _bw)


# ---------------------------------------------------------------------------
# normalization, pooling, dropout
# ---------------------------------------------------------------------------
def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    eps: float = BN_EPS,
    mode: str | None = None,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    """Per-channel batch normalization over (B, H, W).

    In train mode the running statistics are updated in place
    (unbiased variance, ``momentum`` weight on the new value).
    """
    if mode is None:
        raise ConfigError("batch_norm2d needs an explicit mode ('train' or 'eval')")
    _check_mode(mode)
    if x.ndim != 4:
        raise DimensionError(f"batch_norm2d expects [B,C,H,W], got {x.shape}")
    c = x.shape[1]
    for label, arr in (("gamma", gamma.data), ("beta", beta.data), ("running_mean", running_mean), ("running_var", running_var)):
        if np.shape(arr) != (c,):
            raise DimensionError(f"{label} shape {np.shape(arr)} != ({c},)")
    shape = (1, c, 1, 1)
    record_ops(adds=3 * x.size, muls=2 * x.size)

    if mode == "eval":
        rm = running_mean.astype(x.dtype, copy=False).reshape(shape)
        inv_std = (1.0 / np.sqrt(running_var.astype(x.dtype, copy=False) + eps)).reshape(shape)
        scale = gamma.data.reshape(shape) * inv_std
        out = x.data * scale + (beta.data.reshape(shape) - rm * scale)

        def _bw_eval(g):
            xhat = (x.data - rm) * inv_std
            return g * scale, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return Tensor._wrap(out, (x, gamma, beta), _bw_eval)

    n = x.shape[0] * x.shape[2] * x.shape[3]
    if n < 2:
        raise StatisticsError("train-mode batch norm needs more than one value per channel")
    mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    running_mean *= 1.0 - momentum
    running_mean += momentum * mu.reshape(c)
    running_var *= 1.0 - momentum
    running_var += momentum * var.reshape(c) * (n / (n - 1))

    def _bw_train(g):
        gxhat = g * gamma.data.reshape(shape)
        gx = inv_std * (
            gxhat
            - gxhat.mean(axis=(0, 2, 3), keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        )
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return Tensor._wrap(out, (x, gamma, beta), _bw_train)


def group_norm(
    x: Tensor,
    num_groups: int,
    gamma: Tensor,
    beta: Tensor,
    eps: float = GN_EPS,
    channels_last: bool = False,
) -> Tensor:
    """Per-sample normalization over channel groups and all remaining axes.

    Channels sit on axis 1 by default, or on the last axis with
    ``channels_last`` (token layout ``[B, ..., d]``).
    """
    if x.ndim < 2:
        raise DimensionError(f"group_norm expects a batch axis and a channel axis, got {x.shape}")
    caxis = x.ndim - 1 if channels_last else 1
    c = x.shape[caxis]
    if num_groups < 1 or c % num_groups:
        raise ConfigError(f"channels {c} not divisible by num_groups {num_groups}")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"gamma/beta must have shape ({c},)")
    xc = np.moveaxis(x.data, caxis, 1)
    moved_shape = xc.shape
    bsz = x.shape[0]
    grouped = xc.reshape(bsz, num_groups, -1)
    mu = grouped.mean(axis=2, keepdims=True)
    centered = grouped - mu
    var = (centered * centered).mean(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (centered * inv_std).reshape(moved_shape)
    affine_shape = (1, c) + (1,) * (x.ndim - 2)
    out = xhat * gamma.data.reshape(affine_shape) + beta.data.reshape(affine_shape)
    out = np.moveaxis(out, 1, caxis)
    record_ops(adds=3 * x.size, muls=2 * x.size)
    reduce_axes = (0,) + tuple(range(2, x.ndim))

    def _bw(g):
        gm = np.moveaxis(g, caxis, 1)
        ggamma = (gm * xhat).sum(axis=reduce_axes)
        gbeta = gm.sum(axis=reduce_axes)
        gxhat = (gm * gamma.data.reshape(affine_shape)).reshape(bsz, num_groups, -1)
        xh = xhat.reshape(bsz, num_groups, -1)
        gx = inv_std * (
            gxhat - gxhat.mean(axis=2, keepdims=True) - xh * (gxhat * xh).mean(axis=2, keepdims=True)
        )
        return np.moveaxis(gx.reshape(moved_shape), 1, caxis), ggamma, gbeta

    return Tensor._wrap(out, (x, gamma, beta), _bw)


def adaptive_avg_pool2d(x: Tensor) -> Tensor:
    """Global average over H and W: [B, C, H, W] -> [B, C, 1, 1]."""
    if x.ndim != 4:
        raise DimensionError(f"adaptive_avg_pool2d expects [B,C,H,W], got {x.shape}")
    return mean(x, axis=(2, 3), keepdims=True)


def max_pool2d(x: Tensor, kernel: int = 2, stride: int | None = None) -> Tensor:
    """Max pooling over non-padded windows; ties route the gradient to the first maximum."""
    stride = stride or kernel
    if x.ndim != 4:
        raise DimensionError(f"max_pool2d expects [B,C,H,W], got {x.shape}")
    bsz, c, h, w = x.shape
    ho = conv_output_extent(h, kernel, stride, 0)
    wo = conv_output_extent(w, kernel, stride, 0)
    if ho < 1 or wo < 1:
        raise DimensionError(f"max_pool2d output extent {ho}x{wo} < 1 for input {x.shape}")
    windows = sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = windows.reshape(bsz, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def _bw(g):
        gx = np.zeros_like(x.data)
        di, dj = np.divmod(arg, kernel)
        bi, ci, hi, wi = np.indices(arg.shape, sparse=False)
        np.add.at(gx, (bi, ci, hi * stride + di, wi * stride + dj), g)
        return (gx,)

    return Tensor._wrap(out, (x,), _bw)


def dropout(x: Tensor, p: float, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors scale by ``1/(1-p)``; identity in eval mode."""
    _check_mode(mode)
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if mode == "eval" or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("train-mode dropout needs an explicit generator")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    out = x.data * keep

    def _bw(g):
        return (g * keep,)

    return Tensor._wrap(out, (x,), _bw)
