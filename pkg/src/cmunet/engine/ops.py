"""Forward ops with exact backward rules.

All image tensors are N x C x H x W. Convolution is cross-correlation with
zero padding. Ops never write into their inputs.
"""

from __future__ import annotations

import math
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from cmunet.engine.tensor import Tensor, as_tensor, record
from cmunet.errors import ConfigError, DimensionError, StateError

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _require_4d(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{what} must be N x C x H x W, got shape {x.shape}", axis="rank")


def conv_output_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


# --------------------------------------------------------------------------
# convolution


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    """View of shape (N, C, Ho, Wo, kh, kw) over the padded input."""
    eh = dilation * (kh - 1) + 1
    ew = dilation * (kw - 1) + 1
    win = sliding_window_view(xp, (eh, ew), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, ::dilation, ::dilation]
    return win[:, :, :ho, :wo]


def _tap_slice(i: int, j: int, stride: int, dilation: int, ho: int, wo: int) -> tuple[slice, ...]:
    r0, c0 = i * dilation, j * dilation
    return (
        slice(None),
        slice(None),
        slice(r0, r0 + stride * (ho - 1) + 1, stride),
        slice(c0, c0 + stride * (wo - 1) + 1, stride),
    )


def _conv_dense_fwd(xp, w, stride, dilation, ho, wo):
    n, c = xp.shape[:2]
    co, _, kh, kw = w.shape
    cols = _windows(xp, kh, kw, stride, dilation, ho, wo)
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    out = cols @ w.reshape(co, -1).T
    out = out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


def _conv_dense_bwd(g, xp_shape, w, cols, stride, dilation, ho, wo, need_x, need_w):
    n, c = xp_shape[:2]
    co, _, kh, kw = w.shape
    gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, co)
    gw = (gm.T @ cols).reshape(w.shape) if need_w else None
    gxp = None
    if need_x:
        gcols = (gm @ w.reshape(co, -1)).reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros(xp_shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[_tap_slice(i, j, stride, dilation, ho, wo)] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return gxp, gw


def _conv_depthwise_fwd(xp, w, stride, dilation, ho, wo):
    n, c = xp.shape[:2]
    _, _, kh, kw = w.shape
    out = np.zeros((n, c, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xp[_tap_slice(i, j, stride, dilation, ho, wo)] * w[:, 0, i, j][None, :, None, None]
    return out


def _conv_depthwise_bwd(g, xp, w, stride, dilation, ho, wo, need_x, need_w):
    _, _, kh, kw = w.shape
    gxp = np.zeros_like(xp) if need_x else None
    gw = np.zeros_like(w) if need_w else None
    for i in range(kh):
        for j in range(kw):
            sl = _tap_slice(i, j, stride, dilation, ho, wo)
            if need_w:
                gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, xp[sl])
            if need_x:
                gxp[sl] += g * w[:, 0, i, j][None, :, None, None]
    return gxp, gw


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
    groups: int = 1,
    tag: str | None = None,
) -> Tensor:
    """2-D cross-correlation with zero padding and channel groups."""
    _require_4d(x, "conv2d input")
    if weight.ndim != 4:
        raise DimensionError(f"conv2d weight must be Cout x Cin/groups x kh x kw, got {weight.shape}", axis="rank")
    if stride < 1 or dilation < 1 or padding < 0 or groups < 1:
        raise ConfigError(f"invalid conv2d geometry stride={stride} padding={padding} dilation={dilation} groups={groups}")
    n, cin, h, w_in = x.shape
    cout, cig, kh, kw = weight.shape
    if cin % groups or cout % groups:
        raise ConfigError(f"channels Cin={cin}, Cout={cout} not divisible by groups={groups}")
    if cig != cin // groups:
        raise DimensionError(f"weight expects {cig * groups} input channels, input has {cin}", axis="C")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"bias shape {bias.shape} != ({cout},)", axis="C")
    for axis, size, k in (("H", h, kh), ("W", w_in, kw)):
        if dilation * (k - 1) + 1 > size + 2 * padding:
            raise DimensionError(f"effective kernel extent exceeds padded input size {size + 2 * padding}", axis=axis)
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(w_in, kw, stride, padding, dilation)

    xd = x.data
    wd = weight.data.astype(xd.dtype, copy=False)
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    depthwise = groups == cin and cig == 1 and cout == cin and groups > 1

    if groups == 1:
        out, cols = _conv_dense_fwd(xp, wd, stride, dilation, ho, wo)
        saved = [cols]
    elif depthwise:
        out = _conv_depthwise_fwd(xp, wd, stride, dilation, ho, wo)
        saved = []
    else:
        cog = cout // groups
        parts, saved = [], []
        for gi in range(groups):
            o, cols = _conv_dense_fwd(xp[:, gi * cig:(gi + 1) * cig], wd[gi * cog:(gi + 1) * cog], stride, dilation, ho, wo)
            parts.append(o)
            saved.append(cols)
        out = np.concatenate(parts, axis=1)
    if bias is not None:
        out = out + bias.data.astype(out.dtype, copy=False)[None, :, None, None]

    def backward_fn(g):
        need_x, need_w = x.requires_grad, weight.requires_grad
        if groups == 1:
            gxp, gw = _conv_dense_bwd(g, xp.shape, wd, saved[0], stride, dilation, ho, wo, need_x, need_w)
        elif depthwise:
            gxp, gw = _conv_depthwise_bwd(g, xp, wd, stride, dilation, ho, wo, need_x, need_w)
        else:
            cog = cout // groups
            gxp = np.zeros(xp.shape, dtype=g.dtype) if need_x else None
            gw = np.zeros_like(wd) if need_w else None
            for gi in range(groups):
                gxi, gwi = _conv_dense_bwd(
                    np.ascontiguousarray(g[:, gi * cog:(gi + 1) * cog]),
                    (n, cig) + xp.shape[2:], wd[gi * cog:(gi + 1) * cog], saved[gi],
                    stride, dilation, ho, wo, need_x, need_w,
                )
                if need_x:
                    gxp[:, gi * cig:(gi + 1) * cig] = gxi
                if need_w:
                    gw[gi * cog:(gi + 1) * cog] = gwi
        gx = None
        if gxp is not None:
            gx = gxp[:, :, padding:padding + h, padding:padding + w_in] if padding else gxp
            gx = np.ascontiguousarray(gx)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    inputs = [x, weight] + ([bias] if bias is not None else [])
    return record(
        "conv2d", inputs, out, backward_fn,
        kernel=(kh, kw), stride=stride, padding=padding, dilation=dilation, groups=groups, tag=tag,
    )


# --------------------------------------------------------------------------
# batch norm


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor | None,
    running_var: Tensor | None,
    training: bool,
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
    tag: str | None = None,
) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics (biased variance) normalize the
    input and the running buffers are replaced by their exponential moving
    averages; the running variance is updated with the unbiased estimate.
    In eval mode the running buffers are used and left untouched.
    """
    _require_4d(x, "batchnorm2d input")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"gamma/beta must have shape ({c},), got {gamma.shape}/{beta.shape}", axis="C")
    xd = x.data
    gd = gamma.data.astype(xd.dtype, copy=False)
    bd = beta.data.astype(xd.dtype, copy=False)
    shp = (1, c, 1, 1)

    if training:
        m = n * h * w
        if m < 1:
            raise DimensionError("batch norm needs at least one value per channel", axis="N")
        mean = xd.mean(axis=(0, 2, 3))
        centered = xd - mean.reshape(shp)
        var = (centered * centered).mean(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv.reshape(shp)
        if running_mean is not None and running_var is not None:
            unbiased = var * (m / (m - 1)) if m > 1 else var
            rm_dtype, rv_dtype = running_mean.dtype, running_var.dtype
            running_mean.data = ((1 - momentum) * running_mean.data + momentum * mean).astype(rm_dtype)
            running_var.data = ((1 - momentum) * running_var.data + momentum * unbiased).astype(rv_dtype)
    else:
        if running_mean is None or running_var is None:
            raise StateError("batch norm in eval mode requires initialized running statistics")
        inv = 1.0 / np.sqrt(running_var.data.astype(xd.dtype) + eps)
        xhat = (xd - running_mean.data.astype(xd.dtype).reshape(shp)) * inv.reshape(shp)
    out = xhat * gd.reshape(shp) + bd.reshape(shp)

    def backward_fn(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gd.reshape(shp)
        if training:
            m = n * h * w
            s1 = dxhat.sum(axis=(0, 2, 3)).reshape(shp)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(shp)
            gx = (inv.reshape(shp) / m) * (m * dxhat - s1 - xhat * s2)
        else:
            gx = dxhat * inv.reshape(shp)
        return gx, ggamma, gbeta

    return record("batchnorm2d", [x, gamma, beta], out, backward_fn, training=training, tag=tag)


# --------------------------------------------------------------------------
# activations


def relu(x: Tensor, tag: str | None = None) -> Tensor:
    mask = x.data > 0
    return record("relu", [x], np.where(mask, x.data, 0).astype(x.dtype), lambda g: (g * mask,), tag=tag)


def gelu(x: Tensor, tag: str | None = None) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))
    out = (xd * cdf).astype(x.dtype)

    def backward_fn(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return record("gelu", [x], out, backward_fn, tag=tag)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor, tag: str | None = None) -> Tensor:
    s = _sigmoid(x.data)
    return record("sigmoid", [x], s, lambda g: (g * s * (1.0 - s),), tag=tag)


_ACTIVATIONS = {"relu": relu, "gelu": gelu, "sigmoid": sigmoid}


def activation(x: Tensor, kind: str, tag: str | None = None) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(x, tag=tag)


# --------------------------------------------------------------------------
# resampling


def maxpool2x2(x: Tensor, tag: str | None = None) -> Tensor:
    """Non-overlapping 2x2 max pool; ties go to the first element in
    row-major window order."""
    _require_4d(x, "maxpool2x2 input")
    n, c, h, w = x.shape
    if h % 2:
        raise DimensionError(f"maxpool2x2 needs even height, got {h}", axis="H")
    if w % 2:
        raise DimensionError(f"maxpool2x2 needs even width, got {w}", axis="W")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        onehot = idx[..., None] == np.arange(4)
        gwin = onehot * g[..., None]
        gx = gwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx.astype(g.dtype),)

    return record("maxpool2x2", [x], np.ascontiguousarray(out), backward_fn, tag=tag)


def upsample_matrix(size: int, dtype: Any = np.float64) -> np.ndarray:
    """(2*size x size) linear map doing half-pixel bilinear 2x along one axis."""
    a = np.zeros((2 * size, size), dtype=np.float64)
    for i in range(2 * size):
        src = min(max((i + 0.5) / 2.0 - 0.5, 0.0), size - 1.0)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, size - 1)
        frac = src - i0
        a[i, i0] += 1.0 - frac
        a[i, i1] += frac
    return a.astype(dtype)


def bilinear_upsample2x(x: Tensor, tag: str | None = None) -> Tensor:
    _require_4d(x, "bilinear_upsample2x input")
    _, _, h, w = x.shape
    if h < 1 or w < 1:
        raise DimensionError("upsampling needs non-empty spatial axes", axis="H")
    ah = upsample_matrix(h, x.dtype)
    aw = upsample_matrix(w, x.dtype)
    out = (ah @ x.data) @ aw.T

    def backward_fn(g):
        return ((ah.T @ g) @ aw,)

    return record("bilinear_upsample2x", [x], out, backward_fn, tag=tag)


# --------------------------------------------------------------------------
# structural / elementwise


def concat_channels(a: Tensor, b: Tensor, tag: str | None = None) -> Tensor:
    _require_4d(a, "concat input a")
    _require_4d(b, "concat input b")
    for axis, i in (("N", 0), ("H", 2), ("W", 3)):
        if a.shape[i] != b.shape[i]:
            raise DimensionError(f"concat inputs disagree: {a.shape} vs {b.shape}", axis=axis)
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data.astype(a.dtype, copy=False)], axis=1)
    return record(
        "concat_channels", [a, b], out,
        lambda g: (np.ascontiguousarray(g[:, :ca]), np.ascontiguousarray(g[:, ca:])),
        tag=tag,
    )


def _binary_operands(a: Any, b: Any) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = as_tensor(b, like=a)
    if b.ndim and a.ndim and a.shape != b.shape:
        raise DimensionError(f"elementwise shapes differ: {a.shape} vs {b.shape}", axis="shape")
    return a, b


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    return np.asarray(g.sum()).reshape(shape) if g.shape != shape else g


def add(a: Any, b: Any, tag: str | None = None) -> Tensor:
    a, b = _binary_operands(a, b)
    out = a.data + b.data.astype(a.dtype, copy=False)
    return record("add", [a, b], out, lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)), tag=tag)


def mul(a: Any, b: Any, tag: str | None = None) -> Tensor:
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data.astype(a.dtype, copy=False)
    return record(
        "mul", [a, b], ad * bd,
        lambda g: (_reduce_to(g * bd, a.shape), _reduce_to(g * ad, b.shape)),
        tag=tag,
    )


def elementwise(a: Any, b: Any, kind: str, tag: str | None = None) -> Tensor:
    if kind == "add":
        return add(a, b, tag=tag)
    if kind == "mul":
        return mul(a, b, tag=tag)
    raise ConfigError(f"unknown elementwise kind {kind!r}")


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a 0-d tensor."""
    shape = x.shape
    return record("sum", [x], np.asarray(x.data.sum(), dtype=x.dtype), lambda g: (np.broadcast_to(g, shape).copy(),))
