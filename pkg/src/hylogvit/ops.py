"""Differentiable operators on feature maps and token sequences.

Feature maps are channel-last: ``H x W x C``, optionally with a leading batch
axis (``N x H x W x C``). Convolution kernels use the layout
``kh x kw x C_in x C_out``.
"""

from __future__ import annotations

import math
from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .tensor import ShapeError, Tensor, as_tensor, make_op, unbroadcast

LAYERNORM_EPS = 1e-5


def _batched(x: Tensor) -> Tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeError(f"expected an H x W x C or N x H x W x C feature map, got shape {x.shape}")


def _unbatch(arr: np.ndarray, squeeze: bool) -> np.ndarray:
    return arr[0] if squeeze else arr


def _rebatch(g: np.ndarray, squeeze: bool) -> np.ndarray:
    return g[None] if squeeze else g


# -- activations --------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return make_op(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)
    out = (xd * cdf).astype(x.dtype)
    return make_op(out, (x,), lambda g: ((g * (cdf + xd * pdf)).astype(x.dtype),), "gelu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    z = np.exp(xd - xd.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_op(out, (x,), backward, "softmax")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, axis: int = -1, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize over ``axis`` then apply the affine ``gamma``/``beta``.

    ``gamma`` and ``beta`` must broadcast against ``x`` (typically shape ``(C,)``
    for the trailing axis).
    """
    if x.shape[axis] < 1:
        raise ShapeError("layernorm axis must be non-empty")
    xd, gd, bd = x.data, gamma.data, beta.data
    mu = xd.mean(axis=axis, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gd + bd

    def backward(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=axis, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=axis, keepdims=True))
        return gx, unbroadcast(g * xhat, gd.shape), unbroadcast(g, bd.shape)

    return make_op(out, (x, gamma, beta), backward, "layernorm")


def l2norm(x: Tensor, axis=None) -> Tensor:
    """Euclidean norm over ``axis``; the gradient at a zero vector is taken as zero."""
    xd = x.data
    nrm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))

    def backward(g):
        gk = g if axis is None else np.expand_dims(g, axis)
        safe = np.where(nrm > 0, nrm, 1.0)
        return (np.where(nrm > 0, xd / safe, 0.0) * gk,)

    out = nrm.reshape(()) if axis is None else np.squeeze(nrm, axis=axis)
    return make_op(np.asarray(out), (x,), backward, "l2norm")


# -- convolution ----------------------------------------------------------------

def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """View of ``xp`` (N,Hp,Wp,C) as (N,ho,wo,kh,kw,C) patches."""
    v = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    v = v[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return v.transpose(0, 1, 2, 4, 5, 3)


def _scatter_patches(cols: np.ndarray, hp: int, wp: int, stride: int) -> np.ndarray:
    """Adjoint of :func:`_windows`: sum (N,ho,wo,kh,kw,C) patches into (N,hp,wp,C)."""
    n, ho, wo, kh, kw, c = cols.shape
    out = np.zeros((n, hp, wp, c), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += cols[:, :, :, i, j]
    return out


def _pad(xd: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return xd
    return np.pad(xd, ((0, 0), (pad, pad), (pad, pad), (0, 0)))


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation.

    Output extent per axis is ``floor((H + 2*pad - k) / stride) + 1``.
    """
    xd, squeeze = _batched(x)
    wd = w.data
    if wd.ndim != 4:
        raise ShapeError(f"conv2d kernel must be kh x kw x Cin x Cout, got {w.shape}")
    kh, kw, cin, cout = wd.shape
    n, h, wdt, c = xd.shape
    if c != cin:
        raise ShapeError(f"conv2d: input has {c} channels, kernel {w.shape} expects {cin}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: invalid stride {stride} / pad {pad}")
    if h + 2 * pad < kh or wdt + 2 * pad < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{wdt + 2 * pad}")
    ho, wo = _conv_out(h, kh, stride, pad), _conv_out(wdt, kw, stride, pad)
    xp = _pad(xd, pad)
    cols = _windows(xp, kh, kw, stride, ho, wo).reshape(n * ho * wo, kh * kw * cin)
    wmat = wd.reshape(kh * kw * cin, cout)
    out = (cols @ wmat).reshape(n, ho, wo, cout)
    parents = [x, w]
    if b is not None:
        if b.shape != (cout,):
            raise ShapeError(f"conv2d bias must have shape ({cout},), got {b.shape}")
        out = out + b.data
        parents.append(b)
    hp, wp = xp.shape[1], xp.shape[2]

    def backward(g):
        g = _rebatch(g, squeeze)
        g2 = g.reshape(n * ho * wo, cout)
        gw = (cols.T @ g2).reshape(wd.shape)
        gcols = (g2 @ wmat.T).reshape(n, ho, wo, kh, kw, cin)
        gxp = _scatter_patches(gcols, hp, wp, stride)
        gx = gxp[:, pad : pad + h, pad : pad + wdt] if pad else gxp
        grads = [_unbatch(gx, squeeze), gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 1, 2)))
        return grads

    return make_op(_unbatch(out, squeeze), parents, backward, "conv2d")


def conv_transpose2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed convolution, the adjoint of :func:`conv2d` in its input.

    ``w`` is the kernel of the forward convolution being transposed, laid out
    ``kh x kw x C_out x C_in``: it maps ``C_in`` channels of ``x`` to
    ``C_out`` output channels. Output extent is ``(H - 1)*stride - 2*pad + k``.
    """
    xd, squeeze = _batched(x)
    wd = w.data
    if wd.ndim != 4:
        raise ShapeError(f"conv_transpose2d kernel must be kh x kw x Cout x Cin, got {w.shape}")
    kh, kw, cout, cin = wd.shape
    n, h, wdt, c = xd.shape
    if c != cin:
        raise ShapeError(f"conv_transpose2d: input has {c} channels, kernel {w.shape} expects {cin}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv_transpose2d: invalid stride {stride} / pad {pad}")
    hp, wp = (h - 1) * stride + kh, (wdt - 1) * stride + kw
    ho, wo = hp - 2 * pad, wp - 2 * pad
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d: padding {pad} leaves an empty {ho}x{wo} output")
    cols = np.einsum("nhwo,ijco->nhwijc", xd, wd, optimize=True)
    full = _scatter_patches(cols, hp, wp, stride)
    out = full[:, pad : pad + ho, pad : pad + wo]
    parents = [x, w]
    if b is not None:
        if b.shape != (cout,):
            raise ShapeError(f"conv_transpose2d bias must have shape ({cout},), got {b.shape}")
        out = out + b.data
        parents.append(b)
    out = np.ascontiguousarray(out)

    def backward(g):
        g = _rebatch(g, squeeze)
        gfull = _pad(g, pad)
        gcols = _windows(gfull, kh, kw, stride, h, wdt).reshape(n * h * wdt, kh * kw * cout)
        gx = (gcols @ wd.reshape(kh * kw * cout, cin)).reshape(n, h, wdt, cin)
        gw = (gcols.T @ xd.reshape(n * h * wdt, cin)).reshape(wd.shape)
        grads = [_unbatch(gx, squeeze), gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 1, 2)))
        return grads

    return make_op(_unbatch(out, squeeze), parents, backward, "conv_transpose2d")


# -- pooling and resampling -----------------------------------------------------

def avgpool2d(x: Tensor, factor: int) -> Tensor:
    """Mean over non-overlapping ``factor x factor`` cells."""
    xd, squeeze = _batched(x)
    n, h, w, c = xd.shape
    if factor < 1 or h % factor or w % factor:
        raise ShapeError(f"avgpool2d: extents {h}x{w} not divisible by factor {factor}")
    out = xd.reshape(n, h // factor, factor, w // factor, factor, c).mean(axis=(2, 4))
    scale = 1.0 / (factor * factor)

    def backward(g):
        g = _rebatch(g, squeeze)
        gx = np.repeat(np.repeat(g * scale, factor, axis=1), factor, axis=2)
        return (_unbatch(gx, squeeze),)

    return make_op(_unbatch(out, squeeze), (x,), backward, "avgpool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """``H x W x C`` -> ``1 x 1 x C`` spatial mean."""
    if x.ndim not in (3, 4):
        raise ShapeError(f"global_avg_pool expects a feature map, got {x.shape}")
    return x.mean(axis=(-3, -2), keepdims=True)


def global_max_pool(x: Tensor) -> Tensor:
    """``H x W x C`` -> ``1 x 1 x C`` spatial max; gradient goes to the first argmax."""
    xd, squeeze = _batched(x)
    n, h, w, c = xd.shape
    flat = xd.reshape(n, h * w, c)
    idx = flat.argmax(axis=1)
    out = np.take_along_axis(flat, idx[:, None, :], axis=1).reshape(n, 1, 1, c)

    def backward(g):
        g = _rebatch(g, squeeze).reshape(n, 1, c)
        gx = np.zeros_like(flat)
        np.put_along_axis(gx, idx[:, None, :], g, axis=1)
        return (_unbatch(gx.reshape(n, h, w, c), squeeze),)

    return make_op(_unbatch(out, squeeze), (x,), backward, "global_max_pool")


def bilinear_matrix(size: int, factor: int, dtype=np.float64) -> np.ndarray:
    """(size*factor, size) interpolation matrix, half-pixel centres, edge-clamped."""
    out = size * factor
    src = (np.arange(out) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, size - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, size - 1)
    frac = src - lo
    m = np.zeros((out, size), dtype=dtype)
    rows = np.arange(out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def upsample2d(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling by an integer factor (align_corners off)."""
    if factor < 1:
        raise ShapeError(f"upsample2d factor must be >= 1, got {factor}")
    xd, squeeze = _batched(x)
    if factor == 1:
        return make_op(_unbatch(xd.copy(), squeeze), (x,), lambda g: (g,), "upsample2d")
    n, h, w, c = xd.shape
    mh = bilinear_matrix(h, factor, xd.dtype)
    mw = bilinear_matrix(w, factor, xd.dtype)
    out = np.einsum("ph,nhwc,qw->npqc", mh, xd, mw, optimize=True)

    def backward(g):
        g = _rebatch(g, squeeze)
        gx = np.einsum("ph,npqc,qw->nhwc", mh, g, mw, optimize=True)
        return (_unbatch(gx, squeeze),)

    return make_op(_unbatch(out, squeeze), (x,), backward, "upsample2d")


# -- spatial derivatives --------------------------------------------------------

def _spatial_diff(x: Tensor, axis: int, name: str) -> Tensor:
    xd = x.data
    if x.ndim < 3:
        raise ShapeError(f"{name} expects a feature map, got {x.shape}")
    if xd.shape[axis] < 2:
        raise ShapeError(f"{name} needs extent >= 2 on axis {axis}, got {xd.shape}")
    d = np.diff(xd, axis=axis)
    pad = [(0, 0)] * xd.ndim
    pad[axis] = (0, 1)
    out = np.pad(d, pad)
    n = xd.shape[axis]

    def backward(g):
        gi = np.take(g, np.arange(n - 1), axis=axis)
        gx = np.zeros_like(g)
        lead = [slice(None)] * xd.ndim
        trail = [slice(None)] * xd.ndim
        lead[axis] = slice(1, n)
        trail[axis] = slice(0, n - 1)
        gx[tuple(lead)] += gi
        gx[tuple(trail)] -= gi
        return (gx,)

    return make_op(out, (x,), backward, name)


def spatial_diff_x(x: Tensor) -> Tensor:
    """Forward difference along width; last column is zero."""
    return _spatial_diff(x, x.ndim - 2, "spatial_diff_x")


def spatial_diff_y(x: Tensor) -> Tensor:
    """Forward difference along height; last row is zero."""
    return _spatial_diff(x, x.ndim - 3, "spatial_diff_y")


__all__ = [
    "relu", "sigmoid", "gelu", "softmax", "layernorm", "l2norm",
    "conv2d", "conv_transpose2d", "avgpool2d", "global_avg_pool", "global_max_pool",
    "upsample2d", "bilinear_matrix", "spatial_diff_x", "spatial_diff_y", "as_tensor",
]
