"""Training losses and image-quality metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Union

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor, as_tensor

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class LossWeights:
    lambda_r: float = 1.0
    lambda_s: float = 1.0
    lambda_d: float = 1.5

    def __post_init__(self):
        if min(self.lambda_r, self.lambda_s, self.lambda_d) < 0:
            raise ValueError(f"loss weights must be nonnegative: {self}")


def _same(pred: Tensor, target: Tensor, name: str) -> None:
    if pred.shape != target.shape:
        raise ShapeError(f"{name}: prediction {pred.shape} vs target {target.shape}")


def l2_loss(pred: Tensor, target) -> Tensor:
    target = as_tensor(target, like=pred)
    _same(pred, target, "l2_loss")
    d = pred - target
    return (d * d).mean()


def gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _per_channel(x: Tensor) -> Tensor:
    """``(N,)H,W,C`` -> ``(N*C, H, W, 1)`` so a single-channel filter runs per channel."""
    if x.ndim == 3:
        x = x.reshape((1,) + x.shape)
    n, h, w, c = x.shape
    return x.transpose(0, 3, 1, 2).reshape((n * c, h, w, 1))


def _gauss_filter(x: Tensor, kh: Tensor, kw: Tensor) -> Tensor:
    return ops.conv2d(ops.conv2d(x, kh), kw)


def ssim_map(pred: Tensor, target) -> Tensor:
    """Local SSIM over valid 11x11 Gaussian windows, per channel (dynamic range 1)."""
    target = as_tensor(target, like=pred)
    _same(pred, target, "ssim")
    h, w = pred.shape[-3], pred.shape[-2]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ShapeError(f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")
    g = gaussian_kernel().astype(pred.dtype)
    kh = Tensor(g.reshape(SSIM_WINDOW, 1, 1, 1))
    kw = Tensor(g.reshape(1, SSIM_WINDOW, 1, 1))
    x, y = _per_channel(pred), _per_channel(target)
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    mu_x = _gauss_filter(x, kh, kw)
    mu_y = _gauss_filter(y, kh, kw)
    sxx = _gauss_filter(x * x, kh, kw) - mu_x * mu_x
    syy = _gauss_filter(y * y, kh, kw) - mu_y * mu_y
    sxy = _gauss_filter(x * y, kh, kw) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return num / den


def ssim(pred: Tensor, target) -> Tensor:
    return ssim_map(pred, target).mean()


def ssim_loss(pred: Tensor, target) -> Tensor:
    return 1.0 - ssim(pred, target)


def edge_loss(shading: Tensor, shading_gt) -> Tensor:
    """Batch mean of ``||dx(S) - dx(S_gt)||_2 + ||dy(S) - dy(S_gt)||_2``.

    Each norm is taken over the whole flattened derivative map of one sample.
    """
    shading_gt = as_tensor(shading_gt, like=shading)
    _same(shading, shading_gt, "edge_loss")
    d = shading - shading_gt
    if d.ndim == 3:
        d = d.reshape((1,) + d.shape)
    axes = (1, 2, 3)
    per_sample = ops.l2norm(ops.spatial_diff_x(d), axis=axes) + ops.l2norm(ops.spatial_diff_y(d), axis=axes)
    return per_sample.mean()


class LossBreakdown(NamedTuple):
    total: Tensor
    l_r: float
    l_s: float
    l_d: float


def hybrid_loss(outputs, targets, w: LossWeights = LossWeights(), mode: str = "full") -> LossBreakdown:
    """``lambda_R L_R + lambda_S L_S + lambda_D L_D``.

    ``outputs`` is ``(I_R, I_S, I_D)`` with ``None`` for disabled decoders;
    ``targets`` is ``(R_gt, S_gt, J_gt)``. ``L_R`` and ``L_D`` are L2 + SSIM
    loss, ``L_S`` is L2 + edge loss. Disabled streams contribute exactly zero.
    """
    i_r, i_s, i_d = outputs
    r_gt, s_gt, j_gt = targets
    use_r = mode in ("full", "w-R")
    use_s = mode in ("full", "w-S")
    if j_gt is None:
        raise ValueError("hybrid_loss: missing dehazing target")
    l_d = l2_loss(i_d, j_gt) + ssim_loss(i_d, j_gt)
    total = w.lambda_d * l_d
    l_r_val = l_s_val = 0.0
    if use_r:
        if i_r is None or r_gt is None:
            raise ValueError("hybrid_loss: reflectance stream enabled but output/target missing")
        l_r = l2_loss(i_r, r_gt) + ssim_loss(i_r, r_gt)
        total = total + w.lambda_r * l_r
        l_r_val = float(l_r.data)
    if use_s:
        if i_s is None or s_gt is None:
            raise ValueError("hybrid_loss: shading stream enabled but output/target missing")
        l_s = l2_loss(i_s, s_gt) + edge_loss(i_s, s_gt)
        total = total + w.lambda_s * l_s
        l_s_val = float(l_s.data)
    return LossBreakdown(total, l_r_val, l_s_val, float(l_d.data))


def _arr(x: Union[Tensor, np.ndarray]) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def psnr(pred, target, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` when the images are identical."""
    p, t = _arr(pred), _arr(target)
    if p.shape != t.shape:
        raise ShapeError(f"psnr: {p.shape} vs {t.shape}")
    mse = float(np.mean((p - t) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val * max_val / mse)


def ssim_value(pred, target) -> float:
    """SSIM as a plain float, evaluated in float64."""
    return float(ssim(Tensor(_arr(pred)), Tensor(_arr(target))).data)
