"""Complementary feature selection: channel-attention gating of the
reflectance/shading features before they are added to the dehazing stream."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import ops
from .nn import Conv2d, Module
from .tensor import ShapeError, Tensor


class _Stream(Module):
    """Per-stream (R or S) bottleneck layers; the ave and max branches do not share weights."""

    def __init__(self, c: int, r: int, rng: np.random.Generator, dtype):
        self.down_ave = Conv2d(c, c // r, 1, rng, dtype=dtype)
        self.up_ave = Conv2d(c // r, c, 1, rng, dtype=dtype)
        self.down_max = Conv2d(c, c // r, 1, rng, dtype=dtype)
        self.up_max = Conv2d(c // r, c, 1, rng, dtype=dtype)

    def forward(self, s_ave: Tensor, s_max: Tensor) -> Tensor:
        t_ave = self.up_ave(ops.relu(self.down_ave(s_ave)))
        t_max = self.up_max(ops.relu(self.down_max(s_max)))
        return ops.sigmoid(t_ave + t_max)


class CfsmParams(Module):
    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 4, dtype=np.float32):
        if channels % reduction:
            raise ShapeError(f"CFSM channels {channels} not divisible by reduction {reduction}")
        self.channels = channels
        self.reduction = reduction
        self.stream_r = _Stream(channels, reduction, rng, dtype)
        self.stream_s = _Stream(channels, reduction, rng, dtype)

    def forward(self, d_prev: Tensor, d_r: Tensor, d_s: Tensor) -> Tensor:
        return cfsm(d_prev, d_r, d_s, self)


class CfsmIntermediates(NamedTuple):
    s_ave: np.ndarray
    s_max: np.ndarray
    a_r: np.ndarray
    a_s: np.ndarray


def _same_shape(d_prev: Tensor, d_r: Tensor, d_s: Tensor) -> None:
    if not (d_prev.shape == d_r.shape == d_s.shape):
        raise ShapeError(f"CFSM inputs disagree: {d_prev.shape}, {d_r.shape}, {d_s.shape}")


def cfsm_combine(d_prev: Tensor, d_r: Tensor, d_s: Tensor, a_r, a_s) -> Tensor:
    """``d_prev + a_r * d_r + a_s * d_s`` with channelwise-broadcast scores."""
    return d_prev + a_r * d_r + a_s * d_s


def cfsm_detailed(d_prev: Tensor, d_r: Tensor, d_s: Tensor, p: CfsmParams):
    """CFSM output plus read-only copies of the pooled statistics and scores."""
    _same_shape(d_prev, d_r, d_s)
    if d_prev.shape[-1] != p.channels:
        raise ShapeError(f"CFSM built for {p.channels} channels, got {d_prev.shape}")
    u = d_prev + d_r + d_s
    s_ave = ops.global_avg_pool(u)
    s_max = ops.global_max_pool(u)
    a_r = p.stream_r(s_ave, s_max)
    a_s = p.stream_s(s_ave, s_max)
    out = cfsm_combine(d_prev, d_r, d_s, a_r, a_s)
    inter = CfsmIntermediates(*(np.array(t.data) for t in (s_ave, s_max, a_r, a_s)))
    for arr in inter:
        arr.flags.writeable = False
    return out, inter


def cfsm(d_prev: Tensor, d_r: Tensor, d_s: Tensor, p: CfsmParams) -> Tensor:
    return cfsm_detailed(d_prev, d_r, d_s, p)[0]


def fuse_sum(d_prev: Tensor, d_r: Tensor, d_s: Tensor) -> Tensor:
    _same_shape(d_prev, d_r, d_s)
    return d_prev + d_r + d_s
