"""Hybrid local-global attention block.

The local path runs a shared ViT block inside each non-overlapping ``M x M``
window; the global path runs a ViT block on an average-pooled copy of the map
and upsamples the result. A bare 3x3 convolution fuses the two.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from . import ops
from .nn import Conv2d, Module, ResBlock
from .tensor import ShapeError, Tensor, concat, no_grad
from .vit import TokenSeq, ViTParams, detokenize, tokenize, vit_stack

BLOCK_KINDS = ("cnn", "vit", "local", "global", "sequential", "hybrid")


@dataclass(frozen=True)
class HyLoGConfig:
    """Geometry of one block.

    ``window`` is the local region side ``M``; ``global_downscale`` is the
    per-side pooling factor ``s``, so the global path sees ``s**2`` times
    fewer tokens (``token_reduction``).
    """

    height: int
    width: int
    channels: int
    window: int
    global_downscale: int = 2

    def __post_init__(self):
        if self.window < 1 or self.height % self.window or self.width % self.window:
            raise ShapeError(f"{self.height}x{self.width} map not divisible by window {self.window}")
        s = self.global_downscale
        if s < 1 or self.height % s or self.width % s:
            raise ShapeError(f"{self.height}x{self.width} map not divisible by global downscale {s}")

    @property
    def grid_per_side(self) -> int:
        return self.height // self.window

    @property
    def num_windows(self) -> int:
        return (self.height // self.window) * (self.width // self.window)

    @property
    def token_reduction(self) -> int:
        return self.global_downscale ** 2

    @classmethod
    def for_extent(cls, height: int, width: int, channels: int, grid: int = 8,
                   global_downscale: int = 2, window: Optional[int] = None) -> "HyLoGConfig":
        """Pick the window for a map: an explicit ``window`` wins, otherwise the
        largest grid in ``grid, grid/2, ..., 1`` that divides both sides and
        leaves windows at least 2 pixels wide."""
        if window is None:
            g = grid
            while g > 1 and (height % g or width % g or height // g < 2 or width // g < 2):
                g //= 2
            window = height // max(g, 1)
            if width % window:
                window = int(np.gcd(height, width))
        s = global_downscale
        while s > 1 and (height % s or width % s):
            s //= 2
        return cls(height, width, channels, window, s)


def window_partition(x: Tensor, m: int) -> List[Tensor]:
    """Split ``H x W x C`` into ``HW/M^2`` windows of ``M x M x C`` in row-major grid order."""
    h, w = x.shape[-3], x.shape[-2]
    if m < 1 or h % m or w % m:
        raise ShapeError(f"window_partition: {h}x{w} not divisible by window {m}")
    return [x[..., i : i + m, j : j + m, :] for i in range(0, h, m) for j in range(0, w, m)]


def window_merge(windows: Sequence[Tensor], grid) -> Tensor:
    """Inverse of :func:`window_partition`; ``grid`` is ``(rows, cols)`` or a side length."""
    gh, gw = (grid, grid) if isinstance(grid, int) else grid
    if len(windows) != gh * gw:
        raise ShapeError(f"window_merge: {len(windows)} windows for a {gh}x{gw} grid")
    rows = [concat(windows[r * gw : (r + 1) * gw], axis=-2) for r in range(gh)]
    return concat(rows, axis=-3)


def _to_window_batch(x: Tensor, m: int) -> Tensor:
    *lead, h, w, c = x.shape
    n = int(np.prod(lead)) if lead else 1
    gh, gw = h // m, w // m
    y = x.reshape((n, gh, m, gw, m, c)).transpose(0, 1, 3, 2, 4, 5)
    return y.reshape((n * gh * gw, m * m, c))


def _from_window_batch(t: Tensor, shape, m: int) -> Tensor:
    *lead, h, w, c = shape
    n = int(np.prod(lead)) if lead else 1
    gh, gw = h // m, w // m
    y = t.reshape((n, gh, gw, m, m, c)).transpose(0, 1, 3, 2, 4, 5)
    return y.reshape(tuple(shape))


class HyLoGParams(Module):
    def __init__(self, cfg: HyLoGConfig, rng: np.random.Generator, heads: int = 4, mlp_ratio: int = 4,
                 depth: int = 1, pos_encoding: bool = False, dtype=np.float32):
        c = cfg.channels
        local_len = cfg.window * cfg.window if pos_encoding else None
        global_len = (cfg.height // cfg.global_downscale) * (cfg.width // cfg.global_downscale) if pos_encoding else None
        self.cfg = cfg
        self.local_vit = [ViTParams(c, rng, heads, mlp_ratio, local_len, dtype) for _ in range(depth)]
        self.global_vit = [ViTParams(c, rng, heads, mlp_ratio, global_len, dtype) for _ in range(depth)]
        self.fuse = Conv2d(2 * c, c, 3, rng, pad=1, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return hylog_block(x, self, self.cfg)


def _check(x: Tensor, cfg: HyLoGConfig) -> None:
    if x.shape[-3:] != (cfg.height, cfg.width, cfg.channels):
        raise ShapeError(f"block built for {cfg.height}x{cfg.width}x{cfg.channels}, got {x.shape}")


def local_path(x: Tensor, p: HyLoGParams, cfg: HyLoGConfig) -> Tensor:
    """Shared ViT over every ``M x M`` window, windows merged back in grid order."""
    m = cfg.window
    h, w = x.shape[-3], x.shape[-2]
    if h % m or w % m:
        raise ShapeError(f"local_path: {h}x{w} not divisible by window {m}")
    batch = _to_window_batch(x, m)
    out = vit_stack(TokenSeq(batch, (m, m)), p.local_vit).tokens
    return _from_window_batch(out, x.shape, m)


def local_path_windows(x: Tensor, p: HyLoGParams, cfg: HyLoGConfig, order: Optional[Sequence[int]] = None) -> Tensor:
    """Reference local path: one ViT call per window, visited in ``order``.

    Each window is evaluated independently; results are merged in grid order
    regardless of the visiting order.
    """
    windows = window_partition(x, cfg.window)
    order = range(len(windows)) if order is None else order
    results: List[Optional[Tensor]] = [None] * len(windows)
    for i in order:
        results[i] = detokenize(vit_stack(tokenize(windows[i]), p.local_vit))
    return window_merge(results, (x.shape[-3] // cfg.window, x.shape[-2] // cfg.window))


def local_path_parallel(x: Tensor, p: HyLoGParams, cfg: HyLoGConfig, workers: int = 2) -> Tensor:
    """Grad-free local path with the window batch split across ``workers`` threads.

    Chunks are contiguous runs of windows, so concatenating them in submission
    order restores grid order.
    """
    from concurrent.futures import ThreadPoolExecutor

    m = cfg.window
    batch = _to_window_batch(x, m).data
    parts = [c for c in np.array_split(batch, max(1, workers), axis=0) if len(c)]

    def run(chunk: np.ndarray) -> np.ndarray:
        with no_grad():
            return vit_stack(TokenSeq(Tensor(chunk), (m, m)), p.local_vit).tokens.data

    with ThreadPoolExecutor(max_workers=len(parts)) as pool:
        outs = list(pool.map(run, parts))
    return _from_window_batch(Tensor(np.concatenate(outs, axis=0)), x.shape, m)


def global_path(x: Tensor, p: HyLoGParams, cfg: HyLoGConfig) -> Tensor:
    """``upsample(vit(avgpool(x)))`` with per-side factor ``s``."""
    s = cfg.global_downscale
    pooled = ops.avgpool2d(x, s)
    out = detokenize(vit_stack(tokenize(pooled), p.global_vit))
    return ops.upsample2d(out, s)


def hylog_block(x: Tensor, p: HyLoGParams, cfg: HyLoGConfig) -> Tensor:
    """``conv3x3(concat(local_path(x), global_path(x)))``."""
    _check(x, cfg)
    xl = local_path(x, p, cfg)
    xg = global_path(x, p, cfg)
    return p.fuse(concat([xl, xg], axis=-1))


class CNNBlock(Module):
    """Two residual conv blocks (the convolutional ablation backbone)."""

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float32):
        self.blocks = [ResBlock(channels, rng, dtype), ResBlock(channels, rng, dtype)]

    def forward(self, x: Tensor) -> Tensor:
        for b in self.blocks:
            x = b(x)
        return x


class FullViTBlock(Module):
    """A single ViT block over all ``HW`` tokens of the map."""

    def __init__(self, cfg: HyLoGConfig, rng: np.random.Generator, heads: int = 4, mlp_ratio: int = 4,
                 depth: int = 1, pos_encoding: bool = False, dtype=np.float32):
        length = cfg.height * cfg.width if pos_encoding else None
        self.cfg = cfg
        self.vit = [ViTParams(cfg.channels, rng, heads, mlp_ratio, length, dtype) for _ in range(depth)]

    def forward(self, x: Tensor) -> Tensor:
        return detokenize(vit_stack(tokenize(x), self.vit))


class AblationBlock(Module):
    """Backbone block of one of the ``BLOCK_KINDS``."""

    def __init__(self, kind: str, cfg: HyLoGConfig, rng: np.random.Generator, heads: int = 4,
                 mlp_ratio: int = 4, depth: int = 1, pos_encoding: bool = False, dtype=np.float32):
        if kind not in BLOCK_KINDS:
            raise ValueError(f"unknown block kind {kind!r}; expected one of {BLOCK_KINDS}")
        self.kind = kind
        self.cfg = cfg
        if kind == "cnn":
            self.body = CNNBlock(cfg.channels, rng, dtype)
        elif kind == "vit":
            self.body = FullViTBlock(cfg, rng, heads, mlp_ratio, depth, pos_encoding, dtype)
        else:
            self.body = HyLoGParams(cfg, rng, heads, mlp_ratio, depth, pos_encoding, dtype)
            # drop sub-modules the kind never calls so every parameter gets a gradient
            if kind != "hybrid":
                del self.body.fuse
            if kind == "local":
                del self.body.global_vit
            if kind == "global":
                del self.body.local_vit

    def forward(self, x: Tensor) -> Tensor:
        return ablation_block(x, self.kind, self)


def ablation_block(x: Tensor, kind: str, params: AblationBlock) -> Tensor:
    cfg = params.cfg
    _check(x, cfg)
    body = params.body
    if kind == "cnn":
        return body(x)
    if kind == "vit":
        return body(x)
    if kind == "local":
        return local_path(x, body, cfg)
    if kind == "global":
        return global_path(x, body, cfg)
    if kind == "sequential":
        return global_path(local_path(x, body, cfg), body, cfg)
    if kind == "hybrid":
        return hylog_block(x, body, cfg)
    raise ValueError(f"unknown block kind {kind!r}; expected one of {BLOCK_KINDS}")


__all__ = [
    "BLOCK_KINDS", "HyLoGConfig", "HyLoGParams", "AblationBlock",
    "window_partition", "window_merge", "local_path", "local_path_windows", "local_path_parallel",
    "global_path", "hylog_block", "ablation_block",
]
