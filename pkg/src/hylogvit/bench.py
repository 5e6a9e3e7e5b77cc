"""Attention cost model and wall-clock benchmark for the block variants.

MAC counts cover only the two attention contractions (``Q K^T`` and ``A V``),
each ``L^2 * C`` multiply-accumulates for a sequence of ``L`` tokens of width
``C``. ``full=True`` adds the q/k/v/output projections and the MLP.

CSV columns: ``variant,H,W,C,macs,ns_median,runs``. Everything except
``ns_median`` is a pure function of the inputs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from .hylog import AblationBlock, HyLoGConfig, global_path, local_path, local_path_parallel
from .tensor import ShapeError, Tensor, concat, no_grad

VARIANTS = ("standard", "local", "global", "hybrid", "sequential")
BENCH_HEADER = "variant,H,W,C,macs,ns_median,runs"


@dataclass(frozen=True)
class FlopModel:
    """Geometry for the cost model: ``g`` windows per side, ``n_g`` times fewer
    global tokens (``n_g = s^2`` for per-side pooling ``s``)."""

    H: int
    W: int
    C: int
    g: int = 8
    n_g: int = 4
    heads: int = 4
    mlp_ratio: int = 4

    def __post_init__(self):
        if min(self.H, self.W, self.C, self.g, self.n_g, self.heads) < 1:
            raise ShapeError(f"all FlopModel fields must be positive: {self}")
        if self.H % self.g or self.W % self.g:
            raise ShapeError(f"{self.H}x{self.W} not divisible into a {self.g}x{self.g} window grid")
        s = self.pool_factor
        if s * s != self.n_g:
            raise ShapeError(f"global token reduction {self.n_g} is not a square")
        if self.H % s or self.W % s:
            raise ShapeError(f"{self.H}x{self.W} not divisible by pooling factor {s}")

    @property
    def pool_factor(self) -> int:
        return int(round(self.n_g ** 0.5))

    @property
    def tokens(self) -> int:
        return self.H * self.W

    def block_config(self) -> HyLoGConfig:
        return HyLoGConfig(self.H, self.W, self.C, self.H // self.g, self.pool_factor)


def _attn(length: int, c: int) -> int:
    return 2 * length * length * c


def _dense(length: int, c: int, r: int) -> int:
    # q, k, v, out projections plus the two MLP layers
    return 4 * length * c * c + 2 * length * c * (r * c)


def attention_macs(variant: str, m: FlopModel, full: bool = False) -> int:
    """Integer MAC count of one block of ``variant`` on an ``H x W x C`` map."""
    hw, c = m.tokens, m.C
    if variant == "standard":
        macs = _attn(hw, c)
        dense = _dense(hw, c, m.mlp_ratio)
    elif variant in ("local", "global", "hybrid", "sequential"):
        local = 2 * hw * hw * c // (m.g * m.g)
        glob = 2 * hw * hw * c // (m.n_g * m.n_g)
        macs = {"local": local, "global": glob}.get(variant, local + glob)
        dense_l = _dense(hw, c, m.mlp_ratio)
        dense_g = _dense(hw // m.n_g, c, m.mlp_ratio)
        dense = {"local": dense_l, "global": dense_g}.get(variant, dense_l + dense_g)
    else:
        raise ValueError(f"unknown attention variant {variant!r}; expected one of {VARIANTS}")
    return macs + dense if full else macs


def local_macs_enumerated(m: FlopModel) -> int:
    """Sum ``2 L^2 C`` over every window of the grid, one window at a time."""
    mh, mw = m.H // m.g, m.W // m.g
    total = 0
    for top in range(0, m.H, mh):
        for left in range(0, m.W, mw):
            rows = len(range(top, min(top + mh, m.H)))
            cols = len(range(left, min(left + mw, m.W)))
            total += _attn(rows * cols, m.C)
    return total


@dataclass(frozen=True)
class BenchRecord:
    variant: str
    H: int
    W: int
    C: int
    macs: int
    ns_median: int
    runs: int

    def __post_init__(self):
        if self.macs <= 0 or self.ns_median <= 0:
            raise ValueError(f"benchmark record must have positive MACs and time: {self}")

    def csv(self) -> str:
        return f"{self.variant},{self.H},{self.W},{self.C},{self.macs},{self.ns_median},{self.runs}"


def _runner(variant: str, m: FlopModel, workers: int, seed: int):
    cfg = m.block_config()
    rng = np.random.default_rng(seed)
    kind = "vit" if variant == "standard" else variant
    block = AblationBlock(kind, cfg, rng, heads=m.heads, mlp_ratio=m.mlp_ratio)
    x = Tensor(rng.standard_normal((m.H, m.W, m.C)).astype(np.float32))
    body = block.body

    def local(t):
        return local_path_parallel(t, body, cfg, workers) if workers > 1 else local_path(t, body, cfg)

    if workers > 1 and kind == "local":
        return lambda: local(x)
    if workers > 1 and kind == "sequential":
        return lambda: global_path(local(x), body, cfg)
    if workers > 1 and kind == "hybrid":
        return lambda: body.fuse(concat([local(x), global_path(x, body, cfg)], axis=-1))
    return lambda: block(x)


def time_variant(variant: str, m: FlopModel, k: int = 3, workers: int = 1, seed: int = 0) -> int:
    """Median wall time in ns of ``k`` grad-free forwards after one warmup."""
    if k < 3:
        raise ValueError(f"need at least 3 timed runs, got {k}")
    fn = _runner(variant, m, workers, seed)
    times = []
    with no_grad():
        fn()
        for _ in range(k):
            t0 = time.perf_counter_ns()
            fn()
            times.append(time.perf_counter_ns() - t0)
    return max(1, int(np.median(times)))


def parse_size(text: str) -> Tuple[int, int, int]:
    """``HxW`` or ``HxWxC`` (C defaults to 16)."""
    parts = [int(v) for v in text.lower().split("x")]
    if len(parts) == 2:
        parts.append(16)
    if len(parts) != 3:
        raise ValueError(f"bad size {text!r}; expected HxW or HxWxC")
    return parts[0], parts[1], parts[2]


def bench(variants: Sequence[str], sizes: Iterable[Tuple[int, int, int]], k: int = 3, g: int = 8,
          n_g: int = 4, full: bool = False, workers: int = 1, csv_path=None,
          timed: bool = True) -> List[BenchRecord]:
    """Time every variant at every size; write a CSV when ``csv_path`` is given.

    With ``timed=False`` only the analytic column is filled (``ns_median=1``,
    ``runs=0``) which is useful for byte-stable output.
    """
    if isinstance(variants, str):
        variants = [variants]
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown attention variant {v!r}; expected one of {VARIANTS}")
    records = []
    for h, w, c in sizes:
        m = FlopModel(h, w, c, g, n_g)
        for v in variants:
            macs = attention_macs(v, m, full)
            try:
                ns = time_variant(v, m, k, workers) if timed else 1
            except MemoryError as exc:
                raise MemoryError(f"out of memory timing {v} at {h}x{w}x{c}") from exc
            records.append(BenchRecord(v, h, w, c, macs, ns, k if timed else 0))
    if csv_path is not None:
        write_csv(csv_path, records)
    return records


def write_csv(path, records: Sequence[BenchRecord]) -> None:
    lines = [BENCH_HEADER] + [r.csv() for r in records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
