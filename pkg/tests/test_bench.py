from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from hylogvit.bench import (BENCH_HEADER, VARIANTS, BenchRecord, FlopModel, attention_macs, bench,
                            local_macs_enumerated, parse_size)
from hylogvit.tensor import ShapeError


def test_five_sixty_fourths():
    m = FlopModel(64, 64, 16, g=8, n_g=4)
    assert Fraction(attention_macs("hybrid", m), attention_macs("standard", m)) == Fraction(5, 64)


def test_degenerate_grid():
    m = FlopModel(8, 8, 4, g=1, n_g=1)
    assert attention_macs("local", m) == attention_macs("global", m) == attention_macs("standard", m)


def test_local_32x32_value():
    m = FlopModel(32, 32, 16, g=8)
    assert attention_macs("local", m) == 2 * 1024 ** 2 * 16 // 64 == local_macs_enumerated(m)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from([1, 2, 4, 8]), st.integers(1, 4), st.integers(1, 4), st.integers(1, 8),
       st.sampled_from([1, 4, 16]))
def test_enumeration_and_ratio(g, a, b, c, n_g):
    s = int(n_g ** 0.5)
    m = FlopModel(g * s * a * 2, g * s * b * 2, c, g=g, n_g=n_g)
    assert attention_macs("local", m) == local_macs_enumerated(m)
    ratio = Fraction(attention_macs("hybrid", m), attention_macs("standard", m))
    assert ratio == Fraction(1, g * g) + Fraction(1, n_g * n_g)
    assert attention_macs("sequential", m) == attention_macs("hybrid", m)


def test_monotone_and_hybrid_cheaper():
    for v in VARIANTS:
        macs = [attention_macs(v, FlopModel(s, s, 8)) for s in (16, 32, 64, 128)]
        assert macs == sorted(macs) and len(set(macs)) == 4
    m = FlopModel(32, 32, 8)
    assert attention_macs("hybrid", m) < attention_macs("standard", m)
    assert attention_macs("hybrid", m, full=True) > attention_macs("hybrid", m)


def test_errors():
    with pytest.raises(ValueError):
        attention_macs("swin", FlopModel(8, 8, 4))
    with pytest.raises(ShapeError):
        FlopModel(12, 12, 4, g=8)
    with pytest.raises(ShapeError):
        FlopModel(16, 16, 4, n_g=3)
    with pytest.raises(ValueError):
        BenchRecord("local", 8, 8, 4, 0, 1, 3)
    with pytest.raises(ValueError):
        bench(["local"], [(16, 16, 4)], k=2)
    with pytest.raises(ValueError):
        parse_size("16")


def test_bench_csv(tmp_path):
    recs = bench(["local", "hybrid"], [(16, 16, 8), (32, 32, 8)], k=3, csv_path=tmp_path / "b.csv")
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == BENCH_HEADER and len(lines) == 5
    assert all(r.ns_median > 0 and r.runs == 3 for r in recs)
    bench(["local", "hybrid"], [(16, 16, 8), (32, 32, 8)], timed=False, csv_path=tmp_path / "c.csv")
    bench(["local", "hybrid"], [(16, 16, 8), (32, 32, 8)], timed=False, csv_path=tmp_path / "d.csv")
    assert (tmp_path / "c.csv").read_bytes() == (tmp_path / "d.csv").read_bytes()
    # analytic columns agree between timed and untimed output
    strip = lambda p: [",".join(l.split(",")[:5]) for l in p.read_text().splitlines()]
    assert strip(tmp_path / "b.csv") == strip(tmp_path / "c.csv")


def test_parallel_workers_run():
    recs = bench(["hybrid", "local", "sequential"], [(16, 16, 8)], k=3, workers=2)
    assert len(recs) == 3
