import hashlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hylogvit.data import (AIRLIGHT_RANGE, BETA_RANGE, DEPTH_MAX, augment, apply_haze, crop, decode_ppm, dehaze,
                           encode_ppm, flip, generate_dataset, load_image, load_split, read_manifest, rotate90,
                           save_image, synth_scene, transmission)
from hylogvit.errors import FormatError


def _check_invariants(s, tol=1e-6):
    np.testing.assert_allclose(s.clear, np.clip(s.reflectance * s.shading, 0, 1), atol=tol)
    t = np.exp(-s.beta * s.depth)[..., None]
    np.testing.assert_allclose(s.hazy, np.clip(s.clear * t + s.airlight * (1 - t), 0, 1), atol=tol)


def test_scene_ranges_and_invariants():
    s = synth_scene(3, 32, 48)
    assert s.hazy.shape == (32, 48, 3) and s.depth.shape == (32, 48)
    _check_invariants(s)
    assert BETA_RANGE[0] <= s.beta <= BETA_RANGE[1]
    assert ((s.airlight >= AIRLIGHT_RANGE[0]) & (s.airlight <= AIRLIGHT_RANGE[1])).all()
    assert np.ptp(s.airlight) <= 0.05
    assert s.depth.min() == 0.0 and abs(s.depth.max() - DEPTH_MAX) < 1e-12
    assert s.shading.min() >= 0.2 - 1e-12 and s.shading.max() <= 1.0 + 1e-12
    assert np.array_equal(s.shading[..., 0], s.shading[..., 2])


def test_scene_determinism_and_beta_zero():
    a, b = synth_scene(11, 16, 16), synth_scene(11, 16, 16)
    for k in ("hazy", "clear", "reflectance", "shading", "depth", "airlight"):
        assert np.array_equal(getattr(a, k), getattr(b, k))
    z = synth_scene(11, 16, 16, beta=0.0)
    assert np.array_equal(z.hazy, z.clear)


def test_clamp_rarely_engaged():
    frac = []
    for seed in range(100):
        s = synth_scene(seed, 16, 16)
        t = np.exp(-s.beta * s.depth)[..., None]
        raw = s.clear * t + s.airlight * (1 - t)
        frac.append(np.mean((raw < 0) | (raw > 1)))
    assert np.mean(frac) < 0.01


def test_haze_limits_and_errors(rng):
    j = rng.uniform(0, 1, (4, 4, 3))
    a = np.array([0.8, 0.82, 0.79])
    assert np.array_equal(apply_haze(j, np.ones((4, 4)), a, 0.0), j)
    np.testing.assert_allclose(apply_haze(j, np.full((4, 4), 1e3), a, 1.0), np.broadcast_to(a, j.shape))
    fixed = np.broadcast_to(a, j.shape)
    np.testing.assert_allclose(apply_haze(fixed, rng.uniform(0, 3, (4, 4)), a, 1.3), fixed, atol=1e-15)
    with pytest.raises(ValueError):
        apply_haze(j, np.ones((4, 4)), a, -0.1)
    with pytest.raises(ValueError):
        apply_haze(j, -np.ones((4, 4)), a, 0.5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 2.0))
def test_haze_roundtrip_where_transmission_is_large(seed, beta):
    r = np.random.default_rng(seed)
    j = r.uniform(0, 1, (6, 6, 3))
    d = r.uniform(0, 3, (6, 6))
    a = r.uniform(0.7, 1.0, 3)
    t = transmission(d, beta)
    rec = dehaze(apply_haze(j, d, a, beta), t, a)
    mask = t > 0.05
    assert np.abs(rec - j)[mask].max() < 1e-5


def test_augment_inverse_pairs_and_invariants():
    s = synth_scene(5, 16, 16)
    ff = flip(flip(s, 0), 0)
    assert np.array_equal(ff.hazy, s.hazy)
    r4 = rotate90(rotate90(rotate90(rotate90(s))))
    assert np.array_equal(r4.depth, s.depth)
    for seed in range(10):
        _check_invariants(augment(s, seed, crop_size=(8, 8)))
    assert augment(s, 3).hazy.shape == (16, 16, 3)
    with pytest.raises(ValueError):
        crop(s, 0, 0, (32, 8))
    rect = augment(synth_scene(1, 8, 16), 2)
    assert rect.depth.shape == (8, 16)


def test_ppm_bytes_and_roundtrip(tmp_path, rng):
    raw = encode_ppm(np.ones((1, 1, 3)))
    assert raw == b"P6\n1 1\n255\n\xff\xff\xff"
    img = rng.uniform(0, 1, (5, 7, 3))
    save_image(tmp_path / "a.ppm", img)
    back = load_image(tmp_path / "a.ppm")
    assert back.shape == (5, 7, 3)
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12


@pytest.mark.parametrize("raw", [b"P5\n1 1\n255\n\x00", b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00",
                                 b"P6\n2 2\n255\n\x00\x00", b"P6\n1\n", b"P6\nx 1\n255\n\x00\x00\x00"])
def test_ppm_format_errors(raw):
    with pytest.raises(FormatError):
        decode_ppm(raw)


def test_ppm_header_comment_accepted():
    assert decode_ppm(b"P6\n# made by hand\n1 1\n255\n\x00\x80\xff").shape == (1, 1, 3)


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.iterdir()):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def test_dataset_generation_manifest_and_determinism(tmp_path):
    m = generate_dataset(tmp_path / "a", 6, (16, 16), seed=4, test_count=2)
    generate_dataset(tmp_path / "b", 6, (16, 16), seed=4, test_count=2)
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")
    lines = (tmp_path / "a" / "manifest.txt").read_text().splitlines()
    assert lines[0] == "hylog-manifest v1" and lines[1] == "00000\ttrain" and lines[-1] == "00007\ttest"
    back = read_manifest(tmp_path / "a")
    assert back.stems == m.stems and back.seed == 4
    test = load_split(back, "test")
    assert len(test) == 2 and test[0].hazy.shape == (16, 16, 3)
    (tmp_path / "a" / "00003_depth.ppm").unlink()
    with pytest.raises(FileNotFoundError):
        read_manifest(tmp_path / "a")


def test_manifest_header_checked(tmp_path):
    (tmp_path / "manifest.txt").write_text("something else\n")
    with pytest.raises(FormatError):
        read_manifest(tmp_path)
