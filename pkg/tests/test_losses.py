import math

import numpy as np
import pytest

from hylogvit.gradcheck import gradcheck
from hylogvit.losses import (LossWeights, edge_loss, hybrid_loss, l2_loss, psnr, ssim, ssim_loss, ssim_value)
from hylogvit.tensor import ShapeError, Tensor

from conftest import t64


def _t(x):
    return Tensor(x, dtype=np.float64)


def test_l2_examples(rng):
    x = rng.uniform(0, 1, (2, 4, 4, 3))
    assert l2_loss(_t(x), x).item() == 0.0
    assert math.isclose(l2_loss(_t(x + 0.1), x).item(), 0.01, rel_tol=1e-9)
    p = t64(x + rng.standard_normal(x.shape) * 0.1)
    l2_loss(p, x).backward()
    np.testing.assert_allclose(p.grad, 2 * (p.data - x) / x.size, atol=1e-15)
    with pytest.raises(ShapeError):
        l2_loss(_t(x), x[:, :3])


def test_ssim_matches_skimage(rng):
    metrics = pytest.importorskip("skimage.metrics")
    a = rng.uniform(0, 1, (24, 20, 3))
    b = np.clip(a + rng.standard_normal(a.shape) * 0.1, 0, 1)
    ref = metrics.structural_similarity(a, b, channel_axis=-1, data_range=1.0, gaussian_weights=True,
                                        sigma=1.5, use_sample_covariance=False)
    assert abs(ssim_value(a, b) - ref) < 1e-6


def test_ssim_properties(rng):
    x = rng.uniform(0, 1, (16, 16, 3))
    y = rng.uniform(0, 1, (16, 16, 3))
    assert abs(ssim_value(x, x) - 1.0) < 1e-6
    assert abs(ssim_value(x, y) - ssim_value(y, x)) < 1e-6
    checker = np.indices((16, 16)).sum(axis=0) % 2
    img = np.repeat(checker[..., None], 3, axis=2).astype(np.float64)
    assert ssim_value(img, 1 - img) < 0.5
    with pytest.raises(ShapeError):
        ssim(_t(np.zeros((8, 8, 3))), np.zeros((8, 8, 3)))


def test_edge_loss_examples(rng):
    s = rng.uniform(0, 1, (2, 6, 6, 3))
    assert edge_loss(_t(s), s).item() == 0.0
    assert edge_loss(_t(np.full((6, 6, 3), 0.2)), np.full((6, 6, 3), 0.9)).item() == 0.0
    assert edge_loss(_t(s + 0.3), s).item() < 1e-12
    # independent per-sample flattened norms
    t = rng.uniform(0, 1, s.shape)
    d = s - t
    dx = np.zeros_like(d)
    dx[:, :, :-1] = d[:, :, 1:] - d[:, :, :-1]
    dy = np.zeros_like(d)
    dy[:, :-1] = d[:, 1:] - d[:, :-1]
    ref = np.mean([np.linalg.norm(dx[i]) + np.linalg.norm(dy[i]) for i in range(2)])
    assert math.isclose(edge_loss(_t(s), t).item(), ref, rel_tol=1e-12)


@pytest.mark.parametrize("fn", [l2_loss, ssim_loss, edge_loss])
def test_losses_nonnegative_and_gradcheck(rng, fn):
    p = t64(rng.uniform(0.1, 0.9, (1, 11, 11, 2)))
    q = rng.uniform(0.1, 0.9, p.shape)
    assert fn(p, q).item() >= 0
    assert gradcheck(lambda: fn(p, q), [p], max_checks=60).passed


def _outs(rng, shape=(1, 12, 12, 3)):
    return [_t(rng.uniform(0, 1, shape)) for _ in range(3)]


def test_hybrid_loss_weights_and_modes(rng):
    outs = _outs(rng)
    tg = [o.data for o in outs]
    assert hybrid_loss(outs, tg).total.item() == 0.0
    jt = rng.uniform(0, 1, outs[2].shape)
    only_d = hybrid_loss(outs, (tg[0], tg[1], jt))
    assert math.isclose(only_d.total.item(), 1.5 * only_d.l_d, rel_tol=1e-12)
    doubled = hybrid_loss(outs, (tg[0], tg[1], jt), LossWeights(1, 1, 3.0))
    assert math.isclose(doubled.total.item(), 2 * only_d.total.item(), rel_tol=1e-12)
    tg2 = [rng.uniform(0, 1, outs[0].shape) for _ in range(3)]
    wo = hybrid_loss((None, None, outs[2]), tg2, mode="w/o-RS")
    assert wo.l_r == 0.0 and wo.l_s == 0.0 and wo.total.item() == 1.5 * wo.l_d
    with pytest.raises(ValueError):
        hybrid_loss((None, outs[1], outs[2]), tg2, mode="full")


def test_psnr_examples(rng):
    x = rng.uniform(0, 1, (8, 8, 3))
    assert psnr(x, x) == math.inf
    assert math.isclose(psnr(np.full(4, 0.1), np.zeros(4)), 20.0, rel_tol=1e-12)
    assert math.isclose(psnr(np.ones(4), np.zeros(4)), 0.0, abs_tol=1e-12)
