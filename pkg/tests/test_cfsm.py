import numpy as np
import pytest

from hylogvit.cfsm import CfsmParams, cfsm, cfsm_combine, cfsm_detailed, fuse_sum
from hylogvit.gradcheck import gradcheck, weighted_sum
from hylogvit.tensor import ShapeError, Tensor

from conftest import t64


def _maps(rng, shape=(5, 6, 8)):
    return [Tensor(rng.standard_normal(shape), dtype=np.float64) for _ in range(3)]


def test_bottleneck_width(rng):
    p = CfsmParams(64, rng, reduction=4)
    assert p.stream_r.down_ave.weight.shape[-1] == 16
    assert p.stream_s.down_max.weight.shape[-1] == 16
    with pytest.raises(ShapeError):
        CfsmParams(10, rng, reduction=4)


def test_output_algebra_from_intermediates(rng):
    d, r, s = _maps(rng)
    p = CfsmParams(8, rng, dtype=np.float64)
    out, inter = cfsm_detailed(d, r, s, p)
    recon = inter.a_r * r.data + inter.a_s * s.data
    np.testing.assert_allclose(out.data - d.data, recon, atol=1e-12)
    assert inter.a_r.shape == (1, 1, 8)
    assert ((inter.a_r > 0) & (inter.a_r < 1)).all()
    with pytest.raises(ValueError):
        inter.a_r[0, 0, 0] = 0.5


def test_statistics_are_pooled_sum(rng):
    d, r, s = _maps(rng)
    _, inter = cfsm_detailed(d, r, s, CfsmParams(8, rng, dtype=np.float64))
    u = d.data + r.data + s.data
    np.testing.assert_allclose(inter.s_ave[0, 0], u.mean(axis=(0, 1)), atol=1e-12)
    np.testing.assert_array_equal(inter.s_max[0, 0], u.max(axis=(0, 1)))


def test_zero_complements_identity(rng):
    d = Tensor(rng.standard_normal((4, 4, 8)).astype(np.float32))
    z = Tensor(np.zeros((4, 4, 8), dtype=np.float32))
    assert np.array_equal(cfsm(d, z, z, CfsmParams(8, rng)).data, d.data)


def test_fuse_sum_equals_cfsm_with_unit_scores(rng):
    d, r, s = _maps(rng)
    assert np.array_equal(fuse_sum(d, r, s).data, cfsm_combine(d, r, s, 1.0, 1.0).data)
    z = Tensor(np.zeros((2, 2, 3)))
    assert not fuse_sum(z, z, z).data.any()


def test_spatial_permutation_invariance(rng):
    d, r, s = _maps(rng)
    p = CfsmParams(8, rng, dtype=np.float64)
    _, base = cfsm_detailed(d, r, s, p)
    perm = rng.permutation(30)

    def shuffle(t):
        return Tensor(t.data.reshape(30, 8)[perm].reshape(5, 6, 8), dtype=np.float64)

    _, moved = cfsm_detailed(shuffle(d), shuffle(r), shuffle(s), p)
    np.testing.assert_allclose(moved.a_r, base.a_r, atol=1e-6)
    np.testing.assert_allclose(moved.a_s, base.a_s, atol=1e-6)


def test_shape_mismatch(rng):
    a = Tensor(np.zeros((4, 4, 8)))
    with pytest.raises(ShapeError):
        cfsm(a, Tensor(np.zeros((4, 3, 8))), a, CfsmParams(8, rng))


def test_gradchecks(rng):
    d, r, s = (t64(rng.standard_normal((3, 3, 4))) for _ in range(3))
    assert gradcheck(lambda: weighted_sum(fuse_sum(d, r, s)), [d, r, s], rtol=1e-5).passed
    p = CfsmParams(4, rng, reduction=2, dtype=np.float64)
    assert gradcheck(lambda: weighted_sum(cfsm(d, r, s, p)), [d, r, s]).passed
