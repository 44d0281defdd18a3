import numpy as np
import pytest
from hypothesis import given, strategies as st

from lidarfield.field import VoxelGridField, inverse_softplus, logit, softplus


def small_field(rng, res=(4, 5, 3)):
    return VoxelGridField(([-1, -2, 0], [1, 2, 1]), res, params=rng.normal(0, 1.5, (3,) + res))


def test_defaults_and_validation():
    f = VoxelGridField(([0, 0, 0], [1, 1, 1]), (2, 2, 2))
    s, r, d = f.sample(np.array([[0.5, 0.5, 0.5]]))
    assert s[0] == pytest.approx(0.01) and r[0] == pytest.approx(0.5) and d[0] == pytest.approx(0.12)
    with pytest.raises(ValueError):
        VoxelGridField(([0, 0, 0], [1, 0, 1]), (2, 2, 2))
    with pytest.raises(ValueError):
        VoxelGridField(([0, 0, 0], [1, 1, 1]), (1, 2, 2))
    with pytest.raises(ValueError):
        VoxelGridField(([0, 0, 0], [1, 1, 1]), (2, 2, 2), params=np.zeros((3, 2, 2)))


def test_activation_inverses():
    y = np.array([1e-6, 0.01, 1.0, 30.0])
    np.testing.assert_allclose(softplus(inverse_softplus(y)), y, rtol=1e-10)
    from scipy.special import expit
    p = np.array([1e-4, 0.3, 0.9])
    np.testing.assert_allclose(expit(logit(p)), p, rtol=1e-12)


def test_vertices_reproduce_parameters(rng):
    f = small_field(rng)
    ii, jj, kk = np.meshgrid(*[np.arange(n) for n in f.resolution], indexing="ij")
    pts = f.lo + np.stack([ii, jj, kk], -1) * f.cell
    s, r, d = f.sample(pts)
    np.testing.assert_allclose(s, f.channel("sigma"), rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(r, f.channel("reflectance"), rtol=1e-12)
    np.testing.assert_allclose(d, f.channel("drop"), rtol=1e-12)


def test_trilinear_matches_reference(rng):
    f = small_field(rng)
    pts = rng.uniform(f.lo, f.hi, (50, 3))
    raw = f.evaluate(pts)[3].raw
    u = (pts - f.lo) / f.cell
    i0 = np.clip(np.floor(u).astype(int), 0, np.array(f.resolution) - 2)
    t = u - i0
    ref = np.zeros((3, 50))
    for corner in np.ndindex(2, 2, 2):
        c = np.array(corner)
        w = np.prod(np.where(c, t, 1 - t), axis=1)
        ix = i0 + c
        ref += w * f.params[:, ix[:, 0], ix[:, 1], ix[:, 2]]
    np.testing.assert_allclose(raw, ref, rtol=1e-12, atol=1e-12)


def test_outside_is_empty_and_gradient_free(rng):
    f = small_field(rng)
    pts = np.array([[5.0, 0, 0.5], [0, -2.5, 0.5], [0, 0, -0.01], [np.nan, 0, 0]])
    s, r, d, cache = f.evaluate(pts)
    np.testing.assert_array_equal(s, 0.0)
    np.testing.assert_array_equal(r, 0.0)
    np.testing.assert_array_equal(d, 1.0)
    g = f.vjp(cache, np.ones(4), np.ones(4), np.ones(4))
    assert not g.any()


@given(st.integers(0, 2 ** 31))
def test_vjp_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    f = VoxelGridField(([0, 0, 0], [1, 1, 1]), (3, 3, 3), params=rng.normal(0, 1, (3, 3, 3, 3)))
    pts = rng.uniform(-0.1, 1.1, (12, 3))
    gs, gr, gd = rng.normal(size=(3, 12))

    def objective(ff):
        s, r, d, _ = ff.evaluate(pts)
        return float(gs @ s + gr @ r + gd @ d)

    grad = f.vjp(f.evaluate(pts)[3], gs, gr, gd)
    h = 1e-6
    for i in rng.choice(f.params.size, 20, replace=False):
        fp, fm = f.copy(), f.copy()
        fp.params.flat[i] += h
        fm.params.flat[i] -= h
        num = (objective(fp) - objective(fm)) / (2 * h)
        assert abs(num - grad.flat[i]) <= 1e-6 * max(1.0, abs(num))
