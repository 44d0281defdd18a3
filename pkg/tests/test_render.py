import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lidarfield.beam import make_beam
from lidarfield.field import FunctionField, SlabField
from lidarfield.render import (OracleDecider, RaySamples, RenderConfig, beam_range_features, lidar_weights,
                               render_beam, render_first_range, render_scalar, render_second_range,
                               transmittance, weights_and_transmittance)
from lidarfield.types import Ray

XRAY = Ray(np.zeros(3), np.array([1.0, 0.0, 0.0]))
CFG = RenderConfig()


def walls(*starts, sigma=50.0, thickness=0.5, rho=0.5, drop=0.0):
    return SlabField([(s, s + thickness, sigma, rho, drop) for s in starts])


def dense_window_oracle(field, center, cfg, n):
    """Normalized expected range over [center − ε, center + ε] with n segments."""
    b = np.linspace(center - cfg.window, center + cfg.window, n + 1)
    s = RaySamples.from_field(field, XRAY, b)
    w = lidar_weights(s, cfg.weight_mode)
    return float(np.sum(w * s.midpoints) / w.sum())


def random_samples(rng, n=40):
    b = np.concatenate([[0.0], np.cumsum(rng.uniform(0.01, 0.5, n))])
    return RaySamples(b, rng.exponential(2.0, n) * (rng.random(n) < 0.5), rng.random(n), rng.random(n))


def test_transmittance_examples(rng):
    s = RaySamples(np.linspace(0, 2, 11), np.zeros(10))
    np.testing.assert_array_equal(transmittance(s, np.arange(11)), 1.0)
    s = RaySamples(np.linspace(0, 2, 11), np.full(10, 0.5))
    assert transmittance(s, 10) == pytest.approx(math.exp(-1), abs=1e-12)
    s = random_samples(rng)
    for a, b in [(5, 17), (0, 40), (12, 12)]:
        t_ab = math.exp(-np.sum(s.sigma[a:b] * s.deltas[a:b]))
        assert transmittance(s, b) == pytest.approx(transmittance(s, a) * t_ab, rel=1e-12)
    assert np.all(np.diff(transmittance(s, np.arange(41))) <= 0)


def test_weight_examples():
    assert not lidar_weights(RaySamples([0, 1, 2], [0.0, 0.0])).any()
    w = lidar_weights(RaySamples([0, 0.5], [1.0]))
    assert w[0] == pytest.approx(0.63212, abs=1e-5)
    w = lidar_weights(RaySamples([0, 1.0], [20.0]))
    assert w[0] == pytest.approx(1.0, abs=1e-15)


@given(st.integers(0, 2 ** 31), st.sampled_from(["active", "passive"]))
def test_telescoping_identity(seed, mode):
    s = random_samples(np.random.default_rng(seed))
    k = 2.0 if mode == "active" else 1.0
    w, T = weights_and_transmittance(s.sigma, s.deltas, k)
    assert abs(w.sum() + T[-1] - 1.0) <= 1e-12
    # product form: w_j = κα_j Π(1 − κα_k) with κα = 1 − e^{−κσδ}
    a = -np.expm1(-k * s.sigma * s.deltas)
    prod = np.concatenate([[1.0], np.cumprod(1 - a)[:-1]])
    np.testing.assert_allclose(w, a * prod, rtol=1e-12, atol=1e-15)
    assert np.all((w >= 0) & (w < 1))


@given(st.integers(0, 2 ** 31), st.integers(0, 39), st.floats(0.01, 10.0))
def test_monotone_occlusion(seed, m, bump):
    s = random_samples(np.random.default_rng(seed))
    w0 = lidar_weights(s)
    sig = s.sigma.copy()
    sig[m] += bump
    w1 = lidar_weights(RaySamples(s.boundaries, sig))
    assert np.all(w1[m + 1:] <= w0[m + 1:] + 1e-15)


def test_render_scalar_examples():
    s = RaySamples(np.arange(5.0), np.ones(4), np.full(4, 0.3), np.zeros(4))
    assert render_scalar(s, [0.1, 0.2, 0.3, 0.4]) == pytest.approx(0.3)
    s = RaySamples(np.arange(4.0), np.ones(3), [0.1, 0.8, 0.4], [0.0, 0.0, 1.0])
    assert render_scalar(s, [0, 1, 0]) == pytest.approx(0.8)
    assert render_scalar(s, [0, 0, 1], "drop") == 1.0
    s = RaySamples([0, 1, 2], [1, 1], [0.2, 0.6])
    assert render_scalar(s, [0.25, 0.75]) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        render_scalar(RaySamples([0, 1], [1.0]), [1.0])


def test_range_features():
    assert beam_range_features([3.0, 3.0, 3.0]) == (0.0, 0.0)
    assert beam_range_features([10, 10, 20, 20]) == pytest.approx((5.0, 10.0))
    with pytest.raises(ValueError):
        beam_range_features([10.0, np.nan])


def test_first_range_single_wall():
    f = walls(15.0)
    out = render_first_range(f, XRAY, CFG)
    assert not out.fallback
    zp = 0.5 + (np.argmax(out.coarse_weights) + 0.5) * (CFG.max_range - CFG.min_range) / CFG.coarse_samples
    oracle = dense_window_oracle(f, zp, CFG, 10 * CFG.fine_samples)
    tol = 2 * CFG.window / CFG.fine_samples
    assert abs(out.range - oracle) <= tol
    assert abs(out.range - 15.0) <= tol
    assert out.reflectance == pytest.approx(0.5)


def test_first_range_empty_and_two_walls():
    out = render_first_range(SlabField([]), XRAY, CFG)
    assert out.range is None and out.drop == 1.0
    out = render_first_range(walls(10.0, 20.0), XRAY, CFG)
    assert abs(out.range - 10.0) < 2 * CFG.window / CFG.fine_samples


def test_fallback_on_diffuse_field():
    f = SlabField([(0.0, 200.0, 0.002, 0.5, 0.0)])
    out = render_first_range(f, XRAY, CFG)
    assert out.fallback
    np.testing.assert_allclose(out.range, np.sum(out.coarse_weights * np.linspace(0.5, 100, 769)[:-1]
                                                 + out.coarse_weights * 0.5 * 99.5 / 768), rtol=1e-9)


def test_second_range_examples():
    assert abs(render_second_range(walls(10.0, 20.0), XRAY, 10.0, CFG) - 20.0) < 0.05
    assert render_second_range(walls(10.0), XRAY, 10.0, CFG) is None
    assert render_second_range(walls(10.0, 11.0), XRAY, 10.0, CFG) is None


@given(st.floats(5.0, 60.0), st.floats(0.05, 10.0), st.floats(0.8, 3.0))  # slabs span >= 2 coarse bins
def test_single_surface_never_gives_second(z, xi, thick):
    from dataclasses import replace
    cfg = replace(RenderConfig(coarse_samples=256, fine_samples=32), buffer=xi)
    f = walls(z, thickness=thick)
    first = render_first_range(f, XRAY, cfg).range
    assert render_second_range(f, XRAY, first, cfg) is None


def test_active_passive_argmax_agree():
    for z in (7.3, 15.0, 42.1):
        f = walls(z)
        b = np.linspace(0.5, 100, 2001)
        s = RaySamples.from_field(f, XRAY, b)
        assert np.argmax(lidar_weights(s, "active")) == np.argmax(lidar_weights(s, "passive"))


def test_resolution_convergence():
    def fn(p):
        x = p[..., 0]
        return 4.0 * np.exp(-0.5 * ((x - 20.0) / 0.3) ** 2), np.full(x.shape, 0.5), np.zeros(x.shape)

    f = FunctionField(fn)
    errs = []
    base = render_first_range(f, XRAY, RenderConfig(coarse_samples=512, fine_samples=64))
    zp = 0.5 + (np.argmax(base.coarse_weights) + 0.5) * 99.5 / 512
    oracle = dense_window_oracle(f, zp, CFG, 200000)
    for nf in (64, 128, 256):
        out = render_first_range(f, XRAY, RenderConfig(coarse_samples=512, fine_samples=nf))
        errs.append(abs(out.range - oracle))
    assert errs[0] >= errs[1] >= errs[2]


def _edge_field(p):
    x, y = p[..., 0], p[..., 1]
    near = (x >= 10.0) & (x < 10.5) & (y <= 0.0)
    far = (x >= 20.0) & (x < 20.5)
    sigma = np.where(near | far, 50.0, 0.0)
    return sigma, np.full(x.shape, 0.5), np.zeros(x.shape)


def test_beam_flat_wall_matches_central():
    f = walls(12.0)
    obs = render_beam(f, make_beam(XRAY, 2e-3, 37), CFG, OracleDecider([True]))
    central = render_first_range(f, XRAY, CFG).range
    assert abs(obs.first_range - central) < 0.01
    assert not obs.two_return  # nothing past the wall


def test_beam_edge_with_oracle_decider():
    f = FunctionField(_edge_field)
    beam = make_beam(XRAY, 2e-3, 37)
    obs = render_beam(f, beam, CFG, OracleDecider([True]))
    assert obs.two_return
    assert abs(obs.first_range - 10.0) < 0.05 and abs(obs.second_range - 20.0) < 0.05
    single = render_beam(f, beam, CFG, OracleDecider([False]))
    assert not single.two_return


def test_beam_drop_channel():
    obs = render_beam(walls(12.0, drop=1.0), make_beam(XRAY, 2e-3, 7), CFG)
    assert obs.drop
    obs = render_beam(walls(12.0, drop=0.0), make_beam(XRAY, 2e-3, 7), CFG)
    assert not obs.drop


def test_config_round_trip_and_validation():
    c = RenderConfig(coarse_samples=100, fine_samples=10, weight_mode="passive")
    assert RenderConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ValueError):
        RenderConfig(coarse_samples=8, fine_samples=16)
    with pytest.raises(ValueError):
        RenderConfig(confidence=1.0)
    with pytest.raises(ValueError):
        RenderConfig.from_dict({"bogus": 1})
