"""Simulated design and the Monte Carlo harness."""
from __future__ import annotations

import numpy as np
import pytest
from numpy.random import default_rng
from scipy.special import ndtr

from ehiv import (ConfigError, DgpConfig, EstimationError, PipelineConfig,
                  TrimmingSpec, draw_sample, run_monte_carlo, summarize)


def test_draw_deterministic_in_seed():
    cfg = DgpConfig()
    a, b = draw_sample(cfg, 500, seed=1), draw_sample(cfg, 500, seed=1)
    c = draw_sample(cfg, 500, seed=2)
    for name in ("y", "d", "z", "x", "eps"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    assert not np.array_equal(a.y, c.y)


def test_draw_replays_from_generator_state():
    # the documented draw order (X, then Z, then the noise pair) pins every
    # array on the sample to the generator stream
    cfg = DgpConfig()
    n, seed = 50_000, 42
    s = draw_sample(cfg, n, seed=seed)
    rng = default_rng(seed)
    x = rng.standard_normal(n)
    z = (rng.random(n) < 0.5).astype(float)
    g = rng.standard_normal((2, n))
    eta = cfg.rho0 * g[0] + np.sqrt(1.0 - cfg.rho0 ** 2) * g[1]
    assert np.array_equal(s.x[:, 0], x)
    assert np.array_equal(s.z, z)
    assert np.array_equal(s.eps, g[0])
    assert np.array_equal(s.d, (ndtr(eta) >= 0.2 * np.abs(x) + cfg.r0 * z).astype(float))


def test_sample_moments_match_design():
    cfg = DgpConfig()
    n, seed = 1_000_000, 7
    s = draw_sample(cfg, n, seed=seed)
    assert abs(s.x.mean()) < 0.005
    assert s.x.var() == pytest.approx(1.0, abs=0.01)
    assert s.z.mean() == pytest.approx(0.5, abs=0.005)
    rng = default_rng(seed)
    rng.standard_normal(n)
    rng.random(n)
    g = rng.standard_normal((2, n))
    eta = cfg.rho0 * g[0] + np.sqrt(1.0 - cfg.rho0 ** 2) * g[1]
    assert eta.var() == pytest.approx(1.0, abs=0.01)
    assert np.corrcoef(s.eps, eta)[0, 1] == pytest.approx(cfg.rho0, abs=0.01)


def test_instrument_only_discourages_take_up():
    # no defiers: raising Z can only switch D from 1 to 0 at fixed (X, eta)
    cfg = DgpConfig()
    n, seed = 200_000, 9
    s = draw_sample(cfg, n, seed=seed)
    rng = default_rng(seed)
    x = rng.standard_normal(n)
    rng.random(n)
    g = rng.standard_normal((2, n))
    eta = cfg.rho0 * g[0] + np.sqrt(1.0 - cfg.rho0 ** 2) * g[1]
    d0 = (ndtr(eta) >= 0.2 * np.abs(x)).astype(float)
    d1 = (ndtr(eta) >= 0.2 * np.abs(x) + cfg.r0).astype(float)
    assert (d1 <= d0).all()
    assert np.array_equal(s.d, np.where(s.z == 1.0, d1, d0))
    assert (d0 != d1).mean() > 0.3  # the instrument moves a real complier mass


def test_arm_variances_equal_without_treatment_scale_shift():
    s = draw_sample(DgpConfig(lambda0=0.0), 400_000, seed=10)
    near = np.abs(s.x[:, 0]) < 0.1
    resid = s.y - s.x[:, 0] - s.d  # defaults: beta = (0, 1, 1)
    sd1 = resid[near & (s.d == 1.0)].std()
    sd0 = resid[near & (s.d == 0.0)].std()
    assert sd1 == pytest.approx(sd0, rel=0.15)
    assert sd0 == pytest.approx(0.1, rel=0.15)


def test_dgp_config_validation():
    with pytest.raises(ConfigError):
        DgpConfig(rho0=1.0)
    with pytest.raises(ConfigError):
        DgpConfig(lambda0=-0.1)
    with pytest.raises(ConfigError):
        DgpConfig(r0=0.0)
    with pytest.raises(ConfigError):
        DgpConfig(beta1=float("inf"))
    with pytest.raises(ConfigError):
        draw_sample(DgpConfig(), 0, seed=1)


def test_summarize_two_point_hand_values():
    beta = np.array([0.0, 1.0, 1.0])
    a = 0.2
    rep = summarize(np.vstack([beta + a, beta - a]), beta)
    assert np.allclose(rep.mb, 0.0, atol=1e-12)
    assert np.allclose(rep.sd, a * np.sqrt(2.0), atol=1e-12)
    assert np.allclose(rep.rmse, a, atol=1e-12)
    assert np.allclose(rep.medb, 0.0, atol=1e-12)


def test_summarize_rmse_identity():
    rng = default_rng(11)
    est = rng.standard_normal((500, 3)) + np.array([0.0, 1.0, 1.0])
    rep = summarize(est, np.array([0.0, 1.0, 1.0]))
    m = rep.reps
    lhs = rep.rmse ** 2
    rhs = rep.mb ** 2 + rep.sd ** 2 * (m - 1) / m
    assert np.allclose(lhs, rhs, atol=1e-10)
    # the published-summary combination at m = 500
    assert np.sqrt(0.0099 ** 2 + 0.0341 ** 2 * 499 / 500) == pytest.approx(
        0.0354, abs=2e-4)


def test_summarize_needs_replication():
    with pytest.raises(EstimationError):
        summarize(np.ones((1, 3)), np.ones(3))


def test_monte_carlo_deterministic_and_complete():
    cfg = DgpConfig()
    kw = dict(seed=21, estimators=("iv", "ols", "ehiv"))
    r1 = run_monte_carlo(cfg, 300, 5, **kw)
    r2 = run_monte_carlo(cfg, 300, 5, **kw)
    assert set(r1) == {"iv", "ols", "ehiv"}
    for name in r1:
        assert np.array_equal(r1[name].mb, r2[name].mb)
        assert r1[name].reps == 5
        assert r1[name].n == 300
        assert r1[name].failures == 0
    assert 0.0 <= r1["ehiv"].trim_fraction < 1.0
    assert np.isnan(run_monte_carlo(cfg, 300, 3, seed=1,
                                    estimators=("iv",))["iv"].trim_fraction)


def test_monte_carlo_rejects_unknown_estimator():
    with pytest.raises(ConfigError):
        run_monte_carlo(DgpConfig(), 100, 2, estimators=("iv", "gmm"))
    with pytest.raises(ConfigError):
        run_monte_carlo(DgpConfig(), 100, 0)


def test_monte_carlo_aborts_when_replications_keep_failing():
    # an unattainable covariance floor trims every observation in every rep
    config = PipelineConfig(trimming=TrimmingSpec(tau=0.9, kappa0=0.1,
                                                  kappa1=0.1))
    with pytest.raises(EstimationError):
        run_monte_carlo(DgpConfig(), 200, 5, config=config, seed=3)


def test_monte_carlo_extras_hook_sees_each_replication():
    seen = []

    def grab(rep, sample, fs, mask, fits):
        seen.append((rep, sample.n, fits["ehiv"].beta.copy(), mask.sum()))

    run_monte_carlo(DgpConfig(), 250, 4, seed=5, estimators=("ehiv",),
                    extras=grab)
    assert [r for r, *_ in seen] == [0, 1, 2, 3]
    assert all(n == 250 for _, n, *_ in seen)
    assert all(m > 0 for *_, m in seen)
