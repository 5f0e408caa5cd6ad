"""Permutation test for instrument-arm equality of squared-residual surfaces."""
from __future__ import annotations

import numpy as np
import pytest
from numpy.random import default_rng

import ehiv.exo_test as exo_mod
from ehiv import (BandwidthSpec, ConfigError, DgpConfig, EstimationError,
                  KernelSpec, Sample, draw_sample, resolve_bandwidth)
from ehiv import test_exogenous_heteroskedasticity as exo_fn
from ehiv.estimator import LinearFit


def _run(sample, B=99, seed=0, **kw):
    h = resolve_bandwidth(sample.x, BandwidthSpec())
    return exo_fn(sample, KernelSpec(), h, B=B, seed=seed, **kw)


def test_statistic_is_mean_squared_gap():
    sample = draw_sample(DgpConfig(), 600, seed=1)
    res = _run(sample)
    assert res.statistic == pytest.approx(float(np.mean(res.per_x_gap ** 2)),
                                          rel=1e-12)
    assert res.statistic >= 0
    assert res.bootstrap_reps == 99
    assert res.per_x_gap.size <= sample.n


def test_exact_null_when_residual_scale_is_flat(monkeypatch):
    # equal squared residuals everywhere: every arm mean is the same constant,
    # so the observed and all permuted statistics are exactly zero
    rng = default_rng(2)
    n = 120
    x = np.repeat(np.linspace(-2, 2, n // 4), 4)
    z = np.tile([1.0, 1.0, 0.0, 0.0], n // 4)
    d = z.copy()
    y = rng.standard_normal(n)
    sample = Sample(y=y, d=d, z=z, x=x)
    flat = np.tile([0.5, -0.5], n // 2)
    monkeypatch.setattr(
        exo_mod, "fit_iv",
        lambda s: LinearFit(beta=np.zeros(3), residuals=flat, method="iv"))
    res = _run(sample, B=199)
    assert res.statistic == 0.0
    assert res.p_value == 1.0


def test_instrument_relabel_invariance():
    # swapping the arm labels flips each gap's sign; the squared statistic and
    # the within-cell permutation distribution are unchanged
    sample = draw_sample(DgpConfig(), 900, seed=3)
    flipped = Sample(y=sample.y, d=sample.d, z=1.0 - sample.z, x=sample.x)
    r1, r2 = _run(sample, B=99, seed=7), _run(flipped, B=99, seed=7)
    assert r2.statistic == pytest.approx(r1.statistic, rel=1e-9)
    assert np.allclose(r2.per_x_gap, -r1.per_x_gap, rtol=1e-6, atol=1e-12)
    assert abs(r1.p_value - r2.p_value) <= 2.0 / (99 + 1)


def test_outcome_location_shift_invariance():
    sample = draw_sample(DgpConfig(), 900, seed=4)
    shifted = Sample(y=sample.y + 5.0, d=sample.d, z=sample.z, x=sample.x)
    r1, r2 = _run(sample, B=99, seed=5), _run(shifted, B=99, seed=5)
    assert r2.statistic == pytest.approx(r1.statistic, rel=1e-9)
    assert abs(r1.p_value - r2.p_value) <= 2.0 / (99 + 1)


def test_deterministic_given_seed():
    sample = draw_sample(DgpConfig(), 500, seed=6)
    r1, r2 = _run(sample, seed=11), _run(sample, seed=11)
    assert r1.statistic == r2.statistic
    assert r1.p_value == r2.p_value
    assert np.array_equal(r1.per_x_gap, r2.per_x_gap)


def test_rejects_bad_configuration():
    sample = draw_sample(DgpConfig(), 300, seed=8)
    h = resolve_bandwidth(sample.x, BandwidthSpec())
    with pytest.raises(ConfigError):
        exo_fn(sample, KernelSpec(), h, B=50)
    with pytest.raises(ConfigError):
        exo_fn(sample, KernelSpec(), h, B=99, cells=0)


def test_empty_interior_raises():
    sample = draw_sample(DgpConfig(), 300, seed=9)
    with pytest.raises(EstimationError):
        _run(sample, boundary_radius=1e6)


def test_null_design_yields_moderate_p():
    sample = draw_sample(DgpConfig(lambda0=0.0), 800, seed=0)
    res = _run(sample, seed=0)
    assert res.statistic > 0
    assert res.p_value > 0.05


def test_detects_treatment_scale_shift():
    # treatment moves the noise scale, and take-up responds to Z, so squared
    # residual surfaces separate by arm
    sample = draw_sample(DgpConfig(), 3000, seed=0)
    res = _run(sample, seed=0)
    assert res.p_value <= 0.05
