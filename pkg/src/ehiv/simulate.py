"""Triangular data-generating process and the Monte Carlo harness.

The DGP is Y = b0 + b1 X + b2 D + (0.1 + 0.25|X| + lambda0 D) eps with
D = 1[Phi(eta) >= 0.2|X| + r0 Z], X ~ N(0,1), Z ~ Bernoulli(0.5), and
(eps, eta) bivariate standard normal with correlation rho0, independent of
(X, Z). Draws use numpy's default PCG64 generator; the draw order is X, Z,
then the (eps, eta) pair, so results are reproducible per (config, n, seed).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .errors import ConfigError, EstimationError
from .estimator import PipelineConfig, fit_iv, fit_ols, run_pipeline
from .first_stage import Sample

__all__ = ["DgpConfig", "McReport", "draw_sample", "run_monte_carlo", "summarize"]


@dataclass(frozen=True)
class DgpConfig:
    beta0: float = 0.0
    beta1: float = 1.0
    beta2: float = 1.0
    lambda0: float = 0.5   # endogenous-heteroskedasticity strength
    r0: float = 0.5        # complier mass
    rho0: float = 0.5      # error correlation

    def __post_init__(self):
        if not (self.lambda0 >= 0):
            raise ConfigError("lambda0 must be nonnegative")
        if not (0 < self.r0 <= 1):
            raise ConfigError("r0 must lie in (0, 1]")
        if not (abs(self.rho0) < 1):
            raise ConfigError("rho0 must lie in (-1, 1)")
        for name in ("beta0", "beta1", "beta2"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigError(f"{name} must be finite")

    @property
    def beta(self) -> np.ndarray:
        return np.array([self.beta0, self.beta1, self.beta2])


def draw_sample(cfg: DgpConfig, n: int, seed) -> Sample:
    """One draw from the triangular model; eps is retained on the Sample."""
    if n < 1:
        raise ConfigError("n must be at least 1")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    z = (rng.random(n) < 0.5).astype(float)
    g = rng.standard_normal((2, n))
    eps = g[0]
    eta = cfg.rho0 * g[0] + math.sqrt(1.0 - cfg.rho0 ** 2) * g[1]
    d = (ndtr(eta) >= 0.2 * np.abs(x) + cfg.r0 * z).astype(float)
    y = cfg.beta0 + cfg.beta1 * x + cfg.beta2 * d \
        + (0.1 + 0.25 * np.abs(x) + cfg.lambda0 * d) * eps
    return Sample(y, d, z, x, eps=eps)


@dataclass
class McReport:
    """Per-coefficient bias and dispersion summaries for one estimator."""

    estimator: str
    n: int
    reps: int
    mb: np.ndarray
    medb: np.ndarray
    sd: np.ndarray
    rmse: np.ndarray
    trim_fraction: float = float("nan")
    failures: int = 0

    def as_dict(self) -> dict:
        return {
            "estimator": self.estimator,
            "n": self.n,
            "reps": self.reps,
            "mb": self.mb.tolist(),
            "medb": self.medb.tolist(),
            "sd": self.sd.tolist(),
            "rmse": self.rmse.tolist(),
            "trim_fraction": self.trim_fraction,
            "failures": self.failures,
        }


def summarize(estimates, truth, *, estimator: str = "", n: int = 0,
              trim_fraction: float = float("nan"), failures: int = 0) -> McReport:
    """MB/MEDB/SD/RMSE of estimates (reps x k) against the true vector."""
    est = np.asarray(estimates, dtype=float)
    if est.ndim == 1:
        est = est[:, None]
    reps = est.shape[0]
    if reps < 2:
        raise EstimationError("need at least 2 replications to summarize")
    err = est - np.asarray(truth, dtype=float)[None, :]
    return McReport(
        estimator=estimator,
        n=n,
        reps=reps,
        mb=err.mean(axis=0),
        medb=np.median(err, axis=0),
        sd=err.std(axis=0, ddof=1),
        rmse=np.sqrt((err ** 2).mean(axis=0)),
        trim_fraction=trim_fraction,
        failures=failures,
    )


def run_monte_carlo(cfg: DgpConfig, n: int, reps: int,
                    config: PipelineConfig | None = None, seed=None, *,
                    estimators=("iv", "ehiv"), extras=None,
                    max_failure_frac: float = 0.1) -> dict[str, McReport]:
    """Replicate draw -> pipeline fit and summarize.

    Per-replication seeds are derived as (seed, rep-index), so any subset of
    replications can be reproduced independently and results do not depend on
    execution order. Replications failing with an estimation error are
    excluded from all summaries and counted; more than max_failure_frac of
    them failing aborts the run. `extras`, when given, is called as
    extras(rep, sample, fs, mask, fits) after each successful replication.
    """
    if reps < 1:
        raise ConfigError("reps must be at least 1")
    unknown = set(estimators) - {"iv", "ols", "ehiv"}
    if unknown:
        raise ConfigError(f"unknown estimators {sorted(unknown)}")

    need_first_stage = "ehiv" in estimators
    collected: dict[str, list[np.ndarray]] = {name: [] for name in estimators}
    trim_fracs: list[float] = []
    failures = 0

    for rep in range(reps):
        sample = draw_sample(cfg, n, [seed, rep])
        try:
            fits = {}
            fs = mask = None
            if need_first_stage:
                pipe = run_pipeline(sample, config)
                fs, mask = pipe.first_stage, pipe.mask
                fits["ehiv"] = pipe.fit
                trim_fracs.append(1.0 - mask.mean())
            if "iv" in estimators:
                fits["iv"] = fit_iv(sample)
            if "ols" in estimators:
                fits["ols"] = fit_ols(sample)
        except EstimationError:
            failures += 1
            if failures > max_failure_frac * reps:
                raise EstimationError(
                    f"{failures} of {rep + 1} replications failed; "
                    "the configuration is likely pathological")
            continue
        for name in estimators:
            collected[name].append(fits[name].beta)
        if extras is not None:
            extras(rep, sample, fs, mask, fits)

    truth = cfg.beta
    tf = float(np.mean(trim_fracs)) if trim_fracs else float("nan")
    reports = {}
    for name in estimators:
        reports[name] = summarize(np.vstack(collected[name]), truth,
                                  estimator=name, n=n,
                                  trim_fraction=tf, failures=failures)
    return reports
