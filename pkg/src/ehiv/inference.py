"""Plug-in asymptotic variance for the weighted-IV fit, plus a pairs bootstrap.

The sandwich has three pieces: the mask-averaged cross-moment matrix (shared
with the point estimator so the two agree exactly), the sample variance of
the per-observation weighted moment contributions, and a correction vector
zeta_hat that accounts for the first-stage estimation error in the weights.
Dropping zeta_hat gives the naive sandwich, which understates the variance;
both are reported so the correction's size is visible.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (ConfigError, DataError, EstimationError,
                     InstabilityError, RankError, TrimmingError)
from .estimator import EhivFit, PipelineConfig, masked_cross_moments, run_pipeline
from .first_stage import FirstStage, Sample, _as_bandwidth, _KernelWeights
from .kernels import KernelSpec

__all__ = ["OmegaEstimate", "compute_psi", "estimate_omega", "bootstrap_se"]


@dataclass
class OmegaEstimate:
    """Sandwich variance with first-stage correction.

    zeta_hat rows are populated on the trimmed-in set only (NaN elsewhere);
    se_k = sqrt(omega_kk / n_active). se_naive omits the zeta correction.
    """

    omega: np.ndarray
    se: np.ndarray
    se_naive: np.ndarray
    zeta_hat: np.ndarray
    psi_hat: np.ndarray
    n_active: int


def compute_psi(j: int, i: int, sample: Sample, fs: FirstStage) -> float:
    """Squared deviations of observation j's outcome from the complier means
    at X_i, standardized by the complier variances at X_i. psi_hat_i is the
    diagonal case j == i."""
    v0, v1 = fs.v0[i], fs.v1[i]
    if not (np.isfinite(v0) and np.isfinite(v1)) or v0 == 0.0 or v1 == 0.0:
        raise EstimationError(f"complier variances degenerate at observation {i}")
    d_j, y_j = sample.d[j], sample.y[j]
    return float(d_j * (y_j - fs.delta1[i]) ** 2 / v1
                 + (1.0 - d_j) * (y_j - fs.delta0[i]) ** 2 / v0)


def _psi_kernel_average(sample: Sample, fs: FirstStage) -> np.ndarray:
    """(1/(n-1)) sum_{j != i} psi_hat_{ji} K_h(X_j - X_i), expanded so the
    stored kernel columns cover it without another n^2 pass."""
    phi = fs.phi
    with np.errstate(divide="ignore", invalid="ignore"):
        treated = (phi["yy1"] - 2.0 * fs.delta1 * phi["y1"]
                   + fs.delta1 ** 2 * phi["d"]) / fs.v1
        control = (phi["yy0"] - 2.0 * fs.delta0 * phi["y0"]
                   + fs.delta0 ** 2 * (phi["one"] - phi["d"])) / fs.v0
    return treated + control


def estimate_omega(sample: Sample, fs: FirstStage, fit: EhivFit,
                   mask: np.ndarray, spec: KernelSpec, h) -> OmegaEstimate:
    """Sandwich variance of the weighted-IV coefficients.

    The bread is the same mask-averaged cross-moment matrix the point
    estimator inverts. The meat is the sample variance (denominator
    n_active - 1) of {W_i u_i / S_i - zeta_i} over the trimmed-in set, where
    zeta_i multiplies the double kernel average over (psi_i - psi_ji) and
    (Z_i - Z_j) — divided by twice the first-stage denominator — with the
    leave-one-out conditional moment vector scaled by |V_1(X_i)|^(-1/2).
    """
    if fs.phi is None or fs.weights is None:
        raise EstimationError(
            "plug-in variance requires the pooled first-stage form; "
            "use the bootstrap with arm-split bandwidths")
    mask = np.asarray(mask, dtype=bool)
    n_active = int(mask.sum())
    if n_active < 2:
        raise TrimmingError("variance estimation needs at least two "
                            "trimmed-in observations")
    n = sample.n
    h = _as_bandwidth(h, sample.d_x)
    phi = fs.phi

    # two new leave-one-out kernel columns: D u and Z D u
    du = sample.d * fit.u_hat
    cols = np.column_stack((du, sample.z * du))
    sums = fs.weights.loo_sums(cols) / ((n - 1) * np.prod(h))
    W = sample.instruments()
    with np.errstate(divide="ignore", invalid="ignore"):
        nw_du = sums[:, 0] / phi["one"]
        nw_zdu = sums[:, 1] / phi["one"]
        inv_root_v1 = 1.0 / np.sqrt(np.abs(fs.v1))
        moment = np.empty_like(W)
        moment[:, :-1] = W[:, :-1] * (nw_du * inv_root_v1)[:, None]
        moment[:, -1] = nw_zdu * inv_root_v1

        psi = (sample.d * (sample.y - fs.delta1) ** 2 / fs.v1
               + (1.0 - sample.d) * (sample.y - fs.delta0) ** 2 / fs.v0)
        gap = psi * phi["one"] - _psi_kernel_average(sample, fs)
        z_gap = sample.z * phi["one"] - phi["z"]
        scale = gap * z_gap / (2.0 * fs.phi_denom)
        zeta = moment * scale[:, None]

    if not np.all(np.isfinite(zeta[mask])):
        raise EstimationError("zeta correction is not finite on the "
                              "trimmed-in set")
    zeta_hat = np.full_like(zeta, np.nan)
    zeta_hat[mask] = zeta[mask]

    contrib = W * (fit.u_hat / fs.s)[:, None]
    A, _ = masked_cross_moments(sample, fs.s, mask)
    try:
        a_inv = np.linalg.inv(A)
    except np.linalg.LinAlgError as exc:
        raise RankError("singular cross-moment matrix in the variance "
                        "sandwich") from exc

    def _sandwich(g: np.ndarray) -> np.ndarray:
        v = np.cov(g, rowvar=False, ddof=1)
        omega = a_inv @ v @ a_inv.T
        return (omega + omega.T) / 2.0

    omega = _sandwich(contrib[mask] - zeta[mask])
    omega_naive = _sandwich(contrib[mask])
    se = np.sqrt(np.diag(omega) / n_active)
    se_naive = np.sqrt(np.diag(omega_naive) / n_active)
    psi_full = np.where(np.isfinite(psi), psi, np.nan)
    return OmegaEstimate(omega=omega, se=se, se_naive=se_naive,
                         zeta_hat=zeta_hat, psi_hat=psi_full,
                         n_active=n_active)


def _resample_indices(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.integers(0, n, size=n)


def bootstrap_se(sample: Sample, config: PipelineConfig | None = None,
                 B: int = 200, seed=None) -> np.ndarray:
    """Pairs-bootstrap standard errors of the pipeline coefficients.

    Each replicate resamples rows with replacement and reruns the full
    pipeline (bandwidth resolution, first stage, trimming, fit) on the
    resample; replicate b uses an independent RNG stream spawned from
    (seed, b), so results are reproducible given (seed, B) and replicates
    could run in parallel. Replicates that fail with rank, trimming, or
    degenerate-resample errors are skipped; more than 20% failures raises
    InstabilityError.
    """
    if B < 2:
        raise ConfigError("bootstrap needs at least B=2 replicates")
    config = config or PipelineConfig()
    streams = np.random.SeedSequence(seed).spawn(B)
    betas = []
    failures = 0
    for b in range(B):
        rng = np.random.default_rng(streams[b])
        idx = _resample_indices(rng, sample.n)
        try:
            boot = sample.take(idx)
            betas.append(run_pipeline(boot, config).fit.beta)
        except (EstimationError, DataError):
            failures += 1
    if failures > 0.2 * B or len(betas) < 2:
        raise InstabilityError(
            f"{failures} of {B} bootstrap replicates failed; the sample is "
            "too unstable for resampling inference")
    return np.std(np.vstack(betas), axis=0, ddof=1)
