"""Second-stage estimators and treatment-effect functionals.

fit_iv / fit_ols are the unweighted baselines; fit_ehiv solves the trimmed,
S-weighted instrument moment conditions in closed form. The remaining
operations (variance surface, variance effects, ITEs and their conditional
density, ATT, counterfactuals, propensities, adjusted-LATE diagnostics) are
plug-ins built from a fitted first stage.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EstimationError, RankError, TrimmingError
from .first_stage import (FirstStage, Sample, TrimmingSpec, _as_bandwidth,
                          _as_matrix, _KernelWeights, estimate_first_stage,
                          estimate_first_stage_at, trim_mask)
from .kernels import BandwidthSpec, KernelSpec, kernel_profile, resolve_bandwidth

__all__ = [
    "LinearFit",
    "EhivFit",
    "PipelineConfig",
    "PipelineResult",
    "run_pipeline",
    "fit_iv",
    "fit_ols",
    "fit_ehiv",
    "estimate_sigma",
    "variance_effects",
    "ite_estimates",
    "default_ite_bandwidths",
    "ite_density",
    "estimate_att",
    "counterfactual",
    "estimate_propensity",
    "adjusted_late_weights",
]


@dataclass
class LinearFit:
    beta: np.ndarray
    residuals: np.ndarray
    method: str  # "ols" or "iv"


@dataclass
class EhivFit:
    """Weighted-IV fit; residuals are computed on all observations."""

    beta: np.ndarray
    u_hat: np.ndarray
    active_mask: np.ndarray
    omega: np.ndarray | None = None
    se: np.ndarray | None = None
    se_naive: np.ndarray | None = None


def _solve(G: np.ndarray, g: np.ndarray, what: str) -> np.ndarray:
    try:
        beta = np.linalg.solve(G, g)
    except np.linalg.LinAlgError as exc:
        raise RankError(f"singular {what}") from exc
    if not np.all(np.isfinite(beta)):
        raise RankError(f"non-finite solution from {what}")
    return beta


def fit_iv(sample: Sample) -> LinearFit:
    """Exactly identified IV: [sum W_i (X_i', D_i)]^(-1) sum W_i Y_i."""
    R = sample.regressors()
    W = sample.instruments()
    beta = _solve(W.T @ R, W.T @ sample.y, "instrument cross-moment matrix")
    return LinearFit(beta, sample.y - R @ beta, "iv")


def fit_ols(sample: Sample) -> LinearFit:
    """Least squares of Y on (X, D)."""
    R = sample.regressors()
    beta = _solve(R.T @ R, R.T @ sample.y, "design matrix")
    return LinearFit(beta, sample.y - R @ beta, "ols")


def masked_cross_moments(sample: Sample, s: np.ndarray, mask: np.ndarray):
    """E_n[(X',D)'W'/S] and E_n[W Y / S], averaged over the trimmed-in set.

    Shared by fit_ehiv and the variance estimator so the two agree exactly.
    Returns (A, b) with A[a, b] = avg of r_a w_b / s and b = avg of w y / s.
    """
    n_active = int(mask.sum())
    if n_active == 0:
        raise TrimmingError("no trimmed-in observations")
    sw = s[mask]
    if not np.all(np.isfinite(sw)) or np.any(sw <= 0):
        raise TrimmingError("weights S must be positive and finite on the mask")
    R = sample.regressors()[mask]
    W = sample.instruments()[mask] / sw[:, None]
    A = (R.T @ W) / n_active
    b = (W.T @ sample.y[mask]) / n_active
    return A, b


def fit_ehiv(sample: Sample, fs: FirstStage, mask: np.ndarray) -> EhivFit:
    """Closed-form S-weighted IV on the trimmed-in observations."""
    A, b = masked_cross_moments(sample, fs.s, mask)
    beta = _solve(A.T, b, "weighted cross-moment matrix")
    u_hat = sample.y - sample.regressors() @ beta
    return EhivFit(beta=beta, u_hat=u_hat, active_mask=np.asarray(mask, bool))


@dataclass(frozen=True)
class PipelineConfig:
    """Everything needed to rerun the estimator on a new sample."""

    kernel: KernelSpec = KernelSpec()
    bandwidth: BandwidthSpec = BandwidthSpec.silverman()
    trimming: TrimmingSpec = TrimmingSpec()


@dataclass
class PipelineResult:
    fit: EhivFit
    first_stage: FirstStage
    mask: np.ndarray
    bandwidth: np.ndarray


def run_pipeline(sample: Sample, config: PipelineConfig | None = None) -> PipelineResult:
    """Resolve the bandwidth, estimate the first stage, trim, and fit.

    The per-arm bandwidth rule switches the first stage to its
    arm-split form; the trimming box then uses the across-arm mean
    bandwidth per axis.
    """
    config = config or PipelineConfig()
    arm_counts = np.array([int(np.sum(sample.z == 0.0)), int(np.sum(sample.z == 1.0))])
    h = resolve_bandwidth(sample.x, config.bandwidth, arm_counts=arm_counts)
    split = h.ndim == 2
    fs = estimate_first_stage(sample, config.kernel, h, split_by_arm=split)
    h_box = h.mean(axis=0) if split else h
    mask = trim_mask(fs, config.trimming, sample.x, h_box)
    fit = fit_ehiv(sample, fs, mask)
    return PipelineResult(fit=fit, first_stage=fs, mask=mask, bandwidth=h)


def _nw_usq_at(x0, sample: Sample, u_hat: np.ndarray, spec: KernelSpec,
               h: np.ndarray):
    """Pooled-denominator kernel means of D u^2 and (1-D) u^2 at points x0."""
    w = _KernelWeights(sample.x, h, spec.family, cache_bytes=0)
    usq = u_hat ** 2
    cols = np.column_stack((sample.d * usq, (1.0 - sample.d) * usq,
                            np.ones(sample.n)))
    sums = w.sums_at(_as_matrix(x0), cols)
    den = sums[:, 2]
    if np.any(den <= 0):
        raise EstimationError("kernel mass at x is not positive; "
                              "x is outside the effective support")
    return sums[:, 0] / den, sums[:, 1] / den


def estimate_sigma(d: int, x, sample: Sample, fs: FirstStage, fit: EhivFit,
                   spec: KernelSpec, h, trim: TrimmingSpec | None = None) -> float:
    """sigma_hat(d, x): square root of the reconstructed variance surface.

    sigma^2(d,x) = |V_d|/|V_1| * NW(D u^2 at x) + |V_d|/|V_0| * NW((1-D) u^2
    at x), with one pooled kernel denominator. Both kernel means use squared
    residuals; the ratio structure means only the opposite arm's V enters a
    denominator. Higher-order kernels can push the plug-in slightly negative
    in thin regions; the radicand is floored at zero. When a TrimmingSpec is
    given, the trimming floors and inner-support box are enforced at x.
    """
    if d not in (0, 1):
        raise EstimationError("treatment arm d must be 0 or 1")
    h = _as_bandwidth(h, sample.d_x)
    x0 = _as_matrix(x)
    pt = estimate_first_stage_at(x0, sample, spec, h)
    v0, v1 = pt["v0"][0], pt["v1"][0]
    if trim is not None:
        lo = sample.x.min(axis=0) + trim.boundary_radius * h
        hi = sample.x.max(axis=0) - trim.boundary_radius * h
        ok = (abs(pt["cov_dz"][0]) >= trim.tau
              and abs(v0) >= trim.kappa0 ** 2 and abs(v1) >= trim.kappa1 ** 2
              and bool(np.all((x0[0] >= lo) & (x0[0] <= hi))))
        if not ok:
            raise TrimmingError(f"trimming floors violated at x={x}")
    if not (np.isfinite(v0) and np.isfinite(v1)) or v0 == 0 or v1 == 0:
        raise EstimationError(f"variance estimates degenerate at x={x}")
    nw1, nw0 = _nw_usq_at(x0, sample, fit.u_hat, spec, h)
    vd = v1 if d == 1 else v0
    rad = abs(vd) / abs(v1) * nw1[0] + abs(vd) / abs(v0) * nw0[0]
    return float(np.sqrt(max(rad, 0.0)))


@dataclass
class VarianceEffects:
    """Per-observation variance effects (NaN at trimmed-out rows) and MVE."""

    delta_sigma: np.ndarray
    mve: float
    sigma1: np.ndarray | None = None
    sigma0: np.ndarray | None = None


def variance_effects(sample: Sample, fs: FirstStage, fit: EhivFit,
                     mask: np.ndarray, spec: KernelSpec, h) -> VarianceEffects:
    """delta_sigma(X_i) = sigma_hat(1, X_i) - sigma_hat(0, X_i) on the mask;
    MVE is the median over masked entries (midpoint for even counts)."""
    if not mask.any():
        raise TrimmingError("no trimmed-in observations")
    h = _as_bandwidth(h, sample.d_x)
    w = fs.weights if fs.weights is not None else _KernelWeights(
        sample.x, h, spec.family)
    usq = fit.u_hat ** 2
    cols = np.column_stack((sample.d * usq, (1.0 - sample.d) * usq,
                            np.ones(sample.n)))
    sums = w.full_sums(cols)
    with np.errstate(divide="ignore", invalid="ignore"):
        nw1 = sums[:, 0] / sums[:, 2]
        nw0 = sums[:, 1] / sums[:, 2]
        ratio10 = np.abs(fs.v1) / np.abs(fs.v0)
        s1 = np.sqrt(np.clip(nw1 + ratio10 * nw0, 0.0, None))
        s0 = np.sqrt(np.clip(nw1 / ratio10 + nw0, 0.0, None))
    delta = np.where(mask, s1 - s0, np.nan)
    mve = float(np.median(delta[mask]))
    return VarianceEffects(delta_sigma=delta, mve=mve,
                           sigma1=np.where(mask, s1, np.nan),
                           sigma0=np.where(mask, s0, np.nan))


def ite_estimates(sample: Sample, fs: FirstStage, fit: EhivFit,
                  mask: np.ndarray) -> np.ndarray:
    """ITE_i = beta2 + (|V_1|^(1/2) - |V_0|^(1/2)) / S_i * u_i.

    Returned for every row; trimmed-out rows are NaN.
    """
    if not mask.any():
        raise TrimmingError("no trimmed-in observations")
    beta2 = fit.beta[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        spread = (np.sqrt(np.abs(fs.v1)) - np.sqrt(np.abs(fs.v0))) / fs.s
    out = beta2 + spread * fit.u_hat
    return np.where(mask, out, np.nan)


def default_ite_bandwidths(ites: np.ndarray, X, mask: np.ndarray):
    """Oversmoothed defaults: h_f = 1.06 sd_pooled m^(-1/(d+6)) over the
    (X, ITE) pseudo-sample and h_X = 1.06 sd(X) m^(-1/(d+4)), m = mask size."""
    X = _as_matrix(X)
    m = int(mask.sum())
    d = X.shape[1]
    sds = np.append(X[mask].std(axis=0, ddof=1), np.std(ites[mask], ddof=1))
    h_f = 1.06 * float(sds.mean()) * m ** (-1.0 / (d + 6))
    h_x = 1.06 * float(X[mask].std(axis=0, ddof=1).mean()) * m ** (-1.0 / (d + 4))
    return h_f, h_x


def ite_density(e, x, ites: np.ndarray, X, mask: np.ndarray,
                h_f: float, h_x: float, spec: KernelSpec):
    """Conditional density of the ITE at (e, x) from the pseudo-sample.

    Ratio of the (d+1)-dimensional product-kernel sum over (X_i, ITE_i) with
    bandwidth h_f to the d-dimensional sum over X_i with bandwidth h_x,
    masked rows only. Values are floored at zero. Accepts a vector of e
    values and returns the matching array.
    """
    if not (h_f > 0 and h_x > 0):
        raise EstimationError("ITE density bandwidths must be positive")
    if not mask.any():
        raise TrimmingError("no trimmed-in observations")
    X = _as_matrix(X)
    d = X.shape[1]
    x0 = np.asarray(x, dtype=float).reshape(d)
    Xm = X[mask]
    tm = np.asarray(ites)[mask]

    kx_f = np.ones(Xm.shape[0])
    kx_den = np.ones(Xm.shape[0])
    for k in range(d):
        kx_f *= kernel_profile((Xm[:, k] - x0[k]) / h_f, spec.family)
        kx_den *= kernel_profile((Xm[:, k] - x0[k]) / h_x, spec.family)
    den = kx_den.sum() / h_x ** d
    if den <= 0:
        raise EstimationError("x is outside the support of the covariates")

    e_arr = np.atleast_1d(np.asarray(e, dtype=float))
    ke = kernel_profile((tm[None, :] - e_arr[:, None]) / h_f, spec.family)
    num = (ke * kx_f[None, :]).sum(axis=1) / h_f ** (d + 1)
    vals = np.clip(num / den, 0.0, None)
    return float(vals[0]) if np.ndim(e) == 0 else vals


def estimate_att(sample: Sample, fs: FirstStage, mask: np.ndarray) -> float:
    """ATT: average of Y - delta_0(X) - [Y - delta_1(X)] |V_0/V_1|^(1/2)
    over trimmed-in treated observations."""
    sel = mask & (sample.d == 1.0)
    if not sel.any():
        raise EstimationError("no trimmed-in treated observations")
    ratio = np.sqrt(np.abs(fs.v0[sel]) / np.abs(fs.v1[sel]))
    vals = sample.y[sel] - fs.delta0[sel] - (sample.y[sel] - fs.delta1[sel]) * ratio
    return float(vals.mean())


def counterfactual(i: int, sample: Sample, fs: FirstStage,
                   mask: np.ndarray) -> float:
    """The unobserved potential outcome for observation i.

    Treated units map to Y_0 = delta_0 + (Y - delta_1) |V_0/V_1|^(1/2);
    control units mirror to Y_1.
    """
    if not mask[i]:
        raise TrimmingError(f"observation {i} is trimmed out")
    y = sample.y[i]
    d0, d1 = fs.delta0[i], fs.delta1[i]
    r01 = np.sqrt(abs(fs.v0[i]) / abs(fs.v1[i]))
    if sample.d[i] == 1.0:
        return float(d0 + (y - d1) * r01)
    return float(d1 + (y - d0) / r01)


def estimate_propensity(x, z: int, sample: Sample, spec: KernelSpec, h) -> float:
    """NW regression of D on X within the Z=z arm, clipped to [0, 1]."""
    if z not in (0, 1):
        raise EstimationError("instrument arm z must be 0 or 1")
    h = _as_bandwidth(h, sample.d_x)
    arm = sample.z == float(z)
    if not arm.any():
        raise EstimationError(f"no observations with Z={z}")
    w = _KernelWeights(sample.x, h, spec.family, cache_bytes=0)
    sums = w.sums_at(_as_matrix(x), np.column_stack((sample.d * arm, 1.0 * arm)))
    if sums[0, 1] <= 0:
        raise EstimationError(f"no Z={z} kernel mass near x={x}")
    return float(np.clip(sums[0, 0] / sums[0, 1], 0.0, 1.0))


def _qweights(r: float, p0: float, p1: float) -> tuple[float, float]:
    # Q1 = 1 - p0 + R p0 and Q0 = p1 + (1 - p1)/R satisfy
    # Q1 = R Q0 + (1 - R)(p1 - p0); both collapse to 1 when R = 1.
    q1 = 1.0 - p0 + r * p0
    q0 = p1 + (1.0 - p1) / r if r > 0 else np.inf
    if np.isfinite(q0) and abs(q1 - (r * q0 + (1.0 - r) * (p1 - p0))) > 1e-8 * max(1.0, abs(q1)):
        raise EstimationError("adjusted-LATE identity failed; inputs degenerate")
    return float(q0), float(q1)


def adjusted_late_weights(x, sample: Sample, fs: FirstStage, spec: KernelSpec,
                          h) -> dict:
    """Diagnostics R(x) = sqrt(V_0/V_1), Q1 = 1 - p(x,0) + R p(x,0), and
    Q0 = p(x,1) + (1 - p(x,1))/R, with the linkage identity verified."""
    h = _as_bandwidth(h, sample.d_x)
    pt = estimate_first_stage_at(_as_matrix(x), sample, spec, h)
    v0, v1 = pt["v0"][0], pt["v1"][0]
    ratio = v0 / v1
    if not np.isfinite(ratio) or ratio < 0:
        raise EstimationError(
            f"V_0/V_1 = {ratio:.4g} at x={x}: sign violation or degenerate fit")
    r = float(np.sqrt(ratio))
    p0 = estimate_propensity(x, 0, sample, spec, h)
    p1 = estimate_propensity(x, 1, sample, spec, h)
    q0, q1 = _qweights(r, p0, p1)
    return {"R": r, "Q0": q0, "Q1": q1, "p0": p0, "p1": p1}
