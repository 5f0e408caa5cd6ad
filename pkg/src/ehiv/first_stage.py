"""Leave-one-out kernel building blocks and the nonparametric first stage.

phi_A(X_i) = f_X(X_i) E[A|X_i] is estimated by leave-one-out kernel sums; the
complier means delta_d and variances V_d are ratios of phi cross-products, and
S_i = |V_{D_i}(X_i)|^(1/2) is the weight used by the second stage. Division by
zero is allowed here: non-finite values are stored and removed by trimming.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, TrimmingError
from .kernels import KernelSpec, kernel_profile

__all__ = [
    "Sample",
    "FirstStage",
    "TrimmingSpec",
    "loo_kernel_sum",
    "estimate_first_stage",
    "estimate_first_stage_at",
    "trim_mask",
    "sign_violations",
]

# pairwise kernel matrices up to this size are kept in memory and reused
_CACHE_BYTES = 1 << 28


def _as_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise DataError(f"covariates must be a vector or matrix, got ndim={x.ndim}")
    return x


def _as_bandwidth(h, d: int) -> np.ndarray:
    h = np.atleast_1d(np.asarray(h, dtype=float))
    if h.size == 1 and d > 1:
        h = np.full(d, h[0])
    if h.shape != (d,):
        raise DataError(f"bandwidth has shape {h.shape}, expected ({d},)")
    if not np.all(np.isfinite(h)) or np.any(h <= 0):
        raise DataError("bandwidths must be positive and finite")
    return h


def _check_binary(v: np.ndarray, name: str) -> None:
    bad = ~((v == 0.0) | (v == 1.0))
    if bad.any():
        rows = np.flatnonzero(bad)[:5].tolist()
        raise DataError(f"{name} must be binary 0/1; offending rows {rows}")


@dataclass(eq=False)
class Sample:
    """Observed data (Y, D, Z, X) with continuous covariates X.

    The intercept is not a column of x; design matrices prepend a constant
    when `intercept` is set. `eps` optionally carries the simulation noise
    draw so oracle checks can compare against the truth.
    """

    y: np.ndarray
    d: np.ndarray
    z: np.ndarray
    x: np.ndarray
    intercept: bool = True
    eps: np.ndarray | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).ravel()
        self.d = np.asarray(self.d, dtype=float).ravel()
        self.z = np.asarray(self.z, dtype=float).ravel()
        self.x = _as_matrix(self.x)
        n = self.y.size
        if n < 2:
            raise DataError("need at least 2 observations")
        for name, v in (("D", self.d), ("Z", self.z)):
            if v.size != n:
                raise DataError(f"{name} has length {v.size}, expected {n}")
        if self.x.shape[0] != n:
            raise DataError(f"X has {self.x.shape[0]} rows, expected {n}")
        for name, v in (("Y", self.y), ("X", self.x)):
            if not np.all(np.isfinite(v)):
                rows = np.flatnonzero(~np.isfinite(v).reshape(n, -1).all(axis=1))[:5]
                raise DataError(f"{name} contains non-finite values; rows {rows.tolist()}")
        _check_binary(self.d, "D")
        _check_binary(self.z, "Z")
        zbar = self.z.mean()
        if not (0.0 < zbar < 1.0):
            raise DataError("both instrument arms must be present (0 < mean(Z) < 1)")
        if self.eps is not None:
            self.eps = np.asarray(self.eps, dtype=float).ravel()

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def d_x(self) -> int:
        return self.x.shape[1]

    def regressors(self) -> np.ndarray:
        """Design matrix [1?, X, D]; the treatment coefficient comes last."""
        cols = [self.x, self.d[:, None]]
        if self.intercept:
            cols.insert(0, np.ones((self.n, 1)))
        return np.hstack(cols)

    def instruments(self) -> np.ndarray:
        """Instrument matrix W = [1?, X, Z]."""
        cols = [self.x, self.z[:, None]]
        if self.intercept:
            cols.insert(0, np.ones((self.n, 1)))
        return np.hstack(cols)

    def take(self, idx) -> "Sample":
        """Row subset/resample (used by the pairs bootstrap)."""
        eps = None if self.eps is None else self.eps[idx]
        return Sample(self.y[idx], self.d[idx], self.z[idx], self.x[idx],
                      intercept=self.intercept, eps=eps)


@dataclass(frozen=True)
class TrimmingSpec:
    """Floors for the first-stage denominator and variances, plus the
    boundary shrinkage radius (in units of h) for the inner support box."""

    tau: float = 0.1
    kappa0: float = 0.1
    kappa1: float = 0.1
    boundary_radius: float = 1.0

    def __post_init__(self):
        for name in ("tau", "kappa0", "kappa1"):
            v = getattr(self, name)
            if not (v > 0) or not np.isfinite(v):
                raise DataError(f"trimming floor {name} must be strictly positive")
        if self.boundary_radius < 0 or not np.isfinite(self.boundary_radius):
            raise DataError("boundary_radius must be nonnegative and finite")


class _KernelWeights:
    """Pairwise kernel weights K((X_j - X_i)/h) with optional caching.

    The diagonal carries the true value K(0); leave-one-out sums subtract it.
    Summation order within each row is fixed, so results do not depend on
    chunking.
    """

    def __init__(self, X: np.ndarray, h: np.ndarray, family: str,
                 cache_bytes: int = _CACHE_BYTES):
        self.X = X
        self.h = h
        self.family = family
        n = X.shape[0]
        self.n = n
        self.k0 = float(np.prod(kernel_profile(np.zeros(X.shape[1]), family)))
        self._mat = None
        if n * n * 8 <= cache_bytes:
            self._mat = self._rows(0, n)

    def _rows(self, lo: int, hi: int) -> np.ndarray:
        X, h = self.X, self.h
        out = np.ones((hi - lo, self.n))
        for k in range(X.shape[1]):
            out *= kernel_profile((X[None, :, k] - X[lo:hi, None, k]) / h[k], self.family)
        return out

    def full_sums(self, A: np.ndarray) -> np.ndarray:
        """sum_j A_j K_ij including the own term j = i."""
        A = A if A.ndim == 2 else A[:, None]
        if self._mat is not None:
            return self._mat @ A
        out = np.empty((self.n, A.shape[1]))
        step = max(1, (_CACHE_BYTES // 4) // (8 * self.n))
        for lo in range(0, self.n, step):
            hi = min(lo + step, self.n)
            out[lo:hi] = self._rows(lo, hi) @ A
        return out

    def loo_sums(self, A: np.ndarray) -> np.ndarray:
        """sum_{j != i} A_j K_ij."""
        A = A if A.ndim == 2 else A[:, None]
        return self.full_sums(A) - self.k0 * A

    def sums_at(self, X0: np.ndarray, A: np.ndarray) -> np.ndarray:
        """sum_j A_j K((X_j - x0)/h) for arbitrary evaluation points x0."""
        X0 = _as_matrix(X0)
        A = A if A.ndim == 2 else A[:, None]
        m = X0.shape[0]
        out = np.zeros((m, A.shape[1]))
        step = max(1, (_CACHE_BYTES // 4) // (8 * max(m, 1)))
        for lo in range(0, self.n, step):
            hi = min(lo + step, self.n)
            block = np.ones((m, hi - lo))
            for k in range(X0.shape[1]):
                block *= kernel_profile(
                    (self.X[None, lo:hi, k] - X0[:, None, k]) / self.h[k], self.family)
            out += block @ A[lo:hi]
        return out


@dataclass(eq=False)
class FirstStage:
    """Per-observation first-stage estimates.

    phi_denom is the raw denominator phi_1*phi_DZ - phi_D*phi_Z (density
    scaled); cov_dz = phi_denom / phi_1^2 estimates Cov(D, Z | X_i), which is
    the scale the trimming floor tau is compared against.
    """

    delta0: np.ndarray
    delta1: np.ndarray
    v0: np.ndarray
    v1: np.ndarray
    s: np.ndarray
    phi_denom: np.ndarray
    cov_dz: np.ndarray
    bandwidth: np.ndarray
    kernel: KernelSpec
    phi: dict | None = None
    weights: "_KernelWeights | None" = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.delta0.size


# phi column order used by estimate_first_stage and reused by inference
_PHI_COLS = ("one", "z", "d", "dz", "y1", "y1z", "y0", "y0z",
             "yy1", "yy1z", "yy0", "yy0z")


def loo_kernel_sum(A, X, h, spec: KernelSpec) -> np.ndarray:
    """phi_A(X_i) = (1/((n-1) prod(h))) sum_{j != i} A_j K((X_j - X_i)/h)."""
    X = _as_matrix(X)
    n, d = X.shape
    if n < 2:
        raise DataError("leave-one-out sums need at least 2 observations")
    A = np.asarray(A, dtype=float)
    if A.shape[0] != n:
        raise DataError(f"A has length {A.shape[0]}, expected {n}")
    h = _as_bandwidth(h, d)
    w = _KernelWeights(X, h, spec.family)
    out = w.loo_sums(A) / ((n - 1) * np.prod(h))
    return out[:, 0] if A.ndim == 1 else out


def _phi_columns(sample: Sample) -> np.ndarray:
    y, d, z = sample.y, sample.d, sample.z
    y1 = y * d
    y0 = y * (1.0 - d)
    yy1 = y * y1
    yy0 = y * y0
    cols = (np.ones(sample.n), z, d, d * z, y1, y1 * z, y0, y0 * z,
            yy1, yy1 * z, yy0, yy0 * z)
    return np.column_stack(cols)


def _ratio_stage(phi: dict, d_obs: np.ndarray):
    """delta_d, V_d, S, and the denominator from phi cross-products."""
    den = phi["one"] * phi["dz"] - phi["d"] * phi["z"]
    with np.errstate(divide="ignore", invalid="ignore"):
        delta1 = (phi["one"] * phi["y1z"] - phi["y1"] * phi["z"]) / den
        delta0 = -(phi["one"] * phi["y0z"] - phi["y0"] * phi["z"]) / den
        v1 = (phi["one"] * phi["yy1z"] - phi["yy1"] * phi["z"]) / den - delta1 ** 2
        v0 = -(phi["one"] * phi["yy0z"] - phi["yy0"] * phi["z"]) / den - delta0 ** 2
        cov = den / phi["one"] ** 2
        s = np.sqrt(np.abs(v0)) * (1.0 - d_obs) + np.sqrt(np.abs(v1)) * d_obs
    return delta0, delta1, v0, v1, s, den, cov


def estimate_first_stage(sample: Sample, spec: KernelSpec, h,
                         split_by_arm: bool = False) -> FirstStage:
    """Leave-one-out estimates of delta_d(X_i), V_d(X_i), and S_i.

    The default is the pooled covariance-ratio form. With split_by_arm, the
    conditional means are estimated within each instrument arm (h may then be
    a (2, d) array of per-arm bandwidths) and differenced; this variant
    matches the same population targets but uses arm-specific smoothing.
    """
    X = sample.x
    n, d = X.shape
    if split_by_arm:
        return _estimate_split_by_arm(sample, spec, h)

    h = _as_bandwidth(h, d)
    w = _KernelWeights(X, h, spec.family)
    sums = w.loo_sums(_phi_columns(sample)) / ((n - 1) * np.prod(h))
    phi = {name: sums[:, k] for k, name in enumerate(_PHI_COLS)}
    delta0, delta1, v0, v1, s, den, cov = _ratio_stage(phi, sample.d)
    return FirstStage(delta0, delta1, v0, v1, s, den, cov,
                      bandwidth=h, kernel=spec, phi=phi, weights=w)


def _estimate_split_by_arm(sample: Sample, spec: KernelSpec, h) -> FirstStage:
    X = sample.x
    n, d = X.shape
    harr = np.asarray(h, dtype=float)
    if harr.ndim == 2:
        h_arms = [_as_bandwidth(harr[0], d), _as_bandwidth(harr[1], d)]
    else:
        h_arms = [_as_bandwidth(harr, d)] * 2

    y, d_obs, z = sample.y, sample.d, sample.z
    base = np.column_stack((np.ones(n), d_obs, y * d_obs, y * (1 - d_obs),
                            y * y * d_obs, y * y * (1 - d_obs)))
    m = {}
    for arm, in_arm in ((0, z == 0.0), (1, z == 1.0)):
        w = _KernelWeights(X, h_arms[arm], spec.family)
        sums = w.loo_sums(base * in_arm[:, None])
        with np.errstate(divide="ignore", invalid="ignore"):
            m[arm] = sums[:, 1:] / sums[:, :1]  # NW means of D, Y1, Y0, YY1, YY0
    dd = m[1] - m[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        delta1 = dd[:, 1] / dd[:, 0]
        delta0 = -dd[:, 2] / dd[:, 0]
        v1 = dd[:, 3] / dd[:, 0] - delta1 ** 2
        v0 = -dd[:, 4] / dd[:, 0] - delta0 ** 2
    s = np.sqrt(np.abs(v0)) * (1.0 - d_obs) + np.sqrt(np.abs(v1)) * d_obs

    # express the denominator on the same Cov(D,Z|X) scale as the pooled form
    h_pool = h_arms[0]
    w = _KernelWeights(X, h_pool, spec.family)
    sums = w.loo_sums(np.column_stack((np.ones(n), z)))
    with np.errstate(divide="ignore", invalid="ignore"):
        pz = sums[:, 1] / sums[:, 0]
        phi1 = sums[:, 0] / ((n - 1) * np.prod(h_pool))
        cov = pz * (1.0 - pz) * dd[:, 0]
    return FirstStage(delta0, delta1, v0, v1, s, cov * phi1 ** 2, cov,
                      bandwidth=np.vstack(h_arms), kernel=spec,
                      phi=None, weights=None)


def estimate_first_stage_at(x0, sample: Sample, spec: KernelSpec, h) -> dict:
    """Pointwise (not leave-one-out) first-stage estimates at points x0.

    Returns arrays delta0, delta1, v0, v1, cov_dz, phi_denom of length
    len(x0). Used for evaluating the variance surface on grids and for
    large-sample oracle checks where the n x n form is infeasible.
    """
    X = sample.x
    n, d = X.shape
    h = _as_bandwidth(h, d)
    x0 = _as_matrix(x0)
    if x0.shape[1] != d:
        raise DataError(f"evaluation points have {x0.shape[1]} columns, expected {d}")
    w = _KernelWeights(X, h, spec.family, cache_bytes=0)
    sums = w.sums_at(x0, _phi_columns(sample)) / (n * np.prod(h))
    phi = {name: sums[:, k] for k, name in enumerate(_PHI_COLS)}
    delta0, delta1, v0, v1, _, den, cov = _ratio_stage(phi, np.zeros(x0.shape[0]))
    return {"delta0": delta0, "delta1": delta1, "v0": v0, "v1": v1,
            "cov_dz": cov, "phi_denom": den, "phi1": phi["one"]}


def inner_support_mask(X: np.ndarray, h: np.ndarray, radius: float) -> np.ndarray:
    """Box approximation of the inner support: [min + r h, max - r h] per axis."""
    if radius == 0:
        return np.ones(X.shape[0], dtype=bool)
    lo = X.min(axis=0) + radius * h
    hi = X.max(axis=0) - radius * h
    return np.all((X >= lo) & (X <= hi), axis=1)


def trim_mask(fs: FirstStage, trim: TrimmingSpec, X, h) -> np.ndarray:
    """T_ni: denominator floor, variance floors, and the inner-support box.

    The denominator condition compares tau against |cov_dz|, the estimated
    Cov(D, Z | X_i): the floor is calibrated to the complier share (the
    robustness rule tau = 0.2 r0 sits just below |Cov| = 0.25 r0), which the
    raw density-scaled phi_denom does not track. The variance floors act on
    the weighting scale: sqrt(|V_d|) >= kappa_d, i.e. the floor bounds the
    S_i that will be divided by, not the variance itself. Non-finite
    first-stage values never pass.
    """
    X = _as_matrix(X)
    h = np.asarray(h, dtype=float).ravel()[: X.shape[1]]
    with np.errstate(invalid="ignore"):
        mask = (np.abs(fs.cov_dz) >= trim.tau)
        mask &= np.abs(fs.v0) >= trim.kappa0 ** 2
        mask &= np.abs(fs.v1) >= trim.kappa1 ** 2
    mask &= inner_support_mask(X, h, trim.boundary_radius)
    if not mask.any():
        raise TrimmingError("trimming removed every observation")
    return mask


def sign_violations(fs: FirstStage, mask: np.ndarray) -> int:
    """Count masked-in observations where V_0 and V_1 disagree in sign.

    The identification argument implies sign(V_0) = sign(V_1); a large count
    signals model violation or undersmoothing.
    """
    prod = fs.v0[mask] * fs.v1[mask]
    return int(np.sum(prod < 0))
