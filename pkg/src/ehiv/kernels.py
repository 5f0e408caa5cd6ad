"""Higher-order kernels, multivariate product evaluation, and bandwidth rules.

Every nonparametric operation in the package funnels through the univariate
profiles defined here. Multivariate kernels are coordinatewise products of a
single univariate family.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError

__all__ = [
    "KERNEL_FAMILIES",
    "KernelSpec",
    "BandwidthSpec",
    "kernel_profile",
    "eval_kernel",
    "resolve_bandwidth",
]

_SQRT_2PI = math.sqrt(2.0 * math.pi)

# family -> (order R, support radius; inf = unbounded)
KERNEL_FAMILIES = {
    "gaussian_order4": (4, math.inf),
    "epanechnikov_order4": (4, 1.0),
    "gaussian_order6": (6, math.inf),
}


@dataclass(frozen=True)
class KernelSpec:
    """A univariate kernel family, applied coordinatewise as a product."""

    family: str = "gaussian_order4"

    def __post_init__(self):
        if self.family not in KERNEL_FAMILIES:
            raise ConfigError(
                f"unknown kernel family {self.family!r}; "
                f"expected one of {sorted(KERNEL_FAMILIES)}"
            )

    @property
    def order(self) -> int:
        return KERNEL_FAMILIES[self.family][0]

    @property
    def support_radius(self) -> float:
        return KERNEL_FAMILIES[self.family][1]


def kernel_profile(u, family: str) -> np.ndarray:
    """Vectorized univariate kernel k(u) for the given family."""
    u = np.asarray(u, dtype=float)
    uu = u * u
    if family == "gaussian_order4":
        return 0.5 * (3.0 - uu) * np.exp(-0.5 * uu) / _SQRT_2PI
    if family == "epanechnikov_order4":
        body = (15.0 / 8.0) * (1.0 - (7.0 / 3.0) * uu) * 0.75 * (1.0 - uu)
        return np.where(np.abs(u) <= 1.0, body, 0.0)
    if family == "gaussian_order6":
        return 0.125 * (15.0 - 10.0 * uu + uu * uu) * np.exp(-0.5 * uu) / _SQRT_2PI
    raise ConfigError(f"unknown kernel family {family!r}")


def eval_kernel(u, spec: KernelSpec) -> float:
    """Product kernel K(u) = prod_j k(u_j) at a single point u."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if not np.all(np.isfinite(u)):
        raise DataError("kernel argument contains non-finite values")
    return float(np.prod(kernel_profile(u, spec.family)))


@dataclass(frozen=True)
class BandwidthSpec:
    """Bandwidth rule: silverman_pow, per_arm_ninth, or fixed.

    silverman_pow gives h = c * n**(-gamma) for a scalar covariate and
    c * sd(X_k) * n**(-gamma) per dimension otherwise (the bare rule is the
    unit-variance special case). per_arm_ninth gives the instrument-arm rule
    h_z = c * sd(X_k) * n_z**(-1/9) and is only meaningful for the
    split-by-arm first-stage variant. fixed uses h verbatim.
    """

    rule: str = "silverman_pow"
    gamma: float = 0.2
    c: float = 1.06
    h: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.rule not in ("silverman_pow", "per_arm_ninth", "fixed"):
            raise ConfigError(f"unknown bandwidth rule {self.rule!r}")
        if self.rule == "fixed":
            if self.h is None or len(self.h) == 0:
                raise ConfigError("fixed bandwidth rule requires h")
            if any(not math.isfinite(v) or v <= 0 for v in self.h):
                raise ConfigError("fixed bandwidths must be positive and finite")
        else:
            if not (0 < self.gamma < 1):
                raise ConfigError("bandwidth exponent gamma must lie in (0, 1)")
            if self.c <= 0:
                raise ConfigError("bandwidth scale c must be positive")

    @classmethod
    def silverman(cls, gamma: float = 0.2, c: float = 1.06) -> "BandwidthSpec":
        return cls(rule="silverman_pow", gamma=gamma, c=c)

    @classmethod
    def per_arm(cls, c: float = 1.06) -> "BandwidthSpec":
        return cls(rule="per_arm_ninth", gamma=1.0 / 9.0, c=c)

    @classmethod
    def fixed(cls, h) -> "BandwidthSpec":
        h = np.atleast_1d(np.asarray(h, dtype=float))
        return cls(rule="fixed", h=tuple(float(v) for v in h))


def _column_sd(X: np.ndarray) -> np.ndarray:
    sd = X.std(axis=0, ddof=1)
    if np.any(sd <= 0) or not np.all(np.isfinite(sd)):
        bad = [int(k) for k in np.flatnonzero(~(sd > 0))]
        raise DataError(f"degenerate covariate column(s) {bad}: zero sample variance")
    return sd


def resolve_bandwidth(X, spec: BandwidthSpec, arm_counts=None) -> np.ndarray:
    """Resolve the per-dimension bandwidths for covariate matrix X.

    Returns shape (d,) for silverman_pow and fixed. For per_arm_ninth,
    arm_counts = (n0, n1) is required and the result has shape (2, d), one
    row per instrument arm.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, d = X.shape
    if n < 2:
        raise DataError("need at least 2 observations to resolve a bandwidth")

    if spec.rule == "fixed":
        h = np.asarray(spec.h, dtype=float)
        if h.size == 1:
            h = np.full(d, h[0])
        if h.size != d:
            raise ConfigError(f"fixed bandwidth has {h.size} entries for {d} covariates")
        return h

    if spec.rule == "silverman_pow":
        base = spec.c * n ** (-spec.gamma)
        if d == 1:
            _column_sd(X)  # reject degenerate covariates even when unused
            return np.array([base])
        return base * _column_sd(X)

    # per_arm_ninth
    if arm_counts is None:
        raise ConfigError("per_arm_ninth requires arm_counts=(n0, n1)")
    n0, n1 = int(arm_counts[0]), int(arm_counts[1])
    if n0 <= 0 or n1 <= 0:
        raise DataError("per_arm_ninth requires both instrument arms to be non-empty")
    sd = _column_sd(X)
    out = np.empty((2, d))
    for row, nz in enumerate((n0, n1)):
        out[row] = spec.c * sd * nz ** (-1.0 / 9.0)
    return out
