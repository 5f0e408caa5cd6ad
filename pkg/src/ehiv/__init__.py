"""Endogenous-heteroskedasticity IV estimation toolkit.

Identifies treatment effects when the outcome-error scale depends on the
endogenous treatment, using a kernel first stage for complier means and
variances, a trimmed weighted-IV second stage, plug-in and bootstrap
inference, treatment-effect distribution estimators, an exogeneity test,
and a Monte Carlo harness.
"""
from .errors import (ConfigError, DataError, EhivError, EstimationError,
                     InstabilityError, RankError, TrimmingError)
from .kernels import (KERNEL_FAMILIES, BandwidthSpec, KernelSpec, eval_kernel,
                      kernel_profile, resolve_bandwidth)
from .first_stage import (FirstStage, Sample, TrimmingSpec,
                          estimate_first_stage, estimate_first_stage_at,
                          loo_kernel_sum, sign_violations, trim_mask)
from .estimator import (EhivFit, LinearFit, PipelineConfig, PipelineResult,
                        VarianceEffects, adjusted_late_weights,
                        counterfactual, default_ite_bandwidths, estimate_att,
                        estimate_propensity, estimate_sigma, fit_ehiv,
                        fit_iv, fit_ols, ite_density, ite_estimates,
                        run_pipeline, variance_effects)
from .inference import OmegaEstimate, bootstrap_se, compute_psi, estimate_omega
from .exo_test import ExoTestResult, test_exogenous_heteroskedasticity
from .simulate import DgpConfig, McReport, draw_sample, run_monte_carlo, summarize
from .cli import FitReport, RunConfig, load_csv, run_cli

__version__ = "0.1.0"

__all__ = [
    "EhivError", "ConfigError", "DataError", "EstimationError", "RankError",
    "TrimmingError", "InstabilityError",
    "KERNEL_FAMILIES", "KernelSpec", "BandwidthSpec", "eval_kernel",
    "kernel_profile", "resolve_bandwidth",
    "Sample", "FirstStage", "TrimmingSpec", "loo_kernel_sum",
    "estimate_first_stage", "estimate_first_stage_at", "trim_mask",
    "sign_violations",
    "LinearFit", "EhivFit", "PipelineConfig", "PipelineResult",
    "run_pipeline", "VarianceEffects", "fit_iv", "fit_ols",
    "fit_ehiv", "estimate_sigma", "variance_effects", "ite_estimates",
    "default_ite_bandwidths", "ite_density", "estimate_att", "counterfactual",
    "estimate_propensity", "adjusted_late_weights",
    "OmegaEstimate", "compute_psi", "estimate_omega", "bootstrap_se",
    "ExoTestResult", "test_exogenous_heteroskedasticity",
    "DgpConfig", "McReport", "draw_sample", "run_monte_carlo", "summarize",
    "RunConfig", "FitReport", "load_csv", "run_cli",
    "__version__",
]
