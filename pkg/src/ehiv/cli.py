"""Command-line shell: CSV ingestion, flat config files, and report emission.

Subcommands `fit`, `simulate`, and `test-exo` share kernel/bandwidth/trimming
options. A flat key-value config file (``key = value`` per line, keys named
after the flags) can seed any run; explicit flags override file values. Every
report embeds the fully resolved configuration plus a hash of it, so a run
can be reproduced from its own output.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import importlib.metadata
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, EstimationError
from .estimator import (PipelineConfig, default_ite_bandwidths, estimate_att,
                        ite_density, ite_estimates, run_pipeline,
                        variance_effects)
from .exo_test import test_exogenous_heteroskedasticity
from .first_stage import Sample, TrimmingSpec
from .inference import bootstrap_se, estimate_omega
from .kernels import BandwidthSpec, KernelSpec, resolve_bandwidth
from .simulate import DgpConfig, run_monte_carlo

__all__ = ["RunConfig", "FitReport", "load_csv", "run_cli", "main"]

try:
    _VERSION = importlib.metadata.version("ehiv")
except importlib.metadata.PackageNotFoundError:  # running from a source tree
    _VERSION = "0+unknown"

_KERNEL_ALIASES = {
    "gaussian4": "gaussian_order4",
    "epanech4": "epanechnikov_order4",
    "gaussian6": "gaussian_order6",
    "gaussian_order4": "gaussian_order4",
    "epanechnikov_order4": "epanechnikov_order4",
    "gaussian_order6": "gaussian_order6",
}
_SE_MODES = ("plug-in", "bootstrap", "both", "none")
_COEF_PREFIX = ("const",)


def _kernel_spec(name: str) -> KernelSpec:
    try:
        return KernelSpec(_KERNEL_ALIASES[name])
    except KeyError:
        raise ConfigError(f"unknown kernel {name!r}; expected one of "
                          f"{sorted(set(_KERNEL_ALIASES))}") from None


def _bandwidth_spec(text: str) -> BandwidthSpec:
    if text == "silverman":
        return BandwidthSpec.silverman()
    if text == "per-arm":
        return BandwidthSpec.per_arm()
    if text.startswith("fixed:"):
        try:
            vals = [float(v) for v in text[len("fixed:"):].split(",")]
        except ValueError:
            raise ConfigError(f"bad fixed bandwidth {text!r}; "
                              "expected fixed:<h> or fixed:<h1>,<h2>,...") from None
        return BandwidthSpec.fixed(vals)
    raise ConfigError(f"unknown bandwidth rule {text!r}; expected "
                      "silverman, per-arm, or fixed:<h>")


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved invocation: one value per flag, file defaults applied."""

    command: str
    input: str | None = None
    outcome: str = "y"
    treatment: str = "d"
    instrument: str = "z"
    covariates: tuple[str, ...] = ("x",)
    kernel: str = "gaussian4"
    bandwidth: str = "silverman"
    tau: float = 0.1
    kappa0: float = 0.1
    kappa1: float = 0.1
    boundary_radius: float = 1.0
    output_dir: str = "."
    seed: int = 0
    se: str = "plug-in"
    bootstrap_reps: int = 200
    perms: int = 199
    cells: int = 10
    intercept: bool = True
    grid: bool = False
    exo: bool = False
    n: int = 4000
    reps: int = 500
    estimators: tuple[str, ...] = ("iv", "ehiv")
    beta0: float = 0.0
    beta1: float = 1.0
    beta2: float = 1.0
    lambda0: float = 0.5
    r0: float = 0.5
    rho0: float = 0.5

    def __post_init__(self):
        if self.command not in ("fit", "simulate", "test-exo"):
            raise ConfigError(f"unknown command {self.command!r}")
        if self.se not in _SE_MODES:
            raise ConfigError(f"--se must be one of {_SE_MODES}")
        _kernel_spec(self.kernel)
        bw = _bandwidth_spec(self.bandwidth)
        if bw.rule == "per_arm_ninth":
            if self.command == "fit" and self.se in ("plug-in", "both"):
                raise ConfigError("plug-in standard errors need the pooled "
                                  "first stage; per-arm bandwidths only "
                                  "support --se bootstrap or none")
            if self.command == "test-exo":
                raise ConfigError("test-exo needs a single bandwidth; "
                                  "per-arm is not supported here")
        for name in ("tau", "kappa0", "kappa1", "boundary_radius"):
            if not (getattr(self, name) >= 0):
                raise ConfigError(f"--{name.replace('_', '-')} must be >= 0")
        if not self.covariates:
            raise ConfigError("at least one covariate column is required")
        mapped = (self.outcome, self.treatment, self.instrument,
                  *self.covariates)
        if len(set(mapped)) != len(mapped):
            raise ConfigError(f"column map has duplicates: {mapped}")
        if self.command in ("fit", "test-exo") and not self.input:
            raise ConfigError("--input is required for this command")

    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(
            kernel=_kernel_spec(self.kernel),
            bandwidth=_bandwidth_spec(self.bandwidth),
            trimming=TrimmingSpec(tau=self.tau, kappa0=self.kappa0,
                                  kappa1=self.kappa1,
                                  boundary_radius=self.boundary_radius),
        )

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["covariates"] = ",".join(self.covariates)
        d["estimators"] = ",".join(self.estimators)
        return d

    @classmethod
    def from_namespace(cls, ns: argparse.Namespace) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        kwargs = {k: v for k, v in vars(ns).items() if k in names}
        for key in ("covariates", "estimators"):
            if isinstance(kwargs.get(key), str):
                kwargs[key] = tuple(p.strip() for p in kwargs[key].split(",")
                                    if p.strip())
        return cls(**kwargs)


def _config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _provenance(rc: RunConfig) -> dict:
    config = rc.as_dict()
    return {"config_hash": _config_hash(config), "version": _VERSION,
            "seed": rc.seed, "config": config}


@dataclass
class FitReport:
    """Fit summary; to_json/from_json round-trip to an equal object."""

    beta: list
    se: list | None
    se_naive: list | None
    se_bootstrap: list | None
    att: float
    mve: float
    trim: dict
    exo: dict | None
    provenance: dict

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "FitReport":
        data = json.loads(text)
        names = [f.name for f in dataclasses.fields(cls)]
        unknown = set(data) - set(names)
        if unknown:
            raise DataError(f"unrecognized report fields {sorted(unknown)}")
        return cls(**{name: data.get(name) for name in names})


def load_csv(path, outcome: str = "y", treatment: str = "d",
             instrument: str = "z", covariates=("x",),
             intercept: bool = True) -> Sample:
    """Read a headered RFC-4180 CSV into a validated Sample.

    All mapped columns must be numeric and complete; treatment and
    instrument must be 0/1. Violations are reported with 1-based data-row
    indices (the header is row 0).
    """
    covariates = tuple(covariates)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    if not rows:
        raise DataError(f"{path} is empty; a header row is required")
    header = [c.strip() for c in rows[0]]
    mapped = [outcome, treatment, instrument, *covariates]
    missing = [c for c in mapped if c not in header]
    if missing:
        raise DataError(f"column(s) {missing} not found; available headers: "
                        f"{header}")
    idx = {c: header.index(c) for c in mapped}

    problems: list[str] = []
    values: dict[str, list[float]] = {c: [] for c in mapped}
    for r, row in enumerate(rows[1:], start=1):
        if not row or all(not cell.strip() for cell in row):
            continue  # blank line
        row_vals = {}
        for c in mapped:
            cell = row[idx[c]].strip() if idx[c] < len(row) else ""
            if not cell:
                problems.append(f"row {r}: missing value in column {c!r}")
                continue
            try:
                row_vals[c] = float(cell)
            except ValueError:
                problems.append(f"row {r}: column {c!r} value {cell!r} "
                                "is not numeric")
        if len(row_vals) < len(mapped):
            continue
        for c in (treatment, instrument):
            if row_vals[c] not in (0.0, 1.0):
                problems.append(f"row {r}: column {c!r} must be 0 or 1, "
                                f"got {row[idx[c]].strip()!r}")
        for c in mapped:
            values[c].append(row_vals[c])
        if len(problems) > 8:
            break
    if problems:
        shown = "; ".join(problems[:8])
        more = "" if len(problems) <= 8 else f" (+{len(problems) - 8} more)"
        raise DataError(f"{path}: {shown}{more}")
    n = len(values[outcome])
    if n < 2:
        raise DataError(f"{path}: need at least 2 complete data rows, got {n}")
    x = np.column_stack([values[c] for c in covariates])
    return Sample(np.asarray(values[outcome]), np.asarray(values[treatment]),
                  np.asarray(values[instrument]), x, intercept=intercept)


def _write_text(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from None


def _write_csv(path: Path, header, rows) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from None


def _coef_names(rc: RunConfig) -> list[str]:
    names = list(_COEF_PREFIX) if rc.intercept else []
    return names + list(rc.covariates) + [rc.treatment]


def _cmd_fit(rc: RunConfig) -> int:
    sample = load_csv(rc.input, rc.outcome, rc.treatment, rc.instrument,
                      rc.covariates, intercept=rc.intercept)
    config = rc.pipeline()
    pipe = run_pipeline(sample, config)
    fs, fit, mask = pipe.first_stage, pipe.fit, pipe.mask
    h = pipe.bandwidth
    h_box = h.mean(axis=0) if h.ndim == 2 else h
    spec = config.kernel

    se = se_naive = se_boot = None
    if rc.se in ("plug-in", "both"):
        om = estimate_omega(sample, fs, fit, mask, spec, h)
        se, se_naive = om.se.tolist(), om.se_naive.tolist()
    if rc.se in ("bootstrap", "both"):
        se_boot = bootstrap_se(sample, config, B=rc.bootstrap_reps,
                               seed=rc.seed).tolist()

    att = estimate_att(sample, fs, mask)
    ve = variance_effects(sample, fs, fit, mask, spec, h_box)
    exo = None
    if rc.exo:
        res = test_exogenous_heteroskedasticity(
            sample, spec, h_box, B=rc.perms, seed=rc.seed, cells=rc.cells,
            boundary_radius=rc.boundary_radius)
        exo = {"statistic": res.statistic, "p_value": res.p_value,
               "bootstrap_reps": res.bootstrap_reps}

    n_active = int(mask.sum())
    report = FitReport(
        beta=fit.beta.tolist(), se=se, se_naive=se_naive, se_bootstrap=se_boot,
        att=att, mve=ve.mve,
        trim={"n": sample.n, "n_active": n_active,
              "trim_fraction": 1.0 - n_active / sample.n},
        exo=exo, provenance=_provenance(rc),
    )
    out = Path(rc.output_dir)
    _write_text(out / "fit_report.json", report.to_json() + "\n")
    if rc.grid:
        ites = ite_estimates(sample, fs, fit, mask)
        header = (["row", *rc.covariates, rc.instrument, rc.treatment,
                   rc.outcome, "delta0", "delta1", "v0", "v1", "s", "cov_dz",
                   "active", "ite", "sigma1", "sigma0", "delta_sigma"])
        rows = [
            [i, *sample.x[i].tolist(), sample.z[i], sample.d[i], sample.y[i],
             fs.delta0[i], fs.delta1[i], fs.v0[i], fs.v1[i], fs.s[i],
             fs.cov_dz[i], int(mask[i]), ites[i], ve.sigma1[i], ve.sigma0[i],
             ve.delta_sigma[i]]
            for i in range(sample.n)
        ]
        _write_csv(out / "fit_grid.csv", header, rows)
        h_f, h_x = default_ite_bandwidths(ites, sample.x, mask)
        quartiles = np.quantile(sample.x[mask], [0.25, 0.5, 0.75], axis=0)
        lo, hi = np.nanmin(ites[mask]), np.nanmax(ites[mask])
        e_grid = np.linspace(lo, hi, 81)
        dens_rows = []
        for q, x0 in zip(("q25", "q50", "q75"), quartiles):
            vals = ite_density(e_grid, x0, ites, sample.x, mask, h_f, h_x,
                               spec)
            dens_rows.extend([q, *np.atleast_1d(x0).tolist(), e, v]
                             for e, v in zip(e_grid, vals))
        _write_csv(out / "ite_density.csv",
                   ["x_quartile", *rc.covariates, "e", "density"], dens_rows)

    names = _coef_names(rc)
    print("coef  " + "  ".join(f"{m}={v:.6g}" for m, v in
                               zip(names, report.beta)))
    for label, vals in (("se", se), ("se_naive", se_naive),
                        ("se_bootstrap", se_boot)):
        if vals is not None:
            print(f"{label}  " + "  ".join(f"{m}={v:.6g}" for m, v in
                                           zip(names, vals)))
    print(f"att={att:.6g}  mve={ve.mve:.6g}  "
          f"trimmed={report.trim['trim_fraction']:.1%} of n={sample.n}")
    if exo is not None:
        print(f"exo test: T={exo['statistic']:.6g} p={exo['p_value']:.4f}")
    print(f"wrote {out / 'fit_report.json'}")
    return 0


def _cmd_simulate(rc: RunConfig) -> int:
    cfg = DgpConfig(beta0=rc.beta0, beta1=rc.beta1, beta2=rc.beta2,
                    lambda0=rc.lambda0, r0=rc.r0, rho0=rc.rho0)
    reports = run_monte_carlo(cfg, rc.n, rc.reps, rc.pipeline(), rc.seed,
                              estimators=rc.estimators)
    payload = {"reports": {name: rep.as_dict() for name, rep in
                           reports.items()},
               "provenance": _provenance(rc)}
    out = Path(rc.output_dir)
    _write_text(out / "simulate_report.json",
                json.dumps(payload, indent=2) + "\n")
    coef = ["const", "x", "d"]
    rows = []
    for name, rep in reports.items():
        for k, cname in enumerate(coef):
            rows.append([name, cname, rep.n, rep.reps, rep.mb[k], rep.medb[k],
                         rep.sd[k], rep.rmse[k], rep.trim_fraction,
                         rep.failures])
    _write_csv(out / "simulate_table.csv",
               ["estimator", "coef", "n", "reps", "mb", "medb", "sd", "rmse",
                "trim_fraction", "failures"], rows)
    for name, rep in reports.items():
        print(f"{name}: n={rep.n} reps={rep.reps} "
              f"mb(d)={rep.mb[-1]:+.4f} sd(d)={rep.sd[-1]:.4f} "
              f"rmse(d)={rep.rmse[-1]:.4f} failures={rep.failures}")
    print(f"wrote {out / 'simulate_report.json'} and "
          f"{out / 'simulate_table.csv'}")
    return 0


def _cmd_test_exo(rc: RunConfig) -> int:
    sample = load_csv(rc.input, rc.outcome, rc.treatment, rc.instrument,
                      rc.covariates, intercept=rc.intercept)
    h = resolve_bandwidth(sample.x, _bandwidth_spec(rc.bandwidth))
    res = test_exogenous_heteroskedasticity(
        sample, _kernel_spec(rc.kernel), h, B=rc.perms, seed=rc.seed,
        cells=rc.cells, boundary_radius=rc.boundary_radius)
    payload = {"statistic": res.statistic, "p_value": res.p_value,
               "bootstrap_reps": res.bootstrap_reps,
               "n_masked": int(res.per_x_gap.size),
               "provenance": _provenance(rc)}
    out = Path(rc.output_dir)
    _write_text(out / "exo_report.json", json.dumps(payload, indent=2) + "\n")
    if rc.grid:
        _write_csv(out / "exo_grid.csv", ["gap"],
                   [[g] for g in res.per_x_gap.tolist()])
    print(f"T={res.statistic:.6g}  p={res.p_value:.4f}  "
          f"(B={res.bootstrap_reps}, masked n={res.per_x_gap.size})")
    print(f"wrote {out / 'exo_report.json'}")
    return 0


def _build_parser():
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="flat key = value file; flags "
                                         "override file values")
    shared.add_argument("--kernel", default="gaussian4",
                        help="gaussian4 | epanech4 | gaussian6")
    shared.add_argument("--bandwidth", default="silverman",
                        help="silverman | per-arm | fixed:<h>[,<h2>,...]")
    shared.add_argument("--tau", type=float, default=0.1)
    shared.add_argument("--kappa0", type=float, default=0.1)
    shared.add_argument("--kappa1", type=float, default=0.1)
    shared.add_argument("--boundary-radius", type=float, default=1.0)
    shared.add_argument("--output-dir", default=".")
    shared.add_argument("--seed", type=int, default=0)

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--input", help="CSV file with a header row")
    data.add_argument("--outcome", default="y")
    data.add_argument("--treatment", default="d")
    data.add_argument("--instrument", default="z")
    data.add_argument("--covariates", default="x",
                      help="comma-separated covariate columns")
    data.add_argument("--no-intercept", dest="intercept",
                      action="store_false", default=True)
    data.add_argument("--grid", action="store_true",
                      help="also write per-observation CSV output")

    parser = argparse.ArgumentParser(
        prog="ehiv",
        description="endogenous-heteroskedasticity IV estimation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", parents=[shared, data],
                           help="estimate on a CSV dataset")
    p_fit.add_argument("--se", default="plug-in",
                       help="plug-in | bootstrap | both | none")
    p_fit.add_argument("--bootstrap-reps", type=int, default=200)
    p_fit.add_argument("--exo", action="store_true",
                       help="also run the instrument-dispersion test")
    p_fit.add_argument("--perms", type=int, default=199)
    p_fit.add_argument("--cells", type=int, default=10)

    p_sim = sub.add_parser("simulate", parents=[shared],
                           help="Monte Carlo under the triangular DGP")
    p_sim.add_argument("--n", type=int, default=4000)
    p_sim.add_argument("--reps", type=int, default=500)
    p_sim.add_argument("--estimators", default="iv,ehiv")
    for name, default in (("beta0", 0.0), ("beta1", 1.0), ("beta2", 1.0),
                          ("lambda0", 0.5), ("r0", 0.5), ("rho0", 0.5)):
        p_sim.add_argument(f"--{name}", type=float, default=default)

    p_exo = sub.add_parser("test-exo", parents=[shared, data],
                           help="permutation test of residual dispersion "
                                "against the instrument")
    p_exo.add_argument("--perms", type=int, default=199)
    p_exo.add_argument("--cells", type=int, default=10)

    return parser, {"fit": p_fit, "simulate": p_sim, "test-exo": p_exo}


def _read_flat_config(path: str) -> dict[str, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    vals: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value, "
                              f"got {line!r}")
        key, _, value = line.partition("=")
        vals[key.strip().replace("-", "_")] = value.strip()
    return vals


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse_bool(raw: str, key: str) -> bool:
    low = raw.lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise ConfigError(f"config key {key}: expected a boolean, got {raw!r}")


def _apply_config_file(subparser, command: str, vals: dict[str, str]) -> None:
    actions = {a.dest: a for a in subparser._actions}
    defaults = {}
    for key, raw in vals.items():
        if key == "command":
            if raw != command:
                raise ConfigError(f"config file is for command {raw!r}, "
                                  f"but {command!r} was invoked")
            continue
        if key == "no_intercept":
            defaults["intercept"] = not _parse_bool(raw, key)
            continue
        action = actions.get(key)
        if action is None or key in ("help", "config"):
            # keys for the other subcommands are legal but inert, so a full
            # embedded config replays under any command
            if key in {f.name for f in dataclasses.fields(RunConfig)}:
                continue
            known = sorted(d for d in actions if d not in ("help", "config"))
            raise ConfigError(f"unknown config key {key!r}; known keys: "
                              f"{known}")
        if isinstance(action.default, bool):
            defaults[key] = _parse_bool(raw, key)
        elif action.type is not None:
            try:
                defaults[key] = action.type(raw)
            except ValueError:
                raise ConfigError(f"config key {key}: cannot parse "
                                  f"{raw!r}") from None
        else:
            defaults[key] = raw
    subparser.set_defaults(**defaults)


def run_cli(argv=None) -> int:
    """Parse arguments, dispatch, and map package errors onto exit codes."""
    parser, subparsers = _build_parser()
    try:
        try:
            ns = parser.parse_args(argv)
            if getattr(ns, "config", None):
                _apply_config_file(subparsers[ns.command], ns.command,
                                   _read_flat_config(ns.config))
                ns = parser.parse_args(argv)
        except SystemExit as exc:  # argparse usage errors print their own text
            return int(exc.code) if exc.code else 0
        rc = RunConfig.from_namespace(ns)
        dispatch = {"fit": _cmd_fit, "simulate": _cmd_simulate,
                    "test-exo": _cmd_test_exo}
        return dispatch[rc.command](rc)
    except ConfigError as exc:
        _emit_error("config", exc)
        return 2
    except DataError as exc:
        _emit_error("data", exc)
        return 3
    except EstimationError as exc:
        _emit_error("estimation", exc)
        return 4


def _emit_error(kind: str, exc: Exception) -> None:
    payload = {"error": kind, "type": type(exc).__name__, "message": str(exc)}
    print(json.dumps(payload), file=sys.stderr)


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
