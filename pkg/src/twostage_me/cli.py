"""Command-line front end for the two-stage analysis.

Subcommands
-----------
fit        two-stage fit with bias correction, bootstrap SEs, diagnostics
bootstrap  standalone bootstrap of the exposure-effect estimate
diagnose   compatibility checks only
simulate   Monte Carlo study of a built-in synthetic scenario

Every subcommand takes ``--config PATH`` (YAML). Any config key can be
overridden by an environment variable named ``TWOSTAGE_<KEY>``, with
``__`` separating nesting levels (``TWOSTAGE_BASIS__DF=10`` sets
``basis.df``); command-line flags override both. Unknown config keys are
rejected with a list of the offending names rather than ignored.

Input files are headered CSV. Monitors need columns ``x_coord``,
``y_coord``, ``value``, plus any covariate columns the basis references
and an optional cluster-label column; subjects need ``x_coord``,
``y_coord``, ``outcome``, the same covariate columns, and any
health-model covariate columns. One-dimensional data uses ``y_coord``
identically zero. An intercept is always prepended to the health model.

Every run writes ``manifest.json`` (config hash, seed, package and
library versions, output list) next to its results; apart from the
manifest timestamp, rerunning with the same config and seed reproduces
every output byte for byte.

Exit codes: 0 success; 2 configuration or parse failure; 3 numerical
failure (rank-deficient design, degenerate exposure, correction
blowup); 4 unreliable bootstrap (more than 5% of replicates failed;
results are still written).
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass

import numpy as np
import pandas as pd
import yaml

from .basis import BasisSpec, make_bspline_spec, make_covariates_spec, thinplate_basis
from .boot import MAX_FAILURE_RATE, _replicate_pass, bootstrap
from .datasets import MonitorDataset, SubjectDataset
from .diagnose import KS_THRESHOLD, R2_THRESHOLD, compatibility_report
from .errors import (
    AllReplicatesFailed,
    ConfigInvalid,
    CorrectionBlowup,
    DegenerateExposure,
    MissingCovariate,
    ParseError,
    RankDeficient,
    SingleCluster,
    SpectrumNegative,
    TooFewClusters,
    TwoStageError,
)
from .exposure import cv_r2
from .pipeline import prepare_two_stage, run_two_stage
from .simgen import METHODS, Scenario1D, Scenario2D, monte_carlo

ENV_PREFIX = "TWOSTAGE_"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_UNRELIABLE = 4

_NUMERICAL_ERRORS = (
    RankDeficient,
    CorrectionBlowup,
    DegenerateExposure,
    SingleCluster,
    TooFewClusters,
    SpectrumNegative,
    AllReplicatesFailed,
)

_BASIS_KINDS = ("covariates", "bspline", "thinplate")

# Allowed config keys, mirrored by the env-override namespace. A None
# value marks a nested table.
_ANALYSIS_SCHEMA = {
    "monitors": {},
    "subjects": {},
    "output": {},
    "cluster": {},
    "threads": {},
    "bias_correction": {},
    "health_covariates": {},
    "basis": {
        "kind": {},
        "covariates": {},
        "df": {},
        "intercept": {},
        "domain": {},
    },
    "bootstrap": {
        "enabled": {},
        "replicates": {},
        "seed": {},
    },
    "diagnostics": {
        "ks_threshold": {},
        "r2_threshold": {},
    },
}

_SIMULATE_SCHEMA = {
    "scenario": None,  # validated against the scenario dataclass fields
    "df": {},
    "methods": {},
    "replicates": {},
    "bootstrap_replicates": {},
    "seed": {},
    "compute_cv": {},
    "use_true_exposure": {},
    "keep_estimates": {},
    "output": {},
    "threads": {},
}


def _load_yaml(path: str) -> dict:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except yaml.YAMLError as err:
        raise ParseError(f"{path}: {err}") from err
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigInvalid(f"{path}: top level must be a mapping")
    return raw


def apply_env_overrides(cfg: dict, environ=None, prefix: str = ENV_PREFIX) -> dict:
    """Overlay TWOSTAGE_* environment variables onto a config dict.

    Key paths use ``__`` between nesting levels; values are parsed as
    YAML scalars, so numbers, booleans, and inline lists work.
    """
    environ = os.environ if environ is None else environ
    for name, raw in sorted(environ.items()):
        if not name.startswith(prefix) or name == prefix:
            continue
        path = name[len(prefix):].lower().split("__")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as err:
            raise ConfigInvalid(f"environment override {name}: {err}") from err
        node = cfg
        for part in path[:-1]:
            child = node.get(part)
            if not isinstance(child, dict):
                child = {}
                node[part] = child
            node = child
        node[path[-1]] = value
    return cfg


def _check_keys(cfg: dict, schema: dict, prefix: str = "") -> list[str]:
    unknown = []
    for key, value in cfg.items():
        label = f"{prefix}{key}"
        if key not in schema:
            unknown.append(label)
            continue
        sub = schema[key]
        if isinstance(value, dict) and isinstance(sub, dict) and sub:
            unknown.extend(_check_keys(value, sub, prefix=f"{label}."))
        elif isinstance(value, dict) and sub == {}:
            unknown.append(f"{label} (unexpected mapping)")
    return unknown


def _validate_keys(cfg: dict, schema: dict) -> None:
    unknown = _check_keys(cfg, schema)
    if unknown:
        raise ConfigInvalid("unknown config keys: " + ", ".join(sorted(unknown)))


def _require(cfg: dict, key: str, kind, what: str):
    if key not in cfg or cfg[key] is None:
        raise ConfigInvalid(f"config key '{key}' ({what}) is required")
    value = cfg[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        raise ConfigInvalid(
            f"config key '{key}' must be {what}, got {value!r}"
        )
    return value


def _get(cfg: dict, key: str, default, kind, what: str):
    if key not in cfg or cfg[key] is None:
        return default
    return _require(cfg, key, kind, what)


def _name_list(value, key: str) -> tuple[str, ...]:
    if value is None:
        return ()
    if isinstance(value, str):
        return (value,)
    if isinstance(value, (list, tuple)) and all(isinstance(v, str) for v in value):
        return tuple(value)
    raise ConfigInvalid(f"config key '{key}' must be a list of column names")


@dataclass(frozen=True)
class AnalysisConfig:
    """Resolved configuration for fit / bootstrap / diagnose runs."""

    monitors_path: str
    subjects_path: str
    output_dir: str
    cluster: str | None
    basis_kind: str
    basis_covariates: tuple[str, ...]
    basis_df: int | None
    basis_intercept: bool
    basis_domain: tuple[float, float] | None
    health_covariates: tuple[str, ...]
    bias_correction: bool
    boot_enabled: bool
    boot_replicates: int
    boot_seed: int
    ks_threshold: float
    r2_threshold: float
    threads: int

    @classmethod
    def from_dict(cls, cfg: dict) -> "AnalysisConfig":
        _validate_keys(cfg, _ANALYSIS_SCHEMA)
        basis = _get(cfg, "basis", None, dict, "a mapping")
        if basis is None:
            raise ConfigInvalid("config key 'basis' (a mapping) is required")
        kind = _require(basis, "kind", str, "one of " + "/".join(_BASIS_KINDS))
        if kind not in _BASIS_KINDS:
            raise ConfigInvalid(
                f"basis.kind must be one of {_BASIS_KINDS}, got {kind!r}"
            )
        df = _get(basis, "df", None, int, "an integer")
        if kind == "covariates":
            if df not in (None, 0):
                raise ConfigInvalid(
                    "basis.df must be absent (or 0) for kind 'covariates'"
                )
            df = None
        elif df is None:
            raise ConfigInvalid(f"basis.df is required for kind '{kind}'")
        domain = basis.get("domain")
        if domain is not None:
            if (
                not isinstance(domain, (list, tuple))
                or len(domain) != 2
                or not all(isinstance(v, (int, float)) for v in domain)
            ):
                raise ConfigInvalid("basis.domain must be [low, high]")
            domain = (float(domain[0]), float(domain[1]))
        boot = _get(cfg, "bootstrap", {}, dict, "a mapping")
        diag = _get(cfg, "diagnostics", {}, dict, "a mapping")
        return cls(
            monitors_path=_require(cfg, "monitors", str, "a CSV path"),
            subjects_path=_require(cfg, "subjects", str, "a CSV path"),
            output_dir=_get(cfg, "output", ".", str, "a directory"),
            cluster=_get(cfg, "cluster", None, str, "a column name"),
            basis_kind=kind,
            basis_covariates=_name_list(basis.get("covariates"), "basis.covariates"),
            basis_df=df,
            basis_intercept=_get(basis, "intercept", kind == "covariates", bool, "a boolean"),
            basis_domain=domain,
            health_covariates=_name_list(
                cfg.get("health_covariates"), "health_covariates"
            ),
            bias_correction=_get(cfg, "bias_correction", True, bool, "a boolean"),
            boot_enabled=_get(boot, "enabled", True, bool, "a boolean"),
            boot_replicates=_get(boot, "replicates", 200, int, "an integer"),
            boot_seed=_get(boot, "seed", 0, int, "an integer"),
            ks_threshold=_get(diag, "ks_threshold", KS_THRESHOLD, float, "a number"),
            r2_threshold=_get(diag, "r2_threshold", R2_THRESHOLD, float, "a number"),
            threads=_get(cfg, "threads", 1, int, "an integer"),
        )

    def exposure_model_label(self) -> str:
        if self.basis_kind == "covariates":
            return "covariates_only"
        return f"{self.basis_kind}_df{self.basis_df}"


def _apply_common_flags(cfg: dict, args, *, simulate: bool) -> dict:
    if args.output is not None:
        cfg["output"] = args.output
    if args.threads is not None:
        cfg["threads"] = args.threads
    if simulate:
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.bootstrap_reps is not None:
            cfg["bootstrap_replicates"] = args.bootstrap_reps
        if args.no_bias_correction:
            methods = cfg.get("methods", list(METHODS))
            cfg["methods"] = [
                m for m in methods if m not in ("bias_only", "bias+boot")
            ]
    else:
        if args.seed is not None:
            cfg.setdefault("bootstrap", {})["seed"] = args.seed
        if args.bootstrap_reps is not None:
            cfg.setdefault("bootstrap", {})["replicates"] = args.bootstrap_reps
        if args.no_bias_correction:
            cfg["bias_correction"] = False
    return cfg


def _read_csv(path: str) -> pd.DataFrame:
    try:
        return pd.read_csv(path)
    except pd.errors.EmptyDataError as err:
        raise ParseError(f"{path}: empty file") from err
    except pd.errors.ParserError as err:
        raise ParseError(f"{path}: {err}") from err


def _numeric_columns(frame: pd.DataFrame, path: str, names) -> np.ndarray:
    missing = [n for n in names if n not in frame.columns]
    if missing:
        raise ConfigInvalid(
            f"{path}: missing column(s) {', '.join(missing)}; "
            f"available: {', '.join(map(str, frame.columns))}"
        )
    cols = []
    for name in names:
        try:
            cols.append(pd.to_numeric(frame[name], errors="raise").to_numpy(float))
        except (ValueError, TypeError) as err:
            raise ParseError(f"{path}: column '{name}' is not numeric: {err}") from err
    return np.column_stack(cols) if cols else np.empty((len(frame), 0))


def load_monitors(cfg: AnalysisConfig) -> MonitorDataset:
    frame = _read_csv(cfg.monitors_path)
    base = _numeric_columns(
        frame, cfg.monitors_path, ("x_coord", "y_coord", "value")
    )
    cov = _numeric_columns(frame, cfg.monitors_path, cfg.basis_covariates)
    clusters = None
    if cfg.cluster is not None:
        if cfg.cluster not in frame.columns:
            raise ConfigInvalid(
                f"{cfg.monitors_path}: cluster column '{cfg.cluster}' not found"
            )
        clusters = frame[cfg.cluster].to_numpy()
    return MonitorDataset(
        locations=base[:, :2],
        values=base[:, 2],
        covariates=cov,
        covariate_names=cfg.basis_covariates,
        clusters=clusters,
    )


def load_subjects(cfg: AnalysisConfig) -> SubjectDataset:
    frame = _read_csv(cfg.subjects_path)
    base = _numeric_columns(
        frame, cfg.subjects_path, ("x_coord", "y_coord", "outcome")
    )
    cov = _numeric_columns(frame, cfg.subjects_path, cfg.basis_covariates)
    health = _numeric_columns(frame, cfg.subjects_path, cfg.health_covariates)
    n = len(frame)
    return SubjectDataset(
        locations=base[:, :2],
        outcomes=base[:, 2],
        health_covariates=np.column_stack([np.ones(n), health]),
        health_covariate_names=("intercept", *cfg.health_covariates),
        exposure_covariates=cov,
        exposure_covariate_names=cfg.basis_covariates,
    )


def write_monitors_csv(monitors: MonitorDataset, path: str) -> None:
    """Write a monitor dataset in the CSV layout the CLI reads back."""
    frame = pd.DataFrame(
        {
            "x_coord": monitors.locations[:, 0],
            "y_coord": monitors.locations[:, 1],
            "value": monitors.values,
        }
    )
    for j, name in enumerate(monitors.covariate_names):
        frame[name] = monitors.covariates[:, j]
    if monitors.clusters is not None:
        frame["cluster"] = monitors.clusters
    frame.to_csv(path, index=False)


def write_subjects_csv(subjects: SubjectDataset, path: str) -> None:
    """Write a subject dataset in the CSV layout the CLI reads back.

    The health-model intercept column is dropped (the loader always
    prepends one); other columns keep their names.
    """
    frame = pd.DataFrame(
        {
            "x_coord": subjects.locations[:, 0],
            "y_coord": subjects.locations[:, 1],
            "outcome": subjects.outcomes,
        }
    )
    for j, name in enumerate(subjects.exposure_covariate_names):
        frame[name] = subjects.exposure_covariates[:, j]
    for j, name in enumerate(subjects.health_covariate_names):
        col = subjects.health_covariates[:, j]
        if name == "intercept" or np.ptp(col) == 0.0:
            continue
        if name not in frame.columns:
            frame[name] = col
    frame.to_csv(path, index=False)


def build_spec(
    cfg: AnalysisConfig, monitors: MonitorDataset, subjects: SubjectDataset
) -> BasisSpec:
    if cfg.basis_kind == "covariates":
        return make_covariates_spec(cfg.basis_covariates, intercept=cfg.basis_intercept)
    if cfg.basis_kind == "bspline":
        domain = cfg.basis_domain
        if domain is None:
            xs = np.concatenate(
                [monitors.locations[:, 0], subjects.locations[:, 0]]
            )
            domain = (float(xs.min()), float(xs.max()))
        return make_bspline_spec(
            cfg.basis_df,
            domain,
            covariate_names=cfg.basis_covariates,
            intercept=cfg.basis_intercept,
        )
    return thinplate_basis(
        monitors.locations,
        cfg.basis_df,
        covariate_names=cfg.basis_covariates,
        intercept=cfg.basis_intercept,
    )


def _nan_sd(values: np.ndarray) -> float:
    ok = np.isfinite(values)
    if ok.sum() < 2:
        return float("nan")
    return float(np.std(values[ok], ddof=1))


def _json_ready(obj):
    if isinstance(obj, dict):
        return {k: _json_ready(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_ready(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_json_ready(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    return obj


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(_json_ready(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_manifest(
    outdir: str, command: str, cfg_dict: dict, seed, outputs: list[str]
) -> str:
    """Write manifest.json recording everything needed to reproduce the
    run; the timestamp field is informational and excluded from the
    byte-reproducibility contract."""
    canon = json.dumps(_json_ready(cfg_dict), sort_keys=True)
    versions = {
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "pandas": pd.__version__,
    }
    try:
        import scipy

        versions["scipy"] = scipy.__version__
    except ImportError:  # pragma: no cover
        pass
    try:
        from importlib.metadata import version as _pkg_version

        versions["twostage-me"] = _pkg_version("twostage-me")
    except Exception:  # pragma: no cover
        versions["twostage-me"] = "unknown"
    path = os.path.join(outdir, "manifest.json")
    _write_json(
        path,
        {
            "command": command,
            "config": cfg_dict,
            "config_sha256": hashlib.sha256(canon.encode()).hexdigest(),
            "seed": seed,
            "versions": versions,
            "outputs": sorted(os.path.basename(p) for p in outputs),
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        },
    )
    return path


def _prepare_analysis(args) -> tuple[AnalysisConfig, dict]:
    raw = _load_yaml(args.config)
    apply_env_overrides(raw)
    _apply_common_flags(raw, args, simulate=False)
    cfg = AnalysisConfig.from_dict(raw)
    if cfg.boot_enabled and cfg.boot_replicates < 50:
        raise ConfigInvalid(
            f"bootstrap.replicates must be at least 50, got {cfg.boot_replicates}"
        )
    os.makedirs(cfg.output_dir, exist_ok=True)
    return cfg, raw


def cmd_fit(args) -> int:
    cfg, raw = _prepare_analysis(args)
    monitors = load_monitors(cfg)
    subjects = load_subjects(cfg)
    spec = build_spec(cfg, monitors, subjects)

    diag = compatibility_report(
        monitors,
        subjects,
        spec,
        ks_threshold=cfg.ks_threshold,
        r2_threshold=cfg.r2_threshold,
    )
    result = run_two_stage(
        monitors, subjects, spec, bias_correct=cfg.bias_correction
    )
    model_cv = cv_r2(monitors, spec)
    corrected = result.corrected
    bias = corrected.bias

    se_boot_unc = float("nan")
    se_boot_bc = float("nan")
    n_failed_unc = n_failed_bc = 0
    reliable = True
    if cfg.boot_enabled:
        prep = prepare_two_stage(monitors, subjects, spec)
        betas_unc, betas_bc = _replicate_pass(
            prep,
            cfg.boot_replicates,
            cfg.boot_seed,
            bias_correct=cfg.bias_correction,
            track_both=cfg.bias_correction,
            n_jobs=cfg.threads,
        )
        se_boot_unc = _nan_sd(betas_unc)
        n_failed_unc = int((~np.isfinite(betas_unc)).sum())
        if cfg.bias_correction:
            se_boot_bc = _nan_sd(betas_bc)
            n_failed_bc = int((~np.isfinite(betas_bc)).sum())
        headline_failed = n_failed_bc if cfg.bias_correction else n_failed_unc
        reliable = headline_failed / cfg.boot_replicates <= MAX_FAILURE_RATE

    label = cfg.exposure_model_label()
    rows = [
        {
            "exposure_model": label,
            "method": "no correction",
            "beta": corrected.beta_hat,
            "se": corrected.se_model,
            "cv_r2": model_cv,
        }
    ]
    if cfg.boot_enabled:
        rows.append(
            {
                "exposure_model": label,
                "method": "bootstrap standard error",
                "beta": corrected.beta_hat,
                "se": se_boot_unc,
                "cv_r2": model_cv,
            }
        )
    if cfg.bias_correction:
        if cfg.boot_enabled:
            rows.append(
                {
                    "exposure_model": label,
                    "method": "bias correction + bootstrap",
                    "beta": corrected.beta_bc,
                    "se": se_boot_bc,
                    "cv_r2": model_cv,
                }
            )
        else:
            rows.append(
                {
                    "exposure_model": label,
                    "method": "bias correction (model SE)",
                    "beta": corrected.beta_bc,
                    "se": corrected.se_model,
                    "cv_r2": model_cv,
                }
            )
    for row in rows:
        row["ci95_lo"] = row["beta"] - 1.96 * row["se"]
        row["ci95_hi"] = row["beta"] + 1.96 * row["se"]
    table = pd.DataFrame(rows)

    payload = {
        "n_monitors": monitors.n,
        "n_subjects": subjects.n,
        "exposure_model": label,
        "exposure": {
            "columns": list(result.exposure.design.column_names),
            "gamma_hat": result.exposure.gamma_hat,
            "cv_r2": model_cv,
        },
        "health": {
            "beta_hat": corrected.beta_hat,
            "se_model": corrected.se_model,
            "ci95_model": [
                corrected.beta_hat - 1.96 * corrected.se_model,
                corrected.beta_hat + 1.96 * corrected.se_model,
            ],
            "covariate_names": list(subjects.health_covariate_names),
            "beta_z_hat": corrected.beta_z_hat,
        },
        "correction": {
            "applied": cfg.bias_correction,
            "b_hat": bias.b_hat,
            "terms": {
                "coefficient_bias": bias.term1,
                "prediction_variance": bias.term2,
                "denominator_covariance": bias.term3,
            },
            "beta_bc": corrected.beta_bc,
            "ci95_model": [
                corrected.beta_bc - 1.96 * corrected.se_model,
                corrected.beta_bc + 1.96 * corrected.se_model,
            ],
        },
        "bootstrap": {
            "enabled": cfg.boot_enabled,
            "replicates": cfg.boot_replicates if cfg.boot_enabled else 0,
            "seed": cfg.boot_seed,
            "se_uncorrected": se_boot_unc,
            "se_corrected": se_boot_bc if cfg.bias_correction else None,
            "n_failed_uncorrected": n_failed_unc,
            "n_failed_corrected": n_failed_bc if cfg.bias_correction else None,
            "reliable": reliable,
        },
        "diagnostics": diag.to_dict(),
        "methods_table": rows,
    }

    out = cfg.output_dir
    result_path = os.path.join(out, "result.json")
    _write_json(result_path, payload)
    table_path = os.path.join(out, "results_table.csv")
    table.to_csv(table_path, index=False)
    pred_path = os.path.join(out, "predictions.csv")
    pd.DataFrame(
        {
            "x_coord": subjects.locations[:, 0],
            "y_coord": subjects.locations[:, 1],
            "w_hat": result.w_hat,
        }
    ).to_csv(pred_path, index=False)
    outputs = [result_path, table_path, pred_path]
    write_manifest(out, "fit", raw, cfg.boot_seed, outputs)
    if cfg.boot_enabled and not reliable:
        print(
            f"warning: {max(n_failed_unc, n_failed_bc)} of "
            f"{cfg.boot_replicates} bootstrap replicates failed",
            file=sys.stderr,
        )
        return EXIT_UNRELIABLE
    return EXIT_OK


def cmd_bootstrap(args) -> int:
    cfg, raw = _prepare_analysis(args)
    if not cfg.boot_enabled:
        raise ConfigInvalid("bootstrap.enabled must not be false for 'bootstrap'")
    monitors = load_monitors(cfg)
    subjects = load_subjects(cfg)
    spec = build_spec(cfg, monitors, subjects)
    result = bootstrap(
        monitors,
        subjects,
        spec,
        cfg.boot_replicates,
        bias_correct=cfg.bias_correction,
        seed=cfg.boot_seed,
        n_jobs=cfg.threads,
    )
    out = cfg.output_dir
    json_path = os.path.join(out, "bootstrap.json")
    _write_json(
        json_path,
        {
            "n_replicates": result.n_replicates,
            "se": result.se,
            "ci95": list(result.ci95),
            "n_failed": result.n_failed,
            "bias_corrected": result.bias_corrected,
            "seed": result.seed,
            "reliable": result.reliable,
        },
    )
    reps_path = os.path.join(out, "replicates.csv")
    pd.DataFrame(
        {
            "replicate": np.arange(result.n_replicates),
            "beta": result.replicate_betas,
        }
    ).to_csv(reps_path, index=False)
    write_manifest(out, "bootstrap", raw, cfg.boot_seed, [json_path, reps_path])
    if not result.reliable:
        print(
            f"warning: {result.n_failed} of {result.n_replicates} bootstrap "
            "replicates failed",
            file=sys.stderr,
        )
        return EXIT_UNRELIABLE
    return EXIT_OK


def cmd_diagnose(args) -> int:
    cfg, raw = _prepare_analysis(args)
    monitors = load_monitors(cfg)
    subjects = load_subjects(cfg)
    spec = build_spec(cfg, monitors, subjects)
    report = compatibility_report(
        monitors,
        subjects,
        spec,
        ks_threshold=cfg.ks_threshold,
        r2_threshold=cfg.r2_threshold,
    )
    out = cfg.output_dir
    json_path = os.path.join(out, "diagnostics.json")
    with open(json_path, "w") as fh:
        fh.write(report.to_json())
        fh.write("\n")
    text_path = os.path.join(out, "diagnostics.txt")
    text = report.to_text()
    with open(text_path, "w") as fh:
        fh.write(text)
        fh.write("\n")
    print(text)
    write_manifest(out, "diagnose", raw, None, [json_path, text_path])
    return EXIT_OK


def _build_scenario(section) -> Scenario1D | Scenario2D:
    if not isinstance(section, dict):
        raise ConfigInvalid("config key 'scenario' (a mapping) is required")
    section = dict(section)
    kind = section.pop("kind", None)
    if kind not in ("one_d", "two_d"):
        raise ConfigInvalid(
            f"scenario.kind must be 'one_d' or 'two_d', got {kind!r}"
        )
    cls = Scenario1D if kind == "one_d" else Scenario2D
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigInvalid(
            "unknown config keys: "
            + ", ".join(f"scenario.{k}" for k in unknown)
        )
    for key in ("covariate_coeffs",):
        if key in section and isinstance(section[key], list):
            section[key] = tuple(section[key])
    try:
        return cls(**section)
    except TypeError as err:
        raise ConfigInvalid(f"scenario: {err}") from err


def cmd_simulate(args) -> int:
    raw = _load_yaml(args.config)
    apply_env_overrides(raw)
    _apply_common_flags(raw, args, simulate=True)
    _validate_keys(raw, _SIMULATE_SCHEMA)
    scenario = _build_scenario(raw.get("scenario"))
    df_cfg = raw.get("df")
    if df_cfg is None:
        df_list = [None]
    elif isinstance(df_cfg, int):
        df_list = [df_cfg]
    elif isinstance(df_cfg, list) and all(isinstance(v, int) for v in df_cfg):
        df_list = list(df_cfg)
    else:
        raise ConfigInvalid("df must be an integer or a list of integers")
    methods_cfg = raw.get("methods")
    if methods_cfg is None:
        methods = METHODS
    elif isinstance(methods_cfg, list) and all(
        isinstance(m, str) for m in methods_cfg
    ):
        methods = tuple(methods_cfg)
    else:
        raise ConfigInvalid("methods must be a list of method names")
    M = _get(raw, "replicates", 1000, int, "an integer")
    B = _get(raw, "bootstrap_replicates", 100, int, "an integer")
    seed = _get(raw, "seed", 0, int, "an integer")
    compute_cv = _get(raw, "compute_cv", 0, int, "an integer")
    use_true = _get(raw, "use_true_exposure", False, bool, "a boolean")
    keep_est = _get(raw, "keep_estimates", True, bool, "a boolean")
    outdir = _get(raw, "output", ".", str, "a directory")
    threads = _get(raw, "threads", 1, int, "an integer")
    os.makedirs(outdir, exist_ok=True)

    frames = []
    estimate_frames = []
    payload_rows = []
    for df in df_list:
        report = monte_carlo(
            scenario,
            methods,
            M=M,
            B=B,
            seed=seed,
            df=df,
            use_true_exposure=use_true,
            compute_cv=compute_cv,
            n_jobs=threads,
            keep_estimates=keep_est and not use_true,
        )
        frame = report.to_frame()
        frame.insert(2, "mean_oos_r2", report.mean_oos_r2)
        frame.insert(3, "mean_cv_r2", report.mean_cv_r2)
        frames.append(frame)
        payload_rows.append(json.loads(report.to_json()))
        if report.estimates is not None:
            est = report.estimates.copy()
            est.insert(0, "df", report.df)
            estimate_frames.append(est)

    stacked = pd.concat(frames, ignore_index=True)
    report_path = os.path.join(outdir, "mc_report.csv")
    stacked.to_csv(report_path, index=False)
    json_path = os.path.join(outdir, "mc_report.json")
    _write_json(json_path, {"runs": payload_rows})
    outputs = [report_path, json_path]

    coverage = stacked.pivot_table(
        index="method", columns="df", values="coverage", sort=False
    )
    coverage.columns = [f"df_{c}" for c in coverage.columns]
    cov_path = os.path.join(outdir, "coverage_by_df.csv")
    coverage.reset_index().to_csv(cov_path, index=False)
    outputs.append(cov_path)

    if estimate_frames:
        est_all = pd.concat(estimate_frames, ignore_index=True)
        est_path = os.path.join(outdir, "estimates.csv")
        est_all.to_csv(est_path, index=False)
        outputs.append(est_path)
        density_rows = []
        for df_val, group in est_all.groupby("df"):
            for col in ("beta_hat", "beta_bc"):
                vals = group[col].to_numpy()
                vals = vals[np.isfinite(vals)]
                if vals.size < 2 or np.ptp(vals) == 0:
                    continue
                hist, edges = np.histogram(vals, bins=40, density=True)
                centers = 0.5 * (edges[:-1] + edges[1:])
                for c, d in zip(centers, hist):
                    density_rows.append(
                        {
                            "df": df_val,
                            "estimator": col,
                            "center": c,
                            "density": d,
                        }
                    )
        if density_rows:
            dens_path = os.path.join(outdir, "density_by_df.csv")
            pd.DataFrame(density_rows).to_csv(dens_path, index=False)
            outputs.append(dens_path)

    write_manifest(outdir, "simulate", raw, seed, outputs)
    return EXIT_OK


def _add_common_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="YAML config file")
    parser.add_argument("--seed", type=int, help="override the RNG seed")
    parser.add_argument(
        "--threads", type=int, help="cap worker processes for resampling loops"
    )
    parser.add_argument("--output", help="override the output directory")
    parser.add_argument(
        "--no-bias-correction",
        action="store_true",
        help="report the uncorrected estimate (and skip corrected methods)",
    )
    parser.add_argument(
        "--bootstrap-reps", type=int, help="override the bootstrap replicate count"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="twostage-me",
        description=(
            "Two-stage exposure/health regression with measurement-error "
            "bias correction, bootstrap standard errors, and compatibility "
            "diagnostics."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, help_text in (
        ("fit", cmd_fit, "two-stage fit with correction, bootstrap, diagnostics"),
        ("bootstrap", cmd_bootstrap, "standalone bootstrap of the exposure effect"),
        ("diagnose", cmd_diagnose, "compatibility diagnostics only"),
        ("simulate", cmd_simulate, "Monte Carlo study of a synthetic scenario"),
    ):
        sp = sub.add_parser(name, help=help_text)
        _add_common_args(sp)
        sp.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigInvalid, ParseError, MissingCovariate, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except _NUMERICAL_ERRORS as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except TwoStageError as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
