"""Compatibility diagnostics for transporting the exposure model.

Plugging predictions from a monitor-fitted exposure surface into a
health regression is only safe when two conditions hold: every column of
the exposure design must have the same distribution at monitor and
subject locations, and any spatially structured health-model covariate
must be explainable by that design. Violations of the first push the
health-effect estimate away from the null, violations of the second pull
it toward the null, so both are worth checking before any fit.

The checks here are deterministic, scriptable stand-ins for the visual
inspection usually recommended: a two-sample Kolmogorov-Smirnov
statistic with a decile table per design column, and an R-squared of
each non-constant health covariate regressed on the exposure design at
subject locations. Thresholds are configurable and always reported next
to the flags they produced, never silently applied. The span check runs
against observed covariates, whose measurement noise bounds the
attainable R-squared below one, so its default threshold is a heuristic,
not a test level.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.stats import ks_2samp

from .basis import BasisSpec
from .datasets import MonitorDataset, SubjectDataset
from .exposure import monitor_design, subject_design
from .regress import ols_fit

KS_THRESHOLD = 0.25
R2_THRESHOLD = 0.95
QUANTILE_PROBS = tuple(np.round(np.linspace(0.0, 1.0, 11), 1))


@dataclass(frozen=True, eq=False)
class ColumnComparison:
    """Distribution match of one exposure-design column across the two
    location sets (condition 1)."""

    name: str
    ks: float
    monitor_quantiles: tuple[float, ...]
    subject_quantiles: tuple[float, ...]
    flagged: bool


@dataclass(frozen=True, eq=False)
class SpanCheck:
    """Fraction of one health covariate's variance captured by the
    exposure design at subject locations (condition 2)."""

    name: str
    r2: float
    flagged: bool


@dataclass(frozen=True, eq=False)
class CompatibilityReport:
    """Joint diagnostics bundle with the thresholds that produced it."""

    distribution_checks: tuple[ColumnComparison, ...]
    span_checks: tuple[SpanCheck, ...]
    ks_threshold: float
    r2_threshold: float

    @property
    def n_flagged(self) -> int:
        return sum(c.flagged for c in self.distribution_checks) + sum(
            c.flagged for c in self.span_checks
        )

    @property
    def compatible(self) -> bool:
        return self.n_flagged == 0

    def to_dict(self) -> dict:
        return {
            "ks_threshold": self.ks_threshold,
            "r2_threshold": self.r2_threshold,
            "compatible": self.compatible,
            "n_flagged": self.n_flagged,
            "quantile_probs": list(QUANTILE_PROBS),
            "distribution_checks": [
                {
                    "column": c.name,
                    "ks": c.ks,
                    "flagged": c.flagged,
                    "monitor_quantiles": list(c.monitor_quantiles),
                    "subject_quantiles": list(c.subject_quantiles),
                }
                for c in self.distribution_checks
            ],
            "span_checks": [
                {"covariate": c.name, "r2": c.r2, "flagged": c.flagged}
                for c in self.span_checks
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        lines = [
            "Compatibility diagnostics",
            "=========================",
            "",
            f"Condition 1: exposure-design columns, monitor vs subject "
            f"locations (flag when KS > {self.ks_threshold:g})",
        ]
        width = max(
            [len(c.name) for c in self.distribution_checks] + [6]
        )
        for c in self.distribution_checks:
            mark = "FLAG" if c.flagged else "ok"
            lines.append(f"  {c.name:<{width}}  KS = {c.ks:6.3f}  {mark}")
            mq = "  ".join(f"{v:9.3g}" for v in c.monitor_quantiles)
            sq = "  ".join(f"{v:9.3g}" for v in c.subject_quantiles)
            lines.append(f"  {'':{width}}  deciles (monitor): {mq}")
            lines.append(f"  {'':{width}}  deciles (subject): {sq}")
        lines.append("")
        lines.append(
            f"Condition 2: health covariates regressed on the exposure "
            f"design (flag when R^2 < {self.r2_threshold:g})"
        )
        if not self.span_checks:
            lines.append("  (no non-constant health covariates)")
        for c in self.span_checks:
            mark = "FLAG" if c.flagged else "ok"
            lines.append(f"  {c.name:<{width}}  R^2 = {c.r2:7.4f}  {mark}")
        lines.append("")
        verdict = (
            "no compatibility flags"
            if self.compatible
            else f"{self.n_flagged} check(s) flagged"
        )
        lines.append(f"Result: {verdict}.")
        return "\n".join(lines)


def _quantiles(values: np.ndarray) -> tuple[float, ...]:
    return tuple(float(v) for v in np.quantile(values, QUANTILE_PROBS))


def check_condition1(
    monitors: MonitorDataset,
    subjects: SubjectDataset,
    spec: BasisSpec,
    threshold: float = KS_THRESHOLD,
) -> tuple[ColumnComparison, ...]:
    """Compare each exposure-design column between the location sets.

    Evaluates the full design (named covariates and spline columns) at
    monitor and at subject locations and reports the two-sample
    Kolmogorov-Smirnov statistic and deciles per column. Constant
    columns compare as KS = 0. Raises MissingCovariate when the spec
    names a column either dataset lacks.
    """
    mdm = monitor_design(monitors, spec)
    sdm = subject_design(subjects, spec)
    checks = []
    for j, name in enumerate(mdm.column_names):
        mcol = mdm.values[:, j]
        scol = sdm.values[:, j]
        if np.ptp(mcol) == 0.0 and np.ptp(scol) == 0.0 and mcol[0] == scol[0]:
            ks = 0.0
        else:
            ks = float(ks_2samp(mcol, scol).statistic)
        checks.append(
            ColumnComparison(
                name=name,
                ks=ks,
                monitor_quantiles=_quantiles(mcol),
                subject_quantiles=_quantiles(scol),
                flagged=ks > threshold,
            )
        )
    return tuple(checks)


def check_condition2(
    subjects: SubjectDataset,
    spec: BasisSpec,
    threshold: float = R2_THRESHOLD,
) -> tuple[SpanCheck, ...]:
    """Regress each non-constant health covariate on the exposure design.

    Reports the R-squared per covariate at subject locations; constant
    (intercept) columns are skipped. Raises RankDeficient when the
    exposure design is singular at the subject locations.
    """
    sdm = subject_design(subjects, spec)
    Z = subjects.health_covariates
    names = subjects.health_covariate_names or tuple(
        f"z{j}" for j in range(Z.shape[1])
    )
    checks = []
    for j in range(Z.shape[1]):
        z = Z[:, j]
        sst = float(np.sum((z - z.mean()) ** 2))
        if sst == 0.0:
            continue
        fit = ols_fit(sdm.values, z)
        r2 = 1.0 - float(fit.residuals @ fit.residuals) / sst
        checks.append(SpanCheck(name=names[j], r2=r2, flagged=r2 < threshold))
    return tuple(checks)


def compatibility_report(
    monitors: MonitorDataset,
    subjects: SubjectDataset,
    spec: BasisSpec,
    *,
    ks_threshold: float = KS_THRESHOLD,
    r2_threshold: float = R2_THRESHOLD,
) -> CompatibilityReport:
    """Run both compatibility checks and bundle them with thresholds."""
    return CompatibilityReport(
        distribution_checks=check_condition1(monitors, subjects, spec, ks_threshold),
        span_checks=check_condition2(subjects, spec, r2_threshold),
        ks_threshold=ks_threshold,
        r2_threshold=r2_threshold,
    )
