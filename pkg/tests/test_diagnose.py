"""Compatibility diagnostics: distribution match and span checks."""

import json

import numpy as np
import pytest

from twostage_me.basis import make_bspline_spec
from twostage_me.datasets import MonitorDataset, SubjectDataset
from twostage_me.diagnose import (
    KS_THRESHOLD,
    QUANTILE_PROBS,
    R2_THRESHOLD,
    check_condition1,
    check_condition2,
    compatibility_report,
)
from twostage_me.errors import MissingCovariate
from twostage_me.simgen import Scenario1D, basis_1d, gen_scenario_1d


def _subjects_at(s, health=None, health_names=()):
    n = len(s)
    if health is None:
        health = np.ones((n, 1))
        health_names = ("intercept",)
    return SubjectDataset(
        locations=np.asarray(s, dtype=float),
        outcomes=np.zeros(n),
        health_covariates=health,
        health_covariate_names=health_names,
    )


def test_identical_locations_give_zero_ks():
    s = np.linspace(0.5, 9.5, 120)
    monitors = MonitorDataset(locations=s, values=np.sin(s))
    subjects = _subjects_at(s)
    spec = make_bspline_spec(5, (0.0, 10.0))
    report = compatibility_report(monitors, subjects, spec)
    assert all(c.ks == 0.0 for c in report.distribution_checks)
    assert not any(c.flagged for c in report.distribution_checks)
    assert report.span_checks == ()  # intercept-only health model
    assert report.compatible and report.n_flagged == 0


def test_disjoint_ranges_flagged_at_ks_one():
    rng = np.random.default_rng(0)
    sm = rng.uniform(0.0, 4.0, 150)
    ss = rng.uniform(6.0, 10.0, 200)
    monitors = MonitorDataset(locations=sm, values=np.zeros(150))
    subjects = _subjects_at(ss)
    spec = make_bspline_spec(5, (0.0, 10.0))
    checks = check_condition1(monitors, subjects, spec)
    assert max(c.ks for c in checks) == 1.0
    assert any(c.flagged for c in checks)
    report = compatibility_report(monitors, subjects, spec)
    assert not report.compatible and report.n_flagged >= 1


def test_matched_design_passes_uniform_design_flags():
    matched = Scenario1D(g_kind="matched")
    m, s, _ = gen_scenario_1d(matched, seed=0)
    ok = check_condition1(m, s, basis_1d(matched, 9))
    assert not any(c.flagged for c in ok)

    uniform = Scenario1D(g_kind="uniform")
    m, s, _ = gen_scenario_1d(uniform, seed=0)
    bad = check_condition1(m, s, basis_1d(uniform, 9))
    assert max(c.ks for c in bad) > KS_THRESHOLD
    assert any(c.flagged for c in bad)


def test_span_check_exact_when_covariate_in_design():
    sc = Scenario1D(extra_covariate="sin_in_both")
    _, subjects, _ = gen_scenario_1d(sc, seed=0)
    spans = check_condition2(subjects, basis_1d(sc, 5))
    assert len(spans) == 1 and spans[0].name == "sin_s"
    assert spans[0].r2 == pytest.approx(1.0, abs=1e-9)
    assert not spans[0].flagged


def test_span_check_flags_unspanned_covariate():
    sc = Scenario1D(extra_covariate="sin_in_health_only")
    _, subjects, _ = gen_scenario_1d(sc, seed=0)
    tight = check_condition2(subjects, basis_1d(sc, 5))
    assert tight[0].r2 < R2_THRESHOLD and tight[0].flagged
    assert tight[0].r2 > 0.85  # close call, which is the point
    rich = check_condition2(subjects, basis_1d(sc, 9))
    assert rich[0].r2 > R2_THRESHOLD and not rich[0].flagged


def test_thresholds_are_configurable_and_reported():
    sc = Scenario1D(g_kind="uniform", extra_covariate="sin_in_health_only")
    m, s, _ = gen_scenario_1d(sc, seed=0)
    spec = basis_1d(sc, 5)
    strict = compatibility_report(m, s, spec)
    lax = compatibility_report(m, s, spec, ks_threshold=1.1, r2_threshold=0.5)
    assert not strict.compatible
    assert lax.compatible
    assert lax.ks_threshold == 1.1 and lax.r2_threshold == 0.5
    assert strict.ks_threshold == KS_THRESHOLD
    # Statistics themselves are threshold-free.
    for a, b in zip(strict.distribution_checks, lax.distribution_checks):
        assert a.ks == b.ks


def test_report_serialization_round_trip():
    sc = Scenario1D(extra_covariate="sin_in_health_only")
    m, s, _ = gen_scenario_1d(sc, seed=0)
    report = compatibility_report(m, s, basis_1d(sc, 5))
    d = report.to_dict()
    assert json.loads(report.to_json()) == d
    assert d["quantile_probs"] == list(QUANTILE_PROBS)
    assert len(d["quantile_probs"]) == 11
    for check in d["distribution_checks"]:
        mq = check["monitor_quantiles"]
        assert len(mq) == 11 and mq == sorted(mq)
    assert d["n_flagged"] == report.n_flagged
    text = report.to_text()
    assert "Condition 1" in text and "Condition 2" in text
    assert "FLAG" in text and "Result:" in text


def test_report_text_notes_missing_span_checks():
    s = np.linspace(0.5, 9.5, 60)
    monitors = MonitorDataset(locations=s, values=np.zeros(60))
    report = compatibility_report(
        monitors, _subjects_at(s), make_bspline_spec(5, (0.0, 10.0))
    )
    assert "(no non-constant health covariates)" in report.to_text()


def test_missing_covariate_raises():
    s = np.linspace(0.5, 9.5, 60)
    monitors = MonitorDataset(locations=s, values=np.zeros(60))
    spec = make_bspline_spec(5, (0.0, 10.0), covariate_names=("sin_s",))
    with pytest.raises(MissingCovariate):
        check_condition1(monitors, _subjects_at(s), spec)
