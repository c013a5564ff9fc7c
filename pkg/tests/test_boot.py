"""Design-based bootstrap: determinism, degenerate cases, SE calibration."""

import numpy as np
import pytest

from twostage_me.basis import make_bspline_spec, make_covariates_spec, thinplate_basis
from twostage_me.boot import MIN_REPLICATES, bootstrap
from twostage_me.datasets import MonitorDataset, SubjectDataset
from twostage_me.errors import AllReplicatesFailed, ConfigInvalid
from twostage_me.pipeline import run_two_stage
from twostage_me.simgen import Scenario1D, basis_1d, gen_scenario_1d


def test_identical_rows_bootstrap_se_zero():
    monitors = MonitorDataset(
        locations=np.full(5, 2.0), values=np.full(5, 3.0)
    )
    subjects = SubjectDataset(
        locations=np.full(8, 1.0),
        outcomes=np.full(8, 6.0),
        health_covariates=np.empty((8, 0)),
    )
    spec = make_covariates_spec((), intercept=True)
    result = bootstrap(monitors, subjects, spec, 60, seed=0)
    assert result.se == 0.0
    assert result.n_failed == 0
    assert result.reliable
    assert np.allclose(result.replicate_betas, 2.0, atol=1e-12)
    assert result.ci95 == (pytest.approx(2.0), pytest.approx(2.0))


def test_same_seed_bit_identical():
    sc = Scenario1D(n_star=80, n=120)
    monitors, subjects, _ = gen_scenario_1d(sc, seed=3)
    spec = basis_1d(sc, 5)
    a = bootstrap(monitors, subjects, spec, 60, seed=7)
    b = bootstrap(monitors, subjects, spec, 60, seed=7)
    c = bootstrap(monitors, subjects, spec, 60, seed=8)
    assert np.array_equal(a.replicate_betas, b.replicate_betas, equal_nan=True)
    assert a.se == b.se and a.ci95 == b.ci95
    assert not np.array_equal(
        a.replicate_betas, c.replicate_betas, equal_nan=True
    )


def test_parallel_matches_serial_bitwise():
    sc = Scenario1D(n_star=80, n=120)
    monitors, subjects, _ = gen_scenario_1d(sc, seed=3)
    spec = basis_1d(sc, 5)
    serial = bootstrap(monitors, subjects, spec, 60, seed=7, n_jobs=1)
    parallel = bootstrap(monitors, subjects, spec, 60, seed=7, n_jobs=2)
    assert np.array_equal(
        serial.replicate_betas, parallel.replicate_betas, equal_nan=True
    )
    assert serial.se == parallel.se


def test_replicate_floor_enforced():
    sc = Scenario1D(n_star=80, n=120)
    monitors, subjects, _ = gen_scenario_1d(sc, seed=3)
    with pytest.raises(ConfigInvalid):
        bootstrap(monitors, subjects, basis_1d(sc, 5), MIN_REPLICATES - 1)


def test_percentile_interval_flag():
    sc = Scenario1D(n_star=120, n=150)
    monitors, subjects, _ = gen_scenario_1d(sc, seed=5)
    spec = basis_1d(sc, 5)
    wald = bootstrap(monitors, subjects, spec, 80, seed=1)
    pct = bootstrap(monitors, subjects, spec, 80, seed=1, percentile=True)
    assert np.array_equal(wald.replicate_betas, pct.replicate_betas)
    ok = wald.replicate_betas[np.isfinite(wald.replicate_betas)]
    lo, hi = np.quantile(ok, [0.025, 0.975])
    assert pct.ci95 == (pytest.approx(lo), pytest.approx(hi))
    assert wald.ci95[0] < wald.ci95[1]


def test_wald_interval_centered_on_corrected_estimate():
    sc = Scenario1D(n_star=150, n=200)
    monitors, subjects, _ = gen_scenario_1d(sc, seed=11)
    spec = basis_1d(sc, 5)
    base = run_two_stage(monitors, subjects, spec)
    corrected = bootstrap(monitors, subjects, spec, 60, seed=2)
    plain = bootstrap(
        monitors, subjects, spec, 60, seed=2, bias_correct=False
    )
    mid_c = 0.5 * (corrected.ci95[0] + corrected.ci95[1])
    mid_p = 0.5 * (plain.ci95[0] + plain.ci95[1])
    assert mid_c == pytest.approx(base.corrected.beta_bc, abs=1e-12)
    assert mid_p == pytest.approx(base.health.beta_hat, abs=1e-12)
    assert corrected.bias_corrected and not plain.bias_corrected


def test_bootstrap_se_exceeds_model_se_under_measurement_error():
    # The model SE conditions on the estimated exposure surface; the
    # bootstrap also propagates first-stage noise, so on average it is
    # larger.
    sc = Scenario1D()
    ratios = []
    for rep in range(12):
        monitors, subjects, _ = gen_scenario_1d(sc, seed=[800, rep])
        spec = basis_1d(sc, 9)
        base = run_two_stage(monitors, subjects, spec)
        boot = bootstrap(
            monitors, subjects, spec, 100, seed=rep, bias_correct=False
        )
        ratios.append(boot.se / base.health.se_model)
    assert np.mean(ratios) >= 1.0


def test_no_first_stage_variation_matches_sandwich():
    # The exposure curve is an exact cubic and the 4-df spline spans
    # cubics, so every monitor resample refits the same coefficients;
    # all bootstrap variation comes from resampling subjects, which
    # should agree with the sandwich SE of the health fit.
    rng = np.random.default_rng(14)
    ratios = []
    for _ in range(5):
        s_m = rng.uniform(0.0, 10.0, 100)
        cubic = lambda s: 0.5 + 0.3 * s - 0.05 * s**2 + 0.002 * s**3
        monitors = MonitorDataset(locations=s_m, values=cubic(s_m))
        s_s = rng.uniform(0.0, 10.0, 400)
        w = cubic(s_s)
        y = 1.0 + 2.0 * w + rng.normal(size=400)
        subjects = SubjectDataset(
            locations=s_s,
            outcomes=y,
            health_covariates=np.ones((400, 1)),
            health_covariate_names=("intercept",),
        )
        spec = make_bspline_spec(4, (0.0, 10.0))
        base = run_two_stage(monitors, subjects, spec, bias_correct=False)
        boot = bootstrap(
            monitors, subjects, spec, 400, seed=3, bias_correct=False
        )
        ratios.append(boot.se / base.health.se_model)
    assert abs(np.mean(ratios) - 1.0) <= 0.10


def test_all_replicates_failed():
    # Interpolating thin-plate basis: the refit is full rank only when a
    # resample keeps all 12 anchors distinct, which essentially never
    # happens; the base fit itself is fine.
    rng = np.random.default_rng(23)
    anchors = rng.uniform(0.0, 30.0, size=(12, 2))
    values = rng.normal(size=12)
    monitors = MonitorDataset(locations=anchors, values=values)
    spec = thinplate_basis(anchors, 12)
    n = 40
    subjects = SubjectDataset(
        locations=rng.uniform(0.0, 30.0, size=(n, 2)),
        outcomes=rng.normal(size=n),
        health_covariates=np.ones((n, 1)),
        health_covariate_names=("intercept",),
    )
    run_two_stage(monitors, subjects, spec, bias_correct=False)
    with pytest.raises(AllReplicatesFailed):
        bootstrap(
            monitors, subjects, spec, 60, seed=1, bias_correct=False
        )


def test_unreliable_flag_on_partial_failures():
    # A covariate supported on only two monitors: resamples that miss
    # both rows are rank deficient, so a noticeable share of replicates
    # fails and the result is flagged.
    rng = np.random.default_rng(31)
    n_star = 7
    s = rng.uniform(0.0, 10.0, n_star)
    rare = np.zeros(n_star)
    rare[:2] = 1.0
    x = 1.0 + 0.5 * s + 2.0 * rare + rng.normal(0.0, 0.1, n_star)
    monitors = MonitorDataset(
        locations=s,
        values=x,
        covariates=rare[:, None],
        covariate_names=("rare",),
    )
    n = 50
    t = rng.uniform(0.0, 10.0, n)
    rare_s = (np.arange(n) % 2).astype(float)
    subjects = SubjectDataset(
        locations=t,
        outcomes=rng.normal(size=n),
        health_covariates=np.ones((n, 1)),
        health_covariate_names=("intercept",),
        exposure_covariates=rare_s[:, None],
        exposure_covariate_names=("rare",),
    )
    spec = make_covariates_spec(("rare",), intercept=True)
    result = bootstrap(
        monitors, subjects, spec, 200, seed=5, bias_correct=False
    )
    assert result.n_failed > 0
    assert not result.reliable
    assert np.isnan(result.replicate_betas).sum() == result.n_failed


def test_cluster_resampling_runs_and_is_deterministic():
    rng = np.random.default_rng(41)
    n_star = 40
    monitors = MonitorDataset(
        locations=rng.uniform(0.0, 10.0, n_star),
        values=rng.normal(size=n_star),
        clusters=np.repeat(np.arange(8), 5),
    )
    n = 60
    subjects = SubjectDataset(
        locations=rng.uniform(0.0, 10.0, n),
        outcomes=rng.normal(size=n),
        health_covariates=np.ones((n, 1)),
        health_covariate_names=("intercept",),
    )
    spec = make_bspline_spec(4, (0.0, 10.0))
    a = bootstrap(monitors, subjects, spec, 60, seed=2, bias_correct=False)
    b = bootstrap(monitors, subjects, spec, 60, seed=2, bias_correct=False)
    assert np.array_equal(a.replicate_betas, b.replicate_betas, equal_nan=True)
    assert a.se >= 0.0
