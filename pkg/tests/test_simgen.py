"""Simulation generators and the Monte Carlo driver."""

import dataclasses
import json

import numpy as np
import pandas as pd
import pytest

import oracles
from twostage_me.errors import ConfigInvalid, SpectrumNegative
from twostage_me.simgen import (
    METHODS,
    McReport,
    Scenario1D,
    Scenario2D,
    gen_lur_fixture,
    gen_scenario_1d,
    gen_scenario_2d,
    h_cdf_1d,
    h_pdf_1d,
    make_surface_2d,
    matern_correlation,
    matern_field,
    monte_carlo,
    phi_1d,
    sample_h_1d,
)


# ----------------------------------------------------------------- 1-D parts


def test_phi_curve_matches_reference():
    s = np.linspace(-5.0, 15.0, 401)
    assert np.allclose(phi_1d(s), oracles.phi_reference(s), atol=1e-12)
    assert phi_1d(0.0) == pytest.approx(
        np.sin(3.5) + 0.2 * np.sin(-10.5), abs=1e-15
    )


def test_h_density_masses():
    third = 10.0 / 3.0
    # Outer thirds at 1/7 per unit, middle third at 1/70: total mass 1.
    assert h_pdf_1d(1.0) == pytest.approx(1.0 / 7.0)
    assert h_pdf_1d(5.0) == pytest.approx(1.0 / 70.0)
    assert h_pdf_1d(9.0) == pytest.approx(1.0 / 7.0)
    assert h_pdf_1d(-0.5) == 0.0 and h_pdf_1d(10.5) == 0.0
    mid_mass = h_cdf_1d(2 * third) - h_cdf_1d(third)
    assert mid_mass == pytest.approx(1.0 / 21.0, rel=1e-12)
    assert h_cdf_1d(0.0) == 0.0
    assert h_cdf_1d(10.0) == pytest.approx(1.0, rel=1e-12)
    s = np.linspace(-1.0, 11.0, 1201)
    # The oracle closes the support at 10.0; the generator's convention is
    # open there. The difference has measure zero, so skip the exact edge.
    mask = (s != 0.0) & (s != 10.0)
    assert np.allclose(
        h_pdf_1d(s)[mask], oracles.h_density_reference(s)[mask], atol=1e-12
    )


def test_h_sampler_matches_cdf():
    rng = np.random.default_rng(11)
    draws = sample_h_1d(10_000, rng)
    assert draws.min() > 0.0 and draws.max() < 10.0
    ks = oracles.ks_statistic(draws, oracles.h_cdf_reference)
    assert ks <= 0.02


def test_scenario_1d_validation():
    with pytest.raises(ConfigInvalid):
        Scenario1D(g_kind="bogus")
    with pytest.raises(ConfigInvalid):
        Scenario1D(extra_covariate="sometimes")
    with pytest.raises(ConfigInvalid):
        Scenario1D(sigma2_eta=-0.1)
    with pytest.raises(ConfigInvalid):
        Scenario1D(n_star=1)


def test_gen_1d_composition_identity():
    sc = Scenario1D(n_star=60, n=90, beta=1.4, sigma2_eps=0.0)
    monitors, subjects, truth = gen_scenario_1d(sc, seed=4)
    Z = subjects.health_covariates
    np.testing.assert_array_equal(
        truth.y_noiseless, 1.4 * truth.exposure_subjects + Z @ truth.beta_z
    )
    # Zero outcome noise: observed outcomes are exactly the noiseless ones.
    np.testing.assert_array_equal(subjects.outcomes, truth.y_noiseless)
    np.testing.assert_array_equal(truth.phi_monitors, phi_1d(monitors.locations[:, 0]))


def test_gen_1d_exposure_side_invariant_to_outcome_noise():
    low = Scenario1D(n_star=60, n=90, sigma2_eps=1.0)
    high = Scenario1D(n_star=60, n=90, sigma2_eps=100.0)
    m1, s1, t1 = gen_scenario_1d(low, seed=9)
    m2, s2, t2 = gen_scenario_1d(high, seed=9)
    np.testing.assert_array_equal(m1.values, m2.values)
    np.testing.assert_array_equal(m1.locations, m2.locations)
    np.testing.assert_array_equal(s1.locations, s2.locations)
    np.testing.assert_array_equal(t1.exposure_subjects, t2.exposure_subjects)
    assert not np.array_equal(s1.outcomes, s2.outcomes)


def test_gen_1d_uniform_g_and_sine_modes():
    sc = Scenario1D(n=2000, g_kind="uniform", extra_covariate="sin_in_both")
    monitors, subjects, _ = gen_scenario_1d(sc, seed=1)
    s = subjects.locations[:, 0]
    assert s.min() > 0.0 and s.max() < 10.0
    # Uniform draws put about a third of the mass in the middle third,
    # unlike the monitor density which puts 1/21 there.
    mid = np.mean((s > 10 / 3) & (s <= 20 / 3))
    assert abs(mid - 1 / 3) < 0.04
    assert monitors.covariate_names == ("sin_s",)
    np.testing.assert_allclose(
        monitors.covariates[:, 0], np.sin(monitors.locations[:, 0]), atol=1e-12
    )
    assert subjects.health_covariate_names == ("intercept", "sin_s")
    np.testing.assert_array_equal(subjects.health_covariates[:, 0], np.ones(2000))

    sc2 = Scenario1D(extra_covariate="sin_in_health_only")
    m2, s2, _ = gen_scenario_1d(sc2, seed=1)
    assert m2.covariates.shape == (200, 0)
    assert s2.health_covariate_names == ("intercept", "sin_s")


# ---------------------------------------------------------------- 2-D parts


def test_matern_correlation_matches_reference():
    d = np.array([0.0, 0.5, 2.0, 10.0, 40.0])
    np.testing.assert_allclose(
        matern_correlation(d, 20.0, 1.0),
        oracles.matern_correlation_reference(d, 20.0, 1.0),
        atol=1e-13,
    )
    assert matern_correlation(0.0, 20.0, 1.0) == 1.0


def test_matern_field_normalization_and_determinism():
    a = matern_field(65, 30.0, 20.0, 1.0, 30.0, seed=4)
    b = matern_field(65, 30.0, 20.0, 1.0, 30.0, seed=4)
    c = matern_field(65, 30.0, 20.0, 1.0, 30.0, seed=5)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert a.shape == (65, 65)
    assert abs(a.mean()) < 1e-12
    assert a.var() == pytest.approx(30.0, abs=1e-6)


def test_matern_field_embedding_cap():
    with pytest.raises(SpectrumNegative):
        matern_field(257, 30.0, 20.0, 1.0, 30.0, seed=0, max_embedding=256)


def test_scenario_2d_validation():
    with pytest.raises(ConfigInvalid):
        Scenario2D(n_star=124)  # not a multiple of cluster_size
    with pytest.raises(ConfigInvalid):
        Scenario2D(grid_size=4)
    with pytest.raises(ConfigInvalid):
        Scenario2D(covariate_coeffs=())
    assert Scenario2D().n_clusters == 25
    assert Scenario2D().n_covariates == 3


def test_surface_variance_budget():
    sc = Scenario2D()
    surf = make_surface_2d(sc)
    assert surf.smooth.var() == pytest.approx(30.0, abs=1e-6)
    assert abs(surf.smooth.mean()) < 1e-12
    covariate_part = surf.phi - sc.covariate_coeffs[0] - surf.smooth
    expected = sum(c**2 for c in sc.covariate_coeffs[1:]) * sc.covariate_var
    assert covariate_part.var() == pytest.approx(expected, rel=0.02)
    assert surf.covariate_names == ("r1", "r2", "r3")
    assert surf.covariate_layers.shape == (257, 257, 3)


def test_gen_2d_cluster_geometry():
    sc = Scenario2D()
    surf = make_surface_2d(sc)
    monitors, subjects, truth = gen_scenario_2d(sc, seed=3, surface=surf)
    assert monitors.n == 125
    np.testing.assert_array_equal(
        monitors.clusters, np.repeat(np.arange(25), 5)
    )
    spacing = sc.domain / (sc.grid_size - 1)
    for g in range(25):
        pts = monitors.locations[monitors.clusters == g]
        assert len(np.unique(pts, axis=0)) == 5
        span = pts.max(axis=0) - pts.min(axis=0)
        assert np.all(span <= 4 * spacing + 1e-9)
    # Monitor locations sit on grid coordinates.
    frac = monitors.locations / spacing
    assert np.allclose(frac, np.round(frac), atol=1e-9)
    assert subjects.n == 600
    assert subjects.exposure_covariate_names == ("r1", "r2", "r3")
    np.testing.assert_array_equal(
        truth.y_noiseless, sc.beta * truth.exposure_subjects
    )


def test_gen_2d_surface_scenario_compatibility():
    sc200 = Scenario2D(sigma2_eps=200.0)
    sc10 = Scenario2D(sigma2_eps=10.0)
    surf = make_surface_2d(sc200)
    m1, s1, t1 = gen_scenario_2d(sc200, seed=5, surface=surf)
    m2, s2, t2 = gen_scenario_2d(sc10, seed=5, surface=surf)
    np.testing.assert_array_equal(m1.values, m2.values)
    np.testing.assert_array_equal(s1.locations, s2.locations)
    np.testing.assert_array_equal(t1.exposure_subjects, t2.exposure_subjects)
    assert not np.array_equal(s1.outcomes, s2.outcomes)
    with pytest.raises(ConfigInvalid):
        gen_scenario_2d(Scenario2D(matern_range=10.0), seed=5, surface=surf)


# ------------------------------------------------------------- Monte Carlo


def test_monte_carlo_validation():
    sc = Scenario1D(n_star=60, n=80)
    with pytest.raises(ConfigInvalid):
        monte_carlo(sc, M=99)
    with pytest.raises(ConfigInvalid):
        monte_carlo(sc, methods=("none", "boot_only"), M=100, B=10)
    with pytest.raises(ConfigInvalid):
        monte_carlo(sc, methods=("magic",), M=100)
    with pytest.raises(ConfigInvalid):
        monte_carlo(sc, methods=(), M=100)
    with pytest.raises(ConfigInvalid):
        monte_carlo(sc, methods=("none", "bias_only"), M=100, use_true_exposure=True)
    with pytest.raises(ConfigInvalid):
        monte_carlo("not a scenario", M=100)


def test_true_exposure_mode_is_calibrated():
    # n = 500 keeps the HC0 small-sample SE bias negligible so coverage
    # sits at its nominal level up to Monte Carlo error.
    sc = Scenario1D(n_star=10, n=500)
    report = monte_carlo(sc, methods=("none",), M=1000, use_true_exposure=True)
    row = report.rows[0]
    # Textbook OLS on the true exposure: the noise-averaged estimator is
    # exact, and coverage should be nominal up to Monte Carlo error.
    assert abs(row.rel_bias) < 1e-10
    assert 0.936 <= row.coverage <= 0.964
    assert row.n_used == 1000
    assert report.df is None and report.n_boot == 0
    assert report.scenario_label == "1d:true_exposure"


@pytest.fixture(scope="module")
def small_mc_report():
    sc = Scenario1D(n_star=60, n=80)
    return monte_carlo(
        sc,
        methods=("bias_only", "none"),
        M=100,
        df=5,
        seed=21,
        compute_cv=3,
        keep_estimates=True,
    )


def test_monte_carlo_report_structure(small_mc_report):
    report = small_mc_report
    # Methods come back in canonical order regardless of request order.
    assert tuple(r.method for r in report.rows) == ("none", "bias_only")
    for row in report.rows:
        assert 0 < row.n_used <= 100
        assert 0.0 <= row.coverage <= 1.0
        assert row.sd > 0 and row.mean_se > 0
    assert report.mean_oos_r2 is not None and 0.0 < report.mean_oos_r2 < 1.0
    assert report.mean_cv_r2 is not None
    est = report.estimates
    assert isinstance(est, pd.DataFrame) and len(est) == 100
    assert list(est.columns) == [
        "rep", "beta_hat", "beta_bc", "se_model", "se_boot_unc",
        "se_boot_bc", "oos_r2",
    ]
    # No bootstrap methods were requested, so those columns stay empty.
    assert est["se_boot_unc"].isna().all() and est["se_boot_bc"].isna().all()
    assert np.isfinite(est["beta_bc"]).sum() == report.rows[1].n_used


def test_monte_carlo_parallel_bit_identical(small_mc_report):
    sc = Scenario1D(n_star=60, n=80)
    par = monte_carlo(
        sc,
        methods=("bias_only", "none"),
        M=100,
        df=5,
        seed=21,
        compute_cv=3,
        keep_estimates=True,
        n_jobs=2,
    )
    for a, b in zip(small_mc_report.rows, par.rows):
        assert dataclasses.astuple(a) == dataclasses.astuple(b)
    assert small_mc_report.estimates.equals(par.estimates)
    assert small_mc_report.mean_cv_r2 == par.mean_cv_r2


def test_mc_report_serialization(small_mc_report, tmp_path):
    report = small_mc_report
    frame = report.to_frame()
    assert list(frame.columns) == [
        "scenario", "df", "method", "rel_bias", "sd", "mean_se",
        "coverage", "coverage_mc_se", "n_used",
    ]
    assert frame.shape == (2, 9)
    csv_path = tmp_path / "report.csv"
    report.to_csv(csv_path)
    back = pd.read_csv(csv_path)
    assert back.shape == frame.shape
    np.testing.assert_allclose(back["rel_bias"], frame["rel_bias"], rtol=1e-12)

    payload = json.loads(report.to_json())
    assert payload["scenario"] == "1d"
    assert payload["df"] == 5
    assert payload["n_replicates"] == 100
    assert len(payload["rows"]) == 2
    assert "estimates" not in payload
    json_path = tmp_path / "report.json"
    text = report.to_json(json_path)
    assert json_path.read_text() == text


def test_methods_constant_is_canonical():
    assert METHODS == ("none", "boot_only", "bias_only", "bias+boot")


# ------------------------------------------------------------------ fixture


def test_lur_fixture_shapes():
    monitors, subjects, truth = gen_lur_fixture(seed=0)
    assert monitors.n == 93
    np.testing.assert_array_equal(
        monitors.clusters, np.repeat(np.arange(31), 3)
    )
    assert monitors.covariates.shape == (93, 5)
    assert monitors.covariate_names == (
        "log_dist_road", "traffic_disp", "log_popden", "dist_center",
        "transport_land",
    )
    assert subjects.n == 625
    assert subjects.health_covariate_names == ("intercept", "age", "smoker")
    np.testing.assert_array_equal(subjects.health_covariates[:, 0], np.ones(625))
    assert set(np.unique(subjects.health_covariates[:, 2])) <= {0.0, 1.0}
    assert subjects.exposure_covariate_names == monitors.covariate_names
    assert truth["beta"] == pytest.approx(0.07)
    # Deterministic in the seed.
    m2, _, _ = gen_lur_fixture(seed=0)
    np.testing.assert_array_equal(monitors.values, m2.values)
