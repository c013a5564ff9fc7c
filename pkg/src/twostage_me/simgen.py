"""Synthetic scenario generators and the Monte Carlo study driver.

Two scenario families are built in:

* a one-dimensional sinusoidal exposure surface on (0, 10), with monitor
  locations drawn from a piecewise-constant density concentrated on the
  outer thirds of the interval, and subject locations either matched to
  that density or uniform (to break location compatibility on purpose);
* a two-dimensional surface on a 257 x 257 grid over a 30-unit square,
  equal to an intercept plus three cell-level white-noise covariates plus
  a smooth Matern-correlated field, with monitors sampled in clusters of
  five grid cells (a uniform seed cell and its four nearest neighbors).

``monte_carlo`` repeatedly generates datasets, runs the two-stage fit
with and without the measurement-error correction and with model-based
or bootstrap standard errors, and scores estimates against the known
generating coefficient. Exposure-side and outcome-noise draws come from
separate seeded streams, so two runs that differ only in the outcome
noise variance see bit-identical exposure data.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import NamedTuple, Sequence

import numpy as np
import pandas as pd
from scipy.special import gamma as gamma_fn
from scipy.special import kv

from .basis import BasisSpec, make_bspline_spec, make_covariates_spec, thinplate_basis
from .boot import MIN_REPLICATES, _replicate_pass
from .datasets import MonitorDataset, SubjectDataset
from .errors import (
    ConfigInvalid,
    CorrectionBlowup,
    DegenerateExposure,
    RankDeficient,
    SpectrumNegative,
)
from .exposure import cv_r2
from .pipeline import fit_replicate, prepare_two_stage, seed_list
from .regress import ols_fit, sandwich_cov

Z95 = 1.96

# Renormalized piecewise density of 1-D monitor locations. The raw
# plateau heights 0.142 and 0.0142 integrate to 0.994 over (0, 10);
# dividing by that total gives exactly 1/7 and 1/70, so each outer third
# carries mass 10/21 and the middle third carries 1/21.
H_HIGH = 1.0 / 7.0
H_LOW = 1.0 / 70.0
THIRD = 10.0 / 3.0
MASS_OUTER = 10.0 / 21.0
MASS_MIDDLE = 1.0 / 21.0

G_KINDS = ("matched", "uniform")
EXTRA_COVARIATE_MODES = ("none", "sin_in_both", "sin_in_health_only")
METHODS = ("none", "boot_only", "bias_only", "bias+boot")


def phi_1d(s) -> np.ndarray:
    """Smooth 1-D exposure surface: a low-frequency sine plus a
    high-frequency sine with slowly growing amplitude."""
    s = np.asarray(s, dtype=float)
    return np.sin(s + 3.5) + ((s + 4.0) / 20.0) * np.sin(4.0 * s - 10.5)


def h_pdf_1d(s) -> np.ndarray:
    """Monitor-location density: 1/7 on the outer thirds of (0, 10),
    1/70 on the middle third, 0 outside."""
    s = np.asarray(s, dtype=float)
    out = np.where((s > THIRD) & (s <= 2 * THIRD), H_LOW, H_HIGH)
    return np.where((s > 0.0) & (s < 10.0), out, 0.0)


def h_cdf_1d(s) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    sc = np.clip(s, 0.0, 10.0)
    low = sc * H_HIGH
    mid = MASS_OUTER + (sc - THIRD) * H_LOW
    high = MASS_OUTER + MASS_MIDDLE + (sc - 2 * THIRD) * H_HIGH
    return np.where(sc <= THIRD, low, np.where(sc <= 2 * THIRD, mid, high))


def sample_h_1d(n: int, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draws from the piecewise monitor-location density."""
    u = rng.uniform(0.0, 1.0, int(n))
    lo = u / H_HIGH
    mid = THIRD + (u - MASS_OUTER) / H_LOW
    hi = 2 * THIRD + (u - MASS_OUTER - MASS_MIDDLE) / H_HIGH
    return np.where(
        u <= MASS_OUTER, lo, np.where(u <= MASS_OUTER + MASS_MIDDLE, mid, hi)
    )


@dataclass(frozen=True)
class Scenario1D:
    """1-D study parameters (defaults reproduce the built-in study)."""

    n_star: int = 200
    n: int = 500
    beta: float = 1.0
    sigma2_eps: float = 1.0
    sigma2_eta: float = 0.5
    sigma2_eta_star: float = 0.5
    g_kind: str = "matched"
    extra_covariate: str = "none"

    def __post_init__(self):
        if self.g_kind not in G_KINDS:
            raise ConfigInvalid(f"g_kind must be one of {G_KINDS}, got {self.g_kind!r}")
        if self.extra_covariate not in EXTRA_COVARIATE_MODES:
            raise ConfigInvalid(
                f"extra_covariate must be one of {EXTRA_COVARIATE_MODES}, "
                f"got {self.extra_covariate!r}"
            )
        for name in ("sigma2_eps", "sigma2_eta", "sigma2_eta_star"):
            if getattr(self, name) < 0:
                raise ConfigInvalid(f"{name} must be nonnegative")
        if self.n_star < 2 or self.n < 2:
            raise ConfigInvalid("n_star and n must both be at least 2")


@dataclass(frozen=True)
class Scenario2D:
    """2-D study parameters (defaults reproduce the built-in study).

    covariate_coeffs[0] multiplies the constant; each remaining entry
    multiplies one white-noise covariate layer with cell variance
    covariate_var. The smooth field is normalized to have grid variance
    exactly surface_variance, so the predictable surface has variance
    close to sum(coeffs[1:]**2) * covariate_var + surface_variance.
    """

    surface_seed: int = 1
    grid_size: int = 257
    domain: float = 30.0
    matern_range: float = 20.0
    matern_smoothness: float = 1.0
    surface_variance: float = 30.0
    covariate_coeffs: tuple[float, ...] = (4.9, 4.9, 4.9, 4.9)
    covariate_var: float = 1.0 / 3.0
    nugget: float = 6.0
    n_star: int = 125
    cluster_size: int = 5
    n: int = 600
    beta: float = 0.1
    sigma2_eps: float = 200.0

    def __post_init__(self):
        if self.grid_size < 8:
            raise ConfigInvalid("grid_size must be at least 8")
        if self.cluster_size < 1 or self.n_star % self.cluster_size:
            raise ConfigInvalid("n_star must be a positive multiple of cluster_size")
        if len(self.covariate_coeffs) < 1:
            raise ConfigInvalid("covariate_coeffs needs at least the constant term")
        if self.nugget < 0 or self.sigma2_eps < 0 or self.surface_variance <= 0:
            raise ConfigInvalid("variance parameters must be nonnegative")

    @property
    def n_clusters(self) -> int:
        return self.n_star // self.cluster_size

    @property
    def n_covariates(self) -> int:
        return len(self.covariate_coeffs) - 1


@dataclass(frozen=True, eq=False)
class TruthRecord:
    """Generating quantities kept aside for scoring a simulated dataset."""

    beta: float
    beta_z: np.ndarray
    phi_monitors: np.ndarray
    phi_subjects: np.ndarray
    exposure_subjects: np.ndarray
    y_noiseless: np.ndarray


def gen_scenario_1d(
    scenario: Scenario1D, seed
) -> tuple[MonitorDataset, SubjectDataset, TruthRecord]:
    """One draw of the 1-D study.

    Stream layout: (seed, 0) drives everything on the exposure side
    (monitor locations, monitor noise, subject locations, subject
    exposure noise); (seed, 1) drives only the outcome noise.
    """
    key = seed_list(seed)
    exp_rng = np.random.default_rng([*key, 0])
    out_rng = np.random.default_rng([*key, 1])

    s_star = sample_h_1d(scenario.n_star, exp_rng)
    eta_star = exp_rng.normal(0.0, math.sqrt(scenario.sigma2_eta_star), scenario.n_star)
    if scenario.g_kind == "matched":
        s = sample_h_1d(scenario.n, exp_rng)
    else:
        s = exp_rng.uniform(0.0, 10.0, scenario.n)
    eta = exp_rng.normal(0.0, math.sqrt(scenario.sigma2_eta), scenario.n)

    phi_m = phi_1d(s_star)
    phi_s = phi_1d(s)
    x_star = phi_m + eta_star
    x = phi_s + eta

    with_sin = scenario.extra_covariate != "none"
    if with_sin:
        Z = np.column_stack([np.ones(scenario.n), np.sin(s)])
        z_names = ("intercept", "sin_s")
        beta_z = np.array([0.0, 1.0])
    else:
        Z = np.ones((scenario.n, 1))
        z_names = ("intercept",)
        beta_z = np.array([0.0])

    in_exposure = scenario.extra_covariate == "sin_in_both"
    monitors = MonitorDataset(
        locations=s_star,
        values=x_star,
        covariates=np.sin(s_star)[:, None] if in_exposure else None,
        covariate_names=("sin_s",) if in_exposure else (),
    )
    y0 = scenario.beta * x + Z @ beta_z
    y = y0 + out_rng.normal(0.0, math.sqrt(scenario.sigma2_eps), scenario.n)
    subjects = SubjectDataset(
        locations=s,
        outcomes=y,
        health_covariates=Z,
        health_covariate_names=z_names,
        exposure_covariates=np.sin(s)[:, None] if in_exposure else None,
        exposure_covariate_names=("sin_s",) if in_exposure else (),
    )
    truth = TruthRecord(
        beta=scenario.beta,
        beta_z=beta_z,
        phi_monitors=phi_m,
        phi_subjects=phi_s,
        exposure_subjects=x,
        y_noiseless=y0,
    )
    return monitors, subjects, truth


def basis_1d(scenario: Scenario1D, df: int) -> BasisSpec:
    """Fitted exposure model for the 1-D study: B-splines over (0, 10),
    plus the sine covariate when the scenario puts it in both models.
    No separate intercept; the B-spline block spans constants."""
    names = ("sin_s",) if scenario.extra_covariate == "sin_in_both" else ()
    return make_bspline_spec(df, (0.0, 10.0), covariate_names=names)


def matern_correlation(d, range_: float, smoothness: float) -> np.ndarray:
    """Matern correlation with distance scaled as d/range_."""
    d = np.asarray(d, dtype=float)
    t = d / float(range_)
    nu = float(smoothness)
    out = np.ones_like(t)
    pos = t > 0
    tp = t[pos]
    out[pos] = (2.0 ** (1.0 - nu) / gamma_fn(nu)) * tp**nu * kv(nu, tp)
    return out


# Relative negative spectral mass tolerated before enlarging the torus.
# Clipped mass this small is invisible next to the 15%-band variogram
# checks, and the final affine normalization fixes the total variance.
_SPECTRUM_TOL = 1e-4
_spectrum_cache: dict = {}


def _wrapped_spectrum(
    grid_size: int, domain: float, range_: float, smoothness: float,
    max_embedding: int,
) -> tuple[int, np.ndarray]:
    """Unit-variance synthesis weights on the smallest adequate torus.

    The wrapped covariance kernel is symmetric in each axis, so only the
    (N/2+1)-square corner is evaluated and mirrored. Results are cached
    per parameter set; the spectrum involves no randomness.
    """
    key = (int(grid_size), float(domain), float(range_), float(smoothness))
    hit = _spectrum_cache.get(key)
    if hit is not None and hit[0] <= max_embedding:
        return hit
    spacing = float(domain) / (grid_size - 1)
    n_embed = 1
    while n_embed < 2 * (grid_size - 1):
        n_embed *= 2
    while n_embed <= max_embedding:
        half = n_embed // 2 + 1
        wrapped = np.arange(half) * spacing
        corner = matern_correlation(
            np.hypot(wrapped[:, None], wrapped[None, :]), range_, smoothness
        )
        cov = np.empty((n_embed, n_embed))
        cov[:half, :half] = corner
        cov[half:, :half] = corner[1 : n_embed - half + 1][::-1]
        cov[:, half:] = cov[:, 1 : n_embed - half + 1][:, ::-1]
        spectrum = np.fft.fft2(cov).real
        if spectrum.min() >= -_SPECTRUM_TOL * spectrum.max():
            lam = np.clip(spectrum, 0.0, None)
            if len(_spectrum_cache) >= 8:
                _spectrum_cache.clear()
            _spectrum_cache[key] = (n_embed, lam)
            return n_embed, lam
        n_embed *= 2
    raise SpectrumNegative(
        "wrapped covariance spectrum stayed negative up to embedding size "
        f"{max_embedding}; increase max_embedding or shorten the range"
    )


def matern_field(
    grid_size: int,
    domain: float,
    range_: float,
    smoothness: float,
    variance: float,
    seed,
    *,
    max_embedding: int = 4096,
    normalize: bool = True,
) -> np.ndarray:
    """Stationary Gaussian field on a square grid via spectral synthesis.

    The target covariance is wrapped onto an enlarged torus; its DFT
    gives the synthesis weights. If the wrapped spectrum has material
    negative mass the torus is doubled (ghost-image correlation shrinks
    with torus size) up to ``max_embedding``, after which
    SpectrumNegative is raised; tiny negative mass is clipped instead.

    By default the field is affinely normalized so its grid mean is 0
    and its grid variance is exactly ``variance``. Because the grid is a
    window much smaller than a long correlation range, this rescales the
    raw process (whose within-window variance sits well below its
    marginal variance); pass normalize=False to get the raw stationary
    process, whose variogram is unbiased for the nominal Matern curve.
    """
    g = int(grid_size)
    n_embed, lam = _wrapped_spectrum(g, domain, range_, smoothness, max_embedding)
    rng = np.random.default_rng(seed_list(seed))
    noise = rng.standard_normal((n_embed, n_embed)) + 1j * rng.standard_normal(
        (n_embed, n_embed)
    )
    full = np.fft.ifft2(np.sqrt(variance * lam) * noise).real * n_embed
    field = full[:g, :g].copy()
    if normalize:
        field -= field.mean()
        field *= math.sqrt(variance / field.var())
    return field


@dataclass(frozen=True, eq=False)
class Surface2D:
    """One fixed realization of the 2-D predictable exposure surface."""

    coords: np.ndarray
    smooth: np.ndarray
    covariate_layers: np.ndarray
    phi: np.ndarray
    scenario: Scenario2D

    @property
    def covariate_names(self) -> tuple[str, ...]:
        return tuple(f"r{k + 1}" for k in range(self.covariate_layers.shape[2]))


def make_surface_2d(scenario: Scenario2D) -> Surface2D:
    """Build the fixed surface for a scenario: smooth field from stream
    (surface_seed, 0), white-noise covariate layers from (surface_seed, 1)."""
    g = scenario.grid_size
    coords = np.linspace(0.0, scenario.domain, g)
    smooth = matern_field(
        g,
        scenario.domain,
        scenario.matern_range,
        scenario.matern_smoothness,
        scenario.surface_variance,
        seed=[scenario.surface_seed, 0],
    )
    k = scenario.n_covariates
    layer_rng = np.random.default_rng([scenario.surface_seed, 1])
    layers = layer_rng.normal(0.0, math.sqrt(scenario.covariate_var), (g, g, k))
    phi = scenario.covariate_coeffs[0] + smooth
    for j in range(k):
        phi = phi + scenario.covariate_coeffs[j + 1] * layers[:, :, j]
    return Surface2D(
        coords=coords,
        smooth=smooth,
        covariate_layers=layers,
        phi=phi,
        scenario=scenario,
    )


_NEIGHBOR_OFFSETS = sorted(
    (
        (di * di + dj * dj, di, dj)
        for di in range(-2, 3)
        for dj in range(-2, 3)
        if (di, dj) != (0, 0)
    ),
)


def _cluster_cells(seed_cells: np.ndarray, grid_size: int, cluster_size: int) -> np.ndarray:
    """Expand seed cells to clusters: each seed plus its nearest other
    grid cells, ranked by distance with a fixed deterministic tie-break."""
    out = []
    for i, j in seed_cells:
        cells = [(int(i), int(j))]
        for _, di, dj in _NEIGHBOR_OFFSETS:
            if len(cells) == cluster_size:
                break
            ni, nj = int(i) + di, int(j) + dj
            if 0 <= ni < grid_size and 0 <= nj < grid_size:
                cells.append((ni, nj))
        out.extend(cells)
    return np.asarray(out, dtype=int)


def gen_scenario_2d(
    scenario: Scenario2D, seed, surface: Surface2D | None = None
) -> tuple[MonitorDataset, SubjectDataset, TruthRecord]:
    """One draw of the 2-D study on a fixed surface.

    Monitors: cluster seed cells uniform over the grid, each expanded
    with its four nearest grid cells; monitor values add independent
    nugget noise. Subjects: uniform over the grid. Stream layout matches
    the 1-D generator: (seed, 0) exposure side, (seed, 1) outcome noise.
    """
    if surface is None:
        surface = make_surface_2d(scenario)
    elif surface.scenario != scenario and surface.scenario != replace(
        scenario, sigma2_eps=surface.scenario.sigma2_eps
    ):
        raise ConfigInvalid("surface was built for a different scenario")
    g = scenario.grid_size
    key = seed_list(seed)
    exp_rng = np.random.default_rng([*key, 0])
    out_rng = np.random.default_rng([*key, 1])

    seed_cells = exp_rng.integers(0, g, (scenario.n_clusters, 2))
    cells = _cluster_cells(seed_cells, g, scenario.cluster_size)
    mi, mj = cells[:, 0], cells[:, 1]
    eta_star = exp_rng.normal(0.0, math.sqrt(scenario.nugget), scenario.n_star)

    sub_cells = exp_rng.integers(0, g, (scenario.n, 2))
    si, sj = sub_cells[:, 0], sub_cells[:, 1]
    eta = exp_rng.normal(0.0, math.sqrt(scenario.nugget), scenario.n)

    phi_m = surface.phi[mi, mj]
    phi_s = surface.phi[si, sj]
    x_star = phi_m + eta_star
    x = phi_s + eta

    monitors = MonitorDataset(
        locations=np.column_stack([surface.coords[mi], surface.coords[mj]]),
        values=x_star,
        covariates=surface.covariate_layers[mi, mj, :],
        covariate_names=surface.covariate_names,
        clusters=np.repeat(np.arange(scenario.n_clusters), scenario.cluster_size),
    )
    Z = np.ones((scenario.n, 1))
    beta_z = np.array([0.0])
    y0 = scenario.beta * x + Z @ beta_z
    y = y0 + out_rng.normal(0.0, math.sqrt(scenario.sigma2_eps), scenario.n)
    subjects = SubjectDataset(
        locations=np.column_stack([surface.coords[si], surface.coords[sj]]),
        outcomes=y,
        health_covariates=Z,
        health_covariate_names=("intercept",),
        exposure_covariates=surface.covariate_layers[si, sj, :],
        exposure_covariate_names=surface.covariate_names,
    )
    truth = TruthRecord(
        beta=scenario.beta,
        beta_z=beta_z,
        phi_monitors=phi_m,
        phi_subjects=phi_s,
        exposure_subjects=x,
        y_noiseless=y0,
    )
    return monitors, subjects, truth


def basis_2d(
    monitors: MonitorDataset, df: int, covariate_names: Sequence[str] = ("r1", "r2", "r3")
) -> BasisSpec:
    """Fitted exposure model for a 2-D dataset: the cell covariates plus
    a thin-plate block anchored at this dataset's monitor locations.
    df = 0 drops the spline and keeps a plain intercept instead (the
    thin-plate block contains its own constant, so no intercept is added
    alongside it)."""
    if df == 0:
        return make_covariates_spec(tuple(covariate_names), intercept=True)
    return thinplate_basis(
        monitors.locations, df, covariate_names=tuple(covariate_names), intercept=False
    )


def approx_r2_2d(surface: Surface2D, df: int, lattice_step: int = 8) -> float:
    """Best-achievable R-squared of the df-term exposure model for a
    surface, ignoring estimation noise: fit the predictable surface
    itself on a dense regular lattice of grid cells and report the fit
    R-squared. Used to characterize how well a given spline size can
    represent a surface, independent of any monitoring draw."""
    g = surface.scenario.grid_size
    idx = np.arange(0, g, lattice_step)
    ii, jj = np.meshgrid(idx, idx, indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()
    pts = np.column_stack([surface.coords[ii], surface.coords[jj]])
    values = surface.phi[ii, jj]
    covs = surface.covariate_layers[ii, jj, :]
    mon = MonitorDataset(
        locations=pts,
        values=values,
        covariates=covs,
        covariate_names=surface.covariate_names,
    )
    spec = basis_2d(mon, df, surface.covariate_names)
    from .exposure import fit_exposure

    fit = fit_exposure(mon, spec)
    resid = fit.fit.residuals
    return 1.0 - float(resid @ resid) / float(np.sum((values - values.mean()) ** 2))


@dataclass(frozen=True, eq=False)
class McRow:
    """One method's row of a Monte Carlo report."""

    method: str
    rel_bias: float
    sd: float
    mean_se: float
    coverage: float
    coverage_mc_se: float
    n_used: int


@dataclass(frozen=True, eq=False)
class McReport:
    """Monte Carlo study summary: one row per requested method.

    ``estimates`` optionally carries the per-replicate estimates and
    standard errors (one row per replicate) for density plots; summary
    serializers ignore it.
    """

    rows: tuple[McRow, ...]
    n_replicates: int
    n_boot: int
    seed: int
    scenario_label: str
    df: int | None
    mean_oos_r2: float | None
    mean_cv_r2: float | None
    estimates: pd.DataFrame | None = None

    def to_frame(self) -> pd.DataFrame:
        records = []
        for row in self.rows:
            records.append(
                {
                    "scenario": self.scenario_label,
                    "df": self.df,
                    "method": row.method,
                    "rel_bias": row.rel_bias,
                    "sd": row.sd,
                    "mean_se": row.mean_se,
                    "coverage": row.coverage,
                    "coverage_mc_se": row.coverage_mc_se,
                    "n_used": row.n_used,
                }
            )
        return pd.DataFrame.from_records(records)

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)

    def to_json(self, path=None) -> str:
        payload = {
            "scenario": self.scenario_label,
            "df": self.df,
            "n_replicates": self.n_replicates,
            "n_boot": self.n_boot,
            "seed": self.seed,
            "mean_oos_r2": self.mean_oos_r2,
            "mean_cv_r2": self.mean_cv_r2,
            "rows": [
                {
                    "method": r.method,
                    "rel_bias": r.rel_bias,
                    "sd": r.sd,
                    "mean_se": r.mean_se,
                    "coverage": r.coverage,
                    "coverage_mc_se": r.coverage_mc_se,
                    "n_used": r.n_used,
                }
                for r in self.rows
            ],
        }
        text = json.dumps(payload, indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def _validate_methods(methods) -> tuple[str, ...]:
    wanted = set(methods)
    unknown = wanted - set(METHODS)
    if unknown:
        raise ConfigInvalid(
            f"unknown methods {sorted(unknown)}; valid methods are {list(METHODS)}"
        )
    if not wanted:
        raise ConfigInvalid("at least one method is required")
    return tuple(m for m in METHODS if m in wanted)


def _nan_sd(values: np.ndarray) -> float:
    ok = np.isfinite(values)
    if ok.sum() < 2:
        return float("nan")
    return float(np.std(values[ok], ddof=1))


def _mc_true_exposure(scenario, M: int, seed: int) -> McReport:
    """Reference mode: regress the outcome on the true subject exposure
    (no first stage). Textbook OLS, so nominal coverage calibrates the
    reporting machinery itself."""
    beta_hat = np.full(M, np.nan)
    se = np.full(M, np.nan)
    beta0 = np.full(M, np.nan)
    gen = gen_scenario_1d if isinstance(scenario, Scenario1D) else gen_scenario_2d
    kwargs = {}
    if isinstance(scenario, Scenario2D):
        kwargs["surface"] = make_surface_2d(scenario)
    for rep in range(M):
        _, subjects, truth = gen(scenario, [seed, rep], **kwargs)
        H = np.column_stack([truth.exposure_subjects, subjects.health_covariates])
        fit = ols_fit(H, subjects.outcomes)
        cov = sandwich_cov(fit, H)
        beta_hat[rep] = fit.coefficients[0]
        se[rep] = math.sqrt(cov.matrix[0, 0])
        beta0[rep] = (fit.gram_inverse @ (H.T @ truth.y_noiseless))[0]
    covered = np.abs(beta_hat - scenario.beta) <= Z95 * se
    n_used = int(np.isfinite(beta_hat).sum())
    cov_rate = float(covered.mean())
    row = McRow(
        method="none",
        rel_bias=float(np.mean(beta0)) / scenario.beta - 1.0,
        sd=_nan_sd(beta_hat),
        mean_se=float(np.mean(se)),
        coverage=cov_rate,
        coverage_mc_se=math.sqrt(max(cov_rate * (1 - cov_rate), 0.0) / M),
        n_used=n_used,
    )
    label = "1d" if isinstance(scenario, Scenario1D) else "2d"
    return McReport(
        rows=(row,),
        n_replicates=M,
        n_boot=0,
        seed=seed,
        scenario_label=f"{label}:true_exposure",
        df=None,
        mean_oos_r2=None,
        mean_cv_r2=None,
    )


class _RepScore(NamedTuple):
    """Per-replicate Monte Carlo scores; NaN marks a failed or
    not-requested quantity."""

    rep: int
    beta_hat: float
    se_model: float
    beta0_hat: float
    beta_bc: float
    beta0_bc: float
    se_boot_unc: float
    se_boot_bc: float
    oos_r2: float
    cv: float


def _mc_one_rep(
    scenario,
    spec_fixed,
    surface,
    df: int,
    need_bias: bool,
    need_boot: bool,
    B: int,
    seed: int,
    rep: int,
    want_cv: bool,
) -> _RepScore:
    nan = float("nan")
    vals = dict(
        beta_hat=nan, se_model=nan, beta0_hat=nan, beta_bc=nan,
        beta0_bc=nan, se_boot_unc=nan, se_boot_bc=nan, oos_r2=nan, cv=nan,
    )
    key = [seed, rep]
    if isinstance(scenario, Scenario1D):
        mon, sub, truth = gen_scenario_1d(scenario, key)
        spec = spec_fixed
    else:
        mon, sub, truth = gen_scenario_2d(scenario, key, surface=surface)
        spec = basis_2d(mon, df, surface.covariate_names)
    try:
        prep = prepare_two_stage(mon, sub, spec)
    except RankDeficient:
        return _RepScore(rep, **vals)
    codes = None
    if mon.clusters is not None:
        codes = np.repeat(
            np.arange(len(prep.cluster_members)),
            [m.shape[0] for m in prep.cluster_members],
        )
    try:
        fit = fit_replicate(
            prep,
            m_codes=codes,
            bias_correct=need_bias,
            extra_outcomes=truth.y_noiseless,
        )
    except RankDeficient:
        return _RepScore(rep, **vals)
    except (CorrectionBlowup, DegenerateExposure):
        try:
            fit = fit_replicate(
                prep,
                m_codes=codes,
                bias_correct=False,
                extra_outcomes=truth.y_noiseless,
            )
        except RankDeficient:
            return _RepScore(rep, **vals)
    vals["beta_hat"] = fit.beta_hat
    vals["se_model"] = fit.se_model
    vals["beta0_hat"] = fit.beta_extra
    if fit.beta_bc is not None:
        vals["beta_bc"] = fit.beta_bc
        vals["beta0_bc"] = fit.beta_bc_extra
    # out-of-sample R2 for predicting the true exposure (surface plus
    # local noise) at subject locations, the practically reported skill
    w_hat = prep.subject_design @ fit.gamma
    x_s = truth.exposure_subjects
    denom = float(np.var(x_s))
    if denom > 0:
        vals["oos_r2"] = 1.0 - float(np.mean((x_s - w_hat) ** 2)) / denom
    if need_boot:
        unc, bc = _replicate_pass(
            prep,
            B,
            [seed, rep, 2],
            bias_correct=need_bias,
            track_both=need_bias,
        )
        vals["se_boot_unc"] = _nan_sd(unc)
        if need_bias:
            vals["se_boot_bc"] = _nan_sd(bc)
    if want_cv:
        vals["cv"] = cv_r2(mon, spec)
    return _RepScore(rep, **vals)


def _mc_chunk(args) -> list[_RepScore]:
    """Score a batch of replicates; single-argument form so a process
    pool can map over chunks."""
    (scenario, spec_fixed, surface, df, need_bias, need_boot, B, seed,
     reps, compute_cv) = args
    return [
        _mc_one_rep(
            scenario, spec_fixed, surface, df, need_bias, need_boot, B,
            seed, rep, rep < compute_cv,
        )
        for rep in reps
    ]


def monte_carlo(
    scenario,
    methods=METHODS,
    M: int = 1000,
    B: int = 100,
    seed: int = 0,
    *,
    df: int | None = None,
    use_true_exposure: bool = False,
    compute_cv: int = 0,
    n_jobs: int = 1,
    keep_estimates: bool = False,
) -> McReport:
    """Run the Monte Carlo study for one scenario and one exposure-model
    size, scoring the requested methods.

    Per-replicate failures (rank-deficient refits, degenerate exposure,
    correction blowups) are counted out rather than raised; each row
    reports how many replicates it used. The relative-bias column is
    computed from the per-replicate noise-averaged estimator (the fit of
    the noise-free outcome on the same design), which is exact for these
    linear fits and makes the column identical across outcome-noise
    variances when exposure seeds are shared.

    ``compute_cv`` > 0 additionally runs leave-one-out (cluster-aware)
    cross-validation of the exposure model on that many leading
    replicates and reports the mean R-squared. ``n_jobs`` > 1 spreads
    replicates over that many worker processes; every replicate is
    seeded by its own index, so the report is bit-identical for any
    n_jobs.
    """
    if M < 100:
        raise ConfigInvalid(f"M must be at least 100, got {M}")
    methods = _validate_methods(methods)
    if use_true_exposure:
        if methods != ("none",):
            raise ConfigInvalid(
                "use_true_exposure supports only the 'none' method"
            )
        return _mc_true_exposure(scenario, M, seed)

    if isinstance(scenario, Scenario1D):
        if df is None:
            df = 9
        spec_fixed = basis_1d(scenario, df)
        surface = None
        label = "1d"
    elif isinstance(scenario, Scenario2D):
        if df is None:
            df = 10
        surface = make_surface_2d(scenario)
        spec_fixed = None
        label = f"2d:surface{scenario.surface_seed}"
    else:
        raise ConfigInvalid(f"unsupported scenario type {type(scenario).__name__}")

    need_bias = "bias_only" in methods or "bias+boot" in methods
    need_boot = "boot_only" in methods or "bias+boot" in methods
    if need_boot and B < MIN_REPLICATES:
        raise ConfigInvalid(
            f"B must be at least {MIN_REPLICATES} when bootstrap methods are "
            f"requested, got {B}"
        )

    beta_hat = np.full(M, np.nan)
    beta_bc = np.full(M, np.nan)
    se_model = np.full(M, np.nan)
    se_boot_unc = np.full(M, np.nan)
    se_boot_bc = np.full(M, np.nan)
    beta0_hat = np.full(M, np.nan)
    beta0_bc = np.full(M, np.nan)
    oos_r2 = np.full(M, np.nan)
    cv_vals = np.full(max(compute_cv, 0), np.nan)

    if n_jobs > 1:
        chunks = [
            c.tolist() for c in np.array_split(np.arange(M), n_jobs) if c.size
        ]
        args = [
            (scenario, spec_fixed, surface, df, need_bias, need_boot, B,
             seed, c, compute_cv)
            for c in chunks
        ]
        with ProcessPoolExecutor(max_workers=len(chunks)) as pool:
            scores = [s for part in pool.map(_mc_chunk, args) for s in part]
    else:
        scores = _mc_chunk(
            (scenario, spec_fixed, surface, df, need_bias, need_boot, B,
             seed, list(range(M)), compute_cv)
        )

    for s in scores:
        beta_hat[s.rep] = s.beta_hat
        se_model[s.rep] = s.se_model
        beta0_hat[s.rep] = s.beta0_hat
        beta_bc[s.rep] = s.beta_bc
        beta0_bc[s.rep] = s.beta0_bc
        se_boot_unc[s.rep] = s.se_boot_unc
        se_boot_bc[s.rep] = s.se_boot_bc
        oos_r2[s.rep] = s.oos_r2
        if s.rep < compute_cv:
            cv_vals[s.rep] = s.cv

    rows = []
    for method in methods:
        corrected = method in ("bias_only", "bias+boot")
        est = beta_bc if corrected else beta_hat
        est0 = beta0_bc if corrected else beta0_hat
        if method == "none" or method == "bias_only":
            ses = se_model
        elif method == "boot_only":
            ses = se_boot_unc
        else:
            ses = se_boot_bc
        ok = np.isfinite(est) & np.isfinite(ses)
        n_used = int(ok.sum())
        if n_used == 0:
            rows.append(
                McRow(method, float("nan"), float("nan"), float("nan"),
                      float("nan"), float("nan"), 0)
            )
            continue
        covered = np.abs(est[ok] - scenario.beta) <= Z95 * ses[ok]
        cov_rate = float(covered.mean())
        ok0 = np.isfinite(est0)
        rows.append(
            McRow(
                method=method,
                rel_bias=float(np.mean(est0[ok0])) / scenario.beta - 1.0,
                sd=_nan_sd(est[ok]),
                mean_se=float(np.mean(ses[ok])),
                coverage=cov_rate,
                coverage_mc_se=math.sqrt(
                    max(cov_rate * (1.0 - cov_rate), 0.0) / n_used
                ),
                n_used=n_used,
            )
        )

    finite_oos = oos_r2[np.isfinite(oos_r2)]
    finite_cv = cv_vals[np.isfinite(cv_vals)]
    estimates = None
    if keep_estimates:
        estimates = pd.DataFrame(
            {
                "rep": np.arange(M),
                "beta_hat": beta_hat,
                "beta_bc": beta_bc,
                "se_model": se_model,
                "se_boot_unc": se_boot_unc,
                "se_boot_bc": se_boot_bc,
                "oos_r2": oos_r2,
            }
        )
    return McReport(
        rows=tuple(rows),
        n_replicates=M,
        n_boot=B if need_boot else 0,
        seed=seed,
        scenario_label=label,
        df=df,
        mean_oos_r2=float(finite_oos.mean()) if finite_oos.size else None,
        mean_cv_r2=float(finite_cv.mean()) if finite_cv.size else None,
        estimates=estimates,
    )


def gen_lur_fixture(seed: int = 0) -> tuple[MonitorDataset, SubjectDataset, dict]:
    """Synthetic urban-style fixture: 93 monitors in 31 road-gradient
    clusters of 3, 625 subjects, five land-use covariates, and a health
    model with two subject-level covariates. Scales are loosely modeled
    on an air-pollution/cardiac-outcome analysis; the fixture exists to
    exercise the full pipeline end to end, not to match any real data.
    """
    rng = np.random.default_rng(seed_list(seed))
    domain = 30.0
    n_clusters, per_cluster = 31, 3
    n_sub = 625

    road_y = np.array([8.0, 16.0, 24.0])

    def lur_layers(pts: np.ndarray) -> np.ndarray:
        # five geographic covariates: log distance to nearest road,
        # dispersion-model local traffic, log population density,
        # distance to downtown, transportation land-use share
        d_road = np.min(np.abs(pts[:, 1][:, None] - road_y[None, :]), axis=1)
        log_road = np.log(d_road + 0.05)
        traffic = np.exp(-d_road / 0.8)
        center = np.array([18.0, 14.0])
        d_center = np.hypot(*(pts - center).T)
        popden = np.log1p(50.0 * np.exp(-((d_center / 9.0) ** 2)))
        trans = 0.3 * np.exp(-d_road / 2.0) + 0.1 * np.exp(-((d_center / 12.0) ** 2))
        return np.column_stack([log_road, traffic, popden, d_center, trans])

    def phi(pts: np.ndarray, layers: np.ndarray) -> np.ndarray:
        coeffs = np.array([-4.0, 6.0, 3.0, -0.5, 8.0])
        smooth = 5.0 * np.sin(pts[:, 0] / 6.0) * np.cos(pts[:, 1] / 7.0)
        return 40.0 + layers @ coeffs + smooth

    # monitors: cluster seeds along roads, members at graded offsets
    seeds_x = rng.uniform(1.0, domain - 1.0, n_clusters)
    seeds_road = rng.integers(0, len(road_y), n_clusters)
    side = rng.choice([-1.0, 1.0], n_clusters)
    offsets = np.array([0.15, 0.45, 1.2])
    mon_pts = []
    for cx, ri, sgn in zip(seeds_x, seeds_road, side):
        for off in offsets:
            mon_pts.append([cx, road_y[ri] + sgn * off])
    mon_pts = np.asarray(mon_pts)
    mon_layers = lur_layers(mon_pts)
    x_star = phi(mon_pts, mon_layers) + rng.normal(0.0, 3.0, len(mon_pts))
    lur_names = ("log_dist_road", "traffic_disp", "log_popden", "dist_center",
                 "transport_land")
    monitors = MonitorDataset(
        locations=mon_pts,
        values=x_star,
        covariates=mon_layers,
        covariate_names=lur_names,
        clusters=np.repeat(np.arange(n_clusters), per_cluster),
    )

    sub_pts = np.column_stack(
        [rng.uniform(0.5, domain - 0.5, n_sub), rng.uniform(0.5, domain - 0.5, n_sub)]
    )
    sub_layers = lur_layers(sub_pts)
    x_sub = phi(sub_pts, sub_layers) + rng.normal(0.0, 3.0, n_sub)
    age = rng.normal(62.0, 9.0, n_sub)
    smoker = (rng.uniform(size=n_sub) < 0.3).astype(float)
    Z = np.column_stack([np.ones(n_sub), age, smoker])
    beta = 0.07
    beta_z = np.array([120.0, 0.25, 4.0])
    y = beta * x_sub + Z @ beta_z + rng.normal(0.0, 18.0, n_sub)
    subjects = SubjectDataset(
        locations=sub_pts,
        outcomes=y,
        health_covariates=Z,
        health_covariate_names=("intercept", "age", "smoker"),
        exposure_covariates=sub_layers,
        exposure_covariate_names=lur_names,
    )
    truth = {"beta": beta, "beta_z": beta_z, "exposure_subjects": x_sub}
    return monitors, subjects, truth
