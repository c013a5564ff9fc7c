"""End-to-end two-stage fit, plus a lean prepared-data path.

``run_two_stage`` is the readable reference pipeline over the public API.
``prepare_two_stage``/``fit_replicate`` implement the same mathematics on
raw arrays with rows gathered by index, which is what the bootstrap and the
Monte Carlo driver hammer; a unit test pins the two paths to each other.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .basis import BasisSpec
from .datasets import MonitorDataset, SubjectDataset
from .errors import DegenerateExposure
from .exposure import (
    ExposureFit,
    fit_exposure,
    orthogonalize,
    subject_design,
)
from .mecorrect import (
    BetaBias,
    CorrectedHealthFit,
    HealthFit,
    beta_bias,
    correct,
    fit_health,
    gamma_bias,
)
from .regress import ols_fit, sandwich_cov

Z95 = 1.96


@dataclass(frozen=True, eq=False)
class TwoStageResult:
    """Everything the drivers need from one full two-stage fit."""

    exposure: ExposureFit
    health: HealthFit
    corrected: CorrectedHealthFit
    w_hat: np.ndarray


def run_two_stage(
    monitors: MonitorDataset,
    subjects: SubjectDataset,
    spec: BasisSpec,
    *,
    bias_correct: bool = True,
    hc1: bool = False,
) -> TwoStageResult:
    """Exposure fit, prediction, health fit, bias estimate, correction.

    With ``bias_correct`` the corrected estimate is the headline one and
    CorrectionBlowup propagates; without it the correction is still
    reported informationally but the CI centers on the uncorrected
    estimate. The CI uses the model SE until a bootstrap SE is attached.
    """
    efit = fit_exposure(monitors, spec, hc1=hc1)
    sdm = subject_design(subjects, spec)
    w_hat = sdm.values @ efit.gamma_hat
    hfit = fit_health(subjects, w_hat, hc1=hc1)
    Z = subjects.health_covariates if subjects.health_covariates.shape[1] else None
    ortho = orthogonalize(sdm, Z)
    gb = gamma_bias(efit)
    bb = beta_bias(efit, ortho, gb)
    if bias_correct:
        beta_bc = correct(hfit.beta_hat, bb)
    else:
        denom = 1.0 + bb.b_hat
        beta_bc = hfit.beta_hat / denom if denom != 0.0 else float("inf")
    est = beta_bc if bias_correct else hfit.beta_hat
    ci = (est - Z95 * hfit.se_model, est + Z95 * hfit.se_model)
    corrected = CorrectedHealthFit(
        beta_hat=hfit.beta_hat,
        beta_z_hat=hfit.beta_z_hat,
        bias=bb,
        beta_bc=float(beta_bc),
        se_model=hfit.se_model,
        se_boot=None,
        ci=ci,
        bias_corrected=bias_correct,
    )
    return TwoStageResult(exposure=efit, health=hfit, corrected=corrected, w_hat=w_hat)


def attach_bootstrap_se(result: TwoStageResult, se_boot: float) -> TwoStageResult:
    """Return a copy whose corrected fit carries the bootstrap SE and CI."""
    c = result.corrected
    est = c.beta_bc if c.bias_corrected else c.beta_hat
    ci = (est - Z95 * se_boot, est + Z95 * se_boot)
    return replace(result, corrected=replace(c, se_boot=float(se_boot), ci=ci))


@dataclass(frozen=True, eq=False)
class PreparedTwoStage:
    """Raw-array snapshot of one dataset pair under a frozen basis."""

    monitor_design: np.ndarray
    monitor_values: np.ndarray
    cluster_members: tuple[np.ndarray, ...] | None
    subject_design: np.ndarray
    health_covariates: np.ndarray
    outcomes: np.ndarray

    @property
    def n_star(self) -> int:
        return self.monitor_values.shape[0]

    @property
    def n(self) -> int:
        return self.outcomes.shape[0]


class ReplicateFit(NamedTuple):
    beta_hat: float
    se_model: float
    b_hat: float | None
    beta_bc: float | None
    beta_extra: float | None
    beta_bc_extra: float | None
    gamma: np.ndarray | None


def seed_list(seed) -> list[int]:
    """Normalize an int or sequence seed to a list of ints for stream keys."""
    if np.isscalar(seed):
        return [int(seed)]
    return [int(s) for s in seed]


def prepare_two_stage(
    monitors: MonitorDataset, subjects: SubjectDataset, spec: BasisSpec
) -> PreparedTwoStage:
    from .exposure import monitor_design  # local import keeps module load light

    mdm = monitor_design(monitors, spec)
    sdm = subject_design(subjects, spec)
    members = None
    if monitors.clusters is not None:
        _, codes = np.unique(monitors.clusters, return_inverse=True)
        members = tuple(
            np.flatnonzero(codes == g) for g in range(int(codes.max()) + 1)
        )
    return PreparedTwoStage(
        monitor_design=mdm.values,
        monitor_values=monitors.values,
        cluster_members=members,
        subject_design=sdm.values,
        health_covariates=subjects.health_covariates,
        outcomes=subjects.outcomes,
    )


def fit_replicate(
    prep: PreparedTwoStage,
    m_idx: np.ndarray | None = None,
    m_codes: np.ndarray | None = None,
    s_idx: np.ndarray | None = None,
    *,
    bias_correct: bool = True,
    extra_outcomes: np.ndarray | None = None,
) -> ReplicateFit:
    """One two-stage fit on row-gathered data (frozen basis).

    m_idx/s_idx select monitor/subject rows (None = all); m_codes are the
    replicate's cluster codes for the coefficient sandwich (None = HC0).
    ``extra_outcomes`` fits the same health design against a second
    response vector, reusing the factorization (used for the noise-free
    relative-bias column of Monte Carlo reports).

    Raises RankDeficient / DegenerateExposure / CorrectionBlowup; callers
    doing resampling count these as replicate failures.
    """
    Xm = prep.monitor_design if m_idx is None else prep.monitor_design[m_idx]
    ym = prep.monitor_values if m_idx is None else prep.monitor_values[m_idx]
    mfit = ols_fit(Xm, ym)
    mcov = sandwich_cov(mfit, Xm, clusters=m_codes)
    gamma = mfit.coefficients

    Xs = prep.subject_design if s_idx is None else prep.subject_design[s_idx]
    Z = prep.health_covariates if s_idx is None else prep.health_covariates[s_idx]
    y = prep.outcomes if s_idx is None else prep.outcomes[s_idx]
    w = Xs @ gamma
    H = np.column_stack([w, Z]) if Z.shape[1] else w[:, None]
    hfit = ols_fit(H, y)
    hcov = sandwich_cov(hfit, H)
    beta = float(hfit.coefficients[0])
    se = float(np.sqrt(hcov.matrix[0, 0]))

    beta_extra = None
    if extra_outcomes is not None:
        y0 = extra_outcomes if s_idx is None else extra_outcomes[s_idx]
        beta_extra = float((hfit.gram_inverse @ (H.T @ y0))[0])

    b_hat = None
    beta_bc = None
    beta_bc_extra = None
    if bias_correct:
        e = mfit.residuals
        G = mfit.gram_inverse
        lev = np.einsum("ij,ij->i", Xm @ G, Xm)
        delta = -G @ (Xm.T @ (lev * e)) + (G @ (Xm.T @ e)) / ym.shape[0]
        if Z.shape[1]:
            psi = np.linalg.solve(Z.T @ Z, Z.T @ Xs)
            Rc = Xs - Z @ psi
        else:
            Rc = Xs
        wc = Rc @ gamma
        D = float(np.mean(wc**2))
        if D <= 1e-12 * max(float(np.mean(w**2)), 1.0):
            raise DegenerateExposure(
                "orthogonalized exposure predictions have no variation"
            )
        cov = mcov.matrix
        term1 = -float(np.mean(wc * (Rc @ delta))) / D
        term2 = -float(np.mean(np.einsum("ij,ij->i", Rc @ cov, Rc))) / D
        v = (wc @ Rc) / wc.shape[0]
        term3 = 2.0 * float(v @ cov @ v) / D**2
        b_hat = term1 + term2 + term3
        beta_bc = correct(beta, b_hat)
        if beta_extra is not None:
            beta_bc_extra = beta_extra / (1.0 + b_hat)
    return ReplicateFit(
        beta_hat=beta,
        se_model=se,
        b_hat=b_hat,
        beta_bc=beta_bc,
        beta_extra=beta_extra,
        beta_bc_extra=beta_bc_extra,
        gamma=gamma,
    )


def draw_monitor_indices(prep: PreparedTwoStage, rng) -> tuple[np.ndarray, np.ndarray | None]:
    """Resample monitors: whole clusters when present, else single rows.

    Returns (row indices, replicate cluster codes or None). Drawn clusters
    get fresh codes so the sandwich treats repeats as distinct units.
    """
    if prep.cluster_members is None:
        n = prep.n_star
        return rng.integers(0, n, n), None
    members = prep.cluster_members
    G = len(members)
    chosen = rng.integers(0, G, G)
    parts = [members[c] for c in chosen]
    sizes = np.array([p.shape[0] for p in parts])
    codes = np.repeat(np.arange(G), sizes)
    return np.concatenate(parts), codes
