"""Measurement-error characterization and correction for the two-stage fit.

The exposure predictions carry two error components: a smoothing
(Berkson-like) part from basis truncation, which a compatible design keeps
harmless, and an estimation (classical-like) part from fitting the basis
coefficients on finitely many monitors, which biases the health-effect
estimate toward zero and adds variance. This module estimates that bias
from one dataset and corrects for it.

The coefficient-bias estimate comes from a second-order expansion of the
weighted-least-squares functional kappa(m) (basis coefficients under monitor
weights m) around equal weights, with the empirical-measure moments of the
monitor draw. Everything reduces to row aggregates: writing h for the
leverages and e for the monitor residuals,

    delta = -G R' (h * e) + G R' e / n*,        G = (R'R)^-1,

where the second term is the (analytically zero) full double sum kept in
aggregate form for fidelity to the expansion. Per-entry second derivatives
of kappa are exposed for verification against finite differences.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CorrectionBlowup, DegenerateExposure, DimensionMismatch
from .exposure import ExposureFit, OrthogonalizedBasis
from .regress import LinearFit, RobustCov, ols_fit, sandwich_cov

BLOWUP_THRESHOLD = 0.05


@dataclass(frozen=True, eq=False)
class GammaBias:
    """Estimated mean error of the exposure coefficients.

    delta estimates E[gamma_hat - gamma]; it is exactly zero when the
    monitor residuals vanish (interpolating exposure model).
    """

    delta: np.ndarray
    n_star: int


@dataclass(frozen=True, eq=False)
class BetaBias:
    """Relative bias of the health-effect estimate, with its three parts.

    b_hat = term1 + term2 + term3 where term1 carries the coefficient bias,
    term2 (<= 0) the prediction variance penalty, term3 (>= 0) the
    covariance of the squared-prediction denominator. denom is the mean
    squared orthogonalized prediction.
    """

    term1: float
    term2: float
    term3: float
    b_hat: float
    denom: float


@dataclass(frozen=True, eq=False)
class HealthFit:
    """Second-stage regression of outcomes on predicted exposure plus Z."""

    fit: LinearFit
    cov: RobustCov
    beta_hat: float
    beta_z_hat: np.ndarray
    se_model: float


@dataclass(frozen=True, eq=False)
class CorrectedHealthFit:
    """Health-effect estimate with measurement-error treatment attached.

    beta_bc = beta_hat / (1 + b_hat) always; ``ci`` is the 95% interval for
    the selected estimate (corrected when ``bias_corrected``) using the
    bootstrap SE when available, else the model SE.
    """

    beta_hat: float
    beta_z_hat: np.ndarray
    bias: BetaBias
    beta_bc: float
    se_model: float
    se_boot: float | None
    ci: tuple[float, float]
    bias_corrected: bool


def fit_health(subjects, w_hat, hc1: bool = False) -> HealthFit:
    """Regress outcomes on [w_hat | health covariates] by least squares.

    The model SE is the HC0 (or HC1) sandwich SE of the exposure slope.
    Raises RankDeficient when w_hat is collinear with the covariates
    (e.g. constant predictions with an intercept).
    """
    w = np.asarray(w_hat, dtype=float).ravel()
    if w.shape[0] != subjects.n:
        raise DimensionMismatch(
            f"{w.shape[0]} predictions for {subjects.n} subjects"
        )
    Z = subjects.health_covariates
    X = np.column_stack([w, Z]) if Z.shape[1] else w[:, None]
    names = ("exposure",) + subjects.health_covariate_names
    fit = ols_fit(X, subjects.outcomes, column_names=names)
    cov = sandwich_cov(fit, X, hc1=hc1)
    return HealthFit(
        fit=fit,
        cov=cov,
        beta_hat=float(fit.coefficients[0]),
        beta_z_hat=fit.coefficients[1:].copy(),
        se_model=float(np.sqrt(cov.matrix[0, 0])),
    )


def kappa(design, response, m) -> np.ndarray:
    """Weighted-least-squares coefficients under monitor weights m.

    kappa(m) = (R' M R)^-1 R' M x with M = diag(m); kappa at equal weights
    is the usual least-squares solution, and kappa is invariant to the
    scale of m.
    """
    X = np.asarray(design, dtype=float)
    x = np.asarray(response, dtype=float).ravel()
    w = np.asarray(m, dtype=float).ravel()
    Xw = X * w[:, None]
    return np.linalg.solve(X.T @ Xw, Xw.T @ x)


def kappa_second_derivative(design, response, j: int, k: int, m=None) -> np.ndarray:
    """Analytic d^2 kappa / dm_j dm_k (vector of length r).

    With P = (R'MR)^-1, a_i = P R_i, e_i = x_i - R_i . kappa(m) and
    H_jk = R_j' P R_k, the six-term expansion collapses (the diagonal
    weight matrix has zero second derivative) to

        d2 kappa / dm_j dm_k = -H_jk (a_k e_j + a_j e_k).
    """
    X = np.asarray(design, dtype=float)
    x = np.asarray(response, dtype=float).ravel()
    n = X.shape[0]
    w = np.full(n, 1.0 / n) if m is None else np.asarray(m, dtype=float).ravel()
    Xw = X * w[:, None]
    P = np.linalg.inv(X.T @ Xw)
    gam = P @ (Xw.T @ x)
    a_j = P @ X[j]
    a_k = P @ X[k]
    e_j = x[j] - X[j] @ gam
    e_k = x[k] - X[k] @ gam
    H_jk = X[j] @ a_k
    return -H_jk * (a_k * e_j + a_j * e_k)


def gamma_bias(fit: ExposureFit) -> GammaBias:
    """Second-order estimate of the exposure-coefficient bias.

    Aggregates the diagonal sum S1 = sum_j d2kappa/dm_j^2 and the full
    double sum (zero analytically) into O(n* r^2) matrix products; the
    returned delta is on the actual-expectation scale, i.e. it already
    carries the 1/n* factors of the empirical-measure moments.
    """
    X = fit.design.values
    e = fit.fit.residuals
    G = fit.fit.gram_inverse
    n = X.shape[0]
    lev = np.einsum("ij,ij->i", X @ G, X)
    # delta = S1 / (2 n^2) - S_all / (2 n^3); see module docstring.
    delta = -G @ (X.T @ (lev * e)) + (G @ (X.T @ e)) / n
    return GammaBias(delta=delta, n_star=n)


def _squared_scale(fit: ExposureFit, ortho: OrthogonalizedBasis) -> float:
    w_full = ortho.values @ fit.gamma_hat  # orthogonalized predictions
    return float(np.mean(w_full**2))


def beta_bias(fit: ExposureFit, ortho: OrthogonalizedBasis, gbias: GammaBias) -> BetaBias:
    """Plug-in estimate of the relative bias of the health-effect estimate.

    All three terms are computed on the orthogonalized basis R^c at subject
    locations, with the fitted predictions standing in for the target
    surface and the exposure-fit sandwich covariance for Cov(gamma_hat):

        term1 = -mean_i[ w^c_i (R^c_i . delta) ] / D
        term2 = -mean_i[ R^c_i Cov R^c_i' ] / D
        term3 = 2 v' Cov v / D^2,  v = mean_i w^c_i R^c_i,  D = mean_i (w^c_i)^2

    Raises DegenerateExposure when D is numerically zero (no usable
    exposure contrast after orthogonalization).
    """
    Rc = ortho.values
    if Rc.shape[1] != fit.gamma_hat.shape[0]:
        raise DimensionMismatch(
            f"orthogonalized basis has {Rc.shape[1]} columns, "
            f"exposure fit has {fit.gamma_hat.shape[0]} coefficients"
        )
    cov = fit.gamma_cov.matrix
    wc = Rc @ fit.gamma_hat
    D = float(np.mean(wc**2))
    raw_scale = float(np.mean((fit.design.values @ fit.gamma_hat) ** 2))
    if D <= 1e-12 * max(raw_scale, 1.0):
        raise DegenerateExposure(
            "orthogonalized exposure predictions have no variation"
        )
    term1 = -float(np.mean(wc * (Rc @ gbias.delta))) / D
    RcC = Rc @ cov
    term2 = -float(np.mean(np.einsum("ij,ij->i", RcC, Rc))) / D
    v = (wc @ Rc) / Rc.shape[0]
    term3 = 2.0 * float(v @ cov @ v) / D**2
    return BetaBias(
        term1=term1,
        term2=term2,
        term3=term3,
        b_hat=term1 + term2 + term3,
        denom=D,
    )


def beta_var_cl(fit: ExposureFit, ortho: OrthogonalizedBasis, beta_hat: float) -> float:
    """Classical-like variance contribution to the health-effect estimate.

    beta_hat^2 * v' Cov(gamma_hat) v / D^2 with v and D as in beta_bias;
    this is the extra sampling variance induced by estimating the exposure
    coefficients on finitely many monitors.
    """
    Rc = ortho.values
    cov = fit.gamma_cov.matrix
    wc = Rc @ fit.gamma_hat
    D = float(np.mean(wc**2))
    raw_scale = float(np.mean((fit.design.values @ fit.gamma_hat) ** 2))
    if D <= 1e-12 * max(raw_scale, 1.0):
        raise DegenerateExposure(
            "orthogonalized exposure predictions have no variation"
        )
    v = (wc @ Rc) / Rc.shape[0]
    return float(beta_hat**2 * (v @ cov @ v) / D**2)


def correct(beta_hat: float, bias: BetaBias | float) -> float:
    """Bias-corrected health-effect estimate beta_hat / (1 + b_hat).

    Raises CorrectionBlowup when |1 + b_hat| < 0.05: the correction would
    divide by a near-zero factor, which signals an overfit exposure model;
    report the uncorrected estimate with a warning instead.
    """
    b = bias.b_hat if isinstance(bias, BetaBias) else float(bias)
    denom = 1.0 + b
    if abs(denom) < BLOWUP_THRESHOLD:
        raise CorrectionBlowup(
            f"|1 + b_hat| = {abs(denom):.4f} < {BLOWUP_THRESHOLD}; "
            "correction unreliable (overfit exposure model?)"
        )
    return float(beta_hat / denom)
