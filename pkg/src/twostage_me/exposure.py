"""First-stage exposure surface fitting and prediction.

The exposure model regresses monitor values on a spatial basis (covariates
plus spline block). Predictions at subject locations feed the second-stage
health model; the fitted object keeps everything needed downstream
(coefficient covariance, design, residuals).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .basis import BasisSpec, DesignMatrix, design_matrix, thinplate_basis
from .datasets import MonitorDataset, SubjectDataset
from .errors import (
    DimensionMismatch,
    MissingCovariate,
    TooFewClusters,
)
from .regress import LinearFit, RobustCov, ols_fit, sandwich_cov


@dataclass(frozen=True, eq=False)
class ExposureFit:
    """Fitted exposure surface.

    Attributes
    ----------
    gamma_hat : array (r,)
        Basis coefficients.
    gamma_cov : RobustCov
        Sandwich covariance of gamma_hat (cluster-robust when the monitor
        data carry cluster labels, HC0 otherwise).
    basis : BasisSpec
        The frozen basis; bootstrap refits reuse it unchanged.
    design : DesignMatrix
        Monitor design used in the fit.
    response : array (n*,)
        Monitor values.
    fit : LinearFit
        Raw least-squares result (residuals, gram inverse).
    clusters : array or None
        Monitor cluster labels as passed in.
    """

    gamma_hat: np.ndarray
    gamma_cov: RobustCov
    basis: BasisSpec
    design: DesignMatrix
    response: np.ndarray
    fit: LinearFit
    clusters: np.ndarray | None

    @property
    def n_star(self) -> int:
        return self.response.shape[0]

    @property
    def fitted(self) -> np.ndarray:
        return self.response - self.fit.residuals


@dataclass(frozen=True, eq=False)
class OrthogonalizedBasis:
    """Basis columns with the health-covariate projection removed.

    values[:, k] = R_k(s_i) - Z_i . projection_coeffs[k]; by construction
    Z' values ~ 0 column by column.
    """

    values: np.ndarray
    projection_coeffs: np.ndarray
    column_names: tuple[str, ...]


def covariate_block(names, available_names, matrix) -> np.ndarray:
    """Select named covariate columns from ``matrix`` in spec order."""
    if not names:
        return np.empty((matrix.shape[0] if matrix.ndim == 2 else len(matrix), 0))
    index = {n: j for j, n in enumerate(available_names)}
    cols = []
    for name in names:
        if name not in index:
            raise MissingCovariate(f"covariate {name!r} not found in dataset")
        cols.append(matrix[:, index[name]])
    return np.column_stack(cols)


def monitor_design(monitors: MonitorDataset, spec: BasisSpec) -> DesignMatrix:
    cov = covariate_block(spec.covariate_names, monitors.covariate_names, monitors.covariates)
    return design_matrix(spec, cov, monitors.locations)


def subject_design(subjects: SubjectDataset, spec: BasisSpec) -> DesignMatrix:
    cov = covariate_block(
        spec.covariate_names, subjects.exposure_covariate_names, subjects.exposure_covariates
    )
    return design_matrix(spec, cov, subjects.locations)


def fit_exposure(monitors: MonitorDataset, spec: BasisSpec, hc1: bool = False) -> ExposureFit:
    """Fit the exposure model by least squares on the monitor data.

    Raises RankDeficient when the design is singular (including n* <= r),
    MissingCovariate when the spec names a column the data lack.
    """
    dm = monitor_design(monitors, spec)
    fit = ols_fit(dm.values, monitors.values, column_names=dm.column_names)
    cov = sandwich_cov(fit, dm.values, clusters=monitors.clusters, hc1=hc1)
    return ExposureFit(
        gamma_hat=fit.coefficients,
        gamma_cov=cov,
        basis=spec,
        design=dm,
        response=monitors.values,
        fit=fit,
        clusters=monitors.clusters,
    )


def predict(fit: ExposureFit, locations, covariates=None) -> np.ndarray:
    """Predicted exposure surface at new locations.

    ``covariates`` must supply the spec's covariate columns (n, q) in spec
    order; pass None for a covariate-free basis. B-spline specs refuse
    points outside their domain (PointOutsideDomain) rather than clamp.
    """
    dm = design_matrix(fit.basis, covariates, locations)
    return dm.values @ fit.gamma_hat


def predict_subjects(fit: ExposureFit, subjects: SubjectDataset) -> np.ndarray:
    return subject_design(subjects, fit.basis).values @ fit.gamma_hat


def orthogonalize(basis_at_subjects: DesignMatrix, health_covariates=None) -> OrthogonalizedBasis:
    """Remove the health-covariate span from each basis column.

    Each column R_k of the subject-level design is replaced by the residual
    of its least-squares projection on the health covariates Z (which must
    include the intercept column when supplied). With ``health_covariates``
    None the basis is returned unprojected (no-covariate health model).
    """
    R = basis_at_subjects.values
    if health_covariates is None:
        psi = np.empty((R.shape[1], 0))
        return OrthogonalizedBasis(
            values=R.copy(),
            projection_coeffs=psi,
            column_names=basis_at_subjects.column_names,
        )
    Z = np.asarray(health_covariates, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    if Z.shape[0] != R.shape[0]:
        raise DimensionMismatch(
            f"health covariates have {Z.shape[0]} rows, basis has {R.shape[0]}"
        )
    zfit = ols_fit(Z, R[:, 0])
    # Solve all projections at once through the shared gram inverse.
    psi = zfit.gram_inverse @ (Z.T @ R)  # (p, r)
    values = R - Z @ psi
    return OrthogonalizedBasis(
        values=values,
        projection_coeffs=psi.T,
        column_names=basis_at_subjects.column_names,
    )


def _fold_spec(spec: BasisSpec, train_monitors: MonitorDataset) -> BasisSpec:
    """Per-fold basis: thin-plate anchors come from the held-in monitors
    only (prevents leakage); B-spline knots are frozen in the spec."""
    if spec.spline_kind == "thinplate2d":
        return thinplate_basis(
            train_monitors.locations,
            spec.spline_df,
            covariate_names=spec.covariate_names,
            intercept=spec.intercept,
        )
    return spec


def _subset_monitors(monitors: MonitorDataset, idx: np.ndarray) -> MonitorDataset:
    return MonitorDataset(
        locations=monitors.locations[idx],
        values=monitors.values[idx],
        covariates=monitors.covariates[idx],
        covariate_names=monitors.covariate_names,
        clusters=None if monitors.clusters is None else monitors.clusters[idx],
    )


def cv_r2(monitors: MonitorDataset, spec: BasisSpec) -> float:
    """Leave-one-cluster-out cross-validated R^2 of the exposure model.

    Folds are clusters when labels are present (>= 5 required), else single
    monitors (>= 10 required). The fold basis is rebuilt from held-in
    anchors; predictions are pooled and scored against the global-mean
    total sum of squares, so the statistic can go negative for a useless
    model.
    """
    n = monitors.n
    if monitors.clusters is not None:
        labels, codes = np.unique(monitors.clusters, return_inverse=True)
        if labels.shape[0] < 5:
            raise TooFewClusters(
                f"leave-one-cluster-out needs >= 5 clusters, got {labels.shape[0]}"
            )
        fold_ids = [np.flatnonzero(codes == g) for g in range(labels.shape[0])]
    else:
        if n < 10:
            raise TooFewClusters(f"unclustered CV needs >= 10 monitors, got {n}")
        fold_ids = [np.array([i]) for i in range(n)]

    pred = np.empty(n)
    for held in fold_ids:
        keep = np.setdiff1d(np.arange(n), held, assume_unique=True)
        train = _subset_monitors(monitors, keep)
        fspec = _fold_spec(spec, train)
        ffit = fit_exposure(train, fspec)
        cov = covariate_block(
            fspec.covariate_names, monitors.covariate_names, monitors.covariates[held]
        )
        pred[held] = predict(ffit, monitors.locations[held], cov)
    resid = monitors.values - pred
    sst = np.sum((monitors.values - monitors.values.mean()) ** 2)
    if sst == 0:
        raise TooFewClusters("monitor values are constant; CV R^2 undefined")
    return float(1.0 - np.sum(resid**2) / sst)
