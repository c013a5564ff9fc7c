"""Least squares with heteroscedasticity- and cluster-robust covariance.

The solver is QR-based (never normal equations): a pivoted economic QR gives
both the coefficients and ``(X'X)^-1`` from the triangular factor, plus a
cheap rank check from the diagonal of R.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import qr, solve_triangular

from .errors import DimensionMismatch, RankDeficient, SingleCluster

RCOND_THRESHOLD = 1e-10


@dataclass(frozen=True, eq=False)
class LinearFit:
    """Result of an ordinary least squares fit.

    Attributes
    ----------
    coefficients : array (k,)
    residuals : array (n,)
    gram_inverse : array (k, k)
        ``(X'X)^-1``, symmetric positive definite.
    column_names : tuple of str
    """

    coefficients: np.ndarray
    residuals: np.ndarray
    gram_inverse: np.ndarray
    column_names: tuple[str, ...]

    @property
    def n(self) -> int:
        return self.residuals.shape[0]

    @property
    def k(self) -> int:
        return self.coefficients.shape[0]


@dataclass(frozen=True, eq=False)
class RobustCov:
    """Sandwich covariance matrix with its flavor tag.

    flavor is one of "hc0", "hc1", "cluster"; cluster_count is the number
    of distinct clusters when flavor == "cluster", else None.
    """

    matrix: np.ndarray
    flavor: str
    cluster_count: int | None = None


def ols_fit(design, response, column_names=None) -> LinearFit:
    """Fit response on design by QR least squares.

    Parameters
    ----------
    design : array (n, k), n >= k
    response : array (n,)
    column_names : sequence of str, optional

    Raises
    ------
    RankDeficient
        If the reciprocal condition estimate from the pivoted R factor is
        below 1e-10 (includes the overparameterized n < k case).
    DimensionMismatch
        If shapes disagree.
    """
    X = np.asarray(design, dtype=float)
    y = np.asarray(response, dtype=float).ravel()
    if X.ndim != 2:
        raise DimensionMismatch(f"design must be 2-D, got ndim={X.ndim}")
    n, k = X.shape
    if y.shape[0] != n:
        raise DimensionMismatch(f"design has {n} rows but response has {y.shape[0]}")
    if k == 0:
        raise DimensionMismatch("design has no columns")
    if n < k:
        raise RankDeficient(f"more columns ({k}) than rows ({n})")
    if column_names is None:
        names = tuple(f"x{j}" for j in range(k))
    else:
        names = tuple(column_names)
        if len(names) != k:
            raise DimensionMismatch(f"{k} columns but {len(names)} names")

    Q, R, piv = qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag[0] == 0.0 or diag[-1] / diag[0] < RCOND_THRESHOLD:
        raise RankDeficient(
            f"design numerically rank deficient (rcond ~ "
            f"{0.0 if diag[0] == 0 else diag[-1] / diag[0]:.2e})"
        )
    qty = Q.T @ y
    beta_piv = solve_triangular(R, qty)
    beta = np.empty(k)
    beta[piv] = beta_piv
    rinv = solve_triangular(R, np.eye(k))
    gram_piv = rinv @ rinv.T
    gram = np.empty((k, k))
    gram[np.ix_(piv, piv)] = gram_piv
    gram = 0.5 * (gram + gram.T)
    resid = y - X @ beta
    return LinearFit(
        coefficients=beta,
        residuals=resid,
        gram_inverse=gram,
        column_names=names,
    )


def sandwich_cov(fit: LinearFit, design, clusters=None, hc1: bool = False) -> RobustCov:
    """Heteroscedasticity-robust (HC0/HC1) or cluster-robust covariance.

    The estimator is ``(X'X)^-1 B (X'X)^-1`` where the meat B is
    ``sum_i e_i^2 x_i x_i'`` (HC0; HC1 multiplies by n/(n-k)) or, with
    cluster labels, ``sum_g s_g s_g'`` over per-cluster score sums
    ``s_g = sum_{i in g} e_i x_i``. With every row its own cluster the
    cluster form reduces exactly to HC0.

    Raises
    ------
    SingleCluster
        If cluster labels are supplied but name only one cluster.
    DimensionMismatch
        If shapes disagree with the fit.
    """
    X = np.asarray(design, dtype=float)
    if X.ndim != 2 or X.shape != (fit.n, fit.k):
        raise DimensionMismatch(
            f"design shape {X.shape} does not match fit ({fit.n}, {fit.k})"
        )
    e = fit.residuals
    scores = X * e[:, None]
    if clusters is None:
        meat = scores.T @ scores
        flavor = "hc0"
        count = None
        if hc1:
            if fit.n <= fit.k:
                raise DimensionMismatch("hc1 correction needs n > k")
            meat *= fit.n / (fit.n - fit.k)
            flavor = "hc1"
    else:
        labels = np.asarray(clusters)
        if labels.shape != (fit.n,):
            raise DimensionMismatch("cluster labels must cover every design row")
        _, codes = np.unique(labels, return_inverse=True)
        count = int(codes.max()) + 1
        if count < 2:
            raise SingleCluster("cluster-robust covariance needs >= 2 clusters")
        sums = np.zeros((count, fit.k))
        np.add.at(sums, codes, scores)
        meat = sums.T @ sums
        flavor = "cluster"
    bread = fit.gram_inverse
    cov = bread @ meat @ bread
    cov = 0.5 * (cov + cov.T)
    return RobustCov(matrix=cov, flavor=flavor, cluster_count=count)
