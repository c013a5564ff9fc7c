"""Immutable containers for monitor and subject data.

Locations are always (n, 2) float arrays; one-dimensional problems use a
zero second coordinate. Exposure covariates are the columns that enter the
exposure basis; health covariates are the second-stage regressors (intercept
included explicitly as a column of ones).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, NonFiniteCovariate


def _as_locations(arr) -> np.ndarray:
    loc = np.asarray(arr, dtype=float)
    if loc.ndim == 1:
        loc = np.column_stack([loc, np.zeros_like(loc)])
    if loc.ndim != 2 or loc.shape[1] != 2:
        raise DimensionMismatch(f"locations must be (n, 2), got {loc.shape}")
    if not np.isfinite(loc).all():
        raise NonFiniteCovariate("locations contain non-finite entries")
    return loc


def _as_matrix(arr, n: int, what: str) -> np.ndarray:
    mat = np.asarray(arr, dtype=float)
    if mat.ndim == 1:
        mat = mat[:, None]
    if mat.ndim != 2 or mat.shape[0] != n:
        raise DimensionMismatch(f"{what} must have {n} rows, got shape {mat.shape}")
    if not np.isfinite(mat).all():
        raise NonFiniteCovariate(f"{what} contains non-finite entries")
    return mat


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class MonitorDataset:
    """Exposure monitoring data: locations, measured values, covariates.

    Parameters
    ----------
    locations : array (n, 2)
        Monitor coordinates; 1-D problems use y == 0.
    values : array (n,)
        Measured exposure at each monitor.
    covariates : array (n, q)
        Exposure-model covariates (may be empty with q == 0).
    covariate_names : tuple of str
        One name per covariate column.
    clusters : array (n,) or None
        Optional cluster labels (any hashable dtype) for monitors sampled
        in groups; drives cluster-robust covariance and cluster bootstrap.
    """

    locations: np.ndarray
    values: np.ndarray
    covariates: np.ndarray = field(default_factory=lambda: np.empty((0, 0)))
    covariate_names: tuple[str, ...] = ()
    clusters: np.ndarray | None = None

    def __post_init__(self):
        loc = _as_locations(self.locations)
        vals = np.asarray(self.values, dtype=float).ravel()
        n = loc.shape[0]
        if vals.shape[0] != n:
            raise DimensionMismatch(f"{n} locations but {vals.shape[0]} values")
        if not np.isfinite(vals).all():
            raise NonFiniteCovariate("monitor values contain non-finite entries")
        cov = self.covariates if self.covariates is not None else np.empty((n, 0))
        cov = np.asarray(cov, dtype=float)
        if cov.size == 0:
            cov = np.empty((n, 0))
        cov = _as_matrix(cov, n, "monitor covariates")
        names = tuple(self.covariate_names)
        if len(names) != cov.shape[1]:
            raise DimensionMismatch(
                f"{cov.shape[1]} covariate columns but {len(names)} names"
            )
        clus = self.clusters
        if clus is not None:
            clus = np.asarray(clus)
            if clus.shape != (n,):
                raise DimensionMismatch("cluster labels must be one per monitor")
            clus = _freeze(clus)
        object.__setattr__(self, "locations", _freeze(loc))
        object.__setattr__(self, "values", _freeze(vals))
        object.__setattr__(self, "covariates", _freeze(cov))
        object.__setattr__(self, "covariate_names", names)
        object.__setattr__(self, "clusters", clus)

    @property
    def n(self) -> int:
        return self.locations.shape[0]


@dataclass(frozen=True, eq=False)
class SubjectDataset:
    """Health-analysis data at subject locations.

    ``health_covariates`` are the second-stage regressors Z (intercept as an
    explicit column of ones); ``exposure_covariates`` are the exposure-model
    covariates evaluated at subject locations, needed to predict exposure
    there. Their names must match the monitor dataset's covariate names.
    """

    locations: np.ndarray
    outcomes: np.ndarray
    health_covariates: np.ndarray = field(default_factory=lambda: np.empty((0, 0)))
    health_covariate_names: tuple[str, ...] = ()
    exposure_covariates: np.ndarray = field(default_factory=lambda: np.empty((0, 0)))
    exposure_covariate_names: tuple[str, ...] = ()

    def __post_init__(self):
        loc = _as_locations(self.locations)
        y = np.asarray(self.outcomes, dtype=float).ravel()
        n = loc.shape[0]
        if y.shape[0] != n:
            raise DimensionMismatch(f"{n} locations but {y.shape[0]} outcomes")
        if not np.isfinite(y).all():
            raise NonFiniteCovariate("outcomes contain non-finite entries")
        z = self.health_covariates if self.health_covariates is not None else np.empty((n, 0))
        z = np.asarray(z, dtype=float)
        if z.size == 0:
            z = np.empty((n, 0))
        z = _as_matrix(z, n, "health covariates")
        znames = tuple(self.health_covariate_names)
        if len(znames) != z.shape[1]:
            raise DimensionMismatch(
                f"{z.shape[1]} health covariate columns but {len(znames)} names"
            )
        xc = self.exposure_covariates if self.exposure_covariates is not None else np.empty((n, 0))
        xc = np.asarray(xc, dtype=float)
        if xc.size == 0:
            xc = np.empty((n, 0))
        xc = _as_matrix(xc, n, "exposure covariates")
        xnames = tuple(self.exposure_covariate_names)
        if len(xnames) != xc.shape[1]:
            raise DimensionMismatch(
                f"{xc.shape[1]} exposure covariate columns but {len(xnames)} names"
            )
        object.__setattr__(self, "locations", _freeze(loc))
        object.__setattr__(self, "outcomes", _freeze(y))
        object.__setattr__(self, "health_covariates", _freeze(z))
        object.__setattr__(self, "health_covariate_names", znames)
        object.__setattr__(self, "exposure_covariates", _freeze(xc))
        object.__setattr__(self, "exposure_covariate_names", xnames)

    @property
    def n(self) -> int:
        return self.locations.shape[0]
