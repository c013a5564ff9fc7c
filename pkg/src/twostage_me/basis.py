"""Spatial basis construction: cubic B-splines (1-D) and low-rank
thin-plate regression splines (2-D).

A :class:`BasisSpec` freezes everything needed to evaluate the basis at new
points (knots via the domain for B-splines, anchor locations plus kernel
weights for thin-plate splines), so refitting on resampled data reuses the
exact same basis functions.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline
from scipy.spatial.distance import cdist

from .errors import (
    DfTooSmall,
    DimensionMismatch,
    DuplicateAnchorsOnly,
    NonFiniteCovariate,
    PointOutsideDomain,
    TooFewAnchors,
)

SPLINE_KINDS = ("none", "bspline1d", "thinplate2d")


@dataclass(frozen=True, eq=False)
class BasisSpec:
    """Frozen description of an exposure design: covariates + spline block.

    Invariants: total columns r = q + spline_df + (1 if intercept);
    spline_df == 0 iff spline_kind == "none"; anchor data present iff
    spline_kind == "thinplate2d"; domain present iff "bspline1d".
    """

    covariate_names: tuple[str, ...]
    spline_kind: str
    spline_df: int
    intercept: bool
    domain: tuple[float, float] | None = None
    anchors: np.ndarray | None = None
    spline_weights: np.ndarray | None = None
    column_names: tuple[str, ...] = field(init=False)

    def __post_init__(self):
        if self.spline_kind not in SPLINE_KINDS:
            raise DimensionMismatch(f"unknown spline kind {self.spline_kind!r}")
        if (self.spline_df == 0) != (self.spline_kind == "none"):
            raise DimensionMismatch("spline_df must be 0 exactly when kind is none")
        names = ["intercept"] if self.intercept else []
        names += list(self.covariate_names)
        if self.spline_kind == "bspline1d":
            if self.domain is None:
                raise DimensionMismatch("bspline1d spec needs a domain")
            lo, hi = float(self.domain[0]), float(self.domain[1])
            if not np.isfinite([lo, hi]).all() or hi <= lo:
                raise DimensionMismatch(f"bad B-spline domain ({lo}, {hi})")
            object.__setattr__(self, "domain", (lo, hi))
            names += [f"bs{j + 1}" for j in range(self.spline_df)]
        elif self.spline_kind == "thinplate2d":
            if self.anchors is None or self.spline_weights is None:
                raise DimensionMismatch("thinplate2d spec needs anchors and weights")
            names += ["tp_const", "tp_x", "tp_y"]
            names += [f"tp_e{j + 1}" for j in range(self.spline_df - 3)]
        object.__setattr__(self, "column_names", tuple(names))

    @property
    def q(self) -> int:
        return len(self.covariate_names)

    @property
    def r(self) -> int:
        return self.q + self.spline_df + (1 if self.intercept else 0)


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    """Evaluated design: values (n, r), the spec, and the points used."""

    values: np.ndarray
    spec: BasisSpec
    locations: np.ndarray
    column_names: tuple[str, ...]

    @property
    def n(self) -> int:
        return self.values.shape[0]


def _bspline_knots(df: int, domain: tuple[float, float]) -> np.ndarray:
    lo, hi = domain
    interior = np.linspace(lo, hi, df - 2)[1:-1]
    return np.concatenate([[lo] * 4, interior, [hi] * 4])


def bspline_basis(points, df: int, domain: tuple[float, float]) -> np.ndarray:
    """Cubic B-spline basis matrix with ``df`` columns.

    Knots are equally spaced on ``domain`` with clamped (4x repeated)
    boundary knots, so rows form a partition of unity on the closed domain.

    Raises
    ------
    DfTooSmall
        If df < 4 (a cubic basis needs at least 4 functions).
    PointOutsideDomain
        If any point falls outside the closed domain.
    """
    if df < 4:
        raise DfTooSmall(f"cubic B-spline basis needs df >= 4, got {df}")
    s = np.asarray(points, dtype=float).ravel()
    lo, hi = float(domain[0]), float(domain[1])
    if hi <= lo:
        raise DimensionMismatch(f"bad B-spline domain ({lo}, {hi})")
    if s.size and (s.min() < lo or s.max() > hi):
        bad = s[(s < lo) | (s > hi)][0]
        raise PointOutsideDomain(
            f"point {bad:g} outside B-spline domain ({lo:g}, {hi:g})"
        )
    t = _bspline_knots(df, (lo, hi))
    # Evaluate at the right endpoint via its left limit so the clamped
    # boundary basis function keeps the partition of unity closed.
    mat = BSpline.design_matrix(np.minimum(s, hi), t, 3, extrapolate=False).toarray()
    at_hi = s == hi
    if at_hi.any():
        row = np.zeros(df)
        row[-1] = 1.0
        mat[at_hi] = row
    return mat


def make_bspline_spec(
    df: int,
    domain: tuple[float, float],
    covariate_names=(),
    intercept: bool = False,
) -> BasisSpec:
    """Spec for a 1-D design: optional intercept, covariates, B-splines."""
    if df < 4:
        raise DfTooSmall(f"cubic B-spline basis needs df >= 4, got {df}")
    return BasisSpec(
        covariate_names=tuple(covariate_names),
        spline_kind="bspline1d",
        spline_df=int(df),
        intercept=bool(intercept),
        domain=(float(domain[0]), float(domain[1])),
    )


def make_covariates_spec(covariate_names, intercept: bool = True) -> BasisSpec:
    """Spec with no spline block (covariates-only exposure model)."""
    return BasisSpec(
        covariate_names=tuple(covariate_names),
        spline_kind="none",
        spline_df=0,
        intercept=bool(intercept),
    )


def _tp_kernel(dist: np.ndarray) -> np.ndarray:
    out = np.zeros_like(dist)
    pos = dist > 0
    d = dist[pos]
    out[pos] = d * d * np.log(d)
    return out


def thinplate_basis(
    anchors,
    df: int,
    covariate_names=(),
    intercept: bool = False,
) -> BasisSpec:
    """Low-rank thin-plate regression spline basis on 2-D anchors.

    The spline block has ``df`` columns: the three polynomial terms
    (1, s1, s2) plus the df - 3 leading eigenvectors (by absolute
    eigenvalue) of the radial kernel ``d^2 log d`` on the distinct anchors,
    projected orthogonal to the polynomial space. Eigenvector signs and
    column scales are fixed at construction so re-evaluation is
    deterministic; duplicated anchors are collapsed first.

    Raises
    ------
    DfTooSmall
        If df < 3.
    DuplicateAnchorsOnly
        If all anchors coincide.
    TooFewAnchors
        If there are fewer distinct anchors than df, or the anchors are
        collinear (the polynomial block degenerates).
    """
    if df < 3:
        raise DfTooSmall(f"thin-plate basis needs df >= 3, got {df}")
    pts = np.asarray(anchors, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise DimensionMismatch(f"anchors must be (n, 2), got {pts.shape}")
    if not np.isfinite(pts).all():
        raise NonFiniteCovariate("anchors contain non-finite entries")
    distinct = np.unique(pts, axis=0)
    m = distinct.shape[0]
    if m == 1:
        raise DuplicateAnchorsOnly("all anchor locations coincide")
    if m < df:
        raise TooFewAnchors(f"{m} distinct anchors < df = {df}")
    T = np.column_stack([np.ones(m), distinct])
    if np.linalg.matrix_rank(T) < 3:
        raise TooFewAnchors("anchors are collinear; thin-plate basis needs area")

    k = df - 3
    if k == 0:
        weights = np.empty((m, 0))
    else:
        E = _tp_kernel(cdist(distinct, distinct))
        # Absorb the polynomial constraint: project the kernel orthogonal
        # to the (1, s1, s2) span on both sides before the eigendecomposition.
        Tq, _ = np.linalg.qr(T)
        proj = lambda A: A - Tq @ (Tq.T @ A)  # noqa: E731
        B = proj(proj(E).T)
        B = 0.5 * (B + B.T)
        evals, evecs = np.linalg.eigh(B)
        order = np.argsort(-np.abs(evals))[:k]
        U = evecs[:, order]
        # Deterministic sign: largest-magnitude entry of each column positive.
        flips = np.sign(U[np.abs(U).argmax(axis=0), np.arange(k)])
        flips[flips == 0] = 1.0
        U = U * flips
        # Unit-RMS columns at the anchors for stable conditioning.
        cols = E @ U
        scale = np.sqrt(np.mean(cols**2, axis=0))
        scale[scale == 0] = 1.0
        weights = U / scale
    return BasisSpec(
        covariate_names=tuple(covariate_names),
        spline_kind="thinplate2d",
        spline_df=int(df),
        intercept=bool(intercept),
        anchors=distinct,
        spline_weights=weights,
    )


def evaluate_spline(spec: BasisSpec, locations) -> np.ndarray:
    """Evaluate only the spline block of ``spec`` at ``locations``."""
    loc = np.asarray(locations, dtype=float)
    if loc.ndim == 1:
        loc = np.column_stack([loc, np.zeros_like(loc)])
    if loc.ndim != 2 or loc.shape[1] != 2:
        raise DimensionMismatch(f"locations must be (n, 2), got {loc.shape}")
    if spec.spline_kind == "none":
        return np.empty((loc.shape[0], 0))
    if spec.spline_kind == "bspline1d":
        return bspline_basis(loc[:, 0], spec.spline_df, spec.domain)
    poly = np.column_stack([np.ones(loc.shape[0]), loc])
    if spec.spline_weights.shape[1] == 0:
        return poly
    K = _tp_kernel(cdist(loc, spec.anchors))
    return np.column_stack([poly, K @ spec.spline_weights])


def design_matrix(spec: BasisSpec, covariate_values, locations) -> DesignMatrix:
    """Assemble the design [intercept | covariates | spline] at locations.

    ``covariate_values`` must be (n, q) in the order of
    ``spec.covariate_names`` (anything with 0 columns is accepted for q=0).

    Raises
    ------
    DimensionMismatch, NonFiniteCovariate
    """
    loc = np.asarray(locations, dtype=float)
    if loc.ndim == 1:
        loc = np.column_stack([loc, np.zeros_like(loc)])
    n = loc.shape[0]
    if covariate_values is None:
        cov = np.empty((n, 0))
    else:
        cov = np.asarray(covariate_values, dtype=float)
        if cov.ndim == 1:
            cov = cov[:, None]
        if cov.size == 0:
            cov = np.empty((n, 0))
    if cov.shape != (n, spec.q):
        raise DimensionMismatch(
            f"covariate block {cov.shape} does not match {n} points x q={spec.q}"
        )
    if cov.size and not np.isfinite(cov).all():
        raise NonFiniteCovariate("covariate block contains non-finite entries")
    blocks = []
    if spec.intercept:
        blocks.append(np.ones((n, 1)))
    if spec.q:
        blocks.append(cov)
    spline = evaluate_spline(spec, loc)
    if spline.shape[1]:
        blocks.append(spline)
    values = np.hstack(blocks) if blocks else np.empty((n, 0))
    if values.shape[1] != spec.r:
        raise DimensionMismatch(
            f"assembled {values.shape[1]} columns, expected r = {spec.r}"
        )
    return DesignMatrix(
        values=values,
        spec=spec,
        locations=loc,
        column_names=spec.column_names,
    )
