"""Exception types shared across the package.

Every error raised on a contract violation derives from :class:`TwoStageError`
so callers (and the command line driver) can distinguish domain failures from
programming bugs.
"""


class TwoStageError(Exception):
    """Base class for all package-specific failures."""


class DimensionMismatch(TwoStageError):
    """Array shapes do not line up (rows, columns, or cluster labels)."""


class RankDeficient(TwoStageError):
    """Design matrix is numerically singular or overparameterized."""


class SingleCluster(TwoStageError):
    """Cluster-robust covariance requested but only one cluster present."""


class PointOutsideDomain(TwoStageError):
    """Evaluation point falls outside the declared B-spline domain."""


class DfTooSmall(TwoStageError):
    """Requested spline dimension is below the minimum for the basis kind."""


class TooFewAnchors(TwoStageError):
    """Not enough distinct (non-degenerate) anchor locations for the basis."""


class DuplicateAnchorsOnly(TwoStageError):
    """All anchor locations coincide; no spatial basis can be built."""


class TooFewClusters(TwoStageError):
    """Cross-validation needs more clusters (or monitors) than provided."""


class DegenerateExposure(TwoStageError):
    """Predicted exposure surface has (numerically) no usable variation."""


class CorrectionBlowup(TwoStageError):
    """|1 + estimated relative bias| is too close to zero to divide by.

    This usually signals an overfit exposure model; report the uncorrected
    estimate with a warning instead of trusting the corrected one.
    """


class SpectrumNegative(TwoStageError):
    """Circulant embedding failed (negative spectrum) at the size cap."""


class AllReplicatesFailed(TwoStageError):
    """Every bootstrap replicate errored; no resampling SE available."""


class MissingCovariate(TwoStageError):
    """A referenced covariate column is absent from the dataset."""


class NonFiniteCovariate(TwoStageError):
    """NaN or infinity found where finite numbers are required."""


class ConfigInvalid(TwoStageError):
    """Configuration file or option set fails validation."""


class ParseError(TwoStageError):
    """Input file could not be parsed."""
