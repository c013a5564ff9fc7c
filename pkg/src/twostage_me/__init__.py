"""Two-stage exposure/health regression with measurement-error handling.

Stage one fits a spatial exposure surface to monitoring data by least
squares on a basis of geographic covariates and spline terms; stage two
regresses health outcomes on the exposures that surface predicts at
subject locations. Because the predictions carry both smoothing error
and estimation noise, the naive second-stage inference is biased and
overconfident. This package quantifies that error, corrects the
estimated health effect by its estimated relative bias, provides a
design-based bootstrap for standard errors, checks the compatibility
conditions under which the plug-in approach is consistent, and ships the
synthetic scenario generators and Monte Carlo driver used to validate
all of it.

Typical use::

    from twostage_me import (
        MonitorDataset, SubjectDataset, make_bspline_spec,
        run_two_stage, bootstrap,
    )

    result = run_two_stage(monitors, subjects, spec)
    boot = bootstrap(monitors, subjects, spec, n_replicates=200)

or from the command line via ``twostage-me fit --config analysis.yaml``.
"""
from .basis import (
    BasisSpec,
    DesignMatrix,
    bspline_basis,
    design_matrix,
    evaluate_spline,
    make_bspline_spec,
    make_covariates_spec,
    thinplate_basis,
)
from .boot import BootstrapResult, bootstrap
from .datasets import MonitorDataset, SubjectDataset
from .diagnose import (
    ColumnComparison,
    CompatibilityReport,
    SpanCheck,
    check_condition1,
    check_condition2,
    compatibility_report,
)
from .errors import (
    AllReplicatesFailed,
    ConfigInvalid,
    CorrectionBlowup,
    DegenerateExposure,
    DimensionMismatch,
    MissingCovariate,
    ParseError,
    RankDeficient,
    SpectrumNegative,
    TwoStageError,
)
from .exposure import ExposureFit, cv_r2, fit_exposure, orthogonalize, predict
from .mecorrect import (
    BetaBias,
    CorrectedHealthFit,
    GammaBias,
    HealthFit,
    beta_bias,
    beta_var_cl,
    correct,
    fit_health,
    gamma_bias,
    kappa,
    kappa_second_derivative,
)
from .pipeline import TwoStageResult, attach_bootstrap_se, run_two_stage
from .regress import LinearFit, RobustCov, ols_fit, sandwich_cov
from .simgen import (
    McReport,
    McRow,
    Scenario1D,
    Scenario2D,
    Surface2D,
    basis_1d,
    basis_2d,
    gen_lur_fixture,
    gen_scenario_1d,
    gen_scenario_2d,
    make_surface_2d,
    matern_correlation,
    matern_field,
    monte_carlo,
)

__version__ = "0.1.0"

__all__ = [
    "AllReplicatesFailed",
    "BasisSpec",
    "BetaBias",
    "BootstrapResult",
    "ColumnComparison",
    "CompatibilityReport",
    "ConfigInvalid",
    "CorrectedHealthFit",
    "CorrectionBlowup",
    "DegenerateExposure",
    "DesignMatrix",
    "DimensionMismatch",
    "ExposureFit",
    "GammaBias",
    "HealthFit",
    "LinearFit",
    "McReport",
    "McRow",
    "MissingCovariate",
    "MonitorDataset",
    "ParseError",
    "RankDeficient",
    "RobustCov",
    "Scenario1D",
    "Scenario2D",
    "SpanCheck",
    "SpectrumNegative",
    "SubjectDataset",
    "Surface2D",
    "TwoStageError",
    "TwoStageResult",
    "attach_bootstrap_se",
    "basis_1d",
    "basis_2d",
    "beta_bias",
    "beta_var_cl",
    "bootstrap",
    "bspline_basis",
    "check_condition1",
    "check_condition2",
    "compatibility_report",
    "correct",
    "cv_r2",
    "design_matrix",
    "evaluate_spline",
    "fit_exposure",
    "fit_health",
    "gamma_bias",
    "gen_lur_fixture",
    "gen_scenario_1d",
    "gen_scenario_2d",
    "kappa",
    "kappa_second_derivative",
    "make_bspline_spec",
    "make_covariates_spec",
    "make_surface_2d",
    "matern_correlation",
    "matern_field",
    "monte_carlo",
    "orthogonalize",
    "predict",
    "run_two_stage",
    "sandwich_cov",
    "thinplate_basis",
]
