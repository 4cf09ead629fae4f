"""Bayesian spatial regression and small-area estimation of forest stand
attributes from sparse inventory plots and wall-to-wall predictors."""

__version__ = "0.1.0"

from .data import (
    ALL_OUTCOMES,
    OUTCOME_ORDER,
    Dataset,
    OutcomeTransform,
    PlotObservation,
    PredictionUnit,
    compute_ba,
    compute_qmd,
    derive_stem_density,
    load_dataset,
    load_plots,
    load_units,
    log_transform,
    transform_outcomes,
)
from .errors import (
    ConfigError,
    DomainError,
    NumericalError,
    StandestError,
    ValidationError,
)
from .samplers import (
    McmcSchedule,
    ModelSpec,
    PosteriorSamples,
    PriorSpec,
    default_priors,
    fit_model,
    fit_mv_nonspatial,
    fit_mv_spatial,
    fit_uni_nonspatial,
    fit_uni_spatial,
    load_samples,
    save_samples,
)
from .spatial import (
    LmcSpec,
    build_corr_matrix,
    build_lmc_cov,
    conditional_gaussian,
    effective_range_mv,
    effective_range_uni,
    exp_corr,
)

__all__ = [name for name in dir() if not name.startswith("_")]
