"""Contamination-bias diagnostics for regressions with several treatment arms."""

from importlib.metadata import PackageNotFoundError, version as _version

try:
    __version__ = _version("artifact")
except PackageNotFoundError:  # pragma: no cover
    __version__ = "0.0.0"

from .api import (
    CommonWeightsRegression,
    ContaminationDecomposer,
    FWLResidualizer,
    InteractedATE,
    OneAtATimeRegression,
    PropensityProjection,
    UninteractedRegression,
)
from .data import Dataset, DesignSpec, build_design, encode_treatments, load_csv
from .decompose import (
    conditional_ates,
    decompose_beta,
    decomposition_se,
    heterogeneity_sd,
    lambda_matrices,
    weight_effect_correlation,
    worst_case_bounds,
)
from .estimators import (
    ate_interacted,
    common_weights,
    estimate_propensity,
    known_pscore_variance,
    one_at_a_time,
    uninteracted,
)
from .exceptions import ContaminationBiasError, NumericalError, ValidationError
from .oracle import (
    PopulationSpec,
    efficiency_bound,
    enumerate_exact,
    example_spec,
    optimal_weights,
    population_beta,
    population_lambda,
    simulate,
)
from .regress import DesignMatrix, RegressionFit, hc_variance, ols_fit, residualize, wls_fit
