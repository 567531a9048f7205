"""Effects of price discounts on demand among always buyers.

Random and causal forests, double machine learning, conventional
benchmarks, identification diagnostics and a simulator with known truth.
"""
__version__ = "0.1.0"

from ._backend import DEFAULT_BACKEND, available_backends
from .benchmarks import bootstrap_psm, ols, probit_fit, psm_ate
from .causal_forest import (
    CausalForestParams,
    causal_forest_ape,
    doubly_robust_scores_continuous,
    estimate_ape,
    estimate_cape,
    fit_causal_forest,
    residualize,
)
from .data import (
    Dataset,
    SectionTable,
    TreatmentSpec,
    aggregate_trip_discount,
    balance_binary_outcome,
    binarize_treatment,
    filter_always_buyers,
    impute_utilization,
    load_survey,
    train_test_split,
)
from .diagnostics import blp_heterogeneity, independence_wald, monotonicity_tests
from .dml import crossfit_nuisances, dml_ate, dr_score, estimate_ate, trim
from .forest import (
    ForestParams,
    fit_forest,
    oob_predict,
    predict,
    tune_forest,
    variable_importance,
)
from .simulator import DgpConfig, monte_carlo_study, oracle_truth, simulate

__all__ = [name for name in dir() if not name.startswith("_")]
