"""Collaborative filtering with user/decision-factor interaction terms.

Two model families share one estimator API: SGD-trained matrix
factorization (:class:`RMF`, :class:`MLIMF`) and cosine-similarity
neighborhood baselines (:class:`UserCF`, :class:`ItemCF`).  Dataset
parsing, categorical factor extraction, and a benchmark harness with
deterministic splits round out the toolkit.
"""

from .datasets import (
    Dataset,
    make_all_but_two_split,
    make_kfold_split,
    parse_ml100k,
    parse_ml1m,
    read_records,
    write_records,
)
from .evaluation import (
    EvalReport,
    ExperimentPlan,
    MethodSpec,
    dimension_sweep,
    lambda_sweep,
    rmse,
    run_crossval,
    run_temporal,
    write_report_csv,
    write_summary,
)
from .exceptions import (
    DataWarning,
    DivergenceError,
    EvaluationError,
    ParseError,
    ValidationError,
)
from .factorization import (
    MLIMF,
    RMF,
    DimensionBudget,
    HyperParameters,
    load_model,
    save_model,
    split_dimensions,
)
from .factors import (
    AugmentedRatings,
    Factor,
    FactorSchema,
    day_of_year,
    extract_feature_factors,
    extract_temporal_factor,
    factor_rating_stats,
    read_augmented,
    write_augmented,
)
from .neighborhood import (
    ItemCF,
    UserCF,
    cosine_similarity_items,
    cosine_similarity_users,
)

__version__ = "0.1.0"

__all__ = [
    "AugmentedRatings",
    "DataWarning",
    "Dataset",
    "DimensionBudget",
    "DivergenceError",
    "EvalReport",
    "EvaluationError",
    "ExperimentPlan",
    "Factor",
    "FactorSchema",
    "HyperParameters",
    "ItemCF",
    "MLIMF",
    "MethodSpec",
    "ParseError",
    "RMF",
    "UserCF",
    "ValidationError",
    "cosine_similarity_items",
    "cosine_similarity_users",
    "day_of_year",
    "dimension_sweep",
    "extract_feature_factors",
    "extract_temporal_factor",
    "factor_rating_stats",
    "lambda_sweep",
    "load_model",
    "make_all_but_two_split",
    "make_kfold_split",
    "parse_ml100k",
    "parse_ml1m",
    "read_augmented",
    "read_records",
    "rmse",
    "run_crossval",
    "run_temporal",
    "save_model",
    "split_dimensions",
    "write_augmented",
    "write_records",
    "write_report_csv",
    "write_summary",
    "__version__",
]
