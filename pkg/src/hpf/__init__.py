"""Hierarchical (HPF) and Bayesian (BPF) Poisson factorization for recommendation."""
from .data import (
    Dataset,
    EmptyDatasetError,
    ParseError,
    RawRatings,
    SplitDataset,
    Triplets,
    build_dataset,
    parse_ratings,
    split,
)
from .evaluation import (
    MetricReport,
    PPCReport,
    evaluate,
    metrics_by_activity,
    normalized_precision_at_m,
    ppc_user_activity,
    recall_at_m,
)
from .inference import (
    FitOptions,
    NumericalFailure,
    VariationalState,
    compute_phi,
    elbo,
    fit,
    initialize,
    predictive_loglik,
    sweep,
)
from .model import (
    FittedModel,
    GammaParams,
    Hyperparameters,
    LatentState,
    expected_log_weight,
    expected_weight,
    simulate_generative,
)
from .recommend import RecommendationList, score, top_items_per_component, top_m

__version__ = "0.1.0"
