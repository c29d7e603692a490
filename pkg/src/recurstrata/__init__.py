"""recurstrata: Bayesian nonparametric joint modeling of recurrent-event gap
times and a truncating terminal event, with principal-stratification
estimands for always-survivors.

The model is an enriched dependent Dirichlet process mixture: subjects share
top-level clusters for the (log) terminal-time regression, and within each
cluster the gap times follow their own nested mixture of lognormal
regressions. A cluster-level frailty pair couples the two processes across
treatment arms, with the cross-world correlation ρ left to sensitivity
analysis. Inference runs a blocked Gibbs sampler on truncated stick-breaking
representations; estimands come from posterior g-computation over the
always-survivor stratum.
"""
from .assess import (
    CpoTable,
    PartitionSummary,
    dp_log_eppf,
    edp_log_eppf,
    lpml,
    observed_loglik,
    observed_loglik_all,
    partition_report,
)
from .data import (
    Dataset,
    GapRepresentation,
    SubjectRecord,
    ValidationError,
    derive_gaps,
    load_dataset,
    save_dataset,
)
from .estimands import (
    DegenerateWeightError,
    EstimandDraws,
    EstimandGrid,
    EventCapError,
    EstimandSummary,
    SensitivityResult,
    compute_mu,
    eta,
    eta_all,
    evaluate_draws,
    kappa,
    kappa_all,
    sensitivity_scan,
    summarize,
    weighted_mu,
)
from .gibbs import FitData, GibbsEngine, fit_with_escalation, run_chain
from .model import (
    ChainState,
    Hyperparameters,
    JsonlSink,
    ListSink,
    ModelVariant,
    PosteriorDraw,
    TraceDiagnostics,
    read_draws_jsonl,
    stick_breaking_weights,
)
from .rng import NumericalError, RngStream, derive_seed, sample_truncated_normal
from .simulate import (
    DgpConfig,
    LatentTruth,
    SimulationError,
    TrueEstimandTable,
    oracle_true_estimands,
    simulate_dataset,
)
from .study import StudyConfig, StudyResult, run_replicate_study

__version__ = "0.1.0"

__all__ = [
    "CpoTable",
    "PartitionSummary",
    "dp_log_eppf",
    "edp_log_eppf",
    "lpml",
    "observed_loglik",
    "observed_loglik_all",
    "partition_report",
    "Dataset",
    "GapRepresentation",
    "SubjectRecord",
    "ValidationError",
    "derive_gaps",
    "load_dataset",
    "save_dataset",
    "DegenerateWeightError",
    "EstimandDraws",
    "EstimandGrid",
    "EstimandSummary",
    "EventCapError",
    "SensitivityResult",
    "compute_mu",
    "eta",
    "eta_all",
    "evaluate_draws",
    "kappa",
    "kappa_all",
    "sensitivity_scan",
    "summarize",
    "weighted_mu",
    "FitData",
    "GibbsEngine",
    "fit_with_escalation",
    "run_chain",
    "ChainState",
    "Hyperparameters",
    "JsonlSink",
    "ListSink",
    "ModelVariant",
    "PosteriorDraw",
    "TraceDiagnostics",
    "read_draws_jsonl",
    "stick_breaking_weights",
    "NumericalError",
    "RngStream",
    "derive_seed",
    "sample_truncated_normal",
    "DgpConfig",
    "LatentTruth",
    "SimulationError",
    "TrueEstimandTable",
    "oracle_true_estimands",
    "simulate_dataset",
    "StudyConfig",
    "StudyResult",
    "run_replicate_study",
    "__version__",
]
