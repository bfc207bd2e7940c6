"""Posterior imputation of missing events in continuous-time event streams.

A neural Hawkes process scores complete streams, a known censoring mechanism
explains which events went unrecorded, sequential Monte Carlo draws weighted
samples of the missing events (particle filtering, or particle smoothing with
a trained bidirectional proposal), and consensus decoding collapses the
samples into one minimum-risk prediction under an optimal transport loss.
"""

from .consensus import consensus_decode
from .events import (
    BOS_TYPE,
    Event,
    EventSequence,
    InvalidSequence,
    as_complete,
    from_interior,
    merge,
    read_ndjson,
    sequence_from_obj,
    sequence_to_obj,
    split,
    validate,
    write_ndjson,
)
from .hawkes import (
    NHPParams,
    TimeGrid,
    intensities,
    intensity,
    log_likelihood,
    random_model,
    sample_prior,
    zeros_model,
)
from .missingness import (
    MissingnessMechanism,
    censor,
    log_p_miss,
    mechanism_from_config,
)
from .proposal import (
    ProposalParams,
    filtering_params,
    log_q,
    proposal_intensity,
    random_proposal,
)
from .seeds import substream
from .smc import (
    Ensemble,
    ensemble_from_obj,
    ensemble_to_obj,
    ess,
    expectation,
    load_ensemble,
    marginal_log_likelihood,
    propose_imputation,
    resample_multinomial,
    run,
    save_ensemble,
)
from .training import (
    Adam,
    TrainConfig,
    TrainResult,
    grad_exclusive,
    grad_inclusive,
    grad_log_likelihood,
    load_model_checkpoint,
    load_proposal_checkpoint,
    mcem,
    save_checkpoint,
    train_model,
    train_proposal,
)
from .transport import (
    Alignment,
    CostConfig,
    brute_force_otd,
    distance_given_alignment,
    otd,
)

__all__ = [
    "BOS_TYPE",
    "Adam",
    "Alignment",
    "CostConfig",
    "Ensemble",
    "Event",
    "EventSequence",
    "InvalidSequence",
    "MissingnessMechanism",
    "NHPParams",
    "ProposalParams",
    "TimeGrid",
    "TrainConfig",
    "TrainResult",
    "as_complete",
    "brute_force_otd",
    "censor",
    "consensus_decode",
    "distance_given_alignment",
    "ensemble_from_obj",
    "ensemble_to_obj",
    "ess",
    "expectation",
    "filtering_params",
    "from_interior",
    "grad_exclusive",
    "grad_inclusive",
    "grad_log_likelihood",
    "intensities",
    "intensity",
    "load_ensemble",
    "load_model_checkpoint",
    "load_proposal_checkpoint",
    "log_likelihood",
    "log_p_miss",
    "log_q",
    "marginal_log_likelihood",
    "mcem",
    "mechanism_from_config",
    "merge",
    "otd",
    "proposal_intensity",
    "propose_imputation",
    "random_model",
    "random_proposal",
    "read_ndjson",
    "resample_multinomial",
    "run",
    "sample_prior",
    "save_checkpoint",
    "save_ensemble",
    "sequence_from_obj",
    "sequence_to_obj",
    "split",
    "substream",
    "train_model",
    "train_proposal",
    "validate",
    "write_ndjson",
    "zeros_model",
]
