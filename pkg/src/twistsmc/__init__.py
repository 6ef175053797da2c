"""Inference and maximum-marginal-likelihood learning in state-space models.

The library combines smoothing sequential Monte Carlo with
classifier-learned twist functions and wake-sleep gradient estimation,
alongside filtering-SMC and plain importance-sampling baselines, and ships
exact oracles (Kalman/RTS, discrete-path enumeration) to validate all of
it numerically.
"""

from .estimators import (
    EstimatorTargetMismatch,
    GradEstimate,
    nasmc_gradients,
    nasx_gradients,
    snis_rws_gradients,
)
from .optim import AdamState, adam_init, adam_step
from .resampling import AliasTable, alias_setup, resample_indices, systematic_indices
from .rng import RngStream
from .smc import (
    DegenerateSweepError,
    ParticleEnsemble,
    SMCConfig,
    SMCResult,
    posterior_expectation,
    smc_sweep,
)
from .ssm import BootstrapProposal, ModelSpec, Proposal
from .twist import (
    DREBatch,
    QuadraticTwist,
    TrainingDiverged,
    TwistTrainHistory,
    classification_accuracy,
    dre_loss_and_grad,
    sample_dre_batch,
    train_twist,
)
from .weights import (
    DegenerateWeightsError,
    LogWeights,
    effective_sample_size,
    normalize_log_weights,
)

__all__ = [
    "AdamState",
    "AliasTable",
    "BootstrapProposal",
    "DREBatch",
    "DegenerateSweepError",
    "DegenerateWeightsError",
    "EstimatorTargetMismatch",
    "GradEstimate",
    "LogWeights",
    "ModelSpec",
    "ParticleEnsemble",
    "Proposal",
    "QuadraticTwist",
    "RngStream",
    "SMCConfig",
    "SMCResult",
    "TrainingDiverged",
    "TwistTrainHistory",
    "adam_init",
    "adam_step",
    "alias_setup",
    "classification_accuracy",
    "dre_loss_and_grad",
    "effective_sample_size",
    "nasmc_gradients",
    "nasx_gradients",
    "normalize_log_weights",
    "posterior_expectation",
    "resample_indices",
    "sample_dre_batch",
    "smc_sweep",
    "snis_rws_gradients",
    "systematic_indices",
    "train_twist",
]

__version__ = "0.1.0"
