"""Continuous-time identification of additive transfer-function models.

Refined instrumental-variable iterations for sums of low-order
continuous-time submodels, estimated from sampled open- or closed-loop data
under a zero-order-hold input.
"""

from .lti import (
    AdditiveModel,
    CtSubmodel,
    CtTransferFunction,
    DtTransferFunction,
    IdentifiabilityWarning,
    ModelStructure,
    additive_to_unfactored,
    pack_parameters,
    unpack_parameters,
    zoh_discretize,
)
from .signals import (
    Dataset,
    ExperimentConfig,
    NoiseModel,
    SampledSignal,
    SignalSpec,
    UnstableLoopError,
    simulate,
)
from .estimator import (
    EstimationError,
    EstimationResult,
    EstimatorConfig,
    estimate,
    perturb_parameters,
)

__version__ = "0.1.0"

__all__ = [
    "AdditiveModel",
    "CtSubmodel",
    "CtTransferFunction",
    "DtTransferFunction",
    "IdentifiabilityWarning",
    "ModelStructure",
    "additive_to_unfactored",
    "pack_parameters",
    "unpack_parameters",
    "zoh_discretize",
    "Dataset",
    "ExperimentConfig",
    "NoiseModel",
    "SampledSignal",
    "SignalSpec",
    "UnstableLoopError",
    "simulate",
    "EstimationError",
    "EstimationResult",
    "EstimatorConfig",
    "estimate",
    "perturb_parameters",
]
