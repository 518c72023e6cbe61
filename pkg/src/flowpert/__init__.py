"""Per-step flow-perturbation entropy estimators for flow-based Boltzmann sampling.

Submodules:

* :mod:`flowpert.gmm` -- Gaussian-mixture targets with analytic scores.
* :mod:`flowpert.flow` -- discretized probability-flow ODE and its inverse.
* :mod:`flowpert.estimators` -- FP, FP++, Hutchinson and brute-force log-determinants.
* :mod:`flowpert.smc` -- annealed SMC in latent space.
* :mod:`flowpert.config`, :mod:`flowpert.metrics`, :mod:`flowpert.validation`,
  :mod:`flowpert.cli` -- experiment harness.
"""

__version__ = "0.1.0"

from .errors import DegenerateEnsemble, NumericalFailure, SingularJacobian
from .estimators import (
    EntropyEstimate,
    EstimatorConfig,
    bruteforce_entropy,
    estimator_stats,
    fp_entropy,
    fppp_entropy,
    hutchinson_entropy,
)
from .flow import DiffusionSchedule, LinearGaussianFlow, PassCounter, ProbabilityFlow, TimeGrid
from .gmm import GmmSpec, build_benchmark_gmm, energy, log_density, modal_assignment, score
from .smc import AnnealingSchedule, SmcConfig, generalized_work, run_smc

__all__ = [
    "AnnealingSchedule",
    "DegenerateEnsemble",
    "DiffusionSchedule",
    "EntropyEstimate",
    "EstimatorConfig",
    "GmmSpec",
    "LinearGaussianFlow",
    "NumericalFailure",
    "PassCounter",
    "ProbabilityFlow",
    "SingularJacobian",
    "SmcConfig",
    "TimeGrid",
    "build_benchmark_gmm",
    "bruteforce_entropy",
    "energy",
    "estimator_stats",
    "fp_entropy",
    "fppp_entropy",
    "generalized_work",
    "hutchinson_entropy",
    "log_density",
    "modal_assignment",
    "run_smc",
    "score",
]
