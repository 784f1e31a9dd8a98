"""Randomized Douglas-Rachford splitting for federated composite problems.

Synchronous (partial participation, certified-inexact prox) and asynchronous
(bounded-delay, event-driven) variants, FedAvg/FedProx baselines for
comparison, and runtime certificates for the descent and rate guarantees.
"""

from drfed.asyncsim import DelayModel, measure_delay_stats, run_async
from drfed.baselines import BaselineConfig, run_baseline
from drfed.certify import (
    ConstantsError,
    TheoryConstants,
    check_descent,
    check_rate,
    lyapunov_V,
    render_report,
    theory_constants,
)
from drfed.feddr import (
    AccuracySchedule,
    Hyper,
    SamplingScheme,
    run_feddr,
    validate_stepsizes,
)
from drfed.numerics import (
    Problem,
    ProxResult,
    QuadraticLoss,
    Regularizer,
    SoftmaxLoss,
    TinyMLPLoss,
    grad_mapping,
    prox_g,
)

__all__ = [
    "AccuracySchedule",
    "BaselineConfig",
    "ConstantsError",
    "DelayModel",
    "Hyper",
    "Problem",
    "ProxResult",
    "QuadraticLoss",
    "Regularizer",
    "SamplingScheme",
    "SoftmaxLoss",
    "TheoryConstants",
    "TinyMLPLoss",
    "check_descent",
    "check_rate",
    "grad_mapping",
    "lyapunov_V",
    "measure_delay_stats",
    "prox_g",
    "render_report",
    "run_async",
    "run_baseline",
    "run_feddr",
    "theory_constants",
    "validate_stepsizes",
]

__version__ = "0.1.0"
