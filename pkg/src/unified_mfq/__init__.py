"""Two-timescale Q-learning for mean-field games and mean-field control.

The package exposes the exact-operator iteration (``engine``), the sampled
tabular learner (``learner``), reference fixed-point solvers (``oracles``),
problem builders (``environments``) and convergence diagnostics
(``diagnostics``).
"""

from unified_mfq.core import (
    ActionSpace,
    Grid,
    KernelFamily,
    LearningRates,
    ProblemSpec,
    StateSpace,
    greedy_policy,
    induced_transition,
    op_P,
    op_T,
    probability_vector,
    sup_norm,
    tv_distance,
)
from unified_mfq.errors import (
    AssumptionViolation,
    ConfigError,
    ConvergenceError,
    NumericalFailure,
)

__version__ = "0.1.0"

__all__ = [
    "ActionSpace",
    "AssumptionViolation",
    "ConfigError",
    "ConvergenceError",
    "Grid",
    "KernelFamily",
    "LearningRates",
    "NumericalFailure",
    "ProblemSpec",
    "StateSpace",
    "greedy_policy",
    "induced_transition",
    "op_P",
    "op_T",
    "probability_vector",
    "sup_norm",
    "tv_distance",
]
