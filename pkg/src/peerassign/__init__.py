"""Peer-effect-aware classroom assignment.

Three stages: a friendship-formation network that yields a row-stochastic
friendship-probability matrix per classroom, an instrumental-variable
estimate of the friendship-weighted peer effect, and a genetic search over
two-classroom partitions with optional dispersion penalties.
"""

__version__ = "0.1.0"

from peerassign.errors import (  # noqa: E402
    ConfigError,
    EstimationError,
    InfeasibleError,
    NumericError,
    ParseError,
    PeerAssignError,
    StageError,
    TrainingError,
    ValidationError,
)

__all__ = [
    "__version__",
    "ConfigError",
    "EstimationError",
    "InfeasibleError",
    "NumericError",
    "ParseError",
    "PeerAssignError",
    "StageError",
    "TrainingError",
    "ValidationError",
]
