"""Desk-scale lab for one-step generative training on 2D toy data.

Three paradigms share one numpy MLP with hand-written backprop:
plain flow matching, single-branch (t, r)-conditioned mixing, and the
dual-head velocity/flow-map objective.
"""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, DivergenceError, DomainError, StructuralError

__all__ = [
    "ConfigError",
    "DataError",
    "DivergenceError",
    "DomainError",
    "StructuralError",
]
