"""Exact gradients through diffusion-based purification, at desk scale.

Analytic score models stand in for trained networks so that every
gradient the package produces can be checked against an independent
oracle: a full-tape reference, central finite differences, or a closed
form.  On top of that sit the adaptive attacks and the evaluation
protocols whose details the gradients feed.
"""

__version__ = "0.1.0"

from .autodiff import DomainError, GraphError, Tape, Tensor, grad, tensor
from .errors import ConfigurationError, NumericDivergenceError, ReplayIntegrityError
from .schedule import NoiseSchedule

__all__ = [
    "__version__",
    "Tensor",
    "Tape",
    "tensor",
    "grad",
    "DomainError",
    "GraphError",
    "ConfigurationError",
    "NumericDivergenceError",
    "ReplayIntegrityError",
    "NoiseSchedule",
]
