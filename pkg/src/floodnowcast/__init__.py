"""Graph-based multi-class urban flood nowcasting.

An attention-based spatial-temporal graph network over a region graph of
geographic units, the heterogeneous feature pipeline feeding it, a training
and evaluation harness, and a deterministic synthetic scenario generator for
verification. See the README for the CLI and the acceptance suite.
"""

__version__ = "0.1.0"

from .errors import DomainError, TrainingDiverged, UsageError

__all__ = ["DomainError", "TrainingDiverged", "UsageError", "__version__"]
