"""Single-cell clustering with a cell KNN graph, a PPI gene embedding and a
fused graph-attention autoencoder trained with KL self-training."""

from .errors import ConfigError, DomainError, DualGraphError, NonFiniteError, ParseError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DomainError", "DualGraphError", "NonFiniteError", "ParseError", "__version__"]
