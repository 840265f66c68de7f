"""Unsupervised domain adaptation with a variational autoencoder whose latents mix in the other domain's features."""
from .errors import (CDLMError, ConfigurationError, DimensionError, DomainError, FormatError,
                     NonFiniteError, StateError, UsageError)
from .model import CDLM, DeepRep, Domain, DomainInfo, NetConfig, TransferLatent
from .tensor import Tensor, no_grad

__version__ = "0.1.0"
