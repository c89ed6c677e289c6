"""SeqPAN video grounding: parallel attention, sequence matching and span localisation on a numpy autograd."""

from .autograd import Tensor, grad_check, no_grad
from .model import AttentionVariant, Batch, ForwardTrace, MatchMode, ModelConfig, SeqPAN

__all__ = [
    "AttentionVariant",
    "Batch",
    "ForwardTrace",
    "MatchMode",
    "ModelConfig",
    "SeqPAN",
    "Tensor",
    "grad_check",
    "no_grad",
]
__version__ = "0.1.0"
