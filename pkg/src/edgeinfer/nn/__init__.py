from . import autodiff
from .autodiff import Tensor, no_grad
from .distributions import MaskedCategorical, masked_sample
from .layers import (
    Adam,
    Embedding,
    GruCell,
    Mlp,
    ParamStore,
    ScalarEncoder,
    attention_weights,
    gru_step,
    mlp_forward,
    orthogonal_init,
)

__all__ = [
    "Adam",
    "Embedding",
    "GruCell",
    "MaskedCategorical",
    "Mlp",
    "ParamStore",
    "ScalarEncoder",
    "Tensor",
    "attention_weights",
    "autodiff",
    "gru_step",
    "masked_sample",
    "mlp_forward",
    "no_grad",
    "orthogonal_init",
]
