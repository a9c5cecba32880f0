"""SparseSwin: a window-attention backbone feeding a latent-token transformer block."""

from .model import SparseSwin, SparseSwinConfig, build, count_flops, count_params, freeze, tiny_config
from .rng import Rng
from .sparta import SparTaConfig, SparTaState
from .tensor import Tensor, backward, no_grad

__all__ = [
    "Rng",
    "SparTaConfig",
    "SparTaState",
    "SparseSwin",
    "SparseSwinConfig",
    "Tensor",
    "backward",
    "build",
    "count_flops",
    "count_params",
    "freeze",
    "no_grad",
    "tiny_config",
]
