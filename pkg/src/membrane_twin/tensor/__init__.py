from .core import (Tensor, as_tensor, conv_transpose2d, gather_points, global_max_pool, grad_enabled,
                   linear, matmul, no_grad, relu, reshape, square)
from .layers import MLP, ConvTranspose2d, Linear, Module, parameter
from .optim import (Adam, CosineScheduler, EarlyStopping, PlateauScheduler, SGDMomentum, adam_step,
                    cosine_scheduler, early_stop, plateau_scheduler, sgd_momentum_step)

__all__ = [
    "Tensor", "as_tensor", "conv_transpose2d", "gather_points", "global_max_pool", "grad_enabled", "linear", "matmul",
    "no_grad", "relu", "reshape", "square", "MLP", "ConvTranspose2d", "Linear", "Module", "parameter",
    "Adam", "CosineScheduler", "EarlyStopping", "PlateauScheduler", "SGDMomentum", "adam_step",
    "cosine_scheduler", "early_stop", "plateau_scheduler", "sgd_momentum_step",
]
