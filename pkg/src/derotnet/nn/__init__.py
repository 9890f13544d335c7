from derotnet.nn.tensor import ComputeGraph, Tensor, set_debug
from derotnet.nn.ops import (
    add,
    conv2d,
    flatten,
    fully_connected,
    maxpool2,
    relu,
    scale,
    softmax,
    softmax_cross_entropy,
    tsum,
    weighted_sum,
)
from derotnet.nn.optim import ParamStore, Sgd, SgdConfig, sgd_step
from derotnet.nn.gradcheck import grad_check, numeric_grad, relative_error
from derotnet.nn.checkpoint import load_checkpoint, save_checkpoint
from derotnet.nn.init import he_normal

__all__ = [
    "ComputeGraph", "Tensor", "set_debug", "add", "conv2d", "flatten", "fully_connected",
    "maxpool2", "relu", "scale", "softmax", "softmax_cross_entropy", "tsum", "weighted_sum",
    "ParamStore", "Sgd", "SgdConfig", "sgd_step", "grad_check", "numeric_grad",
    "relative_error", "load_checkpoint", "save_checkpoint", "he_normal",
]

