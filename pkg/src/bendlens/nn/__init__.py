from .tensor import GraphError, Tensor, log_softmax, softmax
from .layers import (
    EVAL,
    TRAIN,
    BatchNorm,
    Conv2d,
    Dense,
    Dropout,
    Layer,
    MaxPool2d,
    ReLU,
    Sequential,
    Sigmoid,
    TransposedConv2d,
    conv_out_size,
    tconv_out_size,
)
from .optim import Adam, DivergenceError
from .gradcheck import grad_check, numeric_grad
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint

__all__ = [
    "Adam", "BatchNorm", "CheckpointError", "Conv2d", "Dense", "DivergenceError",
    "Dropout", "EVAL", "GraphError", "Layer", "MaxPool2d", "ReLU", "Sequential",
    "Sigmoid", "TRAIN", "Tensor", "TransposedConv2d", "conv_out_size", "grad_check",
    "load_checkpoint", "log_softmax", "numeric_grad", "save_checkpoint", "softmax",
    "tconv_out_size",
]
