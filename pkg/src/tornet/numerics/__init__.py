"""Tensor type, differentiable ops and the gradient checker."""

from .gradcheck import GradcheckReport, gradcheck
from .ops import (
    add,
    batchnorm2d,
    broadcast_freq,
    conv2d,
    conv_output_size,
    dropout,
    freq_avgpool,
    instance_norm,
    linear,
    maxpool2d,
    mean,
    mul,
    relu,
    reshape,
    softmax,
    softmax_cross_entropy,
    swish,
    total,
    transpose,
)
from .rng import RngStreams, stream
from .tensor import Parameter, Tensor, as_tensor, no_grad

__all__ = [
    "GradcheckReport",
    "Parameter",
    "RngStreams",
    "Tensor",
    "add",
    "as_tensor",
    "batchnorm2d",
    "broadcast_freq",
    "conv2d",
    "conv_output_size",
    "dropout",
    "freq_avgpool",
    "gradcheck",
    "instance_norm",
    "linear",
    "maxpool2d",
    "mean",
    "mul",
    "no_grad",
    "relu",
    "reshape",
    "softmax",
    "softmax_cross_entropy",
    "stream",
    "swish",
    "total",
    "transpose",
]
