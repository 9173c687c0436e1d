"""
Reverse-mode differentiation over dense tensors, limited to the operators the
segmentation networks use
"""
from src.fiberseg.autodiff.gradcheck import GradCheckResult, grad_check
from src.fiberseg.autodiff.layers import ResidualBlock, residual_block
from src.fiberseg.autodiff.ops import (
    BatchNormState,
    ConvKernel,
    Mode,
    add,
    batchnorm,
    conv,
    fiber_probability,
    relu,
    softmax,
    softmax_cross_entropy,
)
from src.fiberseg.autodiff.optim import AdamState, adam_step
from src.fiberseg.autodiff.tensor import Tensor, default_dtype, float64_mode

__all__ = [
    "AdamState",
    "BatchNormState",
    "ConvKernel",
    "GradCheckResult",
    "Mode",
    "ResidualBlock",
    "Tensor",
    "adam_step",
    "add",
    "batchnorm",
    "conv",
    "default_dtype",
    "fiber_probability",
    "float64_mode",
    "grad_check",
    "relu",
    "residual_block",
    "softmax",
    "softmax_cross_entropy",
]
