"""
Residual Block
conv -> ReLU -> conv -> BN -> add skip -> ReLU
"""
from typing import Dict, Optional

import numpy as np

from src.fiberseg.autodiff.ops import BatchNormState, ConvKernel, Mode, add, batchnorm, conv, relu
from src.fiberseg.autodiff.tensor import Tensor
from src.fiberseg.errors import ShapeError


class ResidualBlock:
    """
    Two same-padding convolutions with a ReLU in between, batch normalization after the
    second one, and an identity connection (a learned 1x1 projection when the width changes)
    """

    def __init__(
        self,
        conv1: ConvKernel,
        conv2: ConvKernel,
        bn: BatchNormState,
        projection: Optional[ConvKernel] = None,
    ):
        if conv2.c_in != conv1.c_out or conv2.c_out != conv1.c_out or bn.channels != conv1.c_out:
            raise ShapeError(
                f"inconsistent block widths: conv1 {conv1.c_in}->{conv1.c_out}, "
                f"conv2 {conv2.c_in}->{conv2.c_out}, bn {bn.channels}"
            )
        if conv1.c_in != conv1.c_out and projection is None:
            raise ShapeError("a width-changing block needs a projection skip")
        if projection is not None and (projection.c_in, projection.c_out) != (conv1.c_in, conv1.c_out):
            raise ShapeError("projection widths do not match the block")
        self.conv1 = conv1
        self.conv2 = conv2
        self.bn = bn
        self.projection = projection

    @classmethod
    def init(cls, c_in: int, c_out: int, ndim: int, rng: np.random.Generator) -> "ResidualBlock":
        conv1 = ConvKernel.init(c_in, c_out, ndim, rng)
        conv2 = ConvKernel.init(c_out, c_out, ndim, rng)
        projection = ConvKernel.init(c_in, c_out, ndim, rng, size=1) if c_in != c_out else None
        return cls(conv1, conv2, BatchNormState(c_out), projection)

    @property
    def c_in(self) -> int:
        return self.conv1.c_in

    @property
    def c_out(self) -> int:
        return self.conv1.c_out

    def parameters(self) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for prefix, part in (("conv1", self.conv1), ("conv2", self.conv2), ("bn", self.bn)):
            for name, tensor in part.parameters().items():
                params[f"{prefix}.{name}"] = tensor
        if self.projection is not None:
            for name, tensor in self.projection.parameters().items():
                params[f"proj.{name}"] = tensor
        return params

    def buffers(self) -> Dict[str, np.ndarray]:
        return {f"bn.{name}": arr for name, arr in self.bn.buffers().items()}

    def __call__(self, x: Tensor, mode: Mode = "train") -> Tensor:
        return residual_block(x, self, mode)


def residual_block(x: Tensor, block: ResidualBlock, mode: Mode = "train") -> Tensor:
    """
    y = ReLU(BN(conv2(ReLU(conv1(x)))) + skip(x))

    Raises:
        ShapeError: If x does not carry the block's input width
    """
    if x.values.ndim < 2 or x.shape[1] != block.c_in:
        raise ShapeError(f"block expects {block.c_in} input channels, got shape {x.shape}")
    branch = batchnorm(conv(relu(conv(x, block.conv1)), block.conv2), block.bn, mode)
    skip = x if block.projection is None else conv(x, block.projection)
    return relu(add(branch, skip))
