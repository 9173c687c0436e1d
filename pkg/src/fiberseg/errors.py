"""
Error hierarchy for the fiber segmentation toolkit
"""
from typing import Optional


class FiberSegError(Exception):
    """Base class for every error raised by the toolkit"""


# raised from pydantic validators, so not a ValueError (pydantic would wrap it)
class VolumeFormatError(FiberSegError):
    """VXG1 header, payload size, dtype tag or label values are invalid"""


class DegenerateVolumeError(FiberSegError, ValueError):
    """Volume is constant (zero variance) where a contrast is required"""


class PatchBoundsError(FiberSegError, IndexError):
    """Patch, slice or tile falls outside the volume"""


class DimensionMismatchError(FiberSegError, ValueError):
    """Two inputs disagree in voxel dims or in network dimensionality"""


class SpecParseError(FiberSegError, ValueError):
    """Spec file or experiment preset could not be parsed"""


class PhantomGenerationError(FiberSegError):
    """Fiber placement could not reach the target volume fraction"""

    def __init__(self, message: str, achieved_fraction: float):
        super().__init__(f"{message} (achieved fraction {achieved_fraction:.4f})")
        self.achieved_fraction = achieved_fraction


class ExtentMismatchError(FiberSegError, ValueError):
    """MR and LR specs do not describe the same physical extent"""


# raised from pydantic validators, see VolumeFormatError
class FilterError(FiberSegError):
    """Invalid filter parameter or non-finite filter input"""


class ForestError(FiberSegError, ValueError):
    """Random forest training, prediction or persistence failure"""


class ShapeError(FiberSegError, ValueError):
    """Tensor shapes, channel counts or label values are incompatible"""


class OptimizerError(FiberSegError, ArithmeticError):
    """Optimizer received a non-finite gradient"""


class TrainingDivergedError(FiberSegError, ArithmeticError):
    """Loss became non-finite during training"""

    def __init__(self, iteration: int, lr: float, loss: Optional[float] = None):
        super().__init__(
            f"loss became non-finite at iteration {iteration} (lr={lr:g}, loss={loss})"
        )
        self.iteration = iteration
        self.lr = lr
        self.loss = loss


class AugmentationError(FiberSegError, ValueError):
    """Rotation requested on a patch that is not square / cubic"""


class CheckpointError(FiberSegError, ValueError):
    """Checkpoint file is truncated, inconsistent or incompatible"""


class ReportFormatError(FiberSegError, ValueError):
    """Dice report line is malformed or carries invalid values"""
