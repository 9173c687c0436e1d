"""
Gradient Check
Analytic backward versus central finite differences in 64-bit precision
"""
from typing import Callable, Dict, Mapping

import numpy as np
from loguru import logger
from pydantic import BaseModel

from src.fiberseg.autodiff.tensor import Tensor
from src.fiberseg.errors import ShapeError


class GradCheckResult(BaseModel):
    max_relative_error: float
    worst_input: str
    per_input: Dict[str, float]


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.abs(analytic).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def grad_check(
    fn: Callable[[], Tensor],
    inputs: Mapping[str, Tensor],
    h: float = 1e-3,
    seed: int = 0,
) -> GradCheckResult:
    """
    Compare the backward pass of fn against central differences

    fn is re-evaluated with each input element nudged by +h and -h. Its output is
    reduced to a scalar with a fixed random projection so every output element
    contributes to the check.

    Args:
        fn: Zero-argument closure computing the op from the tensors in inputs
        inputs: Named leaf tensors (float64, requires_grad) to differentiate against
        h: Finite-difference step
        seed: Seed of the output projection

    Returns:
        Worst relative error, the input it belongs to, and the error per input

    Raises:
        ShapeError: If an input is not a float64 tensor with a gradient slot
    """
    for name, t in inputs.items():
        if t.dtype != np.float64 or not t.requires_grad:
            raise ShapeError(f"input {name} must be a float64 tensor requiring grad (build it in float64_mode)")

    out = fn()
    projection = np.random.default_rng(seed).standard_normal(out.shape)

    for t in inputs.values():
        t.zero_grad()
    out.backward(projection)
    analytic = {name: t.grad.copy() for name, t in inputs.items()}

    def objective() -> float:
        return float(np.sum(fn().values * projection))

    per_input: Dict[str, float] = {}
    for name, t in inputs.items():
        numeric = np.zeros_like(t.values)
        flat = t.values.reshape(-1)
        numeric_flat = numeric.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            f_plus = objective()
            flat[i] = original - h
            f_minus = objective()
            flat[i] = original
            numeric_flat[i] = (f_plus - f_minus) / (2.0 * h)
        per_input[name] = _relative_error(analytic[name], numeric)
        logger.debug(f"grad_check {name}: relative error {per_input[name]:.3e}")

    worst = max(per_input, key=per_input.get) if per_input else ""
    return GradCheckResult(
        max_relative_error=per_input.get(worst, 0.0),
        worst_input=worst,
        per_input=per_input,
    )
