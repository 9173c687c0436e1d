"""
Adam Optimizer
"""
from typing import Dict, Mapping

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.fiberseg.autodiff.tensor import Tensor
from src.fiberseg.errors import OptimizerError, ShapeError


class AdamState(BaseModel):
    """Per-parameter first and second moments plus the shared step counter"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    lr: float = Field(1e-3, gt=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)
    t: int = Field(0, ge=0)
    m: Dict[str, np.ndarray] = Field(default_factory=dict)
    v: Dict[str, np.ndarray] = Field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], s: AdamState) -> AdamState:
    """
    One bias-corrected Adam update of every parameter from its accumulated gradient

    All gradients are checked before any parameter moves, so a rejected step leaves
    the parameters and the state untouched.

    Args:
        params: Named parameters; their .grad holds the gradient
        s: Optimizer state, updated in place

    Returns:
        The same state, for chaining

    Raises:
        OptimizerError: If any gradient is non-finite
        ShapeError: If a stored moment no longer matches its parameter
    """
    for name, p in params.items():
        if p.grad is None:
            raise OptimizerError(f"parameter {name} has no gradient slot")
        if not np.all(np.isfinite(p.grad)):
            raise OptimizerError(f"non-finite gradient in {name} at step {s.t + 1}")
        if name in s.m and s.m[name].shape != p.shape:
            raise ShapeError(f"Adam moment for {name} has shape {s.m[name].shape}, parameter {p.shape}")

    s.t += 1
    correction1 = 1.0 - s.beta1**s.t
    correction2 = 1.0 - s.beta2**s.t
    for name, p in params.items():
        g = p.grad
        m = s.m.setdefault(name, np.zeros_like(p.values))
        v = s.v.setdefault(name, np.zeros_like(p.values))
        m *= s.beta1
        m += (1.0 - s.beta1) * g
        v *= s.beta2
        v += (1.0 - s.beta2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        p.values -= (s.lr * m_hat / (np.sqrt(v_hat) + s.eps)).astype(p.dtype, copy=False)
    return s
