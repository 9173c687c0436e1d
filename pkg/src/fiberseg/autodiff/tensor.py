"""
Tensor
Dense array with a gradient slot and a reverse-mode backward pass
"""
from contextlib import contextmanager
from typing import Callable, Iterator, List, Optional, Sequence

import numpy as np

from src.fiberseg.errors import ShapeError

_default_dtype = np.dtype(np.float32)


def default_dtype() -> np.dtype:
    return _default_dtype


@contextmanager
def float64_mode() -> Iterator[None]:
    """Create new tensors in 64-bit precision (verification only)"""
    global _default_dtype
    previous = _default_dtype
    _default_dtype = np.dtype(np.float64)
    try:
        yield
    finally:
        _default_dtype = previous


class Tensor:
    """
    N-dimensional float array with an optional gradient accumulator

    Tensors produced by ops remember their parents and a closure that pushes the
    output gradient back into them.
    """

    def __init__(
        self,
        values,
        requires_grad: bool = False,
        parents: Sequence["Tensor"] = (),
        backward_fn: Optional[Callable[[np.ndarray], None]] = None,
        dtype=None,
    ):
        arr = np.asarray(values)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else _default_dtype
        self.values = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = np.zeros_like(self.values) if requires_grad else None
        self._parents = tuple(parents)
        self._backward_fn = backward_fn

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0)

    def accumulate(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if grad.shape != self.values.shape:
            raise ShapeError(f"gradient shape {grad.shape} does not match tensor {self.values.shape}")
        self.grad += grad.astype(self.values.dtype, copy=False)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """
        Propagate gradients to every ancestor that requires them

        Args:
            grad: Seed gradient; defaults to ones (a scalar loss)
        """
        if not self.requires_grad:
            return
        seed = np.ones_like(self.values) if grad is None else np.asarray(grad, dtype=self.values.dtype)
        self.grad = seed.reshape(self.values.shape).copy()

        for node in reversed(_topological_order(self)):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited and parent.requires_grad:
                stack.append((parent, False))
    return order


def result(values: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap an op output, wiring the backward closure only when a parent needs gradients"""
    needs_grad = any(p.requires_grad for p in parents)
    return Tensor(
        values,
        requires_grad=needs_grad,
        parents=parents if needs_grad else (),
        backward_fn=backward_fn if needs_grad else None,
        dtype=values.dtype,
    )
