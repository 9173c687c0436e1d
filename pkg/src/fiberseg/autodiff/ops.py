"""
Differentiable Operators
Same-padding convolution (2D / 3D), batch normalization, ReLU, addition and the
two-class softmax cross-entropy loss
"""
from typing import Dict, Literal, Tuple

import numpy as np

from src.fiberseg.autodiff.tensor import Tensor, default_dtype, result
from src.fiberseg.errors import ShapeError

Mode = Literal["train", "eval"]


class ConvKernel:
    """
    Convolution weights (C_out, C_in, k, k[, k]) and per-output-channel bias

    Network layers use k = 3; residual projections use k = 1. Padding is k // 2 so the
    spatial shape is preserved either way.
    """

    def __init__(self, weight: Tensor, bias: Tensor):
        w = weight.values
        if w.ndim not in (4, 5):
            raise ShapeError(f"conv weight must be 4D or 5D, got shape {w.shape}")
        extents = set(w.shape[2:])
        if len(extents) != 1 or extents.pop() not in (1, 3):
            raise ShapeError(f"conv kernel extent must be 3 (or 1 for projections), got {w.shape[2:]}")
        if bias.shape != (w.shape[0],):
            raise ShapeError(f"bias shape {bias.shape} does not match {w.shape[0]} output channels")
        self.weight = weight
        self.bias = bias

    @classmethod
    def init(
        cls,
        c_in: int,
        c_out: int,
        ndim: int,
        rng: np.random.Generator,
        size: int = 3,
    ) -> "ConvKernel":
        """He-normal (fan-in) weights, zero bias"""
        shape = (c_out, c_in) + (size,) * ndim
        fan_in = c_in * size**ndim
        weight = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        dtype = default_dtype()
        return cls(
            Tensor(weight.astype(dtype), requires_grad=True),
            Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True),
        )

    @property
    def ndim(self) -> int:
        return self.weight.values.ndim - 2

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    def parameters(self) -> Dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


class BatchNormState:
    """Learned scale / shift plus running statistics for inference"""

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        if eps <= 0:
            raise ShapeError("batch norm epsilon must be positive")
        dtype = default_dtype()
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def parameters(self) -> Dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self) -> Dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}


def _window(offset: Tuple[int, ...], spatial: Tuple[int, ...]) -> Tuple[slice, ...]:
    return (slice(None), slice(None)) + tuple(slice(o, o + n) for o, n in zip(offset, spatial))


def conv(x: Tensor, k: ConvKernel) -> Tensor:
    """
    Stride-1 zero-padded convolution preserving the spatial shape

    Args:
        x: Input (N, C_in, [D,] H, W)
        k: Kernel with matching C_in and dimensionality

    Returns:
        Output (N, C_out, [D,] H, W)
    """
    w = k.weight.values
    if x.values.ndim != k.ndim + 2:
        raise ShapeError(f"{k.ndim}D convolution got input of shape {x.shape}")
    if x.shape[1] != k.c_in:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {k.c_in}")

    dtype = x.dtype
    pad = w.shape[2] // 2
    spatial = x.shape[2:]
    spatial_axes = tuple(range(2, 2 + k.ndim))
    xp = np.pad(x.values, [(0, 0), (0, 0)] + [(pad, pad)] * k.ndim)
    offsets = list(np.ndindex(*w.shape[2:]))

    # accumulate as (C_out, N, ...) and move the channel axis once at the end
    acc = np.zeros((k.c_out, x.shape[0]) + spatial, dtype=dtype)
    for off in offsets:
        acc += np.tensordot(w[(slice(None), slice(None)) + off], xp[_window(off, spatial)], axes=([1], [1]))
    out = np.moveaxis(acc, 0, 1) + k.bias.values.reshape((1, -1) + (1,) * k.ndim)

    def backward_fn(g: np.ndarray) -> None:
        k.bias.accumulate(g.sum(axis=(0,) + spatial_axes))
        grad_w = np.zeros_like(w) if k.weight.requires_grad else None
        grad_xp = np.zeros_like(xp) if x.requires_grad else None
        for off in offsets:
            win = _window(off, spatial)
            if grad_w is not None:
                grad_w[(slice(None), slice(None)) + off] = np.tensordot(
                    g, xp[win], axes=((0,) + spatial_axes, (0,) + spatial_axes)
                )
            if grad_xp is not None:
                grad_xp[win] += np.moveaxis(
                    np.tensordot(w[(slice(None), slice(None)) + off], g, axes=([0], [1])), 0, 1
                )
        if grad_w is not None:
            k.weight.accumulate(grad_w)
        if grad_xp is not None:
            crop = (slice(None), slice(None)) + tuple(slice(pad, pad + n) for n in spatial)
            x.accumulate(grad_xp[crop])

    return result(np.ascontiguousarray(out, dtype=dtype), (x, k.weight, k.bias), backward_fn)


def batchnorm(x: Tensor, s: BatchNormState, mode: Mode = "train") -> Tensor:
    """
    Per-channel batch normalization over the batch and spatial axes

    Train mode normalizes with batch statistics and updates the running statistics
    (running = momentum * running + (1 - momentum) * batch); eval mode uses the
    running statistics.
    """
    if x.values.ndim < 2 or x.shape[1] != s.channels:
        raise ShapeError(f"batch norm over {s.channels} channels got input of shape {x.shape}")

    dtype = x.dtype
    axes = (0,) + tuple(range(2, x.values.ndim))
    bshape = (1, -1) + (1,) * (x.values.ndim - 2)
    gamma = s.gamma.values.reshape(bshape)
    beta = s.beta.values.reshape(bshape)

    if mode == "train":
        count = x.values.size // s.channels
        mean = x.values.mean(axis=axes, keepdims=True)
        var = x.values.var(axis=axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + s.eps)
        xhat = (x.values - mean) * inv_std

        unbiased = var.ravel() * (count / (count - 1)) if count > 1 else var.ravel()
        s.running_mean[...] = s.momentum * s.running_mean + (1.0 - s.momentum) * mean.ravel()
        s.running_var[...] = s.momentum * s.running_var + (1.0 - s.momentum) * unbiased

        def backward_fn(g: np.ndarray) -> None:
            s.gamma.accumulate((g * xhat).sum(axis=axes))
            s.beta.accumulate(g.sum(axis=axes))
            if x.requires_grad:
                dxhat = g * gamma
                x.accumulate(
                    inv_std
                    * (
                        dxhat
                        - dxhat.mean(axis=axes, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
                    )
                )
    elif mode == "eval":
        inv_std = (1.0 / np.sqrt(s.running_var + s.eps)).reshape(bshape).astype(dtype)
        xhat = (x.values - s.running_mean.reshape(bshape)) * inv_std

        def backward_fn(g: np.ndarray) -> None:
            s.gamma.accumulate((g * xhat).sum(axis=axes))
            s.beta.accumulate(g.sum(axis=axes))
            x.accumulate(g * gamma * inv_std)
    else:
        raise ShapeError(f"unknown batch norm mode {mode!r}")

    out = (gamma * xhat + beta).astype(dtype)
    return result(out, (x, s.gamma, s.beta), backward_fn)


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is 0"""
    positive = x.values > 0

    def backward_fn(g: np.ndarray) -> None:
        x.accumulate(g * positive)

    return result(np.where(positive, x.values, 0).astype(x.dtype), (x,), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"cannot add tensors of shapes {a.shape} and {b.shape}")

    def backward_fn(g: np.ndarray) -> None:
        a.accumulate(g)
        b.accumulate(g)

    return result(a.values + b.values, (a, b), backward_fn)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Channel-axis softmax of (N, C, ...) logits, max-subtracted"""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def fiber_probability(logits: np.ndarray) -> np.ndarray:
    """Softmax probability of channel 1 (fiber), shape (N, ...)"""
    return softmax(logits)[:, 1]


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """
    Mean voxel-wise negative log-likelihood of a two-channel softmax

    Args:
        logits: (N, 2, ...) network output
        labels: (N, ...) array of 0 (background) / 1 (fiber)

    Returns:
        Scalar loss tensor
    """
    labels = np.asarray(labels)
    if logits.values.ndim < 2 or logits.shape[1] != 2:
        raise ShapeError(f"expected two-channel logits, got shape {logits.shape}")
    if labels.shape != logits.shape[:1] + logits.shape[2:]:
        raise ShapeError(f"label shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and not np.all((labels == 0) | (labels == 1)):
        raise ShapeError("labels must be 0 or 1")

    z = logits.values
    shifted = z - z.max(axis=1, keepdims=True)
    sum_exp = np.exp(shifted).sum(axis=1, keepdims=True)
    log_prob = shifted - np.log(sum_exp)
    index = labels.astype(np.int64)[:, None]
    count = labels.size
    loss = -np.take_along_axis(log_prob, index, axis=1).sum() / count

    def backward_fn(g: np.ndarray) -> None:
        grad = np.exp(log_prob)
        onehot = np.zeros_like(grad)
        np.put_along_axis(onehot, index, 1.0, axis=1)
        logits.accumulate((grad - onehot) * (g / count))

    return result(np.asarray(loss, dtype=z.dtype), (logits,), backward_fn)
