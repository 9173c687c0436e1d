"""
Whole-Volume Prediction
Slice-by-slice prediction for 2D models and overlapping-tile mean blending for 3D models
"""
import time
from typing import List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from src.fiberseg.autodiff import fiber_probability
from src.fiberseg.errors import DimensionMismatchError, PatchBoundsError
from src.fiberseg.model import Model
from src.fiberseg.volgrid import LabelVolume, Volume, binarize, normalize

DEFAULT_PATCH_3D = 32
SEG_THRESHOLD = 0.5

Prediction = Tuple[Volume, LabelVolume]


def _require_dimensionality(model: Model, ndim: int) -> None:
    if model.dimensionality != ndim:
        raise DimensionMismatchError(f"expected a {ndim}D model, got a {model.dimensionality}D one")


def _finish(prob: np.ndarray, v: Volume) -> Prediction:
    prob_volume = Volume(data=prob, voxel_size_um=v.voxel_size_um)
    return prob_volume, binarize(prob_volume, SEG_THRESHOLD)


def predict_2d(model: Model, v: Volume, order: Optional[Sequence[int]] = None) -> Prediction:
    """
    Predict every z-slice independently with an eval-mode forward pass

    Args:
        model: 2D network
        v: Normalized volume
        order: Slice processing order (defaults to 0 .. nz - 1)

    Returns:
        (fiber probability, segmentation = probability >= 0.5)
    """
    _require_dimensionality(model, 2)
    start = time.perf_counter()
    prob = np.zeros(v.dims, dtype=np.float32)
    for z in range(v.dims[0]) if order is None else order:
        logits = model.forward(v.data[z][None, None], "eval")
        prob[z] = fiber_probability(logits.values)[0]
    logger.info(f"Predicted {v.dims[0]} slices in {time.perf_counter() - start:.2f}s")
    return _finish(prob, v)


def tile_origins(n: int, patch: int, stride: int) -> List[int]:
    """
    Tile starts 0, stride, 2 * stride, ... plus a final start clamped to n - patch

    Raises:
        PatchBoundsError: If patch > n, stride < 1 or stride > patch
    """
    if patch > n:
        raise PatchBoundsError(f"patch extent {patch} exceeds volume extent {n}")
    if stride < 1 or stride > patch:
        raise PatchBoundsError(f"stride must be in [1, {patch}], got {stride}")
    origins = list(range(0, n - patch + 1, stride))
    if origins[-1] != n - patch:
        origins.append(n - patch)
    return origins


def _tiles(dims: Sequence[int], patch: Sequence[int], stride: Sequence[int]) -> List[Tuple[slice, slice, slice]]:
    per_axis = [tile_origins(n, p, s) for n, p, s in zip(dims, patch, stride)]
    return [
        (slice(z, z + patch[0]), slice(y, y + patch[1]), slice(x, x + patch[2]))
        for z in per_axis[0]
        for y in per_axis[1]
        for x in per_axis[2]
    ]


def coverage_counts(dims: Sequence[int], patch: Sequence[int], stride: Sequence[int]) -> np.ndarray:
    """Number of tiles covering each voxel"""
    counts = np.zeros(tuple(dims), dtype=np.int64)
    for tile in _tiles(dims, patch, stride):
        counts[tile] += 1
    return counts


def _default_stride(patch: Sequence[int]) -> Tuple[int, int, int]:
    return tuple(max(1, p // 2) for p in patch)  # type: ignore[return-value]


def predict_3d(
    model: Model,
    v: Volume,
    patch_shape: Sequence[int],
    stride: Optional[Sequence[int]] = None,
) -> Prediction:
    """
    Predict overlapping 3D tiles and average their fiber probabilities

    Args:
        model: 3D network
        v: Normalized volume
        patch_shape: Tile shape (pz, py, px)
        stride: Tile step per axis (defaults to half the tile)

    Returns:
        (mean fiber probability over covering tiles, segmentation = probability >= 0.5)
    """
    _require_dimensionality(model, 3)
    patch = tuple(int(p) for p in patch_shape)
    step = _default_stride(patch) if stride is None else tuple(int(s) for s in stride)

    start = time.perf_counter()
    tiles = _tiles(v.dims, patch, step)
    total = np.zeros(v.dims, dtype=np.float64)
    counts = np.zeros(v.dims, dtype=np.int64)
    for tile in tiles:
        logits = model.forward(v.data[tile][None, None], "eval")
        total[tile] += fiber_probability(logits.values)[0]
        counts[tile] += 1
    logger.info(f"Predicted {len(tiles)} tiles of {patch} in {time.perf_counter() - start:.2f}s")
    return _finish((total / counts).astype(np.float32), v)


def normalize_then_predict(
    model: Model,
    raw: Volume,
    patch_shape: Optional[Sequence[int]] = None,
    stride: Optional[Sequence[int]] = None,
) -> Prediction:
    """
    Self-normalize a raw volume and run the predictor matching the model

    3D models tile with patch_shape, by default DEFAULT_PATCH_3D per axis clipped to
    the volume.

    Raises:
        DegenerateVolumeError: If raw is constant
    """
    v = normalize(raw)
    if model.dimensionality == 2:
        return predict_2d(model, v)
    if patch_shape is None:
        patch_shape = tuple(min(DEFAULT_PATCH_3D, n) for n in v.dims)
    return predict_3d(model, v, patch_shape, stride)
