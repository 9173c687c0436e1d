"""
Histogram Thresholding
Otsu's between-class-variance threshold and the ground-truth best-Dice threshold
"""
from typing import Tuple

import numpy as np
from loguru import logger

from src.fiberseg.errors import DegenerateVolumeError
from src.fiberseg.volgrid import LabelVolume, Volume, check_same_dims

DEFAULT_BINS = 256


def histogram(v: Volume, bins: int = DEFAULT_BINS) -> Tuple[np.ndarray, np.ndarray]:
    """
    Equal-width histogram over the observed [min, max]

    Returns:
        (counts, edges) with bins counts and bins + 1 edges; bin k holds
        edges[k] <= value < edges[k + 1] (the last bin is closed)

    Raises:
        DegenerateVolumeError: If the volume is constant
    """
    data = v.data.astype(np.float64)
    lo, hi = float(data.min()), float(data.max())
    if not lo < hi:
        raise DegenerateVolumeError("cannot threshold a constant volume")
    counts, edges = np.histogram(data, bins=bins, range=(lo, hi))
    return counts.astype(np.int64), edges


def between_class_variance(counts: np.ndarray) -> np.ndarray:
    """
    Otsu criterion w0 * w1 * (mu0 - mu1)**2 for every cut k = 1 .. bins - 1

    Class means are measured in bin-index units (an affine image of the bin centers, so
    the maximizing cut is unchanged) which keeps all class moments exact integers.
    Entry k - 1 belongs to the cut between bin k - 1 and bin k; cuts leaving a class
    empty score 0.
    """
    counts = np.asarray(counts, dtype=np.int64)
    n = int(counts.sum())
    index = np.arange(counts.size, dtype=np.int64)
    c0 = np.cumsum(counts)[:-1]
    s0 = np.cumsum(counts * index)[:-1]
    c1 = n - c0
    s1 = int((counts * index).sum()) - s0

    scores = np.zeros(c0.size, dtype=np.float64)
    valid = (c0 > 0) & (c1 > 0)
    w0 = c0[valid] / n
    w1 = c1[valid] / n
    mu0 = s0[valid] / c0[valid]
    mu1 = s1[valid] / c1[valid]
    scores[valid] = w0 * w1 * (mu0 - mu1) ** 2
    return scores


def otsu_threshold(v: Volume, bins: int = DEFAULT_BINS) -> float:
    """
    Otsu threshold: the bin edge maximizing between-class variance

    Ties resolve to the lowest threshold. Voxels >= the threshold are fiber.
    """
    counts, edges = histogram(v, bins)
    scores = between_class_variance(counts)
    k = int(np.argmax(scores)) + 1
    logger.debug(f"Otsu cut at bin {k} of {bins} (threshold {edges[k]:.6g})")
    return float(edges[k])


def dice_per_threshold(v: Volume, gt: LabelVolume, bins: int = DEFAULT_BINS) -> Tuple[np.ndarray, np.ndarray]:
    """
    Dice of (v >= edge) against gt for the lower edges of all histogram bins

    Returns:
        (thresholds, dice) arrays of length bins
    """
    check_same_dims(v, gt, "gray and label volumes")
    counts, edges = histogram(v, bins)
    lo, hi = edges[0], edges[-1]
    fiber_values = v.data.astype(np.float64)[gt.data == 1]
    positives, _ = np.histogram(fiber_values, bins=bins, range=(lo, hi))

    predicted = np.cumsum(counts[::-1])[::-1]
    tp = np.cumsum(positives[::-1])[::-1].astype(np.int64)
    fp = predicted - tp
    fn = int(positives.sum()) - tp

    denom = 2 * tp + fp + fn
    dice = np.where(denom > 0, 2.0 * tp / np.maximum(denom, 1), 1.0)
    return edges[:-1], dice


def best_dice_threshold(v: Volume, gt: LabelVolume, bins: int = DEFAULT_BINS) -> Tuple[float, float]:
    """
    Ground-truth oracle: the histogram edge whose binarization maximizes Dice

    The sweep contains every Otsu candidate, so its Dice bounds any threshold method from
    above. Ties resolve to the lowest threshold; if gt is empty every candidate scores 0.

    Returns:
        (threshold, dice)
    """
    thresholds, dice = dice_per_threshold(v, gt, bins)
    k = int(np.argmax(dice))
    logger.debug(f"Best threshold {thresholds[k]:.6g} with Dice {dice[k]:.4f}")
    return float(thresholds[k]), float(dice[k])
