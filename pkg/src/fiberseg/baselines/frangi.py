"""
Frangi Vesselness
Multiscale Hessian-eigenvalue tubularity measure and its threshold-transfer segmentation
"""
from typing import List, Literal, Tuple, Union

import numpy as np
from loguru import logger
from pydantic import BaseModel, Field, field_validator

from src.fiberseg.baselines.threshold import best_dice_threshold
from src.fiberseg.errors import SpecParseError
from src.fiberseg.filters import eig3_symmetric, hessian_at_scale
from src.fiberseg.volgrid import LabelVolume, Volume, binarize

# scales bracket the fiber radius: ~1.67 voxels at 3.9 µm, ~0.78 voxels at 8.3 µm
RESOLUTION_SCALES = {
    "mr": [1.0, 1.5, 2.0],
    "lr": [0.6, 0.8, 1.0],
}


class FrangiParams(BaseModel):
    """Frangi constants: alpha (plate), beta (blob), c (structureness or 'auto')"""

    scales_vox: List[float] = Field(default_factory=lambda: list(RESOLUTION_SCALES["mr"]))
    alpha: float = Field(0.5, gt=0.0)
    beta: float = Field(0.5, gt=0.0)
    c: Union[float, Literal["auto"]] = "auto"
    polarity: Literal["bright", "dark"] = "bright"

    @field_validator("scales_vox")
    @classmethod
    def _positive_scales(cls, value):
        if not value or any(s <= 0 for s in value):
            raise ValueError("scales must be a non-empty list of positive sigmas")
        return value

    @field_validator("c")
    @classmethod
    def _positive_c(cls, value):
        if value != "auto" and value <= 0:
            raise ValueError("c must be positive or 'auto'")
        return value

    @classmethod
    def for_resolution(cls, resolution: str, **overrides) -> "FrangiParams":
        if resolution not in RESOLUTION_SCALES:
            raise SpecParseError(f"unknown resolution {resolution!r}, expected 'mr' or 'lr'")
        return cls(scales_vox=list(RESOLUTION_SCALES[resolution]), **overrides)


def _vesselness_at_scale(v: Volume, sigma: float, params: FrangiParams) -> np.ndarray:
    l1, l2, l3 = eig3_symmetric(hessian_at_scale(v, sigma))
    a1, a2, a3 = np.abs(l1), np.abs(l2), np.abs(l3)

    with np.errstate(divide="ignore", invalid="ignore"):
        ra = np.where(a3 > 0, a2 / a3, 0.0)
        rb = np.where(a2 * a3 > 0, a1 / np.sqrt(a2 * a3), 0.0)
    s = np.sqrt(l1**2 + l2**2 + l3**2)

    c = 0.5 * float(s.max()) if params.c == "auto" else float(params.c)
    if c <= 0:
        return np.zeros(v.dims)

    out = (
        (1.0 - np.exp(-(ra**2) / (2.0 * params.alpha**2)))
        * np.exp(-(rb**2) / (2.0 * params.beta**2))
        * (1.0 - np.exp(-(s**2) / (2.0 * c**2)))
    )

    if params.polarity == "bright":
        suppressed = (l2 > 0) | (l3 > 0)
    else:
        suppressed = (l2 < 0) | (l3 < 0)
    out[suppressed | (a3 == 0) | (a2 == 0)] = 0.0
    return out


def frangi_vesselness(v: Volume, params: FrangiParams) -> Volume:
    """
    Maximum over scales of the Frangi vesselness of the scale-normalized Hessian

    Args:
        v: Gray volume
        params: Scales and constants

    Returns:
        Vesselness volume with values in [0, 1]
    """
    response = np.zeros(v.dims)
    for sigma in params.scales_vox:
        np.maximum(response, _vesselness_at_scale(v, sigma, params), out=response)
        logger.debug(f"Vesselness scale {sigma:g}: max {response.max():.4f}")
    return Volume(data=np.clip(response, 0.0, 1.0), voxel_size_um=v.voxel_size_um)


def frangi_segment(
    train_gray: Volume,
    train_label: LabelVolume,
    eval_gray: Volume,
    params: FrangiParams,
) -> Tuple[LabelVolume, float]:
    """
    Binarize the evaluation vesselness with the best-Dice threshold of the training volume

    Returns:
        (segmentation of eval_gray, threshold fitted on the training vesselness)
    """
    threshold, train_dice = best_dice_threshold(frangi_vesselness(train_gray, params), train_label)
    logger.info(f"Frangi threshold {threshold:.4g} (training Dice {train_dice:.4f})")
    return binarize(frangi_vesselness(eval_gray, params), threshold), threshold
