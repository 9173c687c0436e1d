"""
Network Training
Patch sampling, flip / 90-degree rotation augmentation, the Adam training loop and the
experiment presets
"""
import time
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.fiberseg.autodiff import AdamState, Tensor, adam_step, softmax_cross_entropy
from src.fiberseg.errors import (
    AugmentationError,
    DimensionMismatchError,
    PatchBoundsError,
    SpecParseError,
    TrainingDivergedError,
)
from src.fiberseg.model import Model, ModelConfig
from src.fiberseg.volgrid import LabelVolume, PatchRef, Volume, check_same_dims
from src.utils.config import settings

Shape3 = Tuple[int, int, int]

# patch shapes per resolution; 2D patches are single slices (dz = 1)
PATCH_SHAPES: Dict[Tuple[str, int], Shape3] = {
    ("mr", 2): (1, 64, 64),
    ("mr", 3): (32, 32, 32),
    ("lr", 2): (1, 32, 32),
    ("lr", 3): (16, 16, 16),
}

_ROTATION_PLANES_3D = ((0, 1), (0, 2), (1, 2))


class TrainConfig(BaseModel):
    iterations: int = Field(8000, ge=1)
    batch_size: int = Field(3, ge=1)
    lr: float = Field(1e-3, gt=0.0)
    patch_shape: Shape3 = (32, 32, 32)
    augment: bool = True
    fiber_biased_sampling_prob: float = Field(0.5, ge=0.0, le=1.0)
    seed: int = Field(default_factory=lambda: settings.DEFAULT_SEED)
    log_every: int = Field(100, ge=1)

    @field_validator("patch_shape")
    @classmethod
    def _positive(cls, value):
        if min(value) < 1:
            raise ValueError(f"patch_shape must be >= 1 per axis, got {value}")
        return value


class Preset(BaseModel):
    name: str
    resolution: str
    model: ModelConfig
    patch_shape: Shape3

    def train_config(self, **overrides) -> TrainConfig:
        return TrainConfig(**{"patch_shape": self.patch_shape, **overrides})


def _build_presets() -> Dict[str, Preset]:
    presets = {}
    for resolution in ("mr", "lr"):
        for ndim in (2, 3):
            for variant in ("shallow", "deep"):
                name = f"{resolution}{ndim}d-{variant}"
                presets[name] = Preset(
                    name=name,
                    resolution=resolution,
                    model=ModelConfig(dimensionality=ndim, variant=variant),
                    patch_shape=PATCH_SHAPES[(resolution, ndim)],
                )
    return presets


PRESETS = _build_presets()


def get_preset(name: str) -> Preset:
    if name not in PRESETS:
        raise SpecParseError(f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}")
    return PRESETS[name]


# ============================================================================
# Patch sampling
# ============================================================================


class PatchBatch(BaseModel):
    """Co-located gray / label patches, each (batch, pz, py, px)"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    gray: np.ndarray
    labels: np.ndarray
    refs: List[PatchRef]


class PatchSampler:
    """
    Draws training patches, centered on a random fiber voxel with probability p and
    uniformly placed otherwise
    """

    def __init__(self, gray: Volume, labels: LabelVolume, cfg: TrainConfig):
        check_same_dims(gray, labels, "training gray and label volumes")
        if any(p > n for p, n in zip(cfg.patch_shape, gray.dims)):
            raise PatchBoundsError(f"patch {cfg.patch_shape} is larger than the volume {gray.dims}")
        self.gray = gray
        self.labels = labels
        self.cfg = cfg
        self.fiber_index = np.flatnonzero(labels.data)
        self._max_origin = np.array(gray.dims) - np.array(cfg.patch_shape)
        if cfg.fiber_biased_sampling_prob > 0 and self.fiber_index.size == 0:
            logger.warning("Fiber-biased sampling requested on a volume without fiber voxels; sampling uniformly")

    def _origin(self, rng: np.random.Generator) -> Shape3:
        biased = rng.random() < self.cfg.fiber_biased_sampling_prob
        if biased and self.fiber_index.size:
            center = np.unravel_index(self.fiber_index[rng.integers(self.fiber_index.size)], self.gray.dims)
            origin = np.clip(np.array(center) - np.array(self.cfg.patch_shape) // 2, 0, self._max_origin)
        else:
            origin = rng.integers(0, self._max_origin + 1)
        return tuple(int(o) for o in origin)  # type: ignore[return-value]

    def sample(self, rng: np.random.Generator) -> PatchBatch:
        refs = [PatchRef(origin=self._origin(rng), shape=self.cfg.patch_shape) for _ in range(self.cfg.batch_size)]
        return PatchBatch(
            gray=np.stack([self.gray.data[r.slices] for r in refs]),
            labels=np.stack([self.labels.data[r.slices] for r in refs]),
            refs=refs,
        )


def sample_batch(gray: Volume, labels: LabelVolume, cfg: TrainConfig, rng: np.random.Generator) -> PatchBatch:
    """
    Draw cfg.batch_size co-located patch pairs

    Raises:
        PatchBoundsError: If the patch is larger than the volume
        DimensionMismatchError: If gray and labels differ in dims
    """
    return PatchSampler(gray, labels, cfg).sample(rng)


# ============================================================================
# Augmentation
# ============================================================================


class Transform(BaseModel):
    """Axis flips followed by k quarter turns in one coordinate plane of a (pz, py, px) patch"""

    model_config = ConfigDict(frozen=True)

    flips: Tuple[bool, bool, bool] = (False, False, False)
    k: int = Field(0, ge=0, le=3)
    plane: Tuple[int, int] = (1, 2)

    @model_validator(mode="after")
    def _valid_plane(self) -> "Transform":
        if self.plane not in _ROTATION_PLANES_3D:
            raise ValueError(f"rotation plane must be one of {_ROTATION_PLANES_3D}, got {self.plane}")
        return self

    @property
    def is_identity(self) -> bool:
        return not any(self.flips) and self.k == 0

    def _flip(self, arr: np.ndarray) -> np.ndarray:
        axes = tuple(i for i, f in enumerate(self.flips) if f)
        return np.flip(arr, axis=axes) if axes else arr

    def apply(self, arr: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(np.rot90(self._flip(arr), self.k, axes=self.plane))

    def invert(self, arr: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(self._flip(np.rot90(arr, -self.k, axes=self.plane)))


def sample_transform(rng: np.random.Generator, dimensionality: int) -> Transform:
    """Flip each in-patch axis with probability 1/2, then rotate by a uniform multiple of 90 degrees"""
    if dimensionality == 2:
        fy, fx = rng.random(2) < 0.5
        return Transform(flips=(False, bool(fy), bool(fx)), k=int(rng.integers(4)), plane=(1, 2))
    flips = rng.random(3) < 0.5
    k = int(rng.integers(4))
    plane = _ROTATION_PLANES_3D[int(rng.integers(3))]
    return Transform(flips=tuple(bool(f) for f in flips), k=k, plane=plane)


def augment(
    patch: np.ndarray,
    label_patch: np.ndarray,
    rng: np.random.Generator,
    dimensionality: Optional[int] = None,
) -> Tuple[np.ndarray, np.ndarray, Transform]:
    """
    Apply one random flip / rotation to a gray patch and its labels

    Args:
        patch: (pz, py, px) gray patch
        label_patch: Labels of the same shape
        rng: Random source
        dimensionality: 2 for slice patches, 3 for cubes; inferred from pz when omitted

    Returns:
        (transformed patch, transformed labels, the transform used)

    Raises:
        AugmentationError: If the rotated axes differ in length
    """
    if patch.shape != label_patch.shape or patch.ndim != 3:
        raise AugmentationError(f"gray {patch.shape} and label {label_patch.shape} patches must match and be 3D")
    ndim = dimensionality or (2 if patch.shape[0] == 1 else 3)
    rotated = patch.shape[1:] if ndim == 2 else patch.shape
    if len(set(rotated)) != 1:
        raise AugmentationError(f"rotation needs a square / cubic patch, got {patch.shape}")
    t = sample_transform(rng, ndim)
    return t.apply(patch), t.apply(label_patch), t


# ============================================================================
# Training loop
# ============================================================================


class TrainRecordEntry(BaseModel):
    iteration: int = Field(..., ge=1)
    loss: float
    secs: float = Field(..., ge=0.0)

    def to_line(self) -> str:
        return f"iter={self.iteration} loss={self.loss:.6f} secs={self.secs:.3f}"


class TrainRecord(BaseModel):
    entries: List[TrainRecordEntry] = Field(default_factory=list)
    losses: List[float] = Field(default_factory=list, description="Loss of every iteration")
    optimizer_steps: int = 0
    checkpoint_path: Optional[str] = None

    @field_validator("entries")
    @classmethod
    def _monotone(cls, value):
        its = [e.iteration for e in value]
        if any(b <= a for a, b in zip(its, its[1:])):
            raise ValueError("record iterations must increase")
        return value

    def to_lines(self) -> List[str]:
        return [e.to_line() for e in self.entries]

    def append_to(self, path: Union[str, Path]) -> None:
        with open(path, "a", encoding="utf-8") as f:
            for line in self.to_lines():
                f.write(line + "\n")


def _as_network_input(arr: np.ndarray, dimensionality: int) -> np.ndarray:
    """(B, pz, py, px) -> (B, 1, H, W) for 2D or (B, 1, D, H, W) for 3D"""
    if dimensionality == 2:
        return arr[:, 0][:, None]
    return arr[:, None]


def _warn_if_unnormalized(gray: Volume) -> None:
    data = gray.data.astype(np.float64)
    mean, std = data.mean(), data.std()
    if abs(mean) > 0.1 or abs(std - 1.0) > 0.1:
        logger.warning(f"Training volume looks un-normalized (mean {mean:.3f}, std {std:.3f})")


def train_loop(
    gray: Volume,
    labels: LabelVolume,
    model: Model,
    tcfg: TrainConfig,
) -> Tuple[Model, TrainRecord]:
    """
    Run tcfg.iterations steps of sample -> augment -> forward -> loss -> backward -> Adam

    Iteration i draws all of its randomness from default_rng([seed, i]), so a run is
    reproducible from its seed and config alone.

    Args:
        gray: Normalized training volume
        labels: Ground truth of the same dims
        model: Network, updated in place
        tcfg: Training protocol

    Returns:
        (model, record of the logged iterations)

    Raises:
        DimensionMismatchError: If a 2D model gets a patch with dz != 1
        TrainingDivergedError: If the loss becomes non-finite
    """
    ndim = model.dimensionality
    if ndim == 2 and tcfg.patch_shape[0] != 1:
        raise DimensionMismatchError(f"2D models train on single-slice patches, got {tcfg.patch_shape}")
    _warn_if_unnormalized(gray)

    sampler = PatchSampler(gray, labels, tcfg)
    state = AdamState(lr=tcfg.lr)
    params = model.parameters()
    record = TrainRecord()
    start = time.perf_counter()

    logger.info(
        f"Training {model.config.variant} {ndim}D model for {tcfg.iterations} iterations "
        f"(batch {tcfg.batch_size}, patch {tcfg.patch_shape}, seed {tcfg.seed})"
    )
    for i in range(1, tcfg.iterations + 1):
        rng = np.random.default_rng([tcfg.seed, i])
        batch = sampler.sample(rng)
        x, y = batch.gray, batch.labels
        if tcfg.augment:
            pairs = [augment(g, l, rng, ndim)[:2] for g, l in zip(x, y)]
            x = np.stack([p[0] for p in pairs])
            y = np.stack([p[1] for p in pairs])

        model.zero_grad()
        logits = model.forward(Tensor(_as_network_input(x, ndim)), "train")
        loss = softmax_cross_entropy(logits, _as_network_input(y, ndim)[:, 0])
        loss_value = float(loss.values)
        if not np.isfinite(loss_value):
            logger.error(f"Loss diverged at iteration {i}")
            raise TrainingDivergedError(iteration=i, lr=tcfg.lr, loss=loss_value)
        loss.backward()
        adam_step(params, state)
        record.losses.append(loss_value)

        if i == 1 or i % tcfg.log_every == 0 or i == tcfg.iterations:
            entry = TrainRecordEntry(iteration=i, loss=loss_value, secs=time.perf_counter() - start)
            record.entries.append(entry)
            logger.info(f"iter {i}/{tcfg.iterations} loss {loss_value:.4f} ({entry.secs:.1f}s)")

    model.iteration += tcfg.iterations
    record.optimizer_steps = state.t
    logger.info(f"Training finished in {time.perf_counter() - start:.1f}s")
    return model, record
