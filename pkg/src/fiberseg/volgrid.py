"""
Volume Grid
Dense voxel volumes, VXG1 file I/O, normalization, slicing and patch extraction
"""
import re
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.fiberseg.errors import (
    DegenerateVolumeError,
    DimensionMismatchError,
    PatchBoundsError,
    VolumeFormatError,
)

Dims = Tuple[int, int, int]

_HEADER_RE = re.compile(
    r"^VXG1 dtype=(?P<dtype>\S+) dims=(?P<nz>\d+),(?P<ny>\d+),(?P<nx>\d+) "
    r"pitch_um=(?P<pitch>\S+)$"
)
_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


class _Grid(BaseModel):
    """Common part of gray and label volumes: a (nz, ny, nx) array plus isotropic pitch"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    data: np.ndarray
    voxel_size_um: float = Field(..., gt=0.0, description="Isotropic voxel pitch in µm")

    @property
    def dims(self) -> Dims:
        return tuple(int(n) for n in self.data.shape)  # type: ignore[return-value]

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def extent_um(self) -> Tuple[float, float, float]:
        """Physical size along (z, y, x)"""
        return tuple(n * self.voxel_size_um for n in self.dims)  # type: ignore[return-value]

    def _check_shape(self) -> None:
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise VolumeFormatError(f"volume data must be 3D with every dim >= 1, got {self.data.shape}")

    def _freeze(self) -> None:
        self.data.flags.writeable = False


class Volume(_Grid):
    """Gray-value volume, one float32 per voxel, z-major / x-fastest"""

    @field_validator("data", mode="before")
    @classmethod
    def _as_float32(cls, value):
        return np.array(value, dtype=np.float32, order="C", copy=True)

    @model_validator(mode="after")
    def _validate(self) -> "Volume":
        self._check_shape()
        self._freeze()
        return self


class LabelVolume(_Grid):
    """Binary label volume: 0 = polymer / background, 1 = fiber"""

    @field_validator("data", mode="before")
    @classmethod
    def _as_uint8(cls, value):
        arr = np.asarray(value)
        if arr.dtype == np.bool_:
            arr = arr.astype(np.uint8)
        if arr.size and (arr.min() < 0 or arr.max() > 1 or not np.all((arr == 0) | (arr == 1))):
            raise VolumeFormatError("label volume contains values outside {0, 1}")
        return np.array(arr, dtype=np.uint8, order="C", copy=True)

    @model_validator(mode="after")
    def _validate(self) -> "LabelVolume":
        self._check_shape()
        self._freeze()
        return self

    @property
    def fiber_fraction(self) -> float:
        return float(self.data.mean(dtype=np.float64))


AnyVolume = Union[Volume, LabelVolume]


class PatchRef(BaseModel):
    """Index box inside a volume; 2D patches use dz = 1"""

    model_config = ConfigDict(frozen=True)

    origin: Tuple[int, int, int]
    shape: Tuple[int, int, int]

    @field_validator("origin")
    @classmethod
    def _non_negative(cls, value):
        if min(value) < 0:
            raise PatchBoundsError(f"patch origin must be non-negative, got {value}")
        return value

    @field_validator("shape")
    @classmethod
    def _positive(cls, value):
        if min(value) < 1:
            raise PatchBoundsError(f"patch shape must be >= 1 per axis, got {value}")
        return value

    def fits(self, dims: Dims) -> bool:
        return all(o + s <= n for o, s, n in zip(self.origin, self.shape, dims))

    @property
    def slices(self) -> Tuple[slice, slice, slice]:
        return tuple(slice(o, o + s) for o, s in zip(self.origin, self.shape))  # type: ignore[return-value]


def _rebuild(v: AnyVolume, data: np.ndarray) -> AnyVolume:
    return type(v)(data=data, voxel_size_um=v.voxel_size_um)


def check_same_dims(a: AnyVolume, b: AnyVolume, what: str = "volumes") -> None:
    if a.dims != b.dims:
        raise DimensionMismatchError(f"{what} differ in dims: {a.dims} vs {b.dims}")


def load_volume(path: Union[str, Path]) -> AnyVolume:
    """
    Read a VXG1 volume file

    Args:
        path: File written by save_volume

    Returns:
        Volume for dtype f32, LabelVolume for dtype u8

    Raises:
        FileNotFoundError: If the file does not exist
        VolumeFormatError: On a malformed header, size mismatch or bad label values
    """
    path = Path(path)
    raw = path.read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise VolumeFormatError(f"{path}: missing VXG1 header line")

    try:
        header = raw[:newline].decode("utf-8")
    except UnicodeDecodeError as e:
        raise VolumeFormatError(f"{path}: header is not UTF-8") from e

    match = _HEADER_RE.match(header)
    if not match:
        raise VolumeFormatError(f"{path}: unparseable header {header!r}")

    tag = match.group("dtype")
    if tag not in _DTYPES:
        raise VolumeFormatError(f"{path}: unknown dtype tag {tag!r}")
    dtype = _DTYPES[tag]

    dims = (int(match.group("nz")), int(match.group("ny")), int(match.group("nx")))
    try:
        pitch = float(match.group("pitch"))
    except ValueError as e:
        raise VolumeFormatError(f"{path}: bad pitch {match.group('pitch')!r}") from e

    payload = raw[newline + 1:]
    expected = dims[0] * dims[1] * dims[2] * dtype.itemsize
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{path}: payload is {len(payload)} bytes, header declares {expected}"
        )

    data = np.frombuffer(payload, dtype=dtype).reshape(dims)
    logger.debug(f"Loaded {path.name}: dtype={tag} dims={dims} pitch={pitch}")

    if tag == "u8":
        return LabelVolume(data=data, voxel_size_um=pitch)
    return Volume(data=data, voxel_size_um=pitch)


def save_volume(v: AnyVolume, path: Union[str, Path]) -> None:
    """
    Write a volume as VXG1: one header line, then the raw little-endian payload

    Args:
        v: Gray (f32) or label (u8) volume
        path: Destination file
    """
    path = Path(path)
    tag = "u8" if isinstance(v, LabelVolume) else "f32"
    nz, ny, nx = v.dims
    header = f"VXG1 dtype={tag} dims={nz},{ny},{nx} pitch_um={v.voxel_size_um!r}\n"
    payload = np.ascontiguousarray(v.data, dtype=_DTYPES[tag]).tobytes()

    try:
        with open(path, "wb") as f:
            f.write(header.encode("utf-8"))
            f.write(payload)
    except OSError as e:
        logger.error(f"Failed to write volume {path}: {e}")
        raise


def normalize(v: Volume) -> Volume:
    """
    Shift and scale a volume to zero mean and unit (population) standard deviation

    Raises:
        DegenerateVolumeError: For volumes with fewer than 2 voxels or zero variance
    """
    if v.size < 2:
        raise DegenerateVolumeError("normalize needs at least 2 voxels")

    data = v.data.astype(np.float64)
    mean = data.mean()
    std = data.std()
    if not np.isfinite(std) or std == 0.0:
        raise DegenerateVolumeError("cannot normalize a constant volume")

    return Volume(data=(data - mean) / std, voxel_size_um=v.voxel_size_um)


def extract_patch(v: AnyVolume, p: PatchRef) -> AnyVolume:
    """Copy the index box described by p; the result keeps the pitch and volume kind"""
    if not p.fits(v.dims):
        raise PatchBoundsError(f"patch {p.origin}+{p.shape} exceeds volume dims {v.dims}")
    return _rebuild(v, v.data[p.slices])


def slice2d(v: AnyVolume, z: int) -> AnyVolume:
    """The (1, ny, nx) sub-volume at constant z"""
    if not 0 <= z < v.dims[0]:
        raise PatchBoundsError(f"slice index {z} out of range [0, {v.dims[0]})")
    return _rebuild(v, v.data[z:z + 1])


def stack_slices(slices: List[AnyVolume]) -> AnyVolume:
    """Reassemble (1, ny, nx) slices along z"""
    if not slices:
        raise PatchBoundsError("cannot stack an empty slice list")
    first = slices[0]
    for s in slices[1:]:
        if s.dims[1:] != first.dims[1:] or type(s) is not type(first):
            raise DimensionMismatchError("slices differ in in-plane dims or kind")
    return _rebuild(first, np.concatenate([s.data for s in slices], axis=0))


def binarize(v: Volume, threshold: float) -> LabelVolume:
    """Label voxels with gray >= threshold as fiber"""
    return LabelVolume(
        data=v.data.astype(np.float64) >= float(threshold),
        voxel_size_um=v.voxel_size_um,
    )
