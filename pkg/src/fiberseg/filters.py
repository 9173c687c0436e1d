"""
Gaussian Filter Bank
Separable Gaussian (derivative) filtering, Hessian and structure tensor fields,
closed-form symmetric 3x3 eigenvalues and the random-forest feature stack
"""
import math
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, model_validator
from scipy import ndimage

from src.fiberseg.errors import FilterError
from src.fiberseg.volgrid import Volume, save_volume

DEFAULT_FEATURE_SCALES: Tuple[float, ...] = (0.7, 1.0, 1.6, 3.5)
FEATURE_KINDS: Tuple[str, ...] = (
    "smooth",
    "gradmag",
    "log",
    "hess_eig1",
    "hess_eig2",
    "hess_eig3",
    "st_eig1",
    "st_eig2",
    "st_eig3",
)

# entry order of a packed symmetric matrix, axes in (z, y, x) order
SYM_ENTRIES: Tuple[Tuple[int, int], ...] = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))

# boundary mode for every filter: reflect about the edge sample without repeating it
_BOUNDARY = "mirror"


class SymMat3(BaseModel):
    """
    Field of symmetric 3x3 matrices packed as six planes

    data has shape (6, ...) with entries (a00, a11, a22, a01, a02, a12); a single matrix
    is a field of shape (6,).
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    data: np.ndarray

    @model_validator(mode="after")
    def _six_entries(self) -> "SymMat3":
        if self.data.shape[:1] != (6,):
            raise FilterError(f"SymMat3 needs 6 packed entries, got shape {self.data.shape}")
        return self

    @classmethod
    def from_matrix(cls, m) -> "SymMat3":
        m = np.asarray(m, dtype=np.float64)
        return cls(data=np.array([m[i, j] for i, j in SYM_ENTRIES]))

    def entry(self, i: int, j: int) -> np.ndarray:
        if i > j:
            i, j = j, i
        return self.data[SYM_ENTRIES.index((i, j))]

    def to_matrix(self) -> np.ndarray:
        """Dense (..., 3, 3) view of the field"""
        out = np.empty(self.data.shape[1:] + (3, 3), dtype=self.data.dtype)
        for i in range(3):
            for j in range(3):
                out[..., i, j] = self.entry(i, j)
        return out

    def trace(self) -> np.ndarray:
        return self.data[0] + self.data[1] + self.data[2]


class FeatureStack(BaseModel):
    """Per-voxel feature channels computed from one volume"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    channels: List[str]
    data: np.ndarray  # (C, nz, ny, nx) float32
    voxel_size_um: float

    @model_validator(mode="after")
    def _consistent(self) -> "FeatureStack":
        if len(set(self.channels)) != len(self.channels):
            raise FilterError("feature channel names must be unique")
        if self.data.ndim != 4 or self.data.shape[0] != len(self.channels):
            raise FilterError(
                f"feature data shape {self.data.shape} does not match {len(self.channels)} channels"
            )
        return self

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape[1:])  # type: ignore[return-value]

    def channel(self, name: str) -> np.ndarray:
        return self.data[self.channels.index(name)]

    def matrix(self, start: int = 0, stop: Union[int, None] = None) -> np.ndarray:
        """Voxels as rows (x-fastest order), channels as columns, float64"""
        flat = self.data.reshape(len(self.channels), -1)
        return flat[:, start:stop].T.astype(np.float64)

    def dump(self, directory: Union[str, Path]) -> List[Path]:
        """Write one VXG1 file per channel (debugging aid)"""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for name, plane in zip(self.channels, self.data):
            path = directory / f"{name.replace('@', '_s')}.vxg"
            save_volume(Volume(data=plane, voxel_size_um=self.voxel_size_um), path)
            paths.append(path)
        logger.info(f"Dumped {len(paths)} feature channels to {directory}")
        return paths


def gaussian_kernel(sigma: float, order: int = 0) -> np.ndarray:
    """
    Sampled 1D Gaussian (derivative) kernel with radius ceil(3 sigma)

    Order 0 is normalized to unit sum. Order 1 and 2 kernels have exactly zero sum and are
    scaled so that filtering x reproduces 1 (order 1) and filtering x**2 reproduces 2
    (order 2) at every sample.
    """
    if sigma <= 0:
        raise FilterError(f"sigma must be positive, got {sigma}")
    if order not in (0, 1, 2):
        raise FilterError(f"unsupported derivative order {order}")

    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-0.5 * (x / sigma) ** 2)
    g /= g.sum()

    if order == 0:
        return g

    if order == 1:
        k = -x / sigma**2 * g
        k -= k.mean()
        # convolve1d flips the kernel: sum_j k[j] * f(i - x_j) on f = x gives -sum(x k)
        return k / -(x * k).sum()

    k = (x**2 - sigma**2) / sigma**4 * g
    k -= k.mean()
    return k * (2.0 / (x**2 * k).sum())


def _filter(arr: np.ndarray, sigma: float, orders: Sequence[int]) -> np.ndarray:
    out = np.asarray(arr, dtype=np.float64)
    for axis, order in enumerate(orders):
        out = ndimage.convolve1d(out, gaussian_kernel(sigma, order), axis=axis, mode=_BOUNDARY)
    return out


def _check_sigma(sigma: float) -> None:
    if not sigma > 0:
        raise FilterError(f"sigma must be positive, got {sigma}")


def gaussian_blur(v: Volume, sigma_vox: float) -> Volume:
    """Separable Gaussian smoothing with a normalized kernel truncated at 3 sigma"""
    _check_sigma(sigma_vox)
    return Volume(data=_filter(v.data, sigma_vox, (0, 0, 0)), voxel_size_um=v.voxel_size_um)


def gaussian_derivatives(v: Volume, sigma_vox: float, order: Sequence[int]) -> Volume:
    """
    Separable Gaussian derivative filter

    Args:
        v: Input volume
        sigma_vox: Gaussian scale in voxels
        order: Derivative order per (z, y, x) axis, each in {0, 1, 2}, summing to <= 2

    Returns:
        Filtered volume
    """
    _check_sigma(sigma_vox)
    order = tuple(int(o) for o in order)
    if len(order) != 3 or any(o not in (0, 1, 2) for o in order) or sum(order) > 2:
        raise FilterError(f"unsupported derivative order {order}")
    return Volume(data=_filter(v.data, sigma_vox, order), voxel_size_um=v.voxel_size_um)


def _gradients(arr: np.ndarray, sigma: float) -> List[np.ndarray]:
    return [_filter(arr, sigma, tuple(int(a == axis) for a in range(3))) for axis in range(3)]


def _hessian(arr: np.ndarray, sigma: float) -> np.ndarray:
    planes = []
    for i, j in SYM_ENTRIES:
        orders = [0, 0, 0]
        orders[i] += 1
        orders[j] += 1
        planes.append(_filter(arr, sigma, orders))
    return np.stack(planes) * sigma**2


def hessian_at_scale(v: Volume, sigma_vox: float) -> SymMat3:
    """Scale-normalized (gamma = 2) Hessian field: second Gaussian derivatives times sigma**2"""
    _check_sigma(sigma_vox)
    return SymMat3(data=_hessian(v.data, sigma_vox))


def _structure_tensor(arr: np.ndarray, sigma_grad: float, sigma_window: float) -> np.ndarray:
    grads = _gradients(arr, sigma_grad)
    return np.stack(
        [_filter(grads[i] * grads[j], sigma_window, (0, 0, 0)) for i, j in SYM_ENTRIES]
    )


def structure_tensor(v: Volume, sigma_grad: float, sigma_window: float) -> SymMat3:
    """Outer product of Gaussian gradients, smoothed componentwise at sigma_window"""
    _check_sigma(sigma_grad)
    _check_sigma(sigma_window)
    return SymMat3(data=_structure_tensor(v.data, sigma_grad, sigma_window))


def eig3_symmetric(m: SymMat3) -> np.ndarray:
    """
    Eigenvalues of a field of symmetric 3x3 matrices by the trigonometric closed form

    Args:
        m: Packed symmetric matrices, shape (6, ...)

    Returns:
        Array of shape (3, ...) holding (l1, l2, l3) with |l1| <= |l2| <= |l3|

    Raises:
        FilterError: If any entry is not finite
    """
    a = np.asarray(m.data, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise FilterError("eig3_symmetric received non-finite entries")

    a00, a11, a22, a01, a02, a12 = a
    q = (a00 + a11 + a22) / 3.0
    p1 = a01**2 + a02**2 + a12**2
    b00, b11, b22 = a00 - q, a11 - q, a22 - q
    p2 = b00**2 + b11**2 + b22**2 + 2.0 * p1
    p = np.sqrt(p2 / 6.0)

    with np.errstate(divide="ignore", invalid="ignore"):
        inv_p = np.where(p > 0, 1.0 / p, 0.0)
        c00, c11, c22 = b00 * inv_p, b11 * inv_p, b22 * inv_p
        c01, c02, c12 = a01 * inv_p, a02 * inv_p, a12 * inv_p
        half_det = 0.5 * (
            c00 * (c11 * c22 - c12 * c12)
            - c01 * (c01 * c22 - c12 * c02)
            + c02 * (c01 * c12 - c11 * c02)
        )
    phi = np.arccos(np.clip(half_det, -1.0, 1.0)) / 3.0

    e_max = q + 2.0 * p * np.cos(phi)
    e_min = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
    e_mid = 3.0 * q - e_max - e_min

    eig = np.stack([e_min, e_mid, e_max])
    order = np.argsort(np.abs(eig), axis=0, kind="stable")
    return np.take_along_axis(eig, order, axis=0)


def compute_feature_stack(v: Volume, scales: Sequence[float] = DEFAULT_FEATURE_SCALES) -> FeatureStack:
    """
    Random-forest feature channels, nine per scale

    Channel order per scale sigma: smooth, gradmag, log, hess_eig1..3, st_eig1..3, named
    ``<kind>@<sigma>``. LoG is the trace of the scale-normalized Hessian; eigenvalues are
    sorted by absolute value. The structure tensor window is 2 sigma.
    """
    scales = [float(s) for s in scales]
    if not scales:
        raise FilterError("feature stack needs at least one scale")
    for s in scales:
        _check_sigma(s)

    arr = v.data.astype(np.float64)
    channels: List[str] = []
    planes: List[np.ndarray] = []

    for sigma in scales:
        smooth = _filter(arr, sigma, (0, 0, 0))
        gz, gy, gx = _gradients(arr, sigma)
        gradmag = np.sqrt(gz**2 + gy**2 + gx**2)
        hess = SymMat3(data=_hessian(arr, sigma))
        hess_eig = eig3_symmetric(hess)
        st_eig = eig3_symmetric(SymMat3(data=_structure_tensor(arr, sigma, 2.0 * sigma)))

        planes.extend([smooth, gradmag, hess.trace(), *hess_eig, *st_eig])
        channels.extend(f"{kind}@{sigma:g}" for kind in FEATURE_KINDS)
        logger.debug(f"Feature scale {sigma:g} done")

    return FeatureStack(
        channels=channels,
        data=np.stack(planes).astype(np.float32),
        voxel_size_um=v.voxel_size_um,
    )
