"""
Synthetic Phantom Generator
Random straight-fiber scenes (capsules) rendered into gray / label volume pairs with
CT-like blur and noise
"""
import math
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from src.fiberseg.errors import ExtentMismatchError, PhantomGenerationError, SpecParseError
from src.fiberseg.filters import gaussian_blur
from src.fiberseg.volgrid import LabelVolume, Volume

GLASS_DENSITY = 2.55  # g/cm^3
PBT_DENSITY = 1.31  # g/cm^3
FRACTION_TOLERANCE = 0.005
RESOLUTION_PITCH_UM = {"mr": 3.9, "lr": 8.3}

_NOISE_STREAM = 1

Vec3 = Tuple[float, float, float]


def weight_to_volume_fraction(
    weight_fraction: float,
    rho_fiber: float = GLASS_DENSITY,
    rho_matrix: float = PBT_DENSITY,
) -> float:
    """Convert a fiber weight fraction into a volume fraction"""
    fiber = weight_fraction / rho_fiber
    matrix = (1.0 - weight_fraction) / rho_matrix
    return fiber / (fiber + matrix)


DEFAULT_VOLUME_FRACTION = round(weight_to_volume_fraction(0.10), 4)


class PhantomSpec(BaseModel):
    """Parameters of one synthetic scan"""

    model_config = ConfigDict(frozen=True)

    dims: Tuple[int, int, int] = (96, 96, 96)
    voxel_size_um: float = Field(3.9, gt=0.0)
    fiber_diameter_um: float = Field(13.0, gt=0.0)
    target_volume_fraction: float = Field(DEFAULT_VOLUME_FRACTION, gt=0.0, lt=0.5)
    orientation: Literal["uniform"] = "uniform"
    length_range_um: Tuple[float, float] = (150.0, 400.0)
    gray_matrix: float = 0.2
    gray_fiber: float = 0.8
    psf_sigma_um: float = Field(3.0, ge=0.0)
    noise_sigma: float = Field(0.05, ge=0.0)
    supersample: int = Field(3, ge=1)
    seed: int = Field(42, ge=0, lt=2**64)
    max_attempts: int = Field(200, ge=1, description="Placement attempts per fiber")

    @field_validator("dims")
    @classmethod
    def _positive_dims(cls, value):
        if min(value) < 1:
            raise ValueError(f"dims must be >= 1 per axis, got {value}")
        return value

    @field_validator("supersample")
    @classmethod
    def _odd(cls, value):
        if value % 2 == 0:
            raise ValueError("supersample must be odd")
        return value

    @model_validator(mode="after")
    def _consistent(self) -> "PhantomSpec":
        if self.gray_fiber <= self.gray_matrix:
            raise ValueError("gray_fiber must exceed gray_matrix")
        lo, hi = self.length_range_um
        if not lo <= hi:
            raise ValueError(f"invalid length range {self.length_range_um}")
        if lo <= self.fiber_diameter_um:
            raise ValueError("minimum fiber length must exceed the fiber diameter")
        return self

    @property
    def radius_um(self) -> float:
        return self.fiber_diameter_um / 2.0

    @property
    def extent_um(self) -> Vec3:
        return tuple(n * self.voxel_size_um for n in self.dims)  # type: ignore[return-value]

    @classmethod
    def for_resolution(cls, resolution: str, extent_um: float, **overrides) -> "PhantomSpec":
        """Spec at the MR (3.9 µm) or LR (8.3 µm) pitch covering a cubic extent"""
        if resolution not in RESOLUTION_PITCH_UM:
            raise SpecParseError(f"unknown resolution {resolution!r}, expected 'mr' or 'lr'")
        pitch = RESOLUTION_PITCH_UM[resolution]
        n = max(1, int(round(extent_um / pitch)))
        return cls(dims=(n, n, n), voxel_size_um=pitch, **overrides)

    @classmethod
    def from_text(cls, text: str) -> "PhantomSpec":
        """
        Parse the flat key=value spec format

        Blank lines and lines starting with '#' are ignored; tuple fields are comma separated.
        """
        values: Dict[str, object] = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise SpecParseError(f"line {lineno}: expected key=value, got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in cls.model_fields:
                raise SpecParseError(f"line {lineno}: unknown key {key!r}")
            values[key] = [v.strip() for v in value.split(",")] if "," in value else value

        try:
            return cls(**values)
        except ValidationError as e:
            raise SpecParseError(f"invalid phantom spec: {e.errors()[0]['msg']}") from e

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "PhantomSpec":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def to_text(self) -> str:
        lines = []
        for key, value in self.model_dump().items():
            if isinstance(value, (tuple, list)):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"


class FiberCapsule(BaseModel):
    """Straight fiber: segment p0-p1 (µm, z/y/x order) dilated by radius_um"""

    model_config = ConfigDict(frozen=True)

    p0: Vec3
    p1: Vec3
    radius_um: float = Field(..., gt=0.0)

    @model_validator(mode="after")
    def _non_degenerate(self) -> "FiberCapsule":
        if math.dist(self.p0, self.p1) <= 0.0:
            raise ValueError("capsule endpoints must differ")
        return self

    @property
    def length_um(self) -> float:
        return math.dist(self.p0, self.p1)

    @property
    def direction(self) -> np.ndarray:
        d = np.subtract(self.p1, self.p0)
        return d / np.linalg.norm(d)


def segment_distances(p0: np.ndarray, p1: np.ndarray, q0: np.ndarray, q1: np.ndarray) -> np.ndarray:
    """
    Closest distance between segment p0-p1 and each segment q0[i]-q1[i]

    Args:
        p0, p1: Endpoints of one segment, shape (3,)
        q0, q1: Endpoints of k segments, shape (k, 3)
    """
    d1 = p1 - p0
    d2 = q1 - q0
    r = p0 - q0
    a = float(d1 @ d1)
    e = np.einsum("ij,ij->i", d2, d2)
    f = np.einsum("ij,ij->i", d2, r)
    c = r @ d1
    b = d2 @ d1
    denom = a * e - b * b

    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(denom > 1e-12 * a * e, np.clip((b * f - c * e) / denom, 0.0, 1.0), 0.0)
        t = (b * s + f) / e
        s = np.where(t < 0.0, np.clip(-c / a, 0.0, 1.0), np.where(t > 1.0, np.clip((b - c) / a, 0.0, 1.0), s))
        t = np.clip(t, 0.0, 1.0)

    gap = (p0 + s[:, None] * d1) - (q0 + t[:, None] * d2)
    return np.sqrt(np.einsum("ij,ij->i", gap, gap))


def _clip_segment(p0: np.ndarray, p1: np.ndarray, extent: np.ndarray) -> float:
    """Length of segment p0-p1 inside the box [0, extent] (slab clipping)"""
    d = p1 - p0
    t_lo, t_hi = 0.0, 1.0
    for axis in range(3):
        if abs(d[axis]) < 1e-12:
            if not 0.0 <= p0[axis] <= extent[axis]:
                return 0.0
            continue
        ta = (0.0 - p0[axis]) / d[axis]
        tb = (extent[axis] - p0[axis]) / d[axis]
        t_lo = max(t_lo, min(ta, tb))
        t_hi = min(t_hi, max(ta, tb))
    return max(0.0, t_hi - t_lo) * float(np.linalg.norm(d))


def capsule_volume_in_box(capsule: FiberCapsule, extent_um: Vec3) -> float:
    """Analytic approximation of the capsule volume inside the box [0, extent]"""
    extent = np.asarray(extent_um, dtype=np.float64)
    p0 = np.asarray(capsule.p0, dtype=np.float64)
    p1 = np.asarray(capsule.p1, dtype=np.float64)
    r = capsule.radius_um

    volume = math.pi * r * r * _clip_segment(p0, p1, extent)
    for p in (p0, p1):
        if np.all(p >= 0.0) and np.all(p <= extent):
            volume += 2.0 / 3.0 * math.pi * r**3
    return volume


class FiberScene(BaseModel):
    """Non-interpenetrating capsules inside the box [0, extent_um]"""

    model_config = ConfigDict(frozen=True)

    capsules: List[FiberCapsule] = Field(default_factory=list)
    extent_um: Vec3

    @model_validator(mode="after")
    def _non_interpenetrating(self) -> "FiberScene":
        if len(self.capsules) > 1:
            p0, p1, radii = self.arrays()
            for i in range(1, len(self.capsules)):
                gaps = segment_distances(p0[i], p1[i], p0[:i], p1[:i])
                if np.any(gaps < radii[i] + radii[:i] - 1e-9):
                    raise ValueError(f"capsule {i} interpenetrates an earlier capsule")
        return self

    def arrays(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        p0 = np.array([c.p0 for c in self.capsules], dtype=np.float64).reshape(-1, 3)
        p1 = np.array([c.p1 for c in self.capsules], dtype=np.float64).reshape(-1, 3)
        radii = np.array([c.radius_um for c in self.capsules], dtype=np.float64)
        return p0, p1, radii

    @property
    def volume_fraction(self) -> float:
        box = float(np.prod(self.extent_um))
        return sum(capsule_volume_in_box(c, self.extent_um) for c in self.capsules) / box


def random_direction(rng: np.random.Generator) -> np.ndarray:
    """Unit vector uniform on the sphere (normalized isotropic Gaussian draw)"""
    direction = rng.standard_normal(3)
    return direction / np.linalg.norm(direction)


def sample_scene(spec: PhantomSpec) -> FiberScene:
    """
    Place uniformly oriented capsules by rejection sampling until the target fraction is met

    Centers are uniform over the box padded by half the maximum length plus the radius.
    A candidate is rejected when it interpenetrates an accepted capsule, lies outside the
    box, or would overshoot the target by more than the tolerance.

    Raises:
        PhantomGenerationError: If max_attempts consecutive candidates are rejected while
            the achieved fraction is still outside the tolerance band
    """
    rng = np.random.default_rng(spec.seed)
    extent = np.asarray(spec.extent_um, dtype=np.float64)
    box_volume = float(np.prod(extent))
    r = spec.radius_um
    lo_len, hi_len = spec.length_range_um
    pad = hi_len / 2.0 + r
    target = spec.target_volume_fraction

    p0s = np.empty((0, 3))
    p1s = np.empty((0, 3))
    capsules: List[FiberCapsule] = []
    achieved = 0.0
    attempts = 0

    while achieved < target:
        if attempts >= spec.max_attempts:
            if target - achieved <= FRACTION_TOLERANCE:
                break
            logger.error(f"Fiber placement stalled at fraction {achieved:.4f} (target {target:.4f})")
            raise PhantomGenerationError(
                f"could not place another fiber after {attempts} attempts", achieved
            )

        direction = random_direction(rng)
        length = rng.uniform(lo_len, hi_len)
        center = rng.uniform(-pad, extent + pad)
        p0 = center - 0.5 * length * direction
        p1 = center + 0.5 * length * direction
        attempts += 1

        candidate = FiberCapsule(p0=tuple(p0), p1=tuple(p1), radius_um=r)
        fraction = capsule_volume_in_box(candidate, spec.extent_um) / box_volume
        if fraction <= 0.0 or achieved + fraction > target + FRACTION_TOLERANCE:
            continue
        if capsules and np.any(segment_distances(p0, p1, p0s, p1s) < 2.0 * r):
            continue

        capsules.append(candidate)
        p0s = np.vstack([p0s, p0])
        p1s = np.vstack([p1s, p1])
        achieved += fraction
        attempts = 0

    logger.info(
        f"Sampled scene: {len(capsules)} fibers, fraction {achieved:.4f} "
        f"(target {target:.4f}, seed {spec.seed})"
    )
    return FiberScene(capsules=capsules, extent_um=spec.extent_um)


def _voxel_range(lo: float, hi: float, pitch: float, n: int) -> Tuple[int, int]:
    return max(0, int(math.floor(lo / pitch))), min(n, int(math.floor(hi / pitch)) + 1)


def _check_scene_fits(scene: FiberScene, spec: PhantomSpec) -> None:
    for axis, (a, b) in enumerate(zip(scene.extent_um, spec.extent_um)):
        if abs(a - b) > spec.voxel_size_um:
            raise ExtentMismatchError(
                f"scene extent {a:.1f} µm and volume extent {b:.1f} µm differ on axis {axis}"
            )


def rasterize(scene: FiberScene, spec: PhantomSpec) -> Tuple[Volume, LabelVolume]:
    """
    Render a clean (noise- and blur-free) gray volume and its labels

    Each voxel is sampled at supersample**3 sub-points; occupancy is the fraction of
    sub-points within radius of a capsule axis. Gray interpolates linearly between the
    matrix and fiber gray values; label is 1 where occupancy >= 0.5.
    """
    _check_scene_fits(scene, spec)
    nz, ny, nx = spec.dims
    h = spec.voxel_size_um
    s = spec.supersample
    sub = (np.arange(s) + 0.5) / s
    counts = np.zeros(spec.dims, dtype=np.int32)

    for capsule in scene.capsules:
        p0 = np.asarray(capsule.p0, dtype=np.float64)
        d = np.asarray(capsule.p1, dtype=np.float64) - p0
        dd = float(d @ d)
        r = capsule.radius_um
        lo = np.minimum(p0, p0 + d) - r
        hi = np.maximum(p0, p0 + d) + r
        iz0, iz1 = _voxel_range(lo[0], hi[0], h, nz)

        for iz in range(iz0, iz1):
            # part of the axis whose z lies within r of this voxel layer
            z_lo, z_hi = iz * h - r, (iz + 1) * h + r
            if abs(d[0]) > 1e-12:
                ta, tb = (z_lo - p0[0]) / d[0], (z_hi - p0[0]) / d[0]
                t0, t1 = min(ta, tb), max(ta, tb)
                if t1 < 0.0 or t0 > 1.0:
                    continue
                t0, t1 = max(t0, 0.0), min(t1, 1.0)
            elif z_lo <= p0[0] <= z_hi:
                t0, t1 = 0.0, 1.0
            else:
                continue

            a, b = p0 + t0 * d, p0 + t1 * d
            iy0, iy1 = _voxel_range(min(a[1], b[1]) - r, max(a[1], b[1]) + r, h, ny)
            ix0, ix1 = _voxel_range(min(a[2], b[2]) - r, max(a[2], b[2]) + r, h, nx)
            if iy0 >= iy1 or ix0 >= ix1:
                continue

            wz = ((iz + sub) * h - p0[0])[:, None, None]
            wy = ((np.arange(iy0, iy1)[:, None] + sub).ravel() * h - p0[1])[None, :, None]
            wx = ((np.arange(ix0, ix1)[:, None] + sub).ravel() * h - p0[2])[None, None, :]
            t = np.clip((wz * d[0] + wy * d[1] + wx * d[2]) / dd, 0.0, 1.0)
            dist2 = (wz - t * d[0]) ** 2 + (wy - t * d[1]) ** 2 + (wx - t * d[2]) ** 2
            inside = (dist2 <= r * r).reshape(s, iy1 - iy0, s, ix1 - ix0, s)
            counts[iz, iy0:iy1, ix0:ix1] += inside.sum(axis=(0, 2, 4), dtype=np.int32)

    np.minimum(counts, s**3, out=counts)
    occupancy = counts / float(s**3)
    gray = spec.gray_matrix + occupancy * (spec.gray_fiber - spec.gray_matrix)
    labels = 2 * counts >= s**3

    return (
        Volume(data=gray, voxel_size_um=h),
        LabelVolume(data=labels, voxel_size_um=h),
    )


def degrade(v: Volume, spec: PhantomSpec) -> Volume:
    """Gaussian point-spread blur (sigma in µm) followed by additive Gaussian noise"""
    out = v
    if spec.psf_sigma_um > 0:
        out = gaussian_blur(out, spec.psf_sigma_um / v.voxel_size_um)
    if spec.noise_sigma > 0:
        rng = np.random.default_rng([spec.seed, _NOISE_STREAM])
        noisy = out.data.astype(np.float64) + rng.normal(0.0, spec.noise_sigma, size=out.dims)
        out = Volume(data=noisy, voxel_size_um=v.voxel_size_um)
    return out


def generate_phantom(spec: PhantomSpec, scene: Optional[FiberScene] = None) -> Tuple[Volume, LabelVolume]:
    """Sample (unless given), rasterize and degrade one synthetic scan"""
    scene = scene if scene is not None else sample_scene(spec)
    clean, labels = rasterize(scene, spec)
    gray = degrade(clean, spec)
    logger.info(
        f"Phantom rendered: dims={spec.dims} pitch={spec.voxel_size_um} µm "
        f"label fraction={labels.fiber_fraction:.4f}"
    )
    return gray, labels


def generate_pair(
    spec_mr: PhantomSpec,
    spec_lr: PhantomSpec,
    seed: int,
) -> Tuple[Tuple[Volume, LabelVolume], Tuple[Volume, LabelVolume]]:
    """
    Render one fiber scene at two resolutions

    Args:
        spec_mr: Medium-resolution spec (scene is sampled in its box)
        spec_lr: Low-resolution spec covering the same physical extent
        seed: Seed for scene sampling and noise of both renders

    Returns:
        ((mr_gray, mr_label), (lr_gray, lr_label))

    Raises:
        ExtentMismatchError: If the extents differ by one LR voxel or more on any axis
    """
    tolerance = max(spec_mr.voxel_size_um, spec_lr.voxel_size_um)
    for axis, (a, b) in enumerate(zip(spec_mr.extent_um, spec_lr.extent_um)):
        if abs(a - b) >= tolerance:
            raise ExtentMismatchError(
                f"MR extent {a:.1f} µm and LR extent {b:.1f} µm differ on axis {axis}"
            )

    spec_mr = spec_mr.model_copy(update={"seed": seed})
    spec_lr = spec_lr.model_copy(update={"seed": seed})
    scene = sample_scene(spec_mr)
    return generate_phantom(spec_mr, scene), generate_phantom(spec_lr, scene)
