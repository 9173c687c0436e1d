"""
Segmentation Metrics
Confusion tallies, Dice reports and color-coded error maps
"""
import re
from pathlib import Path
from typing import Union

import numpy as np
from loguru import logger
from pydantic import BaseModel, Field, ValidationError

from src.fiberseg.errors import PatchBoundsError, ReportFormatError, VolumeFormatError
from src.fiberseg.volgrid import LabelVolume, check_same_dims

TP_COLOR = (255, 255, 255)
TN_COLOR = (0, 0, 0)
FP_COLOR = (0, 200, 0)
FN_COLOR = (255, 140, 0)

_REPORT_RE = re.compile(
    r"^method=(?P<method>\S+) volume=(?P<volume>\S+) dice=(?P<dice>\S+) "
    r"tp=(?P<tp>\d+) tn=(?P<tn>\d+) fp=(?P<fp>\d+) fn=(?P<fn>\d+)$"
)


class ConfusionCounts(BaseModel):
    tp: int = Field(..., ge=0)
    tn: int = Field(..., ge=0)
    fp: int = Field(..., ge=0)
    fn: int = Field(..., ge=0)

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def confusion(gt: LabelVolume, pred: LabelVolume) -> ConfusionCounts:
    """
    Voxel tallies of pred against gt; the intersection is the voxel-wise minimum

    Raises:
        DimensionMismatchError: If the volumes differ in dims
    """
    check_same_dims(gt, pred, "ground truth and prediction")
    g = gt.data.astype(np.int64)
    p = pred.data.astype(np.int64)
    tp = int(np.minimum(g, p).sum())
    n_gt = int(g.sum())
    n_pred = int(p.sum())
    return ConfusionCounts(tp=tp, fp=n_pred - tp, fn=n_gt - tp, tn=g.size - n_gt - n_pred + tp)


def dice(counts: ConfusionCounts) -> float:
    """2 tp / (2 tp + fp + fn); two empty masks score 1.0"""
    denom = 2 * counts.tp + counts.fp + counts.fn
    if denom == 0:
        return 1.0
    return 2.0 * counts.tp / denom


class DiceReport(BaseModel):
    method: str
    volume: str
    dice: float = Field(..., ge=0.0, le=1.0)
    counts: ConfusionCounts

    def to_line(self) -> str:
        c = self.counts
        return (
            f"method={self.method} volume={self.volume} dice={self.dice:.6f} "
            f"tp={c.tp} tn={c.tn} fp={c.fp} fn={c.fn}"
        )

    @classmethod
    def from_line(cls, line: str) -> "DiceReport":
        """
        Parse a line written by to_line

        Raises:
            ReportFormatError: If the line does not match or a value is out of range
        """
        text = line.strip()
        match = _REPORT_RE.match(text)
        if not match:
            raise ReportFormatError(f"not a Dice report line: {text[:80]!r}")
        try:
            counts = ConfusionCounts(**{k: int(match.group(k)) for k in ("tp", "tn", "fp", "fn")})
            return cls(
                method=match.group("method"),
                volume=match.group("volume"),
                dice=float(match.group("dice")),
                counts=counts,
            )
        except (ValueError, ValidationError) as e:
            raise ReportFormatError(f"bad value in Dice report line {text[:80]!r}") from e


def _label(text: str) -> str:
    return re.sub(r"\s+", "_", text.strip()) or "-"


def evaluate(gt: LabelVolume, pred: LabelVolume, method: str, volume: str) -> DiceReport:
    """Confusion counts and Dice of one prediction, tagged for reporting"""
    counts = confusion(gt, pred)
    score = dice(counts)
    logger.info(f"{method} on {volume}: Dice {score:.4f}")
    return DiceReport(method=_label(method), volume=_label(volume), dice=score, counts=counts)


def error_map_rgb(gt: LabelVolume, pred: LabelVolume, z: int) -> np.ndarray:
    """
    (ny, nx, 3) uint8 image of slice z: TP white, TN black, FP green, FN orange

    Raises:
        PatchBoundsError: If z is outside the volume
    """
    check_same_dims(gt, pred, "ground truth and prediction")
    if not 0 <= z < gt.dims[0]:
        raise PatchBoundsError(f"slice index {z} out of range [0, {gt.dims[0]})")
    g = gt.data[z].astype(bool)
    p = pred.data[z].astype(bool)
    rgb = np.zeros(g.shape + (3,), dtype=np.uint8)
    rgb[g & p] = TP_COLOR
    rgb[~g & p] = FP_COLOR
    rgb[g & ~p] = FN_COLOR
    return rgb


def render_error_map(gt: LabelVolume, pred: LabelVolume, z: int, path: Union[str, Path]) -> Path:
    """Write error_map_rgb of slice z as a binary portable pixmap (P6)"""
    rgb = error_map_rgb(gt, pred, z)
    path = Path(path)
    height, width = rgb.shape[:2]
    try:
        with open(path, "wb") as f:
            f.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
            f.write(rgb.tobytes())
    except OSError as e:
        logger.error(f"Failed to write error map {path}: {e}")
        raise
    logger.debug(f"Error map of slice {z} written to {path}")
    return path


def read_ppm(path: Union[str, Path]) -> np.ndarray:
    """Read a binary P6 pixmap written by render_error_map"""
    raw = Path(path).read_bytes()
    header = raw.split(b"\n", 3)
    if len(header) != 4 or header[0] != b"P6" or header[2] != b"255":
        raise VolumeFormatError(f"{path}: not an 8-bit P6 pixmap")
    try:
        width, height = (int(n) for n in header[1].split())
    except ValueError as e:
        raise VolumeFormatError(f"{path}: bad pixmap size {header[1]!r}") from e
    pixels = header[3]
    if len(pixels) != width * height * 3:
        raise VolumeFormatError(f"{path}: pixel data is {len(pixels)} bytes, expected {width * height * 3}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width, 3)
