"""
Segmentation Networks
Fully convolutional residual networks (shallow / deep, 2D / 3D) and checkpoint persistence
"""
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from loguru import logger
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from src.fiberseg.autodiff import ConvKernel, Mode, ResidualBlock, Tensor, conv
from src.fiberseg.errors import CheckpointError, DimensionMismatchError, ShapeError

DEFAULT_BLOCK_WIDTHS = {
    "shallow": [16, 32, 64],
    "deep": [16, 16, 32, 32, 64, 64],
}
OUTPUT_CHANNELS = 2
CHECKPOINT_MAGIC = "FSCKPT1"


class ModelConfig(BaseModel):
    """Architecture description; block_widths defaults from the variant"""

    dimensionality: Literal[2, 3]
    variant: Literal["shallow", "deep"] = "shallow"
    block_widths: Optional[List[int]] = None
    stem_width: int = Field(16, ge=1)

    @field_validator("block_widths")
    @classmethod
    def _positive_widths(cls, value):
        if value is not None and (not value or any(w < 1 for w in value)):
            raise ValueError("block_widths must be a non-empty list of positive channel counts")
        return value

    @model_validator(mode="after")
    def _default_widths(self) -> "ModelConfig":
        if self.block_widths is None:
            self.block_widths = list(DEFAULT_BLOCK_WIDTHS[self.variant])
        return self


class Model:
    """
    stem conv (1 -> stem_width) -> residual blocks -> head conv (last width -> 2)

    Every convolution is same-padded with stride 1, so logits keep the input's
    spatial shape.
    """

    def __init__(
        self,
        config: ModelConfig,
        stem: ConvKernel,
        blocks: List[ResidualBlock],
        head: ConvKernel,
        seed: int,
        iteration: int = 0,
    ):
        self.config = config
        self.stem = stem
        self.blocks = blocks
        self.head = head
        self.seed = seed
        self.iteration = iteration

    @property
    def dimensionality(self) -> int:
        return self.config.dimensionality

    def parameters(self) -> Dict[str, Tensor]:
        """Trainable tensors in a fixed order; names double as checkpoint sections"""
        params = {f"stem.{k}": t for k, t in self.stem.parameters().items()}
        for i, block in enumerate(self.blocks):
            params.update({f"blocks.{i}.{k}": t for k, t in block.parameters().items()})
        params.update({f"head.{k}": t for k, t in self.head.parameters().items()})
        return params

    def buffers(self) -> Dict[str, np.ndarray]:
        """Batch-norm running statistics"""
        buffers: Dict[str, np.ndarray] = {}
        for i, block in enumerate(self.blocks):
            buffers.update({f"blocks.{i}.{k}": arr for k, arr in block.buffers().items()})
        return buffers

    def parameter_count(self) -> int:
        return sum(t.values.size for t in self.parameters().values())

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.zero_grad()

    def forward(self, x: Union[Tensor, np.ndarray], mode: Mode = "train") -> Tensor:
        """
        Two-channel logits (background, fiber) for a batch of one-channel inputs

        Args:
            x: (N, 1, H, W) for 2D models, (N, 1, D, H, W) for 3D models
            mode: "train" uses and updates batch statistics, "eval" uses running ones

        Raises:
            ShapeError: If x has the wrong rank or channel count
        """
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.values.ndim != self.dimensionality + 2 or x.shape[1] != 1:
            raise ShapeError(
                f"{self.dimensionality}D model expects (N, 1, {'D, ' if self.dimensionality == 3 else ''}H, W), "
                f"got {x.shape}"
            )
        h = conv(x, self.stem)
        for block in self.blocks:
            h = block(h, mode)
        return conv(h, self.head)

    __call__ = forward


def build_model(cfg: ModelConfig, seed: int) -> Model:
    """
    Instantiate a network with deterministic He-normal weights

    Args:
        cfg: Architecture
        seed: Seed of the weight initialization

    Returns:
        Untrained model
    """
    rng = np.random.default_rng(seed)
    ndim = cfg.dimensionality
    stem = ConvKernel.init(1, cfg.stem_width, ndim, rng)
    blocks = []
    width = cfg.stem_width
    for out_width in cfg.block_widths:
        blocks.append(ResidualBlock.init(width, out_width, ndim, rng))
        width = out_width
    head = ConvKernel.init(width, OUTPUT_CHANNELS, ndim, rng)

    model = Model(cfg, stem, blocks, head, seed)
    logger.debug(
        f"Built {cfg.variant} {ndim}D model: widths {cfg.block_widths}, "
        f"{model.parameter_count()} parameters"
    )
    return model


def _sections(model: Model) -> Dict[str, np.ndarray]:
    sections = {f"param:{k}": t.values for k, t in model.parameters().items()}
    sections.update({f"buffer:{k}": arr for k, arr in model.buffers().items()})
    return sections


def save_checkpoint(model: Model, path: Union[str, Path]) -> None:
    """
    Write a checkpoint: a text manifest, then the little-endian float32 payload

    Manifest lines: magic, config JSON, iteration, seed, one `section <name> <count>`
    line per parameter / running statistic, and `end`.
    """
    path = Path(path)
    sections = _sections(model)
    lines = [
        CHECKPOINT_MAGIC,
        f"config={model.config.model_dump_json()}",
        f"iteration={model.iteration}",
        f"seed={model.seed}",
    ]
    lines += [f"section {name} {arr.size}" for name, arr in sections.items()]
    lines.append("end")

    payload = b"".join(np.ascontiguousarray(arr, dtype="<f4").tobytes() for arr in sections.values())
    try:
        with open(path, "wb") as f:
            f.write(("\n".join(lines) + "\n").encode("utf-8"))
            f.write(payload)
    except OSError as e:
        logger.error(f"Failed to write checkpoint {path}: {e}")
        raise
    logger.info(f"Checkpoint written to {path} (iteration {model.iteration})")


def _read_line(raw: bytes, pos: int, path: Path) -> Tuple[str, int]:
    end = raw.find(b"\n", pos)
    if end < 0:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        return raw[pos:end].decode("utf-8"), end + 1
    except UnicodeDecodeError as e:
        raise CheckpointError(f"{path}: manifest is not UTF-8") from e


def _manifest_value(line: str, key: str, path: Path) -> str:
    prefix = f"{key}="
    if not line.startswith(prefix):
        raise CheckpointError(f"{path}: expected '{key}=...', got {line[:40]!r}")
    return line[len(prefix):]


def load_checkpoint(path: Union[str, Path], expected_dimensionality: Optional[int] = None) -> Model:
    """
    Rebuild a model from a checkpoint, bit-exactly

    Args:
        path: File written by save_checkpoint
        expected_dimensionality: When given, the stored model must have it

    Raises:
        CheckpointError: On a malformed manifest, section mismatch or truncated payload
        DimensionMismatchError: If the stored dimensionality differs from the expected one
    """
    path = Path(path)
    raw = path.read_bytes()

    line, pos = _read_line(raw, 0, path)
    if line != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {line[:16]!r})")

    line, pos = _read_line(raw, pos, path)
    try:
        config = ModelConfig.model_validate_json(_manifest_value(line, "config", path))
    except ValidationError as e:
        raise CheckpointError(f"{path}: invalid model config: {e}") from e

    try:
        line, pos = _read_line(raw, pos, path)
        iteration = int(_manifest_value(line, "iteration", path))
        line, pos = _read_line(raw, pos, path)
        seed = int(_manifest_value(line, "seed", path))
    except ValueError as e:
        raise CheckpointError(f"{path}: bad iteration / seed entry") from e

    manifest: List[Tuple[str, int]] = []
    while True:
        line, pos = _read_line(raw, pos, path)
        if line == "end":
            break
        parts = line.split(" ")
        if len(parts) != 3 or parts[0] != "section" or not parts[2].isdigit():
            raise CheckpointError(f"{path}: bad manifest line {line!r}")
        manifest.append((parts[1], int(parts[2])))

    if expected_dimensionality is not None and config.dimensionality != expected_dimensionality:
        raise DimensionMismatchError(
            f"{path}: checkpoint holds a {config.dimensionality}D model, expected {expected_dimensionality}D"
        )

    payload = raw[pos:]
    total = sum(count for _, count in manifest)
    if len(payload) != 4 * total:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, manifest declares {4 * total}")

    model = build_model(config, seed)
    model.iteration = iteration
    targets = _sections(model)
    if [name for name, _ in manifest] != list(targets):
        raise CheckpointError(f"{path}: sections do not match a {config.variant} {config.dimensionality}D model")

    values = np.frombuffer(payload, dtype="<f4")
    offset = 0
    for name, count in manifest:
        target = targets[name]
        if count != target.size:
            raise CheckpointError(f"{path}: section {name} has {count} values, model needs {target.size}")
        target[...] = values[offset:offset + count].reshape(target.shape)
        offset += count

    logger.info(f"Loaded {config.variant} {config.dimensionality}D checkpoint {path.name} (iteration {iteration})")
    return model
