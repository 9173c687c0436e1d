"""
Unit tests for the segmentation networks and checkpoints
"""
import numpy as np
import pytest
from pydantic import ValidationError

from src.fiberseg.errors import CheckpointError, DimensionMismatchError, ShapeError
from src.fiberseg.model import (
    CHECKPOINT_MAGIC,
    ModelConfig,
    build_model,
    load_checkpoint,
    save_checkpoint,
)

pytestmark = pytest.mark.unit


@pytest.fixture
def tiny_3d():
    """Narrow 3D model with one projection block"""
    return build_model(ModelConfig(dimensionality=3, stem_width=4, block_widths=[4, 8]), seed=9)


@pytest.fixture
def patch_3d(rng):
    return rng.normal(size=(2, 1, 5, 6, 4)).astype(np.float32)


# ============================================================================
# ARCHITECTURE
# ============================================================================

def test_config_fills_widths_from_variant():
    """Test default block widths"""
    assert ModelConfig(dimensionality=2).block_widths == [16, 32, 64]
    assert ModelConfig(dimensionality=3, variant="deep").block_widths == [16, 16, 32, 32, 64, 64]
    assert ModelConfig(dimensionality=2, block_widths=[8]).block_widths == [8]


@pytest.mark.parametrize("kwargs", [
    {"dimensionality": 4},
    {"dimensionality": 2, "variant": "wide"},
    {"dimensionality": 2, "block_widths": []},
    {"dimensionality": 2, "block_widths": [8, 0]},
])
def test_config_validation(kwargs):
    """Test rejected architectures"""
    with pytest.raises(ValidationError):
        ModelConfig(**kwargs)


def test_shallow_3d_parameter_count():
    """Test the reference parameter count of the shallow 3D network"""
    model = build_model(ModelConfig(dimensionality=3), seed=0)

    assert model.parameter_count() == 228194


def test_deep_has_more_parameters_than_shallow():
    """Test variant ordering in 2D and 3D"""
    for ndim in (2, 3):
        shallow = build_model(ModelConfig(dimensionality=ndim), seed=0)
        deep = build_model(ModelConfig(dimensionality=ndim, variant="deep"), seed=0)
        assert deep.parameter_count() > shallow.parameter_count()


def test_parameter_names_are_ordered(tiny_3d):
    """Test stem, blocks and head naming"""
    names = list(tiny_3d.parameters())

    assert names[:2] == ["stem.weight", "stem.bias"]
    assert "blocks.1.proj.weight" in names
    assert "blocks.0.proj.weight" not in names
    assert names[-2:] == ["head.weight", "head.bias"]
    assert list(tiny_3d.buffers()) == [
        "blocks.0.bn.running_mean",
        "blocks.0.bn.running_var",
        "blocks.1.bn.running_mean",
        "blocks.1.bn.running_var",
    ]


def test_same_seed_same_weights():
    """Test seeded initialization"""
    cfg = ModelConfig(dimensionality=2, block_widths=[4])
    a, b, c = build_model(cfg, seed=1), build_model(cfg, seed=1), build_model(cfg, seed=2)

    assert a.stem.weight.values.tobytes() == b.stem.weight.values.tobytes()
    assert a.stem.weight.values.tobytes() != c.stem.weight.values.tobytes()


# ============================================================================
# FORWARD
# ============================================================================

def test_forward_preserves_spatial_shape(tiny_3d, patch_3d, rng):
    """Test two-channel logits with the input's spatial shape"""
    model_2d = build_model(ModelConfig(dimensionality=2, stem_width=4, block_widths=[4]), seed=0)

    assert tiny_3d(patch_3d, "eval").shape == (2, 2, 5, 6, 4)
    assert model_2d(rng.normal(size=(3, 1, 7, 9)), "train").shape == (3, 2, 7, 9)


@pytest.mark.parametrize("ndim", [2, 3])
@pytest.mark.parametrize("variant", ["shallow", "deep"])
def test_all_architectures_preserve_shape(rng, ndim, variant):
    """Test logits shape on 20 random input shapes per architecture"""
    model = build_model(ModelConfig(dimensionality=ndim, variant=variant), seed=0)
    for _ in range(20):
        spatial = tuple(int(n) for n in rng.integers(1, 6, size=ndim))
        assert model(rng.normal(size=(1, 1) + spatial), "eval").shape == (1, 2) + spatial


def test_forward_rejects_wrong_input(tiny_3d):
    """Test rank and channel checks"""
    with pytest.raises(ShapeError):
        tiny_3d(np.zeros((1, 1, 4, 4)), "eval")
    with pytest.raises(ShapeError):
        tiny_3d(np.zeros((1, 2, 4, 4, 4)), "eval")


def test_eval_forward_is_deterministic(tiny_3d, patch_3d):
    """Test bitwise-identical eval passes"""
    first = tiny_3d(patch_3d, "eval").values

    assert tiny_3d(patch_3d, "eval").values.tobytes() == first.tobytes()


def test_running_statistics_change_only_in_train_mode(tiny_3d, patch_3d):
    """Test that eval leaves BN buffers alone and train updates them"""
    before = {k: v.copy() for k, v in tiny_3d.buffers().items()}
    tiny_3d(patch_3d, "eval")
    for k, v in tiny_3d.buffers().items():
        np.testing.assert_array_equal(v, before[k])

    tiny_3d(patch_3d, "train")
    assert any(not np.array_equal(v, before[k]) for k, v in tiny_3d.buffers().items())


def test_zero_grad_clears_all_parameters(tiny_3d, patch_3d):
    """Test gradient reset after a backward pass"""
    tiny_3d(patch_3d, "train").backward(np.ones((2, 2, 5, 6, 4), dtype=np.float32))
    assert any(np.any(t.grad != 0) for t in tiny_3d.parameters().values())

    tiny_3d.zero_grad()
    assert all(np.all(t.grad == 0) for t in tiny_3d.parameters().values())


# ============================================================================
# CHECKPOINTS
# ============================================================================

def test_checkpoint_round_trip_is_bit_exact(tmp_path, tiny_3d, patch_3d):
    """Test parameters, running statistics and predictions after reload"""
    tiny_3d(patch_3d, "train")
    tiny_3d.iteration = 17
    path = tmp_path / "model.ckpt"
    save_checkpoint(tiny_3d, path)
    loaded = load_checkpoint(path)

    assert loaded.config == tiny_3d.config
    assert (loaded.iteration, loaded.seed) == (17, 9)
    for name, t in tiny_3d.parameters().items():
        assert loaded.parameters()[name].values.tobytes() == t.values.tobytes()
    for name, arr in tiny_3d.buffers().items():
        assert loaded.buffers()[name].tobytes() == arr.tobytes()
    assert loaded(patch_3d, "eval").values.tobytes() == tiny_3d(patch_3d, "eval").values.tobytes()


def test_checkpoint_manifest_layout(tmp_path, tiny_3d):
    """Test the text manifest ahead of the payload"""
    path = tmp_path / "model.ckpt"
    save_checkpoint(tiny_3d, path)
    raw = path.read_bytes()
    head, payload = raw.split(b"\nend\n", 1)
    lines = head.decode().splitlines()

    assert lines[0] == CHECKPOINT_MAGIC
    assert lines[1].startswith("config={")
    assert lines[2:4] == ["iteration=0", "seed=9"]
    assert lines[4] == "section param:stem.weight 108"
    assert len(payload) == 4 * (tiny_3d.parameter_count() + sum(a.size for a in tiny_3d.buffers().values()))


def test_truncated_checkpoint_is_rejected(tmp_path, tiny_3d):
    """Test payload length check"""
    path = tmp_path / "model.ckpt"
    save_checkpoint(tiny_3d, path)
    path.write_bytes(path.read_bytes()[:-4])

    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_bad_magic_is_rejected(tmp_path):
    """Test non-checkpoint files"""
    path = tmp_path / "model.ckpt"
    path.write_bytes(b"VXG1 dtype=f32 dims=1,1,1 pitch_um=1.0\n\x00\x00\x00\x00")

    with pytest.raises(CheckpointError):
        load_checkpoint(path)


@pytest.mark.parametrize("config_line", [
    b'config={"dimensionality": 3',
    b'config={"dimensionality": 4, "variant": "shallow"}',
])
def test_corrupt_config_line_is_rejected(tmp_path, tiny_3d, config_line):
    """Test broken JSON and out-of-range values in the config entry"""
    path = tmp_path / "model.ckpt"
    save_checkpoint(tiny_3d, path)
    lines = path.read_bytes().split(b"\n")
    lines[1] = config_line
    path.write_bytes(b"\n".join(lines))

    with pytest.raises(CheckpointError, match="invalid model config"):
        load_checkpoint(path)


def test_dimensionality_mismatch(tmp_path, tiny_3d):
    """Test loading a 3D checkpoint where a 2D model is expected"""
    path = tmp_path / "model.ckpt"
    save_checkpoint(tiny_3d, path)

    with pytest.raises(DimensionMismatchError):
        load_checkpoint(path, expected_dimensionality=2)
    assert load_checkpoint(path, expected_dimensionality=3).dimensionality == 3
