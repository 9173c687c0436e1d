"""
Unit tests for whole-volume prediction
"""
import numpy as np
import pytest

from src.fiberseg.autodiff import fiber_probability
from src.fiberseg.errors import DegenerateVolumeError, DimensionMismatchError, PatchBoundsError
from src.fiberseg.infer import (
    coverage_counts,
    normalize_then_predict,
    predict_2d,
    predict_3d,
    tile_origins,
)
from src.fiberseg.model import ModelConfig, build_model
from src.fiberseg.volgrid import Volume, normalize

pytestmark = pytest.mark.unit


def _tiny_model(ndim=3):
    return build_model(ModelConfig(dimensionality=ndim, stem_width=4, block_widths=[4]), seed=4)


@pytest.fixture
def volume(rng):
    return normalize(Volume(data=rng.normal(size=(7, 9, 8)), voxel_size_um=8.3))


# ============================================================================
# TILING
# ============================================================================

@pytest.mark.parametrize("n,patch,stride,expected", [
    (10, 4, 2, [0, 2, 4, 6]),
    (10, 4, 3, [0, 3, 6]),
    (10, 4, 4, [0, 4, 6]),
    (10, 10, 5, [0]),
    (5, 1, 1, [0, 1, 2, 3, 4]),
])
def test_tile_origins(n, patch, stride, expected):
    """Test regular starts plus the clamped final tile"""
    assert tile_origins(n, patch, stride) == expected


@pytest.mark.parametrize("n,patch,stride", [(3, 4, 2), (10, 4, 0), (10, 4, 5)])
def test_tile_origins_errors(n, patch, stride):
    """Test oversized patches and invalid strides"""
    with pytest.raises(PatchBoundsError):
        tile_origins(n, patch, stride)


def test_coverage_counts_match_brute_force():
    """Test per-voxel tile counts on a 10^3 volume, patch 4, stride 2"""
    counts = coverage_counts((10, 10, 10), (4, 4, 4), (2, 2, 2))
    starts = [0, 2, 4, 6]
    per_axis = np.array([sum(o <= i < o + 4 for o in starts) for i in range(10)])
    expected = per_axis[:, None, None] * per_axis[None, :, None] * per_axis[None, None, :]

    np.testing.assert_array_equal(counts, expected)
    assert counts.min() >= 1


# ============================================================================
# 3D PREDICTION
# ============================================================================

def test_constant_logit_model_gives_constant_probability(volume):
    """Test blending of identical tile outputs"""
    model = _tiny_model()
    model.head.weight.values[...] = 0.0
    model.head.bias.values[:] = [0.0, 1.5]

    prob, seg = predict_3d(model, volume, (4, 4, 4), (2, 3, 1))
    np.testing.assert_allclose(prob.data, 1.0 / (1.0 + np.exp(-1.5)), rtol=1e-6)
    assert seg.data.all()


def test_single_tile_equals_forward_pass(volume):
    """Test that a volume-sized tile is a plain eval forward pass"""
    model = _tiny_model()
    prob, _ = predict_3d(model, volume, volume.dims)
    direct = fiber_probability(model(volume.data[None, None], "eval").values)[0]

    np.testing.assert_array_equal(prob.data, direct)


def test_3d_prediction_shapes_and_threshold(volume):
    """Test dims preservation and seg = prob >= 0.5"""
    prob, seg = predict_3d(_tiny_model(), volume, (4, 4, 4))

    assert prob.dims == seg.dims == volume.dims
    assert prob.voxel_size_um == volume.voxel_size_um
    assert 0.0 <= prob.data.min() and prob.data.max() <= 1.0
    np.testing.assert_array_equal(seg.data, prob.data >= 0.5)


def test_3d_prediction_errors(volume):
    """Test dimensionality and tile checks"""
    with pytest.raises(DimensionMismatchError):
        predict_3d(_tiny_model(ndim=2), volume, (4, 4, 4))
    with pytest.raises(PatchBoundsError):
        predict_3d(_tiny_model(), volume, (8, 4, 4))
    with pytest.raises(PatchBoundsError):
        predict_3d(_tiny_model(), volume, (4, 4, 4), (5, 1, 1))


# ============================================================================
# 2D PREDICTION
# ============================================================================

def test_slice_order_does_not_matter(volume):
    """Test that slices are predicted independently"""
    model = _tiny_model(ndim=2)
    forward, _ = predict_2d(model, volume)
    backward, _ = predict_2d(model, volume, order=range(volume.dims[0] - 1, -1, -1))

    assert forward.data.tobytes() == backward.data.tobytes()


def test_single_slice_volume(rng):
    """Test nz = 1"""
    v = normalize(Volume(data=rng.normal(size=(1, 6, 5)), voxel_size_um=3.9))
    prob, seg = predict_2d(_tiny_model(ndim=2), v)

    assert prob.dims == seg.dims == (1, 6, 5)


def test_2d_predictor_needs_2d_model(volume):
    """Test dimensionality check"""
    with pytest.raises(DimensionMismatchError):
        predict_2d(_tiny_model(), volume)


# ============================================================================
# NORMALIZE THEN PREDICT
# ============================================================================

@pytest.mark.parametrize("ndim", [2, 3])
def test_prediction_is_affine_invariant(rng, ndim):
    """Test a * raw + b predicts (almost) like raw"""
    model = _tiny_model(ndim)
    raw = Volume(data=rng.normal(size=(6, 6, 6)), voxel_size_um=8.3)
    shifted = Volume(data=raw.data.astype(np.float64) * 4.0 - 7.0, voxel_size_um=8.3)

    a, _ = normalize_then_predict(model, raw)
    b, _ = normalize_then_predict(model, shifted)
    np.testing.assert_allclose(a.data, b.data, atol=1e-4)


def test_default_3d_patch_is_clipped_to_volume(rng):
    """Test that small volumes are predicted with one volume-sized tile"""
    model = _tiny_model()
    raw = Volume(data=rng.normal(size=(5, 6, 7)), voxel_size_um=8.3)

    prob, _ = normalize_then_predict(model, raw)
    single, _ = predict_3d(model, normalize(raw), raw.dims)
    np.testing.assert_array_equal(prob.data, single.data)


def test_constant_volume_is_rejected():
    """Test degenerate input"""
    with pytest.raises(DegenerateVolumeError):
        normalize_then_predict(_tiny_model(), Volume(data=np.ones((4, 4, 4)), voxel_size_um=1.0))
