"""
Unit tests for the volume grid

Tests VXG1 I/O, normalization, patch extraction and slicing.
"""
import numpy as np
import pytest
from pydantic import ValidationError

from src.fiberseg.errors import (
    DegenerateVolumeError,
    DimensionMismatchError,
    PatchBoundsError,
    VolumeFormatError,
)
from src.fiberseg.volgrid import (
    LabelVolume,
    PatchRef,
    Volume,
    binarize,
    extract_patch,
    load_volume,
    normalize,
    save_volume,
    slice2d,
    stack_slices,
)

pytestmark = pytest.mark.unit


# ============================================================================
# TYPES
# ============================================================================

def test_volume_stores_float32_and_is_read_only():
    """Test that gray data is converted to float32 and frozen"""
    v = Volume(data=np.arange(24, dtype=np.float64).reshape(2, 3, 4), voxel_size_um=3.9)

    assert v.data.dtype == np.float32
    assert v.dims == (2, 3, 4)
    assert v.extent_um == pytest.approx((7.8, 11.7, 15.6))
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 1.0


def test_volume_rejects_bad_shape_and_pitch():
    """Test dims and pitch invariants"""
    with pytest.raises(VolumeFormatError):
        Volume(data=np.zeros((4, 4)), voxel_size_um=1.0)
    with pytest.raises(ValidationError):
        Volume(data=np.zeros((2, 2, 2)), voxel_size_um=0.0)


def test_label_volume_accepts_bool_and_rejects_other_values():
    """Test label value invariant"""
    labels = LabelVolume(data=np.array([[[True, False]]]), voxel_size_um=1.0)
    assert labels.data.dtype == np.uint8
    assert labels.fiber_fraction == 0.5

    with pytest.raises(VolumeFormatError):
        LabelVolume(data=np.full((1, 1, 2), 2), voxel_size_um=1.0)


# ============================================================================
# FILE I/O
# ============================================================================

def test_save_load_gray_is_bit_exact(tmp_path, random_gray):
    """Test that a gray volume survives a file round trip bit-exactly"""
    path = tmp_path / "gray.vxg"
    save_volume(random_gray, path)
    loaded = load_volume(path)

    assert isinstance(loaded, Volume)
    assert loaded.voxel_size_um == random_gray.voxel_size_um
    assert loaded.data.tobytes() == random_gray.data.tobytes()


def test_save_load_label_keeps_kind(tmp_path, random_label):
    """Test that u8 files load as label volumes"""
    path = tmp_path / "label.vxg"
    save_volume(random_label, path)
    loaded = load_volume(path)

    assert isinstance(loaded, LabelVolume)
    np.testing.assert_array_equal(loaded.data, random_label.data)


def test_header_format(tmp_path):
    """Test the literal VXG1 header line"""
    path = tmp_path / "v.vxg"
    save_volume(Volume(data=np.zeros((2, 3, 4)), voxel_size_um=8.3), path)

    header = path.read_bytes().split(b"\n", 1)[0]
    assert header == b"VXG1 dtype=f32 dims=2,3,4 pitch_um=8.3"
    assert path.stat().st_size == len(header) + 1 + 2 * 3 * 4 * 4


def test_truncated_payload_is_rejected(tmp_path, random_gray):
    """Test payload size check"""
    path = tmp_path / "gray.vxg"
    save_volume(random_gray, path)
    path.write_bytes(path.read_bytes()[:-1])

    with pytest.raises(VolumeFormatError):
        load_volume(path)


@pytest.mark.parametrize("header", [
    b"VXG2 dtype=f32 dims=1,1,1 pitch_um=1.0",
    b"VXG1 dtype=f64 dims=1,1,1 pitch_um=1.0",
    b"VXG1 dtype=f32 dims=1,1 pitch_um=1.0",
])
def test_malformed_header_is_rejected(tmp_path, header):
    """Test header validation"""
    path = tmp_path / "bad.vxg"
    path.write_bytes(header + b"\n" + b"\x00" * 8)

    with pytest.raises(VolumeFormatError):
        load_volume(path)


def test_label_file_with_bad_values_is_rejected(tmp_path):
    """Test label values outside {0, 1} in a u8 file"""
    path = tmp_path / "bad_label.vxg"
    path.write_bytes(b"VXG1 dtype=u8 dims=1,1,2 pitch_um=1.0\n\x00\x07")

    with pytest.raises(VolumeFormatError):
        load_volume(path)


def test_missing_file_raises(tmp_path):
    """Test that missing files surface as OSError"""
    with pytest.raises(FileNotFoundError):
        load_volume(tmp_path / "nope.vxg")


# ============================================================================
# NORMALIZATION
# ============================================================================

def test_normalize_gives_zero_mean_unit_std(random_gray):
    """Test normalization statistics"""
    n = normalize(random_gray)
    data = n.data.astype(np.float64)

    assert abs(data.mean()) < 1e-6
    assert abs(data.std() - 1.0) < 1e-5


def test_normalize_is_affine_invariant(random_gray):
    """Test that a * v + b normalizes to (almost) the same volume"""
    shifted = Volume(data=random_gray.data.astype(np.float64) * 3.0 + 5.0, voxel_size_um=3.9)

    np.testing.assert_allclose(normalize(shifted).data, normalize(random_gray).data, atol=1e-5)


def test_normalize_is_idempotent(random_gray):
    """Test that normalizing twice changes nothing and keeps the voxel order"""
    once = normalize(random_gray)
    twice = normalize(once)

    np.testing.assert_allclose(twice.data, once.data, atol=1e-6)
    order = np.argsort(random_gray.data, axis=None)
    assert np.all(np.diff(once.data.ravel()[order]) >= 0)
    assert twice.voxel_size_um == random_gray.voxel_size_um


def test_normalize_constant_volume_fails():
    """Test degenerate input"""
    with pytest.raises(DegenerateVolumeError):
        normalize(Volume(data=np.full((3, 3, 3), 2.0), voxel_size_um=1.0))
    with pytest.raises(DegenerateVolumeError):
        normalize(Volume(data=np.ones((1, 1, 1)), voxel_size_um=1.0))


# ============================================================================
# PATCHES AND SLICES
# ============================================================================

def test_extract_patch_copies_box(random_gray):
    """Test patch contents and pitch"""
    ref = PatchRef(origin=(2, 3, 1), shape=(4, 5, 6))
    patch = extract_patch(random_gray, ref)

    assert patch.dims == (4, 5, 6)
    assert patch.voxel_size_um == random_gray.voxel_size_um
    np.testing.assert_array_equal(patch.data, random_gray.data[2:6, 3:8, 1:7])


def test_extract_patch_out_of_bounds(random_gray):
    """Test bounds check"""
    with pytest.raises(PatchBoundsError):
        extract_patch(random_gray, PatchRef(origin=(10, 0, 0), shape=(4, 1, 1)))
    with pytest.raises(PatchBoundsError):
        PatchRef(origin=(-1, 0, 0), shape=(1, 1, 1))


def test_whole_volume_patch_is_identity(random_label):
    """Test that a patch covering the volume equals it"""
    patch = extract_patch(random_label, PatchRef(origin=(0, 0, 0), shape=random_label.dims))

    assert isinstance(patch, LabelVolume)
    np.testing.assert_array_equal(patch.data, random_label.data)


def test_slices_restack_to_original(random_gray):
    """Test slice2d / stack_slices"""
    slices = [slice2d(random_gray, z) for z in range(random_gray.dims[0])]

    assert slices[0].dims == (1, 10, 8)
    np.testing.assert_array_equal(stack_slices(slices).data, random_gray.data)


def test_slice_out_of_range(random_gray):
    """Test slice index bounds"""
    with pytest.raises(PatchBoundsError):
        slice2d(random_gray, 12)


def test_stack_slices_rejects_mismatched_slices(random_gray, random_label):
    """Test in-plane dims / kind consistency"""
    with pytest.raises(DimensionMismatchError):
        stack_slices([slice2d(random_gray, 0), slice2d(random_label, 0)])


def test_binarize_is_inclusive():
    """Test the >= comparison"""
    v = Volume(data=np.array([[[0.1, 0.5, 0.9]]]), voxel_size_um=1.0)

    np.testing.assert_array_equal(binarize(v, 0.5).data, [[[0, 1, 1]]])
