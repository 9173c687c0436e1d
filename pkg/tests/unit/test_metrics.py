"""
Unit tests for segmentation metrics

Tests confusion tallies, Dice, report lines and error-map rendering.
"""
import numpy as np
import pytest

from src.fiberseg.errors import DimensionMismatchError, PatchBoundsError, ReportFormatError
from src.fiberseg.metrics import (
    FN_COLOR,
    FP_COLOR,
    TN_COLOR,
    TP_COLOR,
    ConfusionCounts,
    DiceReport,
    confusion,
    dice,
    error_map_rgb,
    evaluate,
    read_ppm,
    render_error_map,
)
from src.fiberseg.volgrid import LabelVolume

pytestmark = pytest.mark.unit


def _labels(arr):
    return LabelVolume(data=arr, voxel_size_um=1.0)


def _naive_counts(gt, pred):
    tp = tn = fp = fn = 0
    nz, ny, nx = gt.shape
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                g, p = int(gt[z, y, x]), int(pred[z, y, x])
                if g and p:
                    tp += 1
                elif g:
                    fn += 1
                elif p:
                    fp += 1
                else:
                    tn += 1
    return tp, tn, fp, fn


# ============================================================================
# CONFUSION AND DICE
# ============================================================================

def test_confusion_matches_loop_tally():
    """Test tallies against a triple loop on random 16^3 pairs"""
    rng = np.random.default_rng(5)
    for _ in range(100):
        gt = rng.random((16, 16, 16)) < rng.random()
        pred = rng.random((16, 16, 16)) < rng.random()
        counts = confusion(_labels(gt), _labels(pred))
        tp, tn, fp, fn = _naive_counts(gt, pred)

        assert (counts.tp, counts.tn, counts.fp, counts.fn) == (tp, tn, fp, fn)
        denom = 2 * tp + fp + fn
        assert dice(counts) == (2.0 * tp / denom if denom else 1.0)


def test_identical_and_complementary_masks(random_label):
    """Test pred = gt and pred = 1 - gt"""
    same = confusion(random_label, random_label)
    assert same.fp == same.fn == 0
    assert dice(same) == 1.0

    inverse = confusion(random_label, _labels(1 - random_label.data))
    assert inverse.tp == inverse.tn == 0
    assert dice(inverse) == 0.0


def test_counts_sum_to_voxel_count(random_label, rng):
    """Test tp + tn + fp + fn invariant"""
    pred = _labels(rng.random(random_label.dims) < 0.5)

    assert confusion(random_label, pred).total == random_label.size


def test_dice_formula():
    """Test 2tp / (2tp + fp + fn)"""
    assert dice(ConfusionCounts(tp=2, tn=0, fp=2, fn=0)) == pytest.approx(4 / 6)


def test_dice_of_two_empty_masks_is_one():
    """Test the empty-empty convention"""
    empty = _labels(np.zeros((4, 4, 4), dtype=bool))

    assert dice(confusion(empty, empty)) == 1.0


def test_dice_is_symmetric(rng):
    """Test symmetry under argument exchange"""
    a = _labels(rng.random((6, 6, 6)) < 0.4)
    b = _labels(rng.random((6, 6, 6)) < 0.2)

    assert dice(confusion(a, b)) == dice(confusion(b, a))


def test_confusion_rejects_dim_mismatch():
    """Test dims check"""
    with pytest.raises(DimensionMismatchError):
        confusion(_labels(np.zeros((2, 2, 2))), _labels(np.zeros((2, 2, 3))))


def test_counts_invariant_under_voxel_permutation(rng):
    """Test that a shared permutation leaves the tallies unchanged"""
    gt = rng.random((5, 6, 7)) < 0.3
    pred = rng.random((5, 6, 7)) < 0.3
    perm = rng.permutation(gt.size)
    gt_p = gt.ravel()[perm].reshape(gt.shape)
    pred_p = pred.ravel()[perm].reshape(gt.shape)

    assert confusion(_labels(gt), _labels(pred)) == confusion(_labels(gt_p), _labels(pred_p))


# ============================================================================
# REPORTS
# ============================================================================

def test_report_line_format():
    """Test the DiceReport text line"""
    report = DiceReport(
        method="otsu",
        volume="synthetic_lr",
        dice=2 / 3,
        counts=ConfusionCounts(tp=2, tn=10, fp=2, fn=0),
    )

    assert report.to_line() == "method=otsu volume=synthetic_lr dice=0.666667 tp=2 tn=10 fp=2 fn=0"


def test_report_line_parses_back():
    """Test DiceReport.from_line"""
    line = "method=rf volume=eval dice=0.536000 tp=5 tn=90 fp=3 fn=2"
    report = DiceReport.from_line(line)

    assert report.method == "rf"
    assert report.counts.tn == 90
    assert report.to_line() == line


@pytest.mark.parametrize("line", [
    "threshold=0.5",
    "method=otsu volume=v dice=abc tp=1 tn=1 fp=1 fn=1",
    "method=otsu volume=v dice=1.5 tp=1 tn=1 fp=1 fn=1",
    "method=otsu volume=v dice=nan tp=1 tn=1 fp=1 fn=1",
])
def test_report_from_malformed_line(line):
    """Test parse failures raise the toolkit error"""
    with pytest.raises(ReportFormatError):
        DiceReport.from_line(line)


def test_evaluate_sanitizes_labels(random_label):
    """Test that whitespace in labels cannot break the line format"""
    report = evaluate(random_label, random_label, method="shallow 2d", volume="eval set")

    assert report.method == "shallow_2d"
    assert report.dice == 1.0
    assert DiceReport.from_line(report.to_line()) == report


# ============================================================================
# ERROR MAPS
# ============================================================================

def test_error_map_of_identical_masks_is_black_and_white(random_label):
    """Test that a perfect slice has no green / orange pixels"""
    rgb = error_map_rgb(random_label, random_label, 3)
    colors = {tuple(c) for c in rgb.reshape(-1, 3)}

    assert colors <= {TP_COLOR, TN_COLOR}


def test_error_map_all_false_positive():
    """Test pred = 1, gt = 0 gives an all-green slice"""
    gt = _labels(np.zeros((2, 3, 4), dtype=bool))
    pred = _labels(np.ones((2, 3, 4), dtype=bool))
    rgb = error_map_rgb(gt, pred, 1)

    assert np.all(rgb == np.array(FP_COLOR, dtype=np.uint8))


def test_error_map_colors_match_slice_tallies(tmp_path, rng):
    """Test per-color pixel counts against the confusion counts of the slice"""
    gt = _labels(rng.random((4, 9, 11)) < 0.4)
    pred = _labels(rng.random((4, 9, 11)) < 0.4)
    path = render_error_map(gt, pred, 2, tmp_path / "map.ppm")
    pixels = read_ppm(path).reshape(-1, 3)

    counts = confusion(
        LabelVolume(data=gt.data[2:3], voxel_size_um=1.0),
        LabelVolume(data=pred.data[2:3], voxel_size_um=1.0),
    )
    tally = {color: int(np.all(pixels == color, axis=1).sum()) for color in (TP_COLOR, TN_COLOR, FP_COLOR, FN_COLOR)}
    assert tally == {TP_COLOR: counts.tp, TN_COLOR: counts.tn, FP_COLOR: counts.fp, FN_COLOR: counts.fn}
    assert path.read_bytes().startswith(b"P6\n11 9\n255\n")


def test_error_map_bad_slice(random_label):
    """Test slice bounds"""
    with pytest.raises(PatchBoundsError):
        error_map_rgb(random_label, random_label, -1)
