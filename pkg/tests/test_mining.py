import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from conftest import brute_collapse, brute_counts, brute_error_mask
from maskmine.errors import DomainError, FormatError, ParameterError, ShapeError
from maskmine.mining import (ErrorClass, build_mining_targets, class_counts, collapse_to_binary,
                             export_error_mask, mine_error_mask, one_hot, tp_channel_mask)
from maskmine.voldata import load_label

masks = arrays(np.uint8, array_shapes(min_dims=1, max_dims=3, max_side=8), elements=st.integers(0, 1))


@st.composite
def mask_pairs(draw):
    a = draw(masks)
    b = draw(arrays(np.uint8, a.shape, elements=st.integers(0, 1)))
    return a, b


def test_class_order():
    assert [c.name for c in ErrorClass] == ["TN", "FP", "FN", "TP"]
    assert [int(c) for c in ErrorClass] == [0, 1, 2, 3]


def test_crafted_2x2():
    pred = np.array([[0, 1], [0, 1]])
    gt = np.array([[0, 0], [1, 1]])
    np.testing.assert_array_equal(mine_error_mask(pred, gt), [[0, 1], [2, 3]])


def test_perfect_and_complement():
    rng = np.random.default_rng(0)
    gt = rng.integers(0, 2, (5, 6, 7))
    assert set(np.unique(mine_error_mask(gt, gt))) <= {0, 3}
    assert set(np.unique(mine_error_mask(1 - gt, gt))) <= {1, 2}


def test_error_mask_rejects_bad_input():
    with pytest.raises(ShapeError):
        mine_error_mask(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(DomainError):
        mine_error_mask(np.array([0, 2]), np.array([0, 1]))


def test_pwce_targets_are_one_hot():
    rng = np.random.default_rng(1)
    pred, gt = rng.integers(0, 2, (2, 6, 6)), rng.integers(0, 2, (2, 6, 6))
    err = mine_error_mask(pred, gt)
    t = build_mining_targets(err, gt, "pwce").channels
    assert t.shape == (4, 2, 6, 6)
    np.testing.assert_array_equal(t.sum(0), 1)
    counts = class_counts(err)
    assert [int(t[c].sum()) for c in range(4)] == [counts[c.name] for c in ErrorClass]


def test_dice_targets_overlap_on_false_negatives():
    err = np.array([2])
    gt = np.array([1])
    t = build_mining_targets(err, gt, "dice").channels
    assert t[ErrorClass.FN, 0] == 1 and t[ErrorClass.TP, 0] == 1


def test_dice_targets_match_pwce_for_perfect_predictor():
    gt = np.random.default_rng(2).integers(0, 2, (4, 4, 4))
    err = mine_error_mask(gt, gt)
    np.testing.assert_array_equal(build_mining_targets(err, gt, "dice").channels,
                                  build_mining_targets(err, gt, "pwce").channels)


def test_unknown_variant():
    with pytest.raises(ParameterError):
        build_mining_targets(np.zeros(3, np.uint8), np.zeros(3), "focal")


def test_one_hot_rejects_out_of_range():
    with pytest.raises(DomainError):
        one_hot(np.array([0, 4]))


@pytest.mark.parametrize("cls,expected", [(3, 1), (2, 1), (1, 0), (0, 0)])
def test_collapse_one_hot(cls, expected):
    logits = np.zeros((4, 1))
    logits[cls] = 5.0
    assert collapse_to_binary(logits)[0] == expected


def test_collapse_tie_goes_to_lowest_class():
    assert collapse_to_binary(np.zeros((4, 3, 3))).max() == 0
    logits = np.array([0.0, 0.0, 1.0, 1.0])[:, None]
    assert collapse_to_binary(logits)[0] == 1
    logits = np.array([1.0, 0.0, 1.0, 0.0])[:, None]
    assert collapse_to_binary(logits)[0] == 0


def test_collapse_channel_check():
    with pytest.raises(ShapeError):
        collapse_to_binary(np.zeros((3, 2, 2)))


def test_tp_channel_threshold():
    p = np.zeros((4, 2, 2))
    p[3] = 0.9
    np.testing.assert_array_equal(tp_channel_mask(p), 1)
    p[3] = 0.5
    np.testing.assert_array_equal(tp_channel_mask(p), 1)
    p[3] = np.nextafter(0.5, 0)
    np.testing.assert_array_equal(tp_channel_mask(p), 0)
    for bad in (0.0, 1.0, -0.2):
        with pytest.raises(ParameterError):
            tp_channel_mask(p, bad)
    with pytest.raises(ShapeError):
        tp_channel_mask(np.zeros((2, 3)))


def test_tp_channel_random_matches_elementwise():
    rng = np.random.default_rng(4)
    for _ in range(20):
        p = rng.random((4, 3, 5, 5))
        out = tp_channel_mask(p, 0.37)
        for idx in np.ndindex(out.shape):
            assert out[idx] == (1 if p[(3,) + idx] >= 0.37 else 0)


def test_error_mask_export_round_trip(tmp_path):
    err = np.random.default_rng(5).integers(0, 4, (3, 4, 5)).astype(np.uint8)
    p = export_error_mask(err, tmp_path / "err.nii.gz", (2.0, 1.0, 1.0))
    import nibabel as nib

    # stored x-fastest on disk (NIfTI convention), so the file holds the transpose
    np.testing.assert_array_equal(np.asarray(nib.load(str(p)).dataobj).transpose(2, 1, 0), err)
    with pytest.raises(FormatError):
        load_label(p)  # values 2 and 3 are not binary


# ---------------------------------------------------------------------------
# properties
# ---------------------------------------------------------------------------

@settings(max_examples=200, deadline=None)
@given(mask_pairs())
def test_reconstruction_identity(pair):
    pred, gt = pair
    err = mine_error_mask(pred, gt)
    np.testing.assert_array_equal(collapse_to_binary(one_hot(err).astype(float)), gt)


@settings(max_examples=200, deadline=None)
@given(mask_pairs())
def test_prediction_recoverable(pair):
    pred, gt = pair
    err = mine_error_mask(pred, gt)
    np.testing.assert_array_equal(np.isin(err, (ErrorClass.FP, ErrorClass.TP)), pred.astype(bool))


@settings(max_examples=200, deadline=None)
@given(mask_pairs())
def test_counts_match_brute_force(pair):
    pred, gt = pair
    err = mine_error_mask(pred, gt)
    np.testing.assert_array_equal(err, brute_error_mask(pred, gt))
    assert class_counts(err) == brute_counts(pred, gt)
    assert sum(class_counts(err).values()) == pred.size


@settings(max_examples=200, deadline=None)
@given(mask_pairs())
def test_dice_targets_tp_channel_is_fn_or_tp(pair):
    pred, gt = pair
    err = mine_error_mask(pred, gt)
    dice = build_mining_targets(err, gt, "dice").channels
    hot = one_hot(err)
    np.testing.assert_array_equal(dice[3], hot[2] | hot[3])
    np.testing.assert_array_equal(dice[:3], hot[:3])
    assert (dice[3] >= hot[3]).all()


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.just(4), st.integers(1, 6), st.integers(1, 6)),
              elements=st.sampled_from([-1.0, 0.0, 0.5, 1.0, 2.0])))
def test_collapse_matches_argmax_grouping(logits):
    out = collapse_to_binary(logits)
    np.testing.assert_array_equal(out, brute_collapse(logits))
    np.testing.assert_array_equal(out, np.isin(np.argmax(logits, 0), (2, 3)))
