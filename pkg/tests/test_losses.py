import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from maskmine.errors import DomainError, NumericError, ShapeError
from maskmine.losses import (class_weight_map, combined_lesion_loss, component_distances, distance_weight_map,
                             multiclass_dice, multiclass_dice_from_logits, multiclass_pwce, pwce_loss,
                             ratio_loss, smooth_dice)

D = torch.float64


def t(x, dtype=D):
    return torch.as_tensor(np.asarray(x), dtype=dtype)


# ---------------------------------------------------------------------------
# pwce
# ---------------------------------------------------------------------------

def test_pwce_confident_correct_is_near_zero():
    target = torch.tensor([[[0, 1], [1, 0]]])
    logits = torch.zeros(1, 2, 2, 2, dtype=D)
    logits[:, 1] = 20.0 * (2 * target - 1)
    assert pwce_loss(logits, target, torch.ones(1, 2, 2, dtype=D)).item() < 1e-3


def test_pwce_uniform_logits_is_ln2():
    target = torch.randint(0, 2, (2, 3, 3))
    val = pwce_loss(torch.zeros(2, 2, 3, 3, dtype=D), target, torch.ones(2, 3, 3, dtype=D))
    assert val.item() == pytest.approx(math.log(2), abs=1e-12)


def test_pwce_hand_weighted_2x2():
    logits = t([[[[1.0, 0.0], [2.0, -1.0]], [[0.0, 0.0], [0.0, 1.0]]]])
    target = torch.tensor([[[0, 1], [1, 1]]])
    w = t([[[2.0, 1.0], [2.0, 1.0]]])
    nll = []
    for (i, j) in [(0, 0), (0, 1), (1, 0), (1, 1)]:
        z0, z1 = logits[0, 0, i, j].item(), logits[0, 1, i, j].item()
        zt = z1 if target[0, i, j] else z0
        nll.append(-(zt - math.log(math.exp(z0) + math.exp(z1))))
    expected = (2 * nll[0] + nll[1] + 2 * nll[2] + nll[3]) / 6
    assert pwce_loss(logits, target, w).item() == pytest.approx(expected, abs=1e-12)


def test_pwce_errors():
    with pytest.raises(NumericError):
        pwce_loss(torch.tensor([[[float("nan")], [0.0]]]), torch.zeros(1, 1, dtype=torch.long))
    with pytest.raises(ShapeError):
        pwce_loss(torch.zeros(1, 2, 3, 3), torch.zeros(1, 3, 4, dtype=torch.long))


# ---------------------------------------------------------------------------
# smooth dice / combined
# ---------------------------------------------------------------------------

def test_smooth_dice_examples():
    g = t([1, 0, 1, 1])
    assert smooth_dice(g, g).item() == pytest.approx(1.0)
    assert smooth_dice(t([0, 0, 0]), t([0, 0, 0])).item() == 1.0
    assert smooth_dice(t([1, 1, 0, 0]), t([1, 0, 1, 0]), 1.0).item() == pytest.approx(0.6, abs=1e-12)


def test_combined_arithmetic():
    assert ratio_loss(0.7, 0.7) == pytest.approx(0.7 / (0.7 + 1e-5))
    assert ratio_loss(0.7, 0.7) == pytest.approx(0.999986, abs=1e-6)


def test_combined_perfect_prediction_goes_to_zero():
    target = torch.tensor([[[0, 1], [1, 0]]])
    logits = torch.zeros(1, 2, 2, 2, dtype=D)
    logits[:, 1] = 40.0 * (2 * target - 1)
    assert combined_lesion_loss(logits, target).item() < 1e-12


def test_combined_is_composition():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(1, 2, 2, 2, generator=g, dtype=D)
    target = torch.tensor([[[0, 1], [1, 1]]])
    w = torch.rand(1, 2, 2, generator=g, dtype=D) + 0.5
    ce = pwce_loss(logits, target, w)
    dice = smooth_dice(torch.softmax(logits, 1)[:, 1], target)
    assert combined_lesion_loss(logits, target, w).item() == pytest.approx((ce / (dice + 1e-5)).item(), rel=1e-12)


# ---------------------------------------------------------------------------
# mining losses
# ---------------------------------------------------------------------------

def test_multiclass_pwce_examples():
    err = torch.tensor([[[0, 1], [2, 3]]])
    logits = 30.0 * torch.nn.functional.one_hot(err, 4).permute(0, 3, 1, 2).to(D)
    assert multiclass_pwce(logits, err).item() < 1e-10
    assert multiclass_pwce(torch.zeros(1, 4, 2, 2, dtype=D), err).item() == pytest.approx(math.log(4))
    logits = t(np.arange(16, dtype=float).reshape(1, 4, 2, 2) / 4)
    expected = 0.0
    for k, (i, j) in enumerate([(0, 0), (0, 1), (1, 0), (1, 1)]):
        z = logits[0, :, i, j].numpy()
        expected += -(z[err[0, i, j]] - math.log(np.exp(z).sum())) / 4
    assert multiclass_pwce(logits, err).item() == pytest.approx(expected, abs=1e-12)


def test_multiclass_pwce_errors():
    with pytest.raises(DomainError):
        multiclass_pwce(torch.zeros(1, 4, 1, 1), torch.tensor([[[5]]]))
    with pytest.raises(ShapeError):
        multiclass_pwce(torch.zeros(1, 3, 1, 1), torch.tensor([[[0]]]))


def test_multiclass_pwce_reduces_to_binary_ce():
    g = torch.Generator().manual_seed(1)
    z = torch.randn(1, 2, 4, 4, generator=g, dtype=D)
    y = torch.randint(0, 2, (1, 4, 4), generator=g)
    four = torch.full((1, 4, 4, 4), -1e4, dtype=D)
    four[:, 0], four[:, 3] = z[:, 0], z[:, 1]
    err = y * 3
    bce = torch.nn.functional.cross_entropy(z, y)
    assert abs(multiclass_pwce(four, err).item() - bce.item()) < 1e-6


def test_multiclass_dice_examples():
    rng = np.random.default_rng(0)
    tg = t(rng.integers(0, 2, (1, 4, 3, 3)))
    assert multiclass_dice(tg, tg).item() == pytest.approx(0.0, abs=1e-12)
    n = 9
    p = tg.clone()
    p[:, 2] = 0.0
    tg2 = tg.clone()
    tg2[:, 2] = 1.0
    assert multiclass_dice(p, tg2).item() == pytest.approx((1 - 1 / (n + 1)) / 4, abs=1e-12)
    probs = t(rng.random((1, 4, 3, 3)))
    parts = [1 - smooth_dice(probs[:, c], tg[:, c]) for c in range(4)]
    assert multiclass_dice(probs, tg).item() == pytest.approx(sum(p.item() for p in parts) / 4, abs=1e-12)
    with pytest.raises(ShapeError):
        multiclass_dice(torch.zeros(1, 3, 2, 2), torch.zeros(1, 3, 2, 2))


# ---------------------------------------------------------------------------
# gradient checks (float64, central differences)
# ---------------------------------------------------------------------------

def _fd_grad(f, x, h=1e-6):
    g = torch.zeros_like(x)
    flat, gf = x.view(-1), g.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = f(x).item()
        flat[i] = old - h
        down = f(x).item()
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def _check_grad(f, x, rtol=1e-4):
    x = x.clone().requires_grad_(True)
    (ana,) = torch.autograd.grad(f(x), x)
    with torch.no_grad():
        num = _fd_grad(f, x.detach().clone())
    err = (ana - num).abs().max().item()
    scale = max(num.abs().max().item(), 1e-8)
    assert err <= rtol * scale, f"gradient mismatch {err:.3e} vs scale {scale:.3e}"


def _loss_cases():
    def pwce(g):
        y = torch.randint(0, 2, (1, 4, 4), generator=g)
        w = torch.rand(1, 4, 4, generator=g, dtype=D) + 0.1
        return lambda z: pwce_loss(z, y, w), (1, 2, 4, 4)

    def dice(g):
        y = torch.randint(0, 2, (4, 4), generator=g)
        return lambda z: 1 - smooth_dice(torch.sigmoid(z), y), (4, 4)

    def combined(g):
        y = torch.randint(0, 2, (1, 4, 4), generator=g)
        w = torch.rand(1, 4, 4, generator=g, dtype=D) + 0.1
        return lambda z: combined_lesion_loss(z, y, w, 1e-5), (1, 2, 4, 4)

    def mc_pwce(g):
        e = torch.randint(0, 4, (1, 4, 4), generator=g)
        return lambda z: multiclass_pwce(z, e), (1, 4, 4, 4)

    def mc_dice(g):
        tg = torch.randint(0, 2, (1, 4, 4, 4), generator=g).to(D)
        return lambda z: multiclass_dice_from_logits(z, tg), (1, 4, 4, 4)

    return {"pwce": pwce, "smooth_dice": dice, "combined": combined, "multiclass_pwce": mc_pwce,
            "multiclass_dice": mc_dice}


@pytest.mark.parametrize("name", list(_loss_cases()))
def test_gradients_match_finite_differences(name):
    make = _loss_cases()[name]
    for trial in range(20):
        g = torch.Generator().manual_seed(trial)
        f, shape = make(g)
        _check_grad(f, torch.randn(shape, generator=g, dtype=D))


# ---------------------------------------------------------------------------
# weight maps
# ---------------------------------------------------------------------------

def test_class_weights_uniform_frequency():
    m = np.zeros((4, 4), np.uint8)
    m[:2] = 1
    np.testing.assert_allclose(class_weight_map(m), 2.0)


def test_class_weights_clamped():
    m = np.zeros(1000, np.uint8)
    m[0] = 1
    w = class_weight_map(m)
    assert w[0] == 10.0 and w[1] == pytest.approx(1000 / 999)


def test_single_blob_far_pixels_have_class_weight():
    m = np.zeros((1, 40, 40), np.uint8)
    m[0, 2:6, 2:6] = 1
    w = distance_weight_map(m)
    wc = class_weight_map(m)
    assert abs(w[0, 35, 35] - wc[0, 35, 35]) < 1e-6


def test_empty_mask_is_pure_class_weight():
    w = distance_weight_map(np.zeros((2, 5, 5), np.uint8))
    np.testing.assert_allclose(w, 1.0)


def _brute_two_nearest(mask):
    """Euclidean distance to the nearest and second-nearest component, by enumeration."""
    from scipy import ndimage

    lab, n = ndimage.label(mask)
    d1 = np.full(mask.shape, 1e6)
    d2 = np.full(mask.shape, 1e6)
    pts = {i: np.argwhere(lab == i) for i in range(1, n + 1)}
    for idx in np.ndindex(mask.shape):
        ds = sorted(np.sqrt(((p - np.array(idx)) ** 2).sum(1)).min() for p in pts.values())
        if ds:
            d1[idx] = ds[0]
        if len(ds) > 1:
            d2[idx] = ds[1]
    return d1, d2


def test_boundary_term_between_two_components():
    m = np.zeros((1, 5, 7), np.uint8)
    m[0, :, 1] = 1
    m[0, :, 5] = 1
    d1, d2 = component_distances(m)
    b1, b2 = _brute_two_nearest(m)
    np.testing.assert_allclose(d1, b1)
    np.testing.assert_allclose(d2, b2)
    w = distance_weight_map(m, class_weights=(0.0, 0.0))
    # pixels at column 3 sit at distance 2 from both lines; column 2 at 1 and 3
    assert w[0, 2, 3] == pytest.approx(10 * math.exp(-16 / 50), rel=1e-6)
    m = np.zeros((1, 3, 5), np.uint8)
    m[0, :, 1] = 1
    m[0, :, 3] = 1
    w = distance_weight_map(m, class_weights=(0.0, 0.0))
    assert w[0, 1, 2] == pytest.approx(10 * math.exp(-4 / 50), abs=1e-4)
    assert w[0, 1, 2] == pytest.approx(9.2312, abs=1e-4)


def test_boundary_term_peaks_on_the_gap():
    m = np.zeros((1, 9, 15), np.uint8)
    m[0, 3:6, 2:4] = 1
    m[0, 3:6, 10:12] = 1
    w = distance_weight_map(m, class_weights=(0.0, 0.0))
    bg = ~m.astype(bool)
    border = np.where(bg, w, -1)
    top = border.max()
    # the maximum lies on background pixels between the blobs (rows 3..5, columns 4..9)
    locs = np.argwhere(border == top)
    assert all(3 <= r <= 5 and 4 <= c <= 9 for _, r, c in locs)
    b1, b2 = _brute_two_nearest(m)
    expected = 10 * np.exp(-((b1 + b2) ** 2) / 50)
    np.testing.assert_allclose(w, expected, rtol=1e-5, atol=1e-6)


# ---------------------------------------------------------------------------
# properties
# ---------------------------------------------------------------------------

bin4 = arrays(np.int64, (4, 4), elements=st.integers(0, 1))


@settings(max_examples=100, deadline=None)
@given(bin4, bin4)
def test_smooth_dice_symmetric_and_bounded(p, g):
    a = smooth_dice(t(p), t(g)).item()
    b = smooth_dice(t(g), t(p)).item()
    assert a == pytest.approx(b, abs=1e-15)
    assert 0 < a <= 1


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100.0))
def test_pwce_scale_invariant_in_weights(seed, scale):
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(1, 2, 4, 4, generator=g, dtype=D)
    y = torch.randint(0, 2, (1, 4, 4), generator=g)
    w = torch.rand(1, 4, 4, generator=g, dtype=D) + 0.1
    assert pwce_loss(z, y, w * scale).item() == pytest.approx(pwce_loss(z, y, w).item(), rel=1e-10)


@settings(max_examples=30, deadline=None)
@given(arrays(np.uint8, (1, 10, 10), elements=st.integers(0, 1)))
def test_weight_map_positive(mask):
    w = distance_weight_map(mask)
    assert (w > 0).all() and w.dtype == np.float32
