import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fsaf.geometry import Box, PyramidSpec, encode_offsets, project_box, region_pixels, scaled_region
from fsaf.losses import (combined_loss, focal_loss, focal_terms, instance_level_losses, iou_loss,
                         iou_terms, smooth_l1, total_classification_loss, total_regression_loss)
from fsaf.targets import IGNORE, NEGATIVE, POSITIVE, ClassTargetMap, RegressionTargetMap

LN2 = math.log(2)


def sigmoid(x):
    return 1 / (1 + np.exp(-x))


def test_focal_examples():
    assert focal_loss(0.5, True).value == pytest.approx(0.25 * 0.25 * LN2, rel=1e-12)
    assert focal_loss(0.5, False).value == pytest.approx(0.75 * 0.25 * LN2, rel=1e-12)
    assert focal_loss(0.5, True).value == pytest.approx(0.043322, abs=1e-6)
    assert focal_loss(0.5, False).value == pytest.approx(0.129966, abs=1e-6)
    assert focal_loss(1 - 1e-9, True).value < 1e-12


def test_focal_clamps_extremes():
    v = focal_loss(np.array([0.0, 1.0]), np.array([True, False]))
    assert np.isfinite(v.value) and np.all(np.isfinite(v.gradient))


def _fd(f, x, h=1e-5):
    return (f(x + h) - f(x - h)) / (2 * h)


def _rel(a, b, floor=1e-8):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


@pytest.mark.parametrize("positive", [True, False])
def test_focal_gradient_matches_finite_differences(positive):
    rng = np.random.default_rng(0)
    x = rng.uniform(-6, 6, 500)
    _, g = focal_terms(sigmoid(x), positive)
    num = _fd(lambda z: focal_terms(sigmoid(z), positive)[0], x)
    assert _rel(g, num).max() < 1e-4


def test_focal_positive_monotone():
    p = np.linspace(0.01, 0.99, 200)
    loss, _ = focal_terms(p, True)
    assert np.all(np.diff(loss) < 0)


def test_iou_examples():
    t = np.array([1.0, 2.0, 3.0, 1.5])
    assert iou_loss(t, t).value == pytest.approx(0.0, abs=1e-8)
    assert iou_loss(t / 2, t).value == pytest.approx(math.log(4), abs=1e-8)
    assert iou_loss(t / 2, t).value == pytest.approx(1.386294, abs=1e-6)
    tiny = iou_loss(np.full(4, 1e-6), np.full(4, 10.0)).value
    assert np.isfinite(tiny) and tiny > 20


def test_iou_degenerate_zero_gradient():
    loss, grad = iou_terms(np.zeros(4), np.zeros(4))
    assert loss == pytest.approx(-math.log(1e-9))
    assert np.all(grad == 0)


def test_iou_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    pred = rng.uniform(0.05, 3, (400, 4))
    target = rng.uniform(0.05, 3, (400, 4))
    _, g = iou_terms(pred, target)
    worst = 0.0
    for c in range(4):
        e = np.zeros(4)
        e[c] = 1e-5
        num = (iou_terms(pred + e, target)[0] - iou_terms(pred - e, target)[0]) / 2e-5
        worst = max(worst, _rel(g[:, c], num).max())
    assert worst < 1e-4


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.01, 10), min_size=4, max_size=4), st.floats(0.05, 0.95))
def test_iou_loss_decreases_with_iou(target, shrink):
    target = np.array(target)
    # pred nested inside target: IoU = shrink^2, strictly increasing in shrink
    a = iou_loss(target * shrink, target).value
    b = iou_loss(target * min(shrink + 0.04, 1.0), target).value
    assert a > b >= -1e-9


def test_smooth_l1_values_and_gradient():
    assert smooth_l1(0.5).value == pytest.approx(0.125)
    assert smooth_l1(np.full(4, 0.5)).value == pytest.approx(0.5)
    assert smooth_l1(2.0).value == pytest.approx(1.5)
    x = np.random.default_rng(2).uniform(-3, 3, 300)
    x = x[np.abs(np.abs(x) - 1) > 1e-3]
    num = (smooth_l1_terms_value(x + 1e-5) - smooth_l1_terms_value(x - 1e-5)) / 2e-5
    assert _rel(smooth_l1(x).gradient, num).max() < 1e-4


def smooth_l1_terms_value(x):
    from fsaf.losses import smooth_l1_terms
    return smooth_l1_terms(x)[0]


def test_total_classification_examples():
    lab = np.full((1, 2, 2), IGNORE, dtype=np.int8)
    lab[0, 0, 0] = POSITIVE
    single = total_classification_loss([ClassTargetMap(3, lab)], [np.full((1, 2, 2), 0.5)])
    assert single.value == pytest.approx(0.25 * 0.25 * LN2)
    lab = np.full((1, 2, 2), NEGATIVE, dtype=np.int8)
    lab[0, 1, 1] = POSITIVE
    mixed = total_classification_loss([ClassTargetMap(3, lab)], [np.full((1, 2, 2), 0.5)])
    assert mixed.value == pytest.approx(0.25 * 0.25 * LN2 + 3 * 0.75 * 0.25 * LN2)
    # 0.043322 + 3 * 0.129966 from the rounded per-cell values; exact is 0.4332170
    assert mixed.value == pytest.approx(0.433220, abs=5e-6)


def test_total_classification_perfect_and_empty():
    lab = np.full((2, 3, 3), NEGATIVE, dtype=np.int8)
    lab[1, 1, 1] = POSITIVE
    p = np.where(lab == POSITIVE, 1.0, 0.0)
    assert total_classification_loss([ClassTargetMap(3, lab)], [p]).value < 1e-6
    empty = np.zeros((2, 3, 3), dtype=np.int8)
    res = total_classification_loss([ClassTargetMap(3, empty)], [np.full((2, 3, 3), 0.3)])
    assert res.value == 0.0 and np.all(res.gradient[0] == 0)


def test_ignore_cells_contribute_nothing():
    rng = np.random.default_rng(3)
    lab = rng.choice([NEGATIVE, POSITIVE, IGNORE], size=(2, 5, 5)).astype(np.int8)
    lab[0, 0, 0] = POSITIVE
    p = rng.uniform(0.01, 0.99, (2, 5, 5))
    base = total_classification_loss([ClassTargetMap(3, lab)], [p])
    p2 = np.where(lab == IGNORE, rng.uniform(0.01, 0.99, p.shape), p)
    moved = total_classification_loss([ClassTargetMap(3, lab)], [p2])
    assert moved.value == base.value
    np.testing.assert_array_equal(moved.gradient[0], base.gradient[0])
    assert np.all(base.gradient[0][lab == IGNORE] == 0)


def test_total_regression_examples():
    t = np.array([1.0, 2.0, 3.0, 1.5])
    offsets = np.zeros((4, 2, 2))
    mask = np.zeros((2, 2), dtype=bool)
    offsets[:, 0, 0] = t
    mask[0, 0] = True
    m = RegressionTargetMap(3, offsets, mask)
    assert total_regression_loss([m], [offsets.copy()]).value == pytest.approx(0, abs=1e-8)
    assert total_regression_loss([m], [offsets / 2]).value == pytest.approx(math.log(4))
    offsets[:, 1, 1] = t
    mask[1, 1] = True
    pred = offsets.copy()
    pred[:, 1, 1] /= 2
    m2 = RegressionTargetMap(3, offsets, mask)
    assert total_regression_loss([m2], [pred]).value == pytest.approx(math.log(4) / 2)
    none = RegressionTargetMap(3, np.zeros((4, 2, 2)), np.zeros((2, 2), dtype=bool))
    assert total_regression_loss([none], [pred]).value == 0.0


def test_combined_loss():
    assert combined_loss(1.0, 0.4, 0.6, 0.5) == pytest.approx(1.5)
    assert combined_loss(2.0, 0.4, 0.6, 0.0) == 2.0
    assert combined_loss(0.0, 0.4, 0.6, 1.0) == pytest.approx(1.0)


def _maps(rng, pyr, image, k):
    probs, offs = [], []
    for level in pyr.levels:
        h, w = pyr.map_shape(level, *image)
        probs.append(rng.uniform(0.01, 0.99, (k, h, w)))
        offs.append(rng.uniform(0.0, 3.0, (4, h, w)))
    return probs, offs


def test_instance_level_losses_brute_force():
    rng = np.random.default_rng(4)
    pyr = PyramidSpec(3, 5)
    for _ in range(20):
        probs, offs = _maps(rng, pyr, (128, 128), 2)
        box = Box(int(rng.integers(2)), rng.uniform(10, 118), rng.uniform(10, 118),
                  rng.uniform(6, 100), rng.uniform(6, 100))
        table = instance_level_losses(box, probs, offs, pyr)
        assert sorted(table.entries) == [3, 4, 5]
        for n, level in enumerate(pyr.levels):
            pb = project_box(box, level)
            rows, cols = region_pixels(scaled_region(pb, 0.2), probs[n].shape[1:])
            fl, il = [], []
            for i in range(rows.start, rows.stop):
                for j in range(cols.start, cols.stop):
                    p = probs[n][box.class_id, i, j]
                    fl.append(-0.25 * (1 - p) ** 2 * math.log(p))
                    tgt = [max(v, 0.0) for v in encode_offsets(pb, i, j, 4.0)]
                    prd = offs[n][:, i, j]
                    inter = ((min(prd[0], tgt[0]) + min(prd[2], tgt[2]))
                             * (min(prd[1], tgt[1]) + min(prd[3], tgt[3])))
                    union = ((prd[0] + prd[2]) * (prd[1] + prd[3])
                             + (tgt[0] + tgt[2]) * (tgt[1] + tgt[3]) - inter)
                    il.append(-math.log(inter / union + 1e-9))
            assert table.entries[level][0] == pytest.approx(np.mean(fl), rel=1e-10)
            assert table.entries[level][1] == pytest.approx(np.mean(il), rel=1e-10)


def test_instance_level_losses_perfect_level_wins():
    pyr = PyramidSpec(3, 5)
    rng = np.random.default_rng(5)
    probs, offs = _maps(rng, pyr, (128, 128), 1)
    box = Box(0, 64, 64, 40, 40)
    # make level 4 perfect on the effective region
    pb = project_box(box, 4)
    rows, cols = region_pixels(scaled_region(pb, 0.2), probs[1].shape[1:])
    probs[1][0, rows, cols] = 1 - 1e-9
    for i in range(rows.start, rows.stop):
        for j in range(cols.start, cols.stop):
            offs[1][:, i, j] = encode_offsets(pb, i, j, 4.0)
    sums = instance_level_losses(box, probs, offs, pyr).sums()
    assert min(sums, key=sums.get) == 4


def test_instance_level_single_pixel_region():
    pyr = PyramidSpec(5, 5)
    box = Box(0, 64.0, 64.0, 8.0, 8.0)  # 0.25 x 0.25 projected -> single pixel (2, 2)
    probs = [np.full((1, 4, 4), 0.3)]
    offs = [np.full((4, 4, 4), 0.05)]
    table = instance_level_losses(box, probs, offs, pyr)
    fl = focal_loss(0.3, True).value
    tgt = np.maximum(list(encode_offsets(project_box(box, 5), 2, 2, 4.0)), 0)
    il = iou_loss(np.full(4, 0.05), tgt).value
    assert table.entries[5] == pytest.approx((fl, il))
