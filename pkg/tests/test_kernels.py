import numpy as np
import pytest

from fsaf import _fallback, kernels

from .oracles import iou

compiled = kernels.available_backends().get("cython")
needs_ext = pytest.mark.skipif(compiled is None, reason="compiled kernels not built")


def test_backend_selected():
    assert kernels.BACKEND in kernels.available_backends()


def test_fallback_iou_matches_scalar(rng):
    a = np.sort(rng.uniform(0, 20, (30, 4)).reshape(30, 2, 2), axis=1).transpose(0, 2, 1).reshape(30, 4)
    b = np.sort(rng.uniform(0, 20, (20, 4)).reshape(20, 2, 2), axis=1).transpose(0, 2, 1).reshape(20, 4)
    m = _fallback.box_iou_matrix(a, b)
    for i in range(30):
        for j in range(20):
            assert m[i, j] == pytest.approx(iou(a[i], b[j]), abs=1e-12)


def test_fallback_col2im_is_adjoint(rng):
    x = rng.normal(size=(2, 3, 7, 6))
    cols = _fallback.im2col(x, 3, 3, 2, 1)
    y = rng.normal(size=cols.shape)
    lhs = float((cols * y).sum())
    rhs = float((x * _fallback.col2im(y, x.shape, 3, 3, 2, 1)).sum())
    assert lhs == pytest.approx(rhs, rel=1e-12)


@needs_ext
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("k, stride", [(1, 1), (3, 1), (3, 2)])
def test_backends_bit_identical_unfold(rng, dtype, k, stride):
    x = rng.normal(size=(2, 3, 9, 8)).astype(dtype)
    pad = k // 2
    c_py = _fallback.im2col(x, k, k, stride, pad)
    c_cy = compiled.im2col(x, k, k, stride, pad)
    assert c_cy.dtype == c_py.dtype
    np.testing.assert_array_equal(c_cy, c_py)
    g = rng.normal(size=c_py.shape).astype(dtype)
    np.testing.assert_array_equal(compiled.col2im(g, x.shape, k, k, stride, pad),
                                  _fallback.col2im(g, x.shape, k, k, stride, pad))


@needs_ext
def test_backends_agree_on_boxes(rng):
    for _ in range(50):
        n = int(rng.integers(0, 80))
        tl = rng.uniform(0, 50, (n, 2))
        boxes = np.concatenate([tl, tl + rng.uniform(0.5, 30, (n, 2))], 1)
        classes = rng.integers(0, 3, n)
        np.testing.assert_allclose(compiled.box_iou_matrix(boxes, boxes[::-1]),
                                   _fallback.box_iou_matrix(boxes, boxes[::-1]), rtol=1e-12, atol=0)
        np.testing.assert_array_equal(compiled.nms_sorted(boxes, classes, 0.5),
                                      _fallback.nms_sorted(boxes, classes, 0.5))
