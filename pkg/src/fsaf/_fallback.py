"""Pure numpy implementations of the hot kernels.

These mirror ``fsaf._kernels`` function for function and are used when the
compiled extension is unavailable or ``FSAF_PURE_PYTHON=1`` is set.
Boxes are corner arrays ``(top, left, bottom, right)``.
"""
import numpy as np


def box_iou_matrix(a, b):
    """Pairwise IoU between two sets of corner boxes, shape (len(a), len(b))."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    top = np.maximum(a[:, None, 0], b[None, :, 0])
    left = np.maximum(a[:, None, 1], b[None, :, 1])
    bottom = np.minimum(a[:, None, 2], b[None, :, 2])
    right = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(bottom - top, 0, None) * np.clip(right - left, 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def nms_sorted(boxes, classes, thresh):
    """Greedy per-class suppression over boxes already sorted by score.

    Returns a boolean keep mask aligned with ``boxes``.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    classes = np.asarray(classes, dtype=np.int64)
    n = len(boxes)
    keep = np.zeros(n, dtype=bool)
    suppressed = np.zeros(n, dtype=bool)
    for i in range(n):
        if suppressed[i]:
            continue
        keep[i] = True
        rest = np.arange(i + 1, n)
        rest = rest[(~suppressed[rest]) & (classes[rest] == classes[i])]
        if len(rest) == 0:
            continue
        ious = box_iou_matrix(boxes[i:i + 1], boxes[rest])[0]
        suppressed[rest[ious >= thresh]] = True
    return keep


def im2col(x, kh, kw, stride, pad):
    """Unfold an NCHW array into columns of shape (C*kh*kw, N*Ho*Wo)."""
    n, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for di in range(kh):
        for dj in range(kw):
            patch = xp[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride]
            cols[:, di, dj] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * ho * wo)


def col2im(cols, shape, kh, kw, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add columns back to an NCHW array."""
    n, c, h, w = shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for di in range(kh):
        for dj in range(kw):
            xp[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride] += (
                cols[:, di, dj].transpose(1, 0, 2, 3))
    if pad:
        return xp[:, :, pad:pad + h, pad:pad + w]
    return xp
