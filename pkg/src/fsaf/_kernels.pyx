# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels. Same signatures and results as ``fsaf._fallback``."""
import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef fused real_t:
    float
    double


cdef inline double _iou(double t1, double l1, double b1, double r1, double a1,
                        double t2, double l2, double b2, double r2, double a2) nogil:
    cdef double top = t1 if t1 > t2 else t2
    cdef double left = l1 if l1 > l2 else l2
    cdef double bottom = b1 if b1 < b2 else b2
    cdef double right = r1 if r1 < r2 else r2
    cdef double ih = bottom - top
    cdef double iw = right - left
    if ih <= 0 or iw <= 0:
        return 0.0
    cdef double inter = ih * iw
    cdef double union = a1 + a2 - inter
    if union <= 0:
        return 0.0
    return inter / union


def box_iou_matrix(a, b):
    cdef double[:, ::1] av = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 4)
    cdef double[:, ::1] bv = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 4)
    cdef Py_ssize_t n = av.shape[0], m = bv.shape[0], i, j
    out = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef double[::1] area_b = np.empty(m, dtype=np.float64)
    cdef double area_a
    for j in range(m):
        area_b[j] = (bv[j, 2] - bv[j, 0]) * (bv[j, 3] - bv[j, 1])
    with nogil:
        for i in range(n):
            area_a = (av[i, 2] - av[i, 0]) * (av[i, 3] - av[i, 1])
            for j in range(m):
                ov[i, j] = _iou(av[i, 0], av[i, 1], av[i, 2], av[i, 3], area_a,
                                bv[j, 0], bv[j, 1], bv[j, 2], bv[j, 3], area_b[j])
    return out


def nms_sorted(boxes, classes, double thresh):
    cdef double[:, ::1] bv = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    cdef long long[::1] cv = np.ascontiguousarray(classes, dtype=np.int64)
    cdef Py_ssize_t n = bv.shape[0], i, j
    keep = np.zeros(n, dtype=bool)
    cdef cnp.npy_bool[::1] kv = keep
    cdef unsigned char[::1] sup = np.zeros(n, dtype=np.uint8)
    cdef double[::1] area = np.empty(n, dtype=np.float64)
    for i in range(n):
        area[i] = (bv[i, 2] - bv[i, 0]) * (bv[i, 3] - bv[i, 1])
    with nogil:
        for i in range(n):
            if sup[i]:
                continue
            kv[i] = 1
            for j in range(i + 1, n):
                if sup[j] or cv[j] != cv[i]:
                    continue
                if _iou(bv[i, 0], bv[i, 1], bv[i, 2], bv[i, 3], area[i],
                        bv[j, 0], bv[j, 1], bv[j, 2], bv[j, 3], area[j]) >= thresh:
                    sup[j] = 1
    return keep


cdef void _im2col(real_t[:, :, :, ::1] x, real_t[:, ::1] cols, int kh, int kw,
                  int stride, int pad, int ho, int wo) nogil:
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ci, di, dj, b, oi, oj, row, col, ii, j0, lo, hi
    cdef real_t* dst
    cdef const real_t* src
    for ci in range(c):
        for di in range(kh):
            for dj in range(kw):
                row = (ci * kh + di) * kw + dj
                # output columns whose input column lies inside the image
                j0 = dj - pad
                lo = 0 if j0 >= 0 else (-j0 + stride - 1) // stride
                hi = (w - 1 - j0) // stride + 1 if w - 1 - j0 >= 0 else 0
                if hi > wo:
                    hi = wo
                if lo > hi:
                    lo = hi
                for b in range(n):
                    for oi in range(ho):
                        ii = oi * stride + di - pad
                        col = (b * ho + oi) * wo
                        dst = &cols[row, col]
                        if ii < 0 or ii >= h:
                            for oj in range(wo):
                                dst[oj] = 0
                            continue
                        src = &x[b, ci, ii, 0]
                        for oj in range(lo):
                            dst[oj] = 0
                        if stride == 1:
                            for oj in range(lo, hi):
                                dst[oj] = src[oj + j0]
                        else:
                            for oj in range(lo, hi):
                                dst[oj] = src[oj * stride + j0]
                        for oj in range(hi, wo):
                            dst[oj] = 0


cdef void _col2im(real_t[:, ::1] cols, real_t[:, :, :, ::1] x, int kh, int kw,
                  int stride, int pad, int ho, int wo) nogil:
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ci, di, dj, b, oi, oj, row, col, ii, jj
    # (di, dj) outermost per element so accumulation order matches the numpy path
    for di in range(kh):
        for dj in range(kw):
            for ci in range(c):
                row = (ci * kh + di) * kw + dj
                for b in range(n):
                    for oi in range(ho):
                        ii = oi * stride + di - pad
                        if ii < 0 or ii >= h:
                            continue
                        col = (b * ho + oi) * wo
                        for oj in range(wo):
                            jj = oj * stride + dj - pad
                            if jj >= 0 and jj < w:
                                x[b, ci, ii, jj] += cols[row, col + oj]


def im2col(x, int kh, int kw, int stride, int pad):
    x = np.ascontiguousarray(x)
    cdef int n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef int ho = (h + 2 * pad - kh) // stride + 1
    cdef int wo = (w + 2 * pad - kw) // stride + 1
    cols = np.empty((c * kh * kw, n * ho * wo), dtype=x.dtype)
    if x.dtype == np.float32:
        _im2col[float](x, cols, kh, kw, stride, pad, ho, wo)
    elif x.dtype == np.float64:
        _im2col[double](x, cols, kh, kw, stride, pad, ho, wo)
    else:
        raise TypeError(f"unsupported dtype {x.dtype}")
    return cols


def col2im(cols, shape, int kh, int kw, int stride, int pad):
    cols = np.ascontiguousarray(cols)
    cdef int n = shape[0], c = shape[1], h = shape[2], w = shape[3]
    cdef int ho = (h + 2 * pad - kh) // stride + 1
    cdef int wo = (w + 2 * pad - kw) // stride + 1
    x = np.zeros((n, c, h, w), dtype=cols.dtype)
    if cols.dtype == np.float32:
        _col2im[float](cols.reshape(c * kh * kw, n * ho * wo), x, kh, kw, stride, pad, ho, wo)
    elif cols.dtype == np.float64:
        _col2im[double](cols.reshape(c * kh * kw, n * ho * wo), x, kh, kw, stride, pad, ho, wo)
    else:
        raise TypeError(f"unsupported dtype {cols.dtype}")
    return x
