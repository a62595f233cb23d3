"""Backend selection for the hot kernels.

The compiled ``_kernels`` extension is used when it imports; otherwise the
numpy implementations in ``_fallback`` are used. Setting
``FSAF_PURE_PYTHON=1`` forces the fallback.
"""
import os

from . import _fallback

if os.environ.get("FSAF_PURE_PYTHON", "0") not in ("", "0"):
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _fallback
        BACKEND = "python"

box_iou_matrix = _impl.box_iou_matrix
nms_sorted = _impl.nms_sorted
im2col = _impl.im2col
col2im = _impl.col2im


def available_backends():
    """Return ``{name: module}`` for every importable kernel backend."""
    out = {"python": _fallback}
    try:
        from . import _kernels
        out["cython"] = _kernels
    except ImportError:
        pass
    return out
