"""Coordinate algebra of the feature pyramid.

Image-plane boxes use center format ``(x, y, w, h)``. Feature-map pixels are
addressed as ``(i, j)`` = (row, column) with no half-pixel offset, so pixel
``(i, j)`` of level ``l`` sits at image point ``(y=i*2**l, x=j*2**l)``.
Corner boxes are ordered ``(top, left, bottom, right)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

EFFECTIVE_SCALE = 0.2
IGNORE_SCALE = 0.5
OFFSET_NORMALIZER = 4.0


@dataclass(frozen=True)
class Box:
    """An instance box in image pixels, center format."""

    class_id: int
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box dimensions must be positive, got w={self.w}, h={self.h}")
        if self.class_id < 0:
            raise ValueError(f"class id must be non-negative, got {self.class_id}")

    @property
    def area(self) -> float:
        return self.w * self.h

    def corners(self) -> tuple[float, float, float, float]:
        return (self.y - self.h / 2, self.x - self.w / 2,
                self.y + self.h / 2, self.x + self.w / 2)


@dataclass(frozen=True)
class PyramidSpec:
    l_min: int = 3
    l_max: int = 7

    def __post_init__(self):
        if self.l_min < 0 or self.l_min > self.l_max:
            raise ValueError(f"invalid pyramid range [{self.l_min}, {self.l_max}]")

    @property
    def levels(self) -> range:
        return range(self.l_min, self.l_max + 1)

    def __contains__(self, level) -> bool:
        return self.l_min <= level <= self.l_max

    @staticmethod
    def stride(level: int) -> int:
        return 2 ** level

    def map_shape(self, level: int, image_h: int, image_w: int) -> tuple[int, int]:
        self.check(level)
        s = 2 ** level
        return (-(-image_h // s), -(-image_w // s))

    def check(self, level: int) -> None:
        if level not in self:
            raise ValueError(f"level {level} outside pyramid range [{self.l_min}, {self.l_max}]")

    def clamp(self, level: int) -> int:
        return min(max(int(level), self.l_min), self.l_max)


@dataclass(frozen=True)
class ProjectedBox:
    level: int
    x: float
    y: float
    w: float
    h: float
    class_id: int = 0


@dataclass(frozen=True)
class RegionBox:
    level: int
    x: float
    y: float
    w: float
    h: float
    scale: float


class OffsetVector(NamedTuple):
    """Distances to the top, left, bottom and right edges, divided by S."""

    top: float
    left: float
    bottom: float
    right: float


class DecodedBox(NamedTuple):
    top: float
    left: float
    bottom: float
    right: float

    @property
    def valid(self) -> bool:
        return self.bottom > self.top and self.right > self.left


def project_box(box: Box, level: int, pyramid: PyramidSpec | None = None) -> ProjectedBox:
    """Divide every box coordinate by ``2**level``.

    Raises ``ValueError`` when ``level`` is outside ``pyramid`` (or negative
    when no pyramid is given).
    """
    if pyramid is not None:
        pyramid.check(level)
    elif level < 0:
        raise ValueError(f"level must be non-negative, got {level}")
    s = float(2 ** level)
    return ProjectedBox(level, box.x / s, box.y / s, box.w / s, box.h / s, box.class_id)


def scaled_region(pb: ProjectedBox, scale: float) -> RegionBox:
    if not scale > 0:
        raise ValueError(f"region scale must be positive, got {scale}")
    return RegionBox(pb.level, pb.x, pb.y, scale * pb.w, scale * pb.h, scale)


def _nearest(v: float) -> int:
    return int(math.floor(v + 0.5))


def _span(center: float, size: float, limit: int) -> tuple[int, int]:
    lo = max(math.ceil(center - size / 2), 0)
    hi = min(math.floor(center + size / 2), limit - 1)
    return lo, hi


def region_pixels(region: RegionBox, map_shape: tuple[int, int]) -> tuple[slice, slice]:
    """Rasterize a region to row/column slices of a level map.

    A pixel belongs to the region when it lies inside the closed box. A
    region that covers no pixel collapses to the in-map pixel nearest its
    center, so every region owns at least one cell.
    """
    h, w = map_shape
    i0, i1 = _span(region.y, region.h, h)
    j0, j1 = _span(region.x, region.w, w)
    if i0 > i1 or j0 > j1:
        i0 = i1 = min(max(_nearest(region.y), 0), h - 1)
        j0 = j1 = min(max(_nearest(region.x), 0), w - 1)
    return slice(i0, i1 + 1), slice(j0, j1 + 1)


def encode_offsets(pb: ProjectedBox, i: int, j: int, S: float = OFFSET_NORMALIZER) -> OffsetVector:
    return OffsetVector(
        (i - (pb.y - pb.h / 2)) / S,
        (j - (pb.x - pb.w / 2)) / S,
        ((pb.y + pb.h / 2) - i) / S,
        ((pb.x + pb.w / 2) - j) / S,
    )


def encode_offsets_grid(pb: ProjectedBox, rows: slice, cols: slice,
                        S: float = OFFSET_NORMALIZER) -> np.ndarray:
    """Vectorized :func:`encode_offsets` over a rectangle of pixels, shape (4, h, w)."""
    ii = np.arange(rows.start, rows.stop, dtype=np.float64)[:, None]
    jj = np.arange(cols.start, cols.stop, dtype=np.float64)[None, :]
    shape = (len(ii), jj.shape[1])
    out = np.empty((4,) + shape)
    out[0] = np.broadcast_to((ii - (pb.y - pb.h / 2)) / S, shape)
    out[1] = np.broadcast_to((jj - (pb.x - pb.w / 2)) / S, shape)
    out[2] = np.broadcast_to(((pb.y + pb.h / 2) - ii) / S, shape)
    out[3] = np.broadcast_to(((pb.x + pb.w / 2) - jj) / S, shape)
    return out


def decode_box(i: int, j: int, offsets, S: float = OFFSET_NORMALIZER, level: int = 0) -> DecodedBox:
    """Turn predicted offsets at pixel ``(i, j)`` into an image-plane corner box.

    Check ``.valid`` on the result; zero-area boxes are returned, not raised.
    """
    t, l, b, r = offsets
    s = float(2 ** level)
    return DecodedBox((i - S * t) * s, (j - S * l) * s, (i + S * b) * s, (j + S * r) * s)


def decode_boxes(rows, cols, offsets, S: float, level: int) -> np.ndarray:
    """Vectorized :func:`decode_box`; ``offsets`` has shape (n, 4), returns (n, 4)."""
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    o = np.asarray(offsets, dtype=np.float64) * S
    s = float(2 ** level)
    return np.stack([(rows - o[:, 0]) * s, (cols - o[:, 1]) * s,
                     (rows + o[:, 2]) * s, (cols + o[:, 3]) * s], axis=1)


def corners_to_center(corners) -> np.ndarray:
    c = np.asarray(corners, dtype=np.float64)
    if c.size == 0:
        return np.zeros((0, 4))
    t, l, b, r = c[..., 0], c[..., 1], c[..., 2], c[..., 3]
    return np.stack([(l + r) / 2, (t + b) / 2, r - l, b - t], axis=-1)


def center_to_corners(boxes) -> np.ndarray:
    c = np.asarray(boxes, dtype=np.float64)
    if c.size == 0:
        return np.zeros((0, 4))
    x, y, w, h = c[..., 0], c[..., 1], c[..., 2], c[..., 3]
    return np.stack([y - h / 2, x - w / 2, y + h / 2, x + w / 2], axis=-1)
