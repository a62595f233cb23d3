"""Per-level anchor-free supervision maps.

For an instance assigned to level ``l``:

* its effective region at ``l`` is POSITIVE in its class channel;
* its ignoring region at ``l``, ``l - 1`` and ``l + 1`` is IGNORE in its class
  channel;
* everything else is NEGATIVE.

Overlapping effective regions at one level go to the instance with the
smaller image-space area (ties: lower instance index). POSITIVE is never
overwritten by IGNORE. Regression targets follow the same ownership.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import (EFFECTIVE_SCALE, IGNORE_SCALE, OFFSET_NORMALIZER, Box, PyramidSpec,
                       encode_offsets_grid, project_box, region_pixels, scaled_region)
from .netpbm import write_pgm

NEGATIVE = 0
POSITIVE = 1
IGNORE = -1


@dataclass
class ClassTargetMap:
    level: int
    labels: np.ndarray  # int8, (K, H, W) with NEGATIVE / POSITIVE / IGNORE


@dataclass
class RegressionTargetMap:
    level: int
    offsets: np.ndarray  # (4, H, W), normalized by S, zero where mask is false
    mask: np.ndarray  # bool (H, W)
    S: float = OFFSET_NORMALIZER


def target_offsets(pb, rows: slice, cols: slice, S: float) -> np.ndarray:
    """Offset targets for a block of pixels, clamped at zero.

    A single-pixel fallback region of a tiny box can sit just outside the
    projected box; clamping stretches the target to reach that pixel, which
    keeps it representable by a non-negative regression head.
    """
    return np.maximum(encode_offsets_grid(pb, rows, cols, S), 0.0)


def _check_assignment(instances, assignment, pyramid):
    if len(assignment) != len(instances):
        raise ValueError(f"{len(instances)} instances but {len(assignment)} assigned levels")
    for level in assignment:
        pyramid.check(int(level))


def ownership(instances: Sequence[Box], assignment: Sequence[int], pyramid: PyramidSpec,
              image_shape: tuple[int, int], eps_e: float = EFFECTIVE_SCALE) -> dict[int, np.ndarray]:
    """Per level, the index of the instance owning each cell (-1 for none)."""
    _check_assignment(instances, assignment, pyramid)
    owners = {l: np.full(pyramid.map_shape(l, *image_shape), -1, dtype=np.int64)
              for l in pyramid.levels}
    # paint lowest priority first so the smallest instance is written last
    order = sorted(range(len(instances)), key=lambda n: (-instances[n].area, -n))
    for n in order:
        level = int(assignment[n])
        owner = owners[level]
        rows, cols = region_pixels(scaled_region(project_box(instances[n], level), eps_e),
                                   owner.shape)
        owner[rows, cols] = n
    return owners


def generate_targets(instances: Sequence[Box], assignment: Sequence[int], pyramid: PyramidSpec,
                     num_classes: int, image_shape: tuple[int, int], S: float = OFFSET_NORMALIZER,
                     eps_e: float = EFFECTIVE_SCALE, eps_i: float = IGNORE_SCALE):
    """Build classification and regression maps together.

    Returns ``(class_maps, regression_maps)``, one entry per pyramid level in
    ascending level order.
    """
    owners = ownership(instances, assignment, pyramid, image_shape, eps_e)
    class_maps, reg_maps = [], []
    labels = {l: np.zeros((num_classes,) + owners[l].shape, dtype=np.int8) for l in pyramid.levels}
    for n, box in enumerate(instances):
        if not 0 <= box.class_id < num_classes:
            raise ValueError(f"instance {n} has class {box.class_id}, expected < {num_classes}")
        assigned = int(assignment[n])
        for level in (assigned - 1, assigned, assigned + 1):
            if level not in pyramid:
                continue
            channel = labels[level][box.class_id]
            rows, cols = region_pixels(scaled_region(project_box(box, level), eps_i), channel.shape)
            channel[rows, cols] = IGNORE
    for level in pyramid.levels:
        owner = owners[level]
        lab = labels[level]
        mask = owner >= 0
        offsets = np.zeros((4,) + owner.shape)
        for n in np.unique(owner[mask]):
            cells = owner == n
            lab[instances[n].class_id][cells] = POSITIVE
            rows, cols = np.nonzero(cells)
            rs = slice(rows.min(), rows.max() + 1)
            cs = slice(cols.min(), cols.max() + 1)
            grid = target_offsets(project_box(instances[n], level), rs, cs, S)
            offsets[:, rs, cs] = np.where(cells[rs, cs], grid, offsets[:, rs, cs])
        class_maps.append(ClassTargetMap(level, lab))
        reg_maps.append(RegressionTargetMap(level, offsets, mask, S))
    return class_maps, reg_maps


def generate_class_targets(instances, assignment, pyramid, num_classes, image_shape,
                           eps_e=EFFECTIVE_SCALE, eps_i=IGNORE_SCALE) -> list[ClassTargetMap]:
    return generate_targets(instances, assignment, pyramid, num_classes, image_shape,
                            eps_e=eps_e, eps_i=eps_i)[0]


def generate_regression_targets(instances, assignment, pyramid, image_shape, S=OFFSET_NORMALIZER,
                                eps_e=EFFECTIVE_SCALE) -> list[RegressionTargetMap]:
    num_classes = max((b.class_id for b in instances), default=0) + 1
    return generate_targets(instances, assignment, pyramid, num_classes, image_shape,
                            S=S, eps_e=eps_e)[1]


PGM_VALUES = {NEGATIVE: 0, IGNORE: 128, POSITIVE: 255}


def dump_targets(out_dir, class_maps: Sequence[ClassTargetMap],
                 reg_maps: Sequence[RegressionTargetMap], prefix: str = "") -> list[Path]:
    """Write maps as PGM images plus raw little-endian float32 offset files.

    Per level ``l`` and class ``k``: ``{prefix}level{l}_class{k}.pgm``.
    Per level: ``{prefix}level{l}_offsets.bin`` with a JSON sidecar
    ``{prefix}level{l}_offsets.json`` holding ``{level, shape, S}``, and
    ``{prefix}level{l}_mask.pgm`` (255 where offsets are defined).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for cm in class_maps:
        img = np.zeros(cm.labels.shape, dtype=np.uint8)
        for state, value in PGM_VALUES.items():
            img[cm.labels == state] = value
        for k, channel in enumerate(img):
            path = out / f"{prefix}level{cm.level}_class{k}.pgm"
            write_pgm(path, channel)
            written.append(path)
    for rm in reg_maps:
        stem = out / f"{prefix}level{rm.level}_offsets"
        stem.with_suffix(".bin").write_bytes(rm.offsets.astype("<f4").tobytes())
        header = {"level": rm.level, "shape": list(rm.offsets.shape), "S": rm.S}
        stem.with_suffix(".json").write_text(json.dumps(header))
        mask_path = out / f"{prefix}level{rm.level}_mask.pgm"
        write_pgm(mask_path, rm.mask.astype(np.uint8) * 255)
        written += [stem.with_suffix(".bin"), stem.with_suffix(".json"), mask_path]
    return written


def load_offsets(bin_path) -> RegressionTargetMap:
    """Read an offsets file written by :func:`dump_targets` (mask not restored)."""
    bin_path = Path(bin_path)
    header = json.loads(bin_path.with_suffix(".json").read_text())
    data = np.frombuffer(bin_path.read_bytes(), dtype="<f4").reshape(header["shape"])
    return RegressionTargetMap(header["level"], data.astype(np.float64),
                               np.zeros(header["shape"][1:], dtype=bool), header["S"])
