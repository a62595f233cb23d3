"""Minimal RetinaNet-style anchor-based branch: anchors, IoU matching, loss.

All constants here follow RetinaNet conventions and are configurable; nothing
in the anchor-free path depends on this module.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .geometry import Box, PyramidSpec, center_to_corners
from .losses import ALPHA, GAMMA, LossValue, focal_terms, smooth_l1_terms

NEGATIVE = 0
POSITIVE = 1
IGNORE = -1

# exp() guard for decoded sizes, as in common detectors
MAX_LOG_RATIO = float(np.log(1000.0 / 16))


@dataclass(frozen=True)
class AnchorSpec:
    base_multiplier: float = 4.0
    scales: tuple = (1.0, 2 ** (1 / 3), 2 ** (2 / 3))
    ratios: tuple = (0.5, 1.0, 2.0)  # height / width

    @property
    def num_anchors(self) -> int:
        return len(self.scales) * len(self.ratios)

    def shapes(self, level: int) -> np.ndarray:
        """(A, 2) array of (height, width); ratio-major, scale-minor."""
        base = self.base_multiplier * 2 ** level
        out = []
        for ratio in self.ratios:
            for scale in self.scales:
                size = base * scale
                out.append((size * np.sqrt(ratio), size / np.sqrt(ratio)))
        return np.array(out)


def generate_anchors(pyramid: PyramidSpec, spec: AnchorSpec, image_shape: tuple[int, int]):
    """Corner anchors per level, each of shape (H_l * W_l * A, 4).

    Ordering is row-major over (i, j, a), matching head channel ``a*K + k``.
    """
    out = []
    for level in pyramid.levels:
        h, w = pyramid.map_shape(level, *image_shape)
        s = 2 ** level
        cy, cx = np.meshgrid(np.arange(h) * s, np.arange(w) * s, indexing="ij")
        shapes = spec.shapes(level)
        cy = cy[:, :, None].astype(np.float64)
        cx = cx[:, :, None].astype(np.float64)
        ah, aw = shapes[:, 0], shapes[:, 1]
        boxes = np.stack(np.broadcast_arrays(cy - ah / 2, cx - aw / 2, cy + ah / 2, cx + aw / 2), -1)
        out.append(boxes.reshape(-1, 4))
    return out


@dataclass
class AnchorAssignment:
    state: np.ndarray  # int8: POSITIVE / NEGATIVE / IGNORE
    instance: np.ndarray  # matched instance index, -1 if none
    max_iou: np.ndarray


def match_anchors(anchors: np.ndarray, instances: Sequence[Box], fg_thresh: float = 0.5,
                  bg_thresh: float = 0.4) -> AnchorAssignment:
    """IoU matching: positive at ``>= fg_thresh``, negative below ``bg_thresh``.

    Each instance also claims its single best anchor (first index on ties);
    later instances override earlier ones on a shared best anchor.
    """
    if not 0 <= bg_thresh < fg_thresh <= 1:
        raise ValueError(f"need 0 <= bg_thresh < fg_thresh <= 1, got {bg_thresh}, {fg_thresh}")
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    n = len(anchors)
    state = np.full(n, NEGATIVE, dtype=np.int8)
    matched = np.full(n, -1, dtype=np.int64)
    if not instances:
        return AnchorAssignment(state, matched, np.zeros(n))
    gt = center_to_corners([(b.x, b.y, b.w, b.h) for b in instances])
    iou = kernels.box_iou_matrix(anchors, gt)
    best = iou.argmax(axis=1)
    best_iou = iou[np.arange(n), best]
    state[best_iou >= bg_thresh] = IGNORE
    fg = best_iou >= fg_thresh
    state[fg] = POSITIVE
    matched[fg] = best[fg]
    for m in range(len(instances)):
        a = int(iou[:, m].argmax())
        if iou[a, m] > 0:
            state[a] = POSITIVE
            matched[a] = m
    return AnchorAssignment(state, matched, best_iou)


def encode_deltas(anchors, boxes) -> np.ndarray:
    """Standard (dx, dy, dw, dh) parameterization of center boxes against corner anchors."""
    anchors = np.asarray(anchors, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64)
    ah = anchors[:, 2] - anchors[:, 0]
    aw = anchors[:, 3] - anchors[:, 1]
    ay = anchors[:, 0] + ah / 2
    ax = anchors[:, 1] + aw / 2
    return np.stack([(boxes[:, 0] - ax) / aw, (boxes[:, 1] - ay) / ah,
                     np.log(boxes[:, 2] / aw), np.log(boxes[:, 3] / ah)], axis=1)


def decode_deltas(anchors, deltas) -> np.ndarray:
    """Inverse of :func:`encode_deltas`; returns corner boxes (top, left, bottom, right)."""
    anchors = np.asarray(anchors, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    ah = anchors[:, 2] - anchors[:, 0]
    aw = anchors[:, 3] - anchors[:, 1]
    ay = anchors[:, 0] + ah / 2
    ax = anchors[:, 1] + aw / 2
    x = ax + deltas[:, 0] * aw
    y = ay + deltas[:, 1] * ah
    w = aw * np.exp(np.minimum(deltas[:, 2], MAX_LOG_RATIO))
    h = ah * np.exp(np.minimum(deltas[:, 3], MAX_LOG_RATIO))
    return np.stack([y - h / 2, x - w / 2, y + h / 2, x + w / 2], axis=1)


def anchor_branch_loss(assignment: AnchorAssignment, cls_probs: np.ndarray, box_deltas: np.ndarray,
                       anchors: np.ndarray, instances: Sequence[Box], alpha: float = ALPHA,
                       gamma: float = GAMMA, beta: float = 1.0) -> LossValue:
    """Focal classification over non-ignored anchors, normalized by the positive
    count, plus mean (over positive anchors) smooth-L1 of the box deltas.

    ``cls_probs`` is (N, K), ``box_deltas`` (N, 4). The gradient is the tuple
    ``(d_logits, d_deltas)``.
    """
    state = assignment.state
    pos = state == POSITIVE
    num_pos = int(pos.sum())
    cls_probs = np.asarray(cls_probs)
    labels = np.zeros(cls_probs.shape, dtype=bool)
    if num_pos:
        classes = np.array([b.class_id for b in instances])[assignment.instance[pos]]
        labels[np.nonzero(pos)[0], classes] = True
    care = state != IGNORE
    loss, grad = focal_terms(cls_probs, labels, alpha, gamma)
    norm = max(num_pos, 1)
    cls_value = float(loss[care].sum()) / norm
    d_logits = np.zeros(cls_probs.shape)
    d_logits[care] = grad[care] / norm

    d_deltas = np.zeros(np.shape(box_deltas))
    reg_value = 0.0
    if num_pos:
        gt = np.array([(b.x, b.y, b.w, b.h) for b in instances])[assignment.instance[pos]]
        target = encode_deltas(np.asarray(anchors)[pos], gt)
        rl, rg = smooth_l1_terms(np.asarray(box_deltas)[pos] - target, beta)
        reg_value = float(rl.sum()) / num_pos
        d_deltas[pos] = rg / num_pos
    return LossValue(cls_value + reg_value, (d_logits, d_deltas))
