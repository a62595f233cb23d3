"""Focal, IoU and smooth-L1 losses with analytic gradients.

Every loss returns a :class:`LossValue` whose ``gradient`` matches the shape of
the prediction it differentiates. Focal-loss gradients are taken with respect
to the pre-sigmoid logit.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import (EFFECTIVE_SCALE, OFFSET_NORMALIZER, Box, PyramidSpec, project_box,
                       region_pixels, scaled_region)
from .targets import IGNORE, POSITIVE, ClassTargetMap, RegressionTargetMap, target_offsets

log = logging.getLogger(__name__)

ALPHA = 0.25
GAMMA = 2.0
PROB_EPS = 1e-7
IOU_EPS = 1e-9
AF_WEIGHT = 0.5


@dataclass
class LossValue:
    value: float
    gradient: object = None


def focal_terms(p, positive, alpha: float = ALPHA, gamma: float = GAMMA):
    """Elementwise focal loss and its derivative w.r.t. the logit.

    ``p`` is clamped to ``[1e-7, 1 - 1e-7]`` first; the derivative is the
    exact derivative of the unclamped expression at the clamped point.
    """
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_EPS, 1 - PROB_EPS)
    pos = np.asarray(positive, dtype=bool)
    q = 1.0 - p
    log_p, log_q = np.log(p), np.log(q)
    loss = np.where(pos, -alpha * q ** gamma * log_p, -(1 - alpha) * p ** gamma * log_q)
    grad = np.where(pos,
                    alpha * q ** gamma * (gamma * p * log_p - q),
                    (1 - alpha) * p ** gamma * (p - gamma * q * log_q))
    return loss, grad


def focal_loss(p, positive, alpha: float = ALPHA, gamma: float = GAMMA) -> LossValue:
    loss, grad = focal_terms(p, positive, alpha, gamma)
    return LossValue(float(loss.sum()), grad)


def iou_terms(pred, target):
    """Elementwise ``-ln(IoU)`` between offset boxes sharing an anchor pixel.

    ``pred`` and ``target`` have shape (..., 4) ordered (top, left, bottom,
    right). Returns ``(loss, grad)`` with grad shaped like ``pred``. When the
    union is empty the loss is ``-ln(1e-9)`` with zero gradient.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    t, l, b, r = (pred[..., c] for c in range(4))
    gt, gl, gb, gr = (target[..., c] for c in range(4))
    ph, pw = t + b, l + r
    area_p = ph * pw
    area_g = (gt + gb) * (gl + gr)
    ih = np.minimum(t, gt) + np.minimum(b, gb)
    iw = np.minimum(l, gl) + np.minimum(r, gr)
    inter = ih * iw
    union = area_p + area_g - inter
    ok = union > 0
    safe_union = np.where(ok, union, 1.0)
    iou = np.where(ok, inter / safe_union, 0.0)
    loss = -np.log(iou + IOU_EPS)

    # d(-ln(iou+eps))/dx = -(dI*U - I*dU) / (U^2 (iou+eps)),  dU = dA_p - dI
    d_inter = np.stack([iw * (t < gt), ih * (l < gl), iw * (b < gb), ih * (r < gr)], axis=-1)
    d_area = np.stack([pw, ph, pw, ph], axis=-1)
    d_union = d_area - d_inter
    coef = -1.0 / (safe_union ** 2 * (iou + IOU_EPS))
    grad = coef[..., None] * (d_inter * safe_union[..., None] - inter[..., None] * d_union)
    grad = np.where(ok[..., None], grad, 0.0)
    return loss, grad


def iou_loss(pred, target) -> LossValue:
    loss, grad = iou_terms(pred, target)
    return LossValue(float(np.sum(loss)), grad)


def smooth_l1_terms(residual, beta: float = 1.0):
    r = np.asarray(residual, dtype=np.float64)
    a = np.abs(r)
    loss = np.where(a < beta, 0.5 * r * r / beta, a - 0.5 * beta)
    grad = np.where(a < beta, r / beta, np.sign(r))
    return loss, grad


def smooth_l1(residual, beta: float = 1.0) -> LossValue:
    loss, grad = smooth_l1_terms(residual, beta)
    return LossValue(float(loss.sum()), grad)


def total_classification_loss(maps: Sequence[ClassTargetMap], probs: Sequence[np.ndarray],
                              alpha: float = ALPHA, gamma: float = GAMMA) -> LossValue:
    """Focal loss summed over non-IGNORE cells of every level, divided by the
    number of POSITIVE cells. Gradient is a list of per-level logit gradients.

    An image without positives contributes zero loss and zero gradient.
    """
    num_pos = sum(int(np.count_nonzero(m.labels == POSITIVE)) for m in maps)
    grads = [np.zeros(np.shape(p)) for p in probs]
    if num_pos == 0:
        log.debug("no positive cells: classification loss set to 0")
        return LossValue(0.0, grads)
    total = 0.0
    for m, p, g in zip(maps, probs, grads):
        if m.labels.shape != np.shape(p):
            raise ValueError(f"level {m.level}: target shape {m.labels.shape} "
                             f"vs prediction shape {np.shape(p)}")
        loss, grad = focal_terms(p, m.labels == POSITIVE, alpha, gamma)
        care = m.labels != IGNORE
        total += float(np.sum(loss[care]))
        g[care] = grad[care] / num_pos
    return LossValue(total / num_pos, grads)


def total_regression_loss(maps: Sequence[RegressionTargetMap],
                          preds: Sequence[np.ndarray]) -> LossValue:
    """Mean IoU loss over every mask-true cell of every level.

    ``preds`` are (4, H, W) offset maps; the gradient list matches them.
    """
    count = sum(int(np.count_nonzero(m.mask)) for m in maps)
    grads = [np.zeros(np.shape(p)) for p in preds]
    if count == 0:
        return LossValue(0.0, grads)
    total = 0.0
    for m, p, g in zip(maps, preds, grads):
        if m.offsets.shape != np.shape(p):
            raise ValueError(f"level {m.level}: target shape {m.offsets.shape} "
                             f"vs prediction shape {np.shape(p)}")
        if not m.mask.any():
            continue
        pv = np.asarray(p)[:, m.mask].T
        tv = m.offsets[:, m.mask].T
        loss, grad = iou_terms(pv, tv)
        total += float(loss.sum())
        g[:, m.mask] = grad.T / count
    return LossValue(total / count, grads)


@dataclass
class LevelLossTable:
    """Per-level ``(focal, iou)`` averages for one instance."""

    instance: int
    entries: dict = field(default_factory=dict)

    def sums(self) -> dict:
        return {l: fl + iou for l, (fl, iou) in self.entries.items()}


def instance_level_losses(instance: Box, probs: Sequence[np.ndarray], offsets: Sequence[np.ndarray],
                          pyramid: PyramidSpec, S: float = OFFSET_NORMALIZER,
                          eps_e: float = EFFECTIVE_SCALE, instance_id: int = 0,
                          alpha: float = ALPHA, gamma: float = GAMMA) -> LevelLossTable:
    """Average focal and IoU loss over the instance's effective region at every level.

    ``probs[n]`` is the (K, H, W) probability map and ``offsets[n]`` the
    (4, H, W) offset map of level ``pyramid.levels[n]``. Effective cells are
    treated as positives of the instance's class.
    """
    table = LevelLossTable(instance_id)
    for level, p, o in zip(pyramid.levels, probs, offsets):
        pb = project_box(instance, level)
        rows, cols = region_pixels(scaled_region(pb, eps_e), p.shape[1:])
        cls_p = p[instance.class_id, rows, cols]
        fl, _ = focal_terms(cls_p, True, alpha, gamma)
        target = target_offsets(pb, rows, cols, S)
        pred = np.asarray(o)[:, rows, cols]
        il, _ = iou_terms(np.moveaxis(pred, 0, -1), np.moveaxis(target, 0, -1))
        table.entries[level] = (float(fl.mean()), float(il.mean()))
    return table


def combined_loss(l_ab: float, l_cls_af: float, l_reg_af: float, weight: float = AF_WEIGHT) -> float:
    """Anchor-based loss plus ``weight`` times the anchor-free losses."""
    return l_ab + weight * (l_cls_af + l_reg_af)
