"""COCO-style average precision at desk scale.

Follows the COCO protocol: per class and IoU threshold, detections are
matched greedily in descending score order to the best-IoU unmatched ground
truth; precision is made monotone and sampled at 101 recall points. Area
ranges ignore ground truths outside the range, plus unmatched detections
outside it. At most ``max_dets`` detections per image are considered.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .geometry import center_to_corners

IOU_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
AREA_RANGES = {"all": (0.0, 1e10), "small": (0.0, 32.0 ** 2), "medium": (32.0 ** 2, 96.0 ** 2),
               "large": (96.0 ** 2, 1e10)}


@dataclass
class EvalReport:
    AP: float
    AP50: float
    AP75: float
    APs: float
    APm: float
    APl: float
    per_class: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"AP": self.AP, "AP50": self.AP50, "AP75": self.AP75, "AP_S": self.APs,
                "AP_M": self.APm, "AP_L": self.APl,
                "per_class": {str(k): v for k, v in self.per_class.items()}}

    def table(self) -> str:
        names = ["AP", "AP50", "AP75", "AP_S", "AP_M", "AP_L"]
        values = [self.AP, self.AP50, self.AP75, self.APs, self.APm, self.APl]
        head = " ".join(f"{n:>7}" for n in names)
        row = " ".join(f"{100 * v:7.2f}" for v in values)
        lines = [head, row]
        for k, v in sorted(self.per_class.items()):
            lines.append(f"class {k:>3}: {100 * v:6.2f}")
        return "\n".join(lines)


def _area(corners: np.ndarray) -> np.ndarray:
    return (corners[:, 2] - corners[:, 0]) * (corners[:, 3] - corners[:, 1])


def _match_image(det_boxes, gt_boxes, gt_ignore, det_area_ignore, thresholds):
    """COCO greedy matching for one image/class; detections pre-sorted by score.

    Returns (matched[T, D], ignored[T, D]).
    """
    n_t, n_d, n_g = len(thresholds), len(det_boxes), len(gt_boxes)
    matched = np.zeros((n_t, n_d), dtype=bool)
    ignored = np.zeros((n_t, n_d), dtype=bool)
    if n_g:
        # non-ignored ground truths first
        gorder = np.argsort(gt_ignore, kind="stable")
        gt_boxes, gt_ignore = gt_boxes[gorder], gt_ignore[gorder]
        ious = kernels.box_iou_matrix(det_boxes, gt_boxes) if n_d else np.zeros((0, n_g))
        for t, thr in enumerate(thresholds):
            taken = np.zeros(n_g, dtype=bool)
            for d in range(n_d):
                best, m = min(thr, 1 - 1e-10), -1
                for g in range(n_g):
                    if taken[g]:
                        continue
                    if m > -1 and not gt_ignore[m] and gt_ignore[g]:
                        break
                    if ious[d, g] < best:
                        continue
                    best, m = ious[d, g], g
                if m == -1:
                    continue
                taken[m] = True
                matched[t, d] = True
                ignored[t, d] = gt_ignore[m]
    ignored |= (~matched) & det_area_ignore[None, :]
    return matched, ignored


def _average_precision(scores, matched, ignored, num_gt):
    """101-point interpolated AP for each threshold row; -1 if no ground truth."""
    if num_gt == 0:
        return np.full(matched.shape[0], -1.0)
    order = np.argsort(-scores, kind="mergesort")
    out = np.zeros(matched.shape[0])
    for t in range(matched.shape[0]):
        keep = ~ignored[t, order]
        tp = np.cumsum(matched[t, order][keep])
        fp = np.cumsum(~matched[t, order][keep])
        if len(tp) == 0:
            continue
        recall = tp / num_gt
        precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
        precision = np.maximum.accumulate(precision[::-1])[::-1]
        idx = np.searchsorted(recall, RECALL_POINTS, side="left")
        valid = idx < len(precision)
        sampled = np.zeros(len(RECALL_POINTS))
        sampled[valid] = precision[idx[valid]]
        out[t] = sampled.mean()
    return out


def evaluate(detections: dict, ground_truth: dict, num_classes: int, max_dets: int = 100,
             thresholds=IOU_THRESHOLDS) -> EvalReport:
    """Score detections against ground truth.

    ``detections`` maps image id to a list of :class:`~fsaf.inference.Detection`;
    ``ground_truth`` maps image id to a list of :class:`~fsaf.geometry.Box`.
    """
    thresholds = np.asarray(thresholds, dtype=np.float64)
    image_ids = sorted(ground_truth)
    # ap[area][class] -> per-threshold array
    ap = {area: {} for area in AREA_RANGES}
    for k in range(num_classes):
        for area, (lo, hi) in AREA_RANGES.items():
            scores, matched, ignored = [], [], []
            num_gt = 0
            for img in image_ids:
                gts = [b for b in ground_truth[img] if b.class_id == k]
                gt_boxes = center_to_corners([(b.x, b.y, b.w, b.h) for b in gts]).reshape(-1, 4)
                gt_area = np.array([b.w * b.h for b in gts])
                gt_ignore = (gt_area < lo) | (gt_area > hi)
                num_gt += int((~gt_ignore).sum())
                dets = sorted(detections.get(img, []), key=lambda d: -d.score)[:max_dets]
                dets = [d for d in dets if d.class_id == k]
                if not dets:
                    continue
                dets.sort(key=lambda d: -d.score)
                det_boxes = np.array([d.box for d in dets], dtype=np.float64)
                det_area = _area(det_boxes)
                m, ig = _match_image(det_boxes, gt_boxes, gt_ignore,
                                     (det_area < lo) | (det_area > hi), thresholds)
                scores.append(np.array([d.score for d in dets]))
                matched.append(m)
                ignored.append(ig)
            if scores:
                res = _average_precision(np.concatenate(scores), np.concatenate(matched, 1),
                                         np.concatenate(ignored, 1), num_gt)
            else:
                res = np.full(len(thresholds), -1.0 if num_gt == 0 else 0.0)
            ap[area][k] = res

    def summarize(area, t_index=None):
        vals = [v if t_index is None else v[t_index:t_index + 1] for v in ap[area].values()]
        vals = np.concatenate(vals) if vals else np.array([])
        vals = vals[vals > -1]
        return float(vals.mean()) if len(vals) else 0.0

    def t_idx(value):
        hits = np.nonzero(np.isclose(thresholds, value))[0]
        return int(hits[0]) if len(hits) else None

    per_class = {}
    for k, v in ap["all"].items():
        v = v[v > -1]
        if len(v):
            per_class[k] = float(v.mean())
    i50, i75 = t_idx(0.5), t_idx(0.75)
    return EvalReport(
        AP=summarize("all"),
        AP50=summarize("all", i50) if i50 is not None else 0.0,
        AP75=summarize("all", i75) if i75 is not None else 0.0,
        APs=summarize("small"), APm=summarize("medium"), APl=summarize("large"),
        per_class=per_class,
    )
