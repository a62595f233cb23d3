"""Independent brute-force references used by the test-suite.

Each oracle re-derives its result from first principles (full-grid
membership tests, explicit pairwise loops, exhaustive enumeration) and never
calls the code path it checks.
"""
import math

import numpy as np

from fsaf.geometry import Box

NEG, POS, IGN = 0, 1, -1


def region_mask(box, level, scale, shape):
    """Cells of a level-``level`` map inside ``scale`` x the projected box.

    Pixel test: closed-interval containment of the integer point. Empty
    result -> the in-map pixel nearest the center.
    """
    s = 2.0 ** level
    cx, cy = box.x / s, box.y / s
    hw, hh = scale * (box.w / s) / 2, scale * (box.h / s) / 2
    ii, jj = np.meshgrid(np.arange(shape[0]), np.arange(shape[1]), indexing="ij")
    mask = (ii >= cy - hh) & (ii <= cy + hh) & (jj >= cx - hw) & (jj <= cx + hw)
    if not mask.any():
        ni = min(max(math.floor(cy + 0.5), 0), shape[0] - 1)
        nj = min(max(math.floor(cx + 0.5), 0), shape[1] - 1)
        mask[ni, nj] = True
    return mask


def brute_force_targets(boxes, levels, pyramid, num_classes, image_shape, S=4.0,
                        eps_e=0.2, eps_i=0.5):
    """Returns (labels per level, [(offsets, mask)] per level)."""
    labels_out, reg_out = [], []
    for level in pyramid.levels:
        shape = (math.ceil(image_shape[0] / 2 ** level), math.ceil(image_shape[1] / 2 ** level))
        here = [n for n, l in enumerate(levels) if l == level]
        eff = {n: region_mask(boxes[n], level, eps_e, shape) for n in here}
        # per-pixel owner: the containing instance with the smallest (area, index)
        owner = np.full(shape, -1)
        for i in range(shape[0]):
            for j in range(shape[1]):
                best = None
                for n in here:
                    if eff[n][i, j]:
                        key = (boxes[n].w * boxes[n].h, n)
                        if best is None or key < best:
                            best = key
                if best is not None:
                    owner[i, j] = best[1]
        ignore = np.zeros((num_classes,) + shape, dtype=bool)
        for n, box in enumerate(boxes):
            if abs(levels[n] - level) <= 1:
                ignore[box.class_id] |= region_mask(box, level, eps_i, shape)
        lab = np.full((num_classes,) + shape, NEG, dtype=np.int8)
        lab[ignore] = IGN
        offsets = np.zeros((4,) + shape)
        for i in range(shape[0]):
            for j in range(shape[1]):
                n = owner[i, j]
                if n < 0:
                    continue
                b = boxes[n]
                lab[b.class_id, i, j] = POS
                x, y, w, h = b.x / 2 ** level, b.y / 2 ** level, b.w / 2 ** level, b.h / 2 ** level
                d = [(i - (y - h / 2)) / S, (j - (x - w / 2)) / S,
                     ((y + h / 2) - i) / S, ((x + w / 2) - j) / S]
                offsets[:, i, j] = [max(v, 0.0) for v in d]
        labels_out.append(lab)
        reg_out.append((offsets, owner >= 0))
    return labels_out, reg_out


def random_scene(rng, pyramid, max_instances=5, max_map=64):
    """Random boxes and level assignment, biased towards overlaps and tiny boxes."""
    side = 2 ** pyramid.l_min * max_map
    shape = (int(rng.integers(1, side // 32 + 1)) * 32, int(rng.integers(1, side // 32 + 1)) * 32)
    k = int(rng.integers(1, 4))
    boxes = []
    for _ in range(int(rng.integers(0, max_instances + 1))):
        if boxes and rng.random() < 0.4:
            ref = boxes[int(rng.integers(len(boxes)))]
            f = rng.choice([1.0, rng.uniform(0.3, 1.5)])
            b = Box(int(rng.integers(k)), ref.x + rng.normal(0, 4), ref.y + rng.normal(0, 4),
                    ref.w * f, ref.h * f)
        else:
            b = Box(int(rng.integers(k)), rng.uniform(0, shape[1]), rng.uniform(0, shape[0]),
                    math.exp(rng.uniform(math.log(2), math.log(400))),
                    math.exp(rng.uniform(math.log(2), math.log(400))))
        boxes.append(b)
    levels = [int(rng.integers(pyramid.l_min, pyramid.l_max + 1)) for _ in boxes]
    return boxes, levels, k, shape


def iou(a, b):
    """IoU of two (top, left, bottom, right) boxes, plain arithmetic."""
    ih = min(a[2], b[2]) - max(a[0], b[0])
    iw = min(a[3], b[3]) - max(a[1], b[1])
    if ih <= 0 or iw <= 0:
        return 0.0
    inter = ih * iw
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def brute_force_nms(boxes, scores, classes, thresh):
    """Indices kept by greedy NMS, O(n^2) with explicit loops; ties by input index."""
    order = sorted(range(len(boxes)), key=lambda n: (-scores[n], n))
    kept = []
    for n in order:
        if all(classes[m] != classes[n] or iou(boxes[m], boxes[n]) < thresh for m in kept):
            kept.append(n)
    return kept


def brute_force_ap(dets, gts, threshold):
    """Single-class AP at one IoU threshold with 101-point interpolation.

    ``dets``: list of (image, score, box); ``gts``: list of (image, box).
    Matching is recomputed by scanning all ground truths per detection.
    """
    if not gts:
        return None
    order = sorted(range(len(dets)), key=lambda n: -dets[n][1])
    used = set()
    hits = []
    for n in order:
        img, _, box = dets[n]
        best, best_g = threshold, None
        for g, (gimg, gbox) in enumerate(gts):
            if gimg != img or g in used:
                continue
            v = iou(box, gbox)
            if v >= best:
                best, best_g = v, g
        if best_g is not None:
            used.add(best_g)
        hits.append(best_g is not None)
    total = 0.0
    for r in np.linspace(0, 1, 101):
        best_p = 0.0
        for k in range(1, len(hits) + 1):
            tp = sum(hits[:k])
            if tp / len(gts) >= r:
                best_p = max(best_p, tp / k)
        total += best_p
    return total / 101
