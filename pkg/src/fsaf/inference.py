"""Decoding network outputs into detections, NMS and the joint pipeline."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .anchors import decode_deltas, generate_anchors
from .geometry import OFFSET_NORMALIZER, decode_boxes
from .model import ModelParams, anchor_spec, forward

SCORE_THRESH = 0.05
TOP_K = 1000
NMS_THRESH = 0.5


@dataclass
class Detection:
    class_id: int
    score: float
    box: tuple  # (top, left, bottom, right) in image pixels
    # tie-break key (branch, level, i, j, anchor, class); not serialized
    key: tuple = field(default=(), compare=False, repr=False)

    def to_dict(self) -> dict:
        return {"class": self.class_id, "score": self.score, "box": list(self.box)}


def _top_k(scores: np.ndarray, top_k: int) -> np.ndarray:
    """Indices of the ``top_k`` largest scores; equal scores keep flat order."""
    order = np.argsort(-scores, kind="stable")
    return order[:top_k]


def decode_level(cls_prob: np.ndarray, offsets: np.ndarray, level: int, S: float = OFFSET_NORMALIZER,
                 score_thresh: float = SCORE_THRESH, top_k: int = TOP_K) -> list[Detection]:
    """Anchor-free decoding of one level of one image.

    ``cls_prob`` is (K, H, W), ``offsets`` (4, H, W). Each location votes
    with its best class; locations scoring above ``score_thresh`` are ranked
    and at most ``top_k`` are decoded. Degenerate boxes are dropped.
    """
    k, h, w = cls_prob.shape
    best = cls_prob.argmax(axis=0).reshape(-1)
    score = cls_prob.max(axis=0).reshape(-1)
    cand = np.nonzero(score > score_thresh)[0]
    cand = cand[_top_k(score[cand], top_k)]
    rows, cols = np.divmod(cand, w)
    offs = offsets.reshape(4, -1)[:, cand].T
    boxes = decode_boxes(rows, cols, offs, S, level)
    out = []
    for n, idx in enumerate(cand):
        t, l, b, r = boxes[n]
        if b > t and r > l:
            out.append(Detection(int(best[idx]), float(score[idx]), (t, l, b, r),
                                 (0, level, int(rows[n]), int(cols[n]), 0, int(best[idx]))))
    return out


def decode_anchor_level(cls_prob: np.ndarray, deltas: np.ndarray, anchors: np.ndarray, level: int,
                        num_anchors: int, score_thresh: float = SCORE_THRESH,
                        top_k: int = TOP_K) -> list[Detection]:
    """Anchor-based decoding of one level; every (anchor, class) pair is a candidate."""
    ak, h, w = cls_prob.shape
    k = ak // num_anchors
    scores = cls_prob.reshape(num_anchors, k, h, w).transpose(2, 3, 0, 1).reshape(-1)
    cand = np.nonzero(scores > score_thresh)[0]
    cand = cand[_top_k(scores[cand], top_k)]
    anchor_idx, cls = np.divmod(cand, k)
    d = deltas.reshape(num_anchors, 4, h, w).transpose(2, 3, 0, 1).reshape(-1, 4)
    boxes = decode_deltas(anchors[anchor_idx], d[anchor_idx])
    out = []
    for n, idx in enumerate(cand):
        t, l, b, r = boxes[n]
        if b > t and r > l:
            pix, a = divmod(int(anchor_idx[n]), num_anchors)
            i, j = divmod(pix, w)
            out.append(Detection(int(cls[n]), float(scores[idx]), (t, l, b, r),
                                 (1, level, i, j, a, int(cls[n]))))
    return out


def sort_detections(dets: list[Detection]) -> list[Detection]:
    return sorted(dets, key=lambda d: (-d.score, d.key))


def nms(dets: list[Detection], iou_thresh: float = NMS_THRESH) -> list[Detection]:
    """Greedy per-class non-maximum suppression.

    Detections are visited by descending score (ties by ``key``); one is kept
    iff its IoU with every kept detection of the same class is below
    ``iou_thresh``.
    """
    if not dets:
        return []
    ordered = sort_detections(dets)
    boxes = np.array([d.box for d in ordered], dtype=np.float64)
    classes = np.array([d.class_id for d in ordered], dtype=np.int64)
    keep = kernels.nms_sorted(boxes, classes, iou_thresh)
    return [d for d, k in zip(ordered, keep) if k]


@dataclass
class DetectOptions:
    score_thresh: float = SCORE_THRESH
    top_k: int = TOP_K
    nms_thresh: float = NMS_THRESH
    use_af: bool = True
    use_ab: bool = True
    clip: bool = False
    max_detections: int | None = None


def candidates(params: ModelParams, image: np.ndarray, options: DetectOptions | None = None,
               outputs=None) -> list[Detection]:
    """Pre-NMS candidates from every enabled branch and level for one image.

    ``image`` is a normalized (3, H, W) array.
    """
    options = options or DetectOptions()
    config = params.config
    if outputs is None:
        outputs = forward(params, image[None])
    dets = []
    h, w = image.shape[1:]
    hp = -(-h // 2 ** config.l_max) * 2 ** config.l_max
    wp = -(-w // 2 ** config.l_max) * 2 ** config.l_max
    anchors = None
    if config.use_ab and options.use_ab:
        anchors = generate_anchors(config.pyramid, anchor_spec(config), (hp, wp))
    for n, out in enumerate(outputs):
        if config.use_af and options.use_af:
            dets += decode_level(out.cls_prob[0], out.reg[0], out.level, config.S,
                                 options.score_thresh, options.top_k)
        if anchors is not None:
            dets += decode_anchor_level(out.ab_cls_prob[0], out.ab_reg[0], anchors[n], out.level,
                                        anchor_spec(config).num_anchors, options.score_thresh,
                                        options.top_k)
    return dets


def detect(params: ModelParams, image: np.ndarray, options: DetectOptions | None = None,
           outputs=None) -> list[Detection]:
    """Forward one normalized (3, H, W) image and return final detections."""
    options = options or DetectOptions()
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got shape {image.shape}")
    dets = nms(candidates(params, image, options, outputs), options.nms_thresh)
    if options.clip:
        h, w = image.shape[1:]
        clipped = []
        for d in dets:
            t, l, b, r = d.box
            box = (min(max(t, 0.0), h), min(max(l, 0.0), w), min(max(b, 0.0), h), min(max(r, 0.0), w))
            if box[2] > box[0] and box[3] > box[1]:
                clipped.append(Detection(d.class_id, d.score, box, d.key))
        dets = clipped
    if options.max_detections is not None:
        dets = dets[:options.max_detections]
    return dets


def detect_batch(params: ModelParams, images: np.ndarray, options: DetectOptions | None = None,
                 batch_size: int = 16) -> list[list[Detection]]:
    """:func:`detect` over a stack of images, forwarding ``batch_size`` at a time."""
    results = []
    for start in range(0, len(images), batch_size):
        chunk = images[start:start + batch_size]
        outs = forward(params, chunk)
        for n in range(len(chunk)):
            per = [type(o)(o.level, *(None if a is None else a[n:n + 1]
                                      for a in (o.cls_prob, o.reg, o.ab_cls_prob, o.ab_reg)))
                   for o in outs]
            results.append(detect(params, chunk[n], options, per))
    return results


def save_detections(path, detections) -> None:
    """Write ``{image_id: [detection, ...]}`` or a plain list as JSON."""
    if isinstance(detections, dict):
        data = {str(k): [d.to_dict() for d in v] for k, v in detections.items()}
    else:
        data = [d.to_dict() for d in detections]
    Path(path).write_text(json.dumps(data, indent=1) + "\n")


def load_detections(path) -> dict:
    data = json.loads(Path(path).read_text())

    def parse(items):
        return [Detection(int(d["class"]), float(d["score"]), tuple(d["box"])) for d in items]

    if isinstance(data, list):
        return {0: parse(data)}
    return {int(k): parse(v) for k, v in data.items()}
