"""Synthetic rectangle datasets and annotation I/O.

Annotation JSON::

    {"num_classes": K,
     "images": [{"id": 0, "width": 128, "height": 128, "file": "images/000000.ppm"}, ...],
     "instances": [{"image_id": 0, "class": 1, "box": [x, y, w, h]}, ...]}

Boxes are center format in image pixels; a pixel column ``c`` covers
``[c, c + 1)``. Image paths are relative to the annotation file.
"""
from __future__ import annotations

import colorsys
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Box
from .netpbm import read_netpbm, write_ppm

PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


@dataclass
class ImageRecord:
    id: int
    width: int
    height: int
    file: str


@dataclass
class Annotations:
    num_classes: int
    images: list = field(default_factory=list)
    instances: dict = field(default_factory=dict)  # image id -> list[Box]
    root: Path = Path(".")

    def boxes(self, image_id: int) -> list:
        return self.instances.get(image_id, [])

    def image_path(self, record: ImageRecord) -> Path:
        return self.root / record.file

    def load_image(self, record: ImageRecord) -> np.ndarray:
        img = read_netpbm(self.image_path(record))
        if img.ndim != 3:
            raise ValueError(f"{record.file}: expected an RGB (P6) image")
        return img

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "images": [vars(r) for r in self.images],
            "instances": [
                {"image_id": r.id, "class": b.class_id, "box": [b.x, b.y, b.w, b.h]}
                for r in self.images for b in self.boxes(r.id)
            ],
        }


def save_annotations(ann: Annotations, path) -> None:
    Path(path).write_text(json.dumps(ann.to_dict(), indent=1) + "\n")


def load_annotations(path) -> Annotations:
    path = Path(path)
    data = json.loads(path.read_text())
    try:
        images = [ImageRecord(int(r["id"]), int(r["width"]), int(r["height"]), r["file"])
                  for r in data["images"]]
        k = int(data["num_classes"])
        by_id = {r.id: r for r in images}
        instances: dict = {r.id: [] for r in images}
        for inst in data["instances"]:
            rec = by_id[int(inst["image_id"])]
            box = _clip_box(Box(int(inst["class"]), *map(float, inst["box"])), rec)
            if box.class_id >= k:
                raise ValueError(f"class {box.class_id} >= num_classes {k}")
            instances[rec.id].append(box)
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path}: malformed annotations ({exc!r})") from exc
    return Annotations(k, images, instances, path.parent)


def _clip_box(box: Box, rec: ImageRecord) -> Box:
    t, l, b, r = box.corners()
    t, b = max(t, 0.0), min(b, float(rec.height))
    l, r = max(l, 0.0), min(r, float(rec.width))
    if (t, l, b, r) == box.corners():
        return box
    return Box(box.class_id, (l + r) / 2, (t + b) / 2, r - l, b - t)


def class_color(rng: np.random.Generator, k: int, num_classes: int) -> np.ndarray:
    """Random color from the hue family of class ``k``."""
    hue = (k / num_classes + rng.uniform(-0.25, 0.25) / num_classes) % 1.0
    sat = rng.uniform(0.6, 1.0)
    val = rng.uniform(0.6, 1.0)
    return np.array(colorsys.hsv_to_rgb(hue, sat, val)) * 255


def synth_image(rng: np.random.Generator, size: int, num_classes: int, count: int,
                min_size: float = 8.0, max_size: float | None = None, max_tries: int = 200):
    """One image of non-overlapping filled rectangles on a gray background.

    Side lengths come from a log-uniform square size with a log-uniform
    aspect ratio in [1/2, 2]. Returns ``(pixels, boxes)``.
    """
    max_size = max_size or size / 2
    gray = rng.uniform(60, 180)
    img = np.full((size, size, 3), gray)
    boxes: list[Box] = []
    taken = []
    for _ in range(count):
        for _ in range(max_tries):
            s = math.exp(rng.uniform(math.log(min_size), math.log(max_size)))
            ar = math.exp(rng.uniform(math.log(0.5), math.log(2.0)))
            w = int(round(min(max(s * math.sqrt(ar), min_size), max_size)))
            h = int(round(min(max(s / math.sqrt(ar), min_size), max_size)))
            x0 = int(rng.integers(0, size - w + 1))
            y0 = int(rng.integers(0, size - h + 1))
            # one pixel gap so edges stay visible
            if all(x0 > r + 1 or x0 + w + 1 < l or y0 > b + 1 or y0 + h + 1 < t
                   for t, l, b, r in taken):
                break
        else:
            continue
        k = int(rng.integers(num_classes))
        img[y0:y0 + h, x0:x0 + w] = class_color(rng, k, num_classes)
        taken.append((y0, x0, y0 + h, x0 + w))
        boxes.append(Box(k, x0 + w / 2, y0 + h / 2, float(w), float(h)))
    return np.clip(np.round(img), 0, 255).astype(np.uint8), boxes


def make_synthetic(out_dir, n_images: int, image_size: int = 128, num_classes: int = 3,
                   instances: tuple = (1, 4), seed: int = 0, name: str = "annotations.json",
                   min_size: float = 8.0) -> Annotations:
    """Write ``n_images`` PPM images plus an annotation file into ``out_dir``."""
    lo, hi = instances
    if not 1 <= lo <= hi:
        raise ValueError(f"bad instance range {instances}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    ann = Annotations(num_classes, root=out)
    for n in range(n_images):
        count = int(rng.integers(lo, hi + 1))
        pixels, boxes = synth_image(rng, image_size, num_classes, count, min_size=min_size)
        rel = f"images/{n:06d}.ppm"
        write_ppm(out / rel, pixels)
        ann.images.append(ImageRecord(n, image_size, image_size, rel))
        ann.instances[n] = boxes
    save_annotations(ann, out / name)
    return ann


def to_tensor(pixels: np.ndarray, dtype=np.float32) -> np.ndarray:
    """(H, W, 3) uint8 -> normalized (3, H, W)."""
    x = pixels.astype(np.float64).transpose(2, 0, 1) / 255.0
    return ((x - PIXEL_MEAN) / PIXEL_STD).astype(dtype)


def hflip(pixels: np.ndarray, boxes: list, width: int):
    flipped = [Box(b.class_id, width - b.x, b.y, b.w, b.h) for b in boxes]
    return pixels[:, ::-1], flipped


class Dataset:
    """In-memory images and boxes for training and evaluation."""

    def __init__(self, ann: Annotations):
        self.ann = ann
        self.records = list(ann.images)
        self.pixels = [ann.load_image(r) for r in self.records]
        self.boxes = [ann.boxes(r.id) for r in self.records]

    def __len__(self):
        return len(self.records)

    def batch(self, indices, flips=None, dtype=np.float32):
        """Stack images ``indices`` into (N, 3, H, W); ``flips`` is an optional bool per image."""
        imgs, boxes = [], []
        for n, idx in enumerate(indices):
            px, bx = self.pixels[idx], self.boxes[idx]
            if flips is not None and flips[n]:
                px, bx = hflip(px, bx, self.records[idx].width)
            imgs.append(to_tensor(px, dtype))
            boxes.append(bx)
        return np.stack(imgs), boxes
