"""Toy fully-convolutional detector with a feature pyramid and FSAF heads.

Backbone: a stride-2 stem, a stride-2 conv, then three two-conv blocks that
each halve resolution and produce C3, C4, C5. Lateral 1x1 convs and a
nearest-neighbour top-down path give P3-P5; extra stride-2 convs on P5 give
P6 and P7 when ``l_max`` asks for them. Classification and regression towers
(one 3x3 conv each) are shared across levels; the anchor-free heads add one
3x3 conv with K filters (sigmoid) and one with 4 filters (ReLU). The optional
anchor-based heads sit on the same towers.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .anchors import AnchorSpec
from .autograd import Tensor, add, conv2d, relu, sigmoid, upsample2x
from .config import TrainConfig

MAGIC = b"FSAF"
FORMAT_VERSION = 1


class ModelParams(dict):
    """Ordered ``name -> ndarray`` map plus the config that shaped it."""

    def __init__(self, config: TrainConfig, tensors=()):
        super().__init__(tensors)
        self.config = config

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.items()})

    @property
    def num_parameters(self) -> int:
        return sum(v.size for v in self.values())


def anchor_spec(config: TrainConfig) -> AnchorSpec:
    return AnchorSpec(base_multiplier=config.anchor_base)


def _layer_specs(config: TrainConfig):
    """(name, c_in, c_out, kernel, init) for every conv, in creation order."""
    c0, c1, c2, c3, c4 = config.backbone_channels
    f, k = config.width, config.num_classes
    a = anchor_spec(config).num_anchors
    specs = [("stem", 3, c0, 3, "he"), ("down1", c0, c1, 3, "he"),
             ("c3a", c1, c2, 3, "he"), ("c3b", c2, c2, 3, "he"),
             ("c4a", c2, c3, 3, "he"), ("c4b", c3, c3, 3, "he"),
             ("c5a", c3, c4, 3, "he"), ("c5b", c4, c4, 3, "he")]
    chans = {3: c2, 4: c3, 5: c4}
    for level in range(3, min(config.l_max, 5) + 1):
        specs.append((f"lat{level}", chans[level], f, 1, "he"))
        specs.append((f"out{level}", f, f, 3, "he"))
    for level in range(6, config.l_max + 1):
        specs.append((f"p{level}", f, f, 3, "he"))
    specs += [("cls_tower", f, f, 3, "gauss"), ("reg_tower", f, f, 3, "gauss")]
    if config.use_af:
        specs += [("af_cls", f, k, 3, "cls"), ("af_reg", f, 4, 3, "reg")]
    if config.use_ab:
        specs += [("ab_cls", f, a * k, 3, "cls"), ("ab_reg", f, a * 4, 3, "gauss")]
    return specs


def build_model(config: TrainConfig) -> ModelParams:
    """Initialize parameters deterministically from ``config.seed``.

    Backbone and pyramid convs use He-normal weights (there is no pretrained
    backbone to start from). Head convs use N(0, ``init_std``); classification
    biases start at ``-log((1 - prior) / prior)`` and anchor-free regression
    biases at ``reg_bias``.
    """
    rng = np.random.default_rng(config.seed)
    dtype = np.dtype(config.dtype)
    params = ModelParams(config)
    cls_bias = -math.log((1 - config.prior) / config.prior)
    for name, cin, cout, ksize, init in _layer_specs(config):
        std = math.sqrt(2.0 / (cin * ksize * ksize)) if init == "he" else config.init_std
        params[f"{name}.w"] = (rng.standard_normal((cout, cin, ksize, ksize)) * std).astype(dtype)
        bias = np.zeros(cout)
        if init == "cls":
            bias[:] = cls_bias
        elif init == "reg":
            bias[:] = config.reg_bias
        params[f"{name}.b"] = bias.astype(dtype)
    return params


@dataclass
class LevelGraph:
    """Graph outputs of one pyramid level (Tensors, batch-first)."""

    level: int
    af_logits: Tensor | None = None
    af_reg: Tensor | None = None
    ab_logits: Tensor | None = None
    ab_reg: Tensor | None = None


@dataclass
class LevelOutput:
    """Numeric outputs of one level for a batch."""

    level: int
    cls_prob: np.ndarray | None = None  # (N, K, H, W)
    reg: np.ndarray | None = None  # (N, 4, H, W), normalized offsets >= 0
    ab_cls_prob: np.ndarray | None = None  # (N, A*K, H, W)
    ab_reg: np.ndarray | None = None  # (N, A*4, H, W)


def pad_images(images: np.ndarray, multiple: int) -> np.ndarray:
    n, c, h, w = images.shape
    ph, pw = -h % multiple, -w % multiple
    if ph or pw:
        images = np.pad(images, ((0, 0), (0, 0), (0, ph), (0, pw)))
    return images


def forward_graph(params: ModelParams, images: np.ndarray, requires_grad: bool = True):
    """Run the network recording a graph.

    Returns ``(leaves, levels)``: the parameter Tensors by name and a list of
    :class:`LevelGraph` in ascending level order.
    """
    config = params.config
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[1] != 3:
        raise ValueError(f"expected an (N, 3, H, W) batch, got shape {images.shape}")
    images = pad_images(images.astype(next(iter(params.values())).dtype, copy=False),
                        2 ** config.l_max)
    leaves = {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.items()}

    def conv(name, x, stride=1):
        return conv2d(x, leaves[f"{name}.w"], leaves[f"{name}.b"], stride)

    x = Tensor(images)
    x = relu(conv("stem", x, 2))
    x = relu(conv("down1", x, 2))
    feats = {}
    for level in (3, 4, 5):
        x = relu(conv(f"c{level}a", x, 2))
        x = relu(conv(f"c{level}b", x))
        feats[level] = x
    top = min(config.l_max, 5)
    pyramid = {}
    prev = None
    for level in range(top, 2, -1):
        lat = conv(f"lat{level}", feats[level])
        prev = lat if prev is None else add(lat, upsample2x(prev))
        pyramid[level] = conv(f"out{level}", prev)
    if config.l_max >= 6:
        x = conv("p6", pyramid[5], 2)
        pyramid[6] = x
        for level in range(7, config.l_max + 1):
            x = conv(f"p{level}", relu(x), 2)
            pyramid[level] = x

    levels = []
    for level in config.pyramid.levels:
        p = pyramid[level]
        cls_feat = relu(conv("cls_tower", p))
        reg_feat = relu(conv("reg_tower", p))
        out = LevelGraph(level)
        if config.use_af:
            out.af_logits = conv("af_cls", cls_feat)
            out.af_reg = relu(conv("af_reg", reg_feat))
        if config.use_ab:
            out.ab_logits = conv("ab_cls", cls_feat)
            out.ab_reg = conv("ab_reg", reg_feat)
        levels.append(out)
    return leaves, levels


def forward(params: ModelParams, images: np.ndarray) -> list[LevelOutput]:
    """Inference forward pass: per-level probabilities and offsets."""
    _, graphs = forward_graph(params, images, requires_grad=False)
    outs = []
    for g in graphs:
        out = LevelOutput(g.level)
        if g.af_logits is not None:
            out.cls_prob = sigmoid(g.af_logits).data
            out.reg = g.af_reg.data
        if g.ab_logits is not None:
            out.ab_cls_prob = sigmoid(g.ab_logits).data
            out.ab_reg = g.ab_reg.data
        outs.append(out)
    return outs


def save_model(params: ModelParams, path) -> None:
    """Write ``FSAF`` magic, uint32 version, uint32 manifest length, the JSON
    manifest, then every tensor as little-endian float32 in manifest order."""
    manifest = {
        "config": params.config.to_dict(),
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
    }
    blob = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        f.write(blob)
        for v in params.values():
            f.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_model(path, dtype=None) -> ModelParams:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not an FSAF model file")
    version, size = struct.unpack("<II", data[4:12])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported model format version {version}")
    manifest = json.loads(data[12:12 + size])
    config = TrainConfig.from_dict(manifest["config"])
    dtype = np.dtype(dtype or config.dtype)
    params = ModelParams(config)
    offset = 12 + size
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"]))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        params[entry["name"]] = arr.reshape(entry["shape"]).astype(dtype)
        offset += 4 * count
    if offset != len(data):
        raise ValueError(f"{path}: {len(data) - offset} trailing bytes after payload")
    return params
