"""Loss assembly, SGD training loop and the end-to-end gradient check."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autograd
from .anchors import anchor_branch_loss, generate_anchors, match_anchors
from .config import TrainConfig
from .geometry import Box
from .losses import (combined_loss, instance_level_losses, total_classification_loss,
                     total_regression_loss)
from .model import ModelParams, anchor_spec, build_model, forward_graph
from .selection import heuristic_select, online_select
from .targets import generate_targets

log = logging.getLogger(__name__)


class NumericalError(FloatingPointError):
    """A loss or gradient became non-finite during training."""


@dataclass
class LossReport:
    ab: float = 0.0
    af_cls: float = 0.0
    af_reg: float = 0.0
    total: float = 0.0


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def select_levels(config: TrainConfig, boxes: list[Box], probs, offsets, mode: str | None = None):
    """Assign one pyramid level per box. ``probs``/``offsets`` are per-level
    (K, H, W) / (4, H, W) maps of one image."""
    mode = mode or config.selection
    pyramid = config.pyramid
    results = []
    for n, box in enumerate(boxes):
        if mode == "online":
            table = instance_level_losses(box, probs, offsets, pyramid, config.S, config.eps_e,
                                          instance_id=n, alpha=config.alpha, gamma=config.gamma)
            results.append(online_select(table))
        else:
            results.append(heuristic_select(box.w, box.h, config.heuristic_l0, pyramid,
                                            config.canonical_size, instance=n))
    return results


def _check_finite(value, what, iteration, image, levels=None, boxes=()):
    if math.isfinite(value):
        return
    detail = f"iteration {iteration}, image {image}: non-finite {what} ({value})"
    if levels is not None:
        detail += "; instance levels " + ", ".join(
            f"#{n}->{l}" for n, l in enumerate(levels))
    raise NumericalError(detail)


def compute_loss(params: ModelParams, images: np.ndarray, boxes: list[list[Box]],
                 assignments=None, iteration: int = 0):
    """Forward the batch and build the combined loss and its parameter gradients.

    ``assignments`` may fix the per-image level lists (used by the gradient
    check); otherwise they are selected from this forward pass.
    Returns ``(report, grads, assignments)``; ``grads`` maps parameter names
    to arrays and omits parameters that received no gradient.
    """
    config = params.config
    leaves, graphs = forward_graph(params, images)
    n_img = len(images)
    report = LossReport()
    outputs, upstream = [], []
    used = []
    image_shape = (images.shape[2], images.shape[3])

    if config.use_af and config.af_weight != 0:
        logits = [g.af_logits.data.astype(np.float64) for g in graphs]
        regs = [g.af_reg.data.astype(np.float64) for g in graphs]
        probs = [_sigmoid(x) for x in logits]
        g_cls = [np.zeros_like(x) for x in logits]
        g_reg = [np.zeros_like(x) for x in regs]
        for i in range(n_img):
            p_i = [p[i] for p in probs]
            r_i = [r[i] for r in regs]
            if assignments is not None:
                levels = list(assignments[i])
            else:
                levels = [s.level for s in select_levels(config, boxes[i], p_i, r_i)]
            used.append(levels)
            cmaps, rmaps = generate_targets(boxes[i], levels, config.pyramid, config.num_classes,
                                            image_shape, config.S, config.eps_e, config.eps_i)
            cls = total_classification_loss(cmaps, p_i, config.alpha, config.gamma)
            reg = total_regression_loss(rmaps, r_i)
            _check_finite(cls.value, "anchor-free classification loss", iteration, i, levels)
            _check_finite(reg.value, "anchor-free regression loss", iteration, i, levels)
            report.af_cls += cls.value / n_img
            report.af_reg += reg.value / n_img
            scale = config.af_weight / n_img
            for lv, (gc, gr) in enumerate(zip(cls.gradient, reg.gradient)):
                g_cls[lv][i] = gc * scale
                g_reg[lv][i] = gr * scale
        for g, gc, gr in zip(graphs, g_cls, g_reg):
            outputs += [g.af_logits, g.af_reg]
            upstream += [gc, gr]
    else:
        used = [[] for _ in range(n_img)] if assignments is None else list(assignments)

    if config.use_ab:
        k = config.num_classes
        anchors = np.concatenate(generate_anchors(config.pyramid, anchor_spec(config), image_shape))
        a = anchor_spec(config).num_anchors

        def flat(t, width):
            # (N, A*width, H, W) -> (N, H*W*A, width), matching anchor order (i, j, a)
            n, _, h, w = t.shape
            return t.reshape(n, a, width, h, w).transpose(0, 3, 4, 1, 2).reshape(n, -1, width)

        def unflat(g, t, width):
            n, _, h, w = t.shape
            return g.reshape(n, h, w, a, width).transpose(0, 3, 4, 1, 2).reshape(t.shape)

        cls_flat = np.concatenate([flat(g.ab_logits.data.astype(np.float64), k) for g in graphs], 1)
        reg_flat = np.concatenate([flat(g.ab_reg.data.astype(np.float64), 4) for g in graphs], 1)
        g_cls_flat = np.zeros_like(cls_flat)
        g_reg_flat = np.zeros_like(reg_flat)
        for i in range(n_img):
            match = match_anchors(anchors, boxes[i], config.fg_thresh, config.bg_thresh)
            res = anchor_branch_loss(match, _sigmoid(cls_flat[i]), reg_flat[i], anchors, boxes[i],
                                     config.alpha, config.gamma)
            _check_finite(res.value, "anchor-based loss", iteration, i)
            report.ab += res.value / n_img
            g_cls_flat[i] = res.gradient[0] / n_img
            g_reg_flat[i] = res.gradient[1] / n_img
        start = 0
        for g in graphs:
            count = g.ab_logits.shape[2] * g.ab_logits.shape[3] * a
            outputs += [g.ab_logits, g.ab_reg]
            upstream += [unflat(g_cls_flat[:, start:start + count], g.ab_logits, k),
                         unflat(g_reg_flat[:, start:start + count], g.ab_reg, 4)]
            start += count

    report.total = combined_loss(report.ab, report.af_cls, report.af_reg, config.af_weight)
    _check_finite(report.total, "total loss", iteration, -1)
    autograd.backward(outputs, upstream)
    grads = {name: t.grad for name, t in leaves.items() if t.grad is not None}
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"iteration {iteration}: non-finite gradient in {name}")
    return report, grads, used


class SGD:
    """Momentum SGD with L2 weight decay folded into the gradient (PyTorch style).

    Parameters without a gradient this step are left untouched.
    """

    def __init__(self, params: ModelParams, momentum: float, weight_decay: float):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = {}

    def step(self, grads: dict, lr: float) -> None:
        for name, g in grads.items():
            p = self.params[name]
            d = g.astype(p.dtype) + self.weight_decay * p
            buf = self.buffers.get(name)
            buf = d if buf is None else self.momentum * buf + d
            self.buffers[name] = buf
            p -= lr * buf


@dataclass
class TrainState:
    params: ModelParams
    optimizer: SGD
    rng: np.random.Generator
    iteration: int = 0
    history: list = field(default_factory=list)


class Trainer:
    """Owns the parameters and runs the per-iteration update."""

    def __init__(self, config: TrainConfig, dataset, params: ModelParams | None = None):
        self.config = config
        self.dataset = dataset
        params = params if params is not None else build_model(config)
        # a dedicated stream for batch sampling and flips, separate from init
        rng = np.random.default_rng([config.seed, 1])
        self.state = TrainState(params, SGD(params, config.momentum, config.weight_decay), rng)
        self._order = np.array([], dtype=np.int64)

    @property
    def params(self) -> ModelParams:
        return self.state.params

    def _next_indices(self):
        bs = self.config.batch_size
        if len(self._order) < bs:
            perm = self.state.rng.permutation(len(self.dataset))
            self._order = np.concatenate([self._order, perm])
        idx, self._order = self._order[:bs], self._order[bs:]
        return idx

    def train_step(self) -> LossReport:
        config = self.config
        it = self.state.iteration
        idx = self._next_indices()
        flips = self.state.rng.random(len(idx)) < 0.5 if config.flip else None
        images, boxes = self.dataset.batch(idx, flips, dtype=np.dtype(config.dtype))
        report, grads, _ = compute_loss(self.params, images, boxes, iteration=it)
        self.state.optimizer.step(grads, config.lr_at(it))
        self.state.iteration += 1
        self.state.history.append(report)
        return report

    def train(self, iterations: int | None = None, log_path=None, log_every: int = 100):
        iterations = self.config.iterations if iterations is None else iterations
        writer = None
        fh = None
        if log_path is not None:
            fh = open(log_path, "w", newline="")
            writer = csv.writer(fh)
            writer.writerow(["iteration", "lr", "loss_ab", "loss_af_cls", "loss_af_reg", "total"])
        try:
            start = time.perf_counter()
            for _ in range(iterations):
                it = self.state.iteration
                lr = self.config.lr_at(it)
                r = self.train_step()
                if writer is not None:
                    writer.writerow([it, repr(lr), repr(r.ab), repr(r.af_cls), repr(r.af_reg),
                                     repr(r.total)])
                if log_every and (it + 1) % log_every == 0:
                    log.info("iter %d  loss %.4f (ab %.4f, cls %.4f, reg %.4f)  %.1fs", it + 1,
                             r.total, r.ab, r.af_cls, r.af_reg, time.perf_counter() - start)
        finally:
            if fh is not None:
                fh.close()
        return self.state.history


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_layer: dict  # layer name -> max relative error over its sampled entries
    samples: int
    tolerance: float
    kinks: int = 0  # samples excluded because a ReLU flipped even at the smallest step

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    @property
    def worst_layer(self) -> str:
        return max(self.per_layer, key=self.per_layer.get)


def gradient_check(params: ModelParams, images: np.ndarray, boxes, samples: int = 200,
                   step: float = 1e-5, tolerance: float = 1e-4, seed: int = 0,
                   floor: float = 1e-6, corrupt: str | None = None,
                   min_step: float = 1e-8) -> GradCheckReport:
    """Compare backprop with central differences on randomly sampled parameters.

    Runs in float64. Level assignments are taken from the unperturbed forward
    pass and held fixed, since selection is piecewise constant. Relative error
    is ``|a - n| / max(|a|, |n|, floor)``. ``corrupt`` names a parameter whose
    analytic gradient is deliberately scaled, for fault-injection tests.

    A central difference is only meaningful if no ReLU changes state inside
    ``[theta - h, theta + h]``. When one does, the step is divided by 10 (down
    to ``min_step``); samples that still straddle a kink are excluded and
    counted in ``report.kinks``.
    """
    params = params.astype(np.float64)
    images = np.asarray(images, dtype=np.float64)
    with autograd.record_relu_masks() as base_masks:
        _, grads, fixed = compute_loss(params, images, boxes)

    def probe():
        with autograd.record_relu_masks() as masks:
            value = compute_loss(params, images, boxes, assignments=fixed)[0].total
        same = all(np.array_equal(a, b) for a, b in zip(masks, base_masks))
        return value, same
    if corrupt is not None:
        grads[corrupt] = grads[corrupt] * 1.5 + 1e-3
    names = list(params)
    sizes = np.array([params[n].size for n in names])
    rng = np.random.default_rng(seed)
    picks = rng.choice(sizes.sum(), size=min(samples, int(sizes.sum())), replace=False)
    bounds = np.cumsum(sizes)
    per_layer: dict = {}
    worst = 0.0
    kinks = 0
    for flat_idx in np.sort(picks):
        k = int(np.searchsorted(bounds, flat_idx, side="right"))
        name = names[k]
        local = int(flat_idx - (bounds[k] - sizes[k]))
        arr = params[name].reshape(-1)
        orig = arr[local]
        h = step
        while True:
            arr[local] = orig + h
            plus, same_plus = probe()
            arr[local] = orig - h
            minus, same_minus = probe()
            arr[local] = orig
            if (same_plus and same_minus) or h / 10 < min_step:
                break
            h /= 10
        if not (same_plus and same_minus):
            kinks += 1
            continue
        numeric = (plus - minus) / (2 * h)
        analytic = float(grads[name].reshape(-1)[local]) if name in grads else 0.0
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        layer = name.rsplit(".", 1)[0]
        per_layer[layer] = max(per_layer.get(layer, 0.0), err)
        worst = max(worst, err)
    return GradCheckReport(worst, per_layer, len(picks), tolerance, kinks)
