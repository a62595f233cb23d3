"""A minimal reverse-mode gradient engine over NCHW arrays.

Only the operations the toy detector needs are provided: convolution
(any odd kernel, stride 1 or 2), ReLU, logistic sigmoid, 2x nearest
upsampling and elementwise addition.
"""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from . import kernels

_relu_log = None


@contextmanager
def record_relu_masks():
    """Collect the activation mask of every :func:`relu` evaluated inside the block."""
    global _relu_log
    outer, _relu_log = _relu_log, []
    try:
        yield _relu_log
    finally:
        _relu_log = outer


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(name={self.name!r}, shape={self.data.shape})"

    def __add__(self, other):
        return add(self, other)

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g


def _result(data, parents, backward):
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=parents if needs else (),
                  _backward=backward if needs else None)


def backward(outputs, grads):
    """Backpropagate ``grads`` from ``outputs`` through the recorded graph.

    Gradients accumulate into ``.grad`` of every leaf with ``requires_grad``.
    Outputs paired with ``None`` are skipped.
    """
    pairs = [(t, g) for t, g in zip(outputs, grads) if g is not None and t.requires_grad]
    order, seen = [], set()
    for root, _ in pairs:
        stack = [(root, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            stack.extend((p, False) for p in node._parents if p.requires_grad)
    for t, g in pairs:
        t.accumulate(np.asarray(g, dtype=t.data.dtype))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """'Same'-padded cross-correlation; weight layout (C_out, C_in, kh, kw)."""
    n, c, h, width = x.shape
    co, ci, kh, kw = w.shape
    if ci != c:
        raise ValueError(f"conv expects {ci} input channels, got {c} (weight {w.name})")
    pad = kh // 2
    cols = kernels.im2col(x.data, kh, kw, stride, pad)
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (width + 2 * pad - kw) // stride + 1
    w2 = w.data.reshape(co, -1)
    out = w2 @ cols
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(co, n, ho, wo).transpose(1, 0, 2, 3)
    parents = (x, w) if b is None else (x, w, b)

    def _backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(co, -1)
        if w.requires_grad:
            w.accumulate((g2 @ cols.T).reshape(w.shape))
        if b is not None and b.requires_grad:
            b.accumulate(g2.sum(axis=1))
        if x.requires_grad:
            x.accumulate(kernels.col2im(w2.T @ g2, x.shape, kh, kw, stride, pad))

    return _result(np.ascontiguousarray(out), parents, _backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _relu_log is not None:
        _relu_log.append(mask)

    def _backward(g):
        x.accumulate(g * mask)

    return _result(x.data * mask, (x,), _backward)


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def _backward(g):
        x.accumulate(g * out * (1.0 - out))

    return _result(out, (x,), _backward)


def upsample2x(x: Tensor) -> Tensor:
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def _backward(g):
        n, c, h, w = g.shape
        x.accumulate(g.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)))

    return _result(out, (x,), _backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def _backward(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(g)

    return _result(a.data + b.data, (a, b), _backward)
