"""Minimal reverse-mode autodiff over numpy arrays.

Only the operations the descriptor network needs are provided. Convolutions
use strided im2col views; their backward passes scatter back with one
strided add per kernel tap.
"""
from __future__ import annotations

from typing import Callable, List, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, parents: Sequence["Tensor"] = (), backward: Optional[Callable] = None,
                 requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data)
        self.grad = None
        self._parents = tuple(parents)
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in self._parents)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def _accum(self, g):
        if not self.requires_grad:
            return
        self.grad = g if self.grad is None else self.grad + g

    def backward(self, grad=None):
        topo: List[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data) if grad is None else grad
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, name={self.name})"


def param(array, name=None) -> Tensor:
    return Tensor(array, requires_grad=True, name=name)


def constant(array) -> Tensor:
    return Tensor(array)


# --------------------------------------------------------------------------
# elementwise / dense
# --------------------------------------------------------------------------


def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    out = x.data @ W.data + b.data

    def back(g):
        if x.requires_grad:
            x._accum(g @ W.data.T)
        W._accum(x.data.T @ g)
        b._accum(g.sum(axis=0))

    return Tensor(out, (x, W, b), back)


def relu(x: Tensor, trace: Optional[list] = None) -> Tensor:
    on = x.data > 0
    if trace is not None:
        trace.append(on)

    def back(g):
        x._accum(g * on)

    return Tensor(x.data * on, (x,), back)


def flatten(x: Tensor) -> Tensor:
    shape = x.shape

    def back(g):
        x._accum(g.reshape(shape))

    return Tensor(x.data.reshape(shape[0], -1), (x,), back)


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        for t, part in zip(xs, np.split(g, splits, axis=axis)):
            t._accum(part)

    return Tensor(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), back)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over all spatial axes: (N, C, ...) -> (N, C)."""
    axes = tuple(range(2, x.data.ndim))
    count = int(np.prod([x.shape[a] for a in axes]))

    def back(g):
        x._accum(np.broadcast_to(g.reshape(g.shape + (1,) * len(axes)) / count, x.shape).copy())

    return Tensor(x.data.mean(axis=axes), (x,), back)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    z = logits.data
    n = z.shape[0]
    zs = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(zs).sum(axis=1))
    loss = (logsum - zs[np.arange(n), labels]).mean()
    p = np.exp(zs - logsum[:, None])

    def back(g):
        d = p.copy()
        d[np.arange(n), labels] -= 1.0
        logits._accum(d * (g / n))

    return Tensor(np.asarray(loss, dtype=z.dtype), (logits,), back)


# --------------------------------------------------------------------------
# convolutions and pooling
# --------------------------------------------------------------------------


def _windows2d(xp, k, s, Ho, Wo):
    N, C = xp.shape[:2]
    sN, sC, sH, sW = xp.strides
    # (C, k, k, N, Ho, Wo) so the im2col matrix is (C*k*k, N*Ho*Wo)
    return as_strided(xp, (C, k, k, N, Ho, Wo), (sC, sH, sW, sN, sH * s, sW * s), writeable=False)


def _conv_out(Wm, cols, b, F, N, spatial):
    out = (Wm @ cols).reshape((F, N) + spatial)
    out += b.reshape((F, 1) + (1,) * len(spatial))
    return np.moveaxis(out, 0, 1)


def conv2d(x: Tensor, W: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """x (N, C, H, W) correlated with W (F, C, k, k); zero padding."""
    N, C, H, Wd = x.shape
    F, _, k, _ = W.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (Wd + 2 * pad - k) // stride + 1
    cols = _windows2d(xp, k, stride, Ho, Wo).reshape(C * k * k, N * Ho * Wo)
    Wm = W.data.reshape(F, -1)
    out = _conv_out(Wm, cols, b.data, F, N, (Ho, Wo))

    def back(g):
        g2 = np.moveaxis(g, 1, 0).reshape(F, -1)
        W._accum((g2 @ cols.T).reshape(W.shape))
        b._accum(g2.sum(axis=1))
        if x.requires_grad:
            dcols = (Wm.T @ g2).reshape(C, k, k, N, Ho, Wo)
            dxp = np.zeros((N, C) + xp.shape[2:], dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[:, i, j].transpose(1, 0, 2, 3)
            x._accum(dxp[:, :, pad:pad + H, pad:pad + Wd] if pad else dxp)

    return Tensor(out, (x, W, b), back)


def conv3d(x: Tensor, W: Tensor, b: Tensor, pad: int = 1) -> Tensor:
    """x (N, C, D, H, W) correlated with W (F, C, k, k, k), stride 1."""
    N, C, D, H, Wd = x.shape
    F, _, k, _, _ = W.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad))) if pad else x.data
    Do, Ho, Wo = D + 2 * pad - k + 1, H + 2 * pad - k + 1, Wd + 2 * pad - k + 1
    sN, sC, sD, sH, sW = xp.strides
    win = as_strided(xp, (C, k, k, k, N, Do, Ho, Wo), (sC, sD, sH, sW, sN, sD, sH, sW), writeable=False)
    cols = win.reshape(C * k ** 3, N * Do * Ho * Wo)
    Wm = W.data.reshape(F, -1)
    out = _conv_out(Wm, cols, b.data, F, N, (Do, Ho, Wo))

    def back(g):
        g2 = np.moveaxis(g, 1, 0).reshape(F, -1)
        W._accum((g2 @ cols.T).reshape(W.shape))
        b._accum(g2.sum(axis=1))
        if x.requires_grad:
            dcols = (Wm.T @ g2).reshape(C, k, k, k, N, Do, Ho, Wo)
            dxp = np.zeros((N, C) + xp.shape[2:], dtype=g.dtype)
            for a in range(k):
                for i in range(k):
                    for j in range(k):
                        dxp[:, :, a:a + Do, i:i + Ho, j:j + Wo] += dcols[:, a, i, j].transpose(1, 0, 2, 3, 4)
            x._accum(dxp[:, :, pad:pad + D, pad:pad + H, pad:pad + Wd] if pad else dxp)

    return Tensor(out, (x, W, b), back)


def maxpool3d(x: Tensor, trace: Optional[list] = None) -> Tensor:
    """Non-overlapping 2x2x2 max pooling; ties go to the first element."""
    N, C, D, H, Wd = x.shape
    v = x.data.reshape(N, C, D // 2, 2, H // 2, 2, Wd // 2, 2)
    v = v.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(N, C, D // 2, H // 2, Wd // 2, 8)
    arg = v.argmax(axis=-1)
    if trace is not None:
        trace.append(arg)
    out = np.take_along_axis(v, arg[..., None], axis=-1)[..., 0]

    def back(g):
        d = np.zeros(v.shape, dtype=g.dtype)
        np.put_along_axis(d, arg[..., None], g[..., None], axis=-1)
        d = d.reshape(N, C, D // 2, H // 2, Wd // 2, 2, 2, 2).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        x._accum(d.reshape(x.shape))

    return Tensor(out, (x,), back)
