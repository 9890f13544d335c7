"""Differentiable layers used by the rotation-aware network.

Feature maps are (N, C, H, W). Every op returns a new ``Tensor`` whose
backward closure captures only what it needs.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from derotnet.errors import ShapeError
from derotnet.nn.tensor import Tensor, make_node


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.values.ndim != 4 or w.values.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weights, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError(f"conv2d channel axis mismatch: input has {c}, weights expect {cw}")
    if b.shape != (f,):
        raise ShapeError(f"conv2d bias axis mismatch: expected ({f},), got {b.shape}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and pad >= 0 (got {stride}, {pad})")
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(wd, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input {h}x{wd}")

    # channel-last im2col: columns ordered (ki, kj, channel)
    xl = x.values.transpose(0, 2, 3, 1)
    if pad:
        xl = np.pad(xl, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = np.concatenate([xl[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
                           for i in range(kh) for j in range(kw)], axis=3).reshape(n * ho * wo, kh * kw * c)
    wm = w.values.transpose(0, 2, 3, 1).reshape(f, -1)
    out = (cols @ wm.T + b.values).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gw = (g2.T @ cols).reshape(f, kh, kw, c).transpose(0, 3, 1, 2) if w.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wm).reshape(n, ho, wo, kh, kw, c)
            gxl = np.zeros(xl.shape)
            for i in range(kh):
                for j in range(kw):
                    gxl[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
            gx = gxl[:, pad:pad + h, pad:pad + wd, :] if pad else gxl
            gx = np.ascontiguousarray(gx.transpose(0, 3, 1, 2))
        return gx, gw, gb

    return make_node(np.ascontiguousarray(out), (x, w, b), backward, "conv2d")


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.maximum(x.values, 0.0)
    return make_node(out, (x,), lambda g: (g * (x.values > 0),), "relu")


def maxpool2(x: Tensor) -> Tensor:
    """2x2 stride-2 max pool; odd extents are padded with -inf."""
    x = _as_tensor(x)
    n, c, h, w = x.shape
    ph, pw = h % 2, w % 2
    xv = x.values
    if ph or pw:
        xv = np.pad(xv, ((0, 0), (0, 0), (0, ph), (0, pw)), constant_values=-np.inf)
    # window cells in row-major order: (0,0), (0,1), (1,0), (1,1)
    cells = (xv[:, :, 0::2, 0::2], xv[:, :, 0::2, 1::2], xv[:, :, 1::2, 0::2], xv[:, :, 1::2, 1::2])
    out = np.maximum(np.maximum(cells[0], cells[1]), np.maximum(cells[2], cells[3]))

    def backward(g):
        gx = np.zeros(xv.shape)
        taken = np.zeros(out.shape, bool)
        for (di, dj), cell in zip(((0, 0), (0, 1), (1, 0), (1, 1)), cells):
            win = (cell == out) & ~taken          # first index wins ties
            taken |= win
            gx[:, :, di::2, dj::2] = np.where(win, g, 0.0)
        return (gx[:, :, :h, :w],)

    return make_node(out, (x,), backward, "maxpool2")


def flatten(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    return make_node(x.values.reshape(shape[0], -1), (x,), lambda g: (g.reshape(shape),), "flatten")


def fully_connected(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Row-vector affine map ``x @ w.T + b``; ``w`` is (out, in)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    xv = x.values.reshape(x.shape[0], -1)
    if w.values.ndim != 2 or xv.shape[1] != w.shape[1]:
        raise ShapeError(f"fully_connected: input rows have {xv.shape[1]} features, weights {w.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"fully_connected: bias {b.shape} does not match {w.shape[0]} outputs")
    out = xv @ w.values.T + b.values
    shape = x.shape

    def backward(g):
        gx = (g @ w.values).reshape(shape) if x.requires_grad else None
        gw = g.T @ xv if w.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return make_node(out, (x, w, b), backward, "fully_connected")


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of softmax(logits) against one-hot rows."""
    logits = _as_tensor(logits)
    y = np.asarray(labels.values if isinstance(labels, Tensor) else labels, dtype=np.float64)
    if y.shape != logits.shape or logits.values.ndim != 2:
        raise ShapeError(f"labels {y.shape} do not match logits {logits.shape}")
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
        raise ValueError("label rows must be one-hot")
    n = logits.shape[0]
    z = logits.values
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    loss = -(y * logp).sum() / n
    p = np.exp(logp)
    return make_node(np.array(loss), (logits,), lambda g: (g * (p - y) / n,), "softmax_xent")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ {a.shape} vs {b.shape}")
    return make_node(a.values + b.values, (a, b), lambda g: (g, g), "add")


def scale(a: Tensor, k: float) -> Tensor:
    a = _as_tensor(a)
    return make_node(a.values * k, (a,), lambda g: (g * k,), "scale")


def weighted_sum(a: Tensor, weights) -> Tensor:
    """Scalar ``sum(a * weights)`` with constant weights; handy as a probe loss."""
    a = _as_tensor(a)
    wv = np.broadcast_to(np.asarray(weights, dtype=np.float64), a.shape)
    return make_node(np.array((a.values * wv).sum()), (a,), lambda g: (g * wv,), "weighted_sum")


def tsum(a: Tensor) -> Tensor:
    return weighted_sum(a, 1.0)
