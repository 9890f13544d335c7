from __future__ import annotations

from typing import Callable

import numpy as np

from derotnet.nn.tensor import Tensor


def relative_error(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def numeric_grad(fn: Callable[[], Tensor], wrt: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. every entry of ``wrt``."""
    flat = wrt.values.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = _scalar(fn())
        flat[i] = orig - eps
        fm = _scalar(fn())
        flat[i] = orig
        out[i] = (fp - fm) / (2 * eps)
    return out.reshape(wrt.shape)


def _scalar(t: Tensor) -> float:
    if t.values.size != 1:
        raise ValueError(f"gradient check needs a scalar output, got shape {t.shape}")
    return float(t.values.reshape(()))


def grad_check(fn: Callable[[], Tensor], wrt: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences.

    ``fn`` must rebuild the graph on each call so that perturbations of
    ``wrt.values`` are seen.
    """
    prev = wrt.requires_grad
    wrt.requires_grad = True
    wrt.grad = None
    out = fn()
    _scalar(out)
    out.backward()
    analytic = np.zeros(wrt.shape) if wrt.grad is None else wrt.grad.copy()
    wrt.grad = None
    numeric = numeric_grad(fn, wrt, eps)
    wrt.requires_grad = prev
    return float(relative_error(analytic, numeric).max(initial=0.0))
