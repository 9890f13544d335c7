"""Reverse-mode autodiff over numpy arrays.

A ``Tensor`` wraps a float64 array. Operations build a DAG by recording their
parents and a closure that maps the output gradient to parent gradients;
``Tensor.backward`` walks the DAG in reverse topological order.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from derotnet.errors import NonFiniteError

_DEBUG = False


def set_debug(flag: bool) -> None:
    """Enable finiteness checks on every op output."""
    global _DEBUG
    _DEBUG = bool(flag)


def debug_enabled() -> bool:
    return _DEBUG


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "name", "_parents", "_backward", "op")

    def __init__(self, values, requires_grad: bool = False, name: str = ""):
        self.values = np.asarray(values, dtype=np.float64, order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.shape)
        else:
            self.grad += g.reshape(self.shape)

    def backward(self, seed: np.ndarray | None = None) -> None:
        ComputeGraph(self).backward(seed)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"


def make_node(values: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(values)
    out.op = op
    if _DEBUG and not np.all(np.isfinite(out.values)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


class ComputeGraph:
    """Topologically ordered view of the DAG feeding ``output``."""

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes = self._toposort(output)

    @staticmethod
    def _toposort(root: Tensor) -> list[Tensor]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node._parents):
                if id(p) not in seen:
                    stack.append((p, False))
        return order

    def backward(self, seed: np.ndarray | None = None) -> None:
        out = self.output
        if seed is None:
            if out.values.size != 1:
                raise ValueError("backward without a seed needs a scalar output")
            seed = np.ones_like(out.values)
        out.accumulate(np.asarray(seed, dtype=np.float64))
        for node in reversed(self.nodes):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is not None and parent.requires_grad:
                    parent.accumulate(g)
            # interior gradients are not needed once propagated
            if node._parents:
                node.grad = None
