"""Dense float tensors on a reverse-mode differentiation tape.

Forward values are float32 in normal operation; the whole graph can also be
run in float64 so finite-difference oracles can separate algorithmic error
from rounding. Every op returns a fresh array, and tensor data must be
treated as frozen once wrapped (the optimizer mutates leaf data between
steps, never while a graph that uses it is alive).

Grad recording is thread-local, so independent graphs may be built and
differentiated on separate threads; a single graph must stay on one thread.
"""

from __future__ import annotations

import threading
from typing import Sequence

import numpy as np

MAX_RANK = 4

ALLOWED_DTYPES = (np.float32, np.float64)


class NumericError(ValueError):
    """Invalid shapes, arguments, or graph state in a tensor op."""


class NonFiniteError(NumericError):
    """An op produced or received NaN or Inf."""


_tls = threading.local()


def grad_enabled() -> bool:
    return getattr(_tls, "grad_enabled", True)


class no_grad:
    """Context manager that disables tape recording on this thread."""

    def __enter__(self):
        self._prev = grad_enabled()
        _tls.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _tls.grad_enabled = self._prev
        return False


class Node:
    """One recorded op: its id, input tensors, attributes, and output."""

    __slots__ = ("op", "inputs", "attrs", "out_data")

    def __init__(self, op: str, inputs: tuple, attrs: dict, out_data: np.ndarray):
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.out_data = out_data


class Tensor:
    """A dense float32/float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        # float32 unless the caller opts into the float64 shadow mode
        dtype = np.dtype(np.float32 if dtype is None else dtype)
        if dtype.type not in ALLOWED_DTYPES:
            raise NumericError(f"unsupported dtype {dtype}")
        arr = np.array(data, dtype=dtype, copy=True, order="C")
        if arr.ndim > MAX_RANK:
            raise NumericError(f"rank {arr.ndim} exceeds the {MAX_RANK}-axis limit")
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    @classmethod
    def _from_op(cls, out_data: np.ndarray, node: Node | None) -> "Tensor":
        t = cls.__new__(cls)
        t.data = out_data
        t.requires_grad = node is not None
        t.grad = None
        t.node = node
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise NumericError("item() needs a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._from_op(self.data, None)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


# op id -> vjp function, populated by ops.py on import.
OP_VJPS: dict = {}


def _toposort(root: Tensor) -> list:
    """Tensors with nodes in forward topological order (inputs first)."""
    seen: set[int] = set()
    order: list[Tensor] = []
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if t.node is None:
            continue
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for parent in t.node.inputs:
            stack.append((parent, False))
    return order


def backward(output: Tensor, seed=None, leaves: Sequence[Tensor] | None = None) -> None:
    """Reverse pass from ``output``; accumulates into ``.grad`` of leaves.

    ``seed`` is the cotangent of ``output`` (ones when omitted). Every node
    is visited exactly once, in a deterministic order, so two runs on
    identical inputs produce bit-identical gradients. When ``leaves`` is
    given, each listed tensor must receive a gradient or the call raises.
    """
    if seed is None:
        seed_arr = np.ones_like(output.data)
    else:
        seed_arr = seed.data if isinstance(seed, Tensor) else np.asarray(seed)
        seed_arr = seed_arr.astype(output.data.dtype, copy=True)
    if seed_arr.shape != output.data.shape:
        raise NumericError(
            f"seed shape {seed_arr.shape} does not match output {output.data.shape}"
        )

    order = _toposort(output)
    grads: dict[int, np.ndarray] = {id(output): seed_arr}
    if output.node is None:
        if output.requires_grad:
            output.grad = seed_arr if output.grad is None else output.grad + seed_arr
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t.node
        vjp = OP_VJPS.get(node.op)
        if vjp is None:
            raise NumericError(f"no vjp registered for op '{node.op}'")
        in_datas = [p.data for p in node.inputs]
        input_grads = vjp(g, node.out_data, in_datas, node.attrs)
        if len(input_grads) != len(node.inputs):
            raise NumericError(f"vjp arity mismatch for op '{node.op}'")
        for parent, gin in zip(node.inputs, input_grads):
            if gin is None:
                continue
            if not (parent.requires_grad or parent.node is not None):
                continue
            if gin.shape != parent.data.shape:
                raise NumericError(
                    f"vjp shape bug in '{node.op}': {gin.shape} vs {parent.data.shape}"
                )
            if not np.isfinite(gin).all():
                raise NonFiniteError(f"non-finite gradient out of op '{node.op}'")
            if parent.node is None:
                if parent.requires_grad:
                    parent.grad = gin if parent.grad is None else parent.grad + gin
            else:
                prev = grads.get(id(parent))
                grads[id(parent)] = gin if prev is None else prev + gin

    if leaves is not None:
        for leaf in leaves:
            if leaf.grad is None:
                raise NumericError("leaf never reached by the backward pass")
