"""Finite-difference oracle for the op vocabulary.

Runs an op on float64 inputs, reduces the output with a fixed random
weighting, and compares tape gradients against central differences. The
canonical suite below covers every registered op (the test suite asserts
that coverage so a new op cannot dodge the harness); inputs for kinked or
singular ops are pushed away from the bad set before differencing.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Tensor


def _condition_inputs(op: str, arrays: list[np.ndarray]) -> None:
    if op == "abs":
        a = arrays[0]
        a += 0.5 * np.sign(a) + (a == 0.0)
    elif op == "div":
        b = arrays[1]
        b += np.sign(b) + (b == 0.0)
    elif op == "clamp_min":
        # keep every input a healthy distance from the clamp threshold
        a = arrays[0]
        a += 0.5 * np.sign(a) + (a == 0.0)


def grad_check(op: str, shapes, eps: float = 1e-4, tol: float = 1e-4,
               seed: int = 0, attrs: dict | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    The relative error for one parameter is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`` and the
    returned value is the max over every element of every input. ``tol`` is
    carried for callers that want a ready verdict via ``passed(...)``.
    """
    rng = np.random.default_rng(seed)
    attrs = dict(attrs or {})
    arrays = [rng.standard_normal(s) for s in shapes]
    _condition_inputs(op, arrays)

    ins = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    out = ops.apply(op, ins, **attrs)
    weight = rng.standard_normal(out.shape)
    ops.backward(out, seed=weight, leaves=ins)

    def value() -> float:
        with ops.no_grad():
            o = ops.apply(op, [Tensor(a, dtype=np.float64) for a in arrays], **attrs)
        return float((o.data * weight).sum())

    worst = 0.0
    for k, t in enumerate(ins):
        analytic = t.grad
        flat = arrays[k].reshape(-1)
        numeric = np.zeros_like(flat)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            fp = value()
            flat[idx] = orig - eps
            fm = value()
            flat[idx] = orig
            numeric[idx] = (fp - fm) / (2.0 * eps)
        numeric = numeric.reshape(arrays[k].shape)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        rel = np.abs(analytic - numeric) / denom
        worst = max(worst, float(rel.max()))
    return worst


# One or more canonical instances per registered op.
CHECK_SUITE: list[tuple[str, list, dict]] = [
    ("matmul", [(4, 3), (3, 2)], {}),
    ("matmul", [(3, 4), (3, 2)], {"transpose_a": True}),
    ("matmul", [(4, 3), (2, 3)], {"transpose_b": True}),
    ("matmul", [(2, 4, 3), (2, 3, 5)], {}),
    ("matmul", [(2, 4, 3), (2, 5, 3)], {"transpose_b": True}),
    ("matmul", [(4, 3), (3,)], {}),
    ("matmul", [(3,), (3, 5)], {}),
    ("matmul", [(3,), (3,)], {}),
    ("conv1x1", [(3, 5, 4), (6, 3)], {}),
    ("conv1x1", [(3, 5, 4), (6, 3), (6,)], {}),
    ("dwconv3x3", [(2, 5, 5), (2, 3, 3)], {}),
    ("dwconv3x3", [(2, 4, 6), (2, 3, 3), (2,)], {}),
    ("add", [(3, 4, 4), (3, 4, 4)], {}),
    ("add", [(3, 4, 4), (3, 1, 1)], {}),
    ("mul", [(3, 4, 4), (3, 4, 4)], {}),
    ("mul", [(3, 1, 1), (3, 4, 4)], {}),
    ("div", [(3, 4), (3, 4)], {}),
    ("div", [(2, 3, 3), (2, 1, 1)], {}),
    ("scale", [(3, 4)], {"factor": -1.7}),
    ("abs", [(4, 5)], {}),
    ("clamp_min", [(4, 5)], {"min_value": 0.0}),
    ("gelu", [(4, 5)], {}),
    ("layernorm", [(6, 4, 4), (6,), (6,)], {"eps": 1e-5}),
    ("layernorm", [(8,), (8,), (8,)], {"eps": 1e-5}),
    ("softmax", [(5, 6)], {"axis": 1}),
    ("softmax", [(2, 4, 4)], {"axis": 2}),
    ("space_to_channel", [(2, 6, 4)], {"r": 2}),
    ("channel_to_space", [(8, 3, 2)], {"r": 2}),
    ("reshape", [(3, 4, 2)], {"shape": (6, 4)}),
    ("concat", [(2, 3), (4, 3)], {"axis": 0}),
    ("concat", [(2, 3), (2, 2), (2, 1)], {"axis": 1}),
    ("mean", [(3, 4, 5)], {"axis": None}),
    ("mean", [(3, 4, 5)], {"axis": (1, 2)}),
    ("mean", [(6, 4)], {"axis": 0}),
    ("sum_sq", [(3, 4)], {}),
]


def suite_ops() -> set:
    return {op for op, _, _ in CHECK_SUITE}


def run_suite(eps: float = 1e-4, tol: float = 1e-4, seed: int = 0):
    """Run every canonical instance; yields (op, shapes, attrs, error)."""
    results = []
    for i, (op, shapes, attrs) in enumerate(CHECK_SUITE):
        err = grad_check(op, shapes, eps=eps, tol=tol, seed=seed + i, attrs=attrs)
        results.append((op, shapes, attrs, err))
    return results
