"""The op vocabulary: forward rules and their adjoints.

Ops are registered in a closed table so the finite-difference harness can
enumerate them exhaustively. Forward functions are pure array-in/array-out;
adjoints receive the upstream cotangent plus the saved forward values and
return one gradient (or None) per input slot.

Shapes follow the channel-first convention: feature maps are (C, H, W),
vectors are (C,), and batched matrices carry one leading axis.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .tensor import (
    MAX_RANK,
    NonFiniteError,
    NumericError,
    OP_VJPS,
    Tensor,
    as_tensor,
    backward,
    grad_enabled,
    no_grad,
)
from . import kernels

__all__ = [
    "apply", "registered_ops", "backward", "no_grad", "Tensor",
    "matmul", "conv1x1", "dwconv3x3", "add", "sub", "mul", "div", "scale",
    "abs_", "clamp_min", "layernorm", "softmax", "gelu",
    "space_to_channel", "channel_to_space", "reshape", "concat",
    "mean", "sum_sq",
]

_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))

_FORWARDS: dict = {}
# arity -1 marks variadic ops (concat).
_ARITY: dict = {}


def _register(name: str, arity: int, fwd, vjp) -> None:
    _FORWARDS[name] = fwd
    _ARITY[name] = arity
    OP_VJPS[name] = vjp


def registered_ops() -> tuple:
    return tuple(sorted(_FORWARDS))


def apply(op: str, inputs, **attrs) -> Tensor:
    """Dispatch one op over Tensor inputs and record it on the tape."""
    fwd = _FORWARDS.get(op)
    if fwd is None:
        raise NumericError(f"unknown op '{op}'")
    arity = _ARITY[op]
    if arity >= 0 and len(inputs) != arity:
        # optional-bias convs accept arity or arity+1
        if not (op in ("conv1x1", "dwconv3x3") and len(inputs) == arity + 1):
            raise NumericError(f"op '{op}' expects {arity} inputs, got {len(inputs)}")
    dtype = None
    for x in inputs:
        if isinstance(x, Tensor):
            dtype = x.data.dtype
            break
    tensors = [x if isinstance(x, Tensor) else Tensor(x, dtype=dtype) for x in inputs]
    if dtype is None:
        dtype = tensors[0].data.dtype
    for t in tensors:
        if t.data.dtype != dtype:
            raise NumericError(f"mixed dtypes in op '{op}'")
    out = fwd([t.data for t in tensors], attrs)
    if out.dtype != dtype:
        out = out.astype(dtype)
    if out.ndim > MAX_RANK:
        raise NumericError(f"op '{op}' produced rank {out.ndim} output")
    if not np.isfinite(out).all():
        raise NonFiniteError(f"op '{op}' produced NaN or Inf")
    node = None
    if grad_enabled() and any(t.requires_grad for t in tensors):
        from .tensor import Node

        node = Node(op, tuple(tensors), attrs, out)
    return Tensor._from_op(out, node)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast cotangent back down to ``shape``."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- matmul

def _matmul_fwd(ins, attrs):
    a, b = ins
    ta = attrs.get("transpose_a", False)
    tb = attrs.get("transpose_b", False)
    if a.ndim == 1 or b.ndim == 1:
        if ta or tb:
            raise NumericError("transpose flags need 2-D operands")
        if a.ndim == 1 and b.ndim == 1:
            if a.shape != b.shape:
                raise NumericError("matmul vector lengths differ")
        return np.matmul(a, b)
    A = np.swapaxes(a, -1, -2) if ta else a
    B = np.swapaxes(b, -1, -2) if tb else b
    if A.ndim != B.ndim:
        raise NumericError("matmul rank mismatch")
    if A.ndim == 3 and A.shape[0] != B.shape[0]:
        raise NumericError("matmul batch mismatch")
    if A.shape[-1] != B.shape[-2]:
        raise NumericError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    return np.matmul(A, B)


def _matmul_vjp(g, out, ins, attrs):
    a, b = ins
    ta = attrs.get("transpose_a", False)
    tb = attrs.get("transpose_b", False)
    if a.ndim == 1 and b.ndim == 1:
        return [g * b, g * a]
    if b.ndim == 1:
        # (m, n) @ (n,) -> (m,)
        return [np.outer(g, b), a.T @ g]
    if a.ndim == 1:
        # (n,) @ (n, k) -> (k,)
        return [b @ g, np.outer(a, g)]
    A = np.swapaxes(a, -1, -2) if ta else a
    B = np.swapaxes(b, -1, -2) if tb else b
    gA = np.matmul(g, np.swapaxes(B, -1, -2))
    gB = np.matmul(np.swapaxes(A, -1, -2), g)
    ga = np.swapaxes(gA, -1, -2) if ta else gA
    gb = np.swapaxes(gB, -1, -2) if tb else gB
    return [ga, gb]


_register("matmul", 2, _matmul_fwd, _matmul_vjp)


# ---------------------------------------------------------------- conv1x1

def _conv1x1_fwd(ins, attrs):
    x, w = ins[0], ins[1]
    if x.ndim != 3 or w.ndim != 2:
        raise NumericError("conv1x1 wants x:(C,H,W) and w:(Co,Ci)")
    if w.shape[1] != x.shape[0]:
        raise NumericError(f"conv1x1 channel mismatch: {w.shape} on {x.shape}")
    out = np.tensordot(w, x, axes=([1], [0]))
    if len(ins) == 3:
        b = ins[2]
        if b.shape != (w.shape[0],):
            raise NumericError("conv1x1 bias shape mismatch")
        out = out + b[:, None, None]
    return out


def _conv1x1_vjp(g, out, ins, attrs):
    x, w = ins[0], ins[1]
    gx = np.tensordot(w, g, axes=([0], [0]))
    gw = np.tensordot(g, x, axes=([1, 2], [1, 2]))
    if len(ins) == 3:
        return [gx, gw, g.sum(axis=(1, 2))]
    return [gx, gw]


_register("conv1x1", 2, _conv1x1_fwd, _conv1x1_vjp)


# -------------------------------------------------------------- dwconv3x3

def _dwconv3x3_fwd(ins, attrs):
    x, w = ins[0], ins[1]
    out = kernels.dwconv3x3_fwd(x, w)
    if len(ins) == 3:
        b = ins[2]
        if b.shape != (x.shape[0],):
            raise NumericError("dwconv3x3 bias shape mismatch")
        out = out + b[:, None, None]
    return out


def _dwconv3x3_vjp(g, out, ins, attrs):
    x, w = ins[0], ins[1]
    gx = kernels.dwconv3x3_bwd_input(g, w)
    gw = kernels.dwconv3x3_bwd_weight(g, x)
    if len(ins) == 3:
        return [gx, gw, g.sum(axis=(1, 2))]
    return [gx, gw]


_register("dwconv3x3", 2, _dwconv3x3_fwd, _dwconv3x3_vjp)


# ----------------------------------------------------- elementwise binary

def _binary_shape_check(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise NumericError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


def _add_fwd(ins, attrs):
    a, b = ins
    _binary_shape_check(a, b, "add")
    return a + b


def _add_vjp(g, out, ins, attrs):
    a, b = ins
    return [_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)]


_register("add", 2, _add_fwd, _add_vjp)


def _mul_fwd(ins, attrs):
    a, b = ins
    _binary_shape_check(a, b, "mul")
    return a * b


def _mul_vjp(g, out, ins, attrs):
    a, b = ins
    return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]


_register("mul", 2, _mul_fwd, _mul_vjp)


def _div_fwd(ins, attrs):
    a, b = ins
    _binary_shape_check(a, b, "div")
    return a / b


def _div_vjp(g, out, ins, attrs):
    a, b = ins
    return [
        _unbroadcast(g / b, a.shape),
        _unbroadcast(-g * a / (b * b), b.shape),
    ]


_register("div", 2, _div_fwd, _div_vjp)


# ------------------------------------------------------ elementwise unary

def _scale_fwd(ins, attrs):
    return ins[0] * attrs["factor"]


def _scale_vjp(g, out, ins, attrs):
    return [g * attrs["factor"]]


_register("scale", 1, _scale_fwd, _scale_vjp)


def _abs_fwd(ins, attrs):
    return np.abs(ins[0])


def _abs_vjp(g, out, ins, attrs):
    # subgradient 0 at the kink
    return [g * np.sign(ins[0])]


_register("abs", 1, _abs_fwd, _abs_vjp)


def _clamp_min_fwd(ins, attrs):
    return np.maximum(ins[0], attrs["min_value"])


def _clamp_min_vjp(g, out, ins, attrs):
    return [g * (ins[0] > attrs["min_value"])]


_register("clamp_min", 1, _clamp_min_fwd, _clamp_min_vjp)


def _gelu_fwd(ins, attrs):
    x = ins[0]
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def _gelu_vjp(g, out, ins, attrs):
    x = ins[0]
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return [g * (cdf + x * pdf)]


_register("gelu", 1, _gelu_fwd, _gelu_vjp)


# -------------------------------------------------------------- layernorm

def _ln_stats(x, eps):
    mu = x.mean(axis=0, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=0, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return xc * inv


def _affine_shape(v, ndim):
    return v.reshape(v.shape + (1,) * (ndim - 1))


def _layernorm_fwd(ins, attrs):
    x, gamma, beta = ins
    if gamma.shape != (x.shape[0],) or beta.shape != (x.shape[0],):
        raise NumericError("layernorm affine shape mismatch")
    if x.shape[0] < 1:
        raise NumericError("layernorm needs a channel axis")
    eps = attrs.get("eps", 1e-5)
    xhat = _ln_stats(x, eps)
    return xhat * _affine_shape(gamma, x.ndim) + _affine_shape(beta, x.ndim)


def _layernorm_vjp(g, out, ins, attrs):
    x, gamma, beta = ins
    eps = attrs.get("eps", 1e-5)
    mu = x.mean(axis=0, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=0, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    red = tuple(range(1, x.ndim))
    dgamma = (g * xhat).sum(axis=red) if red else g * xhat
    dbeta = g.sum(axis=red) if red else g.copy()
    dxhat = g * _affine_shape(gamma, x.ndim)
    dx = inv * (
        dxhat
        - dxhat.mean(axis=0, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=0, keepdims=True)
    )
    return [dx, dgamma, dbeta]


_register("layernorm", 3, _layernorm_fwd, _layernorm_vjp)


# ---------------------------------------------------------------- softmax

def _softmax_fwd(ins, attrs):
    x = ins[0]
    axis = attrs["axis"]
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _softmax_vjp(g, out, ins, attrs):
    axis = attrs["axis"]
    s = out
    return [s * (g - (g * s).sum(axis=axis, keepdims=True))]


_register("softmax", 1, _softmax_fwd, _softmax_vjp)


# ----------------------------------------------------- pixel reshuffling

def _space_to_channel_fwd(ins, attrs):
    x = ins[0]
    r = attrs["r"]
    if x.ndim != 3:
        raise NumericError("space_to_channel wants (C,H,W)")
    C, H, W = x.shape
    if r < 1 or H % r or W % r:
        raise NumericError(f"space_to_channel: {H}x{W} not divisible by r={r}")
    # out[c*r*r + dy*r + dx, i, j] = x[c, i*r + dy, j*r + dx]
    return (
        x.reshape(C, H // r, r, W // r, r)
        .transpose(0, 2, 4, 1, 3)
        .reshape(C * r * r, H // r, W // r)
    )


def _channel_to_space_fwd(ins, attrs):
    x = ins[0]
    r = attrs["r"]
    if x.ndim != 3:
        raise NumericError("channel_to_space wants (C,H,W)")
    C, H, W = x.shape
    if r < 1 or C % (r * r):
        raise NumericError(f"channel_to_space: {C} channels not divisible by r*r={r * r}")
    return (
        x.reshape(C // (r * r), r, r, H, W)
        .transpose(0, 3, 1, 4, 2)
        .reshape(C // (r * r), H * r, W * r)
    )


def _space_to_channel_vjp(g, out, ins, attrs):
    return [_channel_to_space_fwd([g], attrs)]


def _channel_to_space_vjp(g, out, ins, attrs):
    return [_space_to_channel_fwd([g], attrs)]


_register("space_to_channel", 1, _space_to_channel_fwd, _space_to_channel_vjp)
_register("channel_to_space", 1, _channel_to_space_fwd, _channel_to_space_vjp)


# ---------------------------------------------------------------- reshape

def _reshape_fwd(ins, attrs):
    x = ins[0]
    shape = tuple(attrs["shape"])
    if any(s < 0 for s in shape):
        raise NumericError("reshape needs explicit non-negative dims")
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise NumericError(f"reshape size mismatch: {x.shape} -> {shape}")
    return x.reshape(shape).copy()


def _reshape_vjp(g, out, ins, attrs):
    return [g.reshape(ins[0].shape)]


_register("reshape", 1, _reshape_fwd, _reshape_vjp)


# ----------------------------------------------------------------- concat

def _concat_fwd(ins, attrs):
    axis = attrs["axis"]
    if not ins:
        raise NumericError("concat of nothing")
    nd = ins[0].ndim
    for x in ins:
        if x.ndim != nd:
            raise NumericError("concat rank mismatch")
    return np.concatenate(ins, axis=axis)


def _concat_vjp(g, out, ins, attrs):
    axis = attrs["axis"]
    sizes = np.cumsum([x.shape[axis] for x in ins])[:-1]
    return [p.copy() for p in np.split(g, sizes, axis=axis)]


_register("concat", -1, _concat_fwd, _concat_vjp)


# ------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _mean_fwd(ins, attrs):
    x = ins[0]
    axis = _norm_axis(attrs.get("axis"), x.ndim)
    return np.mean(x, axis=axis)


def _mean_vjp(g, out, ins, attrs):
    x = ins[0]
    axis = _norm_axis(attrs.get("axis"), x.ndim)
    if axis is None:
        return [np.full_like(x, float(g) / x.size)]
    count = 1
    for a in axis:
        count *= x.shape[a]
    gk = np.expand_dims(g, axis)
    return [np.broadcast_to(gk, x.shape) / count]


_register("mean", 1, _mean_fwd, _mean_vjp)


def _sum_sq_fwd(ins, attrs):
    x = ins[0]
    return np.asarray((x * x).sum(), dtype=x.dtype)


def _sum_sq_vjp(g, out, ins, attrs):
    return [2.0 * float(g) * ins[0]]


_register("sum_sq", 1, _sum_sq_fwd, _sum_sq_vjp)


# ------------------------------------------------------------- wrappers

def matmul(a, b, transpose_a: bool = False, transpose_b: bool = False) -> Tensor:
    return apply("matmul", [a, b], transpose_a=transpose_a, transpose_b=transpose_b)


def conv1x1(x, w, b=None) -> Tensor:
    ins = [x, w] if b is None else [x, w, b]
    return apply("conv1x1", ins)


def dwconv3x3(x, w, b=None) -> Tensor:
    ins = [x, w] if b is None else [x, w, b]
    return apply("dwconv3x3", ins)


def add(a, b) -> Tensor:
    return apply("add", [a, b])


def mul(a, b) -> Tensor:
    return apply("mul", [a, b])


def div(a, b) -> Tensor:
    return apply("div", [a, b])


def scale(x, factor: float) -> Tensor:
    return apply("scale", [x], factor=float(factor))


def sub(a, b) -> Tensor:
    return add(a, scale(b, -1.0))


def abs_(x) -> Tensor:
    return apply("abs", [x])


def clamp_min(x, min_value: float) -> Tensor:
    return apply("clamp_min", [x], min_value=float(min_value))


def layernorm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    return apply("layernorm", [x, gamma, beta], eps=float(eps))


def softmax(x, axis: int) -> Tensor:
    return apply("softmax", [x], axis=int(axis))


def gelu(x) -> Tensor:
    return apply("gelu", [x])


def space_to_channel(x, r: int) -> Tensor:
    return apply("space_to_channel", [x], r=int(r))


def channel_to_space(x, r: int) -> Tensor:
    return apply("channel_to_space", [x], r=int(r))


def reshape(x, shape) -> Tensor:
    return apply("reshape", [x], shape=tuple(int(s) for s in shape))


def concat(xs, axis: int = 0) -> Tensor:
    return apply("concat", list(xs), axis=int(axis))


def mean(x, axis=None) -> Tensor:
    return apply("mean", [x], axis=axis)


def sum_sq(x) -> Tensor:
    return apply("sum_sq", [x])
