"""Data-consistency stage: penalized weighted least squares with a lesion
refining constraint, solved by alternating gradient descent on an augmented
Lagrangian.

The restored image f_hat acts as a quadratic prior; high-value (lesion)
pixels are pinned to their observed values through a masked equality
constraint; the refined variable u carries the fidelity term against the
observed data y under per-pixel inverse-variance weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .phantom import ImageGrid


class DcsError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ThresholdPolicy:
    """How the lesion threshold is chosen.

    kind "quantile": value is a quantile q of the in-body intensity
    distribution.  kind "background": value is a multiple m of the in-body
    median.  kind "fixed": value is the threshold itself.
    """

    kind: str = "quantile"
    value: float = 0.98

    def __post_init__(self):
        if self.kind not in ("quantile", "background", "fixed"):
            raise DcsError(f"unknown threshold kind '{self.kind}'")
        if self.kind == "quantile" and not 0.0 < self.value < 1.0:
            raise DcsError("quantile must lie in (0, 1)")
        if self.kind == "background" and self.value <= 0:
            raise DcsError("background multiple must be positive")


@dataclass(frozen=True)
class DcsConfig:
    mu: float = 1.0            # prior weight on ||x - f_hat||^2
    eta: float = 1.0           # refine blend
    rho: float = 1.0           # mask-constraint penalty
    gamma_pen: float = 1.0     # refine-constraint penalty
    delta: float = 1e-2        # gradient step size
    kappa: float = 1e-4        # outer-loop convergence threshold
    outer_iters: int = 2
    inner_steps: int = 20
    threshold_kind: str = "quantile"
    threshold_value: float = 0.98
    fidelity: str = "box3"     # identity | box3 | network
    eps_w: float = 1e-3        # variance floor for the weights

    def __post_init__(self):
        if self.mu < 0 or self.rho < 0 or self.gamma_pen < 0:
            raise DcsError("penalty weights must be non-negative")
        if self.eta <= 0 or self.delta <= 0 or self.kappa <= 0 or self.eps_w <= 0:
            raise DcsError("eta, delta, kappa, eps_w must be positive")
        if self.outer_iters < 1 or self.inner_steps < 1:
            raise DcsError("iteration counts must be >= 1")
        if self.fidelity not in ("identity", "box3", "network"):
            raise DcsError(f"unknown fidelity '{self.fidelity}'")
        ThresholdPolicy(self.threshold_kind, self.threshold_value)

    @property
    def policy(self) -> ThresholdPolicy:
        return ThresholdPolicy(self.threshold_kind, self.threshold_value)


# ---------------------------------------------------------------------------
# lesion mask


def label_components(mask: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """4-connected component labeling by breadth-first flood fill.

    Returns (labels, sizes) where labels is 0 on background and 1..n on
    components, and sizes[k-1] is the pixel count of component k.
    """
    mask = np.asarray(mask, dtype=bool)
    labels = np.zeros(mask.shape, dtype=np.int32)
    sizes: list[int] = []
    h, w = mask.shape
    for si in range(h):
        for sj in range(w):
            if not mask[si, sj] or labels[si, sj]:
                continue
            lab = len(sizes) + 1
            stack = [(si, sj)]
            labels[si, sj] = lab
            count = 0
            while stack:
                i, j = stack.pop()
                count += 1
                if i > 0 and mask[i - 1, j] and not labels[i - 1, j]:
                    labels[i - 1, j] = lab
                    stack.append((i - 1, j))
                if i + 1 < h and mask[i + 1, j] and not labels[i + 1, j]:
                    labels[i + 1, j] = lab
                    stack.append((i + 1, j))
                if j > 0 and mask[i, j - 1] and not labels[i, j - 1]:
                    labels[i, j - 1] = lab
                    stack.append((i, j - 1))
                if j + 1 < w and mask[i, j + 1] and not labels[i, j + 1]:
                    labels[i, j + 1] = lab
                    stack.append((i, j + 1))
            sizes.append(count)
    return labels, sizes


MIN_COMPONENT_PX = 2


@dataclass(frozen=True)
class LesionMask:
    mask: np.ndarray       # binary, float64 {0, 1}
    values: np.ndarray     # mask * source
    threshold: float

    def __post_init__(self):
        bad = (self.mask != 0) & (self.mask != 1)
        if np.any(bad):
            raise DcsError("mask must be binary")
        off = self.values[self.mask == 0]
        if off.size and np.any(off != 0):
            raise DcsError("values must vanish off the mask")


def extract_lesion_mask(x, policy: ThresholdPolicy | None = None) -> LesionMask:
    """Threshold the image into a high-value mask; drop speckle components.

    Pixels strictly above the policy threshold are selected; 4-connected
    components smaller than MIN_COMPONENT_PX pixels are discarded.  The
    in-body region (strictly positive pixels) defines the statistics for
    the quantile and background policies.
    """
    policy = policy or ThresholdPolicy()
    vals = x.values if isinstance(x, ImageGrid) else np.asarray(x)
    vals = np.asarray(vals, dtype=np.float64)
    if vals.ndim != 2:
        raise DcsError("expected a 2-d image")
    if np.any(vals < 0):
        raise DcsError("image must be non-negative")
    body = vals > 0
    if not np.any(body):
        raise DcsError("empty body region")
    if policy.kind == "quantile":
        thr = float(np.quantile(vals[body], policy.value))
    elif policy.kind == "background":
        thr = policy.value * float(np.median(vals[body]))
    else:
        thr = policy.value
    raw = vals > thr
    labels, sizes = label_components(raw)
    mask = np.zeros_like(vals)
    for k, size in enumerate(sizes, start=1):
        if size >= MIN_COMPONENT_PX:
            mask[labels == k] = 1.0
    return LesionMask(mask=mask, values=mask * vals, threshold=thr)


def refine(x: np.ndarray, v: np.ndarray, eta: float) -> np.ndarray:
    """u = (x + eta * v) / 2 elementwise."""
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if x.shape != v.shape:
        raise DcsError("shape mismatch in refine")
    return 0.5 * (x + eta * v)


# ---------------------------------------------------------------------------
# fidelity operator


def box3(img: np.ndarray) -> np.ndarray:
    """3x3 mean with border renormalization (divides by the in-bounds
    neighbor count, so constants map to themselves)."""
    img = np.asarray(img, dtype=np.float64)
    padded = np.pad(img, 1)
    acc = np.zeros_like(img)
    for dy in range(3):
        for dx in range(3):
            acc += padded[dy:dy + img.shape[0], dx:dx + img.shape[1]]
    return acc / _box3_counts(img.shape)


def _box3_counts(shape) -> np.ndarray:
    ones = np.ones(shape, dtype=np.float64)
    padded = np.pad(ones, 1)
    acc = np.zeros(shape, dtype=np.float64)
    for dy in range(3):
        for dx in range(3):
            acc += padded[dy:dy + shape[0], dx:dx + shape[1]]
    return acc


def box3_adjoint(z: np.ndarray) -> np.ndarray:
    """Transpose of box3: divide by counts first, then sum neighbors
    (the unnormalized stencil is symmetric)."""
    z = np.asarray(z, dtype=np.float64)
    scaled = z / _box3_counts(z.shape)
    padded = np.pad(scaled, 1)
    acc = np.zeros_like(z)
    for dy in range(3):
        for dx in range(3):
            acc += padded[dy:dy + z.shape[0], dx:dx + z.shape[1]]
    return acc


@dataclass(frozen=True)
class FidelityOp:
    """The degradation surrogate zeta in the data term ||y - zeta(u)||_w^2.

    identity: zeta(u) = u.  box3: scale-preserving local mean.  network:
    caller-supplied forward/vjp pair (apply_fn maps an image to an image,
    vjp_fn maps (u, cotangent) to the input gradient).
    """

    kind: str = "identity"
    apply_fn: object = None
    vjp_fn: object = None

    def apply(self, u: np.ndarray) -> np.ndarray:
        if self.kind == "identity":
            return np.asarray(u, dtype=np.float64)
        if self.kind == "box3":
            return box3(u)
        if self.apply_fn is None:
            raise DcsError("network fidelity requires apply_fn")
        return np.asarray(self.apply_fn(u), dtype=np.float64)

    def vjp(self, u: np.ndarray, cot: np.ndarray) -> np.ndarray:
        if self.kind == "identity":
            return np.asarray(cot, dtype=np.float64)
        if self.kind == "box3":
            return box3_adjoint(cot)
        if self.vjp_fn is None:
            raise DcsError("network fidelity requires vjp_fn")
        return np.asarray(self.vjp_fn(u, cot), dtype=np.float64)


def make_fidelity(cfg: DcsConfig, apply_fn=None, vjp_fn=None) -> FidelityOp:
    return FidelityOp(kind=cfg.fidelity, apply_fn=apply_fn, vjp_fn=vjp_fn)


# ---------------------------------------------------------------------------
# state and data model


@dataclass
class DataModel:
    """Observed target y, inverse-variance weights, and the fidelity map."""

    y: np.ndarray
    w: np.ndarray
    fidelity: FidelityOp

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64)
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.y.shape != self.w.shape:
            raise DcsError("y and w must share a shape")
        if np.any(self.w <= 0):
            raise DcsError("weights must be positive")


def make_data_model(x0: ImageGrid, fraction: float, counts_per_activity: float,
                    cfg: DcsConfig, apply_fn=None, vjp_fn=None) -> DataModel:
    """Poisson-motivated weights: sigma^2 = max(x0 / (fraction * counts), eps)."""
    if fraction <= 0 or counts_per_activity <= 0:
        raise DcsError("dose parameters must be positive")
    var = np.maximum(x0.values.astype(np.float64) / (fraction * counts_per_activity),
                     cfg.eps_w)
    return DataModel(y=x0.values.astype(np.float64), w=1.0 / var,
                     fidelity=make_fidelity(cfg, apply_fn, vjp_fn))


@dataclass
class DcsState:
    x: np.ndarray
    u: np.ndarray
    v: np.ndarray
    mask: np.ndarray
    lam1: np.ndarray
    lam2: np.ndarray
    y: np.ndarray
    w: np.ndarray
    fidelity: FidelityOp
    f_hat: np.ndarray

    def __post_init__(self):
        shape = self.x.shape
        for name in ("u", "v", "mask", "lam1", "lam2", "y", "w", "f_hat"):
            if getattr(self, name).shape != shape:
                raise DcsError(f"{name} shape differs from x")


# ---------------------------------------------------------------------------
# augmented Lagrangian terms


def lagrangian_value(x: np.ndarray, u: np.ndarray, st: DcsState, cfg: DcsConfig) -> float:
    c = refine(x, st.v, cfg.eta)
    res_m = st.mask * x - st.v
    res_u = u - c
    data = float(np.sum(st.w * (st.y - st.fidelity.apply(u)) ** 2))
    return (data
            + float(np.sum(st.lam1 * res_m))
            + float(np.sum(st.lam2 * res_u))
            + 0.5 * cfg.rho * float(np.sum(res_m ** 2))
            + 0.5 * cfg.gamma_pen * float(np.sum(res_u ** 2))
            + cfg.mu * float(np.sum((x - st.f_hat) ** 2)))


def lagrangian_grad_x(x: np.ndarray, u: np.ndarray, st: DcsState, cfg: DcsConfig) -> np.ndarray:
    c = refine(x, st.v, cfg.eta)
    return (st.mask * st.lam1
            - 0.5 * st.lam2
            + cfg.rho * st.mask * (st.mask * x - st.v)
            - 0.5 * cfg.gamma_pen * (u - c)
            + 2.0 * cfg.mu * (x - st.f_hat))


def lagrangian_grad_u(x: np.ndarray, u: np.ndarray, st: DcsState, cfg: DcsConfig) -> np.ndarray:
    c = refine(x, st.v, cfg.eta)
    resid = st.y - st.fidelity.apply(u)
    return (-st.fidelity.vjp(u, 2.0 * st.w * resid)
            + st.lam2
            + cfg.gamma_pen * (u - c))


def _objective_x(x, st, cfg):
    # the u-data term is constant in x; drop it for the subproblem
    c = refine(x, st.v, cfg.eta)
    res_m = st.mask * x - st.v
    return (float(np.sum(st.lam1 * res_m))
            - 0.5 * float(np.sum(st.lam2 * x))
            + 0.5 * cfg.rho * float(np.sum(res_m ** 2))
            + 0.5 * cfg.gamma_pen * float(np.sum((st.u - c) ** 2))
            + cfg.mu * float(np.sum((x - st.f_hat) ** 2)))


def _objective_u(u, st, cfg):
    c = refine(st.x, st.v, cfg.eta)
    res_u = u - c
    return (float(np.sum(st.w * (st.y - st.fidelity.apply(u)) ** 2))
            + float(np.sum(st.lam2 * res_u))
            + 0.5 * cfg.gamma_pen * float(np.sum(res_u ** 2)))


MAX_CONSECUTIVE_INCREASES = 5


def _descend(z0, objective, gradient, cfg: DcsConfig):
    """Plain gradient descent with halving on objective increase.

    A candidate step that raises the objective is rejected and the step
    size halved; MAX_CONSECUTIVE_INCREASES rejections in a row abort.
    """
    z = z0.copy()
    step = cfg.delta
    obj = objective(z)
    bad = 0
    for _ in range(cfg.inner_steps):
        cand = z - step * gradient(z)
        cand_obj = objective(cand)
        if not math.isfinite(cand_obj):
            raise DcsError("non-finite subproblem objective")
        # slack covers rounding churn once the iterate sits at the minimum
        if cand_obj > obj + 1e-12 * (1.0 + abs(obj)):
            step *= 0.5
            bad += 1
            if bad >= MAX_CONSECUTIVE_INCREASES:
                raise DcsError("subproblem diverged: objective increased "
                               f"{bad} consecutive steps")
            continue
        z, obj = cand, cand_obj
        bad = 0
    return z


def update_x(st: DcsState, cfg: DcsConfig) -> np.ndarray:
    """Gradient steps on the x subproblem (u, v, multipliers fixed)."""
    return _descend(st.x,
                    lambda z: _objective_x(z, st, cfg),
                    lambda z: lagrangian_grad_x(z, st.u, st, cfg),
                    cfg)


def update_u(st: DcsState, cfg: DcsConfig) -> np.ndarray:
    """Gradient steps on the u subproblem (x, v, multipliers fixed)."""
    return _descend(st.u,
                    lambda z: _objective_u(z, st, cfg),
                    lambda z: lagrangian_grad_u(st.x, z, st, cfg),
                    cfg)


# ---------------------------------------------------------------------------
# outer loop


@dataclass
class DcsResult:
    image: ImageGrid
    x: np.ndarray
    state: DcsState
    mask_residuals: list = field(default_factory=list)
    refine_residuals: list = field(default_factory=list)
    step_norms: list = field(default_factory=list)
    iterations: int = 0


def dcs_outer_loop(st: DcsState, cfg: DcsConfig, pixel_mm: float = 1.0) -> DcsResult:
    """Alternate the two subproblems, take one explicit gradient step on x,
    then dual-ascend; stop early once x moves less than kappa."""
    result = DcsResult(image=None, x=st.x, state=st)
    for i in range(cfg.outer_iters):
        x_prev = st.x.copy()
        st.x = update_x(st, cfg)
        st.u = update_u(st, cfg)
        st.x = st.x - cfg.delta * lagrangian_grad_x(st.x, st.u, st, cfg)
        c = refine(st.x, st.v, cfg.eta)
        st.lam1 = st.lam1 + cfg.rho * (st.mask * st.x - st.v)
        st.lam2 = st.lam2 + cfg.gamma_pen * (st.u - c)
        result.mask_residuals.append(float(np.linalg.norm(st.mask * st.x - st.v)))
        result.refine_residuals.append(float(np.linalg.norm(st.u - c)))
        step_norm = float(np.linalg.norm(st.x - x_prev))
        result.step_norms.append(step_norm)
        result.iterations = i + 1
        if step_norm < cfg.kappa:
            break
    result.x = st.x
    result.image = ImageGrid(np.maximum(st.x, 0.0).astype(np.float32), pixel_mm)
    return result


def run_dcs(x0: ImageGrid, f_hat: ImageGrid, model: DataModel, cfg: DcsConfig) -> DcsResult:
    """Full stage: mask extraction, refinement, and the outer loop.

    x0 is the observed low-dose image, f_hat the restored image serving as
    the prior reference.  Deterministic given inputs and config.
    """
    if x0.values.shape != f_hat.values.shape:
        raise DcsError("x0 and f_hat must share a shape")
    if model.y.shape != x0.values.shape:
        raise DcsError("data model shape mismatch")
    lesion = extract_lesion_mask(x0, cfg.policy)
    x = x0.values.astype(np.float64)
    u = refine(x, lesion.values, cfg.eta)
    st = DcsState(x=x, u=u, v=lesion.values, mask=lesion.mask,
                  lam1=np.zeros_like(x), lam2=np.zeros_like(x),
                  y=model.y, w=model.w, fidelity=model.fidelity,
                  f_hat=f_hat.values.astype(np.float64))
    return dcs_outer_loop(st, cfg, pixel_mm=x0.pixel_mm)
