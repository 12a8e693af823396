"""Diffusion over compact prior vectors.

Forward corruption, a small conditional noise-prediction network, the
deterministic (variance-free) reverse update, and the T-step sampler that
produces the prior estimate consumed by the restoration stage.  Training
optimizes the whole reverse chain end to end with an L1 objective on the
sampled prior, which small T makes affordable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numeric as nm
from .jcp import JcpConfig, extract_condition, extract_jcp
from .optim import Adam, TrainingDiverged


class DiffusionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class DiffusionSchedule:
    """Noise schedule tables, all of length T+1.

    Index 0 is the identity slot (beta=0, alpha=1, alpha_bar=1) so that
    tables[t] refers to diffusion step t for t in 1..T.  alpha_bar is the
    inclusive product alpha_1 * ... * alpha_t.
    """

    t_steps: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        for name in ("beta", "alpha", "alpha_bar"):
            arr = getattr(self, name)
            if arr.shape != (self.t_steps + 1,):
                raise DiffusionError(f"{name} table must have length T+1")


def make_schedule(t_steps: int, beta_spec: tuple[float, float] = (0.1, 0.99)) -> DiffusionSchedule:
    """Linear beta schedule from beta_spec[0] to beta_spec[1] over steps 1..T."""
    if t_steps < 1:
        raise DiffusionError("t_steps must be >= 1")
    lo, hi = float(beta_spec[0]), float(beta_spec[1])
    if not (0.0 < lo < 1.0 and 0.0 < hi < 1.0):
        raise DiffusionError("beta endpoints must lie in (0, 1)")
    if t_steps == 1:
        betas = np.array([lo], dtype=np.float64)
    else:
        betas = np.linspace(lo, hi, t_steps, dtype=np.float64)
    beta = np.concatenate([[0.0], betas])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    if not np.all(np.diff(alpha_bar[1:]) < 0) and t_steps > 1:
        # strictly decreasing for any valid (positive beta) schedule
        raise DiffusionError("alpha_bar must decrease")
    return DiffusionSchedule(t_steps=t_steps, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def _check_t(s: DiffusionSchedule, t: int):
    if not 1 <= t <= s.t_steps:
        raise DiffusionError(f"step index {t} outside 1..{s.t_steps}")


# ---------------------------------------------------------------------------
# forward / reverse updates


def diffuse_forward(j0: np.ndarray, s: DiffusionSchedule, t: int, noise: np.ndarray) -> np.ndarray:
    """j_t = sqrt(abar_t) * j0 + sqrt(1 - abar_t) * noise.

    noise may be a single vector of the same length as j0 or a matrix of
    such vectors (one per row) for vectorized sampling.
    """
    _check_t(s, t)
    j0 = np.asarray(j0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if j0.ndim != 1:
        raise DiffusionError("prior must be a vector")
    if noise.shape[-1] != j0.shape[0]:
        raise DiffusionError("noise length mismatch")
    ab = s.alpha_bar[t]
    return np.sqrt(ab) * j0 + np.sqrt(1.0 - ab) * noise


def denoise_step(j_t, eps_hat, s: DiffusionSchedule, t: int):
    """Deterministic reverse update, no variance term:

        j_{t-1} = (j_t - eps_hat * (1 - alpha_t) / sqrt(1 - abar_t)) / sqrt(alpha_t)

    Works on plain arrays and on autodiff tensors (the coefficients are
    schedule constants either way).
    """
    _check_t(s, t)
    a = s.alpha[t]
    ab = s.alpha_bar[t]
    if ab >= 1.0:
        raise DiffusionError("abar_t = 1: reverse coefficient undefined")
    c_eps = (1.0 - a) / math.sqrt(1.0 - ab)
    c_out = 1.0 / math.sqrt(a)
    if isinstance(j_t, nm.Tensor) or isinstance(eps_hat, nm.Tensor):
        return nm.scale(nm.sub(j_t, nm.scale(eps_hat, c_eps)), c_out)
    j_t = np.asarray(j_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    return c_out * (j_t - c_eps * eps_hat)


def oracle_noise(j_t: np.ndarray, j0: np.ndarray, s: DiffusionSchedule, t: int) -> np.ndarray:
    """The noise vector consistent with j_t having been diffused from j0.

    Feeding this into denoise_step at every step reproduces j0 exactly at
    the end of the chain; used as the self-consistency oracle for the
    reverse update.
    """
    _check_t(s, t)
    ab = s.alpha_bar[t]
    if ab >= 1.0:
        raise DiffusionError("abar_t = 1: noise not identifiable")
    j_t = np.asarray(j_t, dtype=np.float64)
    j0 = np.asarray(j0, dtype=np.float64)
    return (j_t - math.sqrt(ab) * j0) / math.sqrt(1.0 - ab)


# ---------------------------------------------------------------------------
# denoiser network


@dataclass(frozen=True)
class DenoiserConfig:
    prior_len: int = 64
    embed_dim: int = 16
    hidden: int = 0  # 0 means 4 * prior_len

    def __post_init__(self):
        if self.prior_len < 2 or self.prior_len % 2:
            raise DiffusionError("prior_len must be even and >= 2")
        if self.embed_dim < 2 or self.embed_dim % 2:
            raise DiffusionError("embed_dim must be even and >= 2")

    @property
    def hidden_dim(self) -> int:
        return self.hidden if self.hidden > 0 else 4 * self.prior_len

    @property
    def input_dim(self) -> int:
        # noisy prior, condition prior, timestep features
        return 2 * self.prior_len + self.embed_dim


def timestep_embedding(t: int, dim: int) -> np.ndarray:
    """Sinusoidal features of the integer step index."""
    if dim < 2 or dim % 2:
        raise DiffusionError("embedding dim must be even and >= 2")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    ang = float(t) * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)]).astype(np.float32)


def init_denoiser(cfg: DenoiserConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 909]))
    h, d_in, c = cfg.hidden_dim, cfg.input_dim, cfg.prior_len

    def lin(name, rows, cols):
        params[f"dn.{name}.w"] = (rng.standard_normal((rows, cols)) / math.sqrt(cols)).astype(np.float32)
        params[f"dn.{name}.b"] = np.zeros(rows, dtype=np.float32)

    params: dict[str, np.ndarray] = {}
    lin("l1", h, d_in)
    lin("l2", h, h)
    lin("l3", c, h)
    return params


def predict_noise(j_t, condition, t: int, params: dict, cfg: DenoiserConfig):
    """eps_hat = MLP([j_t, condition, embed(t)]); residual middle layer."""
    j_t = j_t if isinstance(j_t, nm.Tensor) else nm.Tensor(np.asarray(j_t, dtype=np.float32))
    cond = condition if isinstance(condition, nm.Tensor) else nm.Tensor(np.asarray(condition, dtype=np.float32))
    if j_t.data.shape != (cfg.prior_len,) or cond.data.shape != (cfg.prior_len,):
        raise DiffusionError("denoiser input length mismatch")
    emb = nm.Tensor(timestep_embedding(t, cfg.embed_dim))
    x = nm.concat([j_t, cond, emb], axis=0)
    h1 = nm.gelu(nm.add(nm.matmul(params["dn.l1.w"], x), params["dn.l1.b"]))
    h2 = nm.add(nm.gelu(nm.add(nm.matmul(params["dn.l2.w"], h1), params["dn.l2.b"])), h1)
    return nm.add(nm.matmul(params["dn.l3.w"], h2), params["dn.l3.b"])


def sample_prior(condition, params: dict, s: DiffusionSchedule, init, cfg: DenoiserConfig,
                 predict_fn=None):
    """Run the full reverse chain from pure noise to a prior estimate.

    Deterministic given (condition, params, init).  predict_fn substitutes
    the noise predictor (same signature as predict_noise without params/cfg);
    used for oracle tests.
    """
    init_arr = init.data if isinstance(init, nm.Tensor) else np.asarray(init, dtype=np.float32)
    if init_arr.shape != (cfg.prior_len,):
        raise DiffusionError("init length mismatch")
    j = init if isinstance(init, nm.Tensor) else nm.Tensor(init_arr)
    for t in range(s.t_steps, 0, -1):
        if predict_fn is not None:
            eps_hat = predict_fn(j, condition, t)
            if not isinstance(eps_hat, nm.Tensor):
                eps_hat = nm.Tensor(np.asarray(eps_hat, dtype=np.float32))
        else:
            eps_hat = predict_noise(j, condition, t, params, cfg)
        j = denoise_step(j, eps_hat, s, t)
        if not np.all(np.isfinite(j.data)):
            raise DiffusionError(f"non-finite prior at step {t}")
    return j


# ---------------------------------------------------------------------------
# training


@dataclass
class DiffusionTrainResult:
    params: dict
    losses: list = field(default_factory=list)


def prepare_pairs(dataset_samples, jcp_params: dict, jcp_cfg: JcpConfig):
    """Frozen-extractor targets and conditions for every (sample, fraction)."""
    pairs = []
    with nm.no_grad():
        for sample in dataset_samples:
            for frac in sorted(sample.lows.keys(), reverse=True):
                j = extract_jcp(sample.truth, sample.lows[frac], jcp_params, jcp_cfg)
                c = extract_condition(sample.lows[frac], jcp_params, jcp_cfg)
                pairs.append((j.data.copy(), c.data.copy()))
    return pairs


def train_diffusion(dataset_samples, jcp_params: dict, jcp_cfg: JcpConfig,
                    params: dict, cfg: DenoiserConfig, s: DiffusionSchedule,
                    steps: int, batch: int = 4, lr: float = 1e-3,
                    betas: tuple[float, float] = (0.9, 0.99), seed: int = 0,
                    log_every: int = 0) -> DiffusionTrainResult:
    """Whole-chain prior prediction: L1 between sampled and extracted priors.

    The extractor is frozen; its outputs are precomputed once.  Gradients
    flow through all T reverse steps into the denoiser.
    """
    if cfg.prior_len != jcp_cfg.prior_len:
        raise DiffusionError("denoiser/extractor prior length mismatch")
    pairs = prepare_pairs(dataset_samples, jcp_params, jcp_cfg)
    if not pairs:
        raise DiffusionError("empty training set")
    tensors = {k: nm.Tensor(v, requires_grad=True) for k, v in params.items()}
    opt = Adam(tensors, lr=lr, betas=betas)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 606]))
    losses: list[float] = []
    for step in range(steps):
        idx = rng.integers(0, len(pairs), size=batch)
        inits = rng.standard_normal((batch, cfg.prior_len)).astype(np.float32)
        opt.zero_grad()
        total = None
        for b, i in enumerate(idx):
            target, cond = pairs[i]
            j_hat = sample_prior(cond, tensors, s, inits[b], cfg)
            diff = nm.sub(j_hat, nm.Tensor(target))
            term = nm.mean(nm.abs_(diff))
            total = term if total is None else nm.add(total, term)
        loss = nm.scale(total, 1.0 / batch)
        nm.backward(loss)
        opt.step()
        val = float(loss.data)
        losses.append(val)
        if not math.isfinite(val) or val > 100.0 * (losses[0] + 1.0):
            raise TrainingDiverged(step, losses[-5:])
        if log_every and (step + 1) % log_every == 0:
            print(f"diffusion step {step + 1}/{steps} loss {val:.6f}")
    final = {k: t.data.copy() for k, t in tensors.items()}
    return DiffusionTrainResult(params=final, losses=losses)
