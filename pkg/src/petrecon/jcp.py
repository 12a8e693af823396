"""Joint compact prior extraction.

The prior is a short vector summarizing a (normal-dose, low-dose) image
pair. The two images are stacked on the channel axis, folded space-to-
channel so an HxW pair becomes a (2*r*r, H/r, W/r) feature map, passed
through a few residual 1x1-conv blocks, pooled globally, and read out by
two parallel linear heads. The head outputs are concatenated: the first
half of the vector is the horizontal summary, the second half the vertical
one.

At restoration time the normal-dose image does not exist, so the condition
variant feeds a zero plane in its slot; the trained prior sampler only ever
sees that masked form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numeric as nm
from .phantom import ImageGrid


@dataclass(frozen=True)
class JcpConfig:
    """prior_len is the output length C'; the two heads are C'/2 each.
    fold is the space-to-channel factor, so inputs must be divisible by it."""

    prior_len: int = 64
    fold: int = 8
    blocks: int = 3

    def __post_init__(self):
        if self.prior_len < 2 or self.prior_len % 2:
            raise ValueError("prior_len must be even and >= 2")
        if self.fold < 1:
            raise ValueError("fold must be >= 1")
        if self.blocks < 0:
            raise ValueError("blocks must be >= 0")

    @property
    def feature_channels(self) -> int:
        return 2 * self.fold * self.fold


def init_params(cfg: JcpConfig, seed: int) -> dict[str, nm.Tensor]:
    """Seeded parameter dict; names are stable and checkpoint-friendly."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 201]))
    C = cfg.feature_channels
    half = cfg.prior_len // 2
    params: dict[str, nm.Tensor] = {}

    def par(name, shape, std):
        params[name] = nm.Tensor(
            rng.standard_normal(shape) * std, requires_grad=True
        )

    for k in range(cfg.blocks):
        par(f"jcp.rb{k}.w1", (C, C), 1.0 / np.sqrt(C))
        params[f"jcp.rb{k}.b1"] = nm.Tensor(np.zeros(C), requires_grad=True)
        par(f"jcp.rb{k}.w2", (C, C), 1.0 / np.sqrt(C))
        params[f"jcp.rb{k}.b2"] = nm.Tensor(np.zeros(C), requires_grad=True)
    par("jcp.head_h.w", (half, C), 1.0 / np.sqrt(C))
    params["jcp.head_h.b"] = nm.Tensor(np.zeros(half), requires_grad=True)
    par("jcp.head_v.w", (half, C), 1.0 / np.sqrt(C))
    params["jcp.head_v.b"] = nm.Tensor(np.zeros(half), requires_grad=True)
    return params


def _as_plane(img) -> nm.Tensor:
    if isinstance(img, nm.Tensor):
        t = img
    elif isinstance(img, ImageGrid):
        t = nm.Tensor(img.values)
    else:
        t = nm.Tensor(np.asarray(img))
    if t.ndim == 2:
        t = nm.reshape(t, (1,) + t.shape)
    if t.ndim != 3 or t.shape[0] != 1:
        raise nm.NumericError("expected a single-channel image")
    return t


def extract_jcp(normal, low, params: dict, cfg: JcpConfig) -> nm.Tensor:
    """Prior vector for a (normal, low) pair; differentiable end to end."""
    a = _as_plane(normal)
    b = _as_plane(low)
    if a.shape != b.shape:
        raise nm.NumericError("pair shapes differ")
    stacked = nm.concat([a, b], axis=0)
    return _extract(stacked, params, cfg)


def extract_condition(low, params: dict, cfg: JcpConfig) -> nm.Tensor:
    """Prior vector with the normal-dose slot zero-filled."""
    b = _as_plane(low)
    zeros = nm.Tensor(np.zeros(b.shape, dtype=b.dtype))
    stacked = nm.concat([zeros, b], axis=0)
    return _extract(stacked, params, cfg)


def _extract(stacked: nm.Tensor, params: dict, cfg: JcpConfig) -> nm.Tensor:
    x = nm.space_to_channel(stacked, cfg.fold)
    if x.shape[0] != cfg.feature_channels:
        raise nm.NumericError("fold factor does not match the config")
    for k in range(cfg.blocks):
        h = nm.conv1x1(x, params[f"jcp.rb{k}.w1"], params[f"jcp.rb{k}.b1"])
        h = nm.gelu(h)
        h = nm.conv1x1(h, params[f"jcp.rb{k}.w2"], params[f"jcp.rb{k}.b2"])
        x = nm.add(x, h)
    pooled = nm.mean(x, axis=(1, 2))
    h_head = nm.add(nm.matmul(params["jcp.head_h.w"], pooled), params["jcp.head_h.b"])
    v_head = nm.add(nm.matmul(params["jcp.head_v.w"], pooled), params["jcp.head_v.b"])
    return combine_priors(h_head, v_head)


def combine_priors(horizontal: nm.Tensor, vertical: nm.Tensor) -> nm.Tensor:
    if horizontal.shape != vertical.shape or horizontal.ndim != 1:
        raise nm.NumericError("prior halves must be equal-length vectors")
    return nm.concat([horizontal, vertical], axis=0)


def split_prior(prior, cfg: JcpConfig) -> tuple[np.ndarray, np.ndarray]:
    """Inspection helper: the (horizontal, vertical) halves as arrays."""
    v = prior.data if isinstance(prior, nm.Tensor) else np.asarray(prior)
    if v.shape != (cfg.prior_len,):
        raise nm.NumericError(f"prior length {v.shape} != {cfg.prior_len}")
    half = cfg.prior_len // 2
    return v[:half].copy(), v[half:].copy()
