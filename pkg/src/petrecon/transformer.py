"""Prior-modulated restoration transformer.

A 4-level U-shaped stack of channel-attention blocks. Every block consumes
the same compact prior vector twice, once before its attention sub-layer
and once before its gated feed-forward sub-layer, through the modulation

    A' = (W1 J) * Norm(A) + (W2 J)

where Norm is a per-pixel layernorm over channels and the two projected
vectors broadcast across the spatial axes.

Attention mixes channels rather than pixels: per head, Q/K/V maps of shape
(C/heads, H*W) form logits K_hat . Q_hat^T scaled by a learned per-head
temperature (clamped at 1e-3). We store the map with query channels as rows
and softmax along the key axis, so each row is a distribution over key
channels and rows sum to one; the map is (C/heads, C/heads) regardless of
image size, which keeps cost linear in pixels. Values are mixed with that
map, projected by a 1x1 conv, and added to the block input.

The feed-forward is a gated pair of conv1x1+dwconv3x3 branches:
GELU(branch1) * branch2, projected back and added to the block input.

Downsampling folds space into channels (factor 2) followed by a 1x1 channel
adjustment; upsampling is the mirror image. Skip connections concatenate on
channels and fuse with a 1x1 conv. The network output is low + head(x), a
global residual, so an all-zero head is exactly the identity.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import numeric as nm
from .jcp import JcpConfig, extract_jcp, init_params as init_jcp_params
from .optim import Adam, TrainingDiverged
from .phantom import Dataset, ImageGrid

LEVELS = 4
TEMP_FLOOR = 1e-3


@dataclass(frozen=True)
class StageConfig:
    """Per-level widths for the restoration stage.

    channels/heads/blocks have one entry per level (coarsest last). The
    prior length must match the extractor that produces the vectors.
    """

    channels: tuple[int, ...] = (48, 96, 192, 384)
    heads: tuple[int, ...] = (1, 2, 4, 8)
    blocks: tuple[int, ...] = (3, 5, 6, 6)
    prior_len: int = 64
    ffn_expansion: int = 2

    def __post_init__(self):
        if not (len(self.channels) == len(self.heads) == len(self.blocks) == LEVELS):
            raise ValueError(f"need {LEVELS} levels")
        for c, h in zip(self.channels, self.heads):
            if c % h:
                raise ValueError(f"heads {h} must divide channels {c}")
        if any(b < 1 for b in self.blocks):
            raise ValueError("each level needs at least one block")
        if self.ffn_expansion < 1:
            raise ValueError("ffn_expansion must be >= 1")


@dataclass
class AttnParams:
    wq_c: nm.Tensor
    wq_d: nm.Tensor
    wk_c: nm.Tensor
    wk_d: nm.Tensor
    wv_c: nm.Tensor
    wv_d: nm.Tensor
    wo: nm.Tensor
    temperature: nm.Tensor  # (heads, 1, 1)


@dataclass
class FfnParams:
    w1_c: nm.Tensor
    w1_d: nm.Tensor
    w2_c: nm.Tensor
    w2_d: nm.Tensor
    wo: nm.Tensor


def init_stage_params(cfg: StageConfig, seed: int) -> dict[str, nm.Tensor]:
    """Seeded parameters for the whole stage, flat-named for checkpoints.

    The output head starts at zero so the untrained network is the
    identity on its input.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 777]))
    params: dict[str, nm.Tensor] = {}

    def par(name, shape, std):
        params[name] = nm.Tensor(rng.standard_normal(shape) * std, requires_grad=True)

    def zeros(name, shape):
        params[name] = nm.Tensor(np.zeros(shape), requires_grad=True)

    def ones(name, shape):
        params[name] = nm.Tensor(np.ones(shape), requires_grad=True)

    def block(prefix: str, C: int, heads: int):
        Cp = cfg.prior_len
        Ch = cfg.ffn_expansion * C
        ones(f"{prefix}.ln1.g", (C,))
        zeros(f"{prefix}.ln1.b", (C,))
        par(f"{prefix}.mod1.w1", (C, Cp), 1.0 / np.sqrt(Cp))
        par(f"{prefix}.mod1.w2", (C, Cp), 1.0 / np.sqrt(Cp))
        for nm_ in ("wq", "wk", "wv"):
            par(f"{prefix}.attn.{nm_}_c", (C, C), 1.0 / np.sqrt(C))
            par(f"{prefix}.attn.{nm_}_d", (C, 3, 3), 1.0 / 3.0)
        par(f"{prefix}.attn.wo", (C, C), 1.0 / np.sqrt(C))
        params[f"{prefix}.attn.temp"] = nm.Tensor(
            np.full((heads, 1, 1), np.sqrt(C / heads)), requires_grad=True
        )
        ones(f"{prefix}.ln2.g", (C,))
        zeros(f"{prefix}.ln2.b", (C,))
        par(f"{prefix}.mod2.w1", (C, Cp), 1.0 / np.sqrt(Cp))
        par(f"{prefix}.mod2.w2", (C, Cp), 1.0 / np.sqrt(Cp))
        par(f"{prefix}.ffn.w1_c", (Ch, C), 1.0 / np.sqrt(C))
        par(f"{prefix}.ffn.w1_d", (Ch, 3, 3), 1.0 / 3.0)
        par(f"{prefix}.ffn.w2_c", (Ch, C), 1.0 / np.sqrt(C))
        par(f"{prefix}.ffn.w2_d", (Ch, 3, 3), 1.0 / 3.0)
        par(f"{prefix}.ffn.wo", (C, Ch), 1.0 / np.sqrt(Ch))

    ch = cfg.channels
    par("stage.embed.w", (ch[0], 1), 1.0)
    zeros("stage.embed.b", (ch[0],))
    for lvl in range(3):
        for k in range(cfg.blocks[lvl]):
            block(f"stage.enc{lvl}.blk{k}", ch[lvl], cfg.heads[lvl])
        par(f"stage.down{lvl}.w", (ch[lvl + 1], 4 * ch[lvl]), 1.0 / np.sqrt(4 * ch[lvl]))
    for k in range(cfg.blocks[3]):
        block(f"stage.latent.blk{k}", ch[3], cfg.heads[3])
    for lvl in (2, 1, 0):
        par(f"stage.up{lvl}.w", (4 * ch[lvl], ch[lvl + 1]), 1.0 / np.sqrt(ch[lvl + 1]))
        par(f"stage.fuse{lvl}.w", (ch[lvl], 2 * ch[lvl]), 1.0 / np.sqrt(2 * ch[lvl]))
        for k in range(cfg.blocks[lvl]):
            block(f"stage.dec{lvl}.blk{k}", ch[lvl], cfg.heads[lvl])
    zeros("stage.head.w", (1, ch[0]))
    zeros("stage.head.b", (1,))
    return params


# ------------------------------------------------------------- block ops

def modulate(a: nm.Tensor, prior: nm.Tensor, w1: nm.Tensor, w2: nm.Tensor,
             ln_gamma: nm.Tensor, ln_beta: nm.Tensor) -> nm.Tensor:
    """(W1 J) * Norm(A) + (W2 J), the prior injected multiplicatively and
    additively around a per-pixel channel layernorm."""
    C = a.shape[0]
    normed = nm.layernorm(a, ln_gamma, ln_beta)
    m1 = nm.reshape(nm.matmul(w1, prior), (C, 1, 1))
    m2 = nm.reshape(nm.matmul(w2, prior), (C, 1, 1))
    return nm.add(nm.mul(m1, normed), m2)


def mta(a_mod: nm.Tensor, residual: nm.Tensor, p: AttnParams, heads: int,
        return_attn: bool = False):
    """Multi-head transposed (channel) attention plus the block residual."""
    C, H, W = a_mod.shape
    if C % heads:
        raise nm.NumericError(f"heads {heads} must divide channels {C}")
    D = C // heads

    def proj(wc, wd):
        return nm.dwconv3x3(nm.conv1x1(a_mod, wc), wd)

    q = nm.reshape(proj(p.wq_c, p.wq_d), (heads, D, H * W))
    k = nm.reshape(proj(p.wk_c, p.wk_d), (heads, D, H * W))
    v = nm.reshape(proj(p.wv_c, p.wv_d), (heads, D, H * W))
    logits = nm.matmul(q, k, transpose_b=True)          # (heads, D, D)
    temp = nm.clamp_min(p.temperature, TEMP_FLOOR)
    attn = nm.softmax(nm.div(logits, temp), axis=2)     # rows sum to 1
    mixed = nm.matmul(attn, v)                          # (heads, D, H*W)
    out = nm.conv1x1(nm.reshape(mixed, (C, H, W)), p.wo)
    y = nm.add(out, residual)
    if return_attn:
        return y, attn
    return y


def gffn(a_mod: nm.Tensor, residual: nm.Tensor, p: FfnParams) -> nm.Tensor:
    """Gated feed-forward: GELU(branch1) * branch2, projected, residual."""
    b1 = nm.dwconv3x3(nm.conv1x1(a_mod, p.w1_c), p.w1_d)
    b2 = nm.dwconv3x3(nm.conv1x1(a_mod, p.w2_c), p.w2_d)
    h = nm.mul(nm.gelu(b1), b2)
    return nm.add(nm.conv1x1(h, p.wo), residual)


def _attn_params(params: dict, prefix: str) -> AttnParams:
    g = lambda s: params[f"{prefix}.attn.{s}"]
    return AttnParams(g("wq_c"), g("wq_d"), g("wk_c"), g("wk_d"),
                      g("wv_c"), g("wv_d"), g("wo"), g("temp"))


def _ffn_params(params: dict, prefix: str) -> FfnParams:
    g = lambda s: params[f"{prefix}.ffn.{s}"]
    return FfnParams(g("w1_c"), g("w1_d"), g("w2_c"), g("w2_d"), g("wo"))


def _block(x: nm.Tensor, prior: nm.Tensor, params: dict, prefix: str,
           heads: int) -> nm.Tensor:
    a_mod = modulate(x, prior, params[f"{prefix}.mod1.w1"], params[f"{prefix}.mod1.w2"],
                     params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    x = mta(a_mod, x, _attn_params(params, prefix), heads)
    a_mod = modulate(x, prior, params[f"{prefix}.mod2.w1"], params[f"{prefix}.mod2.w2"],
                     params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    return gffn(a_mod, x, _ffn_params(params, prefix))


def unet_apply(low: nm.Tensor, prior: nm.Tensor, cfg: StageConfig,
               params: dict) -> nm.Tensor:
    """Tensor-level forward pass; ``low`` is a (1, H, W) map."""
    if low.ndim != 3 or low.shape[0] != 1:
        raise nm.NumericError("unet wants a (1, H, W) input")
    H, W = low.shape[1], low.shape[2]
    if H % 8 or W % 8:
        raise nm.NumericError(f"grid {H}x{W} not divisible by 8")
    if prior.shape != (cfg.prior_len,):
        raise nm.NumericError("prior length does not match the stage config")

    x = nm.conv1x1(low, params["stage.embed.w"], params["stage.embed.b"])
    skips = []
    for lvl in range(3):
        for k in range(cfg.blocks[lvl]):
            x = _block(x, prior, params, f"stage.enc{lvl}.blk{k}", cfg.heads[lvl])
        skips.append(x)
        x = nm.conv1x1(nm.space_to_channel(x, 2), params[f"stage.down{lvl}.w"])
    for k in range(cfg.blocks[3]):
        x = _block(x, prior, params, f"stage.latent.blk{k}", cfg.heads[3])
    for lvl in (2, 1, 0):
        x = nm.channel_to_space(nm.conv1x1(x, params[f"stage.up{lvl}.w"]), 2)
        x = nm.conv1x1(nm.concat([x, skips[lvl]], axis=0), params[f"stage.fuse{lvl}.w"])
        for k in range(cfg.blocks[lvl]):
            x = _block(x, prior, params, f"stage.dec{lvl}.blk{k}", cfg.heads[lvl])
    r = nm.conv1x1(x, params["stage.head.w"], params["stage.head.b"])
    return nm.add(low, r)


def unet_forward(low: ImageGrid, prior: nm.Tensor, cfg: StageConfig,
                 params: dict) -> ImageGrid:
    """Image-level forward pass; activities are clamped at zero."""
    with nm.no_grad():
        t = nm.Tensor(low.values[None, :, :])
        out = unet_apply(t, prior, cfg, params)
    return ImageGrid(np.maximum(out.data[0], 0.0), low.pixel_mm)


# -------------------------------------------------------------- training

@dataclass
class TrainResult:
    params: dict[str, nm.Tensor]
    losses: list[float] = field(default_factory=list)


def l1_loss(pred: nm.Tensor, target: nm.Tensor) -> nm.Tensor:
    return nm.mean(nm.abs_(nm.sub(pred, target)))


def train_transformer(
    dataset: Dataset,
    jcp_cfg: JcpConfig,
    stage_cfg: StageConfig,
    steps: int,
    batch: int = 4,
    lr: float = 1e-3,
    betas: tuple[float, float] = (0.9, 0.99),
    seed: int = 0,
    log_every: int = 0,
) -> TrainResult:
    """Jointly train the prior extractor and the restoration stage.

    Each step draws (sample, fraction) pairs from the train split, builds
    the prior from the true pair, restores the low-dose image, and follows
    the mean-absolute-error gradient. Batch elements are evaluated in a
    fixed order and reduced by ordered summation, keeping runs
    bit-reproducible. steps=0 returns the untouched initialization.
    """
    if not dataset.train:
        raise ValueError("empty train split")
    params = init_jcp_params(jcp_cfg, seed)
    params.update(init_stage_params(stage_cfg, seed))
    opt = Adam(params, lr=lr, betas=betas)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 555]))
    fractions = list(dataset.fractions)
    losses: list[float] = []
    for step in range(steps):
        try:
            parts = []
            for _ in range(batch):
                s = dataset.train[int(rng.integers(len(dataset.train)))]
                f = fractions[int(rng.integers(len(fractions)))]
                low = s.lows[f]
                prior = extract_jcp(s.truth, low, params, jcp_cfg)
                pred = unet_apply(nm.Tensor(low.values[None]), prior, stage_cfg, params)
                target = nm.Tensor(s.truth.values[None])
                parts.append(l1_loss(pred, target))
            total = parts[0]
            for p in parts[1:]:
                total = nm.add(total, p)
            loss = nm.scale(total, 1.0 / len(parts))
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise TrainingDiverged(step, losses[-5:])
            opt.zero_grad()
            nm.backward(loss)
            opt.step()
        except nm.NonFiniteError as e:
            raise TrainingDiverged(step, losses[-5:]) from e
        losses.append(loss_val)
        if log_every and step % log_every == 0:
            print(f"  transformer step {step:5d} loss {loss_val:.5f}")
    return TrainResult(params, losses)


# ------------------------------------------------------------ diagnostics

def attention_wall_time(C: int = 32, heads: int = 4, hw_small: int = 24,
                        repeats: int = 5, seed: int = 0) -> tuple[float, float]:
    """Median wall time of one attention sub-layer at HxW and 2Hx2W.

    The attention map is (C/heads)^2 regardless of pixel count, so time
    should grow close to linearly when the pixel count quadruples.
    """
    rng = np.random.default_rng(seed)

    def make(hw):
        x = nm.Tensor(rng.standard_normal((C, hw, hw)).astype(np.float32))
        p = AttnParams(
            *[nm.Tensor(rng.standard_normal((C, C)).astype(np.float32) / np.sqrt(C))
              if i % 2 == 0 else
              nm.Tensor(rng.standard_normal((C, 3, 3)).astype(np.float32) / 3.0)
              for i in range(6)],
            nm.Tensor(rng.standard_normal((C, C)).astype(np.float32) / np.sqrt(C)),
            nm.Tensor(np.full((heads, 1, 1), np.sqrt(C / heads), dtype=np.float32)),
        )
        return x, p

    def bench(hw):
        x, p = make(hw)
        with nm.no_grad():
            mta(x, x, p, heads)  # warm up
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                mta(x, x, p, heads)
                times.append(time.perf_counter() - t0)
        return float(np.median(times))

    return bench(hw_small), bench(2 * hw_small)
