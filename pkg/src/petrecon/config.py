"""Run configuration: a single JSON document binding dataset, stage, and
optimizer settings plus every named seed.  Commands snapshot the resolved
document into each artifact directory; downstream commands compare hashes
so artifacts from different configurations never silently mix.
"""

from __future__ import annotations

import copy
import json
import os

from .dcs import DcsConfig
from .diffusion import DenoiserConfig, DiffusionSchedule, make_schedule
from .jcp import JcpConfig
from .phantom import PhantomSpec, Sphere, toy_spec
from .store import atomic_write_text, config_hash
from .transformer import StageConfig


class ConfigError(ValueError):
    pass


DEFAULT_CONFIG: dict = {
    "phantom_spec_path": None,      # path to a phantom-spec JSON; null = built-in toy geometry
    "dataset": {
        "n_train": 6,
        "n_test": 4,
        "fractions": [0.5, 0.25, 0.1],
        "counts_per_activity": 4.0,
    },
    "jcp": {"prior_len": 16, "fold": 8, "blocks": 2},
    "transformer": {
        "channels": [8, 16, 32, 64],
        "heads": [1, 2, 4, 8],
        "blocks": [1, 1, 1, 1],
        "ffn_expansion": 2,
    },
    "diffusion": {
        "t_steps": 4,
        "beta": [0.1, 0.99],
        "embed_dim": 16,
        "hidden": 0,
    },
    "dcs": {
        "mu": 1.0,
        "eta": 1.0,
        "rho": 1.0,
        "gamma_pen": 1.0,
        "delta": 1e-2,
        "kappa": 1e-4,
        "outer_iters": 2,
        "inner_steps": 20,
        "threshold_kind": "quantile",
        "threshold_value": 0.98,
        "fidelity": "box3",
        "eps_w": 1e-3,
    },
    "train": {
        "transformer_steps": 1500,
        "diffusion_steps": 1500,
        "batch": 4,
        "lr": 1e-3,
        "betas": [0.9, 0.99],
        "log_every": 0,
    },
    "seeds": {"dataset": 1, "init": 2, "train": 3, "sampler": 4},
}


def default_config() -> dict:
    return copy.deepcopy(DEFAULT_CONFIG)


def _merge(base: dict, override: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key '{path}{key}'")
        if isinstance(base[key], dict) and isinstance(val, dict):
            out[key] = _merge(base[key], val, f"{path}{key}.")
        else:
            out[key] = val
    return out


def load_config(path: str) -> dict:
    """Read a JSON config, fill defaults, and validate."""
    with open(path, encoding="utf-8") as f:
        user = json.load(f)
    cfg = _merge(DEFAULT_CONFIG, user)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict):
    spec_path = cfg.get("phantom_spec_path")
    if spec_path is not None and not os.path.exists(spec_path):
        raise ConfigError(f"phantom spec path '{spec_path}' does not exist")
    ds = cfg["dataset"]
    if ds["n_train"] < 1 or ds["n_test"] < 0:
        raise ConfigError("dataset sizes invalid")
    if not ds["fractions"]:
        raise ConfigError("at least one dose fraction required")
    for f in ds["fractions"]:
        if not 0.0 < f <= 1.0:
            raise ConfigError(f"dose fraction {f} outside (0, 1]")
    for name, seed in cfg["seeds"].items():
        if not isinstance(seed, int):
            raise ConfigError(f"seed '{name}' must be an explicit integer")
    # constructing the stage configs performs their own validation
    build_jcp_config(cfg)
    build_stage_config(cfg)
    build_denoiser_config(cfg)
    build_schedule(cfg)
    build_dcs_config(cfg)


def snapshot_config(cfg: dict, dir_path: str):
    os.makedirs(dir_path, exist_ok=True)
    atomic_write_text(os.path.join(dir_path, "config.json"),
                      json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def read_snapshot(dir_path: str) -> dict:
    path = os.path.join(dir_path, "config.json")
    if not os.path.exists(path):
        raise ConfigError(f"no config snapshot under {dir_path}")
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def check_snapshot(cfg: dict, dir_path: str):
    """Refuse to consume artifacts produced under a different config."""
    snap = read_snapshot(dir_path)
    if config_hash(snap) != config_hash(cfg):
        raise ConfigError(f"config snapshot under {dir_path} does not match "
                          "the supplied config")


# ---------------------------------------------------------------------------
# builders


def build_phantom_spec(cfg: dict) -> PhantomSpec:
    path = cfg.get("phantom_spec_path")
    if path is None:
        return toy_spec()
    with open(path, encoding="utf-8") as f:
        return phantom_spec_from_dict(json.load(f))


def phantom_spec_to_dict(spec: PhantomSpec) -> dict:
    return {
        "height": spec.height,
        "width": spec.width,
        "pixel_mm": spec.pixel_mm,
        "body_semiaxes_mm": list(spec.body_semiaxes_mm),
        "background_kbq_ml": spec.background_kbq_ml,
        "spheres": [
            {"center_mm": list(s.center_mm), "diameter_mm": s.diameter_mm,
             "activity_ratio": s.activity_ratio}
            for s in spec.spheres
        ],
        "cold_regions": [
            {"center_mm": list(s.center_mm), "diameter_mm": s.diameter_mm,
             "activity_ratio": s.activity_ratio}
            for s in spec.cold_regions
        ],
        "liver_center_mm": list(spec.liver_center_mm),
        "liver_radius_mm": spec.liver_radius_mm,
    }


def phantom_spec_from_dict(d: dict) -> PhantomSpec:
    def spheres(key):
        return tuple(
            Sphere(center_mm=tuple(s["center_mm"]), diameter_mm=s["diameter_mm"],
                   activity_ratio=s["activity_ratio"])
            for s in d.get(key, [])
        )

    return PhantomSpec(
        height=d["height"],
        width=d["width"],
        pixel_mm=d["pixel_mm"],
        body_semiaxes_mm=tuple(d["body_semiaxes_mm"]),
        background_kbq_ml=d["background_kbq_ml"],
        spheres=spheres("spheres"),
        cold_regions=spheres("cold_regions"),
        liver_center_mm=tuple(d["liver_center_mm"]),
        liver_radius_mm=d["liver_radius_mm"],
    )


def build_jcp_config(cfg: dict) -> JcpConfig:
    j = cfg["jcp"]
    return JcpConfig(prior_len=j["prior_len"], fold=j["fold"], blocks=j["blocks"])


def build_stage_config(cfg: dict) -> StageConfig:
    t = cfg["transformer"]
    return StageConfig(
        channels=tuple(t["channels"]),
        heads=tuple(t["heads"]),
        blocks=tuple(t["blocks"]),
        prior_len=cfg["jcp"]["prior_len"],
        ffn_expansion=t["ffn_expansion"],
    )


def build_denoiser_config(cfg: dict) -> DenoiserConfig:
    d = cfg["diffusion"]
    return DenoiserConfig(prior_len=cfg["jcp"]["prior_len"],
                          embed_dim=d["embed_dim"], hidden=d["hidden"])


def build_schedule(cfg: dict) -> DiffusionSchedule:
    d = cfg["diffusion"]
    return make_schedule(d["t_steps"], tuple(d["beta"]))


def build_dcs_config(cfg: dict) -> DcsConfig:
    d = cfg["dcs"]
    return DcsConfig(
        mu=d["mu"], eta=d["eta"], rho=d["rho"], gamma_pen=d["gamma_pen"],
        delta=d["delta"], kappa=d["kappa"], outer_iters=d["outer_iters"],
        inner_steps=d["inner_steps"], threshold_kind=d["threshold_kind"],
        threshold_value=d["threshold_value"], fidelity=d["fidelity"],
        eps_w=d["eps_w"],
    )
