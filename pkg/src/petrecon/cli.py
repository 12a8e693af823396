"""Command-line surface.

Commands: phantom, lowdose, train-transformer, train-diffusion,
reconstruct, evaluate, gradcheck.  Every artifact directory receives a
snapshot of the resolved configuration; commands that consume artifacts
refuse snapshots whose hash differs from the supplied config.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import config as cfgmod
from . import dcs as dcsmod
from . import diffusion as dfmod
from . import jcp as jcpmod
from . import metrics as metmod
from . import numeric as nm
from . import phantom as phmod
from . import store
from . import transformer as tfmod
from . import viz
from .optim import TrainingDiverged

STAGE_TRANSFORMER = "jcp+transformer"
STAGE_DIFFUSION = "diffusion"


class CliError(RuntimeError):
    pass


def _frac_tag(fraction: float) -> str:
    return f"{fraction:g}"


# ---------------------------------------------------------------------------
# dataset directory layout


def _sample_dir(data_dir: str, split: str, index: int) -> str:
    return os.path.join(data_dir, split, f"s{index:04d}")


def _write_truths(ds: phmod.Dataset, cfg: dict, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    meta = {
        "fractions": [float(f) for f in ds.fractions],
        "counts_per_activity": ds.counts_per_activity,
        "seed": ds.seed,
        "n_train": len(ds.train),
        "n_test": len(ds.test),
    }
    for split, samples in (("train", ds.train), ("test", ds.test)):
        for i, sample in enumerate(samples):
            d = _sample_dir(out_dir, split, i)
            os.makedirs(d, exist_ok=True)
            store.atomic_write_text(
                os.path.join(d, "spec.json"),
                json.dumps(cfgmod.phantom_spec_to_dict(sample.spec),
                           indent=2, sort_keys=True) + "\n")
            store.save_tensor(sample.truth.values, os.path.join(d, "truth.dt"))
    store.atomic_write_text(os.path.join(out_dir, "dataset.json"),
                            json.dumps(meta, indent=2, sort_keys=True) + "\n")
    cfgmod.snapshot_config(cfg, out_dir)


def _write_lows(ds: phmod.Dataset, out_dir: str):
    for split, samples in (("train", ds.train), ("test", ds.test)):
        for i, sample in enumerate(samples):
            d = _sample_dir(out_dir, split, i)
            if not os.path.isdir(d):
                raise CliError(f"missing sample directory {d}; run phantom first")
            for frac, low in sample.lows.items():
                store.save_tensor(low.values,
                                  os.path.join(d, f"low_{_frac_tag(frac)}.dt"))


def _read_dataset_meta(data_dir: str) -> dict:
    path = os.path.join(data_dir, "dataset.json")
    if not os.path.exists(path):
        raise CliError(f"no dataset.json under {data_dir}; run phantom first")
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def load_samples(data_dir: str, split: str, with_lows: bool = True) -> list[phmod.Sample]:
    meta = _read_dataset_meta(data_dir)
    count = meta["n_train"] if split == "train" else meta["n_test"]
    samples = []
    for i in range(count):
        d = _sample_dir(data_dir, split, i)
        with open(os.path.join(d, "spec.json"), encoding="utf-8") as f:
            spec = cfgmod.phantom_spec_from_dict(json.load(f))
        truth = phmod.ImageGrid(store.load_tensor(os.path.join(d, "truth.dt")),
                                spec.pixel_mm)
        lows = {}
        if with_lows:
            for frac in meta["fractions"]:
                p = os.path.join(d, f"low_{_frac_tag(frac)}.dt")
                if not os.path.exists(p):
                    raise CliError(f"missing {p}; run lowdose first")
                lows[float(frac)] = phmod.ImageGrid(store.load_tensor(p), spec.pixel_mm)
        samples.append(phmod.Sample(sample_id=f"{split}/s{i:04d}", spec=spec,
                                    truth=truth, lows=lows, seed=meta["seed"]))
    return samples


def _make_dataset(cfg: dict) -> phmod.Dataset:
    ds_cfg = cfg["dataset"]
    return phmod.make_dataset(
        n_train=ds_cfg["n_train"],
        n_test=ds_cfg["n_test"],
        fractions=tuple(float(f) for f in ds_cfg["fractions"]),
        seed=cfg["seeds"]["dataset"],
        base_spec=cfgmod.build_phantom_spec(cfg),
        counts_per_activity=ds_cfg["counts_per_activity"],
    )


# ---------------------------------------------------------------------------
# commands


def _cmd_phantom(args) -> int:
    cfg = cfgmod.load_config(args.config)
    ds = _make_dataset(cfg)
    _write_truths(ds, cfg, args.out)
    print(f"wrote {len(ds.train)} train + {len(ds.test)} test phantoms to {args.out}")
    return 0


def _cmd_lowdose(args) -> int:
    cfg = cfgmod.load_config(args.config)
    cfgmod.check_snapshot(cfg, args.data)
    ds = _make_dataset(cfg)
    _write_lows(ds, args.data)
    n = (len(ds.train) + len(ds.test)) * len(ds.fractions)
    print(f"wrote {n} low-dose images under {args.data}")
    return 0


def _cmd_train_transformer(args) -> int:
    cfg = cfgmod.load_config(args.config)
    cfgmod.check_snapshot(cfg, args.data)
    meta = _read_dataset_meta(args.data)
    dataset = phmod.Dataset(
        train=load_samples(args.data, "train"),
        test=[],
        fractions=tuple(float(f) for f in meta["fractions"]),
        counts_per_activity=meta["counts_per_activity"],
        seed=meta["seed"],
    )
    result = tfmod.train_transformer(
        dataset,
        cfgmod.build_jcp_config(cfg),
        cfgmod.build_stage_config(cfg),
        steps=cfg["train"]["transformer_steps"],
        batch=cfg["train"]["batch"],
        lr=cfg["train"]["lr"],
        betas=tuple(cfg["train"]["betas"]),
        seed=cfg["seeds"]["train"],
        log_every=cfg["train"]["log_every"],
    )
    os.makedirs(args.out, exist_ok=True)
    store.save_checkpoint(args.out, result.params, STAGE_TRANSFORMER,
                          store.config_hash(cfg))
    store.save_loss_csv(os.path.join(args.out, "loss.csv"), result.losses)
    cfgmod.snapshot_config(cfg, args.out)
    last = result.losses[-1] if result.losses else float("nan")
    print(f"saved {STAGE_TRANSFORMER} checkpoint to {args.out} "
          f"({len(result.losses)} steps, final loss {last:.5f})")
    return 0


def _cmd_train_diffusion(args) -> int:
    cfg = cfgmod.load_config(args.config)
    cfgmod.check_snapshot(cfg, args.data)
    tf_params, _ = store.load_checkpoint(args.transformer_ckpt,
                                         expect_stage=STAGE_TRANSFORMER,
                                         expect_hash=store.config_hash(cfg))
    jcp_params = {k: v for k, v in tf_params.items() if k.startswith("jcp.")}
    dn_cfg = cfgmod.build_denoiser_config(cfg)
    schedule = cfgmod.build_schedule(cfg)
    init = dfmod.init_denoiser(dn_cfg, seed=cfg["seeds"]["init"])
    samples = load_samples(args.data, "train")
    result = dfmod.train_diffusion(
        samples, jcp_params, cfgmod.build_jcp_config(cfg),
        init, dn_cfg, schedule,
        steps=cfg["train"]["diffusion_steps"],
        batch=cfg["train"]["batch"],
        lr=cfg["train"]["lr"],
        betas=tuple(cfg["train"]["betas"]),
        seed=cfg["seeds"]["train"],
        log_every=cfg["train"]["log_every"],
    )
    os.makedirs(args.out, exist_ok=True)
    store.save_checkpoint(args.out, result.params, STAGE_DIFFUSION,
                          store.config_hash(cfg))
    store.save_loss_csv(os.path.join(args.out, "loss.csv"), result.losses)
    cfgmod.snapshot_config(cfg, args.out)
    last = result.losses[-1] if result.losses else float("nan")
    print(f"saved {STAGE_DIFFUSION} checkpoint to {args.out} "
          f"({len(result.losses)} steps, final loss {last:.5f})")
    return 0


def _reconstruct_one(low: phmod.ImageGrid, init_noise: np.ndarray, cfg: dict,
                     jcp_params: dict, stage_params: dict, dn_params: dict):
    jcp_cfg = cfgmod.build_jcp_config(cfg)
    with nm.no_grad():
        cond = jcpmod.extract_condition(low, jcp_params, jcp_cfg)
        j_hat = dfmod.sample_prior(cond, dn_params, cfgmod.build_schedule(cfg),
                                   init_noise, cfgmod.build_denoiser_config(cfg))
        f_hat = tfmod.unet_forward(low, j_hat, cfgmod.build_stage_config(cfg),
                                   stage_params)
    return f_hat


def _cmd_reconstruct(args) -> int:
    cfg = cfgmod.load_config(args.config)
    cfgmod.check_snapshot(cfg, args.data)
    want_hash = store.config_hash(cfg)
    tf_params, _ = store.load_checkpoint(args.transformer_ckpt,
                                         expect_stage=STAGE_TRANSFORMER,
                                         expect_hash=want_hash)
    dn_params, _ = store.load_checkpoint(args.diffusion_ckpt,
                                         expect_stage=STAGE_DIFFUSION,
                                         expect_hash=want_hash)
    jcp_params = {k: v for k, v in tf_params.items() if k.startswith("jcp.")}
    stage_params = {k: v for k, v in tf_params.items() if k.startswith("stage.")}
    meta = _read_dataset_meta(args.data)
    dose = float(args.dose)
    if not any(abs(dose - float(f)) < 1e-12 for f in meta["fractions"]):
        raise CliError(f"dose {dose} not among dataset fractions {meta['fractions']}")
    samples = load_samples(args.data, args.split)
    if not samples:
        raise CliError(f"no samples in split '{args.split}'")
    dcs_cfg = cfgmod.build_dcs_config(cfg)
    dn_cfg = cfgmod.build_denoiser_config(cfg)
    split_code = 0 if args.split == "train" else 1
    os.makedirs(args.out, exist_ok=True)
    for i, sample in enumerate(samples):
        low = sample.lows[dose]
        rng = np.random.default_rng(
            np.random.SeedSequence([cfg["seeds"]["sampler"], split_code, i]))
        init_noise = rng.standard_normal(dn_cfg.prior_len).astype(np.float32)
        f_hat = _reconstruct_one(low, init_noise, cfg, jcp_params,
                                 stage_params, dn_params)
        d = os.path.join(args.out, f"s{i:04d}")
        os.makedirs(d, exist_ok=True)
        store.save_tensor(f_hat.values, os.path.join(d, "fhat.dt"))
        outputs = {"fhat": f_hat}
        if args.use_dcs:
            model = dcsmod.make_data_model(low, dose, meta["counts_per_activity"],
                                           dcs_cfg)
            res = dcsmod.run_dcs(low, f_hat, model, dcs_cfg)
            store.save_tensor(res.image.values, os.path.join(d, "dcs.dt"))
            outputs["dcs"] = res.image
        if args.png:
            window = (0.0, float(sample.truth.values.max()))
            for tag, img in outputs.items():
                viz.export_png(img, os.path.join(d, f"{tag}.png"), window=window)
                resid = img.values.astype(np.float64) - sample.truth.values
                viz.export_png(resid, os.path.join(d, f"{tag}_residual.png"),
                               window=viz.symmetric_window(resid))
    recon_meta = {"dose": dose, "use_dcs": bool(args.use_dcs),
                  "split": args.split, "n_samples": len(samples)}
    store.atomic_write_text(os.path.join(args.out, "recon.json"),
                            json.dumps(recon_meta, indent=2, sort_keys=True) + "\n")
    cfgmod.snapshot_config(cfg, args.out)
    print(f"reconstructed {len(samples)} samples at dose {dose} "
          f"({'with' if args.use_dcs else 'without'} data-consistency stage)")
    return 0


def _sample_rois(spec: phmod.PhantomSpec, shape) -> tuple[list[metmod.Roi], metmod.Roi]:
    lesions = []
    for k, sphere in enumerate(spec.spheres):
        mask = phmod.disc_mask(shape, spec.pixel_mm, sphere.center_mm,
                               sphere.radius_mm)
        lesions.append(metmod.Roi(label=f"sphere{k}", mask=mask))
    ref = metmod.Roi(label="liver",
                     mask=phmod.disc_mask(shape, spec.pixel_mm,
                                          spec.liver_center_mm,
                                          spec.liver_radius_mm))
    return lesions, ref


def _cmd_evaluate(args) -> int:
    cfg = cfgmod.load_config(args.config)
    cfgmod.check_snapshot(cfg, args.data)
    cfgmod.check_snapshot(cfg, args.recon)
    with open(os.path.join(args.recon, "recon.json"), encoding="utf-8") as f:
        recon_meta = json.load(f)
    dose = float(recon_meta["dose"])
    samples = load_samples(args.data, recon_meta["split"])
    if recon_meta["n_samples"] != len(samples):
        raise CliError("reconstruction/sample count mismatch")
    methods: dict[str, list] = {"low": []}
    methods["fhat"] = []
    if recon_meta["use_dcs"]:
        methods["dcs"] = []
    per_sample = []
    for i, sample in enumerate(samples):
        truth = sample.truth
        lesions, ref = _sample_rois(sample.spec, truth.values.shape)
        d = os.path.join(args.recon, f"s{i:04d}")
        images = {"low": sample.lows[dose]}
        images["fhat"] = phmod.ImageGrid(
            store.load_tensor(os.path.join(d, "fhat.dt")), sample.spec.pixel_mm)
        if recon_meta["use_dcs"]:
            images["dcs"] = phmod.ImageGrid(
                store.load_tensor(os.path.join(d, "dcs.dt")), sample.spec.pixel_mm)
        truth_rep = metmod.report(truth, truth, lesions, ref,
                                  meta={"method": "truth", "dose": dose})
        entry = {"sample": sample.sample_id,
                 "truth_cr": truth_rep.cr_by_lesion}
        for tag, img in images.items():
            rep = metmod.report(img, truth, lesions, ref,
                                meta={"method": tag, "dose": dose})
            methods[tag].append(rep)
            entry[tag] = rep.to_dict()
        per_sample.append(entry)
    summary = {}
    for tag, reps in methods.items():
        summary[tag] = {
            "psnr_l2_db": float(np.mean([r.psnr_l2_db for r in reps])),
            "psnr_rmse_db": float(np.mean([r.psnr_rmse_db for r in reps])),
            "ssim": float(np.mean([r.ssim for r in reps])),
            "nrmse": float(np.mean([r.nrmse for r in reps])),
        }
    doc = {"dose": dose, "split": recon_meta["split"],
           "use_dcs": recon_meta["use_dcs"], "summary": summary,
           "samples": per_sample}
    os.makedirs(args.out, exist_ok=True)
    store.atomic_write_text(os.path.join(args.out, "report.json"),
                            json.dumps(doc, indent=2, sort_keys=True) + "\n")
    cfgmod.snapshot_config(cfg, args.out)
    for tag, vals in summary.items():
        print(f"{tag}: psnr_rmse {vals['psnr_rmse_db']:.2f} dB, "
              f"ssim {vals['ssim']:.4f}, nrmse {vals['nrmse']:.4f}")
    return 0


def _cmd_gradcheck(args) -> int:
    results = nm.run_suite()
    failed = 0
    for op, shapes, attrs, err in results:
        ok = err < 1e-4
        failed += 0 if ok else 1
        label = f"{op} {'x'.join(str(s) for s in shapes)}"
        if attrs:
            label += f" {attrs}"
        print(f"{'PASS' if ok else 'FAIL'} {label}: max rel err {err:.3e}")
    print(f"{len(results) - failed}/{len(results)} gradient checks passed")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="petrecon",
        description="Low-dose phantom restoration pipeline: dataset "
                    "simulation, two training stages, reconstruction with "
                    "optional data-consistency refinement, and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.set_defaults(fn=fn)
        return p

    p = add("phantom", _cmd_phantom, help="generate phantom ground truths")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = add("lowdose", _cmd_lowdose, help="simulate low-dose images into a dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)

    p = add("train-transformer", _cmd_train_transformer,
            help="train the prior extractor and restoration stage jointly")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = add("train-diffusion", _cmd_train_diffusion,
            help="train the prior-space denoiser against the frozen extractor")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--transformer-ckpt", required=True)
    p.add_argument("--out", required=True)

    p = add("reconstruct", _cmd_reconstruct,
            help="sample priors, restore images, optionally refine")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--transformer-ckpt", required=True)
    p.add_argument("--diffusion-ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dose", required=True, type=float)
    p.add_argument("--split", default="test", choices=("train", "test"))
    group = p.add_mutually_exclusive_group()
    group.add_argument("--use-dcs", dest="use_dcs", action="store_true", default=True)
    group.add_argument("--no-dcs", dest="use_dcs", action="store_false")
    p.add_argument("--png", action="store_true",
                   help="also export windowed grayscale images and residual panels")

    p = add("evaluate", _cmd_evaluate,
            help="score reconstructions against ground truth")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--recon", required=True)
    p.add_argument("--out", required=True)

    add("gradcheck", _cmd_gradcheck,
        help="run the autodiff finite-difference suite")

    return parser


_EXPECTED = (CliError, cfgmod.ConfigError, store.StoreError, dcsmod.DcsError,
             dfmod.DiffusionError, phmod.PhantomError, metmod.MetricsError,
             TrainingDiverged, nm.NumericError, OSError, ValueError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except _EXPECTED as exc:
        print(f"[{args.command}] {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
