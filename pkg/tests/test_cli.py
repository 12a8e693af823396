"""End-to-end command-line pipeline on a miniature run, plus PNG export."""

import json
import math
import os

import numpy as np
import pytest
from PIL import Image

from petrecon import cli, store, viz

TINY_CONFIG = {
    "dataset": {
        "n_train": 2,
        "n_test": 1,
        "fractions": [0.5, 0.25],
        "counts_per_activity": 4.0,
    },
    "jcp": {"prior_len": 4, "fold": 8, "blocks": 1},
    "transformer": {
        "channels": [4, 8, 16, 32],
        "heads": [1, 2, 4, 8],
        "blocks": [1, 1, 1, 1],
        "ffn_expansion": 2,
    },
    "diffusion": {"t_steps": 2, "beta": [0.1, 0.5], "embed_dim": 4, "hidden": 16},
    "dcs": {
        "inner_steps": 5,
        "outer_iters": 1,
        "threshold_kind": "background",
        "threshold_value": 2.0,
    },
    "train": {"transformer_steps": 2, "diffusion_steps": 2, "batch": 1},
}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Run every command once into a shared directory tree."""
    root = tmp_path_factory.mktemp("pipe")
    paths = {
        "root": root,
        "config": str(root / "config.json"),
        "data": str(root / "data"),
        "tf": str(root / "ckpt_tf"),
        "dn": str(root / "ckpt_dn"),
        "recon": str(root / "recon"),
        "report": str(root / "report"),
    }
    with open(paths["config"], "w", encoding="utf-8") as f:
        json.dump(TINY_CONFIG, f)
    steps = [
        ["phantom", "--config", paths["config"], "--out", paths["data"]],
        ["lowdose", "--config", paths["config"], "--data", paths["data"]],
        ["train-transformer", "--config", paths["config"], "--data", paths["data"],
         "--out", paths["tf"]],
        ["train-diffusion", "--config", paths["config"], "--data", paths["data"],
         "--transformer-ckpt", paths["tf"], "--out", paths["dn"]],
        ["reconstruct", "--config", paths["config"], "--data", paths["data"],
         "--transformer-ckpt", paths["tf"], "--diffusion-ckpt", paths["dn"],
         "--out", paths["recon"], "--dose", "0.25", "--split", "test", "--png"],
        ["evaluate", "--config", paths["config"], "--data", paths["data"],
         "--recon", paths["recon"], "--out", paths["report"]],
    ]
    for argv in steps:
        rc = cli.main(argv)
        assert rc == 0, f"command failed: {argv[0]}"
    return paths


def test_dataset_layout(pipeline):
    data = pipeline["data"]
    assert os.path.exists(os.path.join(data, "dataset.json"))
    assert os.path.exists(os.path.join(data, "config.json"))
    for split, n in (("train", 2), ("test", 1)):
        for i in range(n):
            d = os.path.join(data, split, f"s{i:04d}")
            assert os.path.exists(os.path.join(d, "spec.json"))
            assert os.path.exists(os.path.join(d, "truth.dt"))
            assert os.path.exists(os.path.join(d, "low_0.5.dt"))
            assert os.path.exists(os.path.join(d, "low_0.25.dt"))


def test_checkpoints_stage_scoped(pipeline):
    _, man_tf = store.load_checkpoint(pipeline["tf"])
    _, man_dn = store.load_checkpoint(pipeline["dn"])
    assert man_tf["stage"] == "jcp+transformer"
    assert man_dn["stage"] == "diffusion"
    names_tf = set(man_tf["params"])
    assert any(n.startswith("jcp.") for n in names_tf)
    assert any(n.startswith("stage.") for n in names_tf)
    assert all(n.startswith("dn.") for n in man_dn["params"])
    assert os.path.exists(os.path.join(pipeline["tf"], "loss.csv"))


def test_reconstruction_artifacts(pipeline):
    d = os.path.join(pipeline["recon"], "s0000")
    fhat = store.load_tensor(os.path.join(d, "fhat.dt"))
    dcs_img = store.load_tensor(os.path.join(d, "dcs.dt"))
    assert fhat.shape == (48, 48) and dcs_img.shape == (48, 48)
    assert np.isfinite(fhat).all() and (dcs_img >= 0).all()
    for png in ("fhat.png", "fhat_residual.png", "dcs.png", "dcs_residual.png"):
        assert os.path.exists(os.path.join(d, png))
    with open(os.path.join(pipeline["recon"], "recon.json"), encoding="utf-8") as f:
        meta = json.load(f)
    assert meta == {"dose": 0.25, "n_samples": 1, "split": "test", "use_dcs": True}


def test_report_contents(pipeline):
    with open(os.path.join(pipeline["report"], "report.json"), encoding="utf-8") as f:
        doc = json.load(f)
    assert doc["dose"] == 0.25 and doc["use_dcs"] is True
    assert set(doc["summary"]) == {"low", "fhat", "dcs"}
    for tag in doc["summary"]:
        for key in ("psnr_l2_db", "psnr_rmse_db", "ssim", "nrmse"):
            assert isinstance(doc["summary"][tag][key], float)
    assert len(doc["samples"]) == 1
    entry = doc["samples"][0]
    assert entry["sample"] == "test/s0000"
    assert set(entry["truth_cr"]) == {f"sphere{k}" for k in range(6)}
    assert "cr_by_lesion" in entry["fhat"]


def test_reconstruct_deterministic(pipeline, tmp_path):
    out2 = str(tmp_path / "recon2")
    rc = cli.main(["reconstruct", "--config", pipeline["config"],
                   "--data", pipeline["data"], "--transformer-ckpt", pipeline["tf"],
                   "--diffusion-ckpt", pipeline["dn"], "--out", out2,
                   "--dose", "0.25", "--split", "test"])
    assert rc == 0
    a = store.load_tensor(os.path.join(pipeline["recon"], "s0000", "fhat.dt"))
    b = store.load_tensor(os.path.join(out2, "s0000", "fhat.dt"))
    assert a.tobytes() == b.tobytes()
    c = store.load_tensor(os.path.join(pipeline["recon"], "s0000", "dcs.dt"))
    d = store.load_tensor(os.path.join(out2, "s0000", "dcs.dt"))
    assert c.tobytes() == d.tobytes()


def test_reconstruct_no_dcs(pipeline, tmp_path):
    out = str(tmp_path / "nodcs")
    rc = cli.main(["reconstruct", "--config", pipeline["config"],
                   "--data", pipeline["data"], "--transformer-ckpt", pipeline["tf"],
                   "--diffusion-ckpt", pipeline["dn"], "--out", out,
                   "--dose", "0.5", "--split", "test", "--no-dcs"])
    assert rc == 0
    assert os.path.exists(os.path.join(out, "s0000", "fhat.dt"))
    assert not os.path.exists(os.path.join(out, "s0000", "dcs.dt"))
    with open(os.path.join(out, "recon.json"), encoding="utf-8") as f:
        assert json.load(f)["use_dcs"] is False


def test_snapshot_mismatch_refused(pipeline, tmp_path, capsys):
    other = dict(TINY_CONFIG)
    other["seeds"] = {"dataset": 99, "init": 2, "train": 3, "sampler": 4}
    cfg2 = str(tmp_path / "other.json")
    with open(cfg2, "w", encoding="utf-8") as f:
        json.dump(other, f)
    rc = cli.main(["lowdose", "--config", cfg2, "--data", pipeline["data"]])
    assert rc == 1
    assert "does not match" in capsys.readouterr().err


def test_dose_not_in_fractions(pipeline, tmp_path, capsys):
    rc = cli.main(["reconstruct", "--config", pipeline["config"],
                   "--data", pipeline["data"], "--transformer-ckpt", pipeline["tf"],
                   "--diffusion-ckpt", pipeline["dn"], "--out", str(tmp_path / "x"),
                   "--dose", "0.3", "--split", "test"])
    assert rc == 1
    assert "not among dataset fractions" in capsys.readouterr().err


def test_wrong_checkpoint_stage_refused(pipeline, tmp_path, capsys):
    rc = cli.main(["reconstruct", "--config", pipeline["config"],
                   "--data", pipeline["data"], "--transformer-ckpt", pipeline["dn"],
                   "--diffusion-ckpt", pipeline["dn"], "--out", str(tmp_path / "x"),
                   "--dose", "0.25"])
    assert rc == 1
    assert "stage" in capsys.readouterr().err


def test_missing_artifacts_fail_cleanly(pipeline, tmp_path, capsys):
    rc = cli.main(["evaluate", "--config", pipeline["config"],
                   "--data", pipeline["data"], "--recon", str(tmp_path / "void"),
                   "--out", str(tmp_path / "rep")])
    assert rc == 1
    assert capsys.readouterr().err.startswith("[evaluate]")


def test_evaluate_perfect_reconstruction(pipeline, tmp_path):
    # hand-crafted reconstruction equal to the truth: error metrics must hit
    # their ideal values exactly
    crafted = tmp_path / "perfect"
    s_dir = crafted / "s0000"
    os.makedirs(s_dir)
    truth = store.load_tensor(os.path.join(pipeline["data"], "test", "s0000", "truth.dt"))
    store.save_tensor(truth, str(s_dir / "fhat.dt"))
    with open(os.path.join(pipeline["data"], "config.json"), encoding="utf-8") as f:
        snap = f.read()
    with open(crafted / "config.json", "w", encoding="utf-8") as f:
        f.write(snap)
    with open(crafted / "recon.json", "w", encoding="utf-8") as f:
        json.dump({"dose": 0.25, "split": "test", "use_dcs": False, "n_samples": 1}, f)
    out = str(tmp_path / "perfect_report")
    rc = cli.main(["evaluate", "--config", pipeline["config"],
                   "--data", pipeline["data"], "--recon", str(crafted), "--out", out])
    assert rc == 0
    with open(os.path.join(out, "report.json"), encoding="utf-8") as f:
        doc = json.load(f)
    assert doc["summary"]["fhat"]["nrmse"] == 0.0
    assert doc["summary"]["fhat"]["ssim"] == 1.0
    assert math.isinf(doc["summary"]["fhat"]["psnr_l2_db"])


def test_gradcheck_command(capsys):
    rc = cli.main(["gradcheck"])
    out = capsys.readouterr().out
    assert rc == 0
    assert "FAIL" not in out
    lines = [l for l in out.splitlines() if l.startswith("PASS")]
    assert len(lines) >= 30
    assert "gradient checks passed" in out


def test_parser_commands():
    parser = cli.build_parser()
    subs = next(a for a in parser._actions
                if isinstance(a, type(parser._subparsers._group_actions[0])))
    assert set(subs.choices) == {"phantom", "lowdose", "train-transformer",
                                 "train-diffusion", "reconstruct", "evaluate",
                                 "gradcheck"}


def test_unknown_config_key_fails(tmp_path, capsys):
    cfg = str(tmp_path / "bad.json")
    with open(cfg, "w", encoding="utf-8") as f:
        json.dump({"dataset": {"n_trian": 2}}, f)
    rc = cli.main(["phantom", "--config", cfg, "--out", str(tmp_path / "d")])
    assert rc == 1
    assert "n_trian" in capsys.readouterr().err


# -------------------------------------------------------------- viz

def test_export_png_ramp_endpoints(tmp_path):
    arr = np.array([[0.0, 0.5], [1.0, 0.25]])
    p = str(tmp_path / "ramp.png")
    viz.export_png(arr, p, window=(0.0, 1.0))
    back = np.asarray(Image.open(p))
    assert back.dtype == np.uint8
    assert back[0, 0] == 0 and back[1, 0] == 255
    assert back[0, 1] == 128  # np.round(127.5) rounds to even


def test_export_png_constant_with_symmetric_window(tmp_path):
    arr = np.zeros((4, 4))
    p = str(tmp_path / "const.png")
    viz.export_png(arr, p, window=viz.symmetric_window(arr))
    back = np.asarray(Image.open(p))
    assert (back == 128).all()


def test_export_png_degenerate_window_raises(tmp_path):
    with pytest.raises(viz.VizError):
        viz.export_png(np.zeros((4, 4)), str(tmp_path / "x.png"))
    with pytest.raises(viz.VizError):
        viz.export_png(np.ones((4, 4)), str(tmp_path / "x.png"), window=(2.0, 2.0))


def test_export_png_window_clips(tmp_path):
    arr = np.array([[-5.0, 10.0]])
    p = str(tmp_path / "clip.png")
    viz.export_png(arr, p, window=(0.0, 1.0))
    back = np.asarray(Image.open(p))
    assert back[0, 0] == 0 and back[0, 1] == 255


def test_mip_and_stack_handling(tmp_path):
    stack = np.stack([np.full((3, 3), 1.0), np.full((3, 3), 4.0)])
    stack[1, 2, 2] = 0.5
    m = viz.mip(stack)
    assert m[0, 0] == 4.0 and m[2, 2] == 1.0
    with pytest.raises(viz.VizError):
        viz.export_png(stack, str(tmp_path / "s.png"))
    p = str(tmp_path / "mip.png")
    viz.export_png(stack, p, window=(0.0, 4.0), use_mip=True)
    back = np.asarray(Image.open(p))
    assert back[0, 0] == 255
    with pytest.raises(viz.VizError):
        viz.mip(np.zeros((4, 4)))


def test_symmetric_window_values():
    assert viz.symmetric_window(np.array([-3.0, 2.0])) == (-3.0, 3.0)
    assert viz.symmetric_window(np.zeros(4)) == (-1.0, 1.0)


def test_export_png_rejects_1d(tmp_path):
    with pytest.raises(viz.VizError):
        viz.export_png(np.zeros(5), str(tmp_path / "x.png"))
