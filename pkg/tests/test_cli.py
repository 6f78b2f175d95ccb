import json

import pytest

from usp.cli import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Drive the whole pipeline through the CLI, as a user would."""
    ws = tmp_path_factory.mktemp("cli")
    ds = ws / "dataset.json"
    ds.write_text(json.dumps({"name": "shapes10", "n_train": 96, "n_val": 48, "seed": 0}))
    codec_cfg = ws / "codec.json"
    codec_cfg.write_text(json.dumps({"channels": 4, "stride": 4, "width": 16}))

    assert main(["train-codec", "--dataset", str(ds), "--codec-config", str(codec_cfg),
                 "--norm", "vae_half", "--epochs", "2", "--recon-threshold", "0.5",
                 "--out", str(ws / "codec.uspk")]) == 0
    assert main(["cache", "--dataset", str(ds), "--codec", str(ws / "codec.uspk"),
                 "--out", str(ws / "train.uspc")]) == 0
    assert main(["pretrain", "--cache", str(ws / "train.uspc"),
                 "--codec", str(ws / "codec.uspk"), "--model", "tiny",
                 "--epochs", "2", "--batch", "48", "--peak-lr", "1e-3",
                 "--mask-ratio", "0.75", "--per-patch-norm", "on",
                 "--noisy-pretrain", "off", "--seed", "0",
                 "--out", str(ws / "pre")]) == 0
    return ws, ds


def test_transplant_and_train_gen(workspace):
    ws, ds = workspace
    assert main(["transplant", "--src", str(ws / "pre" / "pretrain.uspk"),
                 "--framework", "dit", "--num-classes", "10",
                 "--reinit-last-k", "0", "--gate-bias", "0",
                 "--report", str(ws / "report.json"),
                 "--out", str(ws / "geninit.uspk")]) == 0
    report = json.loads((ws / "report.json").read_text())
    assert report["unmatched_dest"] == []
    assert main(["train-gen", "--init", str(ws / "geninit.uspk"), "--framework", "dit",
                 "--cache", str(ws / "train.uspc"), "--steps", "10", "--batch", "16",
                 "--checkpoint-every", "5", "--out", str(ws / "gen")]) == 0
    assert (ws / "gen" / "ckpt-000010.uspk").exists()


def test_sample_eval_probe(workspace, capsys):
    ws, ds = workspace
    test_transplant_and_train_gen(workspace)  # ensure artifacts exist
    capsys.readouterr()
    assert main(["sample", "--ckpt", str(ws / "gen" / "generator.uspk"), "--n", "48",
                 "--steps", "4", "--seed", "1", "--out", str(ws / "samples.uspl")]) == 0
    assert main(["eval", "train-embedder", "--dataset", str(ds), "--epochs", "1",
                 "--out", str(ws / "emb.uspk")]) == 0
    assert main(["eval", "make-ref", "--dataset", str(ds), "--split", "val",
                 "--embedder", str(ws / "emb.uspk"), "--out", str(ws / "ref.usps")]) == 0
    capsys.readouterr()
    assert main(["eval", "fd", "--samples", str(ws / "samples.uspl"),
                 "--ref", str(ws / "ref.usps"), "--embedder", str(ws / "emb.uspk"),
                 "--codec", str(ws / "codec.uspk")]) == 0
    fd_out = json.loads(capsys.readouterr().out)
    assert fd_out["fd"] >= 0.0
    assert main(["eval", "is", "--samples", str(ws / "samples.uspl"),
                 "--embedder", str(ws / "emb.uspk"),
                 "--codec", str(ws / "codec.uspk")]) == 0
    is_out = json.loads(capsys.readouterr().out)
    assert is_out["class_score"] >= 1.0
    assert main(["probe", "--ckpt", str(ws / "pre" / "pretrain.uspk"),
                 "--dataset", str(ds), "--codec", str(ws / "codec.uspk"),
                 "--epochs", "2"]) == 0
    probe_out = json.loads(capsys.readouterr().out)
    assert 0.0 <= probe_out["top1"] <= 1.0


def test_finetune_cli(workspace, capsys):
    ws, ds = workspace
    assert main(["finetune", "--ckpt", str(ws / "pre" / "pretrain.uspk"),
                 "--dataset", str(ds), "--codec", str(ws / "codec.uspk"),
                 "--num-classes", "10", "--epochs", "1",
                 "--out", str(ws / "sft.uspk")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert 0.0 <= out["top1"] <= 1.0


def test_manifest_and_curves_cli(tmp_path, capsys):
    manifest = {
        "version": 1, "name": "cli", "master_seed": 1,
        "dataset": {"name": "shapes10", "n_train": 64, "n_val": 32, "seed": 0},
        "codec": {"channels": 4, "stride": 4, "width": 16, "epochs": 1,
                  "recon_threshold": 1.0},
        "embedder": {"epochs": 1},
        "pretrain": {"model": "tiny", "epochs": 1, "batch_size": 32, "peak_lr": 1e-3},
        "train_gen": {"framework": "sit", "steps": 10, "batch_size": 16,
                      "checkpoint_every": 5},
        "eval": {"fd_samples": 32, "sampler_steps": 3, "curve_samples": 16,
                 "curve_steps": 2, "layerwise": True, "probe_epochs": 2},
    }
    mpath = tmp_path / "m.json"
    mpath.write_text(json.dumps(manifest))
    assert main(["manifest", "--file", str(mpath), "--out", str(tmp_path / "run")]) == 0
    capsys.readouterr()
    assert main(["curves", "--runs", str(tmp_path / "run"), "--kind", "fd_curve",
                 "--out", str(tmp_path / "plots")]) == 0
    assert (tmp_path / "plots" / "fd_curve.csv").exists()
    assert (tmp_path / "plots" / "fd_curve.png").exists()
    capsys.readouterr()
    assert main(["curves", "--runs", str(tmp_path / "run"), "--kind", "layer_probe",
                 "--out", str(tmp_path / "plots")]) == 0
    assert (tmp_path / "plots" / "layer_probe.png").exists()
    capsys.readouterr()
    assert main(["curves", "--runs", str(tmp_path / "run"), "--kind", "restoration_panel",
                 "--n-images", "2", "--out", str(tmp_path / "plots")]) == 0
    assert (tmp_path / "plots" / "restoration_panel.png").exists()
    assert (tmp_path / "plots" / "restore_00_gt.png").exists()
    meta = json.loads((tmp_path / "plots" / "restoration_meta.json").read_text())
    assert meta["denormalized_with_oracle_stats"] is True


def test_exit_codes(tmp_path, capsys):
    # config error -> 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"version": 1, "bogus": True}))
    assert main(["manifest", "--file", str(bad), "--out", str(tmp_path / "r")]) == 2
    # digest mismatch -> 4
    ds = tmp_path / "ds.json"
    ds.write_text(json.dumps({"name": "shapes10", "n_train": 32, "n_val": 16}))
    assert main(["train-codec", "--dataset", str(ds), "--norm", "vae_half",
                 "--epochs", "1", "--recon-threshold", "1.0",
                 "--out", str(tmp_path / "c.uspk")]) == 0
    capsys.readouterr()
    assert main(["cache", "--dataset", str(ds), "--codec", str(tmp_path / "c.uspk"),
                 "--norm", "imagenet", "--out", str(tmp_path / "x.uspc")]) == 4
    # numeric failure -> 3
    assert main(["train-codec", "--dataset", str(ds), "--norm", "vae_half",
                 "--epochs", "1", "--recon-threshold", "1e-9",
                 "--out", str(tmp_path / "c2.uspk")]) == 3
