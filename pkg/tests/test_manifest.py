import json
import os

import pytest
import torch

from usp.errors import ConfigError
from usp.manifest import (
    AblationGrid,
    config_diff,
    resolved_config,
    run_ablation,
    run_manifest,
    validate_manifest,
)


def tiny_manifest(**overrides) -> dict:
    m = {
        "version": 1,
        "name": "tiny",
        "master_seed": 0,
        "dataset": {"name": "shapes10", "n_train": 96, "n_val": 48, "seed": 0},
        "norm": "vae_half",
        "codec": {"channels": 4, "stride": 4, "width": 16, "epochs": 2,
                  "recon_threshold": 0.5},
        "cache": {"flip": True},
        "embedder": {"epochs": 1},
        "pretrain": {"model": "tiny", "epochs": 2, "batch_size": 48, "peak_lr": 1e-3},
        "train_gen": {"framework": "dit", "steps": 20, "batch_size": 16,
                      "checkpoint_every": 10},
        "eval": {"fd_samples": 48, "sampler_steps": 5, "curve_samples": 32,
                 "curve_steps": 4, "probe": True, "probe_epochs": 3,
                 "class_score": True},
    }
    m.update(overrides)
    return m


def test_validate_unknown_keys():
    with pytest.raises(ConfigError):
        validate_manifest({"bogus": 1})
    with pytest.raises(ConfigError):
        validate_manifest(tiny_manifest(pretrain={"model": "tiny", "nope": 2}))
    with pytest.raises(ConfigError):
        validate_manifest(tiny_manifest(arms={"a": {"init_source": "martian"}}))


def test_empty_manifest_gives_summary(tmp_path):
    summary = run_manifest({"version": 1, "name": "empty", "master_seed": 0},
                           tmp_path / "run")
    assert (tmp_path / "run" / "summary.json").exists()
    assert summary["stages"] == {} and summary["arms"] == {}


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("pipeline")
    manifest = tiny_manifest(arms={"usp": {"init_source": "pretrain"},
                                   "scratch": {"init_source": "random"}})
    summary = run_manifest(manifest, out / "run")
    return manifest, out / "run", summary


def test_pipeline_produces_both_arms(pipeline_run):
    manifest, run_dir, summary = pipeline_run
    assert set(summary["arms"]) == {"usp", "scratch"}
    for arm in summary["arms"].values():
        assert "fd" in arm["eval"] and arm["eval"]["fd"] >= 0.0
        assert arm["eval"]["class_score"] >= 1.0
        assert len(arm["eval"]["curve"]) == 2  # checkpoints at 10 and 20
    assert summary["stages"]["pretrain_probe"]["top1"] >= 0.0
    assert summary["arms"]["usp"]["init"]["verify"]["pass"]


def test_pipeline_idempotent_resume(pipeline_run):
    manifest, run_dir, summary = pipeline_run
    stamps = {
        p: p.stat().st_mtime_ns
        for p in (run_dir / "store").rglob("state.json")
    }
    again = run_manifest(manifest, run_dir)
    assert again == summary
    for p, stamp in stamps.items():
        assert p.stat().st_mtime_ns == stamp  # nothing recomputed


def test_pipeline_shares_stages_across_arms(pipeline_run):
    _, run_dir, summary = pipeline_run
    names = [p.name for p in (run_dir / "store").iterdir()]
    assert sum(1 for n in names if n.startswith("codec-")) == 1
    assert sum(1 for n in names if n.startswith("pretrain-")) == 1


def test_transplant_report_written(pipeline_run):
    _, run_dir, summary = pipeline_run
    init_dir = run_dir / "store" / summary["arms"]["usp"]["init"]["dir"]
    report = json.loads((init_dir / "report.json").read_text())
    assert report["unmatched_dest"] == []
    n_dest = len(report["mapped"]) + len(report["interpolated"]) + len(report["reinitialized"])
    assert n_dest > 0


def test_ablation_rows_and_purity(tmp_path):
    base = tiny_manifest()
    del base["train_gen"]
    del base["eval"]
    base["eval"] = {"probe": True, "probe_epochs": 2}
    grid = AblationGrid(axis="mask_ratio", values=[0.5, 0.75], base=base, seeds=(0,))
    rows = run_ablation(grid, tmp_path / "ablate")
    assert len(rows) == 2
    assert all(r["probe_top1"] != "" for r in rows)
    configs = json.loads((tmp_path / "ablate" / "configs.json").read_text())
    diff = config_diff(configs[0], configs[1])
    assert diff == ["pretrain.mask_ratio"]


def test_ablation_unknown_axis():
    with pytest.raises(ConfigError):
        AblationGrid(axis="optimizer", values=[1], base=tiny_manifest())


def test_resolved_config_drops_label():
    a = resolved_config(tiny_manifest(name="x"))
    b = resolved_config(tiny_manifest(name="y"))
    assert a == b
