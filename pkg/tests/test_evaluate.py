import math
import warnings

import numpy as np
import pytest
import torch

from usp.archive import archive_from_module
from usp.errors import ConfigError, DigestMismatch
from usp.evaluate import (
    FinetuneRecipe,
    FrechetStats,
    _layer_decay_groups,
    _train_linear_head,
    class_score,
    compute_stats,
    class_probs,
    embed_pixels,
    finetune_classify,
    frechet_distance,
    layerwise_probe,
    linear_probe,
    load_embedder,
    load_ref_stats,
    reference_stats,
    save_ref_stats,
    train_fixture_classifier,
)
from usp.mae import PretrainModelConfig, build_mae
from usp.transplant import adapt_vit_to_classifier
from usp.utils import json_digest


def stats_1d(mu, var, fp="fp"):
    return FrechetStats(mean=np.array([mu]), cov=np.array([[var]]), n=100,
                        embedder_fingerprint=fp)


# ---------------------------------------------------------------------------
# Fréchet distance
# ---------------------------------------------------------------------------


def test_fd_zero_on_identical():
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(200, 8))
    a = compute_stats(feats, "fp")
    assert frechet_distance(a, a) == 0.0


def test_fd_closed_form_mean_shift():
    assert abs(frechet_distance(stats_1d(0.0, 1.0), stats_1d(1.0, 1.0)) - 1.0) < 1e-12


def test_fd_closed_form_variance_gap():
    # 1 + 4 - 2*2 = 1
    assert abs(frechet_distance(stats_1d(0.0, 1.0), stats_1d(0.0, 4.0)) - 1.0) < 1e-12


def test_fd_diagonal_oracle():
    """Independent oracle: for diagonal covariances the distance decomposes
    per dimension."""
    rng = np.random.default_rng(1)
    for _ in range(5):
        d = int(rng.integers(2, 6))
        mu_a, mu_b = rng.normal(size=d), rng.normal(size=d)
        va, vb = rng.uniform(0.5, 3.0, size=d), rng.uniform(0.5, 3.0, size=d)
        a = FrechetStats(mu_a, np.diag(va), n=10, embedder_fingerprint="fp")
        b = FrechetStats(mu_b, np.diag(vb), n=10, embedder_fingerprint="fp")
        expected = float(((mu_a - mu_b) ** 2).sum() + (va + vb - 2 * np.sqrt(va * vb)).sum())
        assert abs(frechet_distance(a, b) - expected) < 1e-9


def test_fd_symmetry_and_nonnegativity():
    rng = np.random.default_rng(2)
    for _ in range(5):
        fa = rng.normal(size=(64, 6))
        fb = rng.normal(size=(64, 6)) * rng.uniform(0.5, 2.0) + rng.normal(size=6)
        a, b = compute_stats(fa, "fp"), compute_stats(fb, "fp")
        ab, ba = frechet_distance(a, b), frechet_distance(b, a)
        assert abs(ab - ba) < 1e-9
        assert ab >= 0.0


def test_fd_fingerprint_mismatch():
    with pytest.raises(DigestMismatch):
        frechet_distance(stats_1d(0, 1, "a"), stats_1d(0, 1, "b"))


def test_stats_warn_when_rank_deficient():
    rng = np.random.default_rng(3)
    with pytest.warns(UserWarning):
        compute_stats(rng.normal(size=(4, 8)), "fp")


def test_ref_stats_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    stats = compute_stats(rng.normal(size=(50, 5)), "fp")
    save_ref_stats(tmp_path / "r.usps", stats)
    loaded = load_ref_stats(tmp_path / "r.usps")
    assert np.array_equal(loaded.mean, stats.mean)
    assert np.array_equal(loaded.cov, stats.cov)
    assert loaded.n == stats.n and loaded.embedder_fingerprint == "fp"
    raw = (tmp_path / "r.usps").read_bytes()
    (tmp_path / "r.usps").write_bytes(raw[:-8])
    with pytest.raises(DigestMismatch):
        load_ref_stats(tmp_path / "r.usps")


# ---------------------------------------------------------------------------
# class score
# ---------------------------------------------------------------------------


def test_class_score_uniform_is_one():
    probs = np.full((32, 10), 0.1)
    assert abs(class_score(probs) - 1.0) < 1e-12


def test_class_score_balanced_onehot_is_k():
    k = 7
    probs = np.eye(k)[np.arange(70) % k]
    assert abs(class_score(probs) - k) < 1e-9


def test_class_score_collapsed_is_one():
    probs = np.zeros((20, 5))
    probs[:, 2] = 1.0
    assert abs(class_score(probs) - 1.0) < 1e-12


# ---------------------------------------------------------------------------
# embedder fixture
# ---------------------------------------------------------------------------


def test_embedder_training_and_fingerprint(small_train):
    arc = train_fixture_classifier(small_train, seed=0, epochs=1)
    net, fp = load_embedder(arc)
    assert fp == arc.meta["fingerprint"]
    feats = embed_pixels(net, small_train.pixels[:8])
    assert feats.shape == (8, 64)
    probs = class_probs(net, small_train.pixels[:8])
    assert np.allclose(probs.sum(axis=1), 1.0)
    again = train_fixture_classifier(small_train, seed=0, epochs=1)
    assert again.meta["fingerprint"] == fp  # seed-pinned


def test_reference_stats_reproducible(small_val):
    arc = train_fixture_classifier(small_val, seed=1, epochs=1)
    net, fp = load_embedder(arc)
    a = reference_stats(small_val, net, fp)
    b = reference_stats(small_val, net, fp)
    assert np.array_equal(a.mean, b.mean) and np.array_equal(a.cov, b.cov)


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------


def test_linear_head_separable_features():
    gen = torch.Generator().manual_seed(0)
    labels = torch.arange(200) % 4
    centers = torch.eye(4) * 10.0
    feats = centers[labels] + 0.01 * torch.randn(200, 4, generator=gen)
    acc = _train_linear_head(feats, labels, feats, labels, epochs=20)
    assert acc == 1.0


def test_linear_head_lars_runs():
    gen = torch.Generator().manual_seed(0)
    labels = torch.arange(100) % 2
    feats = torch.randn(100, 8, generator=gen) + labels.unsqueeze(1) * 3.0
    acc = _train_linear_head(feats, labels, feats, labels, epochs=10, optimizer="lars")
    assert acc > 0.9


def _tiny_pretrain_archive():
    cfg = PretrainModelConfig(latent_channels=4, grid=(8, 8), patch=2, depth=3, heads=2,
                              dim=16, dec_depth=1, dec_dim=8, mlp_ratio=2.0)
    model = build_mae(cfg, seed=0)
    meta = {"model": cfg.as_dict(), "cache_fingerprint": "t"}
    return archive_from_module("pretrain", model, meta=meta, config_digest=json_digest(meta))


def test_probe_chance_level_on_structureless_data():
    arc = _tiny_pretrain_archive()
    gen = torch.Generator().manual_seed(0)
    k = 4
    train_lat = torch.randn(400, 4, 8, 8, generator=gen)
    val_lat = torch.randn(200, 4, 8, 8, generator=gen)
    train_y = torch.arange(400) % k
    val_y = torch.arange(200) % k
    result = linear_probe(arc, train_lat, train_y, val_lat, val_y, epochs=10)
    assert abs(result.top1 - 1.0 / k) < 0.12
    assert result.frozen_trunk


def test_layerwise_probe_covers_every_block():
    arc = _tiny_pretrain_archive()
    gen = torch.Generator().manual_seed(1)
    lat = torch.randn(120, 4, 8, 8, generator=gen)
    y = torch.arange(120) % 3
    result = layerwise_probe(arc, lat, y, lat[:60], y[:60], epochs=3)
    assert sorted(result.per_layer) == [0, 1, 2]


def test_probe_rejects_out_of_range_layer():
    arc = _tiny_pretrain_archive()
    lat = torch.randn(20, 4, 8, 8)
    y = torch.zeros(20, dtype=torch.int64)
    with pytest.raises(ConfigError):
        linear_probe(arc, lat, y, lat, y, layer=7, epochs=1)


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------


def test_finetune_zero_epochs_is_chance():
    arc = adapt_vit_to_classifier(_tiny_pretrain_archive(), 4)
    gen = torch.Generator().manual_seed(2)
    lat = torch.randn(80, 4, 8, 8, generator=gen)
    y = torch.arange(80) % 4
    result, _ = finetune_classify(arc, lat, y, lat, y, recipe=FinetuneRecipe(epochs=0))
    assert abs(result.top1 - 0.25) < 1e-6  # zero head: argmax is class 0


def test_layer_decay_identity_at_one():
    from usp.transplant import load_classifier

    arc = adapt_vit_to_classifier(_tiny_pretrain_archive(), 4)
    model = load_classifier(arc)
    groups = _layer_decay_groups(model, base_lr=1e-3, decay=1.0, weight_decay=0.0)
    assert all(abs(g["lr"] - 1e-3) < 1e-12 for g in groups)
    decayed = _layer_decay_groups(model, base_lr=1e-3, decay=0.75, weight_decay=0.0)
    assert any(g["lr"] < 1e-3 for g in decayed)


def test_finetune_beats_probe_on_learnable_data():
    """Fine-tuning a trunk should reach at least the linear-probe accuracy."""
    arc = _tiny_pretrain_archive()
    gen = torch.Generator().manual_seed(3)
    k = 3
    protos = 2.0 * torch.randn(k, 4, 8, 8, generator=gen)
    train_y = torch.arange(240) % k
    val_y = torch.arange(120) % k
    train_lat = protos[train_y] + 0.1 * torch.randn(240, 4, 8, 8, generator=gen)
    val_lat = protos[val_y] + 0.1 * torch.randn(120, 4, 8, 8, generator=gen)
    probe = linear_probe(arc, train_lat, train_y, val_lat, val_y, epochs=15)
    cls_arc = adapt_vit_to_classifier(arc, k)
    sft, sft_arc = finetune_classify(
        cls_arc, train_lat, train_y, val_lat, val_y,
        recipe=FinetuneRecipe(epochs=25, lr=1e-3),
    )
    assert sft.top1 >= probe.top1
    assert sft_arc.stage == "classifier" and sft_arc.meta["mode"] == "sft_source"


def test_finetune_frozen_probe_archive_rejected():
    arc = adapt_vit_to_classifier(_tiny_pretrain_archive(), 4, mode="linear_probe")
    lat = torch.randn(8, 4, 8, 8)
    y = torch.zeros(8, dtype=torch.int64)
    with pytest.raises(ConfigError):
        finetune_classify(arc, lat, y, lat, y)
