import math

import pytest
import torch

from usp.cache import LatentCache, build_cache, read_cache
from usp.errors import ConfigError, NumericFailure
from usp.mae import PretrainModelConfig, build_mae, recon_loss, sample_mask
from usp.pretrain import (
    OptimizerSpec,
    ScheduleSpec,
    load_pretrained,
    lr_at,
    run_pretrain,
    weight_decay_param_groups,
)
from usp.utils import read_csv


def tiny_cfg():
    return PretrainModelConfig(latent_channels=4, grid=(8, 8), patch=2, depth=2, heads=2,
                               dim=16, dec_depth=1, dec_dim=8, mlp_ratio=2.0)


def make_cache(n=64, seed=0, structured=False) -> LatentCache:
    gen = torch.Generator().manual_seed(seed)
    if structured:
        # prototype mixtures: masked patches are predictable from visible ones
        base = torch.randn(10, 4, 8, 8, generator=gen)
        idx = torch.randint(0, 10, (n,), generator=gen)
        values = base[idx] + 0.05 * torch.randn(n, 4, 8, 8, generator=gen)
    else:
        values = torch.randn(n, 4, 8, 8, generator=gen)
    return LatentCache(
        codec_fingerprint="test",
        values=values,
        labels=torch.arange(n, dtype=torch.int64) % 10,
        sample_ids=[f"{i:06d}" for i in range(n)],
    )


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------


def test_lr_ramp_origin_and_peak():
    sched = ScheduleSpec(total_epochs=10, warmup_epochs=2)
    assert lr_at(0, sched, steps_per_epoch=5, peak=1.0) == 0.0
    assert lr_at(10, sched, steps_per_epoch=5, peak=1.0) == 1.0  # warmup boundary


def test_lr_cosine_endpoint_and_continuity():
    sched = ScheduleSpec(total_epochs=10, warmup_epochs=2)
    total = 10 * 5
    assert abs(lr_at(total, sched, 5, peak=1.0)) < 1e-12
    # continuity at the junction
    before = lr_at(9, sched, 5, peak=1.0)
    after = lr_at(11, sched, 5, peak=1.0)
    assert before < 1.0 and after < 1.0
    assert abs(lr_at(10, sched, 5, 1.0) - 1.0) == 0.0


def test_lr_default_warmup_fraction():
    sched = ScheduleSpec(total_epochs=800)
    assert sched.resolved_warmup() == 40.0  # 5% of the budget


def test_peak_lr_linear_scaling():
    spec = OptimizerSpec()
    assert abs(spec.resolve_peak_lr(4096) - 2.4e-3) < 1e-12
    assert abs(spec.resolve_peak_lr(256) - 1.5e-4) < 1e-12


def test_betas_orderings():
    assert OptimizerSpec().betas() == (0.9, 0.95)
    assert OptimizerSpec(betas_as_printed=True).betas() == (0.95, 0.9)
    with pytest.raises(ConfigError):
        OptimizerSpec(beta_a=1.0)


# ---------------------------------------------------------------------------
# weight decay exclusion
# ---------------------------------------------------------------------------


def test_weight_decay_exclusion_set_exact():
    model = build_mae(tiny_cfg(), seed=0)
    groups = weight_decay_param_groups(model, 0.05)
    decayed = {id(p) for p in groups[0]["params"]}
    undecayed = {id(p) for p in groups[1]["params"]}
    assert groups[0]["weight_decay"] == 0.05 and groups[1]["weight_decay"] == 0.0
    for name, param in model.named_parameters():
        expected_undecayed = param.ndim <= 1 or name.endswith(("cls_token", "mask_token"))
        assert (id(param) in undecayed) == expected_undecayed, name
        assert (id(param) in decayed) == (not expected_undecayed), name


# ---------------------------------------------------------------------------
# training runs
# ---------------------------------------------------------------------------


def test_two_epoch_run_and_checkpoint_round_trip(tmp_path):
    cache = make_cache(64)
    cfg = tiny_cfg()
    arc, rows = run_pretrain(
        cache, cfg, OptimizerSpec(), ScheduleSpec(total_epochs=2, warmup_epochs=0.5),
        batch_size=32, seed=0, out_dir=tmp_path,
    )
    assert len(rows) == 2
    assert all(math.isfinite(r["loss"]) for r in rows)
    model = load_pretrained(arc)
    reloaded = load_pretrained(type(arc).load(tmp_path / "pretrain.uspk"))
    plan = sample_mask(cfg.num_patches, cfg.mask_ratio, seed=0, n=8)
    batch = cache.values[:8]
    with torch.no_grad():
        a = recon_loss(model.forward_pretrain(batch, plan), batch, plan, cfg.patch)
        b = recon_loss(reloaded.forward_pretrain(batch, plan), batch, plan, cfg.patch)
    assert float(a) == float(b)


def test_zero_peak_lr_leaves_parameters_unchanged():
    cache = make_cache(32)
    cfg = tiny_cfg()
    arc, _ = run_pretrain(
        cache, cfg, OptimizerSpec(peak_lr=0.0), ScheduleSpec(total_epochs=1, warmup_epochs=0),
        batch_size=16, seed=3,
    )
    fresh = build_mae(cfg, seed=__import__("usp.utils", fromlist=["derive_seed"]).derive_seed(3, "mlm-init"))
    for name, t in fresh.state_dict().items():
        if t.is_floating_point():
            assert torch.equal(arc.get(name), t), name


def test_determinism_same_seed_same_digest(tmp_path):
    cache = make_cache(48)
    cfg = tiny_cfg()
    sched = ScheduleSpec(total_epochs=2, warmup_epochs=0.5)
    a, rows_a = run_pretrain(cache, cfg, OptimizerSpec(), sched, batch_size=16, seed=7,
                             out_dir=tmp_path / "a")
    b, rows_b = run_pretrain(cache, cfg, OptimizerSpec(), sched, batch_size=16, seed=7,
                             out_dir=tmp_path / "b")
    assert a.digest() == b.digest()
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    c, _ = run_pretrain(cache, cfg, OptimizerSpec(), sched, batch_size=16, seed=8)
    assert c.digest() != a.digest()


def test_metrics_columns_and_timing_sidecar(tmp_path):
    cache = make_cache(32)
    run_pretrain(
        cache, tiny_cfg(), OptimizerSpec(), ScheduleSpec(total_epochs=1, warmup_epochs=0),
        batch_size=16, seed=0, out_dir=tmp_path,
    )
    rows = read_csv(tmp_path / "metrics.csv")
    assert list(rows[0].keys()) == ["step", "epoch", "lr", "loss", "loss_ema"]
    timing = read_csv(tmp_path / "timing.csv")
    assert list(timing[0].keys()) == ["epoch", "seconds"]


def test_nan_abort_retains_checkpoint(tmp_path):
    cache = make_cache(32)
    cache.values[5, 0, 0, 0] = float("nan")
    with pytest.raises(NumericFailure):
        run_pretrain(
            cache, tiny_cfg(), OptimizerSpec(), ScheduleSpec(total_epochs=2, warmup_epochs=0),
            batch_size=16, seed=0, out_dir=tmp_path,
        )
    assert (tmp_path / "metrics.csv").exists()


def test_longer_training_not_worse():
    cache = make_cache(256, seed=1, structured=True)
    cfg = tiny_cfg()
    opt = OptimizerSpec(peak_lr=1e-3)
    _, short = run_pretrain(cache, cfg, opt,
                            ScheduleSpec(total_epochs=5, warmup_epochs=1), batch_size=32, seed=5)
    _, long = run_pretrain(cache, cfg, opt,
                           ScheduleSpec(total_epochs=10, warmup_epochs=1), batch_size=32, seed=5)
    assert long[-1]["loss"] <= short[-1]["loss"]


def test_empty_cache_rejected():
    cache = LatentCache("x", torch.zeros(0, 4, 8, 8), torch.zeros(0, dtype=torch.int64), [])
    with pytest.raises(ConfigError):
        run_pretrain(cache, tiny_cfg(), OptimizerSpec(), ScheduleSpec(total_epochs=1))
