"""Pretraining recipe: AdamW, linear warmup to peak then cosine decay to zero.

The peak learning rate follows the linear batch-size scaling rule from the
reference recipe (2.4e-3 at batch 4096). Weight decay is excluded from every
1-D parameter (biases, norm scales) and from the class/mask tokens, and from
nothing else.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass
from pathlib import Path

import torch

from .archive import CheckpointArchive, archive_from_module
from .cache import LatentCache
from .diffusion import NoiseSchedule
from .errors import ConfigError, NumericFailure
from .mae import MaskedAutoencoder, PretrainModelConfig, build_mae, recon_loss, sample_mask
from .utils import check_finite, derive_seed, json_digest, new_generator, write_csv

REFERENCE_PEAK_LR = 2.4e-3
REFERENCE_BATCH = 4096


@dataclass
class OptimizerSpec:
    kind: str = "adamw"
    beta_a: float = 0.9
    beta_b: float = 0.95
    weight_decay: float = 0.05
    peak_lr: float | None = None  # None: linear scaling from the reference recipe
    eps: float = 1e-8
    betas_as_printed: bool = False  # swap to (0.95, 0.9)

    def __post_init__(self):
        if self.kind != "adamw":
            raise ConfigError(f"unsupported optimizer kind {self.kind!r}")
        for b in (self.beta_a, self.beta_b):
            if not 0.0 < b < 1.0:
                raise ConfigError("betas must lie in (0, 1)")

    def betas(self) -> tuple[float, float]:
        if self.betas_as_printed:
            return (0.95, 0.9)
        return (self.beta_a, self.beta_b)

    def resolve_peak_lr(self, batch_size: int) -> float:
        if self.peak_lr is not None:
            return self.peak_lr
        return REFERENCE_PEAK_LR * batch_size / REFERENCE_BATCH

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class ScheduleSpec:
    total_epochs: int
    warmup_epochs: float | None = None  # None: 5% of total (reference 40/800)
    floor_lr: float = 0.0

    def resolved_warmup(self) -> float:
        if self.warmup_epochs is None:
            return 0.05 * self.total_epochs
        return self.warmup_epochs

    def as_dict(self) -> dict:
        return {
            "total_epochs": self.total_epochs,
            "warmup_epochs": self.warmup_epochs,
            "floor_lr": self.floor_lr,
        }


def lr_at(step: int, sched: ScheduleSpec, steps_per_epoch: int, peak: float) -> float:
    """Linear ramp over the warmup steps, then a half cosine down to floor_lr.

    lr(0) = 0, lr(warmup) = peak exactly, lr(total) = floor_lr; the two
    segments agree at the junction.
    """
    if step < 0:
        raise ConfigError("step must be nonnegative")
    warmup_steps = int(round(sched.resolved_warmup() * steps_per_epoch))
    total_steps = sched.total_epochs * steps_per_epoch
    if warmup_steps > 0 and step < warmup_steps:
        return peak * step / warmup_steps
    if step >= total_steps:
        return sched.floor_lr
    span = max(total_steps - warmup_steps, 1)
    progress = (step - warmup_steps) / span
    return sched.floor_lr + (peak - sched.floor_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def weight_decay_param_groups(
    model: torch.nn.Module, weight_decay: float
) -> list[dict]:
    """Two optimizer groups: decayed (>=2-D weights) and undecayed
    (1-D parameters and the class/mask tokens), exactly."""
    decay, no_decay = [], []
    for name, param in model.named_parameters():
        if not param.requires_grad:
            continue
        if param.ndim <= 1 or name.endswith(("cls_token", "mask_token")):
            no_decay.append(param)
        else:
            decay.append(param)
    return [
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]


METRIC_COLUMNS = ("step", "epoch", "lr", "loss", "loss_ema")


def run_pretrain(
    cache: LatentCache,
    model_cfg: PretrainModelConfig,
    opt: OptimizerSpec,
    sched: ScheduleSpec,
    batch_size: int = 256,
    seed: int = 0,
    out_dir: str | os.PathLike | None = None,
    noise_schedule: NoiseSchedule | None = None,
) -> tuple[CheckpointArchive, list[dict]]:
    """Train the masked autoencoder over a latent cache.

    Emits per-epoch metric rows (step, epoch, lr, loss, loss_ema) plus a
    timing sidecar; wall-clock never enters the metrics file so reruns with
    the same seed reproduce it bitwise. A checkpoint is written every epoch
    when out_dir is set, so a NaN abort always leaves the last good one.
    """
    if cache.count == 0:
        raise ConfigError("cannot pretrain on an empty cache")
    if model_cfg.noisy and noise_schedule is None:
        noise_schedule = NoiseSchedule()
    model = build_mae(model_cfg, seed=derive_seed(seed, "mlm-init"))
    peak = opt.resolve_peak_lr(batch_size)
    optimizer = torch.optim.AdamW(
        weight_decay_param_groups(model, opt.weight_decay),
        lr=peak,
        betas=opt.betas(),
        eps=opt.eps,
    )
    values = cache.values
    n = values.shape[0]
    steps_per_epoch = math.ceil(n / batch_size)
    meta = {
        "model": model_cfg.as_dict(),
        "optimizer": opt.as_dict(),
        "schedule": sched.as_dict(),
        "batch_size": batch_size,
        "seed": seed,
        "cache_fingerprint": cache.codec_fingerprint,
    }
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    rows: list[dict] = []
    timing: list[dict] = []
    ema = None
    step = 0
    for epoch in range(sched.total_epochs):
        t0 = time.monotonic()
        order = torch.randperm(n, generator=new_generator(derive_seed(seed, "order", epoch)))
        mask_gen = new_generator(derive_seed(seed, "mask", epoch))
        noise_gen = new_generator(derive_seed(seed, "noise", epoch))
        epoch_losses = []
        model.train()
        for start in range(0, n, batch_size):
            batch = values[order[start : start + batch_size]]
            lr = lr_at(step, sched, steps_per_epoch, peak)
            for group in optimizer.param_groups:
                group["lr"] = lr
            plan = sample_mask(
                model_cfg.num_patches, model_cfg.mask_ratio, n=batch.shape[0], generator=mask_gen
            )
            inputs = batch
            if model_cfg.noisy:
                t = torch.randint(
                    0, noise_schedule.timesteps, (batch.shape[0],), generator=noise_gen
                )
                eps_draw = torch.randn(batch.shape, generator=noise_gen)
                inputs = noise_schedule.q_sample(batch, t, eps_draw)
            pred = model.forward_pretrain(inputs, plan)
            loss = recon_loss(
                pred, batch, plan, model_cfg.patch, model_cfg.per_patch_norm, model_cfg.norm_eps
            )
            if not torch.isfinite(loss):
                if out_dir is not None:
                    _flush_metrics(out_dir, rows, timing)
                raise NumericFailure(
                    f"pretraining loss became non-finite at step {step}; "
                    "last epoch checkpoint retained"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step += 1
            value = float(loss.detach())
            ema = value if ema is None else 0.99 * ema + 0.01 * value
            epoch_losses.append(value)
        rows.append(
            {
                "step": step,
                "epoch": epoch,
                "lr": lr_at(step - 1, sched, steps_per_epoch, peak),
                "loss": sum(epoch_losses) / len(epoch_losses),
                "loss_ema": ema,
            }
        )
        timing.append({"epoch": epoch, "seconds": time.monotonic() - t0})
        if out_dir is not None:
            archive = _pretrain_archive(model, meta)
            archive.save(out_dir / "pretrain.uspk")
            _flush_metrics(out_dir, rows, timing)
    archive = _pretrain_archive(model, meta)
    if out_dir is not None:
        archive.save(out_dir / "pretrain.uspk")
        _flush_metrics(out_dir, rows, timing)
    return archive, rows


def _flush_metrics(out_dir: Path, rows: list[dict], timing: list[dict]) -> None:
    write_csv(out_dir / "metrics.csv", METRIC_COLUMNS, rows)
    write_csv(out_dir / "timing.csv", ("epoch", "seconds"), timing)


def _pretrain_archive(model: MaskedAutoencoder, meta: dict) -> CheckpointArchive:
    return archive_from_module(
        "pretrain",
        model,
        meta=meta,
        config_digest=json_digest(meta),
        parents=[meta["cache_fingerprint"]],
    )


def load_pretrained(arc: CheckpointArchive) -> MaskedAutoencoder:
    from .archive import load_module_state

    cfg = PretrainModelConfig.from_dict(arc.meta["model"])
    model = MaskedAutoencoder(cfg)
    load_module_state(model, arc)
    model.eval()
    return model
