"""Noise schedule, flow path, training losses, and samplers.

Denoising side: cumulative-product schedule over linear betas, noise
prediction, ancestral sampling with optional timestep respacing.

Flow side: linear interpolant x_t = (1-t) * data + t * noise for t in [0, 1]
(data at t=0, noise at t=1) with the time-independent velocity target
noise - data; sampling runs Euler steps from t=1 down to t=0. This time
orientation is pinned here and in the docs.

Classifier-free guidance combines outputs as uncond + w * (cond - uncond)
and requires a model trained with label dropout to the null class.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .archive import CheckpointArchive, archive_from_module, load_module_state
from .cache import LatentCache
from .errors import ConfigError, DigestMismatch, NumericFailure
from .generator import Generator, GeneratorConfig
from .utils import derive_seed, json_digest, new_generator, write_csv


class NoiseSchedule:
    """Linear betas and their cumulative products, computed in float64."""

    def __init__(self, timesteps: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2):
        if timesteps < 1:
            raise ConfigError("schedule needs at least one timestep")
        self.timesteps = timesteps
        self.betas = torch.linspace(beta_start, beta_end, timesteps, dtype=torch.float64)
        alphas = 1.0 - self.betas
        self.alphas_cumprod = torch.cumprod(alphas, dim=0)

    def gather(self, values: torch.Tensor, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.int64)
        if t.ndim == 0:
            t = t.reshape(1).expand(like.shape[0])
        if t.min() < 0 or t.max() >= self.timesteps:
            raise ConfigError(f"timestep out of range [0, {self.timesteps})")
        out = values[t].to(like.dtype)
        return out.reshape(-1, *([1] * (like.ndim - 1)))

    def q_sample(self, x0: torch.Tensor, t: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
        """Forward corruption: sqrt(abar_t) * x0 + sqrt(1 - abar_t) * noise."""
        abar = self.gather(self.alphas_cumprod, t, x0)
        return torch.sqrt(abar) * x0 + torch.sqrt(1.0 - abar) * noise

    def as_dict(self) -> dict:
        return {
            "timesteps": self.timesteps,
            "beta_start": float(self.betas[0]),
            "beta_end": float(self.betas[-1]),
        }


@dataclass
class FlowPath:
    """Linear interpolant: x_t = (1 - t) * data + t * noise, velocity = noise - data."""

    @staticmethod
    def interpolate(x0: torch.Tensor, noise: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        t = t.reshape(-1, *([1] * (x0.ndim - 1))).to(x0.dtype)
        return (1.0 - t) * x0 + t * noise

    @staticmethod
    def velocity(x0: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
        return noise - x0


@dataclass
class SamplerConfig:
    steps: int = 100
    cfg_scale: float | None = None  # None: guidance off (single conditional pass)
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("sampler needs steps >= 1")
        if self.cfg_scale is not None and self.cfg_scale < 0:
            raise ConfigError("cfg scale must be >= 0")


def cfg_combine(out_cond: torch.Tensor, out_uncond: torch.Tensor, w: float) -> torch.Tensor:
    if out_cond.shape != out_uncond.shape:
        raise ConfigError("guidance requires equally shaped outputs")
    return out_uncond + w * (out_cond - out_uncond)


def _dropout_labels(
    labels: torch.Tensor | None,
    n: int,
    null_class: int,
    rate: float,
    generator: torch.Generator,
) -> torch.Tensor:
    if labels is None:
        return torch.full((n,), null_class, dtype=torch.int64)
    y = labels.clone()
    y[y < 0] = null_class
    if rate > 0:
        drop = torch.rand(n, generator=generator) < rate
        y[drop] = null_class
    return y


def _split_sigma(out: torch.Tensor, channels: int) -> tuple[torch.Tensor, torch.Tensor]:
    return out[:, :channels], out[:, channels:]


def ddpm_loss(
    model: Generator,
    x0: torch.Tensor,
    labels: torch.Tensor | None,
    schedule: NoiseSchedule,
    generator: torch.Generator,
    label_dropout: float = 0.1,
    vlb_weight: float = 1e-3,
    t: torch.Tensor | None = None,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """Noise-prediction MSE over uniform timesteps (hybrid VLB term when the
    model carries learned-variance channels). t and noise are drawn from the
    generator unless supplied explicitly."""
    n = x0.shape[0]
    if t is None:
        t = torch.randint(0, schedule.timesteps, (n,), generator=generator)
    if noise is None:
        noise = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    y = _dropout_labels(labels, n, model.cfg.null_class, label_dropout, generator)
    x_t = schedule.q_sample(x0, t, noise)
    out = model(x_t, t.to(torch.float32), y)
    if not model.cfg.learn_sigma:
        loss = ((out - noise) ** 2).mean()
    else:
        eps_hat, var_raw = _split_sigma(out, model.cfg.latent_channels)
        loss = ((eps_hat - noise) ** 2).mean()
        loss = loss + vlb_weight * _vlb_term(
            schedule, x0, x_t, t, eps_hat.detach(), var_raw
        )
    if not torch.isfinite(loss):
        raise NumericFailure("denoising loss became non-finite")
    return loss


def _posterior(schedule: NoiseSchedule, x0, x_t, t):
    """Mean and log-variance of the forward-process posterior q(x_{t-1} | x_t, x0)."""
    t = torch.as_tensor(t, dtype=torch.int64)
    abar_t = schedule.gather(schedule.alphas_cumprod, t, x_t)
    abar_prev = schedule.gather(schedule.alphas_cumprod, (t - 1).clamp(min=0), x_t)
    t_is_zero = (t == 0).reshape(-1, *([1] * (x_t.ndim - 1)))
    abar_prev = torch.where(t_is_zero, torch.ones_like(abar_prev), abar_prev)
    beta_t = 1.0 - abar_t / abar_prev
    var = beta_t * (1.0 - abar_prev) / (1.0 - abar_t)
    mean = (
        torch.sqrt(abar_prev) * beta_t / (1.0 - abar_t) * x0
        + torch.sqrt(abar_t / abar_prev) * (1.0 - abar_prev) / (1.0 - abar_t) * x_t
    )
    return mean, torch.log(var.clamp(min=1e-20)), torch.log(beta_t.clamp(min=1e-20))


def _vlb_term(schedule, x0, x_t, t, eps_hat, var_raw):
    """KL(q || p) per element with a frozen predicted mean; the t=0 term is the
    Gaussian negative log-likelihood of the clean latent (latents are
    continuous, so no discretization)."""
    abar = schedule.gather(schedule.alphas_cumprod, t, x_t)
    x0_pred = (x_t - torch.sqrt(1.0 - abar) * eps_hat) / torch.sqrt(abar)
    mean_p, logvar_post, logvar_beta = _posterior(schedule, x0_pred, x_t, t)
    mean_q, _, _ = _posterior(schedule, x0, x_t, t)
    frac = (var_raw.clamp(-1, 1) + 1.0) / 2.0
    logvar_p = frac * logvar_beta + (1.0 - frac) * logvar_post
    kl = 0.5 * (
        logvar_p
        - logvar_post
        + torch.exp(logvar_post - logvar_p)
        + (mean_q - mean_p) ** 2 / torch.exp(logvar_p)
        - 1.0
    )
    nll = 0.5 * (math.log(2 * math.pi) + logvar_p + (x0 - mean_p) ** 2 / torch.exp(logvar_p))
    t_is_zero = (torch.as_tensor(t) == 0).reshape(-1, *([1] * (x0.ndim - 1)))
    return torch.where(t_is_zero, nll, kl).mean()


def flow_loss(
    model: Generator,
    x0: torch.Tensor,
    labels: torch.Tensor | None,
    generator: torch.Generator,
    label_dropout: float = 0.1,
    t: torch.Tensor | None = None,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """Velocity regression along the linear path with uniform t in (0, 1)."""
    n = x0.shape[0]
    if t is None:
        t = torch.rand(n, generator=generator)
    if noise is None:
        noise = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    y = _dropout_labels(labels, n, model.cfg.null_class, label_dropout, generator)
    x_t = FlowPath.interpolate(x0, noise, t)
    v_hat = model(x_t, t, y)
    loss = ((v_hat - FlowPath.velocity(x0, noise)) ** 2).mean()
    if not torch.isfinite(loss):
        raise NumericFailure("flow loss became non-finite")
    return loss


def _guided(model_fn, x, t, labels, null_class, cfg_scale):
    n = x.shape[0]
    if cfg_scale is None:
        return model_fn(x, t, labels)
    uncond = torch.full((n,), null_class, dtype=torch.int64)
    return cfg_combine(model_fn(x, t, labels), model_fn(x, t, uncond), cfg_scale)


def respaced_timesteps(total: int, steps: int) -> list[int]:
    """Strictly decreasing subset of [0, total) with `steps` entries, ends included."""
    if steps >= total:
        return list(range(total - 1, -1, -1))
    ts = np.unique(np.round(np.linspace(0, total - 1, steps)).astype(int))
    return [int(t) for t in ts[::-1]]


def ddpm_sample(
    model: Generator,
    schedule: NoiseSchedule,
    sampler: SamplerConfig,
    n: int,
    labels: torch.Tensor | None = None,
    label_dropout_trained: float | None = None,
) -> torch.Tensor:
    """Ancestral reverse chain from unit Gaussian noise; deterministic per
    (seed, step count). Respaces the schedule when steps < timesteps."""
    if sampler.cfg_scale is not None and label_dropout_trained == 0.0:
        raise ConfigError("guidance requires a model trained with label dropout")
    if sampler.steps > schedule.timesteps:
        raise ConfigError("sampler steps exceed schedule timesteps")
    cfg = model.cfg
    gen = new_generator(sampler.seed)
    x = torch.randn(n, cfg.latent_channels, *cfg.grid, generator=gen)
    if labels is None:
        labels = torch.full((n,), cfg.null_class, dtype=torch.int64)
    ts = respaced_timesteps(schedule.timesteps, sampler.steps)
    abar_all = schedule.alphas_cumprod
    model.eval()
    with torch.no_grad():
        for i, t in enumerate(ts):
            abar_t = float(abar_all[t])
            abar_prev = float(abar_all[ts[i + 1]]) if i + 1 < len(ts) else 1.0
            tt = torch.full((n,), float(t))
            out = _guided(model, x, tt, labels, cfg.null_class, sampler.cfg_scale)
            if cfg.learn_sigma:
                eps_hat, var_raw = _split_sigma(out, cfg.latent_channels)
            else:
                eps_hat, var_raw = out, None
            x0_pred = (x - math.sqrt(1.0 - abar_t) * eps_hat) / math.sqrt(abar_t)
            beta_eff = 1.0 - abar_t / abar_prev
            mean = (
                math.sqrt(abar_prev) * beta_eff / (1.0 - abar_t) * x0_pred
                + math.sqrt(abar_t / abar_prev) * (1.0 - abar_prev) / (1.0 - abar_t) * x
            )
            if i + 1 == len(ts):
                x = mean
            else:
                var_post = beta_eff * (1.0 - abar_prev) / (1.0 - abar_t)
                if var_raw is not None:
                    frac = (var_raw.clamp(-1, 1) + 1.0) / 2.0
                    logvar = frac * math.log(max(beta_eff, 1e-20)) + (1.0 - frac) * math.log(
                        max(var_post, 1e-20)
                    )
                    sigma = torch.exp(0.5 * logvar)
                else:
                    sigma = math.sqrt(var_post)
                x = mean + sigma * torch.randn(x.shape, generator=gen, dtype=x.dtype)
    return x


def flow_sample(
    model: Generator,
    sampler: SamplerConfig,
    n: int,
    labels: torch.Tensor | None = None,
    label_dropout_trained: float | None = None,
    velocity_fn=None,
) -> torch.Tensor:
    """Euler integration of the learned velocity from t=1 (noise) to t=0 (data)
    on a uniform grid: x <- x - dt * v(x, t)."""
    if sampler.cfg_scale is not None and label_dropout_trained == 0.0:
        raise ConfigError("guidance requires a model trained with label dropout")
    cfg = model.cfg
    gen = new_generator(sampler.seed)
    x = torch.randn(n, cfg.latent_channels, *cfg.grid, generator=gen)
    if labels is None:
        labels = torch.full((n,), cfg.null_class, dtype=torch.int64)
    fn = velocity_fn if velocity_fn is not None else model
    dt = 1.0 / sampler.steps
    model.eval()
    with torch.no_grad():
        for k in range(sampler.steps):
            t = 1.0 - k * dt
            tt = torch.full((n,), t)
            v = _guided(fn, x, tt, labels, cfg.null_class, sampler.cfg_scale)
            x = x - dt * v
    return x


def sample_latents(
    model: Generator,
    sampler: SamplerConfig,
    n: int,
    labels: torch.Tensor | None = None,
    schedule: NoiseSchedule | None = None,
    label_dropout_trained: float | None = None,
    batch_size: int = 256,
) -> torch.Tensor:
    """Framework dispatch with chunked batches (seeded per chunk)."""
    outs = []
    for i, start in enumerate(range(0, n, batch_size)):
        m = min(batch_size, n - start)
        chunk_labels = labels[start : start + m] if labels is not None else None
        chunk_cfg = SamplerConfig(
            steps=sampler.steps, cfg_scale=sampler.cfg_scale, seed=derive_seed(sampler.seed, "chunk", i)
        )
        if model.cfg.framework == "dit":
            outs.append(
                ddpm_sample(
                    model, schedule or NoiseSchedule(), chunk_cfg, m, chunk_labels,
                    label_dropout_trained,
                )
            )
        else:
            outs.append(
                flow_sample(model, chunk_cfg, m, chunk_labels, label_dropout_trained)
            )
    return torch.cat(outs)


GEN_METRIC_COLUMNS = ("step", "epoch", "lr", "loss", "loss_ema")


def train_generator(
    cache: LatentCache,
    model: Generator,
    steps: int,
    lr: float = 1e-4,
    batch_size: int = 64,
    label_dropout: float = 0.1,
    seed: int = 0,
    out_dir: str | os.PathLike | None = None,
    checkpoint_every: int = 0,
    schedule: NoiseSchedule | None = None,
    init_parent: str = "",
    init_source: str = "random",
    weight_decay: float = 0.0,
) -> tuple[CheckpointArchive, list[dict]]:
    """Constant-LR AdamW training of a generator over cached latents.

    Writes periodic checkpoints (ckpt-<step>.uspk) for convergence curves
    when checkpoint_every > 0 and out_dir is set.
    """
    if cache.count == 0:
        raise ConfigError("cannot train a generator on an empty cache")
    cfg = model.cfg
    if tuple(cache.shape) != (cfg.latent_channels, *cfg.grid):
        raise DigestMismatch(
            f"cache latents {tuple(cache.shape)} do not match generator geometry "
            f"{(cfg.latent_channels, *cfg.grid)}"
        )
    schedule = schedule or NoiseSchedule()
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=lr, betas=(0.9, 0.999), weight_decay=weight_decay
    )
    values, labels = cache.values, cache.labels
    has_labels = bool((labels >= 0).any())
    n = values.shape[0]
    meta = {
        "generator": cfg.as_dict(),
        "schedule": schedule.as_dict() if cfg.framework == "dit" else None,
        "lr": lr,
        "batch_size": batch_size,
        "label_dropout": label_dropout,
        "steps": steps,
        "seed": seed,
        "cache_fingerprint": cache.codec_fingerprint,
        "init_source": init_source,
    }
    parents = [p for p in (init_parent, cache.codec_fingerprint) if p]
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    rows, timing = [], []
    ema = None
    batch_gen = new_generator(derive_seed(seed, "gen-batches"))
    loss_gen = new_generator(derive_seed(seed, "gen-noise"))
    steps_per_epoch = max(1, math.ceil(n / batch_size))
    model.train()
    t0 = time.monotonic()
    for step in range(steps):
        idx = torch.randint(0, n, (min(batch_size, n),), generator=batch_gen)
        x0 = values[idx]
        y = labels[idx] if has_labels else None
        if cfg.framework == "dit":
            loss = ddpm_loss(model, x0, y, schedule, loss_gen, label_dropout)
        else:
            loss = flow_loss(model, x0, y, loss_gen, label_dropout)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        value = float(loss.detach())
        ema = value if ema is None else 0.99 * ema + 0.01 * value
        if (step + 1) % steps_per_epoch == 0 or step + 1 == steps:
            rows.append(
                {
                    "step": step + 1,
                    "epoch": step // steps_per_epoch,
                    "lr": lr,
                    "loss": value,
                    "loss_ema": ema,
                }
            )
        if out_dir is not None and checkpoint_every and (step + 1) % checkpoint_every == 0:
            arc = _generator_archive(model, meta, parents, trained_steps=step + 1)
            arc.save(out_dir / f"ckpt-{step + 1:06d}.uspk")
            timing.append({"step": step + 1, "seconds": time.monotonic() - t0})
    archive = _generator_archive(model, meta, parents, trained_steps=steps)
    if out_dir is not None:
        archive.save(out_dir / "generator.uspk")
        write_csv(out_dir / "metrics.csv", GEN_METRIC_COLUMNS, rows)
        if timing:
            write_csv(out_dir / "timing.csv", ("step", "seconds"), timing)
    return archive, rows


def _generator_archive(model: Generator, meta: dict, parents: list[str], trained_steps: int):
    meta = {**meta, "trained_steps": trained_steps}
    return archive_from_module(
        "generator", model, meta=meta, config_digest=json_digest(meta), parents=parents
    )


def load_generator(arc: CheckpointArchive) -> Generator:
    if arc.stage != "generator":
        raise DigestMismatch(f"expected a generator archive, got {arc.stage!r}")
    model = Generator(GeneratorConfig.from_dict(arc.meta["generator"]))
    load_module_state(model, arc)
    model.eval()
    return model
