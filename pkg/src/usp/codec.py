"""Frozen latent codec: a small KL-regularized conv autoencoder.

The codec's I/O space is *normalized* pixels: callers normalize with a
NormalizationSpec first, and reconstruction error is measured in that space.
An identity passthrough codec (3 channels, stride 1) is provided so every
downstream stage can be exercised without training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .archive import CheckpointArchive, archive_from_module, load_module_state
from .data import ImageBatch, NormalizationSpec, get_normalization, normalize_image
from .errors import ConfigError, DigestMismatch, NumericFailure
from .utils import check_finite, derive_seed, json_digest, module_digest, new_generator


@dataclass
class LatentCodecConfig:
    channels: int = 4  # latent channels
    stride: int = 4  # spatial downsampling factor, power of 2
    width: int = 32  # base conv width
    kl_weight: float = 1e-6
    identity: bool = False

    def __post_init__(self):
        if self.identity:
            return
        if self.stride < 1 or (self.stride & (self.stride - 1)) != 0:
            raise ConfigError("codec stride must be a power of 2")
        if self.channels < 1 or self.width < 8:
            raise ConfigError("codec channels >= 1 and width >= 8 required")
        if self.kl_weight < 0:
            raise ConfigError("kl_weight must be nonnegative")

    def as_dict(self) -> dict:
        return {
            "channels": self.channels,
            "stride": self.stride,
            "width": self.width,
            "kl_weight": self.kl_weight,
            "identity": self.identity,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LatentCodecConfig":
        unknown = set(d) - {"channels", "stride", "width", "kl_weight", "identity"}
        if unknown:
            raise ConfigError(f"unknown codec config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LatentGrid:
    values: torch.Tensor  # [N, C, H/f, W/f]
    codec_fingerprint: str

    def __len__(self) -> int:
        return self.values.shape[0]


def _gn(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, ch), ch)


class LatentVAE(nn.Module):
    """Conv encoder to (mean, logvar), mirrored conv decoder."""

    def __init__(self, cfg: LatentCodecConfig):
        super().__init__()
        self.cfg = cfg
        self.frozen = False
        n_down = int(math.log2(cfg.stride))
        w = cfg.width
        widths = [min(w * 2**i, w * 8) for i in range(n_down + 1)]

        enc = [nn.Conv2d(3, widths[0], 3, padding=1), nn.SiLU()]
        for i in range(n_down):
            enc += [nn.Conv2d(widths[i], widths[i + 1], 4, stride=2, padding=1), _gn(widths[i + 1]), nn.SiLU()]
        enc += [nn.Conv2d(widths[-1], widths[-1], 3, padding=1), _gn(widths[-1]), nn.SiLU(),
                nn.Conv2d(widths[-1], 2 * cfg.channels, 3, padding=1)]
        self.encoder = nn.Sequential(*enc)

        dec = [nn.Conv2d(cfg.channels, widths[-1], 3, padding=1), _gn(widths[-1]), nn.SiLU()]
        for i in range(n_down, 0, -1):
            dec += [nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(widths[i], widths[i - 1], 3, padding=1), _gn(widths[i - 1]), nn.SiLU()]
        dec += [nn.Conv2d(widths[0], 3, 3, padding=1)]
        self.decoder = nn.Sequential(*dec)

    @property
    def channels(self) -> int:
        return self.cfg.channels

    @property
    def stride(self) -> int:
        return self.cfg.stride

    def encode_dist(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if x.shape[-1] % self.cfg.stride or x.shape[-2] % self.cfg.stride:
            raise ConfigError(
                f"image side {tuple(x.shape[-2:])} not divisible by codec stride {self.cfg.stride}"
            )
        mean, logvar = self.encoder(x).chunk(2, dim=1)
        return mean, logvar.clamp(-20.0, 10.0)

    def encode(self, x: torch.Tensor, sample: bool = False, generator: torch.Generator | None = None) -> torch.Tensor:
        mean, logvar = self.encode_dist(x)
        if not sample:
            return mean
        noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
        return mean + noise * torch.exp(0.5 * logvar)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z)

    def freeze(self) -> None:
        self.requires_grad_(False)
        self.eval()
        self.frozen = True


class IdentityCodec(nn.Module):
    """Passthrough codec (3 channels, stride 1) for debugging downstream stages."""

    def __init__(self):
        super().__init__()
        self.cfg = LatentCodecConfig(channels=3, stride=1, identity=True)
        self.frozen = True

    @property
    def channels(self) -> int:
        return 3

    @property
    def stride(self) -> int:
        return 1

    def encode(self, x: torch.Tensor, sample: bool = False, generator=None) -> torch.Tensor:
        return x

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return z

    def freeze(self) -> None:
        self.frozen = True


def codec_fingerprint(codec: nn.Module, spec: NormalizationSpec) -> str:
    """Digest of codec weights plus the normalization used to feed it."""
    parts = {
        "config": codec.cfg.as_dict(),
        "norm": spec.as_dict(),
        "weights": module_digest(codec) if any(True for _ in codec.parameters()) else "none",
    }
    return json_digest(parts)


def encode(
    batch: ImageBatch,
    codec: nn.Module,
    spec: NormalizationSpec,
    sample: bool = False,
    generator: torch.Generator | None = None,
    batch_size: int = 256,
) -> LatentGrid:
    """Encode pixels to the latent grid. Deterministic (posterior mean) by default."""
    if not getattr(codec, "frozen", False):
        raise ConfigError("codec must be frozen before encoding downstream inputs")
    x = normalize_image(batch, spec)
    outs = []
    with torch.no_grad():
        for i in range(0, x.shape[0], batch_size):
            outs.append(codec.encode(x[i : i + batch_size], sample=sample, generator=generator))
    values = torch.cat(outs) if outs else torch.zeros(
        (0, codec.channels, x.shape[2] // codec.stride, x.shape[3] // codec.stride)
    )
    return LatentGrid(values=values, codec_fingerprint=codec_fingerprint(codec, spec))


def decode_latents(
    values: torch.Tensor, codec: nn.Module, batch_size: int = 256
) -> torch.Tensor:
    outs = []
    with torch.no_grad():
        for i in range(0, values.shape[0], batch_size):
            outs.append(codec.decode(values[i : i + batch_size]))
    return torch.cat(outs) if outs else values


def train_codec(
    train: ImageBatch,
    val: ImageBatch,
    cfg: LatentCodecConfig,
    spec: NormalizationSpec,
    epochs: int = 8,
    batch_size: int = 128,
    lr: float = 1e-3,
    seed: int = 0,
    recon_threshold: float = 0.08,
) -> CheckpointArchive:
    """Train the codec, verify held-out reconstruction, freeze, and archive.

    Raises NumericFailure when the held-out reconstruction MSE (in normalized
    pixel space) stays above recon_threshold: non-convergence is reported,
    never silently accepted.
    """
    if cfg.identity:
        codec = IdentityCodec()
        return _codec_archive(codec, spec, recon_mse=0.0)
    torch.manual_seed(derive_seed(seed, "codec-init"))
    codec = LatentVAE(cfg)
    opt = torch.optim.Adam(codec.parameters(), lr=lr)
    x_train = normalize_image(train, spec)
    x_val = normalize_image(val, spec)
    order_gen = new_generator(derive_seed(seed, "codec-order"))
    noise_gen = new_generator(derive_seed(seed, "codec-noise"))
    n = x_train.shape[0]
    for epoch in range(epochs):
        codec.train()
        perm = torch.randperm(n, generator=order_gen)
        for i in range(0, n, batch_size):
            x = x_train[perm[i : i + batch_size]]
            mean, logvar = codec.encode_dist(x)
            noise = torch.randn(mean.shape, generator=noise_gen)
            z = mean + noise * torch.exp(0.5 * logvar)
            recon = codec.decode(z)
            rec_loss = F.mse_loss(recon, x)
            kl = -0.5 * torch.mean(1 + logvar - mean.pow(2) - logvar.exp())
            loss = rec_loss + cfg.kl_weight * kl
            check_finite(loss, "codec loss")
            opt.zero_grad()
            loss.backward()
            opt.step()
    codec.eval()
    with torch.no_grad():
        errs = []
        for i in range(0, x_val.shape[0], batch_size):
            x = x_val[i : i + batch_size]
            errs.append(F.mse_loss(codec.decode(codec.encode(x)), x, reduction="sum"))
        val_mse = float(torch.stack(errs).sum() / x_val.numel()) if errs else 0.0
    if val_mse > recon_threshold:
        raise NumericFailure(
            f"codec did not converge: held-out recon MSE {val_mse:.4f} > {recon_threshold}"
        )
    codec.freeze()
    return _codec_archive(codec, spec, recon_mse=val_mse)


def _codec_archive(codec: nn.Module, spec: NormalizationSpec, recon_mse: float) -> CheckpointArchive:
    meta = {
        "codec": codec.cfg.as_dict(),
        "norm": spec.as_dict(),
        "frozen": True,
        "recon_mse": recon_mse,
        "fingerprint": codec_fingerprint(codec, spec),
    }
    arc = archive_from_module("codec", codec, meta=meta, config_digest=json_digest(meta["codec"]))
    return arc


def load_codec(arc: CheckpointArchive) -> tuple[nn.Module, NormalizationSpec]:
    if arc.stage != "codec":
        raise DigestMismatch(f"expected a codec archive, got stage {arc.stage!r}")
    cfg = LatentCodecConfig.from_dict(arc.meta["codec"])
    spec = get_normalization(arc.meta["norm"]["name"])
    if spec.as_dict() != arc.meta["norm"]:
        spec = NormalizationSpec(
            arc.meta["norm"]["name"], tuple(arc.meta["norm"]["mean"]), tuple(arc.meta["norm"]["std"])
        )
    codec = IdentityCodec() if cfg.identity else LatentVAE(cfg)
    if not cfg.identity:
        load_module_state(codec, arc)
    codec.freeze()
    fp = codec_fingerprint(codec, spec)
    if fp != arc.meta["fingerprint"]:
        raise DigestMismatch("codec archive fingerprint does not match its weights")
    return codec, spec
