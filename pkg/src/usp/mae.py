"""Masked latent modeling: patchify, random masking, asymmetric encode/decode.

The trunk is a standard pre-norm ViT over patch tokens of a latent grid.
A class token is prepended and fixed 2-D sine-cosine positions are added to
patch tokens (the class token gets a zero position vector). The encoder sees
only the visible tokens; a narrower decoder fills masked positions with a
single shared learned mask token (positions re-added) and regresses the
masked patches. The loss is an MSE over masked patches only, optionally with
each target patch standardized to zero mean / unit variance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .blocks import Mlp, ViTBlock, sincos_pos_embed_2d
from .errors import ConfigError
from .utils import new_generator, trunc_normal_

PRESETS = {
    # encoder depth/heads/dim, decoder depth/dim
    "tiny": dict(depth=4, heads=4, dim=96, dec_depth=2, dec_dim=64),
    "base": dict(depth=12, heads=12, dim=768, dec_depth=8, dec_dim=512),
    "large": dict(depth=24, heads=16, dim=1024, dec_depth=8, dec_dim=512),
    "xl": dict(depth=28, heads=16, dim=1152, dec_depth=8, dec_dim=512),
}


@dataclass
class PretrainModelConfig:
    latent_channels: int = 4
    grid: tuple[int, int] = (8, 8)  # latent grid (rows, cols)
    patch: int = 2
    depth: int = 4
    heads: int = 4
    dim: int = 96
    dec_depth: int = 2
    dec_dim: int = 64
    mlp_ratio: float = 4.0
    mask_ratio: float = 0.75
    per_patch_norm: bool = True
    norm_eps: float = 1e-6
    noisy: bool = False  # corrupt the visible stream with forward-process noise

    def __post_init__(self):
        if isinstance(self.grid, list):
            self.grid = tuple(self.grid)
        if self.dim % self.heads:
            raise ConfigError("hidden dim must be divisible by heads")
        if self.grid[0] % self.patch or self.grid[1] % self.patch:
            raise ConfigError(f"latent grid {self.grid} not divisible by patch {self.patch}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError("mask ratio must lie in (0, 1)")

    @property
    def token_grid(self) -> tuple[int, int]:
        return (self.grid[0] // self.patch, self.grid[1] // self.patch)

    @property
    def num_patches(self) -> int:
        r, c = self.token_grid
        return r * c

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.latent_channels

    def as_dict(self) -> dict:
        d = dict(self.__dict__)
        d["grid"] = list(self.grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown pretrain model config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def preset(cls, name: str, **overrides) -> "PretrainModelConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(**{**PRESETS[name], **overrides})


@dataclass
class MaskPlan:
    """Per-sample partition of patch indices into visible and masked sets."""

    visible_idx: torch.Tensor  # [N, n_visible] int64
    masked_idx: torch.Tensor  # [N, n_masked] int64
    mask_ratio: float
    seed: int | None = None

    @property
    def num_patches(self) -> int:
        return self.visible_idx.shape[1] + self.masked_idx.shape[1]


def sample_mask(
    num_patches: int,
    mask_ratio: float,
    seed: int | None = None,
    n: int = 1,
    generator: torch.Generator | None = None,
) -> MaskPlan:
    """Uniform without-replacement masking via shuffle-argsort.

    Keeps floor(T * (1 - mask_ratio)) visible patches per sample; each sample
    draws an independent permutation. Reproducible given a seed.
    """
    if not 0.0 < mask_ratio < 1.0:
        raise ConfigError(f"mask ratio must lie in (0, 1), got {mask_ratio}")
    if generator is None:
        generator = new_generator(0 if seed is None else seed)
    noise = torch.rand(n, num_patches, generator=generator)
    shuffle = torch.argsort(noise, dim=1)
    len_keep = int(num_patches * (1.0 - mask_ratio))
    return MaskPlan(
        visible_idx=shuffle[:, :len_keep],
        masked_idx=shuffle[:, len_keep:],
        mask_ratio=mask_ratio,
        seed=seed,
    )


def patchify_raw(latent: torch.Tensor, patch: int) -> torch.Tensor:
    """[N, C, H, W] -> [N, T, patch*patch*C] pure rearrangement (row-major patches)."""
    n, c, h, w = latent.shape
    if h % patch or w % patch:
        raise ConfigError(f"latent side {(h, w)} not divisible by patch {patch}")
    x = latent.reshape(n, c, h // patch, patch, w // patch, patch)
    x = x.permute(0, 2, 4, 3, 5, 1)  # n, gh, gw, p, p, c
    return x.reshape(n, (h // patch) * (w // patch), patch * patch * c)


def unpatchify_raw(tokens: torch.Tensor, patch: int, channels: int, grid: tuple[int, int]) -> torch.Tensor:
    """Inverse of patchify_raw."""
    n, t, d = tokens.shape
    gh, gw = grid[0] // patch, grid[1] // patch
    if t != gh * gw or d != patch * patch * channels:
        raise ConfigError("token tensor does not match the stated geometry")
    x = tokens.reshape(n, gh, gw, patch, patch, channels)
    x = x.permute(0, 5, 1, 3, 2, 4)
    return x.reshape(n, channels, grid[0], grid[1])


def normalize_patches(targets: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Standardize each patch vector to zero mean, unit variance (eps-regularized)."""
    mean = targets.mean(dim=-1, keepdim=True)
    var = targets.var(dim=-1, keepdim=True, unbiased=False)
    return (targets - mean) / torch.sqrt(var + eps)


class _Encoder(nn.Module):
    def __init__(self, cfg: PretrainModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList(
            ViTBlock(cfg.dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(cfg.dim, eps=1e-6)
        rows, cols = cfg.token_grid
        self.register_buffer("pos_embed", sincos_pos_embed_2d(cfg.dim, rows, cols))


class _Decoder(nn.Module):
    def __init__(self, cfg: PretrainModelConfig):
        super().__init__()
        self.proj = nn.Linear(cfg.dim, cfg.dec_dim)
        self.blocks = nn.ModuleList(
            ViTBlock(cfg.dec_dim, max(1, cfg.dec_dim // 32), cfg.mlp_ratio)
            for _ in range(cfg.dec_depth)
        )
        self.norm = nn.LayerNorm(cfg.dec_dim, eps=1e-6)
        rows, cols = cfg.token_grid
        self.register_buffer("pos_embed", sincos_pos_embed_2d(cfg.dec_dim, rows, cols))


class MaskedAutoencoder(nn.Module):
    """Asymmetric masked autoencoder over a latent grid.

    Tensor name scheme (stable; used by the transplant stage):
      patchconv.weight/.bias, cls_token,
      enc.blocks.{i}.{ln1,attn,ln2,mlp}.*, enc.norm.*, enc.pos_embed,
      dec.proj.*, dec.blocks.{i}.*, dec.norm.*, dec.pos_embed,
      mask_token, pred_head.*
    """

    def __init__(self, cfg: PretrainModelConfig):
        super().__init__()
        self.cfg = cfg
        self.patchconv = nn.Conv2d(cfg.latent_channels, cfg.dim, cfg.patch, stride=cfg.patch)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.dim))
        self.enc = _Encoder(cfg)
        self.dec = _Decoder(cfg)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, cfg.dec_dim))
        self.pred_head = nn.Linear(cfg.dec_dim, cfg.patch_dim)

    def patch_tokens(self, latent: torch.Tensor) -> torch.Tensor:
        """PatchConv projection plus fixed positions: [N, T, dim]."""
        if latent.shape[1] != self.cfg.latent_channels:
            raise ConfigError(
                f"latent has {latent.shape[1]} channels, model expects {self.cfg.latent_channels}"
            )
        x = self.patchconv(latent)  # [N, dim, gh, gw]
        x = x.flatten(2).transpose(1, 2)
        return x + self.enc.pos_embed.unsqueeze(0)

    def encode_visible(self, latent: torch.Tensor, plan: MaskPlan) -> torch.Tensor:
        """Run the encoder over [cls] + visible tokens only."""
        tokens = self.patch_tokens(latent)
        n, t, d = tokens.shape
        if plan.num_patches != t:
            raise ConfigError(f"mask plan covers {plan.num_patches} patches, sequence has {t}")
        gather = plan.visible_idx.unsqueeze(-1).expand(-1, -1, d)
        visible = torch.gather(tokens, 1, gather)
        cls = self.cls_token.expand(n, -1, -1)  # zero position vector
        x = torch.cat([cls, visible], dim=1)
        for block in self.enc.blocks:
            x = block(x)
        return self.enc.norm(x)

    def forward_pretrain(self, latent: torch.Tensor, plan: MaskPlan) -> torch.Tensor:
        """Predict masked patches; output [N, n_masked, patch*patch*C] in plan order."""
        encoded = self.encode_visible(latent, plan)
        n = encoded.shape[0]
        x = self.dec.proj(encoded)
        dd = x.shape[-1]
        t = plan.num_patches
        # scatter visible tokens back to their grid slots, mask token elsewhere
        full = self.mask_token.expand(n, t, dd).clone()
        full = full.scatter(1, plan.visible_idx.unsqueeze(-1).expand(-1, -1, dd), x[:, 1:])
        full = full + self.dec.pos_embed.unsqueeze(0)
        x = torch.cat([x[:, :1], full], dim=1)  # class token keeps a zero position
        for block in self.dec.blocks:
            x = block(x)
        x = self.dec.norm(x)
        pred = self.pred_head(x[:, 1:])
        gather = plan.masked_idx.unsqueeze(-1).expand(-1, -1, pred.shape[-1])
        return torch.gather(pred, 1, gather)

    def encode_all(self, latent: torch.Tensor) -> list[torch.Tensor]:
        """Unmasked encoder pass; returns every block's output, [N, 1+T, dim] each."""
        tokens = self.patch_tokens(latent)
        cls = self.cls_token.expand(tokens.shape[0], -1, -1)
        x = torch.cat([cls, tokens], dim=1)
        outs = []
        for block in self.enc.blocks:
            x = block(x)
            outs.append(x)
        outs[-1] = self.enc.norm(x)
        return outs


def init_parameters(model: nn.Module, seed: int) -> None:
    """Deterministic re-initialization: truncated normal (std 0.02) weights,
    zero biases, unit LayerNorm scales; token parameters also truncated normal."""
    gen = new_generator(seed)
    for module in model.modules():
        if isinstance(module, (nn.Linear, nn.Conv2d)):
            trunc_normal_(module.weight, std=0.02, generator=gen)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.LayerNorm):
            if module.weight is not None:
                nn.init.ones_(module.weight)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.Embedding):
            trunc_normal_(module.weight, std=0.02, generator=gen)
    for name, param in model.named_parameters():
        if name.endswith(("cls_token", "mask_token")):
            trunc_normal_(param, std=0.02, generator=gen)


def build_mae(cfg: PretrainModelConfig, seed: int = 0) -> MaskedAutoencoder:
    model = MaskedAutoencoder(cfg)
    init_parameters(model, seed)
    return model


def forward_pretrain(latent: torch.Tensor, plan: MaskPlan, model: MaskedAutoencoder) -> torch.Tensor:
    return model.forward_pretrain(latent, plan)


def recon_loss(
    pred: torch.Tensor,
    latent: torch.Tensor,
    plan: MaskPlan,
    patch: int,
    per_patch_norm: bool = True,
    eps: float = 1e-6,
) -> torch.Tensor:
    """MSE over masked patches only; targets optionally per-patch standardized."""
    targets = patchify_raw(latent, patch)
    gather = plan.masked_idx.unsqueeze(-1).expand(-1, -1, targets.shape[-1])
    targets = torch.gather(targets, 1, gather)
    if per_patch_norm:
        targets = normalize_patches(targets, eps)
    if pred.shape != targets.shape:
        raise ConfigError(f"prediction shape {tuple(pred.shape)} != target {tuple(targets.shape)}")
    return ((pred - targets) ** 2).mean()


def noisy_pretrain_corrupt(
    latent: torch.Tensor,
    t: torch.Tensor,
    schedule,
    generator: torch.Generator | None = None,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """Forward-process corruption of the *input* stream for the noisy ablation.

    The reconstruction target stays the clean latent; only the tokens the
    encoder sees are computed from the corrupted tensor.
    """
    if noise is None:
        noise = torch.randn(latent.shape, generator=generator, dtype=latent.dtype)
    return schedule.q_sample(latent, t, noise)


@dataclass
class RestorationResult:
    original: torch.Tensor  # decoded pass-through of the clean latent
    masked: torch.Tensor  # masked latent (zeros in masked patches), decoded
    restored: torch.Tensor  # visible kept, masked filled with predictions, decoded
    metadata: dict = field(default_factory=dict)


def restore(
    batch,
    model: MaskedAutoencoder,
    codec,
    spec,
    mask_ratio: float,
    seed: int = 0,
) -> RestorationResult:
    """Fill masked patches with decoder predictions and map back to pixels.

    When the model was trained with per-patch-normalized targets, predictions
    are de-standardized with the ground-truth patch mean/std. That uses oracle
    statistics and is flagged in the metadata; it is a visualization aid only.
    """
    from .codec import decode_latents, encode
    from .data import denormalize_image

    cfg = model.cfg
    grid = encode(batch, codec, spec)
    latent = grid.values
    if mask_ratio == 0.0:
        # degenerate plan: nothing masked, restoration is a pure pass-through
        all_idx = torch.arange(cfg.num_patches).unsqueeze(0).expand(latent.shape[0], -1)
        plan = MaskPlan(
            visible_idx=all_idx,
            masked_idx=all_idx[:, :0],
            mask_ratio=0.0,
            seed=seed,
        )
    else:
        plan = sample_mask(cfg.num_patches, mask_ratio, seed=seed, n=latent.shape[0])
    with torch.no_grad():
        pred = model.forward_pretrain(latent, plan)
    tokens = patchify_raw(latent, cfg.patch)
    gather = plan.masked_idx.unsqueeze(-1).expand(-1, -1, tokens.shape[-1])
    used_oracle_stats = bool(cfg.per_patch_norm) and plan.masked_idx.shape[1] > 0
    if used_oracle_stats:
        true_masked = torch.gather(tokens, 1, gather)
        mean = true_masked.mean(dim=-1, keepdim=True)
        std = torch.sqrt(true_masked.var(dim=-1, keepdim=True, unbiased=False) + cfg.norm_eps)
        pred = pred * std + mean
    restored_tokens = tokens.scatter(1, gather, pred)
    masked_tokens = tokens.scatter(1, gather, torch.zeros_like(pred))
    restored_latent = unpatchify_raw(restored_tokens, cfg.patch, cfg.latent_channels, cfg.grid)
    masked_latent = unpatchify_raw(masked_tokens, cfg.patch, cfg.latent_channels, cfg.grid)
    result = RestorationResult(
        original=denormalize_image(decode_latents(latent, codec), spec),
        masked=denormalize_image(decode_latents(masked_latent, codec), spec),
        restored=denormalize_image(decode_latents(restored_latent, codec), spec),
        metadata={
            "mask_ratio": mask_ratio,
            "seed": seed,
            "denormalized_with_oracle_stats": used_oracle_stats,
        },
    )
    return result


class VitClassifier(nn.Module):
    """ViT trunk + linear head; the class-token output feeds the head."""

    def __init__(self, cfg: PretrainModelConfig, num_classes: int):
        super().__init__()
        self.cfg = cfg
        self.num_classes = num_classes
        self.patchconv = nn.Conv2d(cfg.latent_channels, cfg.dim, cfg.patch, stride=cfg.patch)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.dim))
        self.blocks = nn.ModuleList(
            ViTBlock(cfg.dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(cfg.dim, eps=1e-6)
        rows, cols = cfg.token_grid
        self.register_buffer("pos_embed", sincos_pos_embed_2d(cfg.dim, rows, cols))
        self.head = nn.Linear(cfg.dim, num_classes)

    def features(self, latent: torch.Tensor, layer: int | None = None) -> torch.Tensor:
        """Class-token feature after `layer` blocks (default: all, post-norm)."""
        x = self.patchconv(latent).flatten(2).transpose(1, 2) + self.pos_embed.unsqueeze(0)
        x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1)
        stop = len(self.blocks) if layer is None else layer + 1
        for block in self.blocks[:stop]:
            x = block(x)
        if layer is None or layer == len(self.blocks) - 1:
            x = self.norm(x)
        return x[:, 0]

    def forward(self, latent: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(latent))
