"""Latent-space diffusion transformers with adaptive-LN conditioning.

One network class covers both frameworks: the denoising transformer (integer
timesteps, noise prediction) and the flow transformer (continuous time,
velocity prediction). Blocks modulate their affine LayerNorms with
conditioning-derived shift/scale and gate their residual branches; at the
default zero initialization every block is exactly the identity map, so a
weight-transplanted trunk starts out computing the source ViT's function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .blocks import Attention, Mlp, sincos_pos_embed_2d
from .errors import ConfigError
from .mae import init_parameters

FRAMEWORKS = ("dit", "sit")  # ddpm ancestral vs linear-interpolant flow


@dataclass
class GeneratorConfig:
    framework: str = "dit"
    latent_channels: int = 4
    grid: tuple[int, int] = (8, 8)
    patch: int = 2
    depth: int = 4
    heads: int = 4
    dim: int = 96
    mlp_ratio: float = 4.0
    num_classes: int = 10
    learn_sigma: bool = False
    gate_bias_one: bool = False

    def __post_init__(self):
        if isinstance(self.grid, list):
            self.grid = tuple(self.grid)
        if self.framework not in FRAMEWORKS:
            raise ConfigError(f"framework must be one of {FRAMEWORKS}")
        if self.dim % self.heads:
            raise ConfigError("hidden dim must be divisible by heads")
        if self.grid[0] % self.patch or self.grid[1] % self.patch:
            raise ConfigError(f"grid {self.grid} not divisible by patch {self.patch}")

    @property
    def token_grid(self) -> tuple[int, int]:
        return (self.grid[0] // self.patch, self.grid[1] // self.patch)

    @property
    def out_channels(self) -> int:
        return self.latent_channels * (2 if self.learn_sigma else 1)

    @property
    def null_class(self) -> int:
        return self.num_classes

    def as_dict(self) -> dict:
        d = dict(self.__dict__)
        d["grid"] = list(self.grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown generator config keys: {sorted(unknown)}")
        return cls(**d)


class TimestepEmbedder(nn.Module):
    """Sinusoidal frequencies followed by a 2-layer MLP."""

    FREQ_DIM = 256

    def __init__(self, dim: int):
        super().__init__()
        self.fc1 = nn.Linear(self.FREQ_DIM, dim)
        self.act = nn.SiLU()
        self.fc2 = nn.Linear(dim, dim)

    @classmethod
    def sinusoidal(cls, t: torch.Tensor) -> torch.Tensor:
        half = cls.FREQ_DIM // 2
        freqs = torch.exp(
            -math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half
        )
        args = t.float().reshape(-1, 1) * freqs.reshape(1, -1)
        return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(self.sinusoidal(t))))


class LabelEmbedder(nn.Module):
    """Class-id embedding with a trainable null class (index num_classes)."""

    def __init__(self, num_classes: int, dim: int):
        super().__init__()
        self.table = nn.Embedding(num_classes + 1, dim)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        return self.table(y)


class AdaLNBlock(nn.Module):
    """Transformer block whose affine LayerNorms are modulated and whose
    residual branches are gated by the conditioning vector.

    The modulation head emits (shift1, scale1, gate1, shift2, scale2, gate2);
    at init its weight and bias are zero (identity block), except under the
    gate-bias-1 variant where the two gate bias slices start at 1.
    """

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.ln2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self.mod_act = nn.SiLU()
        self.modulation = nn.Linear(dim, 6 * dim)

    def forward(
        self, x: torch.Tensor, cond: torch.Tensor | None, force_identity_modulation: bool = False
    ) -> torch.Tensor:
        if force_identity_modulation:
            # shift=0, scale=0, gate=1: the plain pre-norm ViT block
            x = x + self.attn(self.ln1(x))
            x = x + self.mlp(self.ln2(x))
            return x
        shift1, scale1, gate1, shift2, scale2, gate2 = (
            self.modulation(self.mod_act(cond)).unsqueeze(1).chunk(6, dim=-1)
        )
        x = x + gate1 * self.attn(self.ln1(x) * (1 + scale1) + shift1)
        x = x + gate2 * self.mlp(self.ln2(x) * (1 + scale2) + shift2)
        return x


class FinalLayer(nn.Module):
    def __init__(self, dim: int, patch: int, out_channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim, eps=1e-6)
        self.mod_act = nn.SiLU()
        self.modulation = nn.Linear(dim, 2 * dim)
        self.head = nn.Linear(dim, patch * patch * out_channels)

    def features(
        self, x: torch.Tensor, cond: torch.Tensor | None, force_identity_modulation: bool = False
    ) -> torch.Tensor:
        x = self.norm(x)
        if force_identity_modulation:
            return x
        shift, scale = self.modulation(self.mod_act(cond)).unsqueeze(1).chunk(2, dim=-1)
        return x * (1 + scale) + shift

    def forward(self, x, cond, force_identity_modulation=False) -> torch.Tensor:
        return self.head(self.features(x, cond, force_identity_modulation))


class Generator(nn.Module):
    """Tensor name scheme (stable; target of the transplant stage):
      patchconv.*, pos_embed, blocks.{i}.{ln1,attn,ln2,mlp,modulation}.*,
      t_embed.*, y_embed.table.weight, final.{norm,modulation,head}.*
    """

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        self.patchconv = nn.Conv2d(cfg.latent_channels, cfg.dim, cfg.patch, stride=cfg.patch)
        rows, cols = cfg.token_grid
        self.register_buffer("pos_embed", sincos_pos_embed_2d(cfg.dim, rows, cols))
        self.blocks = nn.ModuleList(
            AdaLNBlock(cfg.dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)
        )
        self.t_embed = TimestepEmbedder(cfg.dim)
        self.y_embed = LabelEmbedder(cfg.num_classes, cfg.dim)
        self.final = FinalLayer(cfg.dim, cfg.patch, cfg.out_channels)
        # flow time lives in [0, 1]; stretch it before the sinusoidal basis
        self.time_scale = 1.0 if cfg.framework == "dit" else 1000.0

    def conditioning(self, t: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        return self.t_embed(t * self.time_scale) + self.y_embed(y)

    def tokens(self, x: torch.Tensor) -> torch.Tensor:
        return self.patchconv(x).flatten(2).transpose(1, 2) + self.pos_embed.unsqueeze(0)

    def forward_trunk(
        self,
        tokens: torch.Tensor,
        cond: torch.Tensor | None = None,
        force_identity_modulation: bool = False,
        collect: bool = False,
    ):
        """Run blocks plus the final norm over prepared tokens."""
        outs = []
        x = tokens
        for block in self.blocks:
            x = block(x, cond, force_identity_modulation)
            if collect:
                outs.append(x)
        x = self.final.features(x, cond, force_identity_modulation)
        if collect:
            outs[-1] = x
            return x, outs
        return x

    def forward(self, x: torch.Tensor, t: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        cond = self.conditioning(t, y)
        tokens = self.tokens(x)
        for block in self.blocks:
            tokens = block(tokens, cond)
        out = self.final(tokens, cond)
        return self._unpatchify(out)

    def block_features(self, x: torch.Tensor, t: torch.Tensor, y: torch.Tensor) -> list[torch.Tensor]:
        """Every block's token output (final one post-norm), for layer probes."""
        cond = self.conditioning(t, y)
        _, outs = self.forward_trunk(self.tokens(x), cond, collect=True)
        return outs

    def _unpatchify(self, tokens: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        n, t, d = tokens.shape
        gh, gw = cfg.token_grid
        x = tokens.reshape(n, gh, gw, cfg.patch, cfg.patch, cfg.out_channels)
        x = x.permute(0, 5, 1, 3, 2, 4)
        return x.reshape(n, cfg.out_channels, cfg.grid[0], cfg.grid[1])


def zero_init_modulation(model: Generator) -> None:
    """AdaLN-zero: zero every modulation head and the output head; under the
    gate-bias-1 variant the gate bias slices start at one instead."""
    dim = model.cfg.dim
    for block in model.blocks:
        nn.init.zeros_(block.modulation.weight)
        nn.init.zeros_(block.modulation.bias)
        if model.cfg.gate_bias_one:
            with torch.no_grad():
                block.modulation.bias[2 * dim : 3 * dim] = 1.0
                block.modulation.bias[5 * dim : 6 * dim] = 1.0
    nn.init.zeros_(model.final.modulation.weight)
    nn.init.zeros_(model.final.modulation.bias)
    nn.init.zeros_(model.final.head.weight)
    nn.init.zeros_(model.final.head.bias)


def build_generator(cfg: GeneratorConfig, seed: int = 0) -> Generator:
    """Fresh (random-init) generator: truncated-normal weights, zero-init
    modulation/output heads."""
    model = Generator(cfg)
    init_parameters(model, seed)
    zero_init_modulation(model)
    return model
