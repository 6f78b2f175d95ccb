"""Transformer building blocks shared by the pretraining ViT and the generators.

Both model families instantiate the same Attention/Mlp modules, so a
weight-transplanted generator with modulation forced to the identity runs the
exact same kernels as the source encoder.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(d // self.heads)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class ViTBlock(nn.Module):
    """Pre-norm transformer block with affine LayerNorms."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.ln2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x))
        x = x + self.mlp(self.ln2(x))
        return x


def sincos_pos_embed_2d(dim: int, rows: int, cols: int) -> torch.Tensor:
    """Fixed 2-D separable sine-cosine positions, [rows*cols, dim].

    Half the channels encode the row coordinate, half the column; each half
    is the classic interleaved sin/cos at geometric frequencies.
    """
    if dim % 4:
        raise ConfigError(f"sincos position dim must be divisible by 4, got {dim}")

    def axis(d: int, positions: np.ndarray) -> np.ndarray:
        omega = 1.0 / 10000.0 ** (np.arange(d // 2, dtype=np.float64) / (d // 2))
        angles = positions[:, None] * omega[None, :]
        return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)

    row_emb = axis(dim // 2, np.arange(rows, dtype=np.float64))  # [rows, dim/2]
    col_emb = axis(dim // 2, np.arange(cols, dtype=np.float64))  # [cols, dim/2]
    out = np.zeros((rows * cols, dim), dtype=np.float64)
    for r in range(rows):
        out[r * cols : (r + 1) * cols, : dim // 2] = row_emb[r]
        out[r * cols : (r + 1) * cols, dim // 2 :] = col_emb
    return torch.from_numpy(out.astype(np.float32))
