"""Small-image datasets and pixel normalization.

Three sources are supported:
  * "shapes10" - a built-in procedural 10-class dataset (32x32 RGB) used as
    the default desk-scale benchmark; fully deterministic per (seed, split).
  * CIFAR-10-style binary batches (``data_batch_*.bin`` / ``test_batch.bin``,
    one byte label + 3072 bytes planar RGB per record).
  * a generic image folder (one subdirectory per class).

Pixels are always [N, 3, H, W] float32 in [0, 1] before normalization.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError

DATA_DIR_ENV = "USP_DATA_DIR"


@dataclass(frozen=True)
class NormalizationSpec:
    name: str
    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    def __post_init__(self):
        if any(s <= 0 for s in self.std):
            raise ConfigError("normalization std components must be strictly positive")

    def as_dict(self) -> dict:
        return {"name": self.name, "mean": list(self.mean), "std": list(self.std)}


NORMALIZATIONS = {
    "vae_half": NormalizationSpec("vae_half", (0.5, 0.5, 0.5), (0.5, 0.5, 0.5)),
    "imagenet": NormalizationSpec("imagenet", (0.485, 0.456, 0.406), (0.229, 0.224, 0.225)),
}


def get_normalization(name: str) -> NormalizationSpec:
    try:
        return NORMALIZATIONS[name]
    except KeyError:
        raise ConfigError(f"unknown normalization {name!r}; choose from {sorted(NORMALIZATIONS)}")


@dataclass
class ImageBatch:
    pixels: torch.Tensor  # [N, 3, H, W] float32 in [0, 1]
    labels: torch.Tensor | None  # int64 [N] or None
    source_id: str

    def __len__(self) -> int:
        return self.pixels.shape[0]

    @property
    def num_classes(self) -> int:
        if self.labels is None:
            return 0
        return int(self.labels.max().item()) + 1


def normalize_image(batch: ImageBatch | torch.Tensor, spec: NormalizationSpec) -> torch.Tensor:
    """Per-channel (x - mean) / std. Input pixels must already be in [0, 1]."""
    pixels = batch.pixels if isinstance(batch, ImageBatch) else batch
    if pixels.ndim != 4 or pixels.shape[1] != len(spec.mean):
        raise ConfigError(
            f"expected [N,{len(spec.mean)},H,W] pixels, got {tuple(pixels.shape)}"
        )
    mean = torch.tensor(spec.mean, dtype=pixels.dtype).view(1, -1, 1, 1)
    std = torch.tensor(spec.std, dtype=pixels.dtype).view(1, -1, 1, 1)
    return (pixels - mean) / std


def denormalize_image(x: torch.Tensor, spec: NormalizationSpec) -> torch.Tensor:
    """Inverse of normalize_image, clamped back into [0, 1] for viewing."""
    mean = torch.tensor(spec.mean, dtype=x.dtype).view(1, -1, 1, 1)
    std = torch.tensor(spec.std, dtype=x.dtype).view(1, -1, 1, 1)
    return (x * std + mean).clamp(0.0, 1.0)


# ---------------------------------------------------------------------------
# shapes10: procedural 10-class desk dataset
# ---------------------------------------------------------------------------

SHAPES10_CLASSES = (
    "disk",
    "square",
    "triangle",
    "plus",
    "ring",
    "hbars",
    "vbars",
    "diamond",
    "checker",
    "xcross",
)


def _soft_mask(signed: np.ndarray, edge: float) -> np.ndarray:
    # smooth step across the zero level set; signed < 0 is inside
    return np.clip(0.5 - signed / (2.0 * edge), 0.0, 1.0)


def _shape_mask(cls: int, x: np.ndarray, y: np.ndarray, size: float, rng: np.random.Generator) -> np.ndarray:
    edge = 0.08
    if cls == 0:  # disk
        return _soft_mask(np.sqrt(x * x + y * y) - size, edge)
    if cls == 1:  # square
        return _soft_mask(np.maximum(np.abs(x), np.abs(y)) - size, edge)
    if cls == 2:  # triangle, apex up
        top = y + size
        left = -0.5 * (y - size) + 0.9 * x
        right = -0.5 * (y - size) - 0.9 * x
        return _soft_mask(np.maximum(top - 2 * size, np.maximum(-left, -right)) - 0.0, edge)
    if cls == 3:  # plus
        w = 0.35 * size
        bar_h = np.maximum(np.abs(x) - size, np.abs(y) - w)
        bar_v = np.maximum(np.abs(y) - size, np.abs(x) - w)
        return _soft_mask(np.minimum(bar_h, bar_v), edge)
    if cls == 4:  # ring
        return _soft_mask(np.abs(np.sqrt(x * x + y * y) - size) - 0.35 * size, edge)
    if cls == 5:  # horizontal bars
        sq = _soft_mask(np.maximum(np.abs(x), np.abs(y)) - size, edge)
        period = size
        stripes = _soft_mask(np.abs(((y + 10 * period) % period) - 0.5 * period) - 0.25 * period, 0.05)
        return sq * stripes
    if cls == 6:  # vertical bars
        sq = _soft_mask(np.maximum(np.abs(x), np.abs(y)) - size, edge)
        period = size
        stripes = _soft_mask(np.abs(((x + 10 * period) % period) - 0.5 * period) - 0.25 * period, 0.05)
        return sq * stripes
    if cls == 7:  # diamond
        return _soft_mask(np.abs(x) + np.abs(y) - size, edge)
    if cls == 8:  # checker
        sq = _soft_mask(np.maximum(np.abs(x), np.abs(y)) - size, edge)
        cell = size
        cx = np.floor((x + 10 * cell) / cell).astype(np.int64)
        cy = np.floor((y + 10 * cell) / cell).astype(np.int64)
        return sq * ((cx + cy) % 2).astype(np.float64)
    if cls == 9:  # diagonal cross
        w = 0.3 * size
        d1 = np.abs(x - y) / np.sqrt(2.0) - w
        d2 = np.abs(x + y) / np.sqrt(2.0) - w
        extent = np.maximum(np.abs(x), np.abs(y)) - size
        return _soft_mask(np.maximum(np.minimum(d1, d2), extent), edge)
    raise ConfigError(f"shapes10 has no class {cls}")


def make_shapes(
    n: int, split: str = "train", seed: int = 0, image_size: int = 32
) -> ImageBatch:
    """Generate the deterministic shapes10 batch for a (seed, split) stream.

    Sample index i is drawn from its own RNG stream, so the first n samples
    of a longer request are identical to a shorter one.
    """
    split_tag = {"train": 1, "val": 2, "test": 3}.get(split)
    if split_tag is None:
        raise ConfigError(f"unknown split {split!r}")
    side = image_size
    lin = (np.arange(side) + 0.5) / side * 2.0 - 1.0
    yy, xx = np.meshgrid(lin, lin, indexing="ij")
    pixels = np.empty((n, 3, side, side), dtype=np.float32)
    labels = np.empty((n,), dtype=np.int64)
    for i in range(n):
        rng = np.random.default_rng([seed, split_tag, i])
        cls = int(rng.integers(0, len(SHAPES10_CLASSES)))
        cx, cy = rng.uniform(-0.25, 0.25, size=2)
        size = rng.uniform(0.38, 0.62)
        fg = rng.uniform(0.55, 1.0, size=3)
        bg = rng.uniform(0.0, 0.35, size=3)
        grad = rng.uniform(-0.08, 0.08, size=3)
        mask = _shape_mask(cls, xx - cx, yy - cy, size, rng)
        img = bg[:, None, None] + grad[:, None, None] * yy[None] + (fg - bg)[:, None, None] * mask[None]
        img += rng.normal(0.0, 0.02, size=img.shape)
        pixels[i] = np.clip(img, 0.0, 1.0).astype(np.float32)
        labels[i] = cls
    return ImageBatch(
        pixels=torch.from_numpy(pixels),
        labels=torch.from_numpy(labels),
        source_id=f"shapes10:{split}",
    )


# ---------------------------------------------------------------------------
# CIFAR-10-style binary batches
# ---------------------------------------------------------------------------

def load_cifar_binary(root: str | os.PathLike, split: str = "train") -> ImageBatch:
    root = Path(root)
    if split == "train":
        files = sorted(root.glob("data_batch_*.bin"))
    else:
        files = sorted(root.glob("test_batch*.bin"))
    if not files:
        raise ConfigError(f"no CIFAR binary batches for split {split!r} under {root}")
    record = 1 + 3 * 32 * 32
    chunks, labels = [], []
    for path in files:
        raw = np.frombuffer(path.read_bytes(), dtype=np.uint8)
        if raw.size % record != 0:
            raise ConfigError(f"{path} is not a whole number of {record}-byte records")
        raw = raw.reshape(-1, record)
        labels.append(raw[:, 0].astype(np.int64))
        chunks.append(raw[:, 1:].reshape(-1, 3, 32, 32))
    pixels = np.concatenate(chunks).astype(np.float32) / 255.0
    return ImageBatch(
        pixels=torch.from_numpy(pixels),
        labels=torch.from_numpy(np.concatenate(labels)),
        source_id=f"cifar-bin:{split}",
    )


def load_image_folder(
    root: str | os.PathLike, split: str = "train", image_size: int = 32
) -> ImageBatch:
    """Read root/<split>/<class_name>/*.png|jpg ; falls back to root/<class>."""
    from PIL import Image

    root = Path(root)
    base = root / split if (root / split).is_dir() else root
    class_dirs = sorted(d for d in base.iterdir() if d.is_dir())
    if not class_dirs:
        raise ConfigError(f"no class subdirectories under {base}")
    pixels, labels = [], []
    for cls_id, d in enumerate(class_dirs):
        for path in sorted(d.iterdir()):
            if path.suffix.lower() not in {".png", ".jpg", ".jpeg", ".bmp"}:
                continue
            img = Image.open(path).convert("RGB").resize((image_size, image_size), Image.BILINEAR)
            pixels.append(np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 255.0)
            labels.append(cls_id)
    if not pixels:
        raise ConfigError(f"no images found under {base}")
    return ImageBatch(
        pixels=torch.from_numpy(np.stack(pixels)),
        labels=torch.tensor(labels, dtype=torch.int64),
        source_id=f"folder:{base.name}:{split}",
    )


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

DATASET_CONFIG_KEYS = {"name", "root", "seed", "image_size", "n_train", "n_val", "n_test"}


def load_dataset(cfg: dict, split: str = "train") -> ImageBatch:
    """Load a dataset from a config dict.

    cfg keys: name ("shapes10" | "cifar10-bin" | "folder"), and for shapes10
    the per-split sizes n_train/n_val/n_test plus seed; for file-backed sets
    a root (resolved against $USP_DATA_DIR when relative).
    """
    unknown = set(cfg) - DATASET_CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown dataset config keys: {sorted(unknown)}")
    name = cfg.get("name", "shapes10")
    if name == "shapes10":
        n = int(cfg.get(f"n_{split}", {"train": 4096, "val": 1024, "test": 1024}[split]))
        return make_shapes(
            n, split=split, seed=int(cfg.get("seed", 0)), image_size=int(cfg.get("image_size", 32))
        )
    root = cfg.get("root")
    if root is None:
        raise ConfigError(f"dataset {name!r} requires a root")
    root = Path(root)
    if not root.is_absolute():
        root = Path(os.environ.get(DATA_DIR_ENV, ".")) / root
    if name == "cifar10-bin":
        return load_cifar_binary(root, split)
    if name == "folder":
        return load_image_folder(root, split, image_size=int(cfg.get("image_size", 32)))
    raise ConfigError(f"unknown dataset name {name!r}")
