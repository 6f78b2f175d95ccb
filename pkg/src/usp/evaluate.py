"""Evaluation: Fréchet distance under a pinned embedder, class-score,
linear/layerwise probes, fine-tuning, and convergence curves.

The embedder is a small conv classifier trained once on the desk dataset and
frozen; its weight fingerprint travels with every statistic so that runs are
only ever compared under the same feature space. Reference statistics are
cached in a "USPS" file (mean then row-major covariance, float64 LE).
"""

from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .archive import CheckpointArchive, archive_from_module, load_module_state
from .data import ImageBatch, NormalizationSpec, denormalize_image
from .errors import ConfigError, DigestMismatch, NumericFailure
from .mae import MaskedAutoencoder
from .utils import (
    atomic_write_bytes,
    derive_seed,
    json_digest,
    module_digest,
    new_generator,
)

# ---------------------------------------------------------------------------
# feature embedder fixture
# ---------------------------------------------------------------------------


class FixtureNet(nn.Module):
    """Small conv classifier; the penultimate layer is the FD feature map."""

    def __init__(self, num_classes: int = 10, feature_dim: int = 64):
        super().__init__()
        self.feature_dim = feature_dim
        self.trunk = nn.Sequential(
            nn.Conv2d(3, 32, 3, padding=1), nn.GroupNorm(8, 32), nn.SiLU(), nn.MaxPool2d(2),
            nn.Conv2d(32, 64, 3, padding=1), nn.GroupNorm(8, 64), nn.SiLU(), nn.MaxPool2d(2),
            nn.Conv2d(64, 64, 3, padding=1), nn.GroupNorm(8, 64), nn.SiLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
        )
        self.fc = nn.Linear(64, feature_dim)
        self.head = nn.Linear(feature_dim, num_classes)

    def features(self, pixels: torch.Tensor) -> torch.Tensor:
        return self.fc(self.trunk(pixels))

    def forward(self, pixels: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(pixels))


def train_fixture_classifier(
    train: ImageBatch, seed: int = 0, epochs: int = 3, batch_size: int = 128, lr: float = 1e-3
) -> CheckpointArchive:
    """Seed-pinned embedder/classifier fixture, trained briefly and frozen."""
    if train.labels is None:
        raise ConfigError("the embedder fixture needs a labeled dataset")
    torch.manual_seed(derive_seed(seed, "embedder-init"))
    net = FixtureNet(num_classes=train.num_classes)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    n = len(train)
    order_gen = new_generator(derive_seed(seed, "embedder-order"))
    for _ in range(epochs):
        perm = torch.randperm(n, generator=order_gen)
        for i in range(0, n, batch_size):
            idx = perm[i : i + batch_size]
            loss = F.cross_entropy(net(train.pixels[idx]), train.labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    net.eval()
    with torch.no_grad():
        preds = []
        for i in range(0, n, batch_size):
            preds.append(net(train.pixels[i : i + batch_size]).argmax(1))
        acc = float((torch.cat(preds) == train.labels).float().mean())
    meta = {
        "num_classes": train.num_classes,
        "feature_dim": net.feature_dim,
        "train_acc": acc,
        "seed": seed,
        "fingerprint": module_digest(net),
    }
    return archive_from_module("embedder", net, meta=meta, config_digest=json_digest(meta))


def load_embedder(arc: CheckpointArchive) -> tuple[FixtureNet, str]:
    if arc.stage != "embedder":
        raise DigestMismatch(f"expected an embedder archive, got {arc.stage!r}")
    net = FixtureNet(num_classes=int(arc.meta["num_classes"]), feature_dim=int(arc.meta["feature_dim"]))
    load_module_state(net, arc)
    net.eval()
    fp = module_digest(net)
    if fp != arc.meta["fingerprint"]:
        raise DigestMismatch("embedder fingerprint does not match its weights")
    return net, fp


def embed_pixels(net: FixtureNet, pixels: torch.Tensor, batch_size: int = 256) -> np.ndarray:
    outs = []
    with torch.no_grad():
        for i in range(0, pixels.shape[0], batch_size):
            outs.append(net.features(pixels[i : i + batch_size]).double().numpy())
    return np.concatenate(outs) if outs else np.zeros((0, net.feature_dim))


def class_probs(net: FixtureNet, pixels: torch.Tensor, batch_size: int = 256) -> np.ndarray:
    outs = []
    with torch.no_grad():
        for i in range(0, pixels.shape[0], batch_size):
            outs.append(torch.softmax(net(pixels[i : i + batch_size]), dim=-1).double().numpy())
    return np.concatenate(outs)


# ---------------------------------------------------------------------------
# Fréchet distance
# ---------------------------------------------------------------------------


@dataclass
class FrechetStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int
    embedder_fingerprint: str = ""

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ConfigError("covariance shape does not match the mean")


def compute_stats(features: np.ndarray, embedder_fingerprint: str = "") -> FrechetStats:
    """Mean/covariance in float64 with a fixed accumulation order."""
    features = np.asarray(features, dtype=np.float64)
    n, d = features.shape
    if n < 2:
        raise ConfigError("need at least 2 samples for covariance")
    if n < d:
        warnings.warn(f"covariance from {n} samples in {d} dims is rank-deficient")
    mean = features.mean(axis=0)
    centered = features - mean
    cov = centered.T @ centered / (n - 1)
    return FrechetStats(mean=mean, cov=cov, n=n, embedder_fingerprint=embedder_fingerprint)


def _sqrt_psd(mat: np.ndarray, tol: float = -1e-8) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    scale = max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < tol * scale:
        raise NumericFailure(f"matrix has eigenvalue {vals.min():.3e}, below the clip tolerance")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: FrechetStats, b: FrechetStats) -> float:
    """Squared 2-Wasserstein distance between the fitted Gaussians.

    ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^{1/2}), with the product square
    root computed via the symmetric form Sa^{1/2} Sb Sa^{1/2} and negative
    eigenvalues clipped at a -1e-8 relative tolerance.
    """
    if a.mean.size != b.mean.size:
        raise ConfigError("stats dimensionality mismatch")
    if a.embedder_fingerprint != b.embedder_fingerprint:
        raise DigestMismatch("comparing statistics from different embedders")
    sa = _sqrt_psd(a.cov)
    inner = sa @ b.cov @ sa
    inner = (inner + inner.T) / 2.0
    vals = np.linalg.eigh(inner)[0]
    scale = max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < -1e-8 * scale:
        raise NumericFailure("cross-covariance product is far from PSD")
    tr_sqrt = float(np.sqrt(np.clip(vals, 0.0, None)).sum())
    diff = a.mean - b.mean
    fd = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_sqrt)
    if not np.isfinite(fd):
        raise NumericFailure("non-finite Fréchet distance")
    return max(fd, 0.0)


REF_MAGIC = b"USPS"
REF_VERSION = 1


def save_ref_stats(path, stats: FrechetStats) -> None:
    header = {
        "embedder_fingerprint": stats.embedder_fingerprint,
        "d": int(stats.mean.size),
        "n": int(stats.n),
    }
    hbytes = json.dumps(header, sort_keys=False, separators=(",", ":")).encode()
    payload = stats.mean.astype("<f8").tobytes() + np.ascontiguousarray(stats.cov).astype("<f8").tobytes()
    atomic_write_bytes(path, REF_MAGIC + struct.pack("<HI", REF_VERSION, len(hbytes)) + hbytes + payload)


def load_ref_stats(path) -> FrechetStats:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != REF_MAGIC:
        raise DigestMismatch("not a USPS reference-statistics file")
    version, hlen = struct.unpack("<HI", data[4:10])
    if version != REF_VERSION:
        raise ConfigError(f"unsupported reference stats version {version}")
    header = json.loads(data[10 : 10 + hlen].decode())
    d, n = int(header["d"]), int(header["n"])
    payload = data[10 + hlen :]
    if len(payload) != 8 * (d + d * d):
        raise DigestMismatch("reference stats payload truncated")
    mean = np.frombuffer(payload[: 8 * d], dtype="<f8").copy()
    cov = np.frombuffer(payload[8 * d :], dtype="<f8").reshape(d, d).copy()
    return FrechetStats(mean=mean, cov=cov, n=n, embedder_fingerprint=header["embedder_fingerprint"])


# ---------------------------------------------------------------------------
# class-score (entropy-gap analogue of the inception score)
# ---------------------------------------------------------------------------


def class_score(probs: np.ndarray) -> float:
    """exp(E_x KL(p(y|x) || p(y))) over the sample set."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ConfigError("class_score expects [N, classes] probabilities")
    marginal = probs.mean(axis=0)
    ratio = np.where(probs > 0, probs * (np.log(probs + 1e-300) - np.log(marginal + 1e-300)), 0.0)
    kl = ratio.sum(axis=1)
    return float(np.exp(kl.mean()))


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------


@dataclass
class ProbeResult:
    top1: float
    per_layer: dict[int, float] = field(default_factory=dict)
    config_digest: str = ""
    frozen_trunk: bool = True

    def as_dict(self) -> dict:
        return {
            "top1": self.top1,
            "per_layer": {str(k): v for k, v in self.per_layer.items()},
            "config_digest": self.config_digest,
            "frozen_trunk": self.frozen_trunk,
        }


class Lars(torch.optim.Optimizer):
    """Layer-wise adaptive rate scaling (momentum SGD with trust ratios).

    Provided to mirror the reference probe recipe at large batch; the desk
    default is plain SGD+momentum.
    """

    def __init__(self, params, lr: float, momentum: float = 0.9, trust: float = 0.001):
        super().__init__(params, dict(lr=lr, momentum=momentum, trust=trust))

    @torch.no_grad()
    def step(self):
        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is None:
                    continue
                g = p.grad
                w_norm = p.norm()
                g_norm = g.norm()
                ratio = torch.where(
                    (w_norm > 0) & (g_norm > 0),
                    group["trust"] * w_norm / g_norm,
                    torch.ones_like(w_norm),
                )
                state = self.state[p]
                if "momentum" not in state:
                    state["momentum"] = torch.zeros_like(p)
                buf = state["momentum"]
                buf.mul_(group["momentum"]).add_(g, alpha=float(ratio))
                p.add_(buf, alpha=-group["lr"])


def extract_features(
    arc: CheckpointArchive,
    latents: torch.Tensor,
    layer: int | None = None,
    all_layers: bool = False,
    batch_size: int = 256,
) -> dict[int, torch.Tensor]:
    """Per-layer probe features for any trunk archive.

    Encoder/classifier trunks use the class-token output; generator trunks
    (no class token) use mean-pooled patch tokens, with conditioning pinned
    to time 0 and the null class.
    """
    from .diffusion import load_generator
    from .pretrain import load_pretrained
    from .transplant import load_classifier

    if arc.stage == "pretrain":
        model = load_pretrained(arc)
        depth = model.cfg.depth

        def run(x):
            outs = model.encode_all(x)
            return {i: o[:, 0] for i, o in enumerate(outs)}

    elif arc.stage == "classifier":
        model = load_classifier(arc)
        depth = model.cfg.depth

        def run(x):
            feats = {}
            h = model.patchconv(x).flatten(2).transpose(1, 2) + model.pos_embed.unsqueeze(0)
            h = torch.cat([model.cls_token.expand(h.shape[0], -1, -1), h], dim=1)
            for i, block in enumerate(model.blocks):
                h = block(h)
                feats[i] = (model.norm(h) if i == depth - 1 else h)[:, 0]
            return feats

    elif arc.stage == "generator":
        model = load_generator(arc)
        depth = model.cfg.depth

        def run(x):
            t = torch.zeros(x.shape[0])
            y = torch.full((x.shape[0],), model.cfg.null_class, dtype=torch.int64)
            outs = model.block_features(x, t, y)
            return {i: o.mean(dim=1) for i, o in enumerate(outs)}

    else:
        raise ConfigError(f"cannot probe a {arc.stage!r} archive")

    wanted = list(range(depth)) if all_layers else [depth - 1 if layer is None else layer]
    if any(w < 0 or w >= depth for w in wanted):
        raise ConfigError(f"layer index out of range [0, {depth})")
    feats: dict[int, list[torch.Tensor]] = {w: [] for w in wanted}
    with torch.no_grad():
        for i in range(0, latents.shape[0], batch_size):
            out = run(latents[i : i + batch_size])
            for w in wanted:
                feats[w].append(out[w])
    return {w: torch.cat(v) for w, v in feats.items()}


def _train_linear_head(
    train_x: torch.Tensor,
    train_y: torch.Tensor,
    val_x: torch.Tensor,
    val_y: torch.Tensor,
    seed: int = 0,
    epochs: int = 40,
    batch_size: int = 256,
    lr: float = 0.1,
    optimizer: str = "sgd",
) -> float:
    mean = train_x.mean(dim=0, keepdim=True)
    std = train_x.std(dim=0, keepdim=True).clamp(min=1e-6)
    train_x = (train_x - mean) / std
    val_x = (val_x - mean) / std
    num_classes = int(train_y.max()) + 1
    torch.manual_seed(derive_seed(seed, "probe-head"))
    head = nn.Linear(train_x.shape[1], num_classes)
    nn.init.zeros_(head.weight)
    nn.init.zeros_(head.bias)
    if optimizer == "lars":
        opt = Lars(head.parameters(), lr=lr)
    else:
        opt = torch.optim.SGD(head.parameters(), lr=lr, momentum=0.9)
    order_gen = new_generator(derive_seed(seed, "probe-order"))
    n = train_x.shape[0]
    steps_per_epoch = math.ceil(n / batch_size)
    total = epochs * steps_per_epoch
    step = 0
    for _ in range(epochs):
        perm = torch.randperm(n, generator=order_gen)
        for i in range(0, n, batch_size):
            idx = perm[i : i + batch_size]
            for g in opt.param_groups:
                g["lr"] = lr * 0.5 * (1.0 + math.cos(math.pi * step / total))
            loss = F.cross_entropy(head(train_x[idx]), train_y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
    with torch.no_grad():
        return float((head(val_x).argmax(1) == val_y).float().mean())


def linear_probe(
    arc: CheckpointArchive,
    train_latents: torch.Tensor,
    train_labels: torch.Tensor,
    val_latents: torch.Tensor,
    val_labels: torch.Tensor,
    layer: int | None = None,
    seed: int = 0,
    epochs: int = 40,
    optimizer: str = "sgd",
) -> ProbeResult:
    """Train only a linear head on frozen-trunk features; hard-fails if the
    trunk digest changes."""
    before = arc.digest()
    f_train = extract_features(arc, train_latents, layer=layer)
    f_val = extract_features(arc, val_latents, layer=layer)
    (li, train_x), (_, val_x) = sorted(f_train.items())[0], sorted(f_val.items())[0]
    acc = _train_linear_head(
        train_x, train_labels, val_x, val_labels, seed=seed, epochs=epochs, optimizer=optimizer
    )
    if arc.digest() != before:
        raise DigestMismatch("probe mutated the trunk archive")
    return ProbeResult(top1=acc, per_layer={li: acc}, config_digest=arc.config_digest)


def layerwise_probe(
    arc: CheckpointArchive,
    train_latents: torch.Tensor,
    train_labels: torch.Tensor,
    val_latents: torch.Tensor,
    val_labels: torch.Tensor,
    seed: int = 0,
    epochs: int = 40,
) -> ProbeResult:
    """One linear probe per block output; returns the accuracy-vs-layer curve."""
    before = arc.digest()
    f_train = extract_features(arc, train_latents, all_layers=True)
    f_val = extract_features(arc, val_latents, all_layers=True)
    per_layer = {}
    for layer in sorted(f_train):
        per_layer[layer] = _train_linear_head(
            f_train[layer], train_labels, f_val[layer], val_labels,
            seed=derive_seed(seed, "layer", layer), epochs=epochs,
        )
    if arc.digest() != before:
        raise DigestMismatch("probe mutated the trunk archive")
    best = max(per_layer, key=per_layer.get)
    return ProbeResult(top1=per_layer[best], per_layer=per_layer, config_digest=arc.config_digest)


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------


@dataclass
class FinetuneRecipe:
    epochs: int = 5
    lr: float = 5e-4
    layer_decay: float = 0.75
    label_smoothing: float = 0.1
    weight_decay: float = 0.05
    batch_size: int = 128

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def _layer_decay_groups(model, base_lr: float, decay: float, weight_decay: float) -> list[dict]:
    """Deeper layers get larger rates: head at base_lr, block i at
    base_lr * decay^(depth - i), the patch projection below the first block."""
    depth = len(model.blocks)
    groups = []

    def scale_for(name: str) -> float:
        if name.startswith(("head.", "norm.")):
            return 1.0
        if name.startswith("blocks."):
            i = int(name.split(".")[1])
            return decay ** (depth - i)
        return decay ** (depth + 1)

    for name, param in model.named_parameters():
        groups.append(
            {
                "params": [param],
                "lr": base_lr * scale_for(name),
                "weight_decay": 0.0 if param.ndim <= 1 or name.endswith("cls_token") else weight_decay,
            }
        )
    return groups


def finetune_classify(
    arc: CheckpointArchive,
    train_latents: torch.Tensor,
    train_labels: torch.Tensor,
    val_latents: torch.Tensor,
    val_labels: torch.Tensor,
    recipe: FinetuneRecipe | None = None,
    seed: int = 0,
) -> tuple[ProbeResult, CheckpointArchive]:
    """Full fine-tune with layer-wise LR decay and label smoothing.

    Returns the accuracy and the updated classifier archive (usable as a
    transplant source)."""
    from .transplant import load_classifier

    recipe = recipe or FinetuneRecipe()
    model = load_classifier(arc)
    if arc.meta.get("trunk_frozen"):
        raise ConfigError("this classifier archive is marked frozen (linear_probe mode)")
    model.train()
    opt = torch.optim.AdamW(
        _layer_decay_groups(model, recipe.lr, recipe.layer_decay, recipe.weight_decay),
        betas=(0.9, 0.999),
    )
    n = train_latents.shape[0]
    order_gen = new_generator(derive_seed(seed, "ft-order"))
    for _ in range(recipe.epochs):
        perm = torch.randperm(n, generator=order_gen)
        for i in range(0, n, recipe.batch_size):
            idx = perm[i : i + recipe.batch_size]
            loss = F.cross_entropy(
                model(train_latents[idx]), train_labels[idx], label_smoothing=recipe.label_smoothing
            )
            if not torch.isfinite(loss):
                raise NumericFailure("fine-tuning loss became non-finite")
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()
    with torch.no_grad():
        preds = []
        for i in range(0, val_latents.shape[0], 256):
            preds.append(model(val_latents[i : i + 256]).argmax(1))
        acc = float((torch.cat(preds) == val_labels).float().mean())
    meta = {
        **arc.meta,
        "mode": "sft_source",
        "trunk_frozen": False,
        "finetune": recipe.as_dict(),
        "sft_top1": acc,
    }
    out = CheckpointArchive(
        stage="classifier", meta=meta, config_digest=json_digest(meta), parents=[arc.digest()]
    )
    for name, t in model.state_dict().items():
        if t.is_floating_point():
            out.put(name, t)
    result = ProbeResult(top1=acc, config_digest=out.config_digest, frozen_trunk=False)
    return result, out


# ---------------------------------------------------------------------------
# generation quality and convergence curves
# ---------------------------------------------------------------------------


def generation_stats(
    gen_arc: CheckpointArchive,
    codec,
    spec: NormalizationSpec,
    embedder: FixtureNet,
    embedder_fingerprint: str,
    n: int = 1024,
    sampler_steps: int = 100,
    cfg_scale: float | None = None,
    seed: int = 0,
    raw_latents: bool = False,
) -> FrechetStats:
    """Sample a generator, decode to pixels, embed, and fit Gaussian stats."""
    from .codec import decode_latents
    from .diffusion import NoiseSchedule, SamplerConfig, load_generator, sample_latents

    model = load_generator(gen_arc)
    k = model.cfg.num_classes
    labels = torch.arange(n, dtype=torch.int64) % k
    sampler = SamplerConfig(steps=sampler_steps, cfg_scale=cfg_scale, seed=seed)
    latents = sample_latents(
        model,
        sampler,
        n,
        labels,
        schedule=NoiseSchedule(),
        label_dropout_trained=gen_arc.meta.get("label_dropout"),
    )
    if raw_latents:
        feats = latents.reshape(n, -1).double().numpy()
        return compute_stats(feats, "raw-latent")
    pixels = denormalize_image(decode_latents(latents, codec), spec)
    return compute_stats(embed_pixels(embedder, pixels), embedder_fingerprint)


def reference_stats(
    batch: ImageBatch, embedder: FixtureNet, embedder_fingerprint: str
) -> FrechetStats:
    return compute_stats(embed_pixels(embedder, batch.pixels), embedder_fingerprint)


def convergence_curve(
    run_dirs: list[str | Path],
    ref: FrechetStats,
    codec,
    spec: NormalizationSpec,
    embedder: FixtureNet,
    embedder_fingerprint: str,
    n: int = 512,
    sampler_steps: int = 50,
    threshold: float | None = None,
    seed: int = 0,
) -> dict:
    """Fréchet distance at every periodic checkpoint of each run directory.

    Returns long-format rows (run, step, fd) plus, per run, the first
    checkpoint step at or below the threshold, and the pairwise speedup
    ratio when exactly two runs are given.
    """
    rows = []
    crossings = {}
    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        ckpts = sorted(run_dir.glob("ckpt-*.uspk"))
        if not ckpts:
            warnings.warn(f"{run_dir} has no periodic checkpoints; empty curve")
        crossing = None
        for ckpt in ckpts:
            arc = CheckpointArchive.load(ckpt)
            step = int(arc.meta.get("trained_steps", 0))
            stats = generation_stats(
                arc, codec, spec, embedder, embedder_fingerprint,
                n=n, sampler_steps=sampler_steps, seed=derive_seed(seed, "curve", step),
            )
            fd = frechet_distance(stats, ref)
            rows.append({"run": run_dir.name, "step": step, "fd": fd})
            if threshold is not None and crossing is None and fd <= threshold:
                crossing = step
        crossings[run_dir.name] = crossing
    out = {"rows": rows, "crossings": crossings, "threshold": threshold}
    if threshold is not None and len(run_dirs) == 2:
        a, b = (crossings[Path(d).name] for d in run_dirs)
        out["speedup"] = (a / b) if (a and b) else None
        # large-scale reference values, for context only
        out["reference_speedups"] = {"dit": 11.7, "sit": 46.6}
    return out
