"""Weight transplant: map a pretrained ViT trunk onto generator and classifier layouts.

A generator inherits the patch projection, every block's attention/MLP
weights, the affine LayerNorm scales and biases, and the final norm; patch
positions are regridded by bicubic interpolation when the target grid
differs; the class token is dropped. Conditioning embedders, modulation
heads, and the output head are freshly initialized (modulation at zero, so
the transplanted trunk is the identity at the start of training).

Every adaptation returns a TransplantReport whose four lists partition the
destination tensors and account for every unused source tensor.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .archive import CheckpointArchive, load_module_state
from .errors import ConfigError, DigestMismatch
from .generator import Generator, GeneratorConfig, zero_init_modulation
from .mae import MaskedAutoencoder, PretrainModelConfig, VitClassifier, init_parameters
from .utils import json_digest, new_generator, trunc_normal_

# ---------------------------------------------------------------------------
# bicubic regrid
# ---------------------------------------------------------------------------

_CUBIC_A = -0.5  # Catmull-Rom


def _cubic_kernel(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    a = _CUBIC_A
    w = np.where(
        ax <= 1.0,
        (a + 2.0) * ax**3 - (a + 3.0) * ax**2 + 1.0,
        np.where(ax < 2.0, a * ax**3 - 5.0 * a * ax**2 + 8.0 * a * ax - 4.0 * a, 0.0),
    )
    return w


def _resample_matrix(n_src: int, n_dst: int) -> np.ndarray:
    """Row-stochastic [n_dst, n_src] cubic-convolution matrix, half-pixel
    centers, edge-clamped taps. Exact identity when n_src == n_dst."""
    mat = np.zeros((n_dst, n_src), dtype=np.float64)
    scale = n_src / n_dst
    for i in range(n_dst):
        src = (i + 0.5) * scale - 0.5
        base = int(np.floor(src))
        frac = src - base
        taps = np.arange(base - 1, base + 3)
        weights = _cubic_kernel(frac - (taps - base))
        for tap, w in zip(taps, weights):
            mat[i, min(max(tap, 0), n_src - 1)] += w
    return mat


def interpolate_posembed(
    src: torch.Tensor, src_grid: tuple[int, int], dst_grid: tuple[int, int]
) -> torch.Tensor:
    """Channel-wise bicubic resampling of a patch-position table.

    src is [rows*cols, d] over the patch-token grid only (no class slot).
    Identity when the grids match; constants are preserved exactly up to
    rounding. A 1x1 source upscaled to a larger grid degenerates to a
    constant fill and warns.
    """
    rows_s, cols_s = src_grid
    rows_d, cols_d = dst_grid
    if src.shape[0] != rows_s * cols_s:
        raise ConfigError(
            f"position table has {src.shape[0]} rows, grid {src_grid} needs {rows_s * cols_s}"
        )
    if (rows_s, cols_s) == (rows_d, cols_d):
        return src.clone()
    if (rows_s == 1 or cols_s == 1) and (rows_d > rows_s or cols_d > cols_s):
        warnings.warn("regridding a degenerate 1-wide position table: constant fill")
    grid = src.detach().to(torch.float64).numpy().reshape(rows_s, cols_s, -1)
    out = np.einsum("ir,rcd->icd", _resample_matrix(rows_s, rows_d), grid)
    out = np.einsum("jc,icd->ijd", _resample_matrix(cols_s, cols_d), out)
    return torch.from_numpy(out.reshape(rows_d * cols_d, -1).astype(np.float32))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class TransplantReport:
    mapped: list[dict] = field(default_factory=list)
    interpolated: list[dict] = field(default_factory=list)
    reinitialized: list[dict] = field(default_factory=list)
    dropped: list[str] = field(default_factory=list)
    unmatched_dest: list[str] = field(default_factory=list)

    def destination_names(self) -> list[str]:
        return (
            [m["dest"] for m in self.mapped]
            + [m["dest"] for m in self.interpolated]
            + [m["dest"] for m in self.reinitialized]
        )

    def validate(self, dest_names: list[str], source_names: list[str]) -> None:
        """Partition: every destination tensor in exactly one list; dropped
        covers every unused source tensor."""
        seen = self.destination_names()
        if sorted(seen) != sorted(set(seen)):
            raise ConfigError("transplant report assigns a destination twice")
        missing = set(dest_names) - set(seen)
        if missing or self.unmatched_dest:
            raise ConfigError(
                f"unmatched destination tensors: {sorted(missing | set(self.unmatched_dest))[:8]}"
            )
        used = {m["source"] for m in self.mapped} | {m["source"] for m in self.interpolated}
        leftover = set(source_names) - used - set(self.dropped)
        if leftover:
            raise ConfigError(f"source tensors unaccounted for: {sorted(leftover)[:8]}")

    def as_dict(self) -> dict:
        return {
            "mapped": self.mapped,
            "interpolated": self.interpolated,
            "reinitialized": self.reinitialized,
            "dropped": self.dropped,
            "unmatched_dest": self.unmatched_dest,
        }


def _source_layout(arc: CheckpointArchive) -> tuple[PretrainModelConfig, str]:
    """Trunk config and block-name prefix for a pretrain or classifier source."""
    if arc.stage == "pretrain":
        return PretrainModelConfig.from_dict(arc.meta["model"]), "enc."
    if arc.stage == "classifier":
        return PretrainModelConfig.from_dict(arc.meta["model"]), ""
    raise ConfigError(f"cannot transplant from a {arc.stage!r} archive")


def _check_trunk_geometry(src_cfg: PretrainModelConfig, gen_cfg: GeneratorConfig) -> None:
    same = (
        src_cfg.depth == gen_cfg.depth
        and src_cfg.dim == gen_cfg.dim
        and src_cfg.heads == gen_cfg.heads
        and src_cfg.mlp_ratio == gen_cfg.mlp_ratio
        and src_cfg.patch == gen_cfg.patch
        and src_cfg.latent_channels == gen_cfg.latent_channels
    )
    if not same:
        raise ConfigError(
            "trunk geometry mismatch: source "
            f"(depth={src_cfg.depth}, dim={src_cfg.dim}, heads={src_cfg.heads}) vs target "
            f"(depth={gen_cfg.depth}, dim={gen_cfg.dim}, heads={gen_cfg.heads})"
        )


# ---------------------------------------------------------------------------
# adaptation: generator
# ---------------------------------------------------------------------------


def adapt_vit_to_generator(
    pretrain: CheckpointArchive,
    gen_cfg: GeneratorConfig,
    seed: int = 0,
    include_patchconv: bool = True,
    reinit_last_k: int = 0,
) -> tuple[CheckpointArchive, TransplantReport]:
    """Build a generator initialization from a pretrained trunk.

    include_patchconv=False reproduces the degraded control where encoder
    blocks are loaded but the patch projection stays random (its entry lands
    in the report's reinitialized list).
    """
    src_cfg, prefix = _source_layout(pretrain)
    _check_trunk_geometry(src_cfg, gen_cfg)
    if reinit_last_k < 0 or reinit_last_k > gen_cfg.depth:
        raise ConfigError(f"reinit_last_k must lie in [0, {gen_cfg.depth}]")

    model = Generator(gen_cfg)
    init_parameters(model, seed)
    zero_init_modulation(model)

    report = TransplantReport()
    state = model.state_dict()
    src = pretrain.tensors
    reinit_blocks = set(range(gen_cfg.depth - reinit_last_k, gen_cfg.depth))

    def copy(dst_name: str, src_name: str) -> None:
        tensor = src[src_name]
        if tuple(tensor.shape) != tuple(state[dst_name].shape):
            raise ConfigError(
                f"shape mismatch {src_name} {tuple(tensor.shape)} -> "
                f"{dst_name} {tuple(state[dst_name].shape)}"
            )
        state[dst_name] = tensor.clone()
        report.mapped.append(
            {"source": src_name, "dest": dst_name, "shape": list(tensor.shape)}
        )

    for dst_name in list(state.keys()):
        if not state[dst_name].is_floating_point():
            continue
        if dst_name.startswith("patchconv."):
            if include_patchconv:
                copy(dst_name, dst_name)  # patchconv sits at the top level in both layouts
            else:
                report.reinitialized.append({"dest": dst_name, "scheme": "trunc_normal_0.02"})
            continue
        if dst_name == "pos_embed":
            src_name = f"{prefix}pos_embed"
            src_grid = tuple(src_cfg.token_grid)
            dst_grid = tuple(gen_cfg.token_grid)
            if src_grid == dst_grid:
                copy(dst_name, src_name)
            else:
                state[dst_name] = interpolate_posembed(src[src_name], src_grid, dst_grid)
                report.interpolated.append(
                    {
                        "source": src_name,
                        "dest": dst_name,
                        "from_grid": list(src_grid),
                        "to_grid": list(dst_grid),
                        "method": "bicubic",
                    }
                )
            continue
        if dst_name.startswith("blocks."):
            idx = int(dst_name.split(".")[1])
            rest = dst_name.split(".", 2)[2]
            if rest.startswith("modulation") or idx in reinit_blocks:
                report.reinitialized.append(
                    {"dest": dst_name, "scheme": "adaln_zero" if "modulation" in rest else "trunc_normal_0.02"}
                )
                continue
            copy(dst_name, f"{prefix}blocks.{idx}.{rest}")
            continue
        if dst_name.startswith("final.norm."):
            copy(dst_name, f"{prefix}norm.{dst_name.split('.', 2)[2]}")
            continue
        if dst_name.startswith(("t_embed.", "y_embed.", "final.modulation.", "final.head.")):
            scheme = "zero" if dst_name.startswith(("final.modulation.", "final.head.")) else "trunc_normal_0.02"
            report.reinitialized.append({"dest": dst_name, "scheme": scheme})
            continue
        report.unmatched_dest.append(dst_name)

    if report.unmatched_dest:
        raise ConfigError(f"unmatched destination tensors: {report.unmatched_dest}")

    used = {m["source"] for m in report.mapped} | {m["source"] for m in report.interpolated}
    report.dropped = sorted(set(src.keys()) - used)
    dest_names = [k for k, v in state.items() if v.is_floating_point()]
    report.validate(dest_names, list(src.keys()))

    model.load_state_dict(state)
    if reinit_last_k:
        _reinit_blocks(model, reinit_blocks, seed)
    meta = {
        "generator": gen_cfg.as_dict(),
        "init_source": pretrain.stage,
        "include_patchconv": include_patchconv,
        "reinit_last_k": reinit_last_k,
        "seed": seed,
    }
    arc = CheckpointArchive(
        stage="generator",
        meta=meta,
        config_digest=json_digest(meta),
        parents=[pretrain.digest()],
    )
    for name, t in model.state_dict().items():
        if t.is_floating_point():
            arc.put(name, t)
    return arc, report


def _reinit_blocks(model: Generator, block_ids: set[int], seed: int) -> None:
    from .utils import derive_seed

    gen = new_generator(derive_seed(seed, "reinit-blocks"))
    for idx in sorted(block_ids):
        block = model.blocks[idx]
        for module in block.modules():
            if isinstance(module, nn.Linear):
                trunc_normal_(module.weight, std=0.02, generator=gen)
                nn.init.zeros_(module.bias)
            elif isinstance(module, nn.LayerNorm):
                nn.init.ones_(module.weight)
                nn.init.zeros_(module.bias)
        nn.init.zeros_(block.modulation.weight)
        nn.init.zeros_(block.modulation.bias)
        if model.cfg.gate_bias_one:
            dim = model.cfg.dim
            with torch.no_grad():
                block.modulation.bias[2 * dim : 3 * dim] = 1.0
                block.modulation.bias[5 * dim : 6 * dim] = 1.0


def reinit_last_k_op(archive: CheckpointArchive, k: int, seed: int = 0) -> CheckpointArchive:
    """Replace the last k generator blocks with fresh initialization.

    k = 0 returns the archive unchanged (digest-identical); earlier blocks
    are untouched.
    """
    if archive.stage != "generator":
        raise ConfigError("reinit_last_k applies to generator archives")
    cfg = GeneratorConfig.from_dict(archive.meta["generator"])
    if k < 0 or k > cfg.depth:
        raise ConfigError(f"k must lie in [0, {cfg.depth}]")
    if k == 0:
        return archive
    model = Generator(cfg)
    load_module_state(model, archive)
    _reinit_blocks(model, set(range(cfg.depth - k, cfg.depth)), seed)
    meta = {**archive.meta, "reinit_last_k": k}
    arc = CheckpointArchive(
        stage="generator",
        meta=meta,
        config_digest=json_digest(meta),
        parents=list(archive.parents),
    )
    for name, t in model.state_dict().items():
        if t.is_floating_point():
            arc.put(name, t)
    return arc


# ---------------------------------------------------------------------------
# adaptation: classifier
# ---------------------------------------------------------------------------

CLASSIFIER_MODES = ("linear_probe", "finetune", "sft_source")


def adapt_vit_to_classifier(
    pretrain: CheckpointArchive, num_classes: int, mode: str = "finetune"
) -> CheckpointArchive:
    """Trunk plus class token copied verbatim; zero-initialized linear head.

    linear_probe mode marks the trunk frozen (probe training must leave its
    digest unchanged).
    """
    if mode not in CLASSIFIER_MODES:
        raise ConfigError(f"classifier mode must be one of {CLASSIFIER_MODES}")
    src_cfg, prefix = _source_layout(pretrain)
    if f"{prefix}pos_embed" not in pretrain.tensors or "cls_token" not in pretrain.tensors:
        raise ConfigError("source archive has no class token to reuse")
    model = VitClassifier(src_cfg, num_classes)
    state = model.state_dict()
    state["patchconv.weight"] = pretrain.get("patchconv.weight").clone()
    state["patchconv.bias"] = pretrain.get("patchconv.bias").clone()
    state["cls_token"] = pretrain.get("cls_token").clone()
    state["pos_embed"] = pretrain.get(f"{prefix}pos_embed").clone()
    for name in list(state.keys()):
        if name.startswith("blocks."):
            state[name] = pretrain.get(f"{prefix}{name}").clone()
        elif name.startswith("norm."):
            state[name] = pretrain.get(f"{prefix}{name}").clone()
    state["head.weight"] = torch.zeros_like(state["head.weight"])
    state["head.bias"] = torch.zeros_like(state["head.bias"])
    model.load_state_dict(state)
    meta = {
        "model": src_cfg.as_dict(),
        "num_classes": num_classes,
        "mode": mode,
        "trunk_frozen": mode == "linear_probe",
        "init_source": pretrain.stage,
    }
    arc = CheckpointArchive(
        stage="classifier",
        meta=meta,
        config_digest=json_digest(meta),
        parents=[pretrain.digest()],
    )
    for name, t in model.state_dict().items():
        if t.is_floating_point():
            arc.put(name, t)
    return arc


def load_classifier(arc: CheckpointArchive) -> VitClassifier:
    if arc.stage != "classifier":
        raise DigestMismatch(f"expected a classifier archive, got {arc.stage!r}")
    model = VitClassifier(
        PretrainModelConfig.from_dict(arc.meta["model"]), int(arc.meta["num_classes"])
    )
    load_module_state(model, arc)
    model.eval()
    return model


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------


def vit_trunk_forward(model: MaskedAutoencoder | VitClassifier, latent: torch.Tensor) -> torch.Tensor:
    """Source-side reference: patch tokens (no class token) through the
    encoder blocks and the final norm."""
    if isinstance(model, MaskedAutoencoder):
        x = model.patch_tokens(latent)
        for block in model.enc.blocks:
            x = block(x)
        return model.enc.norm(x)
    x = model.patchconv(latent).flatten(2).transpose(1, 2) + model.pos_embed.unsqueeze(0)
    for block in model.blocks:
        x = block(x)
    return model.norm(x)


def verify_transplant(
    vit_arc: CheckpointArchive,
    gen_arc: CheckpointArchive,
    tolerance: float = 1e-5,
    batches: int = 10,
    batch_size: int = 4,
    seed: int = 0,
) -> dict:
    """Gate-forced dual forward: run the generator trunk with modulation held
    at (shift=0, scale=0, gate=1) against the source encoder on random
    latents; report the overall and per-block max-abs deviation."""
    from .pretrain import load_pretrained

    src_cfg, _ = _source_layout(vit_arc)
    gen_cfg = GeneratorConfig.from_dict(gen_arc.meta["generator"])
    _check_trunk_geometry(src_cfg, gen_cfg)
    if tuple(src_cfg.token_grid) != tuple(gen_cfg.token_grid):
        raise ConfigError("verification requires matching token grids")
    vit = load_pretrained(vit_arc) if vit_arc.stage == "pretrain" else load_classifier(vit_arc)
    gen_model = Generator(gen_cfg)
    load_module_state(gen_model, gen_arc)
    gen_model.eval()
    vit.eval()

    gen_rng = new_generator(seed)
    max_abs = 0.0
    per_block = [0.0] * (gen_cfg.depth + 1)  # +1 for the final norm
    with torch.no_grad():
        for _ in range(batches):
            latent = torch.randn(
                batch_size, src_cfg.latent_channels, *src_cfg.grid, generator=gen_rng
            )
            # lockstep per-block comparison
            x_vit = (
                vit.patch_tokens(latent)
                if isinstance(vit, MaskedAutoencoder)
                else vit.patchconv(latent).flatten(2).transpose(1, 2) + vit.pos_embed.unsqueeze(0)
            )
            x_gen = gen_model.tokens(latent)
            vit_blocks = vit.enc.blocks if isinstance(vit, MaskedAutoencoder) else vit.blocks
            vit_norm = vit.enc.norm if isinstance(vit, MaskedAutoencoder) else vit.norm
            for b, (vb, gb) in enumerate(zip(vit_blocks, gen_model.blocks)):
                x_vit = vb(x_vit)
                x_gen = gb(x_gen, None, force_identity_modulation=True)
                per_block[b] = max(per_block[b], float((x_vit - x_gen).abs().max()))
            x_vit = vit_norm(x_vit)
            x_gen = gen_model.final.features(x_gen, None, force_identity_modulation=True)
            per_block[-1] = max(per_block[-1], float((x_vit - x_gen).abs().max()))
            max_abs = max(max_abs, per_block[-1], max(per_block))
    return {
        "pass": max_abs <= tolerance,
        "max_abs": max_abs,
        "per_block": per_block,
        "tolerance": tolerance,
        "batches": batches,
    }
