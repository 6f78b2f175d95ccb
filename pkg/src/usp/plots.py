"""Report emission: long-format CSVs plus rendered matplotlib figures.

Three kinds are supported, each reading manifest run directories (the ones
produced by run_manifest, containing summary.json):

  fd_curve          Fréchet distance vs training step for each run/arm
  layer_probe       linear-probe accuracy vs layer for each run/arm
  restoration_panel ground-truth / masked / restored image triplets
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .archive import CheckpointArchive
from .codec import load_codec
from .data import load_dataset
from .errors import ConfigError
from .mae import restore
from .pretrain import load_pretrained
from .utils import write_csv

PLOT_KINDS = ("fd_curve", "layer_probe", "restoration_panel")


def _load_summary(run_dir: Path) -> dict:
    path = run_dir / "summary.json"
    if not path.exists():
        raise ConfigError(f"{run_dir} has no summary.json (not a manifest run directory)")
    return json.loads(path.read_text())


def emit_plotdata(
    run_dirs: list[str | Path],
    kind: str,
    out_dir: str | Path,
    threshold: float | None = None,
    n_images: int = 4,
    mask_ratio: float = 0.75,
    seed: int = 0,
) -> dict:
    if kind not in PLOT_KINDS:
        raise ConfigError(f"unknown plot kind {kind!r}; choose from {PLOT_KINDS}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    run_dirs = [Path(d) for d in run_dirs]
    if kind == "fd_curve":
        return _fd_curve(run_dirs, out_dir, threshold)
    if kind == "layer_probe":
        return _layer_probe(run_dirs, out_dir)
    return _restoration_panel(run_dirs, out_dir, n_images, mask_ratio, seed)


def _fd_curve(run_dirs: list[Path], out_dir: Path, threshold: float | None) -> dict:
    rows = []
    for run_dir in run_dirs:
        summary = _load_summary(run_dir)
        for arm_name, arm in summary.get("arms", {}).items():
            curve = (arm.get("eval") or {}).get("curve") or []
            label = f"{run_dir.name}/{arm_name}" if len(run_dirs) > 1 else arm_name
            for point in curve:
                rows.append({"run": label, "step": point["step"], "fd": point["fd"]})
    if not rows:
        raise ConfigError("no convergence curves found; was eval.curve_samples set?")
    csv_path = out_dir / "fd_curve.csv"
    write_csv(csv_path, ("run", "step", "fd"), rows)
    fig, ax = plt.subplots(figsize=(6, 4))
    for label in dict.fromkeys(r["run"] for r in rows):
        pts = [(r["step"], r["fd"]) for r in rows if r["run"] == label]
        ax.plot(*zip(*sorted(pts)), marker="o", label=label)
    if threshold is not None:
        ax.axhline(threshold, color="gray", linestyle="--", linewidth=1)
    ax.set_xlabel("training step")
    ax.set_ylabel("Fréchet distance")
    ax.legend()
    fig.tight_layout()
    png_path = out_dir / "fd_curve.png"
    fig.savefig(png_path, dpi=150)
    plt.close(fig)
    return {"csv": str(csv_path), "png": str(png_path), "rows": len(rows)}


def _layer_probe(run_dirs: list[Path], out_dir: Path) -> dict:
    rows = []
    for run_dir in run_dirs:
        summary = _load_summary(run_dir)
        probe = summary["stages"].get("pretrain_probe")
        if probe and probe.get("per_layer"):
            for layer, acc in sorted(probe["per_layer"].items(), key=lambda kv: int(kv[0])):
                rows.append({"run": f"{run_dir.name}/pretrain", "layer": int(layer), "top1": acc})
        for arm_name, arm in summary.get("arms", {}).items():
            layerwise = (arm.get("eval") or {}).get("layerwise")
            if layerwise:
                for layer, acc in sorted(layerwise["per_layer"].items(), key=lambda kv: int(kv[0])):
                    rows.append(
                        {"run": f"{run_dir.name}/{arm_name}", "layer": int(layer), "top1": acc}
                    )
    if not rows:
        raise ConfigError("no layerwise probe results found; was eval.layerwise set?")
    csv_path = out_dir / "layer_probe.csv"
    write_csv(csv_path, ("run", "layer", "top1"), rows)
    fig, ax = plt.subplots(figsize=(6, 4))
    for label in dict.fromkeys(r["run"] for r in rows):
        pts = [(r["layer"], r["top1"]) for r in rows if r["run"] == label]
        ax.plot(*zip(*sorted(pts)), marker="s", label=label)
    ax.set_xlabel("layer")
    ax.set_ylabel("linear probe top-1")
    ax.legend()
    fig.tight_layout()
    png_path = out_dir / "layer_probe.png"
    fig.savefig(png_path, dpi=150)
    plt.close(fig)
    return {"csv": str(csv_path), "png": str(png_path), "rows": len(rows)}


def _to_image(t) -> np.ndarray:
    return np.clip(t.permute(1, 2, 0).numpy(), 0.0, 1.0)


def _restoration_panel(
    run_dirs: list[Path], out_dir: Path, n_images: int, mask_ratio: float, seed: int
) -> dict:
    if len(run_dirs) != 1:
        raise ConfigError("restoration_panel takes exactly one manifest run directory")
    run_dir = run_dirs[0]
    summary = _load_summary(run_dir)
    if "pretrain" not in summary["stages"]:
        raise ConfigError("run has no pretrain stage to restore with")
    store = run_dir / "store"
    codec_arc = CheckpointArchive.load(
        store / summary["stages"]["codec"]["dir"] / summary["stages"]["codec"]["codec"]
    )
    codec, spec = load_codec(codec_arc)
    pre_arc = CheckpointArchive.load(
        store / summary["stages"]["pretrain"]["dir"] / summary["stages"]["pretrain"]["archive"]
    )
    model = load_pretrained(pre_arc)
    manifest = json.loads((run_dir / "manifest.json").read_text())
    batch = load_dataset(manifest.get("dataset", {"name": "shapes10"}), "val")
    batch.pixels = batch.pixels[:n_images]
    batch.labels = batch.labels[:n_images] if batch.labels is not None else None
    result = restore(batch, model, codec, spec, mask_ratio, seed=seed)

    from PIL import Image

    written = []
    for i in range(n_images):
        for tag, tensor in (("gt", result.original), ("masked", result.masked),
                            ("restored", result.restored)):
            path = out_dir / f"restore_{i:02d}_{tag}.png"
            Image.fromarray((_to_image(tensor[i]) * 255).astype(np.uint8)).save(path)
            written.append(str(path))
    fig, axes = plt.subplots(n_images, 3, figsize=(6, 2 * n_images), squeeze=False)
    for i in range(n_images):
        for j, (tag, tensor) in enumerate(
            (("ground truth", result.original), ("masked", result.masked),
             ("restored", result.restored))
        ):
            axes[i][j].imshow(_to_image(tensor[i]))
            axes[i][j].set_axis_off()
            if i == 0:
                axes[i][j].set_title(tag, fontsize=9)
    fig.tight_layout()
    panel_path = out_dir / "restoration_panel.png"
    fig.savefig(panel_path, dpi=150)
    plt.close(fig)
    meta_path = out_dir / "restoration_meta.json"
    meta_path.write_text(json.dumps(result.metadata, indent=1))
    return {"panel": str(panel_path), "images": written, "meta": str(meta_path)}
