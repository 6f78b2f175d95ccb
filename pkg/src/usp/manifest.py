"""Experiment manifests: stage graph execution with content-addressed resume.

A manifest is a JSON document describing the stage graph
codec -> cache -> embedder/reference -> pretrain -> (per arm) init ->
train-gen -> eval. Every stage is stored under store/<stage>-<digest12>/
where the digest covers the resolved stage config plus all input digests, so
rerunning a manifest skips completed stages and two manifests sharing a
stage share its artifacts. Unknown config keys are hard errors.

Seeds: each stage derives its seed from the manifest's master_seed and the
stage path (see utils.derive_seed), so stages are independently reproducible.
"""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass
from pathlib import Path

import torch

from . import evaluate
from .archive import CheckpointArchive
from .cache import build_cache, read_cache
from .codec import LatentCodecConfig, load_codec, train_codec
from .data import get_normalization, load_dataset
from .diffusion import NoiseSchedule, train_generator, load_generator
from .errors import ConfigError, DigestMismatch
from .generator import Generator, GeneratorConfig, build_generator
from .mae import PRESETS, PretrainModelConfig
from .pretrain import OptimizerSpec, ScheduleSpec, run_pretrain
from .transplant import (
    adapt_vit_to_classifier,
    adapt_vit_to_generator,
    reinit_last_k_op,
    verify_transplant,
)
from .utils import derive_seed, json_digest, set_determinism, sha256_file, write_csv

MANIFEST_VERSION = 1

_TOP_KEYS = {
    "version", "name", "master_seed", "dataset", "norm", "codec", "cache",
    "embedder", "pretrain", "sft", "arms", "transplant", "train_gen", "eval",
}
_CODEC_KEYS = {"channels", "stride", "width", "kl_weight", "identity", "epochs",
               "batch_size", "lr", "recon_threshold"}
_CACHE_KEYS = {"flip"}
_EMBEDDER_KEYS = {"epochs", "batch_size", "lr"}
_PRETRAIN_KEYS = {"model", "epochs", "warmup_epochs", "batch_size", "mask_ratio",
                  "per_patch_norm", "noisy", "betas_as_printed", "peak_lr", "patch"}
_SFT_KEYS = {"epochs", "lr", "layer_decay", "label_smoothing", "weight_decay", "batch_size"}
_TRANSPLANT_KEYS = {"init_source", "reinit_last_k", "gate_bias", "include_patchconv"}
_TRAINGEN_KEYS = {"framework", "steps", "lr", "batch_size", "label_dropout",
                  "checkpoint_every", "learn_sigma", "weight_decay"}
_EVAL_KEYS = {"fd_samples", "sampler_steps", "cfg_scale", "curve_samples", "curve_steps",
              "probe", "probe_epochs", "layerwise", "class_score", "threshold"}
_ARM_KEYS = {"init_source", "transplant", "train_gen", "eval", "seed_offset"}

INIT_SOURCES = ("pretrain", "sft", "random")


def _check_keys(d: dict, allowed: set, ctx: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {ctx}: {sorted(unknown)}")


def validate_manifest(m: dict) -> None:
    _check_keys(m, _TOP_KEYS, "manifest")
    if m.get("version", MANIFEST_VERSION) != MANIFEST_VERSION:
        raise ConfigError(f"unsupported manifest version {m.get('version')}")
    for key, allowed in (
        ("codec", _CODEC_KEYS), ("cache", _CACHE_KEYS), ("embedder", _EMBEDDER_KEYS),
        ("pretrain", _PRETRAIN_KEYS), ("sft", _SFT_KEYS), ("transplant", _TRANSPLANT_KEYS),
        ("train_gen", _TRAINGEN_KEYS), ("eval", _EVAL_KEYS),
    ):
        if key in m:
            _check_keys(m[key], allowed, key)
    for arm, cfg in m.get("arms", {}).items():
        _check_keys(cfg, _ARM_KEYS, f"arms.{arm}")
        if "init_source" in cfg and cfg["init_source"] not in INIT_SOURCES:
            raise ConfigError(f"arms.{arm}.init_source must be one of {INIT_SOURCES}")


def load_manifest(path) -> dict:
    with open(path) as f:
        m = json.load(f)
    validate_manifest(m)
    return m


@dataclass
class StageResult:
    dir: Path
    outputs: dict
    skipped: bool


class StageStore:
    """Content-addressed stage directory store with resume support."""

    def __init__(self, root: Path, force: bool = False):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.force = force

    def run(self, name: str, key: dict, fn) -> StageResult:
        digest = json_digest({"stage": name, "key": key})
        stage_dir = self.root / f"{name}-{digest[:12]}"
        state_path = stage_dir / "state.json"
        if state_path.exists():
            state = json.loads(state_path.read_text())
            if state.get("key_digest") == digest and state.get("done") and not self.force:
                return StageResult(stage_dir, state["outputs"], skipped=True)
            if state.get("key_digest") != digest and not self.force:
                raise DigestMismatch(
                    f"stage dir {stage_dir.name} holds a different configuration; "
                    "pass force=True to overwrite"
                )
            shutil.rmtree(stage_dir)
        stage_dir.mkdir(parents=True, exist_ok=True)
        outputs = fn(stage_dir)
        state_path.write_text(
            json.dumps({"key_digest": digest, "outputs": outputs, "done": True}, indent=1)
        )
        return StageResult(stage_dir, outputs, skipped=False)


def _dataset_cfg(m: dict) -> dict:
    return m.get("dataset", {"name": "shapes10"})


def _merge(base: dict | None, override: dict | None) -> dict:
    out = dict(base or {})
    out.update(override or {})
    return out


def _model_config(m: dict, codec_cfg: LatentCodecConfig, image_size: int) -> PretrainModelConfig:
    p = m.get("pretrain", {})
    preset = p.get("model", "tiny")
    if preset not in PRESETS:
        raise ConfigError(f"unknown model preset {preset!r}")
    side = image_size // codec_cfg.stride
    return PretrainModelConfig.preset(
        preset,
        latent_channels=codec_cfg.channels,
        grid=(side, side),
        patch=int(p.get("patch", 2)),
        mask_ratio=float(p.get("mask_ratio", 0.75)),
        per_patch_norm=bool(p.get("per_patch_norm", True)),
        noisy=bool(p.get("noisy", False)),
    )


def run_manifest(manifest: dict | str | Path, out_dir, force: bool = False) -> dict:
    """Execute a manifest; returns (and writes) the summary."""
    if not isinstance(manifest, dict):
        manifest = load_manifest(manifest)
    else:
        validate_manifest(manifest)
    set_determinism()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    store = StageStore(out_dir / "store", force=force)
    master = int(manifest.get("master_seed", 0))
    summary: dict = {"name": manifest.get("name", "run"), "master_seed": master, "stages": {}, "arms": {}}

    dataset_cfg = _dataset_cfg(manifest)
    norm_name = manifest.get("norm", "vae_half")
    spec = get_normalization(norm_name)
    image_size = int(dataset_cfg.get("image_size", 32))

    if "codec" not in manifest:
        summary_path = out_dir / "summary.json"
        summary_path.write_text(json.dumps(summary, indent=1, sort_keys=True))
        return summary

    # ---- codec ----------------------------------------------------------
    codec_conf = dict(manifest["codec"])
    codec_train_keys = {k: codec_conf.pop(k) for k in ("epochs", "batch_size", "lr", "recon_threshold")
                        if k in codec_conf}
    codec_cfg = LatentCodecConfig.from_dict(codec_conf)

    def _codec_stage(stage_dir: Path) -> dict:
        train = load_dataset(dataset_cfg, "train")
        val = load_dataset(dataset_cfg, "val")
        arc = train_codec(
            train, val, codec_cfg, spec,
            epochs=int(codec_train_keys.get("epochs", 8)),
            batch_size=int(codec_train_keys.get("batch_size", 128)),
            lr=float(codec_train_keys.get("lr", 1e-3)),
            seed=derive_seed(master, "codec"),
            recon_threshold=float(codec_train_keys.get("recon_threshold", 0.08)),
        )
        arc.save(stage_dir / "codec.uspk")
        return {"codec": "codec.uspk", "digest": arc.digest(),
                "fingerprint": arc.meta["fingerprint"], "recon_mse": arc.meta["recon_mse"]}

    codec_res = store.run(
        "codec",
        {"codec": codec_cfg.as_dict(), "train": codec_train_keys, "dataset": dataset_cfg,
         "norm": norm_name, "seed": derive_seed(master, "codec")},
        _codec_stage,
    )
    summary["stages"]["codec"] = {**codec_res.outputs, "dir": codec_res.dir.name}
    codec_arc = CheckpointArchive.load(codec_res.dir / codec_res.outputs["codec"])
    codec, spec = load_codec(codec_arc)
    codec_digest_before = codec_arc.digest()

    # ---- caches ---------------------------------------------------------
    cache_conf = manifest.get("cache", {})
    flip = bool(cache_conf.get("flip", True))

    def _cache_stage(split: str, use_flip: bool):
        def fn(stage_dir: Path) -> dict:
            batch = load_dataset(dataset_cfg, split)
            built = build_cache(batch, codec, spec, stage_dir / "cache.uspc", flip=use_flip)
            return {"cache": "cache.uspc", "count": built.count,
                    "fingerprint": built.codec_fingerprint,
                    "digest": sha256_file(stage_dir / "cache.uspc")}
        return fn

    cache_key = {"dataset": dataset_cfg, "norm": norm_name, "codec": codec_res.outputs["digest"]}
    train_cache_res = store.run("cache-train", {**cache_key, "split": "train", "flip": flip},
                                _cache_stage("train", flip))
    val_cache_res = store.run("cache-val", {**cache_key, "split": "val", "flip": False},
                              _cache_stage("val", False))
    summary["stages"]["cache"] = {
        "train": {**train_cache_res.outputs, "dir": train_cache_res.dir.name},
        "val": {**val_cache_res.outputs, "dir": val_cache_res.dir.name},
    }
    train_cache = read_cache(train_cache_res.dir / "cache.uspc")
    val_cache = read_cache(val_cache_res.dir / "cache.uspc")

    # ---- embedder + reference stats --------------------------------------
    emb_conf = manifest.get("embedder", {})

    def _embedder_stage(stage_dir: Path) -> dict:
        train = load_dataset(dataset_cfg, "train")
        arc = evaluate.train_fixture_classifier(
            train,
            seed=derive_seed(master, "embedder"),
            epochs=int(emb_conf.get("epochs", 3)),
            batch_size=int(emb_conf.get("batch_size", 128)),
            lr=float(emb_conf.get("lr", 1e-3)),
        )
        arc.save(stage_dir / "embedder.uspk")
        net, fp = evaluate.load_embedder(arc)
        val = load_dataset(dataset_cfg, "val")
        ref = evaluate.reference_stats(val, net, fp)
        evaluate.save_ref_stats(stage_dir / "ref.usps", ref)
        return {"embedder": "embedder.uspk", "ref": "ref.usps",
                "fingerprint": fp, "train_acc": arc.meta["train_acc"]}

    emb_res = store.run(
        "embedder",
        {"dataset": dataset_cfg, "cfg": emb_conf, "seed": derive_seed(master, "embedder")},
        _embedder_stage,
    )
    summary["stages"]["embedder"] = {**emb_res.outputs, "dir": emb_res.dir.name}
    embedder_arc = CheckpointArchive.load(emb_res.dir / "embedder.uspk")
    embedder_net, embedder_fp = evaluate.load_embedder(embedder_arc)
    ref_stats = evaluate.load_ref_stats(emb_res.dir / "ref.usps")

    eval_conf = manifest.get("eval", {})

    # ---- pretrain ---------------------------------------------------------
    pretrain_arc = None
    model_cfg = _model_config(manifest, codec_cfg, image_size)
    if "pretrain" in manifest:
        p = manifest["pretrain"]
        opt_spec = OptimizerSpec(
            betas_as_printed=bool(p.get("betas_as_printed", False)),
            peak_lr=p.get("peak_lr"),
        )
        sched = ScheduleSpec(
            total_epochs=int(p.get("epochs", 100)),
            warmup_epochs=p.get("warmup_epochs"),
        )

        def _pretrain_stage(stage_dir: Path) -> dict:
            train_cache.require_fingerprint(codec_arc.meta["fingerprint"])
            arc, _ = run_pretrain(
                train_cache, model_cfg, opt_spec, sched,
                batch_size=int(p.get("batch_size", 256)),
                seed=derive_seed(master, "pretrain"),
                out_dir=stage_dir,
            )
            return {"archive": "pretrain.uspk", "digest": arc.digest(),
                    "metrics": "metrics.csv"}

        pre_res = store.run(
            "pretrain",
            {"model": model_cfg.as_dict(), "opt": opt_spec.as_dict(), "sched": sched.as_dict(),
             "batch": int(p.get("batch_size", 256)), "cache": train_cache_res.outputs["digest"],
             "seed": derive_seed(master, "pretrain")},
            _pretrain_stage,
        )
        summary["stages"]["pretrain"] = {**pre_res.outputs, "dir": pre_res.dir.name}
        pretrain_arc = CheckpointArchive.load(pre_res.dir / "pretrain.uspk")
        # frozen-codec invariant: the codec archive digest is unchanged by training
        if CheckpointArchive.load(codec_res.dir / codec_res.outputs["codec"]).digest() != codec_digest_before:
            raise DigestMismatch("codec weights changed during pretraining")

        if eval_conf.get("probe", False):
            probe = evaluate.linear_probe(
                pretrain_arc,
                *_probe_tensors(train_cache, val_cache),
                seed=derive_seed(master, "probe"),
                epochs=int(eval_conf.get("probe_epochs", 40)),
            )
            summary["stages"]["pretrain_probe"] = probe.as_dict()

    # ---- arms -------------------------------------------------------------
    arms = manifest.get("arms")
    if arms is None:
        arms = {"default": {}} if "train_gen" in manifest else {}
    for arm_name, arm_conf in arms.items():
        summary["arms"][arm_name] = _run_arm(
            manifest, arm_name, arm_conf, store, master,
            model_cfg, pretrain_arc, train_cache, val_cache,
            codec, spec, embedder_net, embedder_fp, ref_stats,
            train_cache_res.outputs["digest"],
        )

    summary_path = out_dir / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=1, sort_keys=True))
    return summary


def _probe_tensors(train_cache, val_cache):
    tr_vals, tr_labels = _unflipped(train_cache)
    va_vals, va_labels = _unflipped(val_cache)
    return tr_vals, tr_labels, va_vals, va_labels


def _unflipped(cache):
    idx = [i for i, sid in enumerate(cache.sample_ids) if not sid.endswith("~flip")]
    return cache.values[idx], cache.labels[idx]


def _run_arm(
    manifest, arm_name, arm_conf, store, master, model_cfg, pretrain_arc,
    train_cache, val_cache, codec, spec, embedder_net, embedder_fp, ref_stats,
    train_cache_digest,
) -> dict:
    out: dict = {}
    seed_offset = int(arm_conf.get("seed_offset", 0))
    arm_master = master + seed_offset
    t_conf = _merge(manifest.get("transplant"), arm_conf.get("transplant"))
    g_conf = _merge(manifest.get("train_gen"), arm_conf.get("train_gen"))
    e_conf = _merge(manifest.get("eval"), arm_conf.get("eval"))
    init_source = arm_conf.get("init_source", t_conf.get("init_source", "pretrain"))
    if init_source not in INIT_SOURCES:
        raise ConfigError(f"init_source must be one of {INIT_SOURCES}")
    if "train_gen" not in manifest and not arm_conf.get("train_gen"):
        return out

    framework = g_conf.get("framework", "dit")
    gen_cfg = GeneratorConfig(
        framework=framework,
        latent_channels=model_cfg.latent_channels,
        grid=model_cfg.grid,
        patch=model_cfg.patch,
        depth=model_cfg.depth,
        heads=model_cfg.heads,
        dim=model_cfg.dim,
        mlp_ratio=model_cfg.mlp_ratio,
        num_classes=_num_classes(train_cache),
        learn_sigma=bool(g_conf.get("learn_sigma", False)),
        gate_bias_one=bool(t_conf.get("gate_bias", 0)) if init_source != "random" else False,
    )

    # ---- init (transplant / sft / random) ---------------------------------
    if init_source == "random":
        def _init_stage(stage_dir: Path) -> dict:
            model = build_generator(gen_cfg, seed=derive_seed(arm_master, "gen-init", arm_name))
            arc = _generator_init_archive(model, gen_cfg, "random")
            arc.save(stage_dir / "geninit.uspk")
            return {"archive": "geninit.uspk", "digest": arc.digest(), "init_source": "random"}

        init_key = {"gen": gen_cfg.as_dict(), "source": "random",
                    "seed": derive_seed(arm_master, "gen-init", arm_name)}
    else:
        if pretrain_arc is None:
            raise ConfigError(f"arm {arm_name!r} needs a pretrain stage for init_source={init_source}")
        source_arc = pretrain_arc
        if init_source == "sft":
            sft_conf = manifest.get("sft", {})

            def _sft_stage(stage_dir: Path) -> dict:
                cls = adapt_vit_to_classifier(
                    pretrain_arc, _num_classes(train_cache), mode="sft_source"
                )
                recipe = evaluate.FinetuneRecipe(
                    epochs=int(sft_conf.get("epochs", 5)),
                    lr=float(sft_conf.get("lr", 5e-4)),
                    layer_decay=float(sft_conf.get("layer_decay", 0.75)),
                    label_smoothing=float(sft_conf.get("label_smoothing", 0.1)),
                    weight_decay=float(sft_conf.get("weight_decay", 0.05)),
                    batch_size=int(sft_conf.get("batch_size", 128)),
                )
                result, sft_arc = evaluate.finetune_classify(
                    cls, *_probe_tensors(train_cache, val_cache),
                    recipe=recipe, seed=derive_seed(master, "sft"),
                )
                sft_arc.save(stage_dir / "sft.uspk")
                return {"archive": "sft.uspk", "digest": sft_arc.digest(), "top1": result.top1}

            sft_res = store.run(
                "sft",
                {"pretrain": pretrain_arc.digest(), "cfg": sft_conf,
                 "seed": derive_seed(master, "sft")},
                _sft_stage,
            )
            out["sft"] = {**sft_res.outputs, "dir": sft_res.dir.name}
            source_arc = CheckpointArchive.load(sft_res.dir / "sft.uspk")

        reinit_k = int(t_conf.get("reinit_last_k", 0))
        include_patchconv = bool(t_conf.get("include_patchconv", True))

        def _init_stage(stage_dir: Path) -> dict:
            arc, report = adapt_vit_to_generator(
                source_arc, gen_cfg,
                seed=derive_seed(arm_master, "transplant", arm_name),
                include_patchconv=include_patchconv,
                reinit_last_k=reinit_k,
            )
            arc.save(stage_dir / "geninit.uspk")
            (stage_dir / "report.json").write_text(json.dumps(report.as_dict(), indent=1))
            verification = None
            if reinit_k == 0 and include_patchconv:
                verification = verify_transplant(source_arc, arc, batches=3)
            return {"archive": "geninit.uspk", "digest": arc.digest(),
                    "report": "report.json", "init_source": init_source,
                    "verify": verification}

        init_key = {"gen": gen_cfg.as_dict(), "source": source_arc.digest(),
                    "reinit_last_k": reinit_k, "include_patchconv": include_patchconv,
                    "seed": derive_seed(arm_master, "transplant", arm_name)}

    init_res = store.run(f"geninit-{arm_name}", init_key, _init_stage)
    out["init"] = {**init_res.outputs, "dir": init_res.dir.name}
    init_arc = CheckpointArchive.load(init_res.dir / "geninit.uspk")

    # ---- generator training ------------------------------------------------
    steps = int(g_conf.get("steps", 1000))

    def _traingen_stage(stage_dir: Path) -> dict:
        model = Generator(gen_cfg)
        from .archive import load_module_state

        load_module_state(model, init_arc)
        arc, _ = train_generator(
            train_cache, model, steps,
            lr=float(g_conf.get("lr", 1e-4)),
            batch_size=int(g_conf.get("batch_size", 64)),
            label_dropout=float(g_conf.get("label_dropout", 0.1)),
            seed=derive_seed(arm_master, "train-gen", arm_name),
            out_dir=stage_dir,
            checkpoint_every=int(g_conf.get("checkpoint_every", 0)),
            init_parent=init_arc.digest(),
            init_source=init_source,
            weight_decay=float(g_conf.get("weight_decay", 0.0)),
        )
        return {"archive": "generator.uspk", "digest": arc.digest(), "metrics": "metrics.csv"}

    gen_res = store.run(
        f"traingen-{arm_name}",
        {"init": init_res.outputs["digest"], "cache": train_cache_digest,
         "cfg": {k: g_conf.get(k) for k in sorted(_TRAINGEN_KEYS)},
         "seed": derive_seed(arm_master, "train-gen", arm_name)},
        _traingen_stage,
    )
    out["train_gen"] = {**gen_res.outputs, "dir": gen_res.dir.name}
    gen_arc = CheckpointArchive.load(gen_res.dir / "generator.uspk")

    # ---- eval ---------------------------------------------------------------
    def _eval_stage(stage_dir: Path) -> dict:
        results: dict = {"cfg_scale": e_conf.get("cfg_scale")}
        stats = evaluate.generation_stats(
            gen_arc, codec, spec, embedder_net, embedder_fp,
            n=int(e_conf.get("fd_samples", 1024)),
            sampler_steps=int(e_conf.get("sampler_steps", 100)),
            cfg_scale=e_conf.get("cfg_scale"),
            seed=derive_seed(arm_master, "eval-sample", arm_name),
        )
        results["fd"] = evaluate.frechet_distance(stats, ref_stats)
        if e_conf.get("class_score", True):
            from .codec import decode_latents
            from .data import denormalize_image
            from .diffusion import SamplerConfig, sample_latents

            model = load_generator(gen_arc)
            k = model.cfg.num_classes
            n_s = int(e_conf.get("fd_samples", 1024))
            labels = torch.arange(n_s, dtype=torch.int64) % k
            latents = sample_latents(
                model,
                SamplerConfig(steps=int(e_conf.get("sampler_steps", 100)),
                              cfg_scale=e_conf.get("cfg_scale"),
                              seed=derive_seed(arm_master, "eval-sample", arm_name)),
                n_s, labels, schedule=NoiseSchedule(),
                label_dropout_trained=gen_arc.meta.get("label_dropout"),
            )
            pixels = denormalize_image(decode_latents(latents, codec), spec)
            results["class_score"] = evaluate.class_score(
                evaluate.class_probs(embedder_net, pixels)
            )
        if e_conf.get("curve_samples") and int(g_conf.get("checkpoint_every", 0)):
            curve = evaluate.convergence_curve(
                [gen_res.dir], ref_stats, codec, spec, embedder_net, embedder_fp,
                n=int(e_conf.get("curve_samples", 512)),
                sampler_steps=int(e_conf.get("curve_steps", 50)),
                threshold=e_conf.get("threshold"),
                seed=derive_seed(master, "curve"),
            )
            write_csv(stage_dir / "fd_curve.csv", ("run", "step", "fd"), curve["rows"])
            results["curve"] = curve["rows"]
            results["crossings"] = curve["crossings"]
        if e_conf.get("layerwise", False):
            probe = evaluate.layerwise_probe(
                gen_arc, *_probe_tensors(train_cache, val_cache),
                seed=derive_seed(arm_master, "layerwise", arm_name),
                epochs=int(e_conf.get("probe_epochs", 40)),
            )
            results["layerwise"] = probe.as_dict()
        (stage_dir / "eval.json").write_text(json.dumps(results, indent=1, sort_keys=True))
        return results

    eval_res = store.run(
        f"eval-{arm_name}",
        {"gen": gen_res.outputs["digest"], "ref_fp": embedder_fp,
         "cfg": {k: e_conf.get(k) for k in sorted(_EVAL_KEYS)},
         "seed": derive_seed(arm_master, "eval-sample", arm_name)},
        _eval_stage,
    )
    out["eval"] = dict(eval_res.outputs)
    out["eval"]["dir"] = eval_res.dir.name
    return out


def _num_classes(cache) -> int:
    top = int(cache.labels.max().item())
    if top < 0:
        raise ConfigError("generator training needs a labeled cache")
    return top + 1


def _generator_init_archive(model: Generator, cfg: GeneratorConfig, source: str) -> CheckpointArchive:
    meta = {"generator": cfg.as_dict(), "init_source": source}
    arc = CheckpointArchive(stage="generator", meta=meta, config_digest=json_digest(meta))
    for name, t in model.state_dict().items():
        if t.is_floating_point():
            arc.put(name, t)
    return arc


# ---------------------------------------------------------------------------
# ablation grids
# ---------------------------------------------------------------------------

ABLATION_AXES = {
    "mask_ratio": ("pretrain", "mask_ratio"),
    "per_patch_norm": ("pretrain", "per_patch_norm"),
    "noisy_pretrain": ("pretrain", "noisy"),
    "image_norm": ("norm",),
    "resolution": ("dataset", "image_size"),
    "vae_choice": ("codec",),
    "reinit_last_k": ("transplant", "reinit_last_k"),
    "gate_bias": ("transplant", "gate_bias"),
    "init_source": ("__arm__", "init_source"),
}


@dataclass
class AblationGrid:
    axis: str
    values: list
    base: dict  # base manifest
    seeds: tuple[int, ...] = (0,)

    def __post_init__(self):
        if self.axis not in ABLATION_AXES:
            raise ConfigError(f"unknown ablation axis {self.axis!r}; choose from {sorted(ABLATION_AXES)}")
        validate_manifest(self.base)


def _apply_axis(manifest: dict, axis: str, value) -> dict:
    m = json.loads(json.dumps(manifest))  # deep copy
    path = ABLATION_AXES[axis]
    if path[0] == "__arm__":
        m["arms"] = {"arm": {"init_source": value}}
    elif len(path) == 1:
        m[path[0]] = value
    else:
        m.setdefault(path[0], {})[path[1]] = value
    return m


def resolved_config(manifest: dict) -> dict:
    """Canonical fully-expanded view used for the purity check (labels dropped)."""
    m = json.loads(json.dumps(manifest, sort_keys=True))
    m.pop("name", None)
    return m


def config_diff(a: dict, b: dict, prefix: str = "") -> list[str]:
    """Dotted paths whose values differ between two resolved configs."""
    keys = set(a) | set(b)
    out = []
    for k in sorted(keys):
        pa, pb = a.get(k), b.get(k)
        path = f"{prefix}{k}"
        if isinstance(pa, dict) and isinstance(pb, dict):
            out.extend(config_diff(pa, pb, prefix=path + "."))
        elif pa != pb:
            out.append(path)
    return out


def run_ablation(grid: AblationGrid, out_dir, force: bool = False) -> list[dict]:
    """One manifest run per (value, seed) grid point; emits table.csv rows with
    the probe accuracy and/or Fréchet distance of each point."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    configs = []
    for value in grid.values:
        for seed in grid.seeds:
            manifest = _apply_axis(grid.base, grid.axis, value)
            manifest["master_seed"] = int(manifest.get("master_seed", 0))
            manifest["name"] = f"{grid.axis}={value}/seed{seed}"
            if grid.axis != "init_source":
                manifest.setdefault("arms", {"arm": {}})
            for arm in manifest["arms"].values():
                arm["seed_offset"] = seed
            run_dir = out_dir / f"{grid.axis}-{json_digest({'v': value})[:8]}-s{seed}"
            summary = run_manifest(manifest, run_dir, force=force)
            row = {
                "axis": grid.axis,
                "value": json.dumps(value) if isinstance(value, (dict, list)) else value,
                "seed": seed,
                "config_digest": json_digest(resolved_config(manifest)),
            }
            arm = next(iter(summary["arms"].values()), {})
            row["fd"] = arm.get("eval", {}).get("fd", "")
            row["class_score"] = arm.get("eval", {}).get("class_score", "")
            row["probe_top1"] = summary["stages"].get("pretrain_probe", {}).get("top1", "")
            rows.append(row)
            configs.append(resolved_config(manifest))
    write_csv(out_dir / "table.csv",
              ("axis", "value", "seed", "fd", "class_score", "probe_top1", "config_digest"), rows)
    (out_dir / "configs.json").write_text(json.dumps(configs, indent=1, sort_keys=True))
    return rows
