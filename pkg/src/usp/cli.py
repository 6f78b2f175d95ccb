"""Command-line interface.

Verbs: train-codec, cache, pretrain, transplant, train-gen, sample, eval,
probe, finetune, curves, ablate, manifest. Exit codes: 0 ok, 2 config error,
3 numeric failure, 4 digest/fingerprint mismatch.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import torch

from . import evaluate
from .archive import CheckpointArchive, load_module_state
from .cache import build_cache, read_cache, write_cache
from .codec import LatentCodecConfig, decode_latents, encode, load_codec, train_codec
from .data import denormalize_image, get_normalization, load_dataset
from .diffusion import (
    NoiseSchedule,
    SamplerConfig,
    load_generator,
    sample_latents,
    train_generator,
)
from .errors import ConfigError, DigestMismatch, UspError
from .generator import Generator, GeneratorConfig, build_generator
from .manifest import AblationGrid, load_manifest, run_ablation, run_manifest
from .mae import PretrainModelConfig
from .pretrain import OptimizerSpec, ScheduleSpec, load_pretrained, run_pretrain
from .plots import PLOT_KINDS, emit_plotdata
from .transplant import (
    adapt_vit_to_classifier,
    adapt_vit_to_generator,
    reinit_last_k_op,
    verify_transplant,
)
from .utils import derive_seed, set_determinism


def _dataset_cfg(arg: str) -> dict:
    if arg.endswith(".json"):
        with open(arg) as f:
            return json.load(f)
    if arg == "shapes10":
        return {"name": "shapes10"}
    raise ConfigError(f"--dataset takes 'shapes10' or a JSON config path, got {arg!r}")


def _load_json(path: str) -> dict:
    with open(path) as f:
        return json.load(f)


def _onoff(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def _print(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train_codec(args) -> None:
    cfg = LatentCodecConfig.from_dict(_load_json(args.codec_config)) if args.codec_config else LatentCodecConfig()
    ds = _dataset_cfg(args.dataset)
    train = load_dataset(ds, "train")
    val = load_dataset(ds, "val")
    arc = train_codec(
        train, val, cfg, get_normalization(args.norm),
        epochs=args.epochs, seed=args.seed, recon_threshold=args.recon_threshold,
    )
    arc.save(args.out)
    _print({"out": args.out, "digest": arc.digest(), "recon_mse": arc.meta["recon_mse"]})


def cmd_cache(args) -> None:
    codec_arc = CheckpointArchive.load(args.codec)
    codec, spec = load_codec(codec_arc)
    if args.norm and args.norm != spec.name:
        raise DigestMismatch(
            f"requested normalization {args.norm!r} but the codec was trained with {spec.name!r}"
        )
    batch = load_dataset(_dataset_cfg(args.dataset), args.split)
    cache = build_cache(batch, codec, spec, args.out, flip=not args.no_flip)
    _print({"out": args.out, "count": cache.count, "fingerprint": cache.codec_fingerprint})


def cmd_pretrain(args) -> None:
    set_determinism()
    cache = read_cache(args.cache)
    if args.codec:
        codec_arc = CheckpointArchive.load(args.codec)
        cache.require_fingerprint(codec_arc.meta["fingerprint"])
    c, h, w = cache.shape
    model_cfg = PretrainModelConfig.preset(
        args.model,
        latent_channels=c,
        grid=(h, w),
        patch=args.patch,
        mask_ratio=args.mask_ratio,
        per_patch_norm=args.per_patch_norm,
        noisy=args.noisy_pretrain,
    )
    opt = OptimizerSpec(betas_as_printed=args.betas_as_printed, peak_lr=args.peak_lr)
    sched = ScheduleSpec(total_epochs=args.epochs, warmup_epochs=args.warmup_epochs)
    arc, rows = run_pretrain(
        cache, model_cfg, opt, sched,
        batch_size=args.batch, seed=args.seed, out_dir=args.out,
    )
    _print({"out": str(Path(args.out) / "pretrain.uspk"), "digest": arc.digest(),
            "final_loss": rows[-1]["loss"]})


def cmd_transplant(args) -> None:
    src = CheckpointArchive.load(args.src)
    if args.to == "classifier":
        arc = adapt_vit_to_classifier(src, args.num_classes, mode=args.mode)
        arc.save(args.out)
        _print({"out": args.out, "digest": arc.digest()})
        return
    overrides = _load_json(args.dst_config) if args.dst_config else {}
    model_meta = src.meta["model"]
    gen_cfg = GeneratorConfig.from_dict(
        {
            "framework": overrides.get("framework", args.framework),
            "latent_channels": model_meta["latent_channels"],
            "grid": model_meta["grid"],
            "patch": model_meta["patch"],
            "depth": model_meta["depth"],
            "heads": model_meta["heads"],
            "dim": model_meta["dim"],
            "mlp_ratio": model_meta["mlp_ratio"],
            "num_classes": overrides.get("num_classes", args.num_classes),
            "learn_sigma": overrides.get("learn_sigma", False),
            "gate_bias_one": bool(args.gate_bias),
        }
    )
    arc, report = adapt_vit_to_generator(
        src, gen_cfg, seed=args.seed,
        include_patchconv=not args.no_patchconv,
        reinit_last_k=args.reinit_last_k,
    )
    arc.save(args.out)
    if args.report:
        Path(args.report).write_text(json.dumps(report.as_dict(), indent=1))
    verification = verify_transplant(src, arc, batches=3) if args.reinit_last_k == 0 and not args.no_patchconv else None
    _print({"out": args.out, "digest": arc.digest(),
            "mapped": len(report.mapped), "interpolated": len(report.interpolated),
            "reinitialized": len(report.reinitialized), "dropped": len(report.dropped),
            "verify": verification})


def cmd_train_gen(args) -> None:
    set_determinism()
    cache = read_cache(args.cache)
    c, h, w = cache.shape
    if args.init == "random":
        overrides = _load_json(args.dst_config) if args.dst_config else {}
        gen_cfg = GeneratorConfig.from_dict(
            {
                "framework": args.framework,
                "latent_channels": c,
                "grid": [h, w],
                "num_classes": int(cache.labels.max()) + 1,
                **overrides,
            }
        )
        model = build_generator(gen_cfg, seed=derive_seed(args.seed, "gen-init"))
        init_parent, init_source = "", "random"
    else:
        init_arc = CheckpointArchive.load(args.init)
        gen_cfg = GeneratorConfig.from_dict(init_arc.meta["generator"])
        if gen_cfg.framework != args.framework:
            raise ConfigError(
                f"checkpoint is a {gen_cfg.framework} generator, asked for {args.framework}"
            )
        model = Generator(gen_cfg)
        load_module_state(model, init_arc)
        init_parent, init_source = init_arc.digest(), init_arc.meta.get("init_source", "pretrain")
    arc, rows = train_generator(
        cache, model, args.steps,
        lr=args.lr, batch_size=args.batch, label_dropout=args.label_dropout,
        seed=args.seed, out_dir=args.out, checkpoint_every=args.checkpoint_every,
        init_parent=init_parent, init_source=init_source,
    )
    _print({"out": str(Path(args.out) / "generator.uspk"), "digest": arc.digest(),
            "final_loss": rows[-1]["loss"] if rows else None})


def cmd_sample(args) -> None:
    set_determinism()
    arc = CheckpointArchive.load(args.ckpt)
    model = load_generator(arc)
    k = model.cfg.num_classes
    labels = torch.arange(args.n, dtype=torch.int64) % k
    sampler = SamplerConfig(steps=args.steps, cfg_scale=args.cfg, seed=args.seed)
    latents = sample_latents(
        model, sampler, args.n, labels,
        schedule=NoiseSchedule(), label_dropout_trained=arc.meta.get("label_dropout"),
    )
    write_cache(
        args.out, arc.meta.get("cache_fingerprint", ""), latents, labels,
        [f"{i:06d}" for i in range(args.n)],
    )
    _print({"out": args.out, "n": args.n, "steps": args.steps, "cfg": args.cfg})


def _load_samples_pixels(samples_path: str, codec_path: str):
    samples = read_cache(samples_path)
    codec_arc = CheckpointArchive.load(codec_path)
    codec, spec = load_codec(codec_arc)
    if samples.codec_fingerprint and samples.codec_fingerprint != codec_arc.meta["fingerprint"]:
        raise DigestMismatch("samples were generated against a different codec")
    return denormalize_image(decode_latents(samples.values, codec), spec), samples


def cmd_eval(args) -> None:
    if args.eval_cmd == "train-embedder":
        train = load_dataset(_dataset_cfg(args.dataset), "train")
        arc = evaluate.train_fixture_classifier(train, seed=args.seed, epochs=args.epochs)
        arc.save(args.out)
        _print({"out": args.out, "fingerprint": arc.meta["fingerprint"],
                "train_acc": arc.meta["train_acc"]})
        return
    net, fp = evaluate.load_embedder(CheckpointArchive.load(args.embedder))
    if args.eval_cmd == "make-ref":
        batch = load_dataset(_dataset_cfg(args.dataset), args.split)
        stats = evaluate.reference_stats(batch, net, fp)
        evaluate.save_ref_stats(args.out, stats)
        _print({"out": args.out, "n": stats.n, "d": int(stats.mean.size)})
        return
    pixels, _ = _load_samples_pixels(args.samples, args.codec)
    if args.eval_cmd == "fd":
        ref = evaluate.load_ref_stats(args.ref)
        stats = evaluate.compute_stats(evaluate.embed_pixels(net, pixels), fp)
        _print({"fd": evaluate.frechet_distance(stats, ref), "n": stats.n})
    elif args.eval_cmd == "is":
        score = evaluate.class_score(evaluate.class_probs(net, pixels))
        _print({"class_score": score, "n": int(pixels.shape[0])})


def _latents_for_probe(args):
    codec_arc = CheckpointArchive.load(args.codec)
    codec, spec = load_codec(codec_arc)
    ds = _dataset_cfg(args.dataset)
    train = load_dataset(ds, "train")
    val = load_dataset(ds, "val")
    lt = encode(train, codec, spec).values
    lv = encode(val, codec, spec).values
    return lt, train.labels, lv, val.labels


def cmd_probe(args) -> None:
    set_determinism()
    arc = CheckpointArchive.load(args.ckpt)
    tensors = _latents_for_probe(args)
    if args.layerwise:
        result = evaluate.layerwise_probe(arc, *tensors, seed=args.seed, epochs=args.epochs)
    else:
        result = evaluate.linear_probe(
            arc, *tensors, layer=args.layer, seed=args.seed,
            epochs=args.epochs, optimizer=args.optimizer,
        )
    _print(result.as_dict())


def cmd_finetune(args) -> None:
    set_determinism()
    arc = CheckpointArchive.load(args.ckpt)
    if arc.stage == "pretrain":
        arc = adapt_vit_to_classifier(arc, args.num_classes, mode="finetune")
    recipe = evaluate.FinetuneRecipe(epochs=args.epochs, lr=args.lr, layer_decay=args.layer_decay)
    result, out_arc = evaluate.finetune_classify(arc, *_latents_for_probe(args),
                                                 recipe=recipe, seed=args.seed)
    out_arc.save(args.out)
    _print({"out": args.out, "top1": result.top1})


def cmd_curves(args) -> None:
    result = emit_plotdata(
        args.runs, args.kind, args.out,
        threshold=args.threshold, n_images=args.n_images,
        mask_ratio=args.mask_ratio, seed=args.seed,
    )
    _print(result)


def _parse_values(raw: str) -> list:
    values = []
    for item in raw.split(","):
        item = item.strip()
        try:
            values.append(json.loads(item))
        except json.JSONDecodeError:
            values.append(item)
    return values


def cmd_ablate(args) -> None:
    grid = AblationGrid(
        axis=args.axis,
        values=_parse_values(args.values),
        base=load_manifest(args.manifest),
        seeds=tuple(int(s) for s in args.seeds.split(",")),
    )
    rows = run_ablation(grid, args.out, force=args.force)
    _print({"rows": rows, "table": str(Path(args.out) / "table.csv")})


def cmd_manifest(args) -> None:
    summary = run_manifest(load_manifest(args.file), args.out, force=args.force)
    _print(summary)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="usp", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)

    sp = sub.add_parser("train-codec", help="train and freeze the latent codec")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--codec-config", default=None)
    sp.add_argument("--norm", default="vae_half", choices=("vae_half", "imagenet"))
    sp.add_argument("--out", required=True)
    sp.add_argument("--epochs", type=int, default=8)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--recon-threshold", type=float, default=0.08)
    sp.set_defaults(fn=cmd_train_codec)

    sp = sub.add_parser("cache", help="build a latent cache with a frozen codec")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--codec", required=True)
    sp.add_argument("--norm", default=None, choices=(None, "vae_half", "imagenet"))
    sp.add_argument("--out", required=True)
    sp.add_argument("--split", default="train", choices=("train", "val", "test"))
    sp.add_argument("--no-flip", action="store_true")
    sp.set_defaults(fn=cmd_cache)

    sp = sub.add_parser("pretrain", help="masked latent pretraining over a cache")
    sp.add_argument("--cache", required=True)
    sp.add_argument("--codec", default=None, help="verify the cache fingerprint")
    sp.add_argument("--model", default="tiny", choices=("tiny", "base", "large", "xl"))
    sp.add_argument("--epochs", type=int, default=100)
    sp.add_argument("--warmup-epochs", type=float, default=None)
    sp.add_argument("--mask-ratio", type=float, default=0.75)
    sp.add_argument("--per-patch-norm", type=_onoff, default=True)
    sp.add_argument("--noisy-pretrain", type=_onoff, default=False)
    sp.add_argument("--batch", type=int, default=256)
    sp.add_argument("--patch", type=int, default=2)
    sp.add_argument("--peak-lr", type=float, default=None)
    sp.add_argument("--betas-as-printed", action="store_true",
                    help="use the literal (0.95, 0.9) beta ordering")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_pretrain)

    sp = sub.add_parser("transplant", help="adapt a pretrained trunk to a new layout")
    sp.add_argument("--src", required=True)
    sp.add_argument("--to", default="generator", choices=("generator", "classifier"))
    sp.add_argument("--dst-config", default=None)
    sp.add_argument("--framework", default="dit", choices=("dit", "sit"))
    sp.add_argument("--num-classes", type=int, default=10)
    sp.add_argument("--mode", default="finetune", choices=("linear_probe", "finetune", "sft_source"))
    sp.add_argument("--reinit-last-k", type=int, default=0)
    sp.add_argument("--gate-bias", type=int, default=0, choices=(0, 1))
    sp.add_argument("--no-patchconv", action="store_true",
                    help="leave the patch projection randomly initialized")
    sp.add_argument("--report", default=None)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_transplant)

    sp = sub.add_parser("train-gen", help="train a generator over cached latents")
    sp.add_argument("--init", required=True, help="init archive path or 'random'")
    sp.add_argument("--framework", default="dit", choices=("dit", "sit"))
    sp.add_argument("--dst-config", default=None)
    sp.add_argument("--cache", required=True)
    sp.add_argument("--steps", type=int, default=1000)
    sp.add_argument("--lr", type=float, default=1e-4)
    sp.add_argument("--batch", type=int, default=64)
    sp.add_argument("--label-dropout", type=float, default=0.1)
    sp.add_argument("--checkpoint-every", type=int, default=0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_train_gen)

    sp = sub.add_parser("sample", help="draw samples from a trained generator")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--n", type=int, default=64)
    sp.add_argument("--cfg", type=float, default=None)
    sp.add_argument("--steps", type=int, default=250)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_sample)

    sp = sub.add_parser("eval", help="generation metrics")
    esub = sp.add_subparsers(dest="eval_cmd", required=True)
    e = esub.add_parser("train-embedder")
    e.add_argument("--dataset", required=True)
    e.add_argument("--epochs", type=int, default=3)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e = esub.add_parser("make-ref")
    e.add_argument("--dataset", required=True)
    e.add_argument("--split", default="val")
    e.add_argument("--embedder", required=True)
    e.add_argument("--out", required=True)
    e = esub.add_parser("fd")
    e.add_argument("--samples", required=True)
    e.add_argument("--ref", required=True)
    e.add_argument("--embedder", required=True)
    e.add_argument("--codec", required=True)
    e = esub.add_parser("is")
    e.add_argument("--samples", required=True)
    e.add_argument("--embedder", required=True)
    e.add_argument("--codec", required=True)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("probe", help="linear probe of a frozen trunk")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--codec", required=True)
    sp.add_argument("--layerwise", action="store_true")
    sp.add_argument("--layer", type=int, default=None)
    sp.add_argument("--optimizer", default="sgd", choices=("sgd", "lars"))
    sp.add_argument("--epochs", type=int, default=40)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_probe)

    sp = sub.add_parser("finetune", help="full fine-tune of a classifier")
    sp.add_argument("--ckpt", required=True, help="classifier or pretrain archive")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--codec", required=True)
    sp.add_argument("--num-classes", type=int, default=10)
    sp.add_argument("--epochs", type=int, default=5)
    sp.add_argument("--lr", type=float, default=5e-4)
    sp.add_argument("--layer-decay", type=float, default=0.75)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_finetune)

    sp = sub.add_parser("curves", help="emit report CSVs and figures")
    sp.add_argument("--runs", nargs="+", required=True)
    sp.add_argument("--kind", default="fd_curve", choices=PLOT_KINDS)
    sp.add_argument("--threshold", type=float, default=None)
    sp.add_argument("--n-images", type=int, default=4)
    sp.add_argument("--mask-ratio", type=float, default=0.75)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_curves)

    sp = sub.add_parser("ablate", help="run a one-axis ablation grid")
    sp.add_argument("--axis", required=True)
    sp.add_argument("--values", required=True, help="comma-separated values")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--seeds", default="0")
    sp.add_argument("--force", action="store_true")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("manifest", help="run an experiment manifest")
    sp.add_argument("--file", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(fn=cmd_manifest)

    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.fn(args)
    except UspError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
