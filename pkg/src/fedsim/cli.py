"""Command-line entry points: train, eval, gradcam, synth, inspect-checkpoint.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error,
3 checkpoint error. Every command is deterministic under a fixed seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .config import RunConfig, load_config
from .data import (DatasetManifest, LabeledExample, AugmentConfig, augment,
                   load_directory, load_image, stratified_split, synth_dataset,
                   write_directory)
from .errors import CheckpointError, ConfigError, DataError
from .federation import (LoraState, evaluate_split, load_checkpoint,
                         run_federation, save_checkpoint, serialize_lora,
                         write_history)
from .gradcam import export_overlay, gradcam_pp
from .model import DualScaleTransformer
from .tensor import Tensor


def _load_dataset(cfg: RunConfig) -> tuple[list[LabeledExample], DatasetManifest]:
    if cfg.synthetic:
        return synth_dataset(cfg.synth_classes, cfg.synth_per_class,
                             cfg.model.image_size, cfg.seed, cfg.fractions)
    examples, class_names = load_directory(cfg.dataset_path)
    manifest = stratified_split(examples, cfg.fractions, cfg.seed, class_names)
    return examples, manifest


def _restore_model(cfg: RunConfig, checkpoint_path: str) -> DualScaleTransformer:
    state = load_checkpoint(checkpoint_path)
    model = DualScaleTransformer(cfg.model, cfg.seed)
    if state.fingerprint != model.fingerprint():
        raise CheckpointError(
            f"checkpoint fingerprint does not match the configured model "
            f"(checkpoint {state.fingerprint.hex()[:16]}, "
            f"config {model.fingerprint().hex()[:16]})")
    model.load_lora_state(state.adapters)
    return model


def _config_overrides(args: argparse.Namespace) -> dict:
    overrides = {}
    for flag, field in (("seed", "seed"), ("output", "output_dir"),
                        ("dataset", "dataset_path"), ("rounds", "rounds"),
                        ("clients", "clients"), ("local_epochs", "local_epochs"),
                        ("batch_size", "batch_size"), ("lr", "lr")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[field] = value
    if getattr(args, "synthetic", False):
        overrides["synthetic"] = True
    return overrides


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, _config_overrides(args))
    examples, manifest = _load_dataset(cfg)
    os.makedirs(cfg.output_dir, exist_ok=True)

    result = run_federation(cfg, examples, manifest)

    manifest.save(os.path.join(cfg.output_dir, "manifest.json"))
    save_checkpoint(result.state, os.path.join(cfg.output_dir, "checkpoint.flra"))
    write_history(result.records, os.path.join(cfg.output_dir, "history.jsonl"))
    report = evaluate_split(result.model, examples, manifest, "test", cfg.batch_size)
    report.save(os.path.join(cfg.output_dir, "report.json"))
    with open(os.path.join(cfg.output_dir, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(cfg.canonical())

    last = result.records[-1]
    print(f"rounds run: {len(result.records)} (best {result.best_round}, "
          f"val loss {result.best_val_loss:.4f})")
    print(f"final val acc: {last.val_acc:.4f}")
    print(f"test macro F1: {report.f1_macro:.4f}  auc: {report.auc_macro:.4f}")
    print(f"artifacts in {cfg.output_dir}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, _config_overrides(args))
    examples, manifest = _load_dataset(cfg)
    model = _restore_model(cfg, args.checkpoint)
    report = evaluate_split(model, examples, manifest, args.split, cfg.batch_size)
    out = args.report or os.path.join(os.path.dirname(args.checkpoint) or ".",
                                      f"report_{args.split}.json")
    report.save(out)
    print(f"{args.split}: loss {report.mean_loss:.4f} acc {report.accuracy:.4f} "
          f"macro F1 {report.f1_macro:.4f} auc {report.auc_macro:.4f}")
    print(f"report written to {out}")
    return 0


def cmd_gradcam(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, _config_overrides(args))
    model = _restore_model(cfg, args.checkpoint)
    raw = load_image(args.image)
    if raw.shape[0] != cfg.model.channels:
        raise ConfigError(f"model expects {cfg.model.channels}-channel input, "
                          f"image has {raw.shape[0]}")
    _, manifest = _load_dataset(cfg)  # normalization stats must match training
    aug = AugmentConfig.evaluation(manifest, cfg.model.image_size)
    prepared = augment(LabeledExample(raw, 0, args.image), aug)
    smap = gradcam_pp(model, prepared.image, args.target_class, args.layer)
    display = augment(LabeledExample(raw, 0, args.image),
                      AugmentConfig(resize=cfg.model.image_size, flip_prob=0.0,
                                    rotation_degrees=0.0,
                                    mean=(0.0,) * cfg.model.channels,
                                    std=(1.0,) * cfg.model.channels))
    export_overlay(smap, display.image, args.output)
    note = " (all-zero gradients)" if smap.all_zero else ""
    print(f"overlay written to {args.output}{note}")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    examples, manifest = synth_dataset(args.classes, args.per_class,
                                       args.image_size, args.seed)
    os.makedirs(args.output, exist_ok=True)
    write_directory(examples, manifest.class_names, args.output)
    manifest.save(os.path.join(args.output, "manifest.json"))
    print(f"{len(examples)} images across {args.classes} classes in {args.output}")
    return 0


def cmd_inspect(args: argparse.Namespace) -> int:
    state = load_checkpoint(args.checkpoint)
    blob_len = len(serialize_lora(state))
    print(f"fingerprint: {state.fingerprint.hex()}")
    print(f"adapters: {len(state.adapters)}")
    for path in sorted(state.adapters):
        a, b = state.adapters[path]
        print(f"  {path}: A {a.shape[0]}x{a.shape[1]}, B {b.shape[0]}x{b.shape[1]}")
    print(f"trainable elements: {state.num_parameters()}")
    print(f"serialized size: {blob_len} bytes")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedsim",
        description="Federated LoRA training simulator for a dual-scale "
                    "image transformer.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, checkpoint: bool = False) -> None:
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--output")
        p.add_argument("--dataset", help="directory of class-named image folders")
        p.add_argument("--synthetic", action="store_true",
                       help="generate the synthetic dataset instead of loading one")
        if checkpoint:
            p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("train", help="run federated training")
    common(p)
    p.add_argument("--rounds", type=int)
    p.add_argument("--clients", type=int)
    p.add_argument("--local-epochs", dest="local_epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    common(p, checkpoint=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--report", help="output JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcam", help="write a saliency overlay PNG")
    common(p, checkpoint=True)
    p.add_argument("--image", required=True)
    p.add_argument("--target-class", dest="target_class", type=int, required=True)
    p.add_argument("--layer", type=int, default=-1)
    p.set_defaults(func=cmd_gradcam)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p.add_argument("--classes", type=int, default=7)
    p.add_argument("--per-class", dest="per_class", type=int, default=20)
    p.add_argument("--image-size", dest="image_size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("inspect-checkpoint", help="print checkpoint contents")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - single CLI failure funnel
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
