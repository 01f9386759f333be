"""Command-line surface.

Subcommands: gen-data, train, eval, ablate, gradcheck, zeroshot. Every
command is deterministic given its config and seed; manifests record every
resolved hyperparameter so reruns are reproducible byte for byte.

Exit codes: 0 success, 1 usage/config error, 2 data/format error,
3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

from .config import RunConfig, load_run_config
from .data_io import (EmbeddedDataset, embed_dataset, generate_synthetic,
                      load_dataset, load_dataset_vocab, load_synthetic_spec)
from .errors import (ConfigError, DataFormatError, InputError, NumericError,
                     PedattrError, ShapeError)
from .pipeline import (Model, evaluate, init_model, load_trainable_weights,
                       per_attribute_accuracy, save_trainable_weights,
                       zero_shot_scores)
from .training import gradient_check, train

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pedattr",
                     description="Prompt-fused attribute recognition pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    p.add_argument("--spec", required=True, help="synthetic spec JSON file")
    p.add_argument("--out", required=True, help="output dataset directory")

    p = sub.add_parser("train", help="train fusion blocks and heads")
    p.add_argument("--config", required=True, help="run config JSON file")
    p.add_argument("--ablation", choices=["full", "no_cross_attention"],
                   help="override the configured ablation mode")

    p = sub.add_parser("eval", help="evaluate a trained weights container")
    p.add_argument("--config", required=True)
    p.add_argument("--weights", help="weights container (default: paths.weights_in)")
    p.add_argument("--data", help="dataset directory (default: paths.dataset)")
    p.add_argument("--report", help="report base path; writes <base>.json/.csv "
                                    "(default: paths.report_out)")

    p = sub.add_parser("ablate", help="train with and without cross-attention "
                                      "and compare per-attribute accuracy")
    p.add_argument("--config", required=True)
    p.add_argument("--data", help="dataset directory (default: paths.dataset)")
    p.add_argument("--report", required=True, help="output report directory")

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    p.add_argument("--config", required=True)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--corrupt-gradient", action="store_true",
                   help=argparse.SUPPRESS)  # negative-control test hook

    p = sub.add_parser("zeroshot", help="per-sample cosine alignment scores")
    p.add_argument("--config", required=True)
    p.add_argument("--weights", help="optional trained container; validated for "
                                     "compatibility (scores use frozen encoders only)")
    p.add_argument("--data", help="dataset directory (default: paths.dataset)")
    p.add_argument("--report", help="output CSV path (default: paths.report_out)")
    return parser


def _resolve(value: str | None, fallback: str, flag: str) -> str:
    resolved = value or fallback
    if not resolved:
        raise ConfigError(f"{flag} not given and no default in the config paths")
    return resolved


def _prepare(cfg: RunConfig, dataset_dir: str) -> tuple[Model, EmbeddedDataset]:
    dataset_path = Path(dataset_dir)
    if not dataset_path.is_dir():
        raise DataFormatError(f"dataset directory not found: {dataset_path}")
    dataset = load_dataset(dataset_path)
    vocab = load_dataset_vocab(dataset, cfg.paths.vocab or None)
    model = init_model(cfg.model, cfg.seed)
    embedded = embed_dataset(dataset, model.encoders, cfg.model, vocab)
    return model, embedded


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2) + "\n")


def _write_history_csv(path: Path, history: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "loss", "mA", "F1"])
        for row in history:
            writer.writerow([row["epoch"], repr(row["loss"]),
                             repr(row["mean_accuracy"]), repr(row["mean_f1"])])


def _artifact_paths(weights_out: str) -> tuple[Path, Path, Path]:
    weights_path = Path(weights_out)
    base = weights_path.with_suffix("")
    return weights_path, base.with_suffix(".manifest.json"), base.with_suffix(".history.csv")


def cmd_gen_data(args) -> int:
    spec = load_synthetic_spec(args.spec)
    dataset = generate_synthetic(spec, args.out)
    print(f"wrote {len(dataset.records)} samples, "
          f"{len(dataset.specs)} attributes to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    if args.ablation:
        cfg = replace(cfg, train=replace(cfg.train, ablation=args.ablation))
    if not cfg.paths.weights_out:
        raise ConfigError("training needs paths.weights_out in the config")
    dataset_dir = _resolve(None, cfg.paths.dataset, "paths.dataset")
    model, embedded = _prepare(cfg, dataset_dir)
    if cfg.paths.weights_in:
        load_trainable_weights(model, cfg.paths.weights_in)
    checksum = model.encoder_checksum()
    model, history = train(model, embedded, cfg.train, cfg.loss, cfg.seed)
    weights_path, manifest_path, history_path = _artifact_paths(cfg.paths.weights_out)
    weights_path.parent.mkdir(parents=True, exist_ok=True)
    save_trainable_weights(model, weights_path, cfg.train.ablation)
    _write_json(manifest_path, {
        "command": "train",
        "ablation": cfg.train.ablation,
        "encoder_checksum": checksum,
        "dataset": dataset_dir,
        "config": cfg.resolved(),
        "artifacts": {"weights": str(weights_path),
                      "history": str(history_path)},
    })
    _write_history_csv(history_path, history)
    final = history[-1] if history else {"loss": float("nan"),
                                         "mean_accuracy": float("nan"),
                                         "mean_f1": float("nan")}
    print(f"trained {cfg.train.epochs} epoch(s), final loss {final['loss']:.6f}, "
          f"mA {final['mean_accuracy']:.4f}, F1 {final['mean_f1']:.4f}")
    print(f"weights: {weights_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config)
    weights = _resolve(args.weights, cfg.paths.weights_in, "--weights")
    data_dir = _resolve(args.data, cfg.paths.dataset, "--data")
    report_base = _resolve(args.report, cfg.paths.report_out, "--report")
    model, embedded = _prepare(cfg, data_dir)
    ablation = load_trainable_weights(model, weights)
    report = evaluate(model, embedded, ablation)
    base = Path(report_base)
    if base.suffix in (".json", ".csv"):
        base = base.with_suffix("")
    base.parent.mkdir(parents=True, exist_ok=True)
    base.with_suffix(".json").write_text(report.to_json())
    base.with_suffix(".csv").write_text(report.to_csv())
    print(f"mA {report.mean_accuracy:.4f}, F1 {report.mean_f1:.4f} "
          f"over {report.column_count} binary column(s)")
    print(f"report: {base.with_suffix('.json')} / {base.with_suffix('.csv')}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_run_config(args.config)
    data_dir = _resolve(args.data, cfg.paths.dataset, "--data")
    report_dir = Path(args.report)
    report_dir.mkdir(parents=True, exist_ok=True)
    accuracies = {}
    checksum = ""
    for variant in ("no_cross_attention", "full"):
        model, embedded = _prepare(cfg, data_dir)
        checksum = model.encoder_checksum()
        variant_cfg = replace(cfg.train, ablation=variant)
        model, history = train(model, embedded, variant_cfg, cfg.loss, cfg.seed)
        accuracies[variant] = per_attribute_accuracy(model, embedded, variant)
        _write_history_csv(report_dir / f"history_{variant}.csv", history)
        save_trainable_weights(model, report_dir / f"weights_{variant}.vlmw", variant)
    names = [a.name for a in cfg.model.attributes]
    rows = []
    for j, name in enumerate(names):
        without = accuracies["no_cross_attention"][j]
        with_ca = accuracies["full"][j]
        rows.append((name, without, with_ca))
    avg_without = sum(r[1] for r in rows) / len(rows)
    avg_with = sum(r[2] for r in rows) / len(rows)
    with (report_dir / "ablation.csv").open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["attribute", "acc_no_cross_attention", "acc_full", "delta"])
        for name, without, with_ca in rows:
            writer.writerow([name, repr(without), repr(with_ca), repr(with_ca - without)])
        writer.writerow(["average", repr(avg_without), repr(avg_with),
                         repr(avg_with - avg_without)])
    _write_json(report_dir / "manifest.json", {
        "command": "ablate",
        "seed": cfg.seed,
        "variants": ["no_cross_attention", "full"],
        "encoder_checksum": checksum,
        "dataset": data_dir,
        "config": cfg.resolved(),
    })
    print(f"average accuracy without cross-attention {avg_without:.4f}, "
          f"with {avg_with:.4f} (delta {avg_with - avg_without:+.4f})")
    print(f"report: {report_dir / 'ablation.csv'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = load_run_config(args.config)
    if not cfg.model.attributes:
        raise ConfigError("gradcheck needs attributes in the model config")
    errors = gradient_check(cfg.model, cfg.loss, seed=cfg.seed,
                            ablation=cfg.train.ablation,
                            corrupt=args.corrupt_gradient)
    worst = max(errors.values())
    for name in sorted(errors):
        print(f"{name:24s} max_rel_err={errors[name]:.3e}")
    if worst < args.tolerance:
        print(f"gradient check PASSED (max {worst:.3e} < tolerance {args.tolerance:g})")
        return EXIT_OK
    print(f"gradient check FAILED (max {worst:.3e} >= tolerance {args.tolerance:g})")
    return EXIT_NUMERIC


def cmd_zeroshot(args) -> int:
    cfg = load_run_config(args.config)
    data_dir = _resolve(args.data, cfg.paths.dataset, "--data")
    report_path = Path(_resolve(args.report, cfg.paths.report_out, "--report"))
    model, embedded = _prepare(cfg, data_dir)
    if args.weights:
        load_trainable_weights(model, args.weights)
    rows = zero_shot_scores(model, embedded)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    with report_path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "attribute", "score"])
        for sample_id, attribute, score in rows:
            writer.writerow([sample_id, attribute, repr(score)])
    print(f"wrote {len(rows)} alignment scores to {report_path}")
    return EXIT_OK


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "zeroshot": cmd_zeroshot,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, InputError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except PedattrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def entrypoint() -> None:
    sys.exit(main())
