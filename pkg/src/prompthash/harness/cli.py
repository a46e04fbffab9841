"""Command line entry point: ``prompthash <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from ..data import generate_synthetic_dataset, load_dataset, save_dataset
from ..hashing import SUPPORTED_BITS, WEIGHT_NAMES
from ..retrieval import write_report
from .config import VARIANTS, ExperimentConfig, load_config, save_config
from .training import evaluate, load_checkpoint, retrieval_reports, save_checkpoint, train_and_evaluate

OUT_ENV = "PROMPTHASH_OUT"


def output_root(args: argparse.Namespace) -> Path:
    """``--out`` wins, then ``$PROMPTHASH_OUT``, then ``./runs``."""
    return Path(args.out or os.environ.get(OUT_ENV) or "runs")


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    config = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        config = config.with_seed(args.seed)
    if getattr(args, "k", None) is not None:
        config = replace(config, bits=args.k)
    if getattr(args, "variant", None) is not None:
        config = replace(config, variant=args.variant)
    if getattr(args, "steps", None) is not None:
        config = replace(config, steps=args.steps)
    return config


def _dataset_for(args, config):
    if getattr(args, "data", None):
        return load_dataset(args.data)
    return generate_synthetic_dataset(config.dataset)


def cmd_gen_data(args) -> int:
    config = resolve_config(args)
    path = save_dataset(generate_synthetic_dataset(config.dataset), output_root(args) / "data")
    print(path)
    return 0


def cmd_train(args) -> int:
    config = resolve_config(args)
    result = train_and_evaluate(config, _dataset_for(args, config))
    run_dir = output_root(args) / f"{config.variant}_k{config.bits}_s{config.seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(config, run_dir / "config.json")
    save_checkpoint(result.model, run_dir / "checkpoint", result.dataset.class_names)
    result.report.save(run_dir / "report.json")
    for rep in retrieval_reports(result.report):
        write_report(rep, run_dir)
    print(f"{config.variant} K={config.bits} seed={config.seed} "
          f"I2T {result.report.map('I2T'):.4f} T2I {result.report.map('T2I'):.4f} -> {run_dir}")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    config = model.config
    dataset = load_dataset(args.data) if args.data else generate_synthetic_dataset(config.dataset)
    metrics = evaluate(model, dataset, bits=args.k)
    out = output_root(args) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2))
    for per_k in metrics.values():
        for direction, rep in per_k.items():
            print(f"{direction} K={rep['K']} mAP {rep['mAP']:.4f}")
    return 0


def cmd_ablate(args) -> int:
    from .experiments import run_ablation

    config = resolve_config(args)
    bits = (args.k,) if args.k else tuple(args.bits)
    seeds = tuple(range(config.seed, config.seed + args.seeds))
    table = run_ablation(config, bits=bits, seeds=seeds, out_dir=output_root(args) / "ablation", workers=args.workers)
    for direction in ("I2T", "T2I"):
        for row in table.rows(direction):
            cells = " ".join("FAILED" if row[str(k)] is None else f"{row[str(k)]:.4f}" for k in table.bits)
            print(f"{direction} {row['variant']:14s} {cells}")
    return 0


def cmd_sweep(args) -> int:
    from .experiments import DEFAULT_SWEEP_GRIDS, sweep

    config = resolve_config(args)
    names = args.weight or list(WEIGHT_NAMES)
    grids = {n: tuple(args.grid) if args.grid else DEFAULT_SWEEP_GRIDS[n] for n in names}
    series = sweep(config, grids, out_dir=output_root(args) / "sweep", workers=args.workers)
    for name, points in series.items():
        for p in points:
            print(f"{name:6s} {p.value:<8g} I2T {p.mAP_I2T} T2I {p.mAP_T2I}")
    return 0


def cmd_gradcheck(args) -> int:
    from ..gradsuite import run_suite

    result = run_suite(seeds=args.seeds, tolerance=args.tolerance, cases=args.case or None)
    for line in result.lines():
        print(line)
    print(f"{'all passed' if result.passed else 'FAILURES'} in {result.seconds:.1f}s")
    return 0 if result.passed else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON")
    common.add_argument("--seed", type=int)
    common.add_argument("--k", type=int, choices=SUPPORTED_BITS)
    common.add_argument("--variant", choices=list(VARIANTS))
    common.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./runs)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="prompthash", description="Toy-scale prompt-aware cross-modal hashing.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write the synthetic dataset to disk")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train one variant and evaluate it")
    p.add_argument("--steps", type=int)
    p.add_argument("--data", help="dataset directory written by gen-data")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a saved checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory written by train")
    p.add_argument("--data")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="all six variants across code lengths")
    p.add_argument("--steps", type=int)
    p.add_argument("--bits", type=int, nargs="+", default=list(SUPPORTED_BITS), choices=SUPPORTED_BITS)
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", parents=[common], help="vary one loss weight at a time")
    p.add_argument("--steps", type=int)
    p.add_argument("--weight", action="append", choices=WEIGHT_NAMES)
    p.add_argument("--grid", type=float, nargs="+", help="values for every selected weight")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--case", action="append")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
