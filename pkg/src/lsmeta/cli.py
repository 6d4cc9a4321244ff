"""Command-line front end.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigError, DataError, DivergenceError, LsmError, PipelineError

log = logging.getLogger("lsmeta")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 2, 3, 4

STAGE_COMMANDS = ("segment", "pretrain", "metatrain", "adapt", "predict", "evaluate")


def _k_shot(text):
    if text == "half":
        return text
    try:
        k = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError("k-shot must be a positive integer or 'half'") from None
    if k < 1:
        raise argparse.ArgumentTypeError("k-shot must be >= 1")
    return k


def _config_args(p):
    p.add_argument("--config", required=True, help="pipeline config JSON")
    p.add_argument("--output-dir", help="override output_dir")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--k-shot", type=_k_shot, help="support size per task (integer or 'half')")
    p.add_argument("--mode", choices=["A", "B", "C", "D"], help="train/test region split")
    p.add_argument("--n-blocks", type=int, help="number of SLIC blocks")
    p.add_argument("--meta-epochs", type=int, help="meta-training epochs")
    p.add_argument("--meta-lr", type=float, help="Adam learning rate of the meta-update")
    p.add_argument("--grad-mode", choices=["second_order", "first_order"])
    p.add_argument("--weighting", choices=["softmax", "uniform"])
    p.add_argument("--resume", action="store_true", help="skip stages whose outputs are up to date")


def _overrides(args):
    return {
        "output_dir": args.output_dir,
        "seed": args.seed,
        "k_shot": args.k_shot,
        "mode": args.mode,
        "slic.n_blocks": args.n_blocks,
        "meta.meta_epochs": args.meta_epochs,
        "meta.meta_lr": args.meta_lr,
        "meta.grad_mode": args.grad_mode,
        "meta.weighting": args.weighting,
    }


def build_parser():
    parser = argparse.ArgumentParser(prog="lsmeta", description="Block-wise meta-learned susceptibility mapping.")
    parser.add_argument("--threads", type=int, default=1, help="worker processes for independent repeats")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic study region")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--spec", help="JSON file with synthetic spec fields")
    p.add_argument("--rows", type=int)
    p.add_argument("--cols", type=int)
    p.add_argument("--bands", type=int, dest="n_bands")
    p.add_argument("--positives", type=int, dest="n_positive")
    p.add_argument("--negatives", type=int, dest="n_negative")
    p.add_argument("--noise", type=float, dest="label_noise", help="fraction of labels to flip")
    p.add_argument("--seed", type=int)
    p.add_argument("--write-config", help="also write a pipeline config for this region to this path")

    for name in STAGE_COMMANDS:
        _config_args(sub.add_parser(name, help=f"run the {name} stage"))
    _config_args(sub.add_parser("pipeline", help="run every stage in order"))

    p = sub.add_parser("experiment", help="repeated train/test experiment")
    _config_args(p)
    p.add_argument("--repeats", type=int)
    p.add_argument("--method", choices=["meta", "global_mlp", "unadapted"], default="meta")

    p = sub.add_parser("benchmark", help="synthetic few-shot benchmark")
    p.add_argument("--out", help="directory for the CSV summaries")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--noise-repeats", type=int, default=10)
    p.add_argument("--meta-epochs", type=int, default=500)
    p.add_argument("--meta-lr", type=float)
    return parser


# -- commands --------------------------------------------------------------


def cmd_synth(args):
    from .synth import SyntheticSpec, generate, write_region

    base = {}
    if args.spec:
        path = Path(args.spec)
        if not path.is_file():
            raise ConfigError(f"spec file {path} does not exist")
        base = json.loads(path.read_text(encoding="utf-8"))
    for key in ("rows", "cols", "n_bands", "n_positive", "n_negative", "label_noise", "seed"):
        v = getattr(args, key)
        if v is not None:
            base[key] = v
    spec = SyntheticSpec.from_dict(base)
    region = generate(spec)
    meta = write_region(region, args.out)
    print(f"wrote {len(meta['bands'])} bands, {len(region.points)} samples "
          f"({len(region.flipped)} flipped) to {args.out}")
    if args.write_config:
        cfg_path = Path(args.write_config)
        out = Path(args.out).resolve()
        doc = {
            "seed": spec.seed,
            "output_dir": "out",
            "regions": [{"name": out.name, "bands": {b: str(out / f) for b, f in meta["bands"].items()},
                         "samples": str(out / "samples.csv")}],
        }
        cfg_path.parent.mkdir(parents=True, exist_ok=True)
        cfg_path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
        print(f"wrote pipeline config {cfg_path}")
    return EXIT_OK


def _load(args):
    from .config import load_config

    cfg = load_config(args.config, _overrides(args))
    return cfg.validate()


def cmd_stage(args, stages):
    from .pipeline import Run

    cfg = _load(args)
    run = Run(cfg, resume=args.resume)
    ran = run.run(stages)
    for s in stages:
        print(f"{s}: {'done' if s in ran else 'up to date'}")
    print(f"config hash {run.config_hash}")
    if "evaluate" in ran:
        _print_metrics(Path(cfg.output_dir) / "metrics.csv")
    return EXIT_OK


def _print_metrics(path):
    import csv

    with open(path, encoding="utf-8") as fh:
        row = next(csv.DictReader(fh))
    print("test query: " + " ".join(f"{k}={row[k] or 'undefined'}" for k in ("accuracy", "precision", "recall", "f1")))


def cmd_experiment(args):
    from .checkpoint import load_model
    from .evaluate import ExperimentConfig, roc_auc, run_experiment, write_roc_csv, write_runs_csv, write_stats_csv
    from .geodata import read_samples_csv
    from .pipeline import Run, prepare_region

    cfg = _load(args)
    repeats = args.repeats if args.repeats is not None else cfg.repeats
    run = Run(cfg, resume=True)
    run.run(["segment", "pretrain"])
    f0, _ = load_model(Path(cfg.output_dir) / "f0.json")
    regions = [
        prepare_region(r.name, run.stack(r.name), read_samples_csv(r.samples), cfg.slic, cfg.min_per_class)
        for r in cfg.regions
    ]
    ec = ExperimentConfig(args.method, cfg.meta, cfg.supervised, cfg.split_fraction, cfg.min_task_size, cfg.threshold)
    res = run_experiment(cfg.mode, regions, f0, cfg.k_shot, repeats, cfg.seed, ec, workers=args.threads)
    out = Path(cfg.output_dir) / "experiments"
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{cfg.mode}_k{cfg.k_shot}_{args.method}"
    write_runs_csv(out / f"{stem}_runs.csv", res)
    write_stats_csv(out / f"{stem}_stats.csv", [res])
    write_roc_csv(out / f"{stem}_roc.csv", [(r.run, r.roc) for r in res.runs if r.roc is not None])
    s = res.stats
    print(f"mode {cfg.mode} k_shot {cfg.k_shot} {args.method}: mean OA {s.mean:.4f} std {s.std:.4f} "
          f"min {s.min:.4f} max {s.max:.4f} over {len(s.accuracies)} runs")
    return EXIT_OK


def cmd_benchmark(args):
    from dataclasses import replace

    from .benchmark import BenchmarkConfig, run_benchmark

    cfg = BenchmarkConfig(seed=args.seed, repeats=args.repeats, noise_repeats=args.noise_repeats)
    cfg.meta = replace(cfg.meta, meta_epochs=args.meta_epochs)
    if args.meta_lr is not None:
        cfg.meta = replace(cfg.meta, meta_lr=args.meta_lr)
    report = run_benchmark(cfg, args.out)
    for name, res in report.results.items():
        print(f"{name}: mean OA {res.stats.mean:.4f} std {res.stats.std:.4f}")
    for key, (ok, detail) in report.checks(cfg.k_values, cfg.k_main).items():
        print(f"{key} {'PASS' if ok else 'FAIL'}: {detail}")
    print(f"runtime {report.seconds:.1f} s")
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        if args.command == "synth":
            return cmd_synth(args)
        if args.command in STAGE_COMMANDS:
            return cmd_stage(args, [args.command])
        if args.command == "pipeline":
            from .pipeline import STAGES

            return cmd_stage(args, list(STAGES))
        if args.command == "experiment":
            return cmd_experiment(args)
        if args.command == "benchmark":
            return cmd_benchmark(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (DataError, PipelineError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except LsmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    parser.error(f"unknown command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
