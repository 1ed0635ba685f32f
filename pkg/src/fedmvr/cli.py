"""Command-line entry point.

Verbs::

    fedmvr run              one experiment (config file, or the desk / --paper-scale preset)
    fedmvr ablate           ablation rows 1..7 under one preset
    fedmvr compare          several algorithms over several seeds
    fedmvr probe            empirical smoothness / variance / dispersion estimates
    fedmvr partition-stats  per-client counts, class histograms, mean TV distance

Every experiment writes one metrics CSV per run into the output directory
(``--output-dir``, else ``$FEDMVR_OUTPUT_DIR``, else ``./results``).

Exit codes: 0 success, 2 configuration or usage error, 3 runtime error
(data loading, numerical failure, I/O).
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import (
    ABLATION_ROWS,
    ALGORITHMS,
    ConfigError,
    ExperimentConfig,
    desk_scale,
    dump_config,
    paper_scale,
    parse_config,
    with_values,
)
from .datagen import (
    IdxFormatError,
    PartitionConfig,
    PartitionError,
    class_histogram,
    dirichlet_partition,
    mean_tv_distance,
)
from .harness import (
    ExperimentError,
    RoundMetrics,
    build_problem,
    load_data,
    probe_assumptions,
    rounds_to_threshold,
    run_experiment,
)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
OUTPUT_ENV = "FEDMVR_OUTPUT_DIR"
CSV_FIELDS = ("round", "train_loss", "train_acc", "test_loss", "test_acc",
              "grad_norm_sq", "mean_lr", "participating", "floats_sent")
_INT_FIELDS = {"round", "participating", "floats_sent"}


class CliRuntimeError(RuntimeError):
    pass


def _fmt(field: str, value) -> str:
    return str(int(value)) if field in _INT_FIELDS else "%.17g" % value


def emit_metrics_csv(metrics: Sequence[RoundMetrics], path) -> None:
    path = Path(path)
    lines = [",".join(CSV_FIELDS)]
    lines += [",".join(_fmt(f, getattr(m, f)) for f in CSV_FIELDS) for m in metrics]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise CliRuntimeError(f"cannot write {path}: {exc.strerror or exc}") from None


def read_metrics_csv(path) -> list[RoundMetrics]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_FIELDS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [RoundMetrics(**{f: int(row[f]) if f in _INT_FIELDS else float(row[f]) for f in CSV_FIELDS})
                for row in reader]


def partition_stats(cfg: ExperimentConfig) -> str:
    train, _ = load_data(cfg)
    shards = dirichlet_partition(train, PartitionConfig(cfg.n_clients, cfg.alpha, cfg.seed))
    classes = " ".join(f"{c:>5d}" for c in range(train.num_classes))
    out = [f"clients={cfg.n_clients} alpha={cfg.alpha!r} seed={cfg.seed} samples={len(train)}",
           f"{'client':>6} {'count':>6} | {classes}"]
    for shard in shards:
        hist = " ".join(f"{n:>5d}" for n in class_histogram(train, shard))
        out.append(f"{shard.client_id:>6d} {shard.sample_count:>6d} | {hist}")
    total = sum(s.sample_count for s in shards)
    out.append(f"{'total':>6} {total:>6d}")
    out.append(f"mean TV distance: {mean_tv_distance(train, shards):.6f}")
    return "\n".join(out) + "\n"


def _output_dir(args) -> Path:
    return Path(args.output_dir or os.environ.get(OUTPUT_ENV) or "results")


def _base_config(args, algorithm: str | None = None) -> ExperimentConfig:
    if args.config:
        cfg = parse_config(args.config)
        if algorithm:
            cfg = with_values(cfg, algorithm=algorithm)
    else:
        make = paper_scale if args.paper_scale else desk_scale
        cfg = make(algorithm or "proposed", args.mnist_dir or "")
    overrides = {}
    if args.config and args.mnist_dir:
        overrides["mnist_dir"] = args.mnist_dir
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "rounds", None):
        overrides["rounds"] = args.rounds
    return with_values(cfg, **overrides) if overrides else cfg


def _run_one(cfg: ExperimentConfig, name: str, args) -> list[RoundMetrics]:
    out = _output_dir(args)
    metrics = run_experiment(cfg, workers=args.workers)
    emit_metrics_csv(metrics, out / f"{name}.csv")
    try:
        (out / f"{name}.cfg").write_text(dump_config(cfg))
    except OSError as exc:
        raise CliRuntimeError(f"cannot write {out / name}.cfg: {exc.strerror or exc}") from None
    return metrics


def _summary_line(label: str, metrics: list[RoundMetrics], threshold: float) -> str:
    last = metrics[-1]
    hit = rounds_to_threshold(metrics, "test_acc", threshold)
    return (f"{label}: final test_acc={last.test_acc:.4f} best={max(m.test_acc for m in metrics):.4f} "
            f"rounds_to_{threshold:g}={hit if hit is not None else 'never'} "
            f"floats_sent={sum(m.floats_sent for m in metrics)}")


def cmd_run(args) -> None:
    cfg = _base_config(args, args.algorithm)
    name = f"{cfg.algorithm}_seed{cfg.seed}"
    print(_summary_line(name, _run_one(cfg, name, args), args.threshold))


def cmd_ablate(args) -> None:
    for row in args.rows:
        if row not in ABLATION_ROWS:
            raise ConfigError(f"ablation row must be in 1..{len(ABLATION_ROWS)}, got {row}")
    for row in args.rows:
        cfg = _base_config(args, f"row{row}")
        flags = "".join("x" if f else "." for f in ABLATION_ROWS[row])
        metrics = _run_one(cfg, f"row{row}_seed{cfg.seed}", args)
        print(_summary_line(f"row {row} [{flags}]", metrics, args.threshold), flush=True)


def cmd_compare(args) -> None:
    for algorithm in args.algorithms:
        if algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {algorithm!r}; choose from {', '.join(ALGORITHMS)}")
    for algorithm in args.algorithms:
        hits, finals = [], []
        for seed in args.seeds:
            cfg = with_values(_base_config(args, algorithm), seed=seed)
            metrics = _run_one(cfg, f"{algorithm}_seed{seed}", args)
            hit = rounds_to_threshold(metrics, "test_acc", args.threshold)
            hits.append(np.inf if hit is None else hit)
            finals.append(metrics[-1].test_acc)
        median_hit = float(np.median(hits))
        print(f"{algorithm}: median final test_acc={np.median(finals):.4f} "
              f"median rounds_to_{args.threshold:g}={'never' if np.isinf(median_hit) else f'{median_hit:g}'}",
              flush=True)


def cmd_probe(args) -> None:
    cfg = _base_config(args, args.algorithm)
    prob = build_problem(cfg)
    est = probe_assumptions(prob.spec, prob.train, prob.shards, args.pairs, np.random.default_rng([cfg.seed, 3]),
                            batch_size=cfg.local.batch_size)
    for key, value in vars(est).items():
        print(f"{key} = {value:.6g}")


def cmd_partition_stats(args) -> None:
    sys.stdout.write(partition_stats(_base_config(args)))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file (default: built-in preset)")
    common.add_argument("--paper-scale", action="store_true",
                        help="100 clients, 10 per round, 400 rounds, 80 local epochs (ignored with --config)")
    common.add_argument("--mnist-dir", help="directory with MNIST IDX files (default: bundled subset)")
    common.add_argument("--seed", type=int)
    common.add_argument("--output-dir", help=f"where CSVs go (default: ${OUTPUT_ENV} or ./results)")

    experiment = argparse.ArgumentParser(add_help=False)
    experiment.add_argument("--workers", type=int, default=1, help="clients trained concurrently")
    experiment.add_argument("--rounds", type=int, help="override the number of rounds")
    experiment.add_argument("--threshold", type=float, default=0.85, help="test accuracy target for summaries")

    parser = argparse.ArgumentParser(prog="fedmvr", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("run", parents=[common, experiment], help="run one experiment")
    p.add_argument("--algorithm", choices=list(ALGORITHMS))
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", parents=[common, experiment], help="run ablation rows")
    p.add_argument("rows", type=int, nargs="*", default=list(ABLATION_ROWS))
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("compare", parents=[common, experiment], help="compare algorithms over seeds")
    p.add_argument("--algorithms", nargs="+", default=["proposed", "fedavg", "fedprox"])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("probe", parents=[common], help="estimate smoothness and variance constants")
    p.add_argument("--algorithm", choices=list(ALGORITHMS))
    p.add_argument("--pairs", type=int, default=10)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("partition-stats", parents=[common], help="describe the Dirichlet partition")
    p.set_defaults(func=cmd_partition_stats)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "workers", 1) < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ExperimentError, CliRuntimeError, IdxFormatError, PartitionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
