"""Command-line interface: `lateflow run` and `lateflow trigger-study`."""

from __future__ import annotations

import argparse
import sys

from .harness import BenchConfig, run_benchmark
from .study import DEFAULT_BOUNDS, DEFAULT_DISTRIBUTIONS, StudyConfig, run_trigger_study
from .workloads import WORKLOAD_NAMES


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lateflow",
        description="Event-time streaming benchmarks with tiered window state",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a workload benchmark")
    run.add_argument("--workload", choices=WORKLOAD_NAMES, default="average")
    run.add_argument("--backend", choices=("aion", "memory"), default="aion")
    run.add_argument("--profile", choices=("desk", "paper"), default="desk")
    run.add_argument("--past-windows", type=int, default=5)
    run.add_argument("--seed", type=int, default=1)
    run.add_argument("--state-root", default="lateflow-state")
    run.add_argument("--out", default=None, help="directory for CSV outputs")
    run.add_argument("--watermarks", type=int, default=30, help="measured watermarks")
    run.add_argument("--warmup", type=int, default=10)
    run.add_argument("--pace", action="store_true",
                     help="pace ingestion in wall time at the workload rate")
    run.add_argument("--rate", type=int, default=None, help="override events/s")
    run.add_argument("--window-duration-s", type=float, default=None)
    run.add_argument("--payload-bytes", type=int, default=None)
    run.add_argument("--policy", choices=("standard", "local", "global"), default="standard")
    run.add_argument("--rho-min", type=float, default=0.05)
    run.add_argument("--tau-ms", type=int, default=60_000)
    run.add_argument("--mu-moderate", type=float, default=0.25)
    run.add_argument("--mu-critical", type=float, default=0.10)
    run.add_argument("--selection-rule", choices=("by_size_desc", "by_ingestion_asc"),
                     default="by_size_desc")
    run.add_argument("--lateness", choices=("static", "predictive"), default="static")
    run.add_argument("--trigger", choices=("aion", "deltat", "deltaev", "per_event"),
                     default="aion")
    run.add_argument("--trigger-bound", type=float, default=0.1)
    run.add_argument("--trigger-k", type=int, default=4)
    run.add_argument("--grid-bins", type=int, default=1_000)
    run.add_argument("--distribution", choices=("lnorm", "unif", "norm", "bursts", "empirical"),
                     default="lnorm", dest="trigger_distribution")
    run.add_argument("--mbucket-capacity", type=int, default=500_000)
    run.add_argument("--block-capacity", type=int, default=10_000)
    run.add_argument("--serialization-workers", type=int, default=0,
                     help="0 = available cores")
    run.add_argument("--inject-io-latency-ms", type=float, default=0.0)
    run.add_argument("--inject-serialize-latency-ms", type=float, default=0.0)
    run.add_argument("--no-prestage", action="store_true")
    run.add_argument("--memory-budget-mb", type=float, default=None)
    run.add_argument("--results-csv", action="store_true",
                     help="also write per-firing results.csv")

    study = sub.add_parser("trigger-study", help="staleness trigger comparison")
    study.add_argument("--distribution", nargs="+", default=list(DEFAULT_DISTRIBUTIONS),
                       choices=("lnorm", "unif", "norm", "bursts"))
    study.add_argument("--bound", nargs="+", type=float, default=list(DEFAULT_BOUNDS))
    study.add_argument("--k-max", type=int, default=30)
    study.add_argument("--out", default="study-out")
    return parser


def cmd_run(args: argparse.Namespace) -> int:
    config = BenchConfig(
        workload=args.workload,
        backend=args.backend,
        profile=args.profile,
        past_windows=args.past_windows,
        seed=args.seed,
        state_root=args.state_root,
        out_dir=args.out,
        pace=args.pace,
        watermarks=args.watermarks,
        warmup=args.warmup,
        rate=args.rate,
        window_duration_s=args.window_duration_s,
        payload_bytes=args.payload_bytes,
        policy=args.policy,
        rho_min=args.rho_min,
        tau_ms=args.tau_ms,
        mu_moderate=args.mu_moderate,
        mu_critical=args.mu_critical,
        selection_rule=args.selection_rule,
        lateness=args.lateness,
        trigger=args.trigger,
        trigger_bound=args.trigger_bound,
        trigger_k=args.trigger_k,
        grid_bins=args.grid_bins,
        trigger_distribution=args.trigger_distribution,
        mbucket_capacity=args.mbucket_capacity,
        block_capacity=args.block_capacity,
        serialization_workers=args.serialization_workers,
        inject_io_latency_ms=args.inject_io_latency_ms,
        inject_serialize_latency_ms=args.inject_serialize_latency_ms,
        prestage=not args.no_prestage,
        memory_budget_bytes=(int(args.memory_budget_mb * 1024 * 1024)
                             if args.memory_budget_mb else None),
        write_results=args.results_csv,
    )
    report = run_benchmark(config)
    print(f"workload={config.workload} backend={config.backend} "
          f"past_windows={config.past_windows} seed={config.seed}")
    print(f"watermarks measured: {len(report.rows)}  wall: {report.wall_total_s:.1f}s")
    if report.aborted_at_watermark is not None:
        print(f"OutOfMemoryAbort at measured watermark {report.aborted_at_watermark} "
              f"(budget {config.memory_budget_bytes} bytes)")
    if report.rows:
        print(f"median tracked_state_bytes: {int(report.median('tracked_state_bytes_median'))}")
        print(f"median ingestion_rate_normal: {report.median('ingestion_rate_normal'):.0f} ev/s")
        print(f"median processing_rate_all: {report.median('processing_rate_all'):.0f} ev/s")
    for key, value in sorted(report.counters.items()):
        print(f"  {key}: {value}")
    if config.out_dir:
        print(f"CSV written to {config.out_dir}/")
    return 0


def cmd_study(args: argparse.Namespace) -> int:
    config = StudyConfig(
        distributions=tuple(args.distribution),
        bounds=tuple(args.bound),
        k_max=args.k_max,
        out_dir=args.out,
    )
    report = run_trigger_study(config)
    for (dist, trigger, bound), k in sorted(report.to_bound.items()):
        shown = k if k is not None else f"not reached within {config.k_max}"
        print(f"{dist:7s} {trigger:8s} bound {bound:<5}: {shown}")
    print(f"CSV written to {config.out_dir}/trigger_study.csv")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args)
    return cmd_study(args)


if __name__ == "__main__":
    sys.exit(main())
