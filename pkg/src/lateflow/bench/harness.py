"""Benchmark runner: drives a workload through the engine and collects
per-watermark metrics.

A run generates ``warmup + watermarks`` intervals of events; the watermark
interval equals the window duration. Timestamps follow the delay model, so
roughly half of all events are late and spread over the configured number
of past windows. Unpaced runs execute as fast as possible (memory metrics
are time-independent) and drain the destage backlog at each watermark
(backpressure); paced runs sleep to match the configured ingestion rate in
wall time, which is what the rate metrics and the prestaging/serialization
ablations need.

A configured memory budget turns an over-budget sample into an
OutOfMemoryAbort data point: the run stops, rows up to that watermark are
kept, and ``aborted_at_watermark`` is set (this mirrors the baseline
backend running out of heap, without taking the test process down).
"""

from __future__ import annotations

import csv
import os
import random
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

from ..core import Event, Watermark
from ..engine import Engine, EngineConfig, LatenessMode
from ..policy import PolicyConfig, PolicyKind, SelectionRule
from .workloads import DelayModel, WorkloadSpec, build_workload, pack_body

METRIC_COLUMNS = [
    "watermark_index", "watermark_ts_ms", "wall_s",
    "tracked_state_bytes_median", "tracked_state_bytes_max",
    "ingestion_rate_normal", "ingestion_rate_all",
    "processing_rate_normal", "processing_rate_all",
    "max_staleness_expected", "max_staleness_observed",
    "executions_refinement", "reexec_skipped_empty",
    "dropped_beyond_bound", "purged_windows",
    "destage_backlog_bytes", "late_events",
]


class OutOfMemoryAbort(RuntimeError):
    def __init__(self, watermark_index: int, tracked_bytes: int):
        super().__init__(f"tracked state {tracked_bytes} bytes over budget "
                         f"at watermark {watermark_index}")
        self.watermark_index = watermark_index
        self.tracked_bytes = tracked_bytes


@dataclass
class BenchConfig:
    workload: str = "average"
    backend: str = "aion"
    profile: str = "desk"
    past_windows: int = 5
    seed: int = 1
    state_root: str = "lateflow-state"
    out_dir: str | None = None
    pace: bool = False
    watermarks: int = 30
    warmup: int = 10
    rate: int | None = None
    window_duration_s: float | None = None
    payload_bytes: int | None = None
    policy: str = "standard"
    rho_min: float = 0.05
    tau_ms: int = 60_000
    mu_moderate: float = 0.25
    mu_critical: float = 0.10
    selection_rule: str = "by_size_desc"
    lateness: str = "static"
    trigger: str = "aion"
    trigger_bound: float = 0.1
    trigger_k: int = 4
    grid_bins: int = 1_000
    trigger_distribution: str = "lnorm"
    mbucket_capacity: int = 500_000
    block_capacity: int = 10_000
    late_write_batch_ms: int = 50
    serialization_workers: int = 0  # 0 = available cores
    inject_io_latency_ms: float = 0.0
    inject_serialize_latency_ms: float = 0.0
    prestage: bool = True
    memory_budget_bytes: int | None = None
    drain_backlog: bool | None = None
    write_results: bool = False
    sample_every: int = 200

    def resolve_spec(self) -> WorkloadSpec:
        spec = WorkloadSpec.preset(self.workload, self.profile,
                                   past_windows=self.past_windows,
                                   run_watermarks=self.watermarks,
                                   warmup_watermarks=self.warmup)
        if self.rate or self.window_duration_s or self.payload_bytes:
            spec = WorkloadSpec(
                spec.name,
                self.rate or spec.max_ingestion_rate,
                self.window_duration_s or spec.window_duration_s,
                self.payload_bytes or spec.payload_bytes,
                past_windows=spec.past_windows,
                run_watermarks=spec.run_watermarks,
                warmup_watermarks=spec.warmup_watermarks,
            )
        return spec

    def engine_config(self, spec: WorkloadSpec) -> EngineConfig:
        lateness_ms = self.past_windows * spec.window_duration_ms
        return EngineConfig(
            backend=self.backend,
            state_root=self.state_root,
            mbucket_capacity=self.mbucket_capacity,
            block_capacity=self.block_capacity,
            late_write_batch_ms=self.late_write_batch_ms,
            serialization_workers=self.serialization_workers or (os.cpu_count() or 1),
            inject_io_latency_ms=self.inject_io_latency_ms,
            inject_serialize_latency_ms=self.inject_serialize_latency_ms,
            policy=PolicyConfig(
                kind=PolicyKind(self.policy),
                rho_min=self.rho_min,
                tau_ms=self.tau_ms,
                mu_moderate=self.mu_moderate,
                mu_critical=self.mu_critical,
                selection_rule=SelectionRule(self.selection_rule),
            ),
            lateness_mode=LatenessMode(self.lateness),
            allowed_lateness_ms=lateness_ms,
            trigger=self.trigger,
            trigger_bound=self.trigger_bound,
            trigger_k=self.trigger_k,
            trigger_grid_bins=self.grid_bins,
            trigger_distribution=self.trigger_distribution,
            expected_late_events=max(
                spec.events_per_interval * DelayModel.expected_late_fraction(self.past_windows),
                1.0,
            ),
            prestage_enabled=self.prestage,
            memory_total_bytes=(self.memory_budget_bytes
                                if self.policy == "global" else None),
        )


@dataclass
class BenchReport:
    config: BenchConfig
    spec: WorkloadSpec
    rows: list[dict] = field(default_factory=list)
    results: dict = field(default_factory=dict)
    counters: dict = field(default_factory=dict)
    aborted_at_watermark: int | None = None
    wall_total_s: float = 0.0

    def median(self, column: str) -> float:
        values = [row[column] for row in self.rows]
        return statistics.median(values) if values else 0.0

    def series(self, column: str) -> list:
        return [row[column] for row in self.rows]


def run_benchmark(config: BenchConfig) -> BenchReport:
    spec = config.resolve_spec()
    content_rng = random.Random(config.seed)
    delay = DelayModel(config.past_windows, random.Random(config.seed + 1_000_003))
    pad_pool = random.Random(config.seed + 2_000_003).randbytes(1 << 20)
    workload = build_workload(spec, content_rng)
    engine = Engine(workload.pipeline, config.engine_config(spec))
    report = BenchReport(config=config, spec=spec)
    drain = config.drain_backlog if config.drain_backlog is not None else not config.pace

    wd = spec.window_duration_ms
    n_per_interval = spec.events_per_interval
    total_intervals = config.warmup + config.watermarks
    payload_size = spec.payload_bytes
    pool_span = len(pad_pool) - payload_size - 1
    event_seq = 0
    source_events = 0
    source_normal = 0
    prev = _Snapshot.take(engine, source_events, source_normal)
    run_start = time.perf_counter()
    pace_start = None

    try:
        for interval in range(total_intervals):
            interval_start_ms = interval * wd
            boundary_ms = (interval + 1) * wd
            samples: list[int] = []
            gen = workload.generate(n_per_interval)
            for i, (targets, key, body) in enumerate(gen):
                now_ms = interval_start_ms + (i * wd) // n_per_interval
                if config.pace:
                    if pace_start is None:
                        pace_start = time.perf_counter()
                    target_wall = pace_start + now_ms / 1000.0
                    delta = target_wall - time.perf_counter()
                    if delta > 0.0005:
                        time.sleep(delta)
                ts = delay.timestamp(now_ms, wd)
                offset = (event_seq * 7_919) % pool_span
                payload = pack_body(body, payload_size, pad_pool[offset:offset + payload_size])
                event = Event(key=key, event_time=ts, payload=payload)
                engine.on_time_advance(now_ms)
                for target in targets:
                    engine.ingest(target, event, now_ms)
                event_seq += 1
                source_events += 1
                if ts >= interval_start_ms:
                    source_normal += 1
                if event_seq % config.sample_every == 0:
                    tracked = engine.tracked_bytes_total()
                    samples.append(tracked)
                    if config.memory_budget_bytes and tracked > config.memory_budget_bytes:
                        raise OutOfMemoryAbort(interval - config.warmup + 1, tracked)
            engine.advance_watermark(Watermark(boundary_ms), now_ms=boundary_ms)
            engine.on_time_advance(boundary_ms)
            if drain and engine.scheduler is not None:
                deadline = time.monotonic() + 120.0
                while (engine.scheduler.destage_backlog_bytes > 0
                       and time.monotonic() < deadline):
                    engine._drain_completions(block_ms=50)
                engine._drain_completions()
            if interval >= config.warmup:
                snap = _Snapshot.take(engine, source_events, source_normal)
                report.rows.append(_metrics_row(
                    interval - config.warmup + 1, boundary_ms, engine,
                    prev, snap, samples))
                prev = snap
            else:
                prev = _Snapshot.take(engine, source_events, source_normal)
    except OutOfMemoryAbort as abort:
        report.aborted_at_watermark = abort.watermark_index
    finally:
        report.wall_total_s = time.perf_counter() - run_start
        report.counters = dict(engine.counters)
        report.counters["refinement_events"] = engine.refinement_events
        report.counters["refinement_wall_s"] = engine.refinement_wall_s
        report.counters["firing_wall_s"] = engine.firing_wall_s
        report.results = {
            (r.operator, r.window_id, r.firing_seq): r.value for r in engine.results
        }
        if config.out_dir:
            _write_outputs(Path(config.out_dir), engine, report)
        engine.close(drain=report.aborted_at_watermark is None)
    return report


@dataclass
class _Snapshot:
    wall: float
    source_events: int
    source_normal: int
    events_processed: int
    firing_wall_s: float
    refinement_events: int
    refinement_wall_s: float
    firings_refinement: int
    reexec_skipped: int
    dropped: int
    purged: int
    late: int

    @classmethod
    def take(cls, engine: Engine, source_events: int, source_normal: int) -> "_Snapshot":
        c = engine.counters
        return cls(
            wall=time.perf_counter(),
            source_events=source_events,
            source_normal=source_normal,
            events_processed=c["events_processed"],
            firing_wall_s=engine.firing_wall_s,
            refinement_events=engine.refinement_events,
            refinement_wall_s=engine.refinement_wall_s,
            firings_refinement=c["firings_refinement"],
            reexec_skipped=c["reexec_skipped_empty"],
            dropped=c["dropped_beyond_bound"],
            purged=c["purged_windows"],
            late=c["ingested_late"],
        )


def _rate(count: float, seconds: float) -> float:
    return count / seconds if seconds > 1e-9 else 0.0


def _metrics_row(index, boundary_ms, engine, prev, snap, samples) -> dict:
    wall = snap.wall - prev.wall
    normal_events = (snap.events_processed - snap.refinement_events) - (
        prev.events_processed - prev.refinement_events)
    normal_wall = (snap.firing_wall_s - snap.refinement_wall_s) - (
        prev.firing_wall_s - prev.refinement_wall_s)
    backlog = engine.scheduler.destage_backlog_bytes if engine.scheduler else 0
    return {
        "watermark_index": index,
        "watermark_ts_ms": boundary_ms,
        "wall_s": round(wall, 6),
        "tracked_state_bytes_median": (int(statistics.median(samples)) if samples
                                       else engine.tracked_bytes_total()),
        "tracked_state_bytes_max": max(samples) if samples else 0,
        "ingestion_rate_normal": round(_rate(snap.source_normal - prev.source_normal, wall), 3),
        "ingestion_rate_all": round(_rate(snap.source_events - prev.source_events, wall), 3),
        "processing_rate_normal": round(_rate(normal_events, normal_wall), 3),
        "processing_rate_all": round(
            _rate(snap.events_processed - prev.events_processed,
                  snap.firing_wall_s - prev.firing_wall_s), 3),
        "max_staleness_expected": round(engine.max_staleness_expected, 9),
        "max_staleness_observed": round(engine.max_staleness_observed, 9),
        "executions_refinement": snap.firings_refinement - prev.firings_refinement,
        "reexec_skipped_empty": snap.reexec_skipped - prev.reexec_skipped,
        "dropped_beyond_bound": snap.dropped - prev.dropped,
        "purged_windows": snap.purged - prev.purged,
        "destage_backlog_bytes": backlog,
        "late_events": snap.late - prev.late,
    }


def _write_outputs(out_dir: Path, engine: Engine, report: BenchReport) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "metrics.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        writer.writerows(report.rows)
    with open(out_dir / "histogram.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["operator", "bin_start_ms", "count"])
        for op_name, hist in engine._histograms.items():
            for bin_start, count in hist.to_csv_rows():
                writer.writerow([op_name, bin_start, count])
    with open(out_dir / "schedule.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["trigger", "lateness_ms", "execution_offset_ms"])
        for key, offsets in engine._schedule_cache.items():
            trigger, T = key[0], key[1]
            for off in offsets:
                writer.writerow([trigger, int(T), int(off)])
    if report.config.write_results:
        with open(out_dir / "results.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["operator", "window_id", "firing_seq", "value"])
            for (op, window_id, seq), value in sorted(report.results.items()):
                writer.writerow([op, window_id, seq, repr(value)])
