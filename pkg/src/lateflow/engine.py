"""Pipeline engine: event routing, window firing, late refinement, purge.

The engine is driven by a harness (or embedding application) that calls
``ingest``/``advance_watermark``/``on_time_advance`` with a monotonically
advancing ``now_ms``, which may be wall-clock or virtual time. All window
state transitions happen on the calling (control) task; the only other
threads are the storage worker and its codec pool, which communicate back
through a completion queue drained on the control task. Firing results are
therefore deterministic for a fixed input stream regardless of I/O timing:
tier movements change where bytes live, never what a window contains.

Lateness handling per window: events for expired windows are appended to
the persistent tier, observed into the operator's delay histogram, and the
window is refined at re-execution times from the configured trigger (or on
each late arrival under the per-event trigger). State is purged once the
window's cleanup bound (static, or predictive from the delay histogram,
fixed at window creation) has elapsed.
"""

from __future__ import annotations

import enum
import heapq
import itertools
import os
import queue
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator

from . import policy as policy_mod
from .core import (
    CountTracker,
    Event,
    SessionTracker,
    Watermark,
    WatermarkKind,
    WindowInstance,
    WindowKind,
    WindowSpec,
    tumbling_window_start,
)
from .iosched import Completion, IORequest, IOScheduler, RequestKind, Ticket
from .lateness import LatenessHistogram, cleanup_bound
from .policy import (
    DestageAction,
    PolicyConfig,
    PolicyKind,
    PressureLevel,
    PrestageEstimator,
    PrestageNowAction,
    ScheduleReexecAction,
    first_prestage_time,
    plan_prestage,
)
from .state import (
    Block,
    MemoryWindowState,
    Phase,
    StorageReadError,
    Tier,
    WindowFiles,
    WindowStateHandle,
)
from .trigger import (
    StalenessParams,
    baseline_deltaev,
    baseline_deltat,
    make_model,
    plan_executions,
)


class OperatorMode(enum.Enum):
    BLOCKING = "blocking"
    NON_BLOCKING = "non_blocking"


class LatenessMode(enum.Enum):
    STATIC = "static"
    PREDICTIVE = "predictive"


@dataclass
class WindowOperator:
    """A windowed transformation. ``udf`` consumes the window's event
    iterator and returns the result value; ``emit`` (optional) turns a
    firing into events for downstream operators. ``emit`` receives the
    firing sequence number so downstream consumers can replace stale
    results from refined upstream windows deterministically."""

    name: str
    spec: WindowSpec
    udf: Callable[[Iterator[Event], WindowInstance], object]
    mode: OperatorMode = OperatorMode.NON_BLOCKING
    downstream: tuple[str, ...] = ()
    emit: Callable[[WindowInstance, object, int], list[Event]] | None = None


@dataclass
class Pipeline:
    operators: list[WindowOperator]

    def __post_init__(self) -> None:
        names = [op.name for op in self.operators]
        if len(set(names)) != len(names):
            raise ValueError("duplicate operator names")
        known = set(names)
        for op in self.operators:
            for d in op.downstream:
                if d not in known:
                    raise ValueError(f"operator {op.name} routes to unknown {d}")
        self._assert_acyclic()

    def _assert_acyclic(self) -> None:
        order = {op.name: i for i, op in enumerate(self.operators)}
        for op in self.operators:
            for d in op.downstream:
                if order[d] <= order[op.name]:
                    raise ValueError("operators must be listed in topological order")

    def __iter__(self):
        return iter(self.operators)


@dataclass
class EngineConfig:
    backend: str = "aion"
    state_root: str = "lateflow-state"
    mbucket_capacity: int = 500_000
    block_capacity: int = 10_000
    serialization_workers: int = field(default_factory=lambda: os.cpu_count() or 1)
    late_write_batch_ms: int = 50
    inject_io_latency_ms: float = 0.0
    inject_serialize_latency_ms: float = 0.0
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    lateness_mode: LatenessMode = LatenessMode.STATIC
    allowed_lateness_ms: int = 0
    watermark_kind: WatermarkKind = WatermarkKind.PERIODIC
    # predictive cleanup
    histogram_bin_ms: int = 1_000
    cleanup_coverage: float = 0.99
    cleanup_delta: float = 0.05
    cleanup_n_min: int = 1_000
    initial_bound_window_factor: float = 100.0
    # refinement trigger: aion | deltat | deltaev | per_event
    trigger: str = "aion"
    trigger_bound: float = 0.1
    trigger_grid_bins: int = 1_000
    trigger_distribution: str = "lnorm"
    trigger_k: int = 4                      # for deltat/deltaev baselines
    expected_late_events: float = 1_000.0   # N for staleness accounting
    prestage_enabled: bool = True
    memory_total_bytes: int | None = None   # enables mu pressure rules when set
    pressure_check_every: int = 256

    def __post_init__(self) -> None:
        if self.backend not in ("aion", "memory"):
            raise ValueError("backend must be 'aion' or 'memory'")
        if self.trigger not in ("aion", "deltat", "deltaev", "per_event"):
            raise ValueError("trigger must be aion|deltat|deltaev|per_event")

    @classmethod
    def from_flat_dict(cls, flat: dict) -> "EngineConfig":
        """Build a config from TOML-style dotted keys, e.g.
        {"backend": "aion", "policy.rho_min": 0.05, "trigger.bound": 0.1}."""
        cfg = cls()
        policy_kwargs = {}
        for key, value in flat.items():
            if key.startswith("policy."):
                policy_kwargs[key.split(".", 1)[1]] = value
            elif key.startswith("trigger."):
                setattr(cfg, f"trigger_{key.split('.', 1)[1]}", value)
            elif key == "trigger":
                cfg.trigger = value
            else:
                if not hasattr(cfg, key):
                    raise ValueError(f"unknown config key {key!r}")
                setattr(cfg, key, value)
        if policy_kwargs:
            if "kind" in policy_kwargs:
                policy_kwargs["kind"] = PolicyKind(policy_kwargs["kind"])
            if "selection_rule" in policy_kwargs:
                policy_kwargs["selection_rule"] = policy_mod.SelectionRule(
                    policy_kwargs["selection_rule"])
            cfg.policy = PolicyConfig(**policy_kwargs)
        cfg.__post_init__()
        return cfg


@dataclass
class FiringResult:
    operator: str
    window_id: str
    window: WindowInstance
    firing_seq: int
    is_refinement: bool
    value: object
    fired_at_ms: int


class _Runtime:
    """Per-(operator, window) bookkeeping owned by the control task."""

    __slots__ = (
        "op", "window", "handle", "firing_seq", "fired_initial", "expired",
        "events_since_fire", "late_events_total", "last_fire_ms", "cleanup_bound_ms",
        "reexec_times", "next_reexec", "reexec_queued", "prestage_planned",
        "stage_pending", "stage_tickets", "stage_started_wall", "stage_event_count",
        "rid", "stage_error", "destage_tickets", "late_tickets", "purged",
        "created_ms", "idle_armed", "lateflush_armed",
    )

    def __init__(self, op: WindowOperator, window: WindowInstance, handle, now_ms: int):
        self.op = op
        self.window = window
        self.rid = f"{op.name}/{window.window_id}"
        self.handle = handle
        self.firing_seq = 0
        self.fired_initial = False
        self.expired = False
        self.events_since_fire = 0
        self.late_events_total = 0
        self.last_fire_ms = 0
        self.cleanup_bound_ms = 0
        self.reexec_times: list[int] = []
        self.next_reexec = 0
        self.reexec_queued = False
        self.prestage_planned = False
        self.stage_pending: set[int] = set()
        self.stage_tickets: dict[int, Ticket] = {}
        self.stage_started_wall = 0.0
        self.stage_event_count = 0
        self.stage_error: BaseException | None = None
        self.destage_tickets: list[Ticket] = []
        self.late_tickets: list[Ticket] = []
        self.purged = False
        self.created_ms = now_ms
        self.idle_armed = False
        self.lateflush_armed = False


class Engine:
    def __init__(self, pipeline: Pipeline, config: EngineConfig):
        self.pipeline = pipeline
        self.config = config
        self.tiered = config.backend == "aion"
        self.results: list[FiringResult] = []
        self.counters = {
            "ingested_normal": 0,
            "ingested_late": 0,
            "dropped_beyond_bound": 0,
            "watermark_regressions": 0,
            "firings_initial": 0,
            "firings_refinement": 0,
            "reexec_skipped_empty": 0,
            "purged_windows": 0,
            "events_processed": 0,
            "firings_aborted": 0,
        }
        self.max_staleness_expected = 0.0
        self.max_staleness_observed = 0.0
        self.firing_wall_s = 0.0
        self.refinement_wall_s = 0.0
        self.refinement_events = 0
        self._ops = {op.name: op for op in pipeline}
        self._runtimes: dict[str, dict[tuple, _Runtime]] = {op.name: {} for op in pipeline}
        self._tombstones: dict[str, set[tuple]] = {op.name: set() for op in pipeline}
        self._by_window_id: dict[str, _Runtime] = {}
        self._op_wm: dict[str, int] = {op.name: -1 for op in pipeline}
        self._histograms: dict[str, LatenessHistogram] = {
            op.name: LatenessHistogram(bin_width_ms=config.histogram_bin_ms) for op in pipeline
        }
        self._estimators: dict[str, PrestageEstimator] = {
            op.name: PrestageEstimator() for op in pipeline
        }
        self._session_trackers = {
            op.name: SessionTracker(op.spec.gap_ms)
            for op in pipeline if op.spec.kind is WindowKind.SESSION
        }
        self._count_trackers = {
            op.name: CountTracker(op.spec.count_n)
            for op in pipeline if op.spec.kind is WindowKind.COUNT
        }
        self._timers: list[tuple[int, int, str, str, tuple]] = []  # (due, seq, kind, op, wkey)
        self._timer_seq = itertools.count()
        self._schedule_cache: dict[tuple, list[float]] = {}
        self._events_since_pressure_check = 0
        self._closed = False
        self._completions: queue.SimpleQueue[Completion] = queue.SimpleQueue()
        self.scheduler: IOScheduler | None = None
        if self.tiered:
            self.scheduler = IOScheduler(
                serialization_workers=config.serialization_workers,
                inject_io_latency_ms=config.inject_io_latency_ms,
                inject_serialize_latency_ms=config.inject_serialize_latency_ms,
                completion_sink=self._completions.put,
            )
            self.scheduler.start()

    # -- window bookkeeping ---------------------------------------------------

    def _assign_keys(self, op: WindowOperator, event: Event) -> list[tuple[int, int]]:
        spec = op.spec
        t = event.event_time
        if spec.kind is WindowKind.TUMBLING:
            start = tumbling_window_start(t, spec.size_ms)
            return [(start, start + spec.size_ms)]
        if spec.kind is WindowKind.SLIDING:
            out = []
            start = t - (t % spec.slide_ms)
            while start > t - spec.size_ms:
                out.append((start, start + spec.size_ms))
                start -= spec.slide_ms
            out.reverse()
            return out
        raise ValueError(f"unsupported spec for fast assignment: {spec.kind}")

    def _new_runtime(self, op: WindowOperator, window: WindowInstance, now_ms: int) -> _Runtime:
        if self.tiered:
            files = WindowFiles.for_window(self.config.state_root, op.name, window.window_id)
            handle = WindowStateHandle(
                window, files,
                mbucket_capacity=self.config.mbucket_capacity,
                block_capacity=self.config.block_capacity,
            )
        else:
            handle = MemoryWindowState(window)
        rt = _Runtime(op, window, handle, now_ms)
        rt.cleanup_bound_ms = self._bound_for_new_window(op, window)
        self._by_window_id[rt.rid] = rt
        return rt

    def _bound_for_new_window(self, op: WindowOperator, window: WindowInstance) -> int:
        if self.config.lateness_mode is LatenessMode.STATIC:
            return self.config.allowed_lateness_ms
        initial = int(self.config.initial_bound_window_factor * window.duration_ms)
        bound = cleanup_bound(
            self._histograms[op.name],
            coverage=self.config.cleanup_coverage,
            delta=self.config.cleanup_delta,
            n_min=self.config.cleanup_n_min,
            initial_bound_ms=initial,
        )
        return bound.bound_ms

    def tracked_bytes_total(self) -> int:
        return sum(
            rt.handle.tracked_bytes
            for per_op in self._runtimes.values()
            for rt in per_op.values()
            if not rt.purged
        )

    def active_window_count(self) -> int:
        return sum(
            1 for per_op in self._runtimes.values() for rt in per_op.values() if not rt.purged
        )

    # -- ingestion --------------------------------------------------------------

    def ingest(self, op_name: str, event: Event, now_ms: int) -> None:
        """Route an event into an operator's windows; late events go to the
        persistent tier, feed the delay histogram, and (under the per-event
        trigger) schedule a low-priority re-execution."""
        op = self._ops[op_name]
        spec = op.spec
        if spec.kind is WindowKind.SESSION:
            self._ingest_session(op, event, now_ms)
            return
        if spec.kind is WindowKind.COUNT:
            self._ingest_count(op, event, now_ms)
            return
        per_op = self._runtimes[op_name]
        tombstones = self._tombstones[op_name]
        wm = self._op_wm[op_name]
        for start, end in self._assign_keys(op, event):
            wkey = (start, end, event.key)
            rt = per_op.get(wkey)
            late = end <= wm
            if rt is None:
                if wkey in tombstones:
                    self.counters["dropped_beyond_bound"] += 1
                    continue
                window = WindowInstance(event.key, start, end)
                if late and now_ms >= end + self._bound_for_new_window(op, window):
                    self.counters["dropped_beyond_bound"] += 1
                    continue
                rt = self._new_runtime(op, window, now_ms)
                per_op[wkey] = rt
                if late:
                    # Window created by a late event: it is already past its
                    # watermark, so it starts life expired and persistent-bound.
                    self._expire_window(rt, now_ms)
            elif late and now_ms >= end + rt.cleanup_bound_ms:
                self.counters["dropped_beyond_bound"] += 1
                continue
            tier = rt.handle.append(event)
            rt.handle.last_activity_ms = now_ms
            rt.events_since_fire += 1
            if late:
                self.counters["ingested_late"] += 1
                rt.late_events_total += 1
                self._histograms[op_name].observe(max(0, now_ms - end))
                self._on_late_event(rt, now_ms)
            else:
                self.counters["ingested_normal"] += 1
            if self.tiered:
                if tier is Tier.PERSISTENT and not rt.lateflush_armed:
                    # Batch window: persistent-tier events are written after
                    # at most one block's worth or late_write_batch_ms.
                    rt.lateflush_armed = True
                    self._push_timer(now_ms + self.config.late_write_batch_ms,
                                     "lateflush", rt)
                self._maybe_flush_outbox(rt, force=False)
                if self.config.policy.kind is not PolicyKind.STANDARD:
                    self._arm_idle_timer(rt, now_ms)
        self._events_since_pressure_check += 1
        if (
            self.config.memory_total_bytes
            and self._events_since_pressure_check >= self.config.pressure_check_every
        ):
            self._events_since_pressure_check = 0
            self._check_memory_pressure(now_ms)

    def _ingest_session(self, op: WindowOperator, event: Event, now_ms: int) -> None:
        merged, absorbed = self._session_trackers[op.name].observe(event)
        per_op = self._runtimes[op.name]
        rt = self._new_runtime(op, merged, now_ms)
        rt.handle.append(event)
        rt.events_since_fire += 1
        for old in absorbed:
            old_rt = per_op.get((old.start, old.end, old.key))
            if old_rt is None:
                continue
            for e in old_rt.handle.iterate(fetch=self._fetch_now):
                rt.handle.append(e)
                rt.events_since_fire += 1
            self._purge_runtime(old_rt, count=False, tombstone=False)
        per_op[(merged.start, merged.end, merged.key)] = rt
        self.counters["ingested_normal"] += 1

    def _ingest_count(self, op: WindowOperator, event: Event, now_ms: int) -> None:
        window, closed = self._count_trackers[op.name].observe(event)
        per_op = self._runtimes[op.name]
        wkey = (window.start, window.end, window.key)
        rt = per_op.get(wkey)
        if rt is None:
            rt = self._new_runtime(op, window, now_ms)
            per_op[wkey] = rt
        rt.handle.append(event)
        rt.events_since_fire += 1
        self.counters["ingested_normal"] += 1
        if closed:
            self._fire(rt, now_ms, refinement=False)
            self._purge_runtime(rt)

    def _on_late_event(self, rt: _Runtime, now_ms: int) -> None:
        if self.config.trigger == "per_event":
            actions = policy_mod.on_late_event(
                rt.handle, self.config.watermark_kind, self.config.policy,
                already_scheduled=rt.reexec_queued,
            ) if self.tiered else (
                [] if rt.reexec_queued else [ScheduleReexecAction(rt.window.window_id)]
            )
            for action in actions:
                if isinstance(action, ScheduleReexecAction):
                    rt.reexec_queued = True
                    self._push_timer(now_ms, "reexec", rt)
                elif isinstance(action, PrestageNowAction) and self.config.prestage_enabled:
                    self._start_prestage(rt)
        elif self.config.watermark_kind is WatermarkKind.PUNCTUATED and self.tiered:
            if self.config.prestage_enabled:
                self._start_prestage(rt)

    # -- watermarks -------------------------------------------------------------

    def advance_watermark(self, wm: Watermark, now_ms: int) -> int:
        """Fire every window whose end the watermark passed (initial firing,
        in end order), then expire it: destage per policy, install its
        refinement schedule and purge deadline. Returns firing count."""
        fired = 0
        self._drain_completions()
        for op in self.pipeline:
            if wm.timestamp < self._op_wm[op.name]:
                self.counters["watermark_regressions"] += 1
                return fired
            self._op_wm[op.name] = wm.timestamp
            if op.spec.kind is WindowKind.SESSION:
                expired = self._session_trackers[op.name].expire(wm.timestamp)
                due = []
                for win in expired:
                    rt = self._runtimes[op.name].get((win.start, win.end, win.key))
                    if rt is not None:
                        due.append(rt)
            else:
                due = [
                    rt for rt in self._runtimes[op.name].values()
                    if not rt.expired and not rt.purged and rt.window.end <= wm.timestamp
                    and op.spec.kind is not WindowKind.COUNT
                ]
            due.sort(key=lambda rt: (rt.window.end, rt.window.start, rt.window.key))
            for rt in due:
                if not rt.fired_initial:
                    self._fire(rt, now_ms, refinement=False)
                    fired += 1
                self._expire_window(rt, now_ms)
        return fired

    def _expire_window(self, rt: _Runtime, now_ms: int) -> None:
        rt.expired = True
        rt.handle.last_activity_ms = now_ms
        if self.tiered:
            for action in policy_mod.on_watermark_passed(rt.handle, self.config.policy):
                self._execute_destage(rt, action)
        lateness = rt.cleanup_bound_ms
        if lateness > 0:
            self._install_reexec_schedule(rt)
            if self.tiered and self.config.prestage_enabled and rt.reexec_times:
                # First re-execution: pessimistic start (preceding window's
                # full expiry), but never later than the first scheduled
                # re-execution; once staging durations are known, the learned
                # lead takes over. Pushed before the re-execution timers so a
                # same-instant prestage runs first.
                first_reexec = rt.reexec_times[0]
                estimator = self._estimators[rt.op.name]
                if estimator.total_staged_events > 0:
                    first_at = plan_prestage(rt.handle, first_reexec, estimator, now_ms)
                else:
                    first_at = min(first_prestage_time(rt.window, lateness), first_reexec)
                self._push_timer(max(now_ms, first_at), "prestage", rt)
                rt.prestage_planned = True
            for due in rt.reexec_times:
                self._push_timer(due, "reexec", rt)
        self._push_timer(rt.window.end + lateness, "purge", rt)

    def _install_reexec_schedule(self, rt: _Runtime) -> None:
        trigger = self.config.trigger
        if trigger == "per_event":
            return
        T = float(rt.cleanup_bound_ms)
        key = (trigger, T, self.config.trigger_bound, self.config.trigger_distribution,
               rt.window.duration_ms)
        offsets = self._schedule_cache.get(key)
        if offsets is None:
            params = StalenessParams(
                T_ms=T, N=max(self.config.expected_late_events, 1e-9),
                bound=self.config.trigger_bound,
            )
            model = self._arrival_model(T, rt.window.duration_ms)
            if trigger == "aion":
                schedule = plan_executions(model, params, grid_bins=self.config.trigger_grid_bins)
            elif trigger == "deltat":
                schedule = baseline_deltat(self.config.trigger_k, T)
            else:
                schedule = baseline_deltaev(self.config.trigger_k, model)
            offsets = schedule.times_ms
            self._schedule_cache[key] = offsets
        rt.reexec_times = [rt.window.end + int(off) for off in offsets]
        rt.next_reexec = 0

    def _arrival_model(self, T: float, window_duration_ms: int):
        name = self.config.trigger_distribution
        if name == "empirical":
            hist = self._histograms[next(iter(self._ops))]
            if hist.n >= self.config.cleanup_n_min:
                from .trigger import EmpiricalModel
                return EmpiricalModel(hist, T)
            name = "lnorm"
        if name == "lnorm":
            span = max(T / max(window_duration_ms, 1), 1.0)
            return make_model("lnorm", T, span_units=span)
        return make_model(name, T)

    # -- firing -------------------------------------------------------------------

    def _fire(self, rt: _Runtime, now_ms: int, refinement: bool) -> None:
        op = rt.op
        handle = rt.handle
        if (
            refinement
            and self.tiered
            and op.mode is OperatorMode.BLOCKING
            and isinstance(handle, WindowStateHandle)
        ):
            self._ensure_staged(rt)
        event_count = handle.total_events
        iterator = handle.iterate(fetch=self._make_fetcher(rt))
        t0 = time.perf_counter()
        try:
            value = op.udf(iterator, rt.window)
        except StorageReadError:
            # Aborted firing: sequence numbers untouched, window re-firable.
            self.counters["firings_aborted"] += 1
            self.firing_wall_s += time.perf_counter() - t0
            return
        wall = time.perf_counter() - t0
        self.firing_wall_s += wall
        self.counters["events_processed"] += event_count
        if refinement:
            self.counters["firings_refinement"] += 1
            self.refinement_wall_s += wall
            self.refinement_events += event_count
            self._note_staleness(rt, now_ms)
        else:
            self.counters["firings_initial"] += 1
        result = FiringResult(
            operator=op.name, window_id=rt.window.window_id, window=rt.window,
            firing_seq=rt.firing_seq, is_refinement=refinement, value=value,
            fired_at_ms=now_ms,
        )
        self.results.append(result)
        rt.firing_seq += 1
        rt.fired_initial = True
        rt.events_since_fire = 0
        rt.last_fire_ms = now_ms
        if refinement:
            self._free_after_reexecution(rt)
        if op.emit is not None:
            for out in op.emit(rt.window, value, result.firing_seq):
                for target in op.downstream:
                    self.ingest(target, out, now_ms)

    def _note_staleness(self, rt: _Runtime, now_ms: int) -> None:
        T = max(rt.cleanup_bound_ms, 1)
        elapsed = max(now_ms - max(rt.last_fire_ms, rt.window.end), 0)
        n = rt.events_since_fire
        expected = elapsed * n / (T * max(self.config.expected_late_events, 1e-9))
        observed = elapsed * n / (T * max(rt.late_events_total, 1))
        self.max_staleness_expected = max(self.max_staleness_expected, expected)
        self.max_staleness_observed = max(self.max_staleness_observed, observed)

    def _make_fetcher(self, rt: _Runtime):
        if not self.tiered:
            return None

        def fetch(handle: WindowStateHandle, position: int) -> Block:
            ticket = rt.stage_tickets.get(position)
            if ticket is None:
                ticket = self._submit_stage_block(rt, position, cache=False)
            # Prefetch ahead of consumption, two blocks deep.
            for ahead in (position + 1, position + 2):
                if ahead < len(handle.p.entries) and ahead not in handle.staged \
                        and ahead not in rt.stage_tickets:
                    self._submit_stage_block(rt, ahead, cache=False)
            block = ticket.wait_block(timeout=300.0)
            rt.stage_tickets.pop(position, None)
            return block

        return fetch

    def _fetch_now(self, handle: WindowStateHandle, position: int) -> Block:
        """Synchronous fetch used outside firings (session merges)."""
        offset, length, count = handle.p.entries[position]
        from .state import decode_block
        return decode_block(handle.p.files.read_block(offset, length))

    # -- storage plumbing -----------------------------------------------------------

    def _execute_destage(self, rt: _Runtime, action: DestageAction) -> None:
        handle = rt.handle
        if not isinstance(handle, WindowStateHandle):
            return
        if action.seal:
            handle.sealed = True
        if handle.phase not in (Phase.ACTIVE, Phase.STAGED):
            self._maybe_flush_outbox(rt, force=True)
            return
        blocks = handle.begin_destage(action.keep_fraction)
        if not blocks:
            self._maybe_flush_outbox(rt, force=True)
            return
        rt.destage_tickets.append(self.scheduler.submit(
            IORequest(RequestKind.DESTAGE, rt.rid, handle.p.files, blocks=blocks)
        ))

    def _maybe_flush_outbox(self, rt: _Runtime, force: bool) -> None:
        handle = rt.handle
        if self._closed or not isinstance(handle, WindowStateHandle) or not handle.outbox:
            return
        # Keep file order consistent with logical append order: late batches
        # wait until an in-flight destage of the same window has drained.
        if handle.inflight_destage:
            return
        if not force and len(handle.outbox) < handle.block_capacity:
            return
        while True:
            block = handle.take_outbox_batch()
            if block is None:
                break
            ticket = self.scheduler.submit(
                IORequest(RequestKind.LATE_WRITE, rt.rid, handle.p.files,
                          blocks=[block])
            )
            rt.late_tickets.append(ticket)
            if not force and len(handle.outbox) < handle.block_capacity:
                break

    def _submit_stage_block(self, rt: _Runtime, position: int, cache: bool) -> Ticket:
        handle = rt.handle
        offset, length, count = handle.p.entries[position]
        ticket = self.scheduler.submit(
            IORequest(RequestKind.STAGE, rt.rid, handle.p.files,
                      read=(position, offset, length, count), cache_on_completion=cache)
        )
        rt.stage_tickets[position] = ticket
        return ticket

    def _start_prestage(self, rt: _Runtime) -> None:
        handle = rt.handle
        if not isinstance(handle, WindowStateHandle) or rt.purged:
            return
        if handle.phase in (Phase.STAGED, Phase.PRESTAGING):
            return
        if rt.destage_tickets:
            # Stage preempts the same window's queued destages: unwritten
            # blocks return to memory and are simply not read back.
            for ticket in rt.destage_tickets:
                self.scheduler.cancel(ticket)
                ticket.done.wait(timeout=60.0)
            rt.destage_tickets.clear()
            self._drain_completions()
            handle.cancel_destage()
            handle.finish_destage()
        self._maybe_flush_outbox(rt, force=True)
        if handle.phase is Phase.ACTIVE:
            return
        plan = handle.begin_stage()
        rt.stage_pending = {position for position, *_ in plan}
        if not rt.stage_pending:
            return
        rt.stage_started_wall = time.perf_counter()
        rt.stage_event_count = sum(count for *_rest, count in plan)
        for position, *_rest in plan:
            self._submit_stage_block(rt, position, cache=True)

    def _ensure_staged(self, rt: _Runtime) -> None:
        handle = rt.handle
        if handle.phase is not Phase.STAGED:
            self._start_prestage(rt)
        deadline = time.monotonic() + 300.0
        while rt.stage_pending and rt.stage_error is None and time.monotonic() < deadline:
            self._drain_completions(block_ms=50)
        if rt.stage_error is not None:
            error, rt.stage_error = rt.stage_error, None
            rt.stage_pending.clear()
            raise StorageReadError(str(error))
        if rt.stage_pending:
            raise StorageReadError(f"stage of {rt.window.window_id} did not complete")

    def _drain_completions(self, block_ms: int = 0) -> None:
        completions = self._completions
        if block_ms and completions.empty():
            try:
                self._apply_completion(completions.get(timeout=block_ms / 1000.0))
            except queue.Empty:
                return
        while not completions.empty():
            self._apply_completion(completions.get_nowait())

    def _apply_completion(self, c: Completion) -> None:
        rt = self._find_runtime(c.window_id)
        if rt is None or rt.purged:
            return
        handle = rt.handle
        if c.kind is RequestKind.DESTAGE:
            if c.error is not None or c.cancelled:
                return  # cancellation is reconciled synchronously by the canceller
            handle.on_destage_block_written(c.offset, c.length, c.count)
            if c.final:
                if c.ticket in rt.destage_tickets:
                    rt.destage_tickets.remove(c.ticket)
                # Another destage of the same window may still be in flight.
                if not handle.inflight_destage:
                    handle.finish_destage()
                    self._maybe_flush_outbox(rt, force=True)
        elif c.kind is RequestKind.LATE_WRITE:
            if c.error is None and not c.cancelled and c.source_block is not None:
                handle.on_late_block_written(c.source_block, c.offset, c.length)
            if c.final and c.ticket in rt.late_tickets:
                rt.late_tickets.remove(c.ticket)
        elif c.kind is RequestKind.STAGE:
            if c.error is not None:
                rt.stage_error = c.error
                rt.stage_pending.discard(c.position)
                rt.stage_tickets.pop(c.position, None)
                return
            if c.block is None:
                return
            if c.ticket.request.cache_on_completion:
                handle.on_block_staged(c.position, c.block)
                rt.stage_tickets.pop(c.position, None)
            if c.position in rt.stage_pending:
                rt.stage_pending.discard(c.position)
                if not rt.stage_pending and rt.stage_event_count:
                    elapsed_ms = (time.perf_counter() - rt.stage_started_wall) * 1000.0
                    self._estimators[rt.op.name].update(rt.stage_event_count, elapsed_ms)
                    rt.stage_event_count = 0

    def _find_runtime(self, window_id: str) -> _Runtime | None:
        return self._by_window_id.get(window_id)

    # -- timers / control --------------------------------------------------------

    def _push_timer(self, due_ms: int, kind: str, rt: _Runtime) -> None:
        heapq.heappush(
            self._timers,
            (int(due_ms), next(self._timer_seq), kind, rt.op.name,
             (rt.window.start, rt.window.end, rt.window.key)),
        )

    def _arm_idle_timer(self, rt: _Runtime, now_ms: int) -> None:
        if rt.idle_armed or rt.expired:
            return
        rt.idle_armed = True
        self._push_timer(now_ms + self.config.policy.tau_ms, "idle", rt)

    def on_time_advance(self, now_ms: int) -> None:
        """Run everything due by ``now_ms``: I/O completions, idle timers,
        prestage starts, re-executions, purges. Current-window firings happen
        in advance_watermark, which the driver calls first at boundaries, so
        re-executions never delay them."""
        if not self._completions.empty():
            self._drain_completions()
        while self._timers and self._timers[0][0] <= now_ms:
            due, _seq, kind, op_name, wkey = heapq.heappop(self._timers)
            rt = self._runtimes[op_name].get(wkey)
            if rt is None or rt.purged:
                continue
            if kind == "purge":
                if should_purge_now(rt, now_ms):
                    self._purge_runtime(rt)
                else:
                    self._push_timer(rt.window.end + rt.cleanup_bound_ms, "purge", rt)
            elif kind == "reexec":
                self._run_reexecution(rt, now_ms)
            elif kind == "prestage":
                if self.config.prestage_enabled and rt.expired:
                    self._start_prestage(rt)
            elif kind == "lateflush":
                rt.lateflush_armed = False
                handle = rt.handle
                if isinstance(handle, WindowStateHandle) and handle.outbox:
                    if handle.inflight_destage:
                        rt.lateflush_armed = True
                        self._push_timer(now_ms + self.config.late_write_batch_ms,
                                         "lateflush", rt)
                    else:
                        self._maybe_flush_outbox(rt, force=True)
            elif kind == "idle":
                rt.idle_armed = False
                if not self.tiered or rt.expired:
                    continue
                actions = policy_mod.on_timer_elapsed(rt.handle, self.config.policy, now_ms)
                if actions:
                    for action in actions:
                        self._execute_destage(rt, action)
                elif rt.handle.phase is Phase.ACTIVE:
                    rt.idle_armed = True
                    self._push_timer(rt.handle.last_activity_ms + self.config.policy.tau_ms,
                                     "idle", rt)

    def _free_after_reexecution(self, rt: _Runtime) -> None:
        """The m-bucket of a past window is freed once its re-execution time
        has passed, whether or not it produced a firing: staged cache dropped,
        and any blocks restored by a stage-cancelled destage shipped again."""
        handle = rt.handle
        if not isinstance(handle, WindowStateHandle):
            return
        if rt.expired and handle.phase is Phase.STAGED and handle.m.current_events:
            self._execute_destage(
                rt, DestageAction(rt.window.window_id, self.config.policy.keep_fraction))
        if handle.staged:
            handle.release_staged()

    def _run_reexecution(self, rt: _Runtime, now_ms: int) -> None:
        rt.reexec_queued = False
        if rt.events_since_fire == 0:
            self.counters["reexec_skipped_empty"] += 1
            self._free_after_reexecution(rt)
        else:
            if self.tiered and self.config.prestage_enabled and rt.stage_pending:
                # Punctuated/planned prestage still in flight: the refinement
                # waits for it rather than hitting storage cold.
                self._ensure_staged(rt)
            self._fire(rt, now_ms, refinement=True)
        # Plan the prestage for the next scheduled re-execution.
        if (
            self.tiered
            and self.config.prestage_enabled
            and rt.reexec_times
        ):
            rt.next_reexec += 1
            if rt.next_reexec < len(rt.reexec_times):
                predicted = rt.reexec_times[rt.next_reexec]
                est = self._estimators[rt.op.name]
                stage_at = plan_prestage(rt.handle, predicted, est, now_ms)
                self._push_timer(stage_at, "prestage", rt)

    def _check_memory_pressure(self, now_ms: int) -> None:
        if not self.tiered or self.config.policy.kind is not PolicyKind.GLOBAL:
            return
        total = self.config.memory_total_bytes
        usage = self.tracked_bytes_total()
        # mu thresholds are available-memory fractions: critical when less
        # than mu_critical of memory remains free, moderate below mu_moderate.
        if usage >= (1.0 - self.config.policy.mu_critical) * total:
            level = PressureLevel.CRITICAL
        elif usage >= (1.0 - self.config.policy.mu_moderate) * total:
            level = PressureLevel.MODERATE
        else:
            return
        by_handle = {}
        for per_op in self._runtimes.values():
            for rt in per_op.values():
                if not rt.purged and isinstance(rt.handle, WindowStateHandle):
                    by_handle[id(rt.handle)] = rt
        actions = policy_mod.on_memory_pressure(
            level, [rt.handle for rt in by_handle.values()], self.config.policy, usage, total)
        for action in actions:
            rt = by_handle.get(id(action.handle))
            if rt is not None:
                self._execute_destage(rt, action)

    def purge_pass(self, now_ms: int) -> int:
        """Purge every non-purged window whose cleanup bound has elapsed;
        queued re-executions for purged windows are cancelled."""
        purged = 0
        for per_op in self._runtimes.values():
            for rt in list(per_op.values()):
                if not rt.purged and rt.expired and should_purge_now(rt, now_ms):
                    self._purge_runtime(rt)
                    purged += 1
        return purged

    def _purge_runtime(self, rt: _Runtime, count: bool = True, tombstone: bool = True) -> None:
        if rt.purged:
            return
        if isinstance(rt.handle, WindowStateHandle):
            for ticket in rt.destage_tickets:
                if not ticket.done.is_set():
                    self.scheduler.cancel(ticket)
                    ticket.done.wait(timeout=60.0)
            rt.destage_tickets.clear()
            for ticket in list(rt.stage_tickets.values()) + rt.late_tickets:
                if not ticket.done.is_set():
                    self.scheduler.cancel(ticket)
            rt.stage_tickets.clear()
            rt.late_tickets.clear()
            self._drain_completions()
            files = rt.handle.purge()
            files.delete()
        else:
            rt.handle.purge()
        rt.purged = True
        rt.reexec_times = []
        wkey = (rt.window.start, rt.window.end, rt.window.key)
        self._runtimes[rt.op.name].pop(wkey, None)
        self._by_window_id.pop(rt.rid, None)
        if tombstone:
            self._tombstones[rt.op.name].add(wkey)
        if count:
            self.counters["purged_windows"] += 1

    # -- shutdown -------------------------------------------------------------------

    def close(self, drain: bool = True) -> None:
        self._closed = True
        if self.scheduler is not None:
            self.scheduler.close(drain=drain)
            self._drain_completions()


def should_purge_now(rt: _Runtime, now_ms: int) -> bool:
    return now_ms >= rt.window.end + rt.cleanup_bound_ms
