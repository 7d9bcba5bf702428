"""Transfer policies: when window state moves between the memory and
persistent tiers.

The standard policy destages a window fully when the watermark passes its
end and re-stages it ahead of predicted re-executions. The local policy
keeps a bootstrap fraction in memory and destages idle windows; the global
policy additionally reacts to system-wide memory pressure.

Policies are pure decision logic: every operation returns a list of actions
for the engine to execute through the I/O scheduler, and never touches
storage itself.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .core import WatermarkKind, WindowInstance
from .state import Phase, PurgedWindowError, WindowStateHandle


class PolicyKind(enum.Enum):
    STANDARD = "standard"
    LOCAL = "local"
    GLOBAL = "global"


class SelectionRule(enum.Enum):
    BY_SIZE_DESC = "by_size_desc"
    BY_INGESTION_ASC = "by_ingestion_asc"


class PressureLevel(enum.Enum):
    MODERATE = "moderate"
    CRITICAL = "critical"


class SignalKind(enum.Enum):
    WINDOW_TRIGGERED = "window_triggered"
    WATERMARK_PASSED = "watermark_passed"
    LATE_EVENT_ARRIVED = "late_event_arrived"
    TIMER_ELAPSED = "timer_elapsed"
    MEMORY_PRESSURE = "memory_pressure"


@dataclass(frozen=True)
class PolicySignal:
    kind: SignalKind
    window_id: str
    now_ms: int
    pressure: PressureLevel | None = None


@dataclass
class PolicyConfig:
    kind: PolicyKind = PolicyKind.STANDARD
    rho_min: float = 0.0
    tau_ms: int = 60_000
    mu_moderate: float = 0.25   # non-paper default, see ledger
    mu_critical: float = 0.10
    selection_rule: SelectionRule = SelectionRule.BY_SIZE_DESC

    def __post_init__(self) -> None:
        if not 0.0 <= self.rho_min <= 1.0:
            raise ValueError("rho_min must be in [0, 1]")
        if self.tau_ms <= 0:
            raise ValueError("tau_ms must be > 0")
        if not 0.0 <= self.mu_critical <= self.mu_moderate <= 1.0:
            raise ValueError("need 0 <= mu_critical <= mu_moderate <= 1")

    @property
    def keep_fraction(self) -> float:
        """Bootstrap fraction retained on destage (0 under the standard policy)."""
        return self.rho_min if self.kind is not PolicyKind.STANDARD else 0.0


@dataclass
class DestageAction:
    window_id: str
    keep_fraction: float
    seal: bool = False  # expired windows stop taking memory-tier appends
    handle: WindowStateHandle | None = None  # window_id alone is not unique across operators


@dataclass
class ScheduleReexecAction:
    window_id: str


@dataclass
class PrestageNowAction:
    window_id: str


Action = DestageAction | ScheduleReexecAction | PrestageNowAction


@dataclass
class PrestageEstimator:
    """Running estimate of staging cost, weighted by staged event count.

    ``per_event_ms`` is total observed staging time divided by total staged
    events; the planning lead for a window scales it by the window's current
    p-bucket size.
    """

    per_event_ms: float = 0.0
    total_staged_events: int = 0

    def update(self, staged_events: int, elapsed_ms: float) -> None:
        if staged_events <= 0:
            return
        total = self.total_staged_events
        self.per_event_ms = (self.per_event_ms * total + elapsed_ms) / (total + staged_events)
        self.total_staged_events = total + staged_events

    def lead_ms(self, event_count: int) -> float:
        return self.per_event_ms * event_count


def on_watermark_passed(handle: WindowStateHandle, config: PolicyConfig) -> list[Action]:
    """The window expired: destage it, keeping the bootstrap set if the
    local/global policy is active."""
    return [DestageAction(handle.window.window_id, config.keep_fraction, seal=True)]


def on_late_event(
    handle: WindowStateHandle,
    watermark_kind: WatermarkKind,
    config: PolicyConfig,
    already_scheduled: bool = False,
) -> list[Action]:
    """Schedule a low-priority re-execution; with punctuated watermarks the
    late event itself announces the re-execution, so prestage immediately."""
    if handle.phase is Phase.PURGED:
        raise PurgedWindowError(f"late event for purged window {handle.window.window_id}")
    actions: list[Action] = []
    if not already_scheduled:
        actions.append(ScheduleReexecAction(handle.window.window_id))
    if watermark_kind is WatermarkKind.PUNCTUATED:
        actions.append(PrestageNowAction(handle.window.window_id))
    return actions


def plan_prestage(
    handle: WindowStateHandle,
    predicted_reexec_ms: int,
    estimator: PrestageEstimator,
    now_ms: int,
) -> int:
    """Time to start staging so the data is resident by the re-execution.

    Never later than the predicted re-execution itself; an overdue
    re-execution stages immediately.
    """
    lead = estimator.lead_ms(handle.p.total_events)
    return min(max(now_ms, int(predicted_reexec_ms - lead)), predicted_reexec_ms)


def first_prestage_time(window: WindowInstance, allowed_lateness_ms: int) -> int:
    """Pessimistic prestage point for a window's first re-execution: when the
    immediately preceding window fully expires, lateness included."""
    return window.start + allowed_lateness_ms


def on_timer_elapsed(
    handle: WindowStateHandle, config: PolicyConfig, now_ms: int
) -> list[Action]:
    """Idle rule: destage (keeping the bootstrap set) after tau of
    processing time without appends or watermarks."""
    if config.kind is PolicyKind.STANDARD:
        return []
    if now_ms - handle.last_activity_ms < config.tau_ms:
        return []
    if handle.phase not in (Phase.ACTIVE, Phase.STAGED) or handle.m.current_events == 0:
        return []
    return [DestageAction(handle.window.window_id, config.rho_min)]


def on_memory_pressure(
    level: PressureLevel,
    all_handles: list[WindowStateHandle],
    config: PolicyConfig,
    usage_bytes: int,
    memory_total_bytes: int,
) -> list[Action]:
    """Global rules: under moderate pressure destage windows one at a time,
    ordered by the selection rule, until at least mu_moderate of memory is
    free again; under critical pressure (less than mu_critical free) destage
    everything to its bootstrap set. The mu thresholds are available-memory
    fractions."""
    candidates = [
        h for h in all_handles
        if h.phase in (Phase.ACTIVE, Phase.STAGED) and h.m.current_events > 0
    ]
    if level is PressureLevel.CRITICAL:
        return [DestageAction(h.window.window_id, config.rho_min, handle=h)
                for h in candidates]
    target = (1.0 - config.mu_moderate) * memory_total_bytes
    if usage_bytes < target:
        return []
    if config.selection_rule is SelectionRule.BY_SIZE_DESC:
        candidates.sort(key=lambda h: (-h.tracked_bytes, h.window.window_id))
    else:
        candidates.sort(key=lambda h: (h.ingestion_rate, h.window.window_id))
    actions: list[Action] = []
    projected = usage_bytes
    for handle in candidates:
        if projected < target:
            break
        savings = int(handle.tracked_bytes * (1.0 - config.rho_min))
        actions.append(DestageAction(handle.window.window_id, config.rho_min, handle=handle))
        projected -= savings
    return actions
