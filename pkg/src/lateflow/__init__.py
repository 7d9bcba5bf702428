"""lateflow: an embeddable event-time stream processing engine that keeps
window state across a bounded memory tier and persistent storage, prestages
state ahead of predicted re-executions, purges state from an adaptive
late-arrival model, and refines late results on a staleness-minimizing
schedule."""

from .core import (
    Event,
    PeriodicWatermarkSource,
    Watermark,
    WatermarkKind,
    WindowInstance,
    WindowKind,
    WindowSpec,
    assign_windows,
    is_late,
)
from .engine import (
    Engine,
    EngineConfig,
    FiringResult,
    LatenessMode,
    OperatorMode,
    Pipeline,
    WindowOperator,
)
from .lateness import CleanupBound, LatenessHistogram, cleanup_bound, should_purge
from .policy import PolicyConfig, PolicyKind, PrestageEstimator, SelectionRule
from .state import MemoryWindowState, Phase, Tier, WindowStateHandle
from .trigger import (
    ArrivalModel,
    ExecutionSchedule,
    StalenessParams,
    balance,
    baseline_deltaev,
    baseline_deltat,
    executions_to_bound,
    greedy_place,
    make_model,
    max_staleness,
    plan_executions,
    staleness,
)

__all__ = [
    "ArrivalModel", "CleanupBound", "Engine", "EngineConfig", "Event",
    "ExecutionSchedule", "FiringResult", "LatenessHistogram", "LatenessMode",
    "MemoryWindowState", "OperatorMode", "PeriodicWatermarkSource", "Phase",
    "Pipeline", "PolicyConfig", "PolicyKind", "PrestageEstimator",
    "SelectionRule", "StalenessParams", "Tier", "Watermark", "WatermarkKind",
    "WindowInstance", "WindowKind", "WindowOperator", "WindowSpec",
    "WindowStateHandle", "assign_windows", "balance", "baseline_deltaev",
    "baseline_deltat", "cleanup_bound", "executions_to_bound", "greedy_place",
    "is_late", "make_model", "max_staleness", "plan_executions",
    "should_purge", "staleness",
]

__version__ = "0.1.0"
