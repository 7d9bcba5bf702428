"""Events, windows, watermarks, and window assignment.

Time semantics used by every other module: all timestamps are integer
milliseconds since epoch, windows are half-open intervals ``[start, end)``,
and an event is *late* once the watermark has passed the end of every
window it belongs to.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field


class WatermarkKind(enum.Enum):
    PERIODIC = "periodic"
    PUNCTUATED = "punctuated"


class WindowKind(enum.Enum):
    TUMBLING = "tumbling"
    SLIDING = "sliding"
    SESSION = "session"
    COUNT = "count"


@dataclass(frozen=True, slots=True)
class Event:
    """A keyed, event-timestamped record with an opaque payload."""

    key: str
    event_time: int
    payload: bytes

    def __post_init__(self) -> None:
        if self.event_time < 0:
            raise ValueError(f"event_time must be >= 0, got {self.event_time}")

    @property
    def payload_size(self) -> int:
        return len(self.payload)


@dataclass(frozen=True, slots=True)
class Watermark:
    """Assertion that all events with timestamp <= ``timestamp`` have arrived."""

    timestamp: int
    kind: WatermarkKind = WatermarkKind.PERIODIC


@dataclass(frozen=True, slots=True)
class WindowSpec:
    """Windowing rule: one of Tumbling(size), Sliding(size, slide),
    Session(gap), Count(n)."""

    kind: WindowKind
    size_ms: int = 0
    slide_ms: int = 0
    gap_ms: int = 0
    count_n: int = 0

    def __post_init__(self) -> None:
        if self.kind is WindowKind.TUMBLING:
            if self.size_ms <= 0:
                raise ValueError("tumbling window size must be > 0")
        elif self.kind is WindowKind.SLIDING:
            if self.size_ms <= 0 or not (0 < self.slide_ms <= self.size_ms):
                raise ValueError("sliding window requires 0 < slide <= size")
        elif self.kind is WindowKind.SESSION:
            if self.gap_ms <= 0:
                raise ValueError("session gap must be > 0")
        elif self.kind is WindowKind.COUNT:
            if self.count_n <= 0:
                raise ValueError("count window n must be > 0")

    @classmethod
    def tumbling(cls, size_ms: int) -> "WindowSpec":
        return cls(WindowKind.TUMBLING, size_ms=size_ms)

    @classmethod
    def sliding(cls, size_ms: int, slide_ms: int) -> "WindowSpec":
        return cls(WindowKind.SLIDING, size_ms=size_ms, slide_ms=slide_ms)

    @classmethod
    def session(cls, gap_ms: int) -> "WindowSpec":
        return cls(WindowKind.SESSION, gap_ms=gap_ms)

    @classmethod
    def count(cls, n: int) -> "WindowSpec":
        return cls(WindowKind.COUNT, count_n=n)


@dataclass(frozen=True, slots=True)
class WindowInstance:
    """One concrete window ``[start, end)`` for one key.

    ``window_id`` is unique per (key, start, end) and safe to use as a
    file name component (the key is hex-encoded).
    """

    key: str
    start: int
    end: int

    def __post_init__(self) -> None:
        if self.start >= self.end:
            raise ValueError(f"window start {self.start} must be < end {self.end}")

    @property
    def window_id(self) -> str:
        return f"{self.start}-{self.end}-{self.key.encode('utf-8').hex()}"

    @property
    def duration_ms(self) -> int:
        return self.end - self.start

    def intersects(self, other: "WindowInstance") -> bool:
        return self.start <= other.end and other.start <= self.end

    def cover(self, other: "WindowInstance") -> "WindowInstance":
        return WindowInstance(self.key, min(self.start, other.start), max(self.end, other.end))


def tumbling_window_start(timestamp: int, size_ms: int) -> int:
    return timestamp - (timestamp % size_ms)


def assign_windows(event: Event, spec: WindowSpec) -> list[WindowInstance]:
    """Return every time window containing ``event`` under ``spec``.

    Pure function for Tumbling/Sliding/Session (a session assignment is the
    event's singleton proto-window, merged later by :class:`SessionTracker`).
    Count windows are stateful; use :class:`CountTracker`.
    """
    t = event.event_time
    if spec.kind is WindowKind.TUMBLING:
        start = tumbling_window_start(t, spec.size_ms)
        return [WindowInstance(event.key, start, start + spec.size_ms)]
    if spec.kind is WindowKind.SLIDING:
        last_start = t - (t % spec.slide_ms)
        windows = []
        start = last_start
        while start > t - spec.size_ms:
            windows.append(WindowInstance(event.key, start, start + spec.size_ms))
            start -= spec.slide_ms
        windows.reverse()
        return windows
    if spec.kind is WindowKind.SESSION:
        return [WindowInstance(event.key, t, t + spec.gap_ms)]
    raise ValueError("count windows require a CountTracker")


def is_late(event: Event, current_watermark: Watermark, spec: WindowSpec) -> bool:
    """True iff every window assigned to ``event`` has already expired."""
    if spec.kind is WindowKind.COUNT:
        return False
    return all(w.end <= current_watermark.timestamp for w in assign_windows(event, spec))


class SessionTracker:
    """Per-key session windows, merged eagerly on overlap.

    ``observe`` returns the merged window the event now belongs to plus the
    list of previously tracked windows that were absorbed by the merge.
    """

    def __init__(self, gap_ms: int):
        if gap_ms <= 0:
            raise ValueError("session gap must be > 0")
        self.gap_ms = gap_ms
        self._open: dict[str, list[WindowInstance]] = {}

    def observe(self, event: Event) -> tuple[WindowInstance, list[WindowInstance]]:
        proto = WindowInstance(event.key, event.event_time, event.event_time + self.gap_ms)
        sessions = self._open.setdefault(event.key, [])
        merged = proto
        absorbed = []
        survivors = []
        for win in sessions:
            if win.intersects(merged):
                merged = merged.cover(win)
                absorbed.append(win)
            else:
                survivors.append(win)
        survivors.append(merged)
        survivors.sort(key=lambda w: w.start)
        self._open[event.key] = survivors
        return merged, absorbed

    def expire(self, watermark_ts: int) -> list[WindowInstance]:
        """Remove and return sessions whose end has passed the watermark."""
        expired = []
        for key, sessions in self._open.items():
            keep = []
            for win in sessions:
                (expired if win.end <= watermark_ts else keep).append(win)
            self._open[key] = keep
        return sorted(expired, key=lambda w: (w.end, w.start))


class CountTracker:
    """Per-key count windows: the n-th append closes the window."""

    def __init__(self, n: int):
        if n <= 0:
            raise ValueError("count window n must be > 0")
        self.n = n
        self._counts: dict[str, int] = {}
        self._seq: dict[str, int] = {}

    def observe(self, event: Event) -> tuple[WindowInstance, bool]:
        """Return (open window for the event's key, window_closed)."""
        seq = self._seq.setdefault(event.key, 0)
        # Count windows carry no time span; identify them by sequence number.
        win = WindowInstance(event.key, seq * self.n, (seq + 1) * self.n)
        count = self._counts.get(event.key, 0) + 1
        if count >= self.n:
            self._counts[event.key] = 0
            self._seq[event.key] = seq + 1
            return win, True
        self._counts[event.key] = count
        return win, False


@dataclass
class PeriodicWatermarkSource:
    """Emits ``max observed event_time - delay_allowance`` every ``period_ms``
    of processing time. Emits nothing until the first event is seen."""

    period_ms: int
    delay_allowance_ms: int = 0
    _max_event_time: int | None = field(default=None, repr=False)
    _last_emit_at: int | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.period_ms <= 0:
            raise ValueError("watermark period must be > 0")

    def observe(self, event_time: int) -> None:
        if self._max_event_time is None or event_time > self._max_event_time:
            self._max_event_time = event_time

    def poll(self, processing_now_ms: int) -> Watermark | None:
        if self._max_event_time is None:
            return None
        if self._last_emit_at is not None and processing_now_ms - self._last_emit_at < self.period_ms:
            return None
        self._last_emit_at = processing_now_ms
        return Watermark(self._max_event_time - self.delay_allowance_ms, WatermarkKind.PERIODIC)
