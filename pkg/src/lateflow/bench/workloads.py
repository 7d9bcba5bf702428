"""Benchmark workloads: synthetic generators and their dataflows.

Four scenarios: two micro-benchmarks (``average`` over random integers,
``bigrams`` over synthetic Zipf-distributed word sequences with variable
sentence length) and two application pipelines (``stockmarket``: sliding
per-symbol aggregates, price-variation alerts, alert counts joined with
tweet-mention counts into a per-window correlation; ``lrb``: a variable
tolling pipeline joining per-segment traffic statistics with accident
detection).

Every source event's payload is padded to the workload's payload size with
seeded random bytes; a small length-prefixed body at the front carries the
actual value. Operator UDFs are multiset functions (math.fsum for float
sums, latest-wins for refined upstream results), so firing values are
identical regardless of event order within a window or the backend's tier
split.

The delay model follows the timestamp rule ``ts = now - windowIndex *
windowDuration`` with windowIndex drawn from LogNormal(0, 1), floored to an
integer and clamped to [0, past_windows].
"""

from __future__ import annotations

import math
import random
import struct
from dataclasses import dataclass
from typing import Callable, Iterator

from ..core import Event, WindowSpec
from ..engine import Pipeline, WindowOperator

PROFILES = ("desk", "paper")

# name -> (max ingestion rate ev/s, window duration s, payload bytes)
PAPER_PROFILE = {
    "average": (10_000, 20, 2_304),
    "bigrams": (5_000, 30, 3_584),
    "stockmarket": (10_000, 30, 1_664),
    "lrb": (10_000, 60, 1_536),
}

# Desk scale: rate / 6.67, duration / 10, payload x6 (per-window byte volume
# ~1/11 of the full profile's, enough for the memory backend to cross a
# 256 MB budget within ten past windows).
DESK_PROFILE = {
    "average": (1_500, 2, 13_824),
    "bigrams": (750, 3, 21_504),
    "stockmarket": (1_500, 3, 9_984),
    "lrb": (1_500, 6, 9_216),
}

WORKLOAD_NAMES = tuple(PAPER_PROFILE)


@dataclass(frozen=True)
class WorkloadSpec:
    name: str
    max_ingestion_rate: int
    window_duration_s: float
    payload_bytes: int
    past_windows: int = 5
    run_watermarks: int = 30
    warmup_watermarks: int = 10

    @property
    def window_duration_ms(self) -> int:
        return int(self.window_duration_s * 1000)

    @property
    def events_per_interval(self) -> int:
        return int(self.max_ingestion_rate * self.window_duration_s)

    @classmethod
    def preset(cls, name: str, profile: str = "desk", **overrides) -> "WorkloadSpec":
        table = DESK_PROFILE if profile == "desk" else PAPER_PROFILE
        if name not in table:
            raise ValueError(f"unknown workload {name!r}; pick one of {WORKLOAD_NAMES}")
        rate, duration, payload = table[name]
        return cls(name, rate, duration, payload, **overrides)


class DelayModel:
    """windowIndex ~ floor(LogNormal(0, 1)), clamped to [0, past_windows]."""

    def __init__(self, past_windows: int, rng: random.Random):
        self.past_windows = past_windows
        self.rng = rng

    def window_index(self) -> int:
        return min(int(self.rng.lognormvariate(0.0, 1.0)), self.past_windows)

    def timestamp(self, now_ms: int, window_duration_ms: int) -> int:
        return max(0, now_ms - self.window_index() * window_duration_ms)

    @staticmethod
    def expected_late_fraction(past_windows: int) -> float:
        """P(1 <= windowIndex), i.e. P(LogNormal(0,1) >= 1) = 0.5."""
        return 0.5 if past_windows > 0 else 0.0


def _phi(z: float) -> float:
    return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))


def pack_body(body: bytes, total_size: int, pad: bytes) -> bytes:
    """Length-prefixed body padded with deterministic bytes to total_size."""
    if len(body) + 2 > total_size:
        raise ValueError(f"body of {len(body)} bytes exceeds payload size {total_size}")
    return struct.pack("!H", len(body)) + body + pad[: total_size - 2 - len(body)]

def unpack_body(payload: bytes) -> bytes:
    (n,) = struct.unpack_from("!H", payload)
    return payload[2:2 + n]


def _fsum_mean(values) -> float:
    values = list(values)
    return math.fsum(values) / len(values) if values else 0.0


def _latest_wins(entries: dict, dedup_key, seq: int, value) -> None:
    old = entries.get(dedup_key)
    if old is None or seq >= old[0]:
        entries[dedup_key] = (seq, value)


# ---------------------------------------------------------------------------
# Workload definitions


@dataclass
class Workload:
    spec: WorkloadSpec
    pipeline: Pipeline
    sources: tuple[str, ...]
    # yields (target operators, key, body), one per generated source event
    generate: Callable[[int], Iterator[tuple[str, str, bytes]]]


def _average_udf(events, window):
    values = [int.from_bytes(unpack_body(e.payload), "big") for e in events]
    return _fsum_mean(values)


def build_average(spec: WorkloadSpec, rng: random.Random) -> Workload:
    pipeline = Pipeline([
        WindowOperator("average", WindowSpec.tumbling(spec.window_duration_ms), _average_udf),
    ])

    def generate(n: int):
        for _ in range(n):
            yield ("average",), "all", rng.getrandbits(32).to_bytes(8, "big")

    return Workload(spec, pipeline, ("average",), generate)


_VOCAB = [f"w{i:04d}" for i in range(1_000)]
_ZIPF_CUM = None


def _zipf_cum_weights():
    global _ZIPF_CUM
    if _ZIPF_CUM is None:
        total = 0.0
        cum = []
        for r in range(len(_VOCAB)):
            total += 1.0 / (r + 1) ** 1.1
            cum.append(total)
        _ZIPF_CUM = cum
    return _ZIPF_CUM


def _bigrams_udf(events, window):
    counts: dict[tuple[str, str], int] = {}
    total = 0
    for e in events:
        words = unpack_body(e.payload).decode("utf-8").split()
        for a, b in zip(words, words[1:]):
            counts[(a, b)] = counts.get((a, b), 0) + 1
            total += 1
    top = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:5]
    return (total, len(counts), tuple(f"{a} {b}:{c}" for (a, b), c in top))


def build_bigrams(spec: WorkloadSpec, rng: random.Random) -> Workload:
    pipeline = Pipeline([
        WindowOperator("bigrams", WindowSpec.tumbling(spec.window_duration_ms), _bigrams_udf),
    ])
    cum = _zipf_cum_weights()

    def generate(n: int):
        for _ in range(n):
            length = rng.randint(4, 16)  # variable sentence length
            words = rng.choices(_VOCAB, cum_weights=cum, k=length)
            yield ("bigrams",), "all", " ".join(words).encode("utf-8")

    return Workload(spec, pipeline, ("bigrams",), generate)


# -- stock market -------------------------------------------------------------

_SYMBOLS = [f"S{i:02d}" for i in range(20)]
ALERT_VARIATION = 0.05


def _rolling_udf(events, window):
    prices = [struct.unpack("!d", unpack_body(e.payload))[0] for e in events]
    return (min(prices), max(prices), _fsum_mean(prices))


def _rolling_emit(window, value, seq):
    lo, hi, mean = value
    body = f"agg|{window.start}|{seq}|{lo!r}|{hi!r}|{mean!r}".encode()
    return [Event(key=window.key, event_time=window.end - 1, payload=body)]


def _alerts_udf(events, window):
    # Inputs are rolling's emitted aggregates (raw bodies); keep the latest
    # version per source sliding window so refinements replace, not add.
    latest: dict = {}
    for e in events:
        parts = e.payload.decode().split("|")
        src_start, seq = int(parts[1]), int(parts[2])
        _latest_wins(latest, src_start, seq, (float(parts[3]), float(parts[4])))
    lows = [v[1][0] for v in latest.values()]
    highs = [v[1][1] for v in latest.values()]
    if not lows or min(lows) <= 0:
        return (False, 0.0)
    variation = (max(highs) - min(lows)) / min(lows)
    return (variation >= ALERT_VARIATION, round(variation, 9))


def _alerts_emit(window, value, seq):
    alerted, variation = value
    if not alerted:
        return []
    body = f"alert|{window.start}|{seq}|{variation!r}".encode()
    return [Event(key=window.key, event_time=window.end - 1, payload=body)]


def _alert_counts_udf(events, window):
    latest: dict = {}
    for e in events:
        parts = e.payload.decode().split("|")
        src_start, seq = int(parts[1]), int(parts[2])
        _latest_wins(latest, src_start, seq, 1)
    return len(latest)


def _counts_emit_factory(side: str):
    def emit(window, value, seq):
        body = f"{side}|{window.key}|{window.start}|{seq}|{int(value)}".encode()
        return [Event(key="all", event_time=window.end - 1, payload=body)]
    return emit


def _mention_counts_udf(events, window):
    return sum(1 for _ in events)


def _correlation_udf(events, window):
    per_side: dict[str, dict] = {"alerts": {}, "mentions": {}}
    for e in events:
        parts = e.payload.decode().split("|")
        side, symbol, src_start = parts[0], parts[1], int(parts[2])
        seq, count = int(parts[3]), int(parts[4])
        _latest_wins(per_side[side], (symbol, src_start), seq, count)
    totals: dict[str, list[float]] = {}
    for i, side in enumerate(("alerts", "mentions")):
        for (symbol, _start), (_seq, count) in per_side[side].items():
            totals.setdefault(symbol, [0.0, 0.0])[i] += count
    if len(totals) < 2:
        return 0.0
    xs = [totals[s][0] for s in sorted(totals)]
    ys = [totals[s][1] for s in sorted(totals)]
    mx, my = _fsum_mean(xs), _fsum_mean(ys)
    cov = math.fsum((x - mx) * (y - my) for x, y in zip(xs, ys))
    vx = math.fsum((x - mx) ** 2 for x in xs)
    vy = math.fsum((y - my) ** 2 for y in ys)
    if vx <= 0 or vy <= 0:
        return 0.0
    return round(cov / math.sqrt(vx * vy), 9)


def build_stockmarket(spec: WorkloadSpec, rng: random.Random) -> Workload:
    wd = spec.window_duration_ms
    slide = max(wd // 6, 1)
    pipeline = Pipeline([
        WindowOperator("rolling", WindowSpec.sliding(slide * 2, slide), _rolling_udf,
                       downstream=("alerts",), emit=_rolling_emit),
        WindowOperator("alerts", WindowSpec.tumbling(wd), _alerts_udf,
                       downstream=("alert_counts",), emit=_alerts_emit),
        WindowOperator("alert_counts", WindowSpec.tumbling(wd), _alert_counts_udf,
                       downstream=("correlation",), emit=_counts_emit_factory("alerts")),
        WindowOperator("mentions", WindowSpec.tumbling(wd), _mention_counts_udf,
                       downstream=("correlation",), emit=_counts_emit_factory("mentions")),
        WindowOperator("correlation", WindowSpec.tumbling(wd), _correlation_udf),
    ])
    prices = {s: 100.0 for s in _SYMBOLS}

    def generate(n: int):
        for _ in range(n):
            symbol = _SYMBOLS[rng.randrange(len(_SYMBOLS))]
            if rng.random() < 0.9:
                prices[symbol] = max(1.0, prices[symbol] * (1.0 + rng.uniform(-0.04, 0.04)))
                yield ("rolling",), symbol, struct.pack("!d", prices[symbol])
            else:
                yield ("mentions",), symbol, b"t"

    return Workload(spec, pipeline, ("rolling", "mentions"), generate)


# -- linear road --------------------------------------------------------------

LRB_SEGMENTS = 20
LRB_XWAYS = 2
LRB_FLEET = 300
LRB_TOLL_THRESHOLD = 10


def _segstats_udf(events, window):
    vehicles: set[str] = set()
    speeds = []
    for e in events:
        vid, speed = unpack_body(e.payload).decode().split("|")
        vehicles.add(vid)
        speeds.append(float(speed))
    return (len(vehicles), round(_fsum_mean(speeds), 9))


def _segstats_emit(window, value, seq):
    count, avg = value
    body = f"stats|{window.start}|{seq}|{count}|{avg!r}".encode()
    return [Event(key=window.key, event_time=window.end - 1, payload=body)]


def _accidents_udf(events, window):
    zero_counts: dict[str, int] = {}
    for e in events:
        vid, speed = unpack_body(e.payload).decode().split("|")
        if float(speed) == 0.0:
            zero_counts[vid] = zero_counts.get(vid, 0) + 1
    return any(c >= 2 for c in zero_counts.values())


def _accidents_emit(window, value, seq):
    body = f"acc|{window.start}|{seq}|{int(value)}".encode()
    return [Event(key=window.key, event_time=window.end - 1, payload=body)]


def _toll_udf(events, window):
    latest: dict = {}
    for e in events:
        parts = e.payload.decode().split("|")
        src_start, seq = int(parts[1]), int(parts[2])
        _latest_wins(latest, (parts[0], src_start), seq, parts[3:])
    accident = any(
        value[0] == "1" for (side, _), (_seq, value) in latest.items() if side == "acc"
    )
    vehicles = sum(
        int(value[0]) for (side, _), (_seq, value) in latest.items() if side == "stats"
    )
    if accident or vehicles < LRB_TOLL_THRESHOLD:
        toll = 0
    else:
        toll = 2 * (vehicles - LRB_TOLL_THRESHOLD) ** 2
    return (toll, vehicles, accident)


def build_lrb(spec: WorkloadSpec, rng: random.Random) -> Workload:
    wd = spec.window_duration_ms
    pipeline = Pipeline([
        WindowOperator("segstats", WindowSpec.tumbling(wd), _segstats_udf,
                       downstream=("tolls",), emit=_segstats_emit),
        WindowOperator("accidents", WindowSpec.tumbling(wd), _accidents_udf,
                       downstream=("tolls",), emit=_accidents_emit),
        WindowOperator("tolls", WindowSpec.tumbling(wd), _toll_udf),
    ])
    fleet = [
        {"xway": rng.randrange(LRB_XWAYS), "seg": rng.randrange(LRB_SEGMENTS), "stopped": 0}
        for _ in range(LRB_FLEET)
    ]

    def generate(n: int):
        for _ in range(n):
            vid = rng.randrange(LRB_FLEET)
            v = fleet[vid]
            if v["stopped"] > 0:
                v["stopped"] -= 1
                speed = 0
            else:
                if rng.random() < 0.002:
                    v["stopped"] = 5
                    speed = 0
                else:
                    if rng.random() < 0.3:
                        v["seg"] = (v["seg"] + 1) % LRB_SEGMENTS
                    speed = max(5, int(rng.gauss(60, 15)))
            key = f"{v['xway']}-{v['seg']}"
            body = f"v{vid}|{speed}".encode()
            yield ("segstats", "accidents"), key, body

    return Workload(spec, pipeline, ("segstats", "accidents"), generate)


BUILDERS = {
    "average": build_average,
    "bigrams": build_bigrams,
    "stockmarket": build_stockmarket,
    "lrb": build_lrb,
}


def build_workload(spec: WorkloadSpec, rng: random.Random) -> Workload:
    return BUILDERS[spec.name](spec, rng)
