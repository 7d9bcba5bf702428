"""Empirical late-arrival model and the adaptive state-cleanup bound.

The engine observes the delay of every late event (arrival processing time
minus window end) into a fixed-width histogram. Once enough history exists,
new windows get a purge bound equal to the empirical quantile covering the
requested fraction of delays plus a distribution-free one-sided margin
(so the bound holds with the requested confidence without parametric
assumptions). Until then a conservatively large initial bound applies.
Quantile error is at most one bin width, always rounding up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field


class EmptyHistogramError(ValueError):
    """Quantile of a histogram with no observations."""


@dataclass
class LatenessHistogram:
    bin_width_ms: int = 1_000
    counts: dict[int, int] = field(default_factory=dict)
    n: int = 0
    max_observed_ms: int = 0

    def __post_init__(self) -> None:
        if self.bin_width_ms <= 0:
            raise ValueError("bin_width_ms must be > 0")

    def observe(self, delay_ms: int) -> None:
        if delay_ms < 0:
            raise ValueError("delay must be >= 0")
        bucket = delay_ms // self.bin_width_ms
        self.counts[bucket] = self.counts.get(bucket, 0) + 1
        self.n += 1
        if delay_ms > self.max_observed_ms:
            self.max_observed_ms = delay_ms

    def quantile(self, p: float) -> int:
        """Smallest bin upper edge whose cumulative count reaches p * n."""
        if self.n == 0:
            raise EmptyHistogramError("histogram has no observations")
        if not 0.0 < p <= 1.0:
            raise ValueError("p must be in (0, 1]")
        target = p * self.n
        cumulative = 0
        for bucket in sorted(self.counts):
            cumulative += self.counts[bucket]
            if cumulative >= target:
                return (bucket + 1) * self.bin_width_ms
        return (max(self.counts) + 1) * self.bin_width_ms

    def to_csv_rows(self) -> list[tuple[int, int]]:
        """(bin_start_ms, count) rows for benchmark plots."""
        return [(bucket * self.bin_width_ms, self.counts[bucket])
                for bucket in sorted(self.counts)]


@dataclass(frozen=True)
class CleanupBound:
    bound_ms: int
    coverage: float
    confidence: float
    basis_n: int


def confidence_margin(n: int, delta: float) -> float:
    """Distribution-free one-sided quantile margin: sqrt(ln(2/delta) / 2n)."""
    return math.sqrt(math.log(2.0 / delta) / (2.0 * n))


def cleanup_bound(
    hist: LatenessHistogram,
    coverage: float = 0.99,
    delta: float = 0.05,
    n_min: int = 1_000,
    initial_bound_ms: int | None = None,
) -> CleanupBound:
    """Purge horizon covering ``coverage`` of late arrivals with confidence
    ``1 - delta``; returns the conservative initial bound until ``n_min``
    observations have been collected."""
    if not 0.0 < coverage <= 1.0:
        raise ValueError("coverage must be in (0, 1]")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must be in (0, 1)")
    if hist.n < n_min:
        if initial_bound_ms is None:
            raise ValueError("initial bound required while history is short")
        return CleanupBound(initial_bound_ms, coverage, delta, hist.n)
    p = coverage + confidence_margin(hist.n, delta)
    if p >= 1.0:
        return CleanupBound(hist.max_observed_ms, coverage, delta, hist.n)
    return CleanupBound(hist.quantile(p), coverage, delta, hist.n)


def should_purge(window_end_ms: int, now_ms: int, bound: CleanupBound) -> bool:
    """A window is purgeable once its creation-time bound has elapsed."""
    return now_ms >= window_end_ms + bound.bound_ms
