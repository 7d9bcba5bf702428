import math
import random

import pytest

from lateflow.lateness import (
    CleanupBound,
    EmptyHistogramError,
    LatenessHistogram,
    cleanup_bound,
    should_purge,
)


def cumulative_quantile_oracle(counts, bin_width, p, n):
    """Brute-force cumulative sum over sorted bins."""
    target = p * n
    cum = 0
    for bucket in sorted(counts):
        cum += counts[bucket]
        if cum >= target:
            return (bucket + 1) * bin_width
    raise AssertionError("p > 1")


class TestObserve:
    def test_bins_by_floor_division(self):
        h = LatenessHistogram(bin_width_ms=1_000)
        h.observe(2_500)
        assert h.counts == {2: 1}

    def test_zero_delay_goes_to_bin_zero(self):
        h = LatenessHistogram(bin_width_ms=1_000)
        h.observe(0)
        assert h.counts == {0: 1}

    def test_counts_one_million_observations(self):
        h = LatenessHistogram(bin_width_ms=1_000)
        rng = random.Random(0)
        for _ in range(1_000_000):
            h.observe(rng.randrange(0, 50_000))
        assert h.n == 1_000_000
        assert sum(h.counts.values()) == 1_000_000

    def test_negative_delay_rejected(self):
        with pytest.raises(ValueError):
            LatenessHistogram().observe(-1)


class TestQuantile:
    def test_degenerate_all_mass_in_bin_zero(self):
        h = LatenessHistogram(bin_width_ms=1_000)
        for _ in range(100):
            h.observe(10)
        assert h.quantile(0.99) == 1_000  # upper edge of bin 0

    def test_uniform_bins_median_matches_oracle(self):
        h = LatenessHistogram(bin_width_ms=1_000)
        for bucket in range(10):
            for _ in range(7):
                h.observe(bucket * 1_000 + 500)
        assert h.quantile(0.5) == 5_000
        assert h.quantile(0.5) == cumulative_quantile_oracle(h.counts, 1_000, 0.5, h.n)

    def test_p_one_is_upper_edge_of_max_occupied_bin(self):
        h = LatenessHistogram(bin_width_ms=1_000)
        h.observe(100)
        h.observe(12_345)
        assert h.quantile(1.0) == 13_000

    def test_monotone_in_p(self):
        h = LatenessHistogram(bin_width_ms=500)
        rng = random.Random(4)
        for _ in range(2_000):
            h.observe(int(rng.expovariate(1 / 5_000)))
        values = [h.quantile(p) for p in [0.1, 0.25, 0.5, 0.75, 0.9, 0.99, 1.0]]
        assert values == sorted(values)

    def test_random_quantiles_match_oracle(self):
        rng = random.Random(5)
        h = LatenessHistogram(bin_width_ms=250)
        for _ in range(5_000):
            h.observe(rng.randrange(0, 100_000))
        for _ in range(50):
            p = rng.uniform(0.01, 1.0)
            assert h.quantile(p) == cumulative_quantile_oracle(h.counts, 250, p, h.n)

    def test_empty_histogram_raises(self):
        with pytest.raises(EmptyHistogramError):
            LatenessHistogram().quantile(0.5)


class TestCleanupBound:
    def test_conservative_initial_bound_until_n_min(self):
        h = LatenessHistogram()
        for _ in range(999):
            h.observe(100)
        b = cleanup_bound(h, n_min=1_000, initial_bound_ms=2_000_000)
        assert b.bound_ms == 2_000_000 and b.basis_n == 999

    def test_margin_and_quantile_match_analytic_recomputation(self):
        rng = random.Random(6)
        h = LatenessHistogram(bin_width_ms=1_000)
        for _ in range(20_000):
            h.observe(int(rng.lognormvariate(0, 1) * 10_000))
        b = cleanup_bound(h, coverage=0.99, delta=0.05, n_min=1_000)
        eps = math.sqrt(math.log(2 / 0.05) / (2 * 20_000))
        assert eps == pytest.approx(0.0096, abs=2e-4)
        expected = cumulative_quantile_oracle(h.counts, 1_000, 0.99 + eps, h.n)
        assert b.bound_ms == expected

    def test_full_coverage_clamps_to_max_observed(self):
        h = LatenessHistogram()
        for d in [5, 90_000, 1_234]:
            h.observe(d)
        b = cleanup_bound(h, coverage=1.0, delta=0.05, n_min=1)
        assert b.bound_ms == 90_000

    def test_margin_shrinks_with_n_for_fixed_distribution(self):
        # Same empirical shape at different n: the bound never grows with n.
        bounds = []
        for scale in [1, 5, 25, 125]:
            h = LatenessHistogram(bin_width_ms=1_000)
            for bucket in range(100):
                h.counts[bucket] = 10 * scale  # identical shape, larger n
            h.n = 1_000 * scale
            h.max_observed_ms = 100_000
            bounds.append(cleanup_bound(h, coverage=0.9, delta=0.05, n_min=1).bound_ms)
        assert bounds == sorted(bounds, reverse=True)

    def test_missing_initial_bound_raises(self):
        with pytest.raises(ValueError):
            cleanup_bound(LatenessHistogram(), n_min=10)


class TestShouldPurge:
    BOUND = CleanupBound(bound_ms=50_000, coverage=0.99, confidence=0.05, basis_n=5_000)

    def test_just_before_bound(self):
        assert should_purge(10_000, 59_999, self.BOUND) is False

    def test_at_bound(self):
        assert should_purge(10_000, 60_000, self.BOUND) is True


class TestCsvExport:
    def test_rows_sorted_by_bin_start(self):
        h = LatenessHistogram(bin_width_ms=1_000)
        for d in [5_500, 100, 5_600, 99_000]:
            h.observe(d)
        assert h.to_csv_rows() == [(0, 1), (5_000, 2), (99_000, 1)]
