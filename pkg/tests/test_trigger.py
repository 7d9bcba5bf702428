import itertools
import math
import random
import time

import pytest

from lateflow.lateness import LatenessHistogram
from lateflow.trigger import (
    EmpiricalModel,
    ExecutionSchedule,
    InfeasibleBoundError,
    StalenessParams,
    UniformModel,
    balance,
    baseline_deltaev,
    baseline_deltat,
    executions_to_bound,
    greedy_place,
    make_model,
    mass_quantile_times,
    max_staleness,
    plan_executions,
    staleness,
)

T = 100_000.0
MODELS = ["lnorm", "unif", "norm", "bursts"]


def params(bound=0.1, N=1_000.0):
    return StalenessParams(T_ms=T, N=N, bound=bound)


def interval_st(model, a, b):
    return (b - a) * (model.cdf(b) - model.cdf(a)) / model.T_ms


def eval_schedule(model, times):
    """Independent numeric oracle: staleness of each consecutive interval."""
    prev = 0.0
    out = []
    for t in times:
        out.append(interval_st(model, prev, t))
        prev = t
    return out


class TestStalenessFormula:
    def test_full_interval_is_one(self):
        assert staleness(T, 1_000, params()) == 1.0

    def test_zero_time_or_events_is_zero(self):
        assert staleness(0, 500, params()) == 0.0
        assert staleness(50_000, 0, params()) == 0.0

    def test_direct_evaluation(self):
        assert staleness(10_000, 100, params()) == pytest.approx(0.01)

    def test_bilinear(self):
        rng = random.Random(3)
        for _ in range(50):
            t, n, c = rng.uniform(0, T), rng.uniform(0, 1_000), rng.uniform(0.1, 3)
            assert staleness(c * t, n, params()) == pytest.approx(c * staleness(t, n, params()))
            assert staleness(t, c * n, params()) == pytest.approx(c * staleness(t, n, params()))


class TestArrivalModels:
    @pytest.mark.parametrize("name", MODELS)
    def test_cdf_bounds_and_monotone(self, name):
        m = make_model(name, T)
        assert m.cdf(0) == 0.0 and m.cdf(T) == 1.0
        rng = random.Random(1)
        for _ in range(200):
            a, b = sorted((rng.uniform(0, T), rng.uniform(0, T)))
            assert m.cdf(a) <= m.cdf(b) + 1e-15

    @pytest.mark.parametrize("name", MODELS)
    def test_quantile_inverts_cdf(self, name):
        m = make_model(name, T)
        for p in [0.01, 0.1, 0.5, 0.9, 0.99]:
            assert m.cdf(m.quantile(p)) == pytest.approx(p, abs=1e-6)

    @pytest.mark.parametrize("name", MODELS)
    def test_density_matches_cdf_derivative(self, name):
        m = make_model(name, T)
        h = T * 1e-6
        for frac in [0.1, 0.3, 0.5, 0.8]:
            t = frac * T
            numeric = (m.cdf(t + h) - m.cdf(t - h)) / (2 * h)
            assert m.density(t) == pytest.approx(numeric, rel=1e-3, abs=1e-12)

    def test_lognormal_is_right_skewed(self):
        m = make_model("lnorm", T)
        # Half the mass arrives in the first window units, long tail after.
        assert m.quantile(0.5) < 0.1 * T

    def test_empirical_model_tracks_samples(self):
        rng = random.Random(7)
        hist = LatenessHistogram(bin_width_ms=500)
        samples = sorted(int(rng.lognormvariate(0, 1) * 5_000) for _ in range(20_000))
        for s in samples:
            hist.observe(min(s, int(T)))
        m = EmpiricalModel(hist, T)
        assert m.cdf(0) == 0.0 and m.cdf(T) == 1.0
        median = samples[len(samples) // 2]
        assert abs(m.cdf(median) - 0.5) < 0.02

    def test_unknown_model_name(self):
        with pytest.raises(ValueError):
            make_model("zipf", T)


class TestGreedyPlace:
    def test_uniform_bound_quarter_gives_two_executions(self):
        s = greedy_place(UniformModel(T), params(0.25))
        assert s.k == 2
        # Analytic: equal halves each have st = 0.5 * 0.5 = 0.25.
        assert s.times_ms[0] == pytest.approx(0.5 * T, rel=2e-3)
        for st in eval_schedule(UniformModel(T), s.times_ms):
            assert st == pytest.approx(0.25, abs=2e-3)

    def test_bound_one_single_execution_at_t(self):
        for name in MODELS:
            s = greedy_place(make_model(name, T), params(1.0))
            assert s.times_ms == [T]

    @pytest.mark.parametrize("name", MODELS)
    def test_intervals_respect_bound_plus_grid_slack(self, name):
        m = make_model(name, T)
        rng = random.Random(11)
        for _ in range(10):
            bound = rng.uniform(0.02, 0.5)
            grid = 1_000
            s = greedy_place(m, params(bound), grid_bins=grid)
            step = T / grid
            prev = 0.0
            for t in s.times_ms:
                # One grid step of accumulation slack at most.
                within = interval_st(m, prev, t) <= bound + 1e-12
                shrunk = interval_st(m, prev, max(prev, t - step)) <= bound + 1e-12
                assert within or shrunk
                prev = t

    def test_lnorm_minimality_against_dp_oracle_grid50(self):
        # DP over the same 50-point grid: minimum executions ending at T with
        # every interval staleness <= bound.
        m = make_model("lnorm", T)
        bound, grid = 0.05, 50
        s = greedy_place(m, params(bound), grid_bins=grid)
        points = [i * T / grid for i in range(grid + 1)]
        INF = 10**9
        dp = [INF] * (grid + 1)
        dp[0] = 0
        for j in range(1, grid + 1):
            for i in range(j):
                if interval_st(m, points[i], points[j]) <= bound + 1e-12 and dp[i] + 1 < dp[j]:
                    dp[j] = dp[i] + 1
        assert s.k == dp[grid] == 3

    def test_tiny_grid_exhaustive_minimality(self):
        # grid_bins=12: enumerate every subset of interior grid points.
        m = make_model("lnorm", T)
        bound, grid = 0.2, 12
        s = greedy_place(m, params(bound), grid_bins=grid)
        points = [i * T / grid for i in range(1, grid + 1)]
        best = None
        for r in range(1, len(points) + 1):
            for combo in itertools.combinations(points, r):
                if combo[-1] != T:
                    continue
                if all(st <= bound + 1e-12 for st in eval_schedule(m, list(combo))):
                    best = r
                    break
            if best is not None:
                break
        assert s.k == best == 2

    def test_infeasible_bound_raises(self):
        with pytest.raises(InfeasibleBoundError):
            greedy_place(make_model("lnorm", T), params(0.05), grid_bins=12)

    def test_grid_too_small_rejected(self):
        with pytest.raises(ValueError):
            greedy_place(UniformModel(T), params(0.5), grid_bins=5)


class TestBalance:
    def test_uniform_two_executions_closed_form(self):
        m = UniformModel(T)
        start = ExecutionSchedule([0.3 * T, T])
        s = balance(start, m, params(1.0), eps_std=1e-10)
        assert s.times_ms[0] == pytest.approx(0.5 * T, abs=T * 1e-6)
        st = eval_schedule(m, s.times_ms)
        assert st[0] == pytest.approx(0.25, abs=1e-6) and st[1] == pytest.approx(0.25, abs=1e-6)
        mean = sum(st) / len(st)
        assert math.sqrt(sum((x - mean) ** 2 for x in st) / len(st)) < 1e-9

    def test_already_balanced_schedule_is_fixed_point(self):
        m = UniformModel(T)
        even = baseline_deltat(4, T)
        s = balance(even, m, params(1.0))
        for a, b in zip(s.times_ms, even.times_ms):
            assert a == pytest.approx(b, abs=T * 1e-9)

    def test_lnorm_k5_balance_beats_greedy_max(self):
        # Numeric oracle evaluates both schedules over the same grid.
        m = make_model("lnorm", T)
        p = params(0.015)
        greedy = greedy_place(m, p)
        assert greedy.k == 5
        balanced = balance(greedy, m, p)
        assert balanced.k == 5
        assert max(eval_schedule(m, balanced.times_ms)) < max(eval_schedule(m, greedy.times_ms))

    @pytest.mark.parametrize("name", MODELS)
    def test_never_increases_max_staleness(self, name):
        m = make_model(name, T)
        rng = random.Random(19)
        for _ in range(10):
            k = rng.randrange(1, 12)
            times = sorted(rng.uniform(T * 1e-6, T) for _ in range(k - 1)) + [T]
            times = [t for i, t in enumerate(times) if i == 0 or t > times[i - 1]]
            sched = ExecutionSchedule(times)
            before = max(eval_schedule(m, times))
            after = balance(sched, m, params(1.0))
            assert max(eval_schedule(m, after.times_ms)) <= before + 1e-12
            assert after.k == sched.k

    @pytest.mark.parametrize("name", MODELS)
    def test_converges_under_budget_on_all_models(self, name):
        m = make_model(name, T)
        t0 = time.perf_counter()
        s = balance(None, m, params(0.1), k=8, max_iters=10_000, eps_std=1e-6)
        wall = time.perf_counter() - t0
        assert s.stddev < 1e-6
        assert s.iterations <= 10_000
        assert wall < 1.0

    def test_requires_schedule_or_k(self):
        with pytest.raises(ValueError):
            balance(None, UniformModel(T), params())


class TestBaselines:
    def test_deltat_evenly_spaced(self):
        s = baseline_deltat(4, T)
        assert s.times_ms == [25_000, 50_000, 75_000, 100_000]

    def test_deltaev_uniform_equals_deltat(self):
        m = UniformModel(T)
        ev = baseline_deltaev(4, m)
        dt = baseline_deltat(4, T)
        for a, b in zip(ev.times_ms, dt.times_ms):
            assert a == pytest.approx(b, abs=T * 1e-6)

    def test_deltaev_lnorm_first_time_is_median(self):
        # Independent inverse-CDF oracle by bisection on the model's cdf.
        m = make_model("lnorm", T)
        s = baseline_deltaev(2, m)
        lo, hi = 0.0, T
        for _ in range(200):
            mid = (lo + hi) / 2
            if m.cdf(mid) < 0.5:
                lo = mid
            else:
                hi = mid
        assert s.times_ms[0] == pytest.approx((lo + hi) / 2, abs=T * 1e-6)
        assert s.times_ms[1] == T

    def test_deltaev_is_mass_quantiles(self):
        m = make_model("norm", T)
        s = baseline_deltaev(5, m)
        for i, t in enumerate(s.times_ms[:-1], start=1):
            assert m.cdf(t) == pytest.approx(i / 5, abs=1e-6)

    def test_k_must_be_positive(self):
        with pytest.raises(ValueError):
            baseline_deltat(0, T)
        with pytest.raises(ValueError):
            mass_quantile_times(0, UniformModel(T))


class TestMaxStaleness:
    def test_single_execution_at_t_is_one(self):
        for name in MODELS:
            m = make_model(name, T)
            assert max_staleness(ExecutionSchedule([T]), m, params()) == pytest.approx(1.0)

    def test_uniform_deltat_two_executions(self):
        # Analytic: (T/2)(N/2)/(TN) = 0.25.
        m = UniformModel(T)
        assert max_staleness(baseline_deltat(2, T), m, params()) == pytest.approx(0.25)

    @pytest.mark.parametrize("name", MODELS)
    def test_balanced_max_nonincreasing_in_k(self, name):
        m = make_model(name, T)
        values = [balance(None, m, params(1.0), k=k).max_staleness for k in range(1, 13)]
        for a, b in zip(values, values[1:]):
            assert b <= a + 1e-9


class TestPlanExecutions:
    def test_bound_one_single_execution(self):
        for name in MODELS:
            s = plan_executions(make_model(name, T), params(1.0))
            assert s.k == 1 and s.times_ms == [T]

    def test_uniform_matches_deltat_count(self):
        p = params(0.1)
        s = plan_executions(UniformModel(T), p)
        k_deltat = executions_to_bound("deltat", UniformModel(T), p)
        assert abs(s.k - k_deltat) <= 1

    def test_lnorm_needs_no_more_executions_than_baselines(self):
        m = make_model("lnorm", T)
        for bound in (0.1, 0.05, 0.01):
            p = params(bound)
            k_aion = executions_to_bound("aion", m, p)
            for other in ("deltat", "deltaev"):
                k_other = executions_to_bound(other, m, p)
                assert k_aion is not None
                assert k_other is None or k_aion <= k_other

    def test_propagates_infeasible(self):
        with pytest.raises(InfeasibleBoundError):
            plan_executions(make_model("lnorm", T), params(0.05), grid_bins=12)


class TestExecutionsToBound:
    def test_uniform_all_triggers_agree(self):
        m = UniformModel(T)
        for bound in (0.1, 0.05, 0.01):
            ks = {tr: executions_to_bound(tr, m, params(bound)) for tr in ("aion", "deltat", "deltaev")}
            assert abs(ks["aion"] - ks["deltat"]) <= 1
            assert abs(ks["aion"] - ks["deltaev"]) <= 1

    def test_lnorm_small_bound_defeats_baselines_within_30(self):
        m = make_model("lnorm", T)
        p = params(0.01)
        assert executions_to_bound("aion", m, p) is not None
        assert executions_to_bound("deltat", m, p) is None
        assert executions_to_bound("deltaev", m, p) is None

    def test_unknown_trigger(self):
        with pytest.raises(ValueError):
            executions_to_bound("cron", UniformModel(T), params())
