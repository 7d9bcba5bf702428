import random

import pytest

from lateflow.core import Event, WatermarkKind, WindowInstance
from lateflow.policy import (
    PolicyConfig,
    PolicyKind,
    PressureLevel,
    PrestageEstimator,
    PrestageNowAction,
    ScheduleReexecAction,
    SelectionRule,
    first_prestage_time,
    on_late_event,
    on_memory_pressure,
    on_timer_elapsed,
    on_watermark_passed,
    plan_prestage,
)
from lateflow.state import Phase, PurgedWindowError, WindowFiles, WindowStateHandle

WIN = WindowInstance("k", 0, 10_000)


def make_handle(tmp_path, name="w", n_events=0, mcap=10_000):
    files = WindowFiles.for_window(tmp_path, "op", name)
    h = WindowStateHandle(WindowInstance(name, 0, 10_000), files, mbucket_capacity=mcap)
    for i in range(n_events):
        h.append(Event(key=name, event_time=i, payload=b"x" * 100))
    return h


class TestWatermarkPassed:
    def test_standard_policy_full_destage(self, tmp_path):
        h = make_handle(tmp_path)
        (action,) = on_watermark_passed(h, PolicyConfig(kind=PolicyKind.STANDARD, rho_min=0.5))
        assert action.keep_fraction == 0.0 and action.seal

    def test_local_policy_keeps_bootstrap_fraction(self, tmp_path):
        h = make_handle(tmp_path, n_events=1_000)
        (action,) = on_watermark_passed(h, PolicyConfig(kind=PolicyKind.LOCAL, rho_min=0.05))
        assert action.keep_fraction == 0.05
        h.sealed = True
        plan = h.begin_destage(action.keep_fraction)
        assert h.m.current_events == 50  # ceil(0.05 * 1000)
        assert sum(len(b.events) for b in plan) == 950

    def test_empty_window_noop_destage(self, tmp_path):
        h = make_handle(tmp_path, n_events=0)
        (action,) = on_watermark_passed(h, PolicyConfig())
        assert h.begin_destage(action.keep_fraction) == []
        assert h.phase is Phase.DESTAGED


class TestLateEvent:
    def test_periodic_schedules_reexec_without_prestage(self, tmp_path):
        h = make_handle(tmp_path)
        h.begin_destage(0.0)
        actions = on_late_event(h, WatermarkKind.PERIODIC, PolicyConfig())
        assert [type(a) for a in actions] == [ScheduleReexecAction]

    def test_punctuated_prestages_immediately(self, tmp_path):
        h = make_handle(tmp_path)
        h.begin_destage(0.0)
        actions = on_late_event(h, WatermarkKind.PUNCTUATED, PolicyConfig())
        assert [type(a) for a in actions] == [ScheduleReexecAction, PrestageNowAction]

    def test_scheduling_is_idempotent(self, tmp_path):
        h = make_handle(tmp_path)
        h.begin_destage(0.0)
        actions = on_late_event(h, WatermarkKind.PERIODIC, PolicyConfig(), already_scheduled=True)
        assert actions == []

    def test_purged_window_raises(self, tmp_path):
        h = make_handle(tmp_path)
        h.purge()
        with pytest.raises(PurgedWindowError):
            on_late_event(h, WatermarkKind.PERIODIC, PolicyConfig())


class TestPlanPrestage:
    def make(self, tmp_path, p_events):
        h = make_handle(tmp_path, n_events=p_events, mcap=10_000)
        h.sealed = True
        # Move everything to the p-bucket index synchronously.
        from lateflow.state import encode_block
        for block in h.begin_destage(0.0):
            data = encode_block(block)
            off, ln = h.p.files.append_block(data, len(block.events))
            h.on_destage_block_written(off, ln, len(block.events))
        h.finish_destage()
        return h

    def test_lead_subtracted(self, tmp_path):
        h = self.make(tmp_path, p_events=100)
        est = PrestageEstimator(per_event_ms=20.0, total_staged_events=100)  # lead = 2000
        assert plan_prestage(h, 10_000, est, now_ms=1_000) == 8_000

    def test_clamped_to_now(self, tmp_path):
        h = self.make(tmp_path, p_events=100)
        est = PrestageEstimator(per_event_ms=20.0, total_staged_events=100)
        assert plan_prestage(h, 10_000, est, now_ms=9_500) == 9_500

    def test_never_after_predicted_reexec(self, tmp_path):
        h = self.make(tmp_path, p_events=10)
        est = PrestageEstimator()
        rng = random.Random(2)
        for _ in range(100):
            predicted = rng.randrange(0, 100_000)
            now = rng.randrange(0, 150_000)
            assert plan_prestage(h, predicted, est, now) <= predicted

    def test_first_reexec_uses_preceding_window_expiry(self):
        win = WindowInstance("k", 5_000, 7_000)
        assert first_prestage_time(win, allowed_lateness_ms=2_000) == 7_000


class TestEstimator:
    def test_single_observation(self):
        est = PrestageEstimator()
        est.update(100, 500.0)
        assert est.per_event_ms == pytest.approx(5.0)

    def test_weighted_mean_of_two_observations(self):
        est = PrestageEstimator()
        est.update(100, 500.0)
        est.update(100, 1_500.0)
        assert est.per_event_ms == pytest.approx(10.0)

    def test_zero_staged_events_is_noop(self):
        est = PrestageEstimator(per_event_ms=3.0, total_staged_events=10)
        est.update(0, 999.0)
        assert est.per_event_ms == 3.0 and est.total_staged_events == 10

    def test_split_invariance(self):
        # One observation vs. the same observation split in two arbitrary parts.
        rng = random.Random(8)
        for _ in range(50):
            n = rng.randrange(2, 10_000)
            elapsed = rng.uniform(1, 50_000)
            cut = rng.randrange(1, n)
            t_cut = elapsed * cut / n * rng.uniform(0.2, 1.8)
            t_cut = min(t_cut, elapsed)
            whole = PrestageEstimator()
            whole.update(n, elapsed)
            split = PrestageEstimator()
            split.update(cut, t_cut)
            split.update(n - cut, elapsed - t_cut)
            assert split.per_event_ms == pytest.approx(whole.per_event_ms)


class TestTimer:
    CFG = PolicyConfig(kind=PolicyKind.LOCAL, rho_min=0.1, tau_ms=5_000)

    def test_not_idle_enough(self, tmp_path):
        h = make_handle(tmp_path, n_events=10)
        h.last_activity_ms = 6_000
        assert on_timer_elapsed(h, self.CFG, now_ms=10_000) == []

    def test_idle_destages_with_bootstrap(self, tmp_path):
        h = make_handle(tmp_path, n_events=10)
        h.last_activity_ms = 1_000
        (action,) = on_timer_elapsed(h, self.CFG, now_ms=7_000)
        assert action.keep_fraction == 0.1

    def test_activity_resets_deadline(self, tmp_path):
        h = make_handle(tmp_path, n_events=10)
        h.last_activity_ms = 1_000
        h.last_activity_ms = 6_500  # new append before the original deadline
        assert on_timer_elapsed(h, self.CFG, now_ms=7_000) == []

    def test_standard_policy_has_no_idle_rule(self, tmp_path):
        h = make_handle(tmp_path, n_events=10)
        h.last_activity_ms = 0
        assert on_timer_elapsed(h, PolicyConfig(), now_ms=10**9) == []


class TestMemoryPressure:
    def sized_handles(self, tmp_path, sizes_mb):
        handles = []
        for i, mb in enumerate(sizes_mb):
            # ~1 KB per event => mb * 1024 events per handle
            h = make_handle(tmp_path, name=f"w{i}", mcap=10**6)
            for j in range(mb * 1024):
                h.append(Event(key=f"w{i}", event_time=j, payload=b"x" * 1000))
            handles.append(h)
        return handles

    def test_moderate_by_size_desc_matches_greedy_oracle(self, tmp_path):
        handles = self.sized_handles(tmp_path, [9, 4, 1])
        usage = sum(h.tracked_bytes for h in handles)
        total = usage + 10 * 1024 * 1024
        # mu thresholds are free-memory fractions: requiring 20MB free with
        # only 10MB free now means ~10MB of state must be destaged.
        cfg = PolicyConfig(kind=PolicyKind.GLOBAL, rho_min=0.0,
                           mu_moderate=20 * 1024 * 1024 / total, mu_critical=0.0)
        actions = on_memory_pressure(PressureLevel.MODERATE, handles, cfg, usage, total)
        # Greedy oracle over the same ordering.
        target = (1.0 - cfg.mu_moderate) * total
        ordered = sorted(handles, key=lambda h: -h.tracked_bytes)
        expected, projected = [], usage
        for h in ordered:
            if projected < target:
                break
            expected.append(h.window.window_id)
            projected -= h.tracked_bytes
        assert [a.window_id for a in actions] == expected
        assert expected == [handles[0].window.window_id, handles[1].window.window_id]

    def test_critical_destages_all_to_bootstrap(self, tmp_path):
        handles = self.sized_handles(tmp_path, [2, 1])
        cfg = PolicyConfig(kind=PolicyKind.GLOBAL, rho_min=0.05)
        actions = on_memory_pressure(PressureLevel.CRITICAL, handles, cfg, 10**9, 10**9)
        assert sorted(a.window_id for a in actions) == sorted(h.window.window_id for h in handles)
        assert all(a.keep_fraction == 0.05 for a in actions)

    def test_below_threshold_no_actions(self, tmp_path):
        handles = self.sized_handles(tmp_path, [1])
        cfg = PolicyConfig(kind=PolicyKind.GLOBAL, mu_moderate=0.5)
        assert on_memory_pressure(PressureLevel.MODERATE, handles, cfg, 10, 10**9) == []

    def test_by_ingestion_asc_order(self, tmp_path):
        handles = self.sized_handles(tmp_path, [1, 1, 1])
        for h, rate in zip(handles, [30.0, 10.0, 20.0]):
            h.ingestion_rate = rate
        cfg = PolicyConfig(kind=PolicyKind.GLOBAL, rho_min=0.0, mu_moderate=1.0,
                           mu_critical=0.0, selection_rule=SelectionRule.BY_INGESTION_ASC)
        actions = on_memory_pressure(
            PressureLevel.MODERATE, handles, cfg,
            sum(h.tracked_bytes for h in handles), 10**9)
        assert [a.window_id for a in actions][:2] == [
            handles[1].window.window_id, handles[2].window.window_id]

    def test_deterministic_given_metadata(self, tmp_path):
        handles = self.sized_handles(tmp_path, [3, 5, 2])
        cfg = PolicyConfig(kind=PolicyKind.GLOBAL, rho_min=0.1, mu_moderate=0.3)
        usage = sum(h.tracked_bytes for h in handles)
        first = on_memory_pressure(PressureLevel.MODERATE, handles, cfg, usage, usage)
        again = on_memory_pressure(PressureLevel.MODERATE, list(reversed(handles)), cfg, usage, usage)
        assert [a.window_id for a in first] == [a.window_id for a in again]


class TestConfigValidation:
    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(rho_min=-0.1),
            dict(rho_min=1.1),
            dict(tau_ms=0),
            dict(mu_critical=0.5, mu_moderate=0.2),
            dict(mu_moderate=1.5),
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            PolicyConfig(**kwargs)
