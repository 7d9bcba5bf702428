"""Staleness-minimizing re-execution trigger for past windows.

Staleness between consecutive executions is ``st = t * n / (T * N)``: the
product of elapsed time and accumulated late events since the last
execution, normalized by the lateness horizon ``T`` and the total expected
late events ``N``. Given an arrival model (a CDF of late-arrival times over
``[0, T]``), this module:

* places the minimum number of executions whose interval staleness stays
  within a bound, by scanning a discretized timeline and placing an
  execution at the first violating instant (``greedy_place``);
* balances a schedule so staleness is equal across intervals, by sweeping
  the interior execution times and moving each one toward the point that
  equalizes the staleness of its two neighbouring intervals, damped by 0.5
  (``balance``) -- for planning, the expected interval mass comes from the
  model's CDF, so the absolute event count cancels;
* provides the ``deltat`` (uniform in time) and ``deltaev`` (uniform in
  event mass) baseline triggers.

All computation is pure and side-effect free.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field

from .lateness import LatenessHistogram


class InfeasibleBoundError(ValueError):
    """A single grid step already violates the staleness bound."""


@dataclass(frozen=True)
class StalenessParams:
    """T: maximum allowed lateness; N: expected total late events;
    bound: maximum tolerated staleness per interval."""

    T_ms: float
    N: float
    bound: float = 0.1

    def __post_init__(self) -> None:
        if self.T_ms <= 0 or self.N <= 0:
            raise ValueError("T_ms and N must be > 0")
        if not 0.0 < self.bound <= 1.0:
            raise ValueError("bound must be in (0, 1]")


def staleness(t_ms: float, n: float, params: StalenessParams) -> float:
    """st = t * n / (T * N)."""
    return (t_ms * n) / (params.T_ms * params.N)


# ---------------------------------------------------------------------------
# Arrival models: normalized CDFs over [0, T]


def _phi(z: float) -> float:
    return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))


class ArrivalModel:
    """Distribution of late-arrival times over the support [0, T]."""

    T_ms: float

    def cdf(self, t_ms: float) -> float:
        raise NotImplementedError

    def density(self, t_ms: float) -> float:
        h = max(self.T_ms * 1e-7, 1e-9)
        lo = max(0.0, t_ms - h)
        hi = min(self.T_ms, t_ms + h)
        return (self.cdf(hi) - self.cdf(lo)) / (hi - lo)

    def quantile(self, p: float) -> float:
        """Numeric inverse CDF by bisection."""
        if not 0.0 <= p <= 1.0:
            raise ValueError("p must be in [0, 1]")
        if p <= 0.0:
            return 0.0
        if p >= 1.0:
            return self.T_ms
        lo, hi = 0.0, self.T_ms
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if self.cdf(mid) < p:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    def interval_mass(self, a: float, b: float) -> float:
        return self.cdf(b) - self.cdf(a)


class UniformModel(ArrivalModel):
    def __init__(self, T_ms: float):
        self.T_ms = float(T_ms)

    def cdf(self, t_ms: float) -> float:
        return min(max(t_ms / self.T_ms, 0.0), 1.0)

    def density(self, t_ms: float) -> float:
        return 1.0 / self.T_ms

    def quantile(self, p: float) -> float:
        return p * self.T_ms


class LogNormalModel(ArrivalModel):
    """Log-normal delays measured in window-duration units, truncated at T.

    ``span_units`` is the horizon expressed in those units (T equals
    span_units window durations); mu/sigma default to 0/1.
    """

    def __init__(self, T_ms: float, span_units: float = 30.0, mu: float = 0.0, sigma: float = 1.0):
        if span_units <= 0 or sigma <= 0:
            raise ValueError("span_units and sigma must be > 0")
        self.T_ms = float(T_ms)
        self.span_units = float(span_units)
        self.mu = mu
        self.sigma = sigma
        self._unit = self.T_ms / self.span_units
        self._norm = _phi((math.log(self.span_units) - mu) / sigma)

    def cdf(self, t_ms: float) -> float:
        if t_ms <= 0.0:
            return 0.0
        if t_ms >= self.T_ms:
            return 1.0
        x = t_ms / self._unit
        return _phi((math.log(x) - self.mu) / self.sigma) / self._norm

    def density(self, t_ms: float) -> float:
        if t_ms <= 0.0 or t_ms >= self.T_ms:
            return 0.0
        x = t_ms / self._unit
        z = (math.log(x) - self.mu) / self.sigma
        pdf = math.exp(-0.5 * z * z) / (x * self.sigma * math.sqrt(2.0 * math.pi))
        return pdf / (self._norm * self._unit)


class NormalModel(ArrivalModel):
    def __init__(self, T_ms: float, mu: float | None = None, sigma: float | None = None):
        self.T_ms = float(T_ms)
        self.mu = self.T_ms * 0.5 if mu is None else mu
        self.sigma = self.T_ms * 0.15 if sigma is None else sigma
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        self._lo = _phi((0.0 - self.mu) / self.sigma)
        self._norm = _phi((self.T_ms - self.mu) / self.sigma) - self._lo

    def cdf(self, t_ms: float) -> float:
        if t_ms <= 0.0:
            return 0.0
        if t_ms >= self.T_ms:
            return 1.0
        return (_phi((t_ms - self.mu) / self.sigma) - self._lo) / self._norm

    def density(self, t_ms: float) -> float:
        if t_ms <= 0.0 or t_ms >= self.T_ms:
            return 0.0
        z = (t_ms - self.mu) / self.sigma
        return math.exp(-0.5 * z * z) / (self.sigma * math.sqrt(2.0 * math.pi)) / self._norm


class BurstsModel(ArrivalModel):
    """Equal-weight mixture of Normals at 0.2/0.5/0.8 of T with sigma 0.05 T,
    truncated to [0, T]."""

    def __init__(self, T_ms: float, centers: tuple[float, ...] = (0.2, 0.5, 0.8),
                 sigma_frac: float = 0.05):
        self.T_ms = float(T_ms)
        self.centers = [c * self.T_ms for c in centers]
        self.sigma = sigma_frac * self.T_ms
        self._lo = self._mix(0.0)
        self._norm = self._mix(self.T_ms) - self._lo

    def _mix(self, t: float) -> float:
        return sum(_phi((t - c) / self.sigma) for c in self.centers) / len(self.centers)

    def cdf(self, t_ms: float) -> float:
        if t_ms <= 0.0:
            return 0.0
        if t_ms >= self.T_ms:
            return 1.0
        return (self._mix(t_ms) - self._lo) / self._norm

    def density(self, t_ms: float) -> float:
        if t_ms <= 0.0 or t_ms >= self.T_ms:
            return 0.0
        total = 0.0
        for c in self.centers:
            z = (t_ms - c) / self.sigma
            total += math.exp(-0.5 * z * z) / (self.sigma * math.sqrt(2.0 * math.pi))
        return total / len(self.centers) / self._norm


class EmpiricalModel(ArrivalModel):
    """Piecewise-linear CDF from a lateness histogram, truncated at T."""

    def __init__(self, hist: LatenessHistogram, T_ms: float):
        if hist.n == 0:
            raise ValueError("empirical model needs observations")
        self.T_ms = float(T_ms)
        edges = [0.0]
        cums = [0.0]
        cum = 0
        for bucket in sorted(hist.counts):
            edge = min((bucket + 1) * hist.bin_width_ms, self.T_ms)
            cum += hist.counts[bucket]
            if edge <= edges[-1]:
                cums[-1] = float(cum)
                continue
            edges.append(float(edge))
            cums.append(float(cum))
        if edges[-1] < self.T_ms:
            edges.append(self.T_ms)
            cums.append(float(cum))
        self._edges = edges
        self._cums = [c / cums[-1] for c in cums]

    def cdf(self, t_ms: float) -> float:
        if t_ms <= 0.0:
            return 0.0
        if t_ms >= self.T_ms:
            return 1.0
        i = bisect.bisect_right(self._edges, t_ms)
        x0, x1 = self._edges[i - 1], self._edges[i]
        y0, y1 = self._cums[i - 1], self._cums[i]
        return y0 + (y1 - y0) * (t_ms - x0) / (x1 - x0)


MODEL_NAMES = {
    "lnorm": LogNormalModel,
    "unif": UniformModel,
    "norm": NormalModel,
    "bursts": BurstsModel,
}


def make_model(name: str, T_ms: float, **kwargs) -> ArrivalModel:
    try:
        return MODEL_NAMES[name](T_ms, **kwargs)
    except KeyError:
        raise ValueError(f"unknown distribution {name!r}; pick one of {sorted(MODEL_NAMES)}")


# ---------------------------------------------------------------------------
# Schedules


@dataclass
class ExecutionSchedule:
    """Re-execution times as offsets from window end, strictly increasing in
    (0, T], the last at most T. ``per_interval_staleness`` is model-expected."""

    times_ms: list[float]
    per_interval_staleness: list[float] = field(default_factory=list)
    iterations: int = 0
    stddev: float = math.inf

    def __post_init__(self) -> None:
        if not self.times_ms:
            raise ValueError("schedule needs at least one execution")
        if any(b <= a for a, b in zip(self.times_ms, self.times_ms[1:])):
            raise ValueError("execution times must be strictly increasing")
        if self.times_ms[0] <= 0:
            raise ValueError("execution times must be > 0")

    @property
    def k(self) -> int:
        return len(self.times_ms)

    @property
    def max_staleness(self) -> float:
        return max(self.per_interval_staleness) if self.per_interval_staleness else math.inf


def _interval_staleness(model: ArrivalModel, a: float, b: float, T: float) -> float:
    return (b - a) * model.interval_mass(a, b) / T


def _evaluate(times: list[float], model: ArrivalModel, T: float) -> list[float]:
    prev = 0.0
    out = []
    for t in times:
        out.append(_interval_staleness(model, prev, t, T))
        prev = t
    return out


def max_staleness(schedule: ExecutionSchedule, model: ArrivalModel,
                  params: StalenessParams) -> float:
    """Maximum model-expected staleness across the schedule's intervals."""
    return max(_evaluate(schedule.times_ms, model, params.T_ms))


def greedy_place(model: ArrivalModel, params: StalenessParams,
                 grid_bins: int = 1_000) -> ExecutionSchedule:
    """Scan ``grid_bins`` instants; place an execution at the first instant
    whose accumulated staleness violates the bound, reset, repeat until T.
    Interval staleness may exceed the bound by at most one grid step of
    accumulation; a violation within a single grid step is infeasible."""
    if grid_bins < 10:
        raise ValueError("grid_bins must be >= 10")
    T = params.T_ms
    step = T / grid_bins
    eps = 1e-12
    last = 0.0
    times: list[float] = []
    for j in range(1, grid_bins + 1):
        t = T if j == grid_bins else j * step
        st = _interval_staleness(model, last, t, T)
        if st > params.bound + eps:
            if t - last <= step * 1.5:
                raise InfeasibleBoundError(
                    f"one grid step already exceeds bound {params.bound}; reduce the grid step")
            times.append(t)
            last = t
    if not times or times[-1] < T:
        times.append(T)
    return ExecutionSchedule(times, _evaluate(times, model, T))


def mass_quantile_times(k: int, model: ArrivalModel) -> list[float]:
    """k execution times at the i/k mass quantiles of the model (this is both
    the deltaev baseline and the balance initializer: more executions where
    the arrival density is higher)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    T = model.T_ms
    times = []
    prev = 0.0
    for i in range(1, k + 1):
        t = T if i == k else model.quantile(i / k)
        min_gap = T * 1e-9
        t = min(max(t, prev + min_gap), T - (k - i) * min_gap)
        times.append(t)
        prev = t
    return times


def baseline_deltat(k: int, T_ms: float) -> ExecutionSchedule:
    """Periodic trigger: executions at i*T/k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    times = [T_ms if i == k else i * T_ms / k for i in range(1, k + 1)]
    return ExecutionSchedule(times)


def baseline_deltaev(k: int, model: ArrivalModel, T_ms: float | None = None) -> ExecutionSchedule:
    """Every-x-events trigger: executions at equal expected-event counts."""
    return ExecutionSchedule(mass_quantile_times(k, model))


def balance(
    schedule: ExecutionSchedule | None,
    model: ArrivalModel,
    params: StalenessParams,
    max_iters: int = 10_000,
    eps_std: float = 1e-6,
    damping: float = 0.5,
    k: int | None = None,
) -> ExecutionSchedule:
    """Equalize per-interval staleness without changing the schedule size.

    Sweeps the interior times in time order; each move shifts e_i toward the
    point equating the staleness of intervals i and i+1. Under a locally
    constant density the equating shift is closed-form (the quadratic terms
    cancel); the move is damped by ``damping`` and falls back to bisection
    whenever the linear step would make the local pair worse. Stops when the
    staleness standard deviation drops below ``eps_std``, progress stalls, or
    ``max_iters`` sweeps have run; returns the best iterate seen (so the max
    staleness never exceeds the input schedule's).

    With ``schedule=None`` the initial times are the mass quantiles of the
    arrival model (``k`` required).
    """
    T = params.T_ms
    if schedule is None:
        if k is None:
            raise ValueError("either a schedule or k is required")
        times = mass_quantile_times(k, model)
    else:
        times = list(schedule.times_ms)
    if len(times) == 1:
        st = _evaluate(times, model, T)
        return ExecutionSchedule(times, st, iterations=0, stddev=0.0)

    def stats(st: list[float]) -> tuple[float, float]:
        mean = sum(st) / len(st)
        var = sum((s - mean) ** 2 for s in st) / len(st)
        return max(st), math.sqrt(var)

    def equalize_bisect(lo: float, hi: float, f_lo: float, f_hi: float) -> float:
        a, b = lo, hi
        for _ in range(60):
            mid = 0.5 * (a + b)
            f_mid = model.cdf(mid)
            left = (mid - lo) * (f_mid - f_lo)
            right = (hi - mid) * (f_hi - f_mid)
            if left < right:
                a = mid
            else:
                b = mid
        return 0.5 * (a + b)

    st = _evaluate(times, model, T)
    best_times, best_st = list(times), list(st)
    best_max, best_std = stats(st)
    iterations = 0
    stall = 0
    for sweep in range(1, max_iters + 1):
        iterations = sweep
        fs = [model.cdf(t) for t in times]
        for i in range(len(times) - 1):
            lo = times[i - 1] if i > 0 else 0.0
            f_lo = fs[i - 1] if i > 0 else 0.0
            hi = times[i + 1]
            f_hi = fs[i + 1]
            e = times[i]
            f_e = fs[i]
            a_left = e - lo
            m_left = f_e - f_lo
            a_right = hi - e
            m_right = f_hi - f_e
            rho = model.density(e)
            denom = rho * (a_left + a_right) + m_left + m_right
            moved = False
            if denom > 0:
                delta = damping * (a_right * m_right - a_left * m_left) / denom
                gap = (hi - lo) * 1e-9
                candidate = min(max(e + delta, lo + gap), hi - gap)
                f_c = model.cdf(candidate)
                new_pair_max = max((candidate - lo) * (f_c - f_lo), (hi - candidate) * (f_hi - f_c))
                old_pair_max = max(a_left * m_left, a_right * m_right)
                if new_pair_max <= old_pair_max:
                    times[i], fs[i] = candidate, f_c
                    moved = True
            if not moved:
                root = equalize_bisect(lo, hi, f_lo, f_hi)
                gap = (hi - lo) * 1e-9
                root = min(max(root, lo + gap), hi - gap)
                times[i], fs[i] = root, model.cdf(root)
        st = _evaluate(times, model, T)
        cur_max, cur_std = stats(st)
        if (cur_max, cur_std) < (best_max, best_std):
            if best_max - cur_max < best_max * 1e-13:
                stall += 1
            else:
                stall = 0
            best_times, best_st = list(times), list(st)
            best_max, best_std = cur_max, cur_std
        else:
            stall += 1
        if cur_std < eps_std:
            best_times, best_st = list(times), list(st)
            best_max, best_std = cur_max, cur_std
            break
        if stall >= 200:
            break
    return ExecutionSchedule(best_times, best_st, iterations=iterations, stddev=best_std)


def plan_executions(
    model: ArrivalModel,
    params: StalenessParams,
    grid_bins: int = 1_000,
    max_iters: int = 10_000,
    eps_std: float = 1e-6,
) -> ExecutionSchedule:
    """Greedy placement for the minimum execution count, then balancing:
    minimum staleness at the minimum number of executions. The returned
    times are offsets from the window end for the engine to schedule."""
    greedy = greedy_place(model, params, grid_bins)
    return balance(greedy, model, params, max_iters=max_iters, eps_std=eps_std)


def executions_to_bound(
    trigger: str,
    model: ArrivalModel,
    params: StalenessParams,
    k_max: int = 30,
) -> int | None:
    """Minimum k in 1..k_max with which the trigger meets the staleness
    bound; None when the bound is unreachable within k_max."""
    eps = 1e-12
    for k in range(1, k_max + 1):
        if trigger == "aion":
            schedule = balance(None, model, params, k=k)
        elif trigger == "deltat":
            schedule = baseline_deltat(k, params.T_ms)
        elif trigger == "deltaev":
            schedule = baseline_deltaev(k, model)
        else:
            raise ValueError(f"unknown trigger {trigger!r}")
        if max_staleness(schedule, model, params) <= params.bound + eps:
            return k
    return None
