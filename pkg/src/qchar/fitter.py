"""Infer queue capacity and drain rate from a measured burst.

Candidates are scored by re-simulating the measured send pattern and
comparing loss fraction and the queuing-delay-vs-send-time curve with the
measurement.  The search is a coarse grid followed by one refinement pass at
a fifth of the grid step; ties go to the smaller capacity, then the smaller
rate.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .analysis import detect_rate_changes
from .schedule import FORMAT_HEADER
from .queue_sim import (ArrivalTrace, CapacityUnit, DropPolicy, Piecewise, QueueConfig, SimTrace,
                        Smooth, simulate)
from .trace import PacketTrace

BIN_US = 1000
MIN_NORMALIZER_US = 100.0
MAX_CANDIDATES = 200_000


class FitError(ValueError):
    pass


@dataclass(frozen=True)
class SearchSpace:
    k_min: int
    k_max: int
    k_step: int
    r_min: int
    r_max: int
    r_step: int
    policy: DropPolicy | None = DropPolicy.DROP_FRONT  # None searches both
    capacity_unit: CapacityUnit = CapacityUnit.PACKETS
    max_rate_segments: int = 1

    def __post_init__(self):
        for name in ("k_min", "k_max", "k_step", "r_min", "r_max", "r_step"):
            v = getattr(self, name)
            if v is None or not np.isfinite(v):
                raise FitError(f"search space is unbounded: {name}={v}")
        if self.k_step <= 0 or self.r_step <= 0:
            raise FitError("search steps must be positive")
        if self.k_min > self.k_max:
            raise FitError(f"capacity range is empty: {self.k_min} > {self.k_max}")
        if self.r_min > self.r_max:
            raise FitError(f"rate range is empty: {self.r_min} > {self.r_max}")
        if self.k_min < 1 or self.r_min <= 0:
            raise FitError("capacity and rate lower bounds must be positive")
        if self.max_rate_segments < 1:
            raise FitError("max_rate_segments must be at least 1")
        if len(self.capacities()) * len(self.rates()) * len(self.policies()) > MAX_CANDIDATES:
            raise FitError("search space is too large for an exhaustive grid")
        if self.policy is not None:
            object.__setattr__(self, "policy", DropPolicy(self.policy))
        object.__setattr__(self, "capacity_unit", CapacityUnit(self.capacity_unit))

    def capacities(self) -> list[int]:
        return list(range(int(self.k_min), int(self.k_max) + 1, int(self.k_step)))

    def rates(self) -> list[int]:
        return list(range(int(self.r_min), int(self.r_max) + 1, int(self.r_step)))

    def policies(self) -> list[DropPolicy]:
        return [DropPolicy(self.policy)] if self.policy is not None else [DropPolicy.DROP_FRONT,
                                                                         DropPolicy.DROP_TAIL]


# -- error metric -------------------------------------------------------------

@dataclass(frozen=True)
class ErrorScore:
    score: float
    loss_delta: float
    delay_distance: float  # normalized median curve deviation; NaN when degenerate
    degenerate: bool = False


@dataclass
class _Profile:
    """Binned queuing-delay curve of one side."""

    loss: float
    bins: np.ndarray  # bin indices holding delivered packets
    values: np.ndarray  # mean queuing delay per bin, us

    @classmethod
    def build(cls, send_us: np.ndarray, delay_us: np.ndarray, delivered: np.ndarray) -> _Profile:
        n = len(send_us)
        loss = 1 - np.count_nonzero(delivered) / n if n else 0.0
        if not np.any(delivered):
            return cls(loss, np.zeros(0, np.int64), np.zeros(0))
        t = send_us[delivered]
        q = delay_us[delivered].astype(float)
        q = q - q.min()
        b = (t // BIN_US).astype(np.int64)
        b0 = b.min()
        sums = np.bincount(b - b0, weights=q)
        counts = np.bincount(b - b0)
        have = counts > 0
        return cls(loss, np.flatnonzero(have) + b0, sums[have] / counts[have])

    @classmethod
    def from_sim(cls, sim: SimTrace) -> _Profile:
        d = sim.delivered
        return cls.build(sim.arrival_us, sim.time_us - sim.arrival_us, d)

    @classmethod
    def from_trace(cls, tr: PacketTrace) -> _Profile:
        send_us = (tr.send_ns - tr.send_ns[0]) / 1000
        owd = np.where(tr.received, tr.recv_ns - tr.send_ns, 0) / 1000
        return cls.build(send_us, owd, tr.received)

    def plateau(self) -> float:
        return float(np.median(self.values)) if len(self.values) else 0.0


def _compare(sim: _Profile, emp: _Profile, weights: tuple[float, float]) -> ErrorScore:
    w_loss, w_delay = weights
    loss_delta = abs(sim.loss - emp.loss)
    if not len(sim.bins) or not len(emp.bins):
        return ErrorScore(w_loss * loss_delta, loss_delta, float("nan"), True)
    common, i, j = np.intersect1d(sim.bins, emp.bins, assume_unique=True, return_indices=True)
    if not len(common):
        return ErrorScore(w_loss * loss_delta, loss_delta, float("nan"), True)
    norm = max(emp.plateau(), MIN_NORMALIZER_US)
    dist = float(np.median(np.abs(sim.values[i] - emp.values[j]))) / norm
    return ErrorScore(w_loss * loss_delta + w_delay * dist, loss_delta, dist)


def trace_error(sim: SimTrace, emp: PacketTrace, weights: tuple[float, float] = (1.0, 1.0)) -> ErrorScore:
    """Loss-fraction gap plus normalized median gap between queuing-delay curves.

    Both curves are queuing delay (delay minus its minimum) averaged over
    1 ms bins of send time; bins that lack a delivered packet on either side
    are skipped.  The delay term is divided by the median of the measured
    curve (at least 100 us).
    """
    if len(sim.seq) != len(emp):
        raise ValueError(f"traces cover different schedules ({len(sim.seq)} vs {len(emp)} packets)")
    return _compare(_Profile.from_sim(sim), _Profile.from_trace(emp), weights)


# -- search -------------------------------------------------------------------

@dataclass
class FitResult:
    config: QueueConfig
    score: float
    loss_delta: float
    delay_distance: float
    table: list[tuple[int, str, str, float]] = field(default_factory=list)  # (K, drain, policy, score)
    change_points_us: list[int] = field(default_factory=list)
    degenerate: bool = False

    @property
    def capacity(self) -> int:
        return self.config.capacity

    @property
    def rates(self) -> list[int]:
        d = self.config.drain
        return [r for _, r in d.segments] if isinstance(d, Piecewise) else [d.rate]

    def to_flat(self) -> dict:
        return {
            "format": FORMAT_HEADER.lstrip("# "),
            "capacity": self.config.capacity,
            "capacity_unit": self.config.capacity_unit.value,
            "policy": self.config.drop_policy.value,
            "drain": self.config.drain.spec(),
            "rates_bps": ",".join(str(r) for r in self.rates),
            "change_points_us": ",".join(str(c) for c in self.change_points_us),
            "score": round(self.score, 9),
            "loss_delta": round(self.loss_delta, 9),
            "delay_distance": None if np.isnan(self.delay_distance) else round(self.delay_distance, 9),
            "degenerate": self.degenerate,
            "candidates": len(self.table),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_flat(), indent=1, sort_keys=True) + "\n"


@dataclass
class _Problem:
    arrivals: ArrivalTrace
    profile: _Profile
    weights: tuple[float, float]
    unit: CapacityUnit


_WORKER_PROBLEM: _Problem | None = None


def _init_worker(problem: _Problem) -> None:
    global _WORKER_PROBLEM
    _WORKER_PROBLEM = problem


def _score(problem: _Problem, cand) -> ErrorScore:
    k, drain, policy = cand
    sim = simulate(problem.arrivals, QueueConfig(k, drain, policy, problem.unit))
    return _compare(_Profile.from_sim(sim), problem.profile, problem.weights)


def _score_in_worker(cand) -> ErrorScore:
    return _score(_WORKER_PROBLEM, cand)


def default_workers() -> int:
    env = os.environ.get("QCHAR_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _evaluate(problem: _Problem, cands: list, workers: int) -> list[ErrorScore]:
    if workers <= 1 or len(cands) < 8:
        return [_score(problem, c) for c in cands]
    with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(problem,)) as ex:
        return list(ex.map(_score_in_worker, cands, chunksize=max(1, len(cands) // (4 * workers))))


def _drain_key(drain) -> tuple:
    return (drain.rate,) if isinstance(drain, Smooth) else tuple(r for _, r in drain.segments)


_POLICY_ORDER = {DropPolicy.DROP_FRONT: 0, DropPolicy.DROP_TAIL: 1}


class _Search:
    """Memoized candidate evaluation with deterministic selection."""

    def __init__(self, problem: _Problem, workers: int):
        self.problem = problem
        self.workers = workers
        self.seen: dict[tuple, tuple[tuple, ErrorScore]] = {}

    @staticmethod
    def _key(c) -> tuple:
        k, drain, policy = c
        return (k, drain.spec(), policy.value)

    def run(self, cands: Sequence) -> None:
        todo, keys = [], set()
        for c in cands:
            key = self._key(c)
            if key not in self.seen and key not in keys:
                todo.append(c)
                keys.add(key)
        for c, s in zip(todo, _evaluate(self.problem, todo, self.workers)):
            self.seen[self._key(c)] = (c, s)

    def best(self, cands: Sequence | None = None):
        pool = self.seen.values() if cands is None else [self.seen[self._key(c)] for c in cands]
        return min(pool, key=lambda cs: (cs[1].score, cs[0][0], _drain_key(cs[0][1]),
                                         _POLICY_ORDER[cs[0][2]]))

    def result(self, change_points=(), chosen=None) -> FitResult:
        (k, drain, policy), s = self.best() if chosen is None else self.seen[self._key(chosen)]
        table = sorted(((c[0], c[1].spec(), c[2].value, sc.score) for c, sc in self.seen.values()),
                       key=lambda row: (row[0], row[1], row[2]))
        cfg = QueueConfig(k, drain, policy, self.problem.unit)
        return FitResult(cfg, s.score, s.loss_delta, s.delay_distance, table,
                         list(change_points), s.degenerate)


def _single_burst(emp: PacketTrace, burst: int | None) -> PacketTrace:
    if burst is not None:
        emp = emp.burst(burst)
    elif emp.n_bursts() > 1:
        raise FitError(f"trace holds {emp.n_bursts()} bursts; choose one")
    if not len(emp):
        raise FitError("empty trace")
    if not emp.n_delivered:
        raise FitError("degenerate trace: every packet was lost")
    return emp


def _problem(emp: PacketTrace, weights, unit) -> _Problem:
    send_us = np.rint((emp.send_ns - emp.send_ns[0]) / 1000).astype(np.int64)
    send_us = np.maximum.accumulate(send_us)
    arrivals = ArrivalTrace(send_us, emp.size, np.arange(len(emp)))
    return _Problem(arrivals, _Profile.from_trace(emp), tuple(weights), unit)


def _around(center: int, step: int, lo: int, hi: int) -> list[int]:
    fine = max(1, step // 5)
    return [v for v in range(center - step, center + step + 1, fine) if lo <= v <= hi]


def fit(emp: PacketTrace, space: SearchSpace, weights: tuple[float, float] = (1.0, 1.0),
        burst: int | None = None, workers: int | None = None) -> FitResult:
    """Grid search over (capacity, smooth drain rate[, policy])."""
    emp = _single_burst(emp, burst)
    search = _Search(_problem(emp, weights, space.capacity_unit),
                     default_workers() if workers is None else workers)
    policies = space.policies()
    search.run([(k, Smooth(r), p) for p in policies for k in space.capacities() for r in space.rates()])
    (k0, d0, p0), _ = search.best()
    search.run([(k, Smooth(r), p0)
                for k in _around(k0, space.k_step, space.k_min, space.k_max)
                for r in _around(d0.rate, space.r_step, space.r_min, space.r_max)])
    return search.result()


def departure_series(emp: PacketTrace) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative delivered count against estimated departure time from the bottleneck.

    Departure time is receive time minus the run's minimum one-way delay,
    measured from the first send, i.e. the simulator's time axis.
    """
    r = emp.received
    base = int((emp.recv_ns[r] - emp.send_ns[r]).min())
    t = np.sort((emp.recv_ns[r] - emp.send_ns[0] - base) / 1000)
    return t, np.arange(1, len(t) + 1)


def fit_piecewise(emp: PacketTrace, space: SearchSpace, weights: tuple[float, float] = (1.0, 1.0),
                  burst: int | None = None, workers: int | None = None,
                  passes: int = 2) -> FitResult:
    """Fit a drain rate per segment between detected rate changes, sharing one capacity.

    Falls back to :func:`fit` when no confident change point is found.
    """
    emp = _single_burst(emp, burst)
    if space.max_rate_segments < 2:
        return fit(emp, space, weights, workers=workers)
    t, count = departure_series(emp)
    size = int(np.median(emp.size))
    rc = detect_rate_changes(t, count, space.max_rate_segments - 1, kind="count", packet_size=size)
    if not rc.change_points_us:
        return fit(emp, space, weights, workers=workers)

    cps = [int(round(c)) for c in rc.change_points_us]
    fine = max(1, space.r_step // 5)
    rates = [int(min(max(round(r / fine) * fine, space.r_min), space.r_max)) for r in rc.segment_rates_bps]

    def drain(rs):
        return Piecewise(tuple(zip([0] + cps, rs)))

    search = _Search(_problem(emp, weights, space.capacity_unit),
                     default_workers() if workers is None else workers)
    # detected slopes are trusted: a scan only moves a rate on a strict improvement
    finalists = []
    for policy in space.policies():
        cur_rates = list(rates)
        scan = [(k, drain(cur_rates), policy) for k in space.capacities()]
        search.run(scan)
        k_cur = search.best(scan)[0][0]
        for _ in range(passes):
            scan = [(k, drain(cur_rates), policy)
                    for k in _around(k_cur, space.k_step, space.k_min, space.k_max)]
            search.run(scan)
            k_cur = search.best(scan)[0][0]
            for j in range(len(cur_rates)):
                trials = []
                for r in _around(cur_rates[j], space.r_step, space.r_min, space.r_max):
                    trial = list(cur_rates)
                    trial[j] = r
                    trials.append(trial)
                search.run([(k_cur, drain(tr), policy) for tr in trials])
                cur_rates = min(trials, key=lambda tr: (
                    search.seen[_Search._key((k_cur, drain(tr), policy))][1].score,
                    abs(tr[j] - cur_rates[j]), tr[j]))
        finalists.append((k_cur, drain(cur_rates), policy))
    chosen = min(finalists, key=lambda c: (search.seen[_Search._key(c)][1].score, _POLICY_ORDER[c[2]]))
    return search.result(cps, chosen)
