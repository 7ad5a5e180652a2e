"""Single FIFO bottleneck queue simulated on a 1 us time-slot grid.

Every slot ``t`` (covering ``[t, t+1)`` us) is processed in three steps:

1. drain credit accrues at the drain model's rate for that slot.  Before
   accruing, banked credit is capped at the head packet's size (or one MTU
   when the queue is empty), so idle periods cannot hoard service;
2. head packets leave while credit covers their size; a packet that leaves in
   slot ``t`` is stamped with departure time ``t + 1``;
3. the slot's arrivals are admitted.  When an arrival does not fit, drop-tail
   discards the arrival while drop-front discards queued head packets until
   it fits.  Drain credit belongs to the queue and survives head drops.

Capacity counts the packet currently in service.  The implementation is
event driven: it jumps between departures and arrivals using the drain
model's cumulative service function, and is slot-exact.  Credit is kept in
integer micro-bits (a rate of ``r`` bit/s adds exactly ``r`` per slot), so no
rounding drift accumulates.
"""

from __future__ import annotations

import bisect
import csv
import enum
import io
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

from .schedule import FORMAT_HEADER, ProbeSchedule, parse_kv, parse_rate

MTU_BYTES = 1500
SLOT_SCALE = 1_000_000  # credit units per bit


class DropPolicy(enum.Enum):
    DROP_TAIL = "drop_tail"
    DROP_FRONT = "drop_front"


class CapacityUnit(enum.Enum):
    PACKETS = "packets"
    BYTES = "bytes"


class Outcome(enum.IntEnum):
    DELIVERED = 0
    DROPPED = 1
    UNADMITTABLE = 2


# -- drain models -------------------------------------------------------------

@dataclass(frozen=True)
class Smooth:
    rate: int  # bits/s

    def __post_init__(self):
        if self.rate <= 0:
            raise ValueError("drain rate must be positive")

    def cum(self, t: int) -> int:
        return self.rate * t

    def advance(self, t: int, need: int) -> int | None:
        """Smallest ``T > t`` with ``cum(T) - cum(t) >= need``."""
        if need <= 0:
            return t + 1
        return t + max(1, -(-need // self.rate))

    def rate_at(self, t: int) -> int:
        return self.rate

    def spec(self) -> str:
        return f"smooth:{self.rate}"


@dataclass(frozen=True)
class Piecewise:
    """Constant rate per segment; the last segment extends forever."""

    segments: tuple[tuple[int, int], ...]  # (start_us, rate bits/s)
    _starts: tuple[int, ...] = field(init=False, repr=False, compare=False)
    _cum: tuple[int, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        segs = tuple((int(s), int(r)) for s, r in self.segments)
        if not segs or segs[0][0] != 0:
            raise ValueError("piecewise drain must start at 0 us")
        if any(b[0] <= a[0] for a, b in zip(segs, segs[1:])):
            raise ValueError("piecewise segment starts must strictly increase")
        if any(r <= 0 for _, r in segs):
            raise ValueError("drain rates must be positive")
        cum = [0]
        for (s0, r0), (s1, _) in zip(segs, segs[1:]):
            cum.append(cum[-1] + r0 * (s1 - s0))
        object.__setattr__(self, "segments", segs)
        object.__setattr__(self, "_starts", tuple(s for s, _ in segs))
        object.__setattr__(self, "_cum", tuple(cum))

    def _seg(self, t: int) -> int:
        return max(0, bisect.bisect_right(self._starts, t) - 1)

    def cum(self, t: int) -> int:
        i = self._seg(t)
        return self._cum[i] + self.segments[i][1] * (t - self._starts[i])

    def advance(self, t: int, need: int) -> int | None:
        if need <= 0:
            return t + 1
        target = self.cum(t) + need
        i = self._seg(t)
        while i + 1 < len(self._cum) and self._cum[i + 1] < target:
            i += 1
        rate = self.segments[i][1]
        T = self._starts[i] + -(-(target - self._cum[i]) // rate)
        return max(T, t + 1)

    def rate_at(self, t: int) -> int:
        return self.segments[self._seg(t)][1]

    def spec(self) -> str:
        return "piecewise:" + ",".join(f"{s}:{r}" for s, r in self.segments)


@dataclass(frozen=True)
class FrameGated:
    """Service at ``peak_rate`` during ``on_frames`` of every ``on_frames + off_frames`` frames."""

    peak_rate: int
    frame_us: int = 1330
    on_frames: int = 1
    off_frames: int = 3
    phase_us: int = 0

    def __post_init__(self):
        if self.peak_rate <= 0:
            raise ValueError("drain rate must be positive")
        if self.frame_us < 1:
            raise ValueError("frame_us must be at least 1")
        if self.on_frames < 0 or self.off_frames < 0 or self.on_frames + self.off_frames == 0:
            raise ValueError("on/off frame counts must be non-negative and not both zero")

    @property
    def _period(self) -> int:
        return (self.on_frames + self.off_frames) * self.frame_us

    @property
    def _window(self) -> int:
        return self.on_frames * self.frame_us

    def _on_slots(self, x: int) -> int:
        # antiderivative of the on-indicator; valid for negative x too
        p, w = self._period, self._window
        return (x // p) * w + min(x % p, w)

    def cum(self, t: int) -> int:
        return self.peak_rate * (self._on_slots(t - self.phase_us) - self._on_slots(-self.phase_us))

    def advance(self, t: int, need: int) -> int | None:
        if need <= 0:
            return t + 1
        w = self._window
        if w == 0:
            return None
        n = -(-need // self.peak_rate)
        target = self._on_slots(t - self.phase_us) + n
        k = (target - 1) // w
        x = k * self._period + (target - k * w)
        return x + self.phase_us

    def is_on(self, t: int) -> bool:
        return (t - self.phase_us) % self._period < self._window

    def rate_at(self, t: int) -> int:
        return self.peak_rate if self.is_on(t) else 0

    def spec(self) -> str:
        s = f"frame:{self.frame_us}:{self.on_frames}:{self.off_frames}:{self.peak_rate}"
        return s + (f":{self.phase_us}" if self.phase_us else "")


DrainModel = Union[Smooth, Piecewise, FrameGated]


def long_run_rate(d: DrainModel, horizon_us: int | None = None) -> float:
    """Average drain rate in bits/s.

    Piecewise drains with more than one segment need ``horizon_us``: the mean
    is taken over ``[0, horizon_us)``.
    """
    if isinstance(d, Smooth):
        return float(d.rate)
    if isinstance(d, FrameGated):
        return d.peak_rate * d.on_frames / (d.on_frames + d.off_frames)
    if len(d.segments) == 1:
        return float(d.segments[0][1])
    if horizon_us is None or horizon_us <= 0:
        raise ValueError("piecewise long-run rate needs a positive horizon_us")
    return d.cum(horizon_us) / horizon_us


def parse_drain(text: str) -> DrainModel:
    """Parse ``smooth:250M``, ``frame:1330:1:3:600M[:phase]`` or ``piecewise:0:100M,50000:200M``."""
    kind, _, rest = text.strip().partition(":")
    if kind == "smooth":
        return Smooth(parse_rate(rest))
    if kind == "frame":
        parts = rest.split(":")
        if len(parts) not in (4, 5):
            raise ValueError(f"frame drain needs frame_us:on:off:peak[:phase], got {text!r}")
        phase = int(parts[4]) if len(parts) == 5 else 0
        return FrameGated(parse_rate(parts[3]), int(parts[0]), int(parts[1]), int(parts[2]), phase)
    if kind == "piecewise":
        segs = []
        for seg in rest.split(","):
            start, _, rate = seg.partition(":")
            segs.append((int(start), parse_rate(rate)))
        return Piecewise(tuple(segs))
    raise ValueError(f"unknown drain model {text!r}")


# -- configuration ------------------------------------------------------------

@dataclass(frozen=True)
class QueueConfig:
    capacity: int
    drain: DrainModel
    drop_policy: DropPolicy = DropPolicy.DROP_FRONT
    capacity_unit: CapacityUnit = CapacityUnit.PACKETS

    def __post_init__(self):
        object.__setattr__(self, "drop_policy", DropPolicy(self.drop_policy))
        object.__setattr__(self, "capacity_unit", CapacityUnit(self.capacity_unit))
        if self.capacity < 1:
            raise ValueError("capacity must be at least 1")

    def to_text(self) -> str:
        return "\n".join([
            FORMAT_HEADER,
            f"capacity={self.capacity}",
            f"capacity_unit={self.capacity_unit.value}",
            f"policy={self.drop_policy.value}",
            f"drain={self.drain.spec()}",
        ]) + "\n"

    @classmethod
    def from_text(cls, text: str) -> QueueConfig:
        kv = parse_kv(text)
        try:
            return cls(
                capacity=int(kv["capacity"]),
                capacity_unit=CapacityUnit(kv.get("capacity_unit", "packets")),
                drop_policy=DropPolicy(kv.get("policy", "drop_front")),
                drain=parse_drain(kv["drain"]),
            )
        except KeyError as exc:
            raise ValueError(f"queue config is missing {exc.args[0]!r}") from exc

    @classmethod
    def read(cls, path: str | Path) -> QueueConfig:
        return cls.from_text(Path(path).read_text())


# -- arrivals and results -----------------------------------------------------

@dataclass(frozen=True)
class ArrivalTrace:
    arrival_us: np.ndarray
    size: np.ndarray
    seq: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.arrival_us, dtype=np.int64)
        s = np.asarray(self.size, dtype=np.int64)
        q = np.asarray(self.seq, dtype=np.int64)
        if not (len(a) == len(s) == len(q)):
            raise ValueError("arrival arrays differ in length")
        if len(a) and (np.any(np.diff(a) < 0) or a[0] < 0):
            raise ValueError("arrival times must be non-negative and non-decreasing")
        if len(np.unique(q)) != len(q):
            raise ValueError("arrival sequence numbers must be unique")
        if np.any(s < 1):
            raise ValueError("packet sizes must be positive")
        object.__setattr__(self, "arrival_us", a)
        object.__setattr__(self, "size", s)
        object.__setattr__(self, "seq", q)

    def __len__(self) -> int:
        return len(self.arrival_us)

    @classmethod
    def uniform(cls, times: Iterable[int], size: int = MTU_BYTES) -> ArrivalTrace:
        t = np.asarray(list(times), dtype=np.int64)
        return cls(t, np.full(len(t), size), np.arange(len(t)))


def arrivals_from_schedule(s: ProbeSchedule, burst_index: int | None = None) -> ArrivalTrace:
    if burst_index is not None:
        start = s.burst_slices()[burst_index].start if 0 <= burst_index < len(s.burst_slices()) else None
        if start is None:
            raise IndexError(f"burst index {burst_index} out of range")
        sub = s.burst(burst_index)
        t = np.cumsum(np.asarray(sub.delays_us, dtype=np.int64))
        return ArrivalTrace(t, np.asarray(sub.sizes), np.arange(start, start + len(sub)))
    t = np.cumsum(np.asarray(s.delays_us, dtype=np.int64))
    return ArrivalTrace(t, np.asarray(s.sizes), np.arange(len(s)))


@dataclass
class SimTrace:
    """Per-packet outcome of a simulation, aligned with the arrival order.

    ``time_us`` holds the departure time of delivered packets and the drop
    time otherwise; ``delay_us`` is ``-1`` for packets that were not delivered.
    """

    seq: np.ndarray
    arrival_us: np.ndarray
    size: np.ndarray
    outcome: np.ndarray
    time_us: np.ndarray
    evictions: int = 0

    @property
    def delivered(self) -> np.ndarray:
        return self.outcome == Outcome.DELIVERED

    @property
    def delay_us(self) -> np.ndarray:
        return np.where(self.delivered, self.time_us - self.arrival_us, -1)

    @property
    def n_dropped(self) -> int:
        return int(np.count_nonzero(self.outcome != Outcome.DELIVERED))

    @property
    def loss_fraction(self) -> float:
        return self.n_dropped / len(self.seq) if len(self.seq) else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(FORMAT_HEADER + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["seq", "arrival_us", "outcome", "depart_or_drop_us", "delay_us"])
        names = {o.value: o.name.lower() for o in Outcome}
        delay = self.delay_us
        for q, a, o, t, d in zip(self.seq, self.arrival_us, self.outcome, self.time_us, delay):
            w.writerow([int(q), int(a), names[int(o)], int(t), int(d) if d >= 0 else ""])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> SimTrace:
        rows = list(csv.DictReader(line for line in text.splitlines() if not line.startswith("#")))
        codes = {o.name.lower(): int(o) for o in Outcome}
        try:
            return cls(
                seq=np.array([int(r["seq"]) for r in rows], dtype=np.int64),
                arrival_us=np.array([int(r["arrival_us"]) for r in rows], dtype=np.int64),
                size=np.zeros(len(rows), dtype=np.int64),
                outcome=np.array([codes[r["outcome"]] for r in rows], dtype=np.int8),
                time_us=np.array([int(r["depart_or_drop_us"]) for r in rows], dtype=np.int64),
            )
        except (KeyError, ValueError) as exc:
            raise ValueError(f"not a SimTrace CSV: {exc}") from exc


# -- the simulator ------------------------------------------------------------

def simulate(arrivals: ArrivalTrace, cfg: QueueConfig) -> SimTrace:
    n = len(arrivals)
    arr = arrivals.arrival_us.tolist()
    size = arrivals.size.tolist()
    cost = [b * 8 * SLOT_SCALE for b in size]
    outcome = [int(Outcome.DELIVERED)] * n
    when = [0] * n

    drain = cfg.drain
    advance = drain.advance
    cum = drain.cum
    front = cfg.drop_policy is DropPolicy.DROP_FRONT
    by_bytes = cfg.capacity_unit is CapacityUnit.BYTES
    capacity = cfg.capacity
    idle_cap = MTU_BYTES * 8 * SLOT_SCALE

    queue: deque[int] = deque()
    occ = 0  # packets or bytes, per capacity unit
    credit = 0  # credit at the start of slot t, before that slot's cap
    t = 0
    evictions = 0

    def serve_until(limit: int | None) -> None:
        """Emit every departure in slots ``<= limit`` (all of them if ``limit`` is None)."""
        nonlocal credit, t, occ
        while queue:
            head = queue[0]
            c = min(credit, cost[head])
            T = advance(t, cost[head] - c)
            if T is None:
                raise ValueError("drain model never serves; queue cannot empty")
            s = T - 1
            if limit is not None and s > limit:
                return
            credit = c + cum(T) - cum(t) - cost[head]
            t = T
            while True:
                queue.popleft()
                occ -= size[head] if by_bytes else 1
                when[head] = T
                if not queue:
                    break
                head = queue[0]
                if credit < cost[head]:
                    break
                credit -= cost[head]

    i = 0
    while i < n:
        a = arr[i]
        serve_until(a)
        if t <= a:
            # no departure in [t, a]: accrue up to the end of slot a
            cap = cost[queue[0]] if queue else idle_cap
            credit = min(credit + cum(a + 1) - cum(t), cap + drain.rate_at(a))
            t = a + 1
        while i < n and arr[i] == a:
            units = size[i] if by_bytes else 1
            if units > capacity:
                outcome[i] = int(Outcome.UNADMITTABLE)
                when[i] = a
            elif occ + units > capacity:
                if front:
                    while occ + units > capacity:
                        victim = queue.popleft()
                        occ -= size[victim] if by_bytes else 1
                        outcome[victim] = int(Outcome.DROPPED)
                        when[victim] = a
                        evictions += 1
                    queue.append(i)
                    occ += units
                else:
                    outcome[i] = int(Outcome.DROPPED)
                    when[i] = a
            else:
                queue.append(i)
                occ += units
            i += 1
    serve_until(None)

    return SimTrace(
        seq=arrivals.seq.copy(),
        arrival_us=arrivals.arrival_us.copy(),
        size=arrivals.size.copy(),
        outcome=np.array(outcome, dtype=np.int8),
        time_us=np.array(when, dtype=np.int64),
        evictions=evictions,
    )


def simulate_schedule(s: ProbeSchedule, cfg: QueueConfig, burst_index: int | None = None) -> SimTrace:
    return simulate(arrivals_from_schedule(s, burst_index), cfg)


def occupancy(sim: SimTrace) -> tuple[np.ndarray, np.ndarray]:
    """Queue length in packets after each event time, reconstructed from a SimTrace."""
    admitted = sim.outcome != Outcome.UNADMITTABLE
    ups = sim.arrival_us[admitted]
    downs = sim.time_us[admitted]
    times = np.concatenate([ups, downs])
    delta = np.concatenate([np.ones(len(ups), np.int64), -np.ones(len(downs), np.int64)])
    # at equal times removals happen first (departures precede admissions)
    order = np.lexsort((delta, times))
    times, delta = times[order], delta[order]
    level = np.cumsum(delta)
    last = np.r_[times[1:] != times[:-1], True]
    return times[last], level[last]


def write_sim(sim: SimTrace, path: str | Path) -> None:
    Path(path).write_text(sim.to_csv())


def transmission_time_us(size: int, rate: float) -> float:
    return size * 8 * 1e6 / rate


__all__: Sequence[str] = [
    "ArrivalTrace", "CapacityUnit", "DrainModel", "DropPolicy", "FrameGated", "Outcome",
    "Piecewise", "QueueConfig", "SimTrace", "Smooth", "arrivals_from_schedule",
    "long_run_rate", "occupancy", "parse_drain", "simulate", "simulate_schedule",
    "transmission_time_us", "write_sim",
]
