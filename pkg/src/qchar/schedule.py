"""Probe schedules: per-packet send plans for single bursts and burst campaigns.

A schedule is an ordered list of ``(delay_us, size)`` entries where ``delay_us``
is the idle time in microseconds since the previous send.  Campaigns also keep
the index at which each burst starts together with its :class:`BurstSpec`.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

FORMAT_HEADER = "# qchar-format v1"

DEFAULT_BURST_SIZES = (200, 400, 600, 800, 1000, 1500, 2000, 2500, 3000, 4000, 5000, 6000)
DEFAULT_SEND_RATES = tuple(r * 1_000_000 for r in (48, 96, 150, 200, 250, 300, 350, 400, 450, 500))
DEFAULT_PAYLOAD = 1500
DEFAULT_GUARD_GAP_US = 2_000_000
DEFAULT_BYTE_BUDGET = 16_000_000


class ScheduleError(ValueError):
    """Raised for schedules that cannot be built or parsed."""


@dataclass(frozen=True)
class BurstSpec:
    packet_count: int
    payload_size: int
    send_rate: int  # bits/s

    def __post_init__(self):
        if self.packet_count < 1:
            raise ScheduleError(f"packet_count must be positive, got {self.packet_count}")
        if self.payload_size < 1:
            raise ScheduleError(f"payload_size must be positive, got {self.payload_size}")
        if self.send_rate <= 0:
            raise ScheduleError(f"send_rate must be positive, got {self.send_rate}")

    @property
    def gap_us(self) -> int:
        """Inter-send gap, floored to whole microseconds."""
        return self.payload_size * 8 * 1_000_000 // self.send_rate


@dataclass(frozen=True)
class ProbeSchedule:
    delays_us: tuple[int, ...] = ()
    sizes: tuple[int, ...] = ()
    burst_boundaries: tuple[tuple[int, BurstSpec], ...] = ()

    def __post_init__(self):
        if len(self.delays_us) != len(self.sizes):
            raise ScheduleError("delays and sizes differ in length")
        if self.delays_us and self.delays_us[0] != 0:
            raise ScheduleError("first entry must have zero delay")
        if any(d < 0 for d in self.delays_us):
            raise ScheduleError("negative delay in schedule")
        starts = [s for s, _ in self.burst_boundaries]
        if starts != sorted(set(starts)) or any(s < 0 or s >= len(self) for s in starts):
            raise ScheduleError("burst boundaries must be strictly increasing indices into the schedule")
        for sl in self.burst_slices() if self.burst_boundaries else ():
            if len(set(self.sizes[sl])) > 1:
                raise ScheduleError(f"burst starting at entry {sl.start} mixes packet sizes")

    def __len__(self) -> int:
        return len(self.delays_us)

    @property
    def entries(self) -> list[tuple[int, int]]:
        return list(zip(self.delays_us, self.sizes))

    def send_offsets_us(self) -> list[int]:
        """Absolute send instants, relative to the first packet."""
        return list(itertools.accumulate(self.delays_us))

    def burst_slices(self) -> list[slice]:
        """Index ranges of each burst; the whole schedule if no boundaries are recorded."""
        if not self.burst_boundaries:
            return [slice(0, len(self))]
        starts = [s for s, _ in self.burst_boundaries] + [len(self)]
        return [slice(a, b) for a, b in zip(starts[:-1], starts[1:])]

    def burst(self, index: int) -> ProbeSchedule:
        """Sub-schedule of one burst, re-based so its first delay is zero."""
        slices = self.burst_slices()
        if not 0 <= index < len(slices):
            raise IndexError(f"burst index {index} out of range (schedule has {len(slices)} bursts)")
        sl = slices[index]
        delays = (0,) + self.delays_us[sl][1:]
        bounds = ((0, self.burst_boundaries[index][1]),) if self.burst_boundaries else ()
        return ProbeSchedule(delays, self.sizes[sl], bounds)


@dataclass(frozen=True)
class CampaignGrid:
    burst_sizes: tuple[int, ...] = DEFAULT_BURST_SIZES
    send_rates: tuple[int, ...] = DEFAULT_SEND_RATES
    payload_size: int = DEFAULT_PAYLOAD
    guard_gap: int = DEFAULT_GUARD_GAP_US
    byte_budget: int = DEFAULT_BYTE_BUDGET

    def __post_init__(self):
        object.__setattr__(self, "burst_sizes", tuple(int(s) for s in self.burst_sizes))
        object.__setattr__(self, "send_rates", tuple(int(r) for r in self.send_rates))
        if not self.burst_sizes or not self.send_rates:
            raise ScheduleError("grid needs at least one burst size and one send rate")
        if self.guard_gap < 0:
            raise ScheduleError("guard_gap must be non-negative")

    @property
    def cells(self) -> list[tuple[int, int]]:
        """(burst size, send rate) pairs in row-major order."""
        return list(itertools.product(self.burst_sizes, self.send_rates))

    def __len__(self) -> int:
        return len(self.burst_sizes) * len(self.send_rates)


def make_burst_schedule(spec: BurstSpec, byte_budget: int | None = None) -> ProbeSchedule:
    gap = spec.gap_us
    if gap < 1:
        raise ScheduleError(
            f"send rate {spec.send_rate} b/s too high for {spec.payload_size} B packets "
            "at 1 us gap granularity"
        )
    if byte_budget is not None and spec.packet_count * spec.payload_size > byte_budget:
        raise ScheduleError(
            f"burst of {spec.packet_count} x {spec.payload_size} B exceeds byte budget {byte_budget}"
        )
    n = spec.packet_count
    return ProbeSchedule((0,) + (gap,) * (n - 1), (spec.payload_size,) * n, ((0, spec),))


def make_campaign(grid: CampaignGrid) -> ProbeSchedule:
    delays: list[int] = []
    sizes: list[int] = []
    bounds: list[tuple[int, BurstSpec]] = []
    for size, rate in grid.cells:
        try:
            burst = make_burst_schedule(BurstSpec(size, grid.payload_size, rate), grid.byte_budget)
        except ScheduleError as exc:
            raise ScheduleError(f"burst (size={size}, rate={rate}): {exc}") from exc
        start = len(delays)
        bd = list(burst.delays_us)
        if start:
            bd[0] += grid.guard_gap
        delays.extend(bd)
        sizes.extend(burst.sizes)
        bounds.append((start, burst.burst_boundaries[0][1]))
    return ProbeSchedule(tuple(delays), tuple(sizes), tuple(bounds))


def concat(schedules: Sequence[ProbeSchedule], guard_gap: int = 0) -> ProbeSchedule:
    """Join schedules back to back, inserting ``guard_gap`` before each later one."""
    delays: list[int] = []
    sizes: list[int] = []
    bounds: list[tuple[int, BurstSpec]] = []
    for s in schedules:
        start = len(delays)
        d = list(s.delays_us)
        if start and d:
            d[0] += guard_gap
        delays.extend(d)
        sizes.extend(s.sizes)
        bounds.extend((start + i, spec) for i, spec in s.burst_boundaries)
    return ProbeSchedule(tuple(delays), tuple(sizes), tuple(bounds))


def schedule_duration(s: ProbeSchedule) -> int:
    return sum(s.delays_us)


# -- schedule file -----------------------------------------------------------

def format_schedule(s: ProbeSchedule) -> str:
    bounds = dict(s.burst_boundaries)
    index = {start: i for i, (start, _) in enumerate(s.burst_boundaries)}
    lines = [FORMAT_HEADER]
    for i, (d, size) in enumerate(zip(s.delays_us, s.sizes)):
        if i in bounds:
            spec = bounds[i]
            lines.append(f"# burst {index[i]} count={spec.packet_count} rate_bps={spec.send_rate}")
        lines.append(f"{d} {size}")
    return "\n".join(lines) + "\n"


def parse_schedule(text: str) -> ProbeSchedule:
    delays: list[int] = []
    sizes: list[int] = []
    pending: list[tuple[int, int]] = []  # (count, rate) awaiting their first entry
    bounds: list[tuple[int, BurstSpec]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            words = line[1:].split()
            if words and words[0] == "burst":
                try:
                    kv = dict(w.split("=", 1) for w in words[2:])
                    pending.append((int(kv["count"]), int(kv["rate_bps"])))
                except (KeyError, ValueError) as exc:
                    raise ScheduleError(f"line {lineno}: malformed burst comment {raw!r}") from exc
            continue
        try:
            d, size = (int(x) for x in line.split())
        except ValueError as exc:
            raise ScheduleError(f"line {lineno}: expected '<delay_us> <size_bytes>', got {raw!r}") from exc
        if pending:
            if len(pending) > 1:
                raise ScheduleError(f"line {lineno}: empty burst in schedule")
            count, rate = pending.pop()
            bounds.append((len(delays), BurstSpec(count, size, rate)))
        delays.append(d)
        sizes.append(size)
    if pending:
        raise ScheduleError("trailing burst comment without entries")
    return ProbeSchedule(tuple(delays), tuple(sizes), tuple(bounds))


def write_schedule(s: ProbeSchedule, path: str | Path) -> None:
    Path(path).write_text(format_schedule(s))


def read_schedule(path: str | Path) -> ProbeSchedule:
    return parse_schedule(Path(path).read_text())


# -- key-value config helpers shared by the grid and queue config files -----

_SUFFIX = {"": 1, "k": 10**3, "m": 10**6, "g": 10**9}
_RATE_RE = re.compile(r"([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*([kmg]?)(?:bps|b/s)?", re.IGNORECASE)


def parse_rate(text: str) -> int:
    """Parse a rate such as ``250M``, ``1.5G`` or ``96000000`` into bits/s."""
    m = _RATE_RE.fullmatch(text.strip())
    if m is None:
        raise ValueError(f"bad rate {text!r}")
    value = int(round(float(m.group(1)) * _SUFFIX[m.group(2).lower()]))
    if value <= 0:
        raise ValueError(f"rate must be positive: {text!r}")
    return value


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def parse_grid(text: str) -> CampaignGrid:
    """Grid config: ``burst_sizes=200,400``, ``send_rates=48M,96M``, ``payload=1500``, ``guard_gap_us=...``."""
    kv = parse_kv(text)
    kwargs: dict = {}
    if "burst_sizes" in kv:
        kwargs["burst_sizes"] = tuple(int(x) for x in kv["burst_sizes"].split(","))
    if "send_rates" in kv:
        kwargs["send_rates"] = tuple(parse_rate(x) for x in kv["send_rates"].split(","))
    if "payload" in kv:
        kwargs["payload_size"] = int(kv["payload"])
    if "guard_gap_us" in kv:
        kwargs["guard_gap"] = int(kv["guard_gap_us"])
    if "byte_budget" in kv:
        kwargs["byte_budget"] = int(kv["byte_budget"])
    return CampaignGrid(**kwargs)


def format_grid(grid: CampaignGrid) -> str:
    return "\n".join([
        FORMAT_HEADER,
        "burst_sizes=" + ",".join(str(s) for s in grid.burst_sizes),
        "send_rates=" + ",".join(str(r) for r in grid.send_rates),
        f"payload={grid.payload_size}",
        f"guard_gap_us={grid.guard_gap}",
        f"byte_budget={grid.byte_budget}",
    ]) + "\n"


def campaign_packet_count(grid: CampaignGrid) -> int:
    return sum(grid.burst_sizes) * len(grid.send_rates)

