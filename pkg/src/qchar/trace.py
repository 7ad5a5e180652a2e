"""Per-packet traces: one side (sender or receiver) and the merged view.

All timestamps are integer nanoseconds.  A merged :class:`PacketTrace` is
ordered by sequence number; lost packets have ``recv_ns == -1``.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .schedule import FORMAT_HEADER, BurstSpec, ProbeSchedule

LOST = -1


class CorruptTraceError(ValueError):
    """Receiver saw a sequence number the sender never sent, or similar."""


class NegativeOWDWarning(UserWarning):
    pass


@dataclass
class SideTrace:
    """Records captured on one side of the path, in capture order."""

    seq: np.ndarray
    size: np.ndarray
    ts_ns: np.ndarray
    clock_domain: str = "unknown"
    ts_source: str = "software"
    malformed: int = 0

    def __post_init__(self):
        self.seq = np.asarray(self.seq, dtype=np.int64)
        self.size = np.asarray(self.size, dtype=np.int64)
        self.ts_ns = np.asarray(self.ts_ns, dtype=np.int64)
        if not (len(self.seq) == len(self.size) == len(self.ts_ns)):
            raise ValueError("trace columns differ in length")

    def __len__(self) -> int:
        return len(self.seq)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"{FORMAT_HEADER}\n# clock_domain={self.clock_domain}\n# ts_source={self.ts_source}\n")
        if self.malformed:
            buf.write(f"# malformed={self.malformed}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["seq", "size_bytes", "ts_ns"])
        w.writerows(zip(self.seq.tolist(), self.size.tolist(), self.ts_ns.tolist()))
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> SideTrace:
        meta, rows = _split(text)
        try:
            seq = [int(r["seq"]) for r in rows]
            size = [int(r["size_bytes"]) for r in rows]
            ts = [int(r["ts_ns"]) for r in rows]
        except (KeyError, ValueError) as exc:
            raise ValueError(f"not a side-trace CSV: {exc}") from exc
        return cls(seq, size, ts, meta.get("clock_domain", "unknown"),
                   meta.get("ts_source", "software"), int(meta.get("malformed", 0)))


SenderTrace = SideTrace
ReceiverTrace = SideTrace


@dataclass
class PacketTrace:
    seq: np.ndarray
    size: np.ndarray
    send_ns: np.ndarray
    recv_ns: np.ndarray
    burst_boundaries: tuple[tuple[int, BurstSpec], ...] = ()
    clock_domain: str = "unknown"
    ts_source: str = "software"
    duplicates: int = field(default=0, compare=False)

    def __post_init__(self):
        self.seq = np.asarray(self.seq, dtype=np.int64)
        self.size = np.asarray(self.size, dtype=np.int64)
        self.send_ns = np.asarray(self.send_ns, dtype=np.int64)
        self.recv_ns = np.asarray(self.recv_ns, dtype=np.int64)
        if not (len(self.seq) == len(self.size) == len(self.send_ns) == len(self.recv_ns)):
            raise ValueError("trace columns differ in length")
        self.burst_boundaries = tuple(self.burst_boundaries)

    def __len__(self) -> int:
        return len(self.seq)

    @property
    def received(self) -> np.ndarray:
        return self.recv_ns != LOST

    @property
    def owd_ns(self) -> np.ndarray:
        """One-way delay; ``-1`` is never a valid value here, lost packets give NaN."""
        return np.where(self.received, self.recv_ns - self.send_ns, np.nan)

    @property
    def n_delivered(self) -> int:
        return int(np.count_nonzero(self.received))

    @property
    def n_lost(self) -> int:
        return len(self) - self.n_delivered

    @property
    def loss_fraction(self) -> float:
        return self.n_lost / len(self) if len(self) else 0.0

    @property
    def negative_owd_count(self) -> int:
        r = self.received
        return int(np.count_nonzero(self.recv_ns[r] < self.send_ns[r]))

    def n_bursts(self) -> int:
        return max(1, len(self.burst_boundaries))

    def burst_slices(self) -> list[slice]:
        if not self.burst_boundaries:
            return [slice(0, len(self))]
        starts = [s for s, _ in self.burst_boundaries] + [len(self)]
        return [slice(a, b) for a, b in zip(starts[:-1], starts[1:])]

    def burst(self, index: int) -> PacketTrace:
        slices = self.burst_slices()
        if not 0 <= index < len(slices):
            raise IndexError(f"burst index {index} out of range (trace has {len(slices)} bursts)")
        sl = slices[index]
        bounds = ((0, self.burst_boundaries[index][1]),) if self.burst_boundaries else ()
        return PacketTrace(self.seq[sl], self.size[sl], self.send_ns[sl], self.recv_ns[sl],
                           bounds, self.clock_domain, self.ts_source)

    def bursts(self) -> list[PacketTrace]:
        return [self.burst(i) for i in range(self.n_bursts())]

    @property
    def spec(self) -> BurstSpec | None:
        """The BurstSpec of a single-burst trace."""
        return self.burst_boundaries[0][1] if len(self.burst_boundaries) == 1 else None

    # -- CSV ------------------------------------------------------------------

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"{FORMAT_HEADER}\n# clock_domain={self.clock_domain}\n# ts_source={self.ts_source}\n")
        for i, (start, spec) in enumerate(self.burst_boundaries):
            buf.write(f"# burst {i} start={start} count={spec.packet_count} "
                      f"size={spec.payload_size} rate_bps={spec.send_rate}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["seq", "size_bytes", "send_ns", "recv_ns"])
        for q, s, snd, rcv in zip(self.seq.tolist(), self.size.tolist(),
                                  self.send_ns.tolist(), self.recv_ns.tolist()):
            w.writerow([q, s, snd, "" if rcv == LOST else rcv])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> PacketTrace:
        meta, rows = _split(text)
        bounds = []
        for line in text.splitlines():
            words = line[1:].split() if line.startswith("#") else []
            if words[:1] == ["burst"]:
                kv = dict(w.split("=", 1) for w in words[2:])
                spec = BurstSpec(int(kv["count"]), int(kv["size"]), int(kv["rate_bps"]))
                bounds.append((int(kv["start"]), spec))
        try:
            seq = [int(r["seq"]) for r in rows]
            size = [int(r["size_bytes"]) for r in rows]
            send = [int(r["send_ns"]) for r in rows]
            recv = [int(r["recv_ns"]) if r["recv_ns"] else LOST for r in rows]
        except (KeyError, ValueError, TypeError) as exc:
            raise ValueError(f"not a packet-trace CSV: {exc}") from exc
        return cls(seq, size, send, recv, tuple(bounds),
                   meta.get("clock_domain", "unknown"), meta.get("ts_source", "software"))

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def read(cls, path: str | Path) -> PacketTrace:
        return cls.from_csv(Path(path).read_text())

    # -- simulator bridge -----------------------------------------------------

    @classmethod
    def from_sim(cls, sim, boundaries: Sequence[tuple[int, BurstSpec]] = (),
                 base_owd_ns: int = 0) -> PacketTrace:
        """Turn a simulator result into a trace as a receiver would have seen it.

        Arrival times become send times and departures (plus ``base_owd_ns``
        of propagation) become receive times.
        """
        send = sim.arrival_us.astype(np.int64) * 1000
        recv = np.where(sim.delivered, sim.time_us.astype(np.int64) * 1000 + base_owd_ns, LOST)
        return cls(sim.seq, sim.size, send, recv, tuple(boundaries), "simulated", "simulated")


def _split(text: str) -> tuple[dict[str, str], list[dict[str, str]]]:
    meta = {}
    body = []
    for line in text.splitlines():
        if line.startswith("#"):
            item = line[1:].strip()
            if "=" in item and " " not in item:
                k, v = item.split("=", 1)
                meta[k] = v
        elif line.strip():
            body.append(line)
    return meta, list(csv.DictReader(body))


def merge_traces(sender: SideTrace, receiver: SideTrace,
                 boundaries: Sequence[tuple[int, BurstSpec]] | ProbeSchedule = ()) -> PacketTrace:
    """Join sender and receiver records on sequence number."""
    if isinstance(boundaries, ProbeSchedule):
        boundaries = boundaries.burst_boundaries
    if sender.clock_domain != receiver.clock_domain:
        raise ValueError(f"clock domains differ: {sender.clock_domain!r} vs {receiver.clock_domain!r}")
    order = np.argsort(sender.seq, kind="stable")
    seq = sender.seq[order]
    if len(seq) and np.any(np.diff(seq) == 0):
        raise CorruptTraceError("duplicate sequence numbers on the sender side")
    recv = np.full(len(seq), LOST, dtype=np.int64)

    # earliest copy wins
    r_order = np.lexsort((receiver.ts_ns, receiver.seq))
    r_seq = receiver.seq[r_order]
    r_ts = receiver.ts_ns[r_order]
    first = np.r_[True, r_seq[1:] != r_seq[:-1]] if len(r_seq) else np.zeros(0, bool)
    duplicates = int(len(r_seq) - np.count_nonzero(first))
    r_seq, r_ts = r_seq[first], r_ts[first]
    pos = np.searchsorted(seq, r_seq)
    ok = (pos < len(seq)) & (seq[np.minimum(pos, len(seq) - 1)] == r_seq) if len(seq) else np.zeros(len(r_seq), bool)
    if not np.all(ok):
        raise CorruptTraceError(f"receiver has {int(np.count_nonzero(~ok))} sequence numbers never sent, "
                                f"e.g. {int(r_seq[~ok][0])}")
    recv[pos] = r_ts
    out = PacketTrace(seq, sender.size[order], sender.ts_ns[order], recv, tuple(boundaries),
                      sender.clock_domain, sender.ts_source, duplicates)
    if out.negative_owd_count:
        warnings.warn(f"{out.negative_owd_count} packets have negative one-way delay", NegativeOWDWarning)
    return out
