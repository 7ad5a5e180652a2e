"""UDP probe sender/receiver with software timestamps.

Wire layout of a probe (big endian), padded with zeros to the scheduled size::

    magic  4 bytes  b"QCHR"
    seq    uint32
    ts     uint64   sender clock, ns

Both sides timestamp with ``CLOCK_MONOTONIC``, which is shared by all
processes on one host, so sender and receiver on the same machine produce
directly comparable one-way delays.
"""

from __future__ import annotations

import gc
import logging
import multiprocessing as mp
import socket
import struct
import time
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .schedule import ProbeSchedule
from .trace import PacketTrace, SideTrace, merge_traces

log = logging.getLogger(__name__)

MAGIC = b"QCHR"
HEADER = struct.Struct("!4sIQ")
MIN_PAYLOAD = HEADER.size  # 16
SPIN_NS = 200_000
OVERRUN_WARN_NS = 100_000

clock_ns: Callable[[], int] = time.monotonic_ns


class ProberError(OSError):
    pass


def clock_domain() -> str:
    return f"monotonic@{socket.gethostname()}"


def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"expected HOST:PORT, got {text!r}")
    return host.strip("[]") or "0.0.0.0", int(port)


def encode_probe(seq: int, ts_ns: int, size: int) -> bytes:
    if size < MIN_PAYLOAD:
        raise ValueError(f"probe payload must be at least {MIN_PAYLOAD} bytes, got {size}")
    return HEADER.pack(MAGIC, seq & 0xFFFFFFFF, ts_ns) + bytes(size - MIN_PAYLOAD)


def decode_probe(data: bytes) -> tuple[int, int] | None:
    """Return ``(seq, send_ts_ns)`` or None if ``data`` is not a probe."""
    if len(data) < MIN_PAYLOAD:
        return None
    magic, seq, ts = HEADER.unpack_from(data)
    if magic != MAGIC:
        return None
    return seq, ts


# -- sender -------------------------------------------------------------------

@dataclass
class SendReport:
    trace: SideTrace
    gap_error_ns: np.ndarray  # |achieved - scheduled| for each consecutive pair

    @property
    def p99_gap_error_us(self) -> float:
        if not len(self.gap_error_ns):
            return 0.0
        return float(np.percentile(self.gap_error_ns, 99)) / 1000

    @property
    def max_gap_error_us(self) -> float:
        return float(self.gap_error_ns.max()) / 1000 if len(self.gap_error_ns) else 0.0

    @property
    def span_us(self) -> float:
        ts = self.trace.ts_ns
        return float(ts[-1] - ts[0]) / 1000 if len(ts) else 0.0


@contextmanager
def _gc_paused():
    """Hold off the cyclic collector; a pass over a large heap stalls timing loops."""
    was_on = gc.isenabled()
    gc.disable()
    try:
        yield
    finally:
        if was_on:
            gc.enable()


def run_sender(schedule: ProbeSchedule, target: tuple[str, int] | str,
               spin_ns: int = SPIN_NS) -> SendReport:
    """Send every scheduled probe as close to its scheduled instant as possible.

    Sleeps until ``spin_ns`` before each deadline and busy-waits the rest.
    Late packets are sent immediately; the schedule is not stretched.
    """
    if not len(schedule):
        raise ValueError("cannot send an empty schedule")
    if isinstance(target, str):
        target = parse_address(target)
    try:
        addr = socket.getaddrinfo(target[0], target[1], socket.AF_INET, socket.SOCK_DGRAM)[0][4]
    except socket.gaierror as exc:
        raise ProberError(f"cannot resolve target {target}: {exc}") from exc
    if min(schedule.sizes) < MIN_PAYLOAD:
        raise ValueError(f"schedule has payloads below {MIN_PAYLOAD} bytes")

    offsets = np.cumsum(np.asarray(schedule.delays_us, dtype=np.int64)) * 1000
    sizes = schedule.sizes
    n = len(sizes)
    ts = np.empty(n, dtype=np.int64)
    buffers = {s: bytearray(s) for s in set(sizes)}
    pack = HEADER.pack_into
    now = clock_ns
    sleep = time.sleep

    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, 4 << 20)
    with sock, _gc_paused():
        start = now() + 1_000_000
        for i in range(n):
            deadline = start + int(offsets[i])
            remaining = deadline - now()
            if remaining > spin_ns:
                sleep((remaining - spin_ns) / 1e9)
            while now() < deadline:
                pass
            buf = buffers[sizes[i]]
            t = now()
            pack(buf, 0, MAGIC, i & 0xFFFFFFFF, t)
            try:
                sock.sendto(buf, addr)
            except (ConnectionRefusedError, BlockingIOError):
                # receiver down or buffer full: UDP is fire-and-forget
                pass
            except OSError as exc:
                raise ProberError(f"send to {addr} failed: {exc}") from exc
            ts[i] = t

    gaps = np.diff(ts)
    err = np.abs(gaps - np.diff(offsets))
    if len(err) and err.max() > OVERRUN_WARN_NS:
        log.warning("pacing overrun: %d gaps off by more than %d us (max %.1f us)",
                    int(np.count_nonzero(err > OVERRUN_WARN_NS)), OVERRUN_WARN_NS // 1000, err.max() / 1000)
    trace = SideTrace(np.arange(n), np.asarray(sizes), ts, clock_domain(), "software")
    return SendReport(trace, err)


# -- receiver -----------------------------------------------------------------

def open_receiver_socket(bind: tuple[str, int] | str) -> socket.socket:
    if isinstance(bind, str):
        bind = parse_address(bind)
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 8 << 20)
    try:
        sock.bind(bind)
    except OSError as exc:
        sock.close()
        raise ProberError(f"cannot bind {bind}: {exc}") from exc
    return sock


def run_receiver(bind: tuple[str, int] | str | socket.socket, expected: int | None = None,
                 idle_timeout: float = 2.0, start_timeout: float | None = None,
                 max_size: int = 65535) -> SideTrace:
    """Record probes until ``expected`` arrive or the link goes quiet.

    ``idle_timeout`` is measured from the latest probe; ``start_timeout``
    (default: wait forever) bounds the wait for the first one.
    """
    sock = bind if isinstance(bind, socket.socket) else open_receiver_socket(bind)
    buf = bytearray(max_size)
    view = memoryview(buf)
    seqs: list[int] = []
    sizes: list[int] = []
    stamps: list[int] = []
    malformed = 0
    now = clock_ns
    magic = MAGIC
    unpack = HEADER.unpack_from
    try:
        with _gc_paused():
            sock.settimeout(start_timeout)
            while expected is None or len(seqs) < expected:
                try:
                    nbytes = sock.recv_into(buf)
                except socket.timeout:
                    break
                t = now()
                if nbytes < MIN_PAYLOAD:
                    malformed += 1
                    continue
                m, seq, _ = unpack(view)
                if m != magic:
                    malformed += 1
                    continue
                seqs.append(seq)
                sizes.append(nbytes)
                stamps.append(t)
                if len(seqs) == 1:
                    sock.settimeout(idle_timeout)
    finally:
        if not isinstance(bind, socket.socket):
            sock.close()
    return SideTrace(seqs, sizes, stamps, clock_domain(), "software", malformed)


# -- loopback self-test -------------------------------------------------------

def _receiver_proc(conn, expected, idle_timeout):
    sock = open_receiver_socket(("127.0.0.1", 0))
    conn.send(sock.getsockname()[1])
    tr = run_receiver(sock, expected, idle_timeout, start_timeout=30.0)
    conn.send((tr.seq, tr.size, tr.ts_ns, tr.clock_domain, tr.malformed))
    conn.close()
    sock.close()


@dataclass
class SelfTestReport:
    trace: PacketTrace
    send: SendReport

    @property
    def loss_fraction(self) -> float:
        return self.trace.loss_fraction

    @property
    def p99_owd_us(self) -> float:
        owd = self.trace.owd_ns[self.trace.received]
        return float(np.percentile(owd, 99)) / 1000 if len(owd) else float("nan")

    @property
    def conserved(self) -> bool:
        return self.trace.n_delivered + self.trace.n_lost == len(self.send.trace)

    def lines(self) -> list[str]:
        return [
            f"packets={len(self.trace)} delivered={self.trace.n_delivered} lost={self.trace.n_lost}",
            f"loss_fraction={self.loss_fraction:.6f}",
            f"p99_gap_error_us={self.send.p99_gap_error_us:.2f}",
            f"max_gap_error_us={self.send.max_gap_error_us:.2f}",
            f"p99_owd_us={self.p99_owd_us:.2f}",
            f"conserved={self.conserved}",
        ]


def loopback_selftest(schedule: ProbeSchedule, idle_timeout: float = 1.0) -> SelfTestReport:
    """Run sender and receiver as two processes over 127.0.0.1 and merge."""
    ctx = mp.get_context("fork" if "fork" in mp.get_all_start_methods() else "spawn")
    parent, child = ctx.Pipe()
    proc = ctx.Process(target=_receiver_proc, args=(child, len(schedule), idle_timeout), daemon=True)
    proc.start()
    try:
        if not parent.poll(30):
            raise ProberError("receiver process did not start")
        port = parent.recv()
        report = run_sender(schedule, ("127.0.0.1", port))
        if not parent.poll(60):
            raise ProberError("receiver process did not report")
        seq, size, ts, domain, malformed = parent.recv()
    finally:
        proc.join(5)
        if proc.is_alive():
            proc.terminate()
    recv = SideTrace(seq, size, ts, domain, "software", malformed)
    return SelfTestReport(merge_traces(report.trace, recv, schedule), report)
