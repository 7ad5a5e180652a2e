"""``qchar`` command line: one subcommand per stage of a measurement campaign.

Exit status is 0 on success, 1 when a module reports an error and 2 for
usage errors (unknown subcommand, bad flag, empty search range).
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .analysis import (AnalysisError, FairnessThresholds, FlowSeries, detect_rate_changes, fairness_verdict,
                       heatmap, heatmap_csv, queuing_delay_series, receive_count_series)
from .fitter import FitError, SearchSpace, departure_series, fit, fit_piecewise
from .plotting import PlotError, emit_plot
from .queue_sim import CapacityUnit, DropPolicy, QueueConfig, simulate_schedule
from .schedule import (FORMAT_HEADER, BurstSpec, CampaignGrid, ScheduleError, format_grid, make_burst_schedule,
                       make_campaign, parse_grid, parse_rate, read_schedule, write_schedule)
from .trace import CorruptTraceError, PacketTrace, SideTrace, merge_traces
from .wire_prober import ProberError, loopback_selftest, run_receiver, run_sender

log = logging.getLogger("qchar")


class _UsageError(Exception):
    pass


def _rate(text: str) -> int:
    try:
        return parse_rate(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _write(path: str, text: str) -> None:
    if path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


# -- subcommands --------------------------------------------------------------

def cmd_schedule(a) -> int:
    if a.write_default_grid:
        _write(a.write_default_grid, format_grid(CampaignGrid()))
        return 0
    if a.grid:
        sched = make_campaign(parse_grid(Path(a.grid).read_text()))
    elif a.count and a.rate:
        sched = make_burst_schedule(BurstSpec(a.count, a.size, a.rate))
    else:
        raise _UsageError("give --grid FILE, or --count and --rate for a single burst")
    if not a.out:
        raise _UsageError("--out is required")
    write_schedule(sched, a.out)
    return 0


def cmd_serve(a) -> int:
    tr = run_receiver(a.bind, a.expected, a.idle_timeout, a.start_timeout)
    _write(a.out, tr.to_csv())
    if tr.malformed:
        log.warning("ignored %d malformed datagrams", tr.malformed)
    return 0


def cmd_send(a) -> int:
    rep = run_sender(read_schedule(a.schedule), a.target, int(a.spin_us * 1000))
    _write(a.out, rep.trace.to_csv())
    print(f"sent={len(rep.trace)} p99_gap_error_us={rep.p99_gap_error_us:.2f} "
          f"max_gap_error_us={rep.max_gap_error_us:.2f}")
    return 0


def cmd_merge(a) -> int:
    sched = read_schedule(a.schedule)
    send = SideTrace.from_csv(Path(a.send).read_text())
    recv = SideTrace.from_csv(Path(a.recv).read_text())
    tr = merge_traces(send, recv, sched)
    tr.write(a.out)
    print(f"packets={len(tr)} delivered={tr.n_delivered} lost={tr.n_lost} duplicates={tr.duplicates}")
    if a.manifest:
        if a.replication < 1:
            raise _UsageError("--replication must be at least 1")
        files = {"schedule": a.schedule, "send": a.send, "recv": a.recv, "trace": a.out}
        missing = [p for p in files.values() if not Path(p).exists()]
        if missing:
            raise FileNotFoundError(f"manifest references missing files: {missing}")
        now = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
        manifest = {
            "format": FORMAT_HEADER.lstrip("# "),
            "campaign_id": a.campaign_id or Path(a.schedule).stem,
            "replication": a.replication,
            "files": files,
            "created_utc": now,
            "tool_version": __version__,
        }
        Path(a.manifest).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return 0


def cmd_sim(a) -> int:
    sched = read_schedule(a.schedule)
    cfg = QueueConfig.read(a.config)
    sim = simulate_schedule(sched, cfg, a.burst)
    if a.format == "sim":
        _write(a.out, sim.to_csv())
    else:
        bounds = sched.burst_boundaries if a.burst is None else ((0, sched.burst_boundaries[a.burst][1]),)
        _write(a.out, PacketTrace.from_sim(sim, bounds, a.base_owd_ns).to_csv())
    return 0


def cmd_fit(a) -> int:
    try:
        space = SearchSpace(a.kmin, a.kmax, a.kstep, a.rmin, a.rmax, a.rstep,
                            None if a.policy == "search" else DropPolicy(a.policy),
                            CapacityUnit(a.unit), a.segments)
    except FitError as exc:
        raise _UsageError(str(exc)) from exc
    emp = PacketTrace.read(a.trace)
    if a.schedule:
        sched = read_schedule(a.schedule)
        if len(sched) != len(emp):
            raise FitError(f"trace has {len(emp)} packets but the schedule has {len(sched)}")
        if not emp.burst_boundaries:
            emp.burst_boundaries = sched.burst_boundaries
    weights = (a.w_loss, a.w_delay)
    fn = fit_piecewise if a.segments > 1 else fit
    res = fn(emp, space, weights, burst=a.burst, workers=a.workers)
    _write(a.out, res.to_json())
    return 0


def cmd_analyze_heatmap(a) -> int:
    grid = parse_grid(Path(a.grid).read_text())
    paths = sorted(Path(a.traces).glob(a.pattern))
    if not paths:
        raise AnalysisError(f"no trace files matching {a.pattern!r} in {a.traces}")
    cells = heatmap((PacketTrace.read(p) for p in paths), grid)
    _write(a.out, heatmap_csv(cells))
    return 0


def cmd_analyze_qdelay(a) -> int:
    _write(a.out, queuing_delay_series(PacketTrace.read(a.trace), a.burst).to_csv())
    return 0


def cmd_analyze_recvcount(a) -> int:
    _write(a.out, receive_count_series(PacketTrace.read(a.trace), a.burst).to_csv())
    return 0


def cmd_analyze_changes(a) -> int:
    tr = PacketTrace.read(a.trace)
    part = tr if a.burst is None else tr.burst(a.burst)
    if not part.n_delivered:
        raise AnalysisError("all packets lost; nothing to analyze")
    size = int(part.size[0])
    if a.kind == "count":
        x, y = departure_series(part)
        rc = detect_rate_changes(x, y, a.max_changes, "count", packet_size=size)
    else:
        spec = part.spec
        rate = a.send_rate or (spec.send_rate if spec else None)
        if rate is None:
            raise _UsageError("delay series need --send-rate when the trace has no burst metadata")
        ds = queuing_delay_series(tr, a.burst)
        rc = detect_rate_changes(ds.send_time_us, ds.qdelay_us, a.max_changes, "delay", send_rate=rate)
    lines = [FORMAT_HEADER, f"kind={a.kind}", f"changes={len(rc.change_points_us)}",
             "change_points_us=" + ",".join(f"{c:.0f}" for c in rc.change_points_us),
             "segment_rates_bps=" + ",".join(f"{r:.0f}" for r in rc.segment_rates_bps)]
    _write(a.out, "\n".join(lines) + "\n")
    return 0


def cmd_analyze_fairness(a) -> int:
    flows = FlowSeries.from_csv(Path(a.flows).read_text())
    th = FairnessThresholds(a.inconsistent_ratio, a.inconsistent_jain, a.consistent_ratio, a.consistent_jain)
    _write(a.out, fairness_verdict(flows, a.start, a.end, th).to_kv())
    return 0


def cmd_plot(a) -> int:
    emit_plot(a.input, a.kind, a.out)
    return 0


def cmd_selftest(a) -> int:
    sched = make_burst_schedule(BurstSpec(a.packets, a.size, a.rate))
    rep = loopback_selftest(sched)
    for line in rep.lines():
        print(line)
    ok = rep.conserved and rep.loss_fraction == 0 and rep.send.p99_gap_error_us < 100
    print("selftest " + ("passed" if ok else "FAILED"))
    return 0 if ok else 1


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qchar", description="Bottleneck queue characterization with probe bursts.")
    p.add_argument("--version", action="version", version=f"qchar {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", required=True)

    s = sub.add_parser("schedule", help="write a burst or campaign schedule file")
    s.add_argument("--grid", help="campaign grid config (key=value)")
    s.add_argument("--count", type=int, help="packets in a single burst")
    s.add_argument("--size", type=int, default=1500, help="payload bytes (default 1500)")
    s.add_argument("--rate", type=_rate, help="send rate, e.g. 500M")
    s.add_argument("--out", help="schedule file to write")
    s.add_argument("--write-default-grid", metavar="PATH", help="write the default 12x10 grid config and exit")
    s.set_defaults(func=cmd_schedule)

    s = sub.add_parser("serve", help="receive probes and write the receiver trace")
    s.add_argument("--bind", required=True, help="HOST:PORT to listen on")
    s.add_argument("--out", required=True, help="receiver trace CSV")
    s.add_argument("--expected", type=int, help="stop after this many probes")
    s.add_argument("--idle-timeout", type=float, default=2.0, help="seconds of silence that end capture")
    s.add_argument("--start-timeout", type=float, help="seconds to wait for the first probe")
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("send", help="replay a schedule as UDP probes")
    s.add_argument("--schedule", required=True)
    s.add_argument("--target", required=True, help="HOST:PORT of the receiver")
    s.add_argument("--out", required=True, help="sender trace CSV")
    s.add_argument("--spin-us", type=float, default=200.0, help="busy-wait window before each send")
    s.set_defaults(func=cmd_send)

    s = sub.add_parser("merge", help="join sender and receiver traces")
    s.add_argument("--send", required=True)
    s.add_argument("--recv", required=True)
    s.add_argument("--schedule", required=True)
    s.add_argument("--out", required=True, help="merged trace CSV")
    s.add_argument("--manifest", help="also write a run manifest (JSON)")
    s.add_argument("--campaign-id", help="campaign id for the manifest (default: schedule file stem)")
    s.add_argument("--replication", type=int, default=1, help="replication index, from 1")
    s.set_defaults(func=cmd_merge)

    s = sub.add_parser("sim", help="run the queue simulator on a schedule")
    s.add_argument("--schedule", required=True)
    s.add_argument("--config", required=True, help="queue config (key=value)")
    s.add_argument("--out", required=True)
    s.add_argument("--burst", type=int, help="simulate only this burst")
    s.add_argument("--format", choices=("sim", "trace"), default="sim",
                   help="simulator CSV or a packet trace usable by analyze/fit")
    s.add_argument("--base-owd-ns", type=int, default=0, help="propagation delay added in trace format")
    s.set_defaults(func=cmd_sim)

    s = sub.add_parser("fit", help="infer queue capacity and drain rate from a trace")
    s.add_argument("--trace", required=True)
    s.add_argument("--schedule", help="schedule the trace was sent with (checked, supplies bursts)")
    s.add_argument("--kmin", type=int, required=True)
    s.add_argument("--kmax", type=int, required=True)
    s.add_argument("--kstep", type=int, required=True)
    s.add_argument("--rmin", type=_rate, required=True)
    s.add_argument("--rmax", type=_rate, required=True)
    s.add_argument("--rstep", type=_rate, required=True)
    s.add_argument("--policy", choices=("drop_front", "drop_tail", "search"), default="drop_front")
    s.add_argument("--unit", choices=("packets", "bytes"), default="packets", help="capacity unit")
    s.add_argument("--segments", type=int, default=1, help="maximum drain-rate segments")
    s.add_argument("--burst", type=int, help="burst to fit in a multi-burst trace")
    s.add_argument("--w-loss", type=float, default=1.0)
    s.add_argument("--w-delay", type=float, default=1.0)
    s.add_argument("--workers", type=int, help="parallel simulations (default: QCHAR_THREADS or CPU count)")
    s.add_argument("--out", required=True, help="fit result JSON")
    s.set_defaults(func=cmd_fit)

    an = sub.add_parser("analyze", help="derived views of traces")
    asub = an.add_subparsers(dest="view", metavar="VIEW", required=True)

    s = asub.add_parser("heatmap", help="per-cell loss and mean OWD over replications")
    s.add_argument("--traces", required=True, help="directory of trace CSVs")
    s.add_argument("--grid", required=True, help="campaign grid config")
    s.add_argument("--pattern", default="*.csv", help="file glob inside --traces")
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_analyze_heatmap)

    for name, fn, text in (("qdelay", cmd_analyze_qdelay, "queuing delay vs send time"),
                           ("recvcount", cmd_analyze_recvcount, "cumulative receive count vs time")):
        s = asub.add_parser(name, help=text)
        s.add_argument("--trace", required=True)
        s.add_argument("--burst", type=int)
        s.add_argument("--out", default="-")
        s.set_defaults(func=fn)

    s = asub.add_parser("changes", help="detect drain-rate changes")
    s.add_argument("--trace", required=True)
    s.add_argument("--burst", type=int)
    s.add_argument("--kind", choices=("count", "delay"), default="count")
    s.add_argument("--max-changes", type=int, default=2)
    s.add_argument("--send-rate", type=_rate, help="burst send rate for delay series")
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_analyze_changes)

    s = asub.add_parser("fairness", help="per-flow fair queuing consistency check")
    s.add_argument("--flows", required=True, help="CSV with flow,window_start_s,bps")
    s.add_argument("--start", type=float, help="span start in seconds")
    s.add_argument("--end", type=float, help="span end in seconds")
    d = FairnessThresholds()
    s.add_argument("--inconsistent-ratio", type=float, default=d.inconsistent_ratio)
    s.add_argument("--inconsistent-jain", type=float, default=d.inconsistent_jain)
    s.add_argument("--consistent-ratio", type=float, default=d.consistent_ratio)
    s.add_argument("--consistent-jain", type=float, default=d.consistent_jain)
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_analyze_fairness)

    s = sub.add_parser("plot", help="render a series or heatmap CSV as SVG")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--kind", choices=("line", "heatmap"), required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plot)

    s = sub.add_parser("selftest", help="loopback probe sanity check")
    s.add_argument("--packets", type=int, default=10_000)
    s.add_argument("--size", type=int, default=1500)
    s.add_argument("--rate", type=_rate, default=48_000_000)
    s.set_defaults(func=cmd_selftest)
    return p


_MODULE_ERRORS = (ScheduleError, AnalysisError, FitError, PlotError, CorruptTraceError, ProberError,
                  ValueError, OSError, IndexError)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return a.func(a)
    except _UsageError as exc:
        parser.exit(2, f"qchar: error: {exc}\n")
    except _MODULE_ERRORS as exc:
        print(f"qchar: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
