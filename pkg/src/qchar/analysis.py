"""Derived views of packet traces.

Queuing-induced delay series, per-cell heatmap statistics, receive-count
series, slope change detection and a max-min fairness consistency check on
per-flow throughput series.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .schedule import FORMAT_HEADER, CampaignGrid
from .trace import PacketTrace


class AnalysisError(ValueError):
    pass


# -- queuing delay ------------------------------------------------------------

@dataclass
class DelaySeries:
    send_time_us: np.ndarray
    qdelay_us: np.ndarray  # NaN where lost
    lost: np.ndarray
    baseline_owd_ns: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"{FORMAT_HEADER}\n# baseline_owd_ns={self.baseline_owd_ns}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["send_time_us", "qdelay_us", "lost"])
        for t, q, lost in zip(self.send_time_us.tolist(), self.qdelay_us.tolist(), self.lost.tolist()):
            w.writerow([_num(t), "" if lost else _num(q), int(lost)])
        return buf.getvalue()


def _num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else f"{x:.3f}"


def baseline_owd_ns(trace: PacketTrace) -> int:
    if not trace.n_delivered:
        raise AnalysisError("no delivered packets")
    r = trace.received
    return int((trace.recv_ns[r] - trace.send_ns[r]).min())


def queuing_delay_series(trace: PacketTrace, burst: int | None = None) -> DelaySeries:
    """OWD minus the run's minimum OWD, against send time since burst start.

    The baseline is taken over the whole trace (the run), then the requested
    burst is cut out.
    """
    if not trace.n_delivered:
        raise AnalysisError("all packets lost; no delay series")
    base = baseline_owd_ns(trace)
    part = trace if burst is None else trace.burst(burst)
    if not part.n_delivered:
        raise AnalysisError(f"all packets of burst {burst} were lost")
    send_us = (part.send_ns - part.send_ns[0]) / 1000
    lost = ~part.received
    q = np.where(lost, np.nan, (part.recv_ns - part.send_ns - base) / 1000)
    return DelaySeries(send_us, q, lost, base)


# -- heatmap ------------------------------------------------------------------

@dataclass(frozen=True)
class HeatmapCell:
    burst_size: int
    send_rate: int
    loss_fraction: float
    mean_owd_us: float
    replication_count: int


def cell_stats(traces: Sequence[PacketTrace]) -> HeatmapCell:
    """Mean loss fraction and mean delivered OWD across replications of one cell.

    Each trace must hold exactly one burst.  Replications with no delivered
    packet contribute to the loss mean but not to the OWD mean.
    """
    if not traces:
        raise AnalysisError("need at least one replication")
    specs = {(t.spec.packet_count, t.spec.send_rate) if t.spec else None for t in traces}
    if len(specs) != 1 or None in specs:
        raise AnalysisError(f"replications mix burst cells: {sorted(map(str, specs))}")
    (size, rate), = specs
    loss = [t.loss_fraction for t in traces]
    owds = [float(np.nanmean(t.owd_ns)) / 1000 for t in traces if t.n_delivered]
    mean_owd = float(np.mean(owds)) if owds else float("nan")
    return HeatmapCell(size, rate, float(np.mean(loss)), mean_owd, len(traces))


def heatmap(traces: Iterable[PacketTrace], grid: CampaignGrid) -> list[HeatmapCell]:
    """One cell per (burst size, send rate) of ``grid``, row-major.

    Every burst of every trace must map to a grid cell.
    """
    cells: dict[tuple[int, int], list[PacketTrace]] = {c: [] for c in grid.cells}
    for tr in traces:
        for b in tr.bursts():
            if b.spec is None:
                raise AnalysisError("trace has no burst boundaries; cannot map it to a grid cell")
            key = (b.spec.packet_count, b.spec.send_rate)
            if key not in cells:
                raise AnalysisError(f"burst (size={key[0]}, rate={key[1]}) is not in the grid")
            cells[key].append(b)
    missing = [k for k, v in cells.items() if not v]
    if missing:
        raise AnalysisError(f"no replications for grid cells {missing[:3]}...")
    return [cell_stats(cells[k]) for k in grid.cells]


def heatmap_csv(cells: Sequence[HeatmapCell]) -> str:
    buf = io.StringIO()
    buf.write(FORMAT_HEADER + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["burst_size", "rate_bps", "loss_fraction", "mean_owd_us", "n"])
    for c in cells:
        w.writerow([c.burst_size, c.send_rate, f"{c.loss_fraction:.6f}", f"{c.mean_owd_us:.3f}",
                    c.replication_count])
    return buf.getvalue()


def read_heatmap_csv(text: str) -> list[HeatmapCell]:
    rows = list(csv.DictReader(line for line in text.splitlines() if not line.startswith("#")))
    try:
        return [HeatmapCell(int(r["burst_size"]), int(r["rate_bps"]), float(r["loss_fraction"]),
                            float(r["mean_owd_us"]), int(r["n"])) for r in rows]
    except (KeyError, ValueError, TypeError) as exc:
        raise AnalysisError(f"not a heatmap CSV: {exc}") from exc


# -- receive count ------------------------------------------------------------

@dataclass
class ReceiveSeries:
    recv_time_us: np.ndarray  # since the first delivery
    count: np.ndarray
    seq: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(FORMAT_HEADER + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["recv_time_us", "count", "seq"])
        for row in zip(self.recv_time_us.tolist(), self.count.tolist(), self.seq.tolist()):
            w.writerow([_num(row[0]), row[1], row[2]])
        return buf.getvalue()


def receive_count_series(trace: PacketTrace, burst: int | None = None) -> ReceiveSeries:
    part = trace if burst is None else trace.burst(burst)
    if not part.n_delivered:
        raise AnalysisError("all packets lost; no receive series")
    r = part.received
    recv = part.recv_ns[r]
    order = np.argsort(recv, kind="stable")
    recv = recv[order]
    return ReceiveSeries((recv - recv[0]) / 1000, np.arange(1, len(recv) + 1), part.seq[r][order])


# -- slope change detection ---------------------------------------------------

@dataclass
class RateChanges:
    change_points_us: list[float]
    segment_rates_bps: list[float]
    rss: list[float]  # best residual sum of squares with 0, 1, ... changes


class _SegmentCost:
    """O(1) least-squares residual of a straight line over any index range."""

    def __init__(self, x: np.ndarray, y: np.ndarray):
        x = x - x.mean()
        y = y - y.mean()
        z = np.zeros(1)
        self.n = np.arange(len(x) + 1, dtype=float)
        self.sx = np.concatenate([z, np.cumsum(x)])
        self.sy = np.concatenate([z, np.cumsum(y)])
        self.sxx = np.concatenate([z, np.cumsum(x * x)])
        self.sxy = np.concatenate([z, np.cumsum(x * y)])
        self.syy = np.concatenate([z, np.cumsum(y * y)])

    @np.errstate(divide="ignore", invalid="ignore")
    def stats(self, i, j):
        n = self.n[j] - self.n[i]
        sx = self.sx[j] - self.sx[i]
        sy = self.sy[j] - self.sy[i]
        sxx = self.sxx[j] - self.sxx[i] - sx * sx / n
        sxy = self.sxy[j] - self.sxy[i] - sx * sy / n
        syy = self.syy[j] - self.syy[i] - sy * sy / n
        return sxx, sxy, syy

    def rss(self, i, j):
        sxx, sxy, syy = self.stats(i, j)
        with np.errstate(divide="ignore", invalid="ignore"):
            r = syy - np.where(sxx > 0, sxy * sxy / np.where(sxx > 0, sxx, 1), 0.0)
        return np.maximum(r, 0.0)

    def slope(self, i, j) -> float:
        sxx, sxy, _ = self.stats(i, j)
        return float(sxy / sxx) if sxx > 0 else 0.0


def detect_rate_changes(x_us, y, max_changes: int = 1, kind: str = "count",
                        packet_size: int = 1500, send_rate: float | None = None,
                        grid_us: int = 1000, min_improvement: float = 0.15,
                        min_segment_us: int | None = None) -> RateChanges:
    """Find slope changes in a receive-count or queuing-delay series.

    Segments are independent least-squares lines with breakpoints on a
    ``grid_us`` grid.  The best split into ``k + 1`` segments is kept only if
    it lowers the residual sum of squares by at least ``min_improvement``
    relative to the best ``k``-change fit; the search stops at the first
    rejected step.

    Slopes become drain rates in bits/s: for ``kind="count"`` (packets vs
    receive time) ``rate = slope * packet_size * 8e6``; for ``kind="delay"``
    (queuing delay vs send time, no loss) ``rate = send_rate / (1 + slope)``.
    """
    x = np.asarray(x_us, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) != len(y):
        raise ValueError("x and y differ in length")
    if kind not in ("count", "delay"):
        raise ValueError(f"kind must be 'count' or 'delay', got {kind!r}")
    if kind == "delay" and send_rate is None:
        raise ValueError("delay series need send_rate")
    if max_changes < 0:
        raise ValueError("max_changes must be non-negative")
    ok = np.isfinite(x) & np.isfinite(y)
    x, y = x[ok], y[ok]
    order = np.argsort(x, kind="stable")
    x, y = x[order], y[order]
    n = len(x)
    if n < 20:
        return RateChanges([], [], [])

    min_seg = min_segment_us if min_segment_us is not None else 5 * grid_us
    cost = _SegmentCost(x, y)
    g0 = np.ceil(x[0] / grid_us) * grid_us
    grid = np.arange(g0, x[-1], grid_us)
    # boundary candidates as point indices; first and last are the series ends
    cut = np.unique(np.searchsorted(x, grid, side="left"))
    cut = cut[(cut > 0) & (cut < n)]
    bounds = np.concatenate([[0], cut, [n]])
    xb = np.concatenate([[x[0]], x[cut], [x[-1] + grid_us]])
    B = len(bounds)

    def feasible(a_idx, b_idx):
        return (bounds[b_idx] - bounds[a_idx] >= 3) & (xb[b_idx] - xb[a_idx] >= min_seg)

    # best[k][b]: min cost of covering points [0, bounds[b]) with k+1 segments
    ar = np.arange(B)
    best = [np.where(feasible(0, ar), cost.rss(0, bounds), np.inf)]
    back = [np.zeros(B, dtype=int)]
    for k in range(1, max_changes + 1):
        cur = np.full(B, np.inf)
        arg = np.zeros(B, dtype=int)
        prev = best[-1]
        for b in range(1, B):
            a = ar[:b]
            cand = prev[:b] + np.where(feasible(a, b), cost.rss(bounds[a], bounds[b]), np.inf)
            j = int(np.argmin(cand))
            cur[b], arg[b] = cand[j], j
        best.append(cur)
        back.append(arg)

    rss = [float(level[B - 1]) for level in best]
    total = float(cost.syy[-1] - cost.sy[-1] ** 2 / n)
    floor = 1e-12 * max(total, 1e-300)
    chosen = 0
    for k in range(1, max_changes + 1):
        if not np.isfinite(rss[k]) or rss[k - 1] <= floor:
            break
        if rss[k] > (1 - min_improvement) * rss[k - 1]:
            break
        chosen = k

    idx = [B - 1]
    for k in range(chosen, 0, -1):
        idx.append(int(back[k][idx[-1]]))
    idx.append(0)
    idx = idx[::-1]
    edges = [int(bounds[i]) for i in idx]
    changes = [float(xb[i]) for i in idx[1:-1]]
    slopes = [cost.slope(a, b) for a, b in zip(edges[:-1], edges[1:])]
    if kind == "count":
        rates = [s * packet_size * 8e6 for s in slopes]
    else:
        rates = [send_rate / (1 + s) for s in slopes]
    return RateChanges(changes, rates, rss)


# -- fairness -----------------------------------------------------------------

@dataclass
class FlowSeries:
    """Per-flow throughput in bits/s on a shared window grid."""

    window_start_s: np.ndarray
    rates: np.ndarray  # (n_flows, n_windows)
    flow_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.window_start_s = np.asarray(self.window_start_s, dtype=float)
        self.rates = np.atleast_2d(np.asarray(self.rates, dtype=float))
        if self.rates.shape[1] != len(self.window_start_s):
            raise AnalysisError("rate matrix does not match the window grid")
        if not self.flow_ids:
            self.flow_ids = [str(i) for i in range(self.rates.shape[0])]

    @classmethod
    def from_records(cls, records: Iterable[tuple[str, float, float]]) -> FlowSeries:
        """Build from ``(flow_id, window_start_s, bits_per_s)`` rows; windows must align."""
        per_flow: dict[str, dict[float, float]] = {}
        for fid, start, rate in records:
            per_flow.setdefault(str(fid), {})[float(start)] = float(rate)
        if not per_flow:
            raise AnalysisError("no flow records")
        grids = {tuple(sorted(v)) for v in per_flow.values()}
        if len(grids) != 1:
            raise AnalysisError("flow windows are misaligned")
        starts = sorted(next(iter(grids)))
        if len(starts) > 2:
            steps = np.diff(starts)
            if not np.allclose(steps, steps[0]):
                raise AnalysisError("flow windows are not uniform")
        ids = sorted(per_flow)
        return cls(np.array(starts), np.array([[per_flow[f][s] for s in starts] for f in ids]), ids)

    @classmethod
    def from_csv(cls, text: str) -> FlowSeries:
        rows = csv.DictReader(line for line in text.splitlines() if not line.startswith("#"))
        try:
            return cls.from_records((r["flow"], float(r["window_start_s"]), float(r["bps"])) for r in rows)
        except (KeyError, ValueError) as exc:
            raise AnalysisError(f"not a flow-series CSV: {exc}") from exc


def jain_index(x) -> float:
    x = np.asarray(x, dtype=float)
    denom = len(x) * np.sum(x * x)
    return float(np.sum(x) ** 2 / denom) if denom > 0 else float("nan")


@dataclass(frozen=True)
class FairnessThresholds:
    inconsistent_ratio: float = 3.0
    inconsistent_jain: float = 0.8
    consistent_ratio: float = 1.5
    consistent_jain: float = 0.95


@dataclass
class FairnessVerdict:
    verdict: str
    jain_mean: float
    share_ratio: float
    n_flows: int
    n_windows: int
    span_s: tuple[float, float]
    thresholds: FairnessThresholds

    def to_kv(self) -> str:
        t = self.thresholds
        return "\n".join([
            FORMAT_HEADER,
            f"verdict={self.verdict}",
            f"jain_mean={self.jain_mean:.6f}",
            f"share_ratio={self.share_ratio:.6f}",
            f"n_flows={self.n_flows}",
            f"n_windows={self.n_windows}",
            f"span_start_s={self.span_s[0]:g}",
            f"span_end_s={self.span_s[1]:g}",
            f"inconsistent_ratio={t.inconsistent_ratio:g}",
            f"inconsistent_jain={t.inconsistent_jain:g}",
            f"consistent_ratio={t.consistent_ratio:g}",
            f"consistent_jain={t.consistent_jain:g}",
        ]) + "\n"


def fairness_verdict(flows: FlowSeries, start_s: float | None = None, end_s: float | None = None,
                     thresholds: FairnessThresholds = FairnessThresholds()) -> FairnessVerdict:
    """Is the flow set's throughput consistent with per-flow fair queuing?

    The evaluation span defaults to the windows in which every flow carries
    traffic.  Within it, ``jain_mean`` is the mean per-window Jain index and
    ``share_ratio`` the ratio of the largest to the smallest per-flow mean.
    """
    n_flows = flows.rates.shape[0]
    if n_flows < 2:
        raise AnalysisError("need at least two flows")
    w = flows.window_start_s
    if start_s is None and end_s is None:
        mask = np.all(flows.rates > 0, axis=0)
    else:
        lo = -np.inf if start_s is None else start_s
        hi = np.inf if end_s is None else end_s
        mask = (w >= lo) & (w < hi)
    if np.count_nonzero(mask) < 5:
        raise AnalysisError("need at least five aligned windows in the evaluation span")
    r = flows.rates[:, mask]
    jain = float(np.mean([jain_index(col) for col in r.T]))
    means = r.mean(axis=1)
    ratio = float(means.max() / means.min()) if means.min() > 0 else float("inf")
    t = thresholds
    if ratio > t.inconsistent_ratio and jain < t.inconsistent_jain:
        verdict = "inconsistent"
    elif ratio < t.consistent_ratio and jain > t.consistent_jain:
        verdict = "consistent_with_per_flow_fq"
    else:
        verdict = "indeterminate"
    span = (float(w[mask][0]), float(w[mask][-1]))
    return FairnessVerdict(verdict, jain, ratio, n_flows, int(np.count_nonzero(mask)), span, thresholds)
