import argparse
import json

import pytest

from qchar.analysis import read_heatmap_csv
from qchar.cli import build_parser, main
from qchar.queue_sim import DropPolicy, QueueConfig, Smooth, simulate_schedule
from qchar.schedule import BurstSpec, CampaignGrid, make_burst_schedule
from qchar.trace import PacketTrace, SideTrace

M = 1_000_000


def _subparsers(parser, prefix=()):
    for act in parser._actions:
        if isinstance(act, argparse._SubParsersAction):
            for name, sp in act.choices.items():
                yield prefix + (name,), sp
                yield from _subparsers(sp, prefix + (name,))


@pytest.mark.parametrize("path, sp", list(_subparsers(build_parser())), ids=lambda v: " ".join(v)
                         if isinstance(v, tuple) else "")
def test_help_lists_every_flag(path, sp, capsys):
    with pytest.raises(SystemExit) as exc:
        main([*path, "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for act in sp._actions:
        for flag in act.option_strings:
            assert flag in out


def test_version(capsys):
    with pytest.raises(SystemExit):
        main(["--version"])
    assert capsys.readouterr().out.startswith("qchar ")


def test_unknown_subcommand_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["bogus"])
    assert exc.value.code == 2


@pytest.fixture
def burst(tmp_path):
    sched, cfg = tmp_path / "s.txt", tmp_path / "q.txt"
    assert main(["schedule", "--count", "6000", "--rate", "500M", "--out", str(sched)]) == 0
    cfg.write_text("capacity=1500\npolicy=drop_front\ndrain=smooth:250000000\n")
    return sched, cfg


def test_sim_and_analysis_views(tmp_path, burst):
    sched, cfg = burst
    sim, tr = tmp_path / "sim.csv", tmp_path / "t.csv"
    assert main(["sim", "--schedule", str(sched), "--config", str(cfg), "--out", str(sim)]) == 0
    lines = sim.read_text().splitlines()
    assert lines[0] == "# qchar-format v1" and len(lines) == 2 + 6000
    assert main(["sim", "--schedule", str(sched), "--config", str(cfg), "--out", str(tr),
                 "--format", "trace", "--base-owd-ns", "12000000"]) == 0
    t = PacketTrace.read(tr)
    assert t.n_lost == 1501 and t.spec == BurstSpec(6000, 1500, 500 * M)

    qd, svg = tmp_path / "d.csv", tmp_path / "d.svg"
    assert main(["analyze", "qdelay", "--trace", str(tr), "--out", str(qd)]) == 0
    assert "send_time_us,qdelay_us,lost" in qd.read_text()
    assert main(["plot", "--in", str(qd), "--kind", "line", "--out", str(svg)]) == 0
    assert "<polyline" in svg.read_text()

    rc = tmp_path / "r.csv"
    assert main(["analyze", "recvcount", "--trace", str(tr), "--out", str(rc)]) == 0
    assert rc.read_text().splitlines()[-1].split(",")[1] == "4499"

    ch = tmp_path / "c.txt"
    assert main(["analyze", "changes", "--trace", str(tr), "--out", str(ch)]) == 0
    assert "changes=0" in ch.read_text()


def test_fit_round_trip_and_empty_range(tmp_path, burst, capsys):
    sched, cfg = burst
    tr, out = tmp_path / "t.csv", tmp_path / "fit.json"
    main(["sim", "--schedule", str(sched), "--config", str(cfg), "--out", str(tr), "--format", "trace"])
    args = ["fit", "--trace", str(tr), "--schedule", str(sched), "--kmin", "1300", "--kmax", "1700",
            "--kstep", "100", "--rmin", "200M", "--rmax", "300M", "--rstep", "50M", "--workers", "1",
            "--out", str(out)]
    assert main(args) == 0
    res = json.loads(out.read_text())
    assert res["capacity"] == 1500 and res["format"] == "qchar-format v1"
    bad = list(args)
    bad[bad.index("--kmin") + 1] = "1800"
    with pytest.raises(SystemExit) as exc:
        main(bad)
    assert exc.value.code == 2
    assert "capacity range is empty" in capsys.readouterr().err


def test_module_error_exits_1(tmp_path, capsys):
    (tmp_path / "bad.csv").write_text("nonsense\n")
    assert main(["analyze", "qdelay", "--trace", str(tmp_path / "bad.csv")]) == 1
    assert capsys.readouterr().err.startswith("qchar: ")


def test_merge_with_manifest(tmp_path):
    sched = tmp_path / "s.txt"
    main(["schedule", "--count", "3", "--rate", "48M", "--out", str(sched)])
    send, recv = tmp_path / "send.csv", tmp_path / "recv.csv"
    send.write_text(SideTrace([0, 1, 2], [1500] * 3, [0, 250_000, 500_000], "d").to_csv())
    recv.write_text(SideTrace([0, 2], [1500] * 2, [10_000, 510_000], "d").to_csv())
    out, man = tmp_path / "m.csv", tmp_path / "run.json"
    assert main(["merge", "--send", str(send), "--recv", str(recv), "--schedule", str(sched),
                 "--out", str(out), "--manifest", str(man), "--replication", "3"]) == 0
    assert PacketTrace.read(out).n_lost == 1
    m = json.loads(man.read_text())
    assert m["campaign_id"] == "s" and m["replication"] == 3
    assert set(m["files"]) == {"schedule", "send", "recv", "trace"}
    assert m["format"] == "qchar-format v1" and m["created_utc"]


def test_analyze_heatmap_has_one_row_per_cell(tmp_path):
    grid_file = tmp_path / "grid.txt"
    assert main(["schedule", "--write-default-grid", str(grid_file)]) == 0
    grid = CampaignGrid()
    cfg = QueueConfig(1500, Smooth(250 * M), DropPolicy.DROP_FRONT)
    traces = tmp_path / "traces"
    traces.mkdir()
    for rep in range(2):
        for i, (size, rate) in enumerate(grid.cells):
            sched = make_burst_schedule(BurstSpec(size, grid.payload_size, rate))
            tr = PacketTrace.from_sim(simulate_schedule(sched, cfg), sched.burst_boundaries)
            tr.write(traces / f"r{rep}_c{i:03d}.csv")
    out = tmp_path / "hm.csv"
    assert main(["analyze", "heatmap", "--traces", str(traces), "--grid", str(grid_file), "--out", str(out)]) == 0
    cells = read_heatmap_csv(out.read_text())
    assert len(cells) == 120
    assert all(c.replication_count == 2 for c in cells)
    svg = tmp_path / "hm.svg"
    assert main(["plot", "--in", str(out), "--kind", "heatmap", "--out", str(svg)]) == 0
    assert svg.read_text().count("<title>") == 120


def test_fairness_view(tmp_path):
    rows = ["flow,window_start_s,bps"]
    rows += [f"{f},{w},{4e6 if f == 'a' else 1e6}" for f in "ab" for w in range(10)]
    flows = tmp_path / "f.csv"
    flows.write_text("\n".join(rows) + "\n")
    out = tmp_path / "v.txt"
    assert main(["analyze", "fairness", "--flows", str(flows), "--out", str(out)]) == 0
    assert "verdict=inconsistent" in out.read_text()
