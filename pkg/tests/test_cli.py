import json

from loopcloser.cli import main


def test_generate_run_ate(tmp_path, capsys):
    world = tmp_path / "w.json"
    assert main(["generate", "--poses", "40", "--seed", "3", "--out", str(world)]) == 0
    report, traj, svg = tmp_path / "r.json", tmp_path / "t.txt", tmp_path / "p.svg"
    assert main(["run", "--world", str(world), "--workers", "2", "--report", str(report),
                 "--trajectory", str(traj), "--plot", str(svg)]) == 0
    rep = json.loads(report.read_text())
    assert rep["config"]["workers"] == 2 and len(rep["loops"]) == 1
    assert svg.read_text().startswith("<svg")
    capsys.readouterr()
    assert main(["ate", "--est", str(traj), "--gt", str(traj)]) == 0
    assert float(capsys.readouterr().out) < 1e-9


def test_bench_to_csv(tmp_path):
    out = tmp_path / "b.csv"
    assert main(["bench", "--sizes", "10", "--workers", "1", "--repeat", "1", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "stage,size,workers,ms,speedup" and len(lines) == 3


def test_run_without_detection(tmp_path):
    world = tmp_path / "w.json"
    main(["generate", "--poses", "40", "--seed", "3", "--out", str(world)])
    report = tmp_path / "r.json"
    assert main(["run", "--world", str(world), "--no-detect", "--report", str(report)]) == 0
    assert json.loads(report.read_text())["loops"] == []
