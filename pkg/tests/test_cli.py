import re
from pathlib import Path

import numpy as np
import pytest

from flowslam import cli
from flowslam import datasets as ds
from flowslam.factor_graph import FactorGraph, POINT, PriorPoint, write_graph

GOLDEN = Path(__file__).parent / "golden"
SMALL = ["--train-samples", "200", "--posterior-samples", "300"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def _normalise_timing(line):
    line = re.sub(r"=\d+\.\d+", "=<float>", line)
    return re.sub(r"=\d+(?=\s|$)", "=<int>", line)


def test_config_echo_defaults():
    args = cli.build_parser().parse_args(["synthetic", "--out", "x"])
    echo = cli.config_from_args(args).echo()
    assert "--knots 6 --train-samples 500" in echo
    args = cli.build_parser().parse_args(["plaza", "--out", "x"])
    cfg = cli.config_from_args(args)
    assert (cfg.knots, cfg.train_samples, cfg.update_interval) == (10, 1000, 100)


def test_run_config_validation():
    with pytest.raises(ValueError, match="knots"):
        cli.RunConfig("solve", Path("."), knots=3)
    with pytest.raises(ValueError):
        cli.RunConfig("solve", Path("."), posterior_samples=0)
    with pytest.raises(SystemExit):
        run("solve", "g.graph", "--out", "x", "--knots", "2")


def test_synthetic_emits_step_files(tmp_path):
    assert run("synthetic", "--out", tmp_path, "--skip-oracle", *SMALL) == 0
    for step in range(6):
        assert (tmp_path / f"samples_step{step}.txt").exists()
    head = (tmp_path / "samples_step5.txt").read_text().splitlines()[0].split()
    assert head[:3] == ["X0.x", "X0.y", "X0.theta"] and len(head) == 6 * 3 + 2 * 2
    modes = (tmp_path / "modes.txt").read_text().splitlines()
    assert modes[2].startswith("step=2 L1=") and len(modes) == 6
    assert "--knots 6 --train-samples 200" in (tmp_path / "config.txt").read_text()


def test_synthetic_mmd_report_skips_large_steps(tmp_path):
    argv = ["synthetic", "--out", tmp_path, "--train-samples", "150", "--posterior-samples", "200"]
    assert run(*argv) == 0
    lines = (tmp_path / "mmd.txt").read_text().splitlines()
    assert lines[0].startswith("step=0 joint=")
    assert lines[5] == "step=5 skipped=dim22"


def test_synthetic_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert run("synthetic", "--out", d, "--skip-oracle", "--seed", "3", *SMALL) == 0
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    for n in names:
        if n != "timing.log":
            assert (a / n).read_bytes() == (b / n).read_bytes(), n


def test_empty_plaza_stream_is_a_noop(tmp_path):
    ds.write_rows(tmp_path / "odo.txt", [(float(t), 0.0, 0.0) for t in range(30)])
    ds.write_rows(tmp_path / "rng.txt", [])
    out = tmp_path / "out"
    assert run("plaza", "--odometry", tmp_path / "odo.txt", "--ranges", tmp_path / "rng.txt", "--out", out) == 0
    for name in ("trajectory.txt", "ate.txt", "timing.log"):
        assert (out / name).read_text() == ""


def test_plaza_outputs_and_timing_golden(tmp_path):
    argv = ["plaza", "--make-data", "6", "--batch-size", "10", "--update-interval", "20", "--out", tmp_path,
            "--odometry-noise", "0.05", "0.05", "0.01", *SMALL]
    assert run(*argv) == 0
    traj = (tmp_path / "trajectory.txt").read_text().splitlines()
    assert len(traj) == 7 and traj[0].split()[1] == "X0"
    assert re.fullmatch(r"ATE \d+\.\d{6}", (tmp_path / "ate.txt").read_text().strip())
    golden = (GOLDEN / "timing_format.txt").read_text().strip()
    lines = (tmp_path / "timing.log").read_text().splitlines()
    assert len(lines) == 3
    assert all(_normalise_timing(l) == golden for l in lines)


def test_oracle_compare_report_shape(tmp_path):
    write_graph(ds.small_range_graph(), tmp_path / "g.graph")
    assert run("oracle-compare", tmp_path / "g.graph", "--out", tmp_path / "o", *SMALL,
               "--oracle-particles", "3000") == 0
    lines = (tmp_path / "o" / "mmd.txt").read_text().splitlines()
    assert [l.split()[0] for l in lines] == ["X0", "X1", "X2", "L1", "L2", "joint", "threshold99"]
    assert all(float(l.split()[1]) >= 0 for l in lines)


def test_oracle_compare_gaussian_prior_below_threshold(tmp_path):
    g = FactorGraph()
    g.add_variable("L", POINT)
    g.add_factor(PriorPoint("p", "L", [1.0, 2.0], np.array([[0.3, 0.1], [0.1, 0.2]])))
    write_graph(g, tmp_path / "g.graph")
    assert run("oracle-compare", tmp_path / "g.graph", "--out", tmp_path / "o",
               "--train-samples", "2000", "--posterior-samples", "1000") == 0
    rep = dict(l.split() for l in (tmp_path / "o" / "mmd.txt").read_text().splitlines())
    assert float(rep["joint"]) < float(rep["threshold99"])


def test_solve_writes_tree_and_samples(tmp_path):
    write_graph(ds.small_range_graph(), tmp_path / "g.graph")
    assert run("solve", tmp_path / "g.graph", "--out", tmp_path / "s", *SMALL) == 0
    assert (tmp_path / "s" / "tree.txt").read_text().startswith("CLIQUE")
    assert len((tmp_path / "s" / "samples.txt").read_text().splitlines()) == 301


def test_parse_error_exit_code(tmp_path, capsys):
    (tmp_path / "bad.graph").write_text("VAR X0 POSE\nPRIOR X0 0 0\n")
    assert run("solve", tmp_path / "bad.graph", "--out", tmp_path / "s") == 1
    err = capsys.readouterr().err
    assert err.startswith("flowslam: parse error: line 2:")


def test_missing_file_exit_code(tmp_path):
    assert run("solve", tmp_path / "nope.graph", "--out", tmp_path / "s") == 1
