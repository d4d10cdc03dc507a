import os

import pytest

from aba import bench, cli
from aba.errors import RuntimeFailure


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A root with tiny sweep artifacts built through the CLI itself."""
    root = str(tmp_path_factory.mktemp("ws"))
    base = ["--root", root]
    assert cli.main(base + ["gen-data", "--task", "sweep-sort", "--demos-per-mode", "3"]) == 0
    assert cli.main(base + ["fit", "--task", "sweep-sort"]) == 0
    assert cli.main(base + ["calibrate", "--task", "sweep-sort", "--rollouts", "4"]) == 0
    return root


def test_usage_errors_exit_1(capsys):
    assert cli.main([]) == 1
    assert cli.main(["gen-data"]) == 1  # missing --task
    assert cli.main(["gen-data", "--task", "no-such-task"]) == 1  # outside choices
    assert cli.main(["frobnicate"]) == 1
    capsys.readouterr()


def test_validation_errors_exit_2(tmp_path, capsys):
    assert cli.main(["--root", str(tmp_path), "fit", "--task", "sweep-sort"]) == 2
    assert "gen-data" in capsys.readouterr().err
    assert cli.main(["--root", str(tmp_path), "rollout", "--scenario", "nope/nope"]) == 2
    bad = tmp_path / "run"
    bad.mkdir()
    (bad / "records.jsonl").write_text("not json\n")
    assert cli.main(["analyze", "--runs", str(bad)]) == 2


def test_runtime_failures_exit_3(monkeypatch, capsys):
    def boom(*a, **kw):
        raise RuntimeFailure("synthetic")

    monkeypatch.setattr(bench, "do_gen_data", boom)
    assert cli.main(["gen-data", "--task", "sweep-sort"]) == 3
    assert "synthetic" in capsys.readouterr().err


def test_artifacts_flow(workspace, capsys):
    for task_file in ("sweep-sort.dslog", "sweep-sort.pmod", "sweep-sort.idx"):
        assert os.path.exists(os.path.join(workspace, "data", task_file))
    out = capsys.readouterr().out
    # opportunistically check nothing above printed errors
    assert "error" not in out


def test_rollout_command_prints_outcome(workspace, tmp_path, capsys):
    records = str(tmp_path / "one.jsonl")
    code = cli.main(
        [
            "--root",
            workspace,
            "rollout",
            "--scenario",
            "sweep-sort/id-mnm",
            "--method",
            "vanilla",
            "--seed",
            "3",
            "--out",
            records,
        ]
    )
    out = capsys.readouterr().out
    assert code == 0
    assert "sweep-sort/id-mnm vanilla seed 3" in out
    assert "subgoal" in out
    assert os.path.exists(records)


def test_bench_and_analyze_byte_identical(workspace, capsys):
    args = [
        "--root",
        workspace,
        "bench",
        "--task",
        "sweep-sort",
        "--methods",
        "vanilla,aba",
        "--rollouts",
        "2",
        "--seed",
        "6",
    ]
    assert cli.main(args) == 0
    capsys.readouterr()
    run = bench.run_dir(workspace, "sweep-sort", 6)
    tracked = ["records.jsonl", "report.txt", "success.csv", "feedback.csv", "precision.csv"]
    before = {f: open(os.path.join(run, f), "rb").read() for f in tracked}
    assert cli.main(args) == 0
    capsys.readouterr()
    for f in tracked:
        assert open(os.path.join(run, f), "rb").read() == before[f], f
    assert cli.main(["analyze", "--runs", run]) == 0
    out = capsys.readouterr().out
    assert "success rate" in out
    for f in tracked:
        assert open(os.path.join(run, f), "rb").read() == before[f], f


def test_bench_rejects_empty_methods(workspace, capsys):
    assert cli.main(["--root", workspace, "bench", "--task", "sweep-sort", "--methods", ","]) == 2
    capsys.readouterr()
