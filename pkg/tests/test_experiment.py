import json

import numpy as np
import pytest

from ucil import cli
from ucil.evaluation import write_events
from ucil.experiment import (
    DESK_CAPACITY,
    ExperimentConfig,
    emit_plotdata,
    format_table,
    run_experiment,
    run_matrix,
    run_single,
    scale_capacity,
    table_configs,
)
from ucil.trainer import format_log


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(seeds=())
    with pytest.raises(ValueError):
        ExperimentConfig(method="icarl")
    with pytest.raises(ValueError):
        ExperimentConfig(method="nr", toggles={"fd": False})
    with pytest.raises(ValueError):
        ExperimentConfig(toggles={"kd": False})
    with pytest.raises(ValueError):
        ExperimentConfig(task_mode="three_task")


def test_labels_and_capacity_scaling():
    assert ExperimentConfig(toggles={"fd": False, "mu": False}).label == "ucil-noFD-noMU"
    assert ExperimentConfig(method="nr").label == "nr"
    assert scale_capacity((1000, 200)) == DESK_CAPACITY == (60, 38)
    assert scale_capacity((10000, 1578)) == (600, 300)


def test_table_shapes():
    t1 = table_configs("table1")
    assert [c.method for c in t1] == ["finetune", "joint", "ewc", "lwf", "nr", "ucil", "ucil", "ucil"]
    assert len({c.capacity for c in t1 if c.method == "ucil"}) == 3
    assert all(c.task_mode == "four_task" for c in table_configs("table2"))
    t3 = table_configs("table3")
    assert [c.label for c in t3] == ["ucil", "ucil-noMU", "ucil-noUL", "ucil-noFD"]
    assert {c.capacity for c in t3} == {DESK_CAPACITY}
    with pytest.raises(ValueError):
        table_configs("table4")


def test_matrix_rejects_empty_input():
    with pytest.raises(ValueError):
        run_matrix([])


def test_matrix_records_row_failures(tiny_config):
    good = tiny_config(method="finetune")
    bad = tiny_config(method="nr", dataset=good.dataset.__class__(path="/nonexistent/corpus"))
    result = run_matrix([good, bad])
    rows = result["rows"]
    assert rows[0]["error"] is None and rows[0]["psds2"] is not None
    assert rows[1]["error"] and rows[1]["psds2"] is None
    table = format_table(rows)
    assert "FAILED" in table and table.count("\n") == 4


def test_run_report_is_reproducible(tiny_config):
    cfg = tiny_config(seeds=(0, 1))
    a, b = run_experiment(cfg), run_experiment(cfg)
    assert a.to_json() == b.to_json()
    assert [format_log(x) for r in a.runs for x in r.logs] == [format_log(x) for r in b.runs for x in r.logs]
    assert "wall_clock" not in a.to_json()


def stage_map(rec):
    return dict(rec.stages)


@pytest.mark.parametrize("toggle,first", [("fd", "train[1]"), ("ul", "train[1]"), ("mu", "memory[0]")])
def test_toggles_change_only_their_stage(tiny_config, toggle, first):
    full = run_single(tiny_config(toggles={"fd": True, "ul": True, "mu": True}), 0)
    off = run_single(tiny_config(toggles={toggle: False}), 0)
    names = [s for s, _ in full.stages]
    assert names == [s for s, _ in off.stages]
    a, b = stage_map(full), stage_map(off)
    split = names.index(first)
    assert all(a[s] == b[s] for s in names[:split])
    assert a[first] != b[first]
    if toggle == "fd":
        assert all(r["L_FD"] == 0.0 for r in off.logs[1]) and any(r["L_OD"] > 0 for r in off.logs[1])
    if toggle == "ul":
        assert all(r["L_UOD"] == 0.0 for r in off.logs[1])


def test_joint_has_no_snapshots(tiny_config):
    rec = run_single(tiny_config(method="joint"), 0)
    assert [s for s, _ in rec.stages] == ["split", "train[0]", "final_eval"]


def test_plot_data(tiny_config, tmp_path):
    report = run_experiment(tiny_config(method="nr"))
    files = emit_plotdata(report, tmp_path / "a")
    again = emit_plotdata(report, tmp_path / "b")
    assert [f.read_bytes() for f in files] == [f.read_bytes() for f in again]
    curves = [f for f in files if f.name.startswith("loss_")]
    assert len(curves) == 2
    for f, log in zip(curves, report.runs[0].logs):
        assert len(f.read_text().splitlines()) == len(log) + 1
    sweep = (tmp_path / "a" / "rehearsal_sweep.tsv").read_text().splitlines()
    assert len(sweep) == 2 and sweep[1].startswith("6\t3\t")


# --- command line ---------------------------------------------------------


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    code = cli.main(["synth", "--out", str(out), "--n-classes", "4", "--strong", "24", "--weak", "12", "--unlabeled", "16", "--test", "8", "--frames", "24", "--mels", "8"])
    assert code == 0
    return out


def test_cli_run_end_to_end_is_bitwise_repeatable(corpus_dir, tmp_path):
    args = ["run", "--corpus", str(corpus_dir), "--epochs", "1", "--batch-size", "8", "--seeds", "0", "--capacity", "6", "3"]
    assert cli.main(args + ["--out", str(tmp_path / "r1")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "r2")]) == 0
    names = sorted(p.name for p in (tmp_path / "r1").iterdir() if p.is_file() and p.name != "timing.json")
    assert "report.json" in names and any(n.startswith("train_ucil") for n in names)
    for n in names:
        assert (tmp_path / "r1" / n).read_bytes() == (tmp_path / "r2" / n).read_bytes()
    report = json.loads((tmp_path / "r1" / "report.json").read_text())
    assert report["config"]["capacity"] == [6, 3]


def test_cli_yaml_config_and_toggles(corpus_dir, tmp_path):
    cfg = tmp_path / "exp.yaml"
    cfg.write_text(f"method: ucil\ntrain:\n  epochs: 1\n  batch_size: 8\ndataset:\n  path: {corpus_dir}\nseeds: [2]\n")
    out = tmp_path / "o"
    assert cli.main(["run", "--config", str(cfg), "--toggles", "ul=off", "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["config"]["toggles"] == {"fd": True, "ul": False, "mu": True}
    assert report["runs"][0]["seed"] == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("train:\n  epochz: 3\n")
    assert cli.main(["run", "--config", str(bad)]) == 2
    with pytest.raises(SystemExit):
        cli.main(["run", "--toggles", "fd=maybe"])


def test_cli_score(tmp_path, capsys):
    gt = [("c1", 0.5, 2.0, "dog"), ("c1", 4.0, 6.0, "cat"), ("c2", 1.0, 3.0, "dog")]
    write_events(gt, tmp_path / "gt.tsv")
    write_events(gt, tmp_path / "d_lo.tsv")
    write_events(gt[:1], tmp_path / "d_hi.tsv")
    assert cli.main(["score", str(tmp_path / "gt.tsv"), str(tmp_path / "d_lo.tsv"), str(tmp_path / "d_hi.tsv")]) == 0
    out = capsys.readouterr().out
    vals = {line.split()[0]: float(line.split()[1]) for line in out.splitlines()[1:]}
    assert vals["PSDS-like-1"] == pytest.approx(1.0) and vals["PSDS-like-2"] == pytest.approx(1.0)


def test_cli_gradcheck(capsys):
    assert cli.main(["gradcheck", "--seeds", "1"]) == 0
    assert "FAIL" not in capsys.readouterr().out


def test_cli_reports_missing_corpus(tmp_path):
    assert cli.main(["run", "--corpus", str(tmp_path / "missing"), "--out", str(tmp_path / "x")]) != 0
