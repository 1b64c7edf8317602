import json

import numpy as np
import pytest

from mpgroup.cli import main


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    return code, capsys.readouterr()


def test_generate_and_rerun_identical(tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert _run(capsys, "--seed", 7, "generate", "--line", "tl", "--n", 1000, "--out", a)[0] == 0
    assert _run(capsys, "--seed", 7, "generate", "--line", "tl", "--n", 1000, "--out", b)[0] == 0
    assert a.read_bytes() == b.read_bytes()
    assert len(a.read_text().splitlines()) == 1001


def test_seed_changes_portfolio(tmp_path, capsys):
    _run(capsys, "--seed", 1, "generate", "--line", "dc", "--n", 50, "--out", tmp_path / "a.csv")
    _run(capsys, "--seed", 2, "generate", "--line", "dc", "--n", 50, "--out", tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() != (tmp_path / "b.csv").read_bytes()


def test_usage_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["generate", "--line", "annuity", "--n", "5"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["generate", "--n", "5"])  # no line
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["--seed", "-1", "generate", "--line", "tl"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2


def test_runtime_errors(tmp_path, capsys):
    code, cap = _run(capsys, "value", "--portfolio", tmp_path / "missing.csv")
    assert code == 1 and "not found" in cap.err
    bad = tmp_path / "bad.csv"
    bad.write_text("line,x1,x2,x3,x4,x5,count\ntl,40,1000,10,2,0.01,0\n")
    code, cap = _run(capsys, "value", "--portfolio", bad)
    assert code == 1 and "line 2" in cap.err


def test_value(tmp_path, capsys):
    p = tmp_path / "p.csv"
    _run(capsys, "generate", "--line", "dc", "--n", 20, "--out", p)
    assert _run(capsys, "value", "--portfolio", p, "--out", tmp_path / "v.csv")[0] == 0
    assert len((tmp_path / "v.csv").read_text().splitlines()) == 1 + 20 * 43
    assert _run(capsys, "value", "--portfolio", p, "--aggregate", "--out", tmp_path / "agg.csv")[0] == 0
    assert (tmp_path / "agg.csv").read_text().startswith("t,value\n0,")


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    main(["generate", "--line", "dc", "--n", "300", "--out", str(d / "p.csv")])
    code = main(["--out-dir", str(d), "train", "--portfolio", str(d / "p.csv"), "--members", "2",
                 "--epochs", "20", "--hidden", "8"])
    assert code == 0
    return d


def test_train_outputs(trained):
    for name in ("model.json", "training_log_0.csv", "training_log_1.csv", "eval_report.json",
                 "eval_report.csv"):
        assert (trained / name).exists()
    assert json.loads((trained / "model.json").read_text())["format"] == "mpgroup-ensemble"


def _accepted(run_dir, alpha):
    rep = json.loads((run_dir / "grouping_report.json").read_text())
    target, pred = np.array(rep["target"]), np.array(rep["series"]["ann_pred"])
    pos = target > 0
    return bool(np.all(np.abs(pred[pos] - target[pos]) / target[pos] < alpha))


def test_group_thresholds_and_exit_codes(trained, tmp_path, capsys):
    common = ["group", "--portfolio", trained / "p.csv", "--model", trained / "model.json",
              "--K", 3, "--steps", 10]
    code, _ = _run(capsys, "--out-dir", tmp_path / "a", *common, "--alpha", 1.0)
    assert code == (0 if _accepted(tmp_path / "a", 1.0) else 3)
    run = json.loads((tmp_path / "a" / "grouping_run.json").read_text())
    assert run["accepted"] == (code == 0)
    assert run["dominance_holds"] and run["baseline_K"] == 3
    for name in ("grouping_series.csv", "grouping_summary.csv", "grouping_report.json",
                 "model_points.csv", "clusters.json", "assignment.csv"):
        assert (tmp_path / "a" / name).exists()
    code, cap = _run(capsys, "--out-dir", tmp_path / "b", *common, "--alpha", 0.0)
    assert code == 3 and "REJECTED" in cap.out
    with pytest.raises(SystemExit) as exc:
        main(["--out-dir", str(tmp_path / "d")] + [str(a) for a in common] + ["--alpha", "1.5"])
    assert exc.value.code == 2
    assert not (tmp_path / "d").exists()  # rejected before any output is written
    code, _ = _run(capsys, "--out-dir", tmp_path / "c", *common[:3], "--model", tmp_path / "nope.json")
    assert code == 1


def test_group_config_file(trained, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 3, "group": {"K": 2, "m": 2, "steps": 5,
                                                     "grouping": {"jitter": 0.01}}}))
    code, _ = _run(capsys, "--config", cfg, "--out-dir", tmp_path, "group", "--portfolio",
                   trained / "p.csv", "--model", trained / "model.json")
    assert code in (0, 3)
    run = json.loads((tmp_path / "grouping_run.json").read_text())
    assert run["K"] == 2 and run["m"] == 2 and run["options"]["jitter"] == 0.01
    assert run["options"]["seed"] == 3 and run["baseline_K"] == 4
    assert run["thresholds"][:2] == pytest.approx([0.02, 0.022])


def test_report_renders_next_to_outputs(trained, tmp_path, capsys):
    _run(capsys, "--out-dir", tmp_path, "group", "--portfolio", trained / "p.csv", "--model",
         trained / "model.json", "--K", 2, "--steps", 5)
    code, cap = _run(capsys, "report", "--run-dir", tmp_path)
    assert code == 0
    assert (tmp_path / "grouping_values.png").exists()
    assert (tmp_path / "grouping_relative_errors.csv").exists()
    code, _ = _run(capsys, "report", "--run-dir", tmp_path / "missing")
    assert code == 1
