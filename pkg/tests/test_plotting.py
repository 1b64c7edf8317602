import numpy as np
import pytest

from mpgroup.plotting import read_series_csv, relative_error_table, render_run
from mpgroup.surrogate import write_history_csv


def _series_file(path):
    rows = ["t,target,ann_pred,ann_low,ann_mid,ann_high,km_low,km_mid,km_high"]
    for t in range(5):
        tgt = 10.0 - 2 * t
        rows.append(",".join(str(v) for v in (t, tgt, tgt * 1.1, tgt, tgt, tgt, tgt * 0.8, tgt * 0.9, tgt)))
    path.write_text("\n".join(rows) + "\n")


def test_relative_error_table(tmp_path):
    _series_file(tmp_path / "grouping_series.csv")
    s = read_series_csv(tmp_path / "grouping_series.csv")
    re = relative_error_table(s)
    np.testing.assert_allclose(re["ann_pred"][:4], 0.1)
    np.testing.assert_allclose(re["km_mid"][:4], -0.1)
    assert np.isfinite(re["ann_pred"][4])  # target 2 at t=4


def test_render_run_deterministic(tmp_path):
    run = tmp_path / "run"
    run.mkdir()
    _series_file(run / "grouping_series.csv")
    write_history_csv(run / "training_log_0.csv", [(1, 3.0, 4.0), (2, 2.0, 3.5)])
    first = render_run(run, tmp_path / "a")
    second = render_run(run, tmp_path / "b")
    names = sorted(p.name for p in first)
    assert names == ["grouping_relative_errors.csv", "grouping_relative_errors.png",
                     "grouping_values.png", "training_log_0.png"]
    for a, b in zip(first, second):
        assert a.read_bytes() == b.read_bytes()
        assert a.stat().st_size > 0


def test_render_empty_dir(tmp_path):
    assert render_run(tmp_path) == []


def test_empty_series(tmp_path):
    (tmp_path / "s.csv").write_text("t,target\n")
    with pytest.raises(ValueError):
        read_series_csv(tmp_path / "s.csv")
