"""Matplotlib renderings of grouping backtests and surrogate diagnostics."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_STYLE = {
    "target": dict(color="black", lw=2.0, label="exact $R(P)$"),
    "ann_pred": dict(color="tab:blue", lw=1.5, label="ANN prediction"),
    "ann_mid": dict(color="tab:blue", lw=1.0, ls="--", label="ANN exact (mid)"),
    "km_mid": dict(color="tab:red", lw=1.0, ls="--", label="K-means exact (mid)"),
}
_BANDS = (("ann_low", "ann_high", "tab:blue"), ("km_low", "km_high", "tab:red"))


def _save(fig, path):
    # no version metadata so repeated runs write identical files
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)


def read_series_csv(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: empty series file")
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]}


def plot_grouping(series: dict, path, title=None):
    """Aggregate policy values over time with the exact bound bands of each method."""
    t = series.get("t", np.arange(len(series["target"])))
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for lo, hi, color in _BANDS:
        if lo in series and hi in series:
            ax.fill_between(t, series[lo], series[hi], color=color, alpha=0.15, lw=0)
    for key, style in _STYLE.items():
        if key in series:
            ax.plot(t, series[key], **style)
    ax.set_xlabel("t (years)")
    ax.set_ylabel("policy value")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False)
    _save(fig, path)


def relative_error_table(series: dict) -> dict:
    target = series["target"]
    out = {}
    with np.errstate(divide="ignore", invalid="ignore"):
        for key in ("ann_pred", "ann_low", "ann_mid", "ann_high", "km_low", "km_mid", "km_high"):
            if key in series:
                out[key] = np.where(target > 0, (series[key] - target) / np.where(target > 0, target, 1), np.nan)
    return out


def plot_relative_errors(series: dict, path):
    t = series.get("t", np.arange(len(series["target"])))
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for key, re in relative_error_table(series).items():
        if key in _STYLE:
            style = dict(_STYLE[key])
            ax.plot(t, re, color=style["color"], ls=style.get("ls", "-"), lw=1.2, label=style["label"])
    ax.axhline(0.0, color="grey", lw=0.8)
    ax.set_xlabel("t (years)")
    ax.set_ylabel("relative error $re_t$")
    ax.legend(frameon=False)
    _save(fig, path)


def plot_history(history_rows, path):
    """Training and validation loss per epoch (log scale)."""
    h = np.asarray(history_rows, dtype=float)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.semilogy(h[:, 0], h[:, 1], label="train")
    ax.semilogy(h[:, 0], h[:, 2], label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    _save(fig, path)


def plot_volume_buckets(buckets, path):
    labels = [f"[{b['lower']:g}, {b['upper']:g})" for b in buckets]
    vals = [b["mean_abs_re"] for b in buckets]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(range(len(vals)), np.nan_to_num(vals))
    ax.set_xticks(range(len(vals)), labels, rotation=30, ha="right")
    ax.set_xlabel(r"$\max_t R(x) / \max_{x',t} R(x')$")
    ax.set_ylabel("mean |re|")
    _save(fig, path)


def render_run(run_dir, out_dir=None) -> list:
    """Render every figure the artefacts in ``run_dir`` support; returns written paths."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir or run_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    series_path = run_dir / "grouping_series.csv"
    if series_path.exists():
        s = read_series_csv(series_path)
        plot_grouping(s, out_dir / "grouping_values.png")
        plot_relative_errors(s, out_dir / "grouping_relative_errors.png")
        rel = relative_error_table(s)
        rows = ["t," + ",".join(rel)]
        for k in range(len(s["target"])):
            rows.append(f"{k}," + ",".join(repr(float(v[k])) for v in rel.values()))
        (out_dir / "grouping_relative_errors.csv").write_text("\n".join(rows) + "\n")
        written += [out_dir / "grouping_values.png", out_dir / "grouping_relative_errors.png",
                    out_dir / "grouping_relative_errors.csv"]
    eval_path = run_dir / "eval_report.json"
    if eval_path.exists():
        rep = json.loads(eval_path.read_text())
        plot_volume_buckets(rep["re_by_volume_bucket"], out_dir / "re_by_volume.png")
        written.append(out_dir / "re_by_volume.png")
    for log_path in sorted(run_dir.glob("training_log_*.csv")):
        with log_path.open(newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        if rows:
            target = out_dir / (log_path.stem + ".png")
            plot_history([[float(v) for v in r] for r in rows], target)
            written.append(target)
    return written
