"""Command-line pipeline: generate | value | train | group | report.

Exit codes: 0 success (or grouping accepted), 1 runtime error, 2 usage
error, 3 grouping rejected by the thresholds.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import actuarial, plotting
from .actuarial import ValuationAssumptions
from .clustering import baseline_grouping
from .grouping import (
    GroupingOptions,
    accept_grouping,
    backtest,
    cluster_portfolio,
    default_thresholds,
    group_portfolio,
    write_model_points_csv,
)
from .portfolio import FEATURES, HORIZON, ProductLine, read_portfolio_csv, synthesize, write_portfolio_csv
from .surrogate import (
    Dataset,
    SurrogateEnsemble,
    TrainConfig,
    evaluate,
    split,
    train_ensemble,
    write_history_csv,
)

log = logging.getLogger("mpgroup")

EXIT_RUNTIME, EXIT_USAGE, EXIT_REJECTED = 1, 2, 3


class UsageError(Exception):
    pass


def _line(tag):
    try:
        return ProductLine.parse(tag)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mpgroup", description=__doc__.splitlines()[0])
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--seed", type=int, help="base seed (64-bit)")
    p.add_argument("--threads", type=int, help="max worker processes")
    p.add_argument("--out-dir", type=Path, help="directory for outputs")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="synthesize a portfolio from a Sobol sequence")
    g.add_argument("--line", type=_line)
    g.add_argument("--n", type=int)
    g.add_argument("--skip", type=int, help="first Sobol index (default 1 + seed * n)")
    g.add_argument("--out", type=Path)

    v = sub.add_parser("value", help="exact policy values of a portfolio file")
    v.add_argument("--portfolio", type=Path)
    v.add_argument("--assumptions", type=Path)
    v.add_argument("--aggregate", action="store_true", default=None)
    v.add_argument("--out", type=Path)

    t = sub.add_parser("train", help="train a surrogate ensemble")
    t.add_argument("--portfolio", type=Path)
    t.add_argument("--assumptions", type=Path)
    t.add_argument("--members", type=int)
    t.add_argument("--losses", choices=["mse", "mae", "mixed"])
    t.add_argument("--epochs", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--hidden", type=int)
    t.add_argument("--cell", choices=["recurrent", "lstm"])

    gr = sub.add_parser("group", help="optimise model points and backtest them")
    gr.add_argument("--portfolio", type=Path)
    gr.add_argument("--model", type=Path)
    gr.add_argument("--assumptions", type=Path)
    gr.add_argument("--K", type=int)
    gr.add_argument("--m", type=int)
    gr.add_argument("--baseline-K", type=int, help="clusters of the K-means baseline (default K*m)")
    gr.add_argument("--steps", type=int)
    gr.add_argument("--lr", type=float)
    gr.add_argument("--optimizer", choices=["fixed", "adam"])
    gr.add_argument("--alpha", type=float, help="constant threshold for every t")

    r = sub.add_parser("report", help="render figures and tables from a run directory")
    r.add_argument("--run-dir", type=Path)
    return p


DEFAULTS = {
    "generate": {"n": 1000, "out": None, "line": None, "skip": None},
    "value": {"aggregate": False, "out": None, "portfolio": None, "assumptions": None},
    "train": {"members": 3, "losses": "mse", "epochs": 300, "patience": 50, "batch_size": 64,
              "hidden": 64, "cell": "recurrent", "portfolio": None, "assumptions": None},
    "group": {"K": 10, "m": 1, "baseline_K": None, "steps": 2000, "lr": 0.05, "optimizer": "fixed",
              "alpha": None, "thresholds": None, "portfolio": None, "model": None,
              "assumptions": None, "grouping": {}},
    "report": {"run_dir": None},
}


def resolve(args) -> dict:
    """Merge command-line flags over the config file over built-in defaults."""
    config = {}
    if args.config is not None:
        try:
            config = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
    section = dict(DEFAULTS[args.command])
    section.update(config.get(args.command, {}))
    for key in section:
        val = getattr(args, key, None)
        if val is not None:
            section[key] = val
    for key, default in (("seed", 0), ("threads", 1), ("out_dir", ".")):
        val = getattr(args, key)
        section[key] = val if val is not None else config.get(key, default)
    if not 0 <= int(section["seed"]) < 2 ** 64:
        raise UsageError("seed must be a 64-bit unsigned integer")
    section["out_dir_given"] = args.out_dir is not None or "out_dir" in config
    section["out_dir"] = Path(section["out_dir"])
    return section


def _require(cfg, *keys):
    for k in keys:
        if cfg.get(k) is None:
            raise UsageError(f"missing required option --{k.replace('_', '-')}")


def _existing(path, what):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _assumptions(cfg):
    if cfg.get("assumptions"):
        return ValuationAssumptions.load(_existing(cfg["assumptions"], "assumptions file"))
    return actuarial.DEFAULT_ASSUMPTIONS


def cmd_generate(cfg):
    _require(cfg, "line")
    line = ProductLine.parse(cfg["line"])
    n = int(cfg["n"])
    if n < 1:
        raise UsageError("--n must be >= 1")
    skip = cfg["skip"] if cfg["skip"] is not None else 1 + int(cfg["seed"]) * n
    p = synthesize(line, n, skip)
    out = Path(cfg["out"] or cfg["out_dir"] / "portfolio.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_portfolio_csv(p, out)
    print(f"wrote {len(p)} {line.value} contracts to {out}")
    for spec, col in zip(FEATURES[line], p.features.T):
        print(f"  {spec.name:16s} min {col.min():.6g}  max {col.max():.6g}")
    return 0


def cmd_value(cfg):
    _require(cfg, "portfolio")
    p = read_portfolio_csv(_existing(cfg["portfolio"], "portfolio"))
    a = _assumptions(cfg)
    out = Path(cfg["out"] or cfg["out_dir"] / "values.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    if cfg["aggregate"]:
        actuarial.write_paths_csv(out, actuarial.value_portfolio(p, a))
    else:
        actuarial.write_paths_csv(out, actuarial.policy_values(p.line, p.features, a))
    print(f"wrote policy values of {len(p)} entries to {out}")
    return 0


def cmd_train(cfg):
    _require(cfg, "portfolio")
    p = read_portfolio_csv(_existing(cfg["portfolio"], "portfolio"))
    out = cfg["out_dir"]
    out.mkdir(parents=True, exist_ok=True)
    data = split(Dataset.from_portfolio(p, _assumptions(cfg)), seed=int(cfg["seed"]))
    tc = TrainConfig(hidden=cfg["hidden"], recurrent_hidden=cfg["hidden"], cell=cfg["cell"],
                     max_epochs=cfg["epochs"], patience=cfg["patience"],
                     batch_size=cfg["batch_size"], seed=int(cfg["seed"]))
    ens, results = train_ensemble(data, tc, int(cfg["members"]), cfg["losses"],
                                  workers=int(cfg["threads"]))
    ens.save(out / "model.json")
    for k, r in enumerate(results):
        write_history_csv(out / f"training_log_{k}.csv", r.history)
    report = evaluate(ens, data.test)
    report.save_json(out / "eval_report.json")
    report.save_csv(out / "eval_report.csv")
    print(f"trained {len(ens)} member(s); best epochs {[r.best_epoch for r in results]}")
    print(f"test mean |wre_t| = {report.mean_abs_wre_t:.3e}, pc99 |wre| = {report.pc99_abs_wre:.3e}")
    return 0


def cmd_group(cfg):
    _require(cfg, "portfolio", "model")
    p = read_portfolio_csv(_existing(cfg["portfolio"], "portfolio"))
    ens = SurrogateEnsemble.load(_existing(cfg["model"], "model file"))
    a = _assumptions(cfg)
    # validate thresholds before any work is done or files are written
    T = HORIZON[p.line]
    if cfg.get("thresholds") is not None:
        alpha = np.asarray(cfg["thresholds"], dtype=float)
    elif cfg["alpha"] is not None:
        alpha = np.full(T, float(cfg["alpha"]))
    else:
        alpha = default_thresholds(T)
    if np.any((alpha < 0) | (alpha > 1)) or alpha.shape != (T,):
        raise UsageError(f"thresholds must be {T} values in [0, 1]")
    out = cfg["out_dir"]
    out.mkdir(parents=True, exist_ok=True)
    K, m = int(cfg["K"]), int(cfg["m"])
    opts = GroupingOptions(**{"steps": cfg["steps"], "lr": cfg["lr"], "optimizer": cfg["optimizer"],
                              "seed": int(cfg["seed"]), **cfg.get("grouping", {})})
    result = group_portfolio(p, ens, K, m, opts, a)
    kb = int(cfg["baseline_K"] or K * m)
    km = result.clusters if (kb == K and K > 1) else cluster_portfolio(p, kb, opts.seed)
    baseline = baseline_grouping(km, p.line)
    report = backtest(result.grouped, p, ens, a, baseline)
    report.save(out)
    write_model_points_csv(result, out / "model_points.csv")
    if result.clusters is not None:
        result.clusters.save_json(out / "clusters.json")
        result.clusters.save_assignment_csv(out / "assignment.csv")
    accepted, rel = accept_grouping(report.target, report.series["ann_pred"], alpha)
    dominance = [o.best_loss <= (o.init_loss if o.anchor_loss is None else min(o.init_loss, o.anchor_loss))
                 for o in result.optimized]
    doc = {"accepted": accepted, "K": K, "m": m, "baseline_K": kb,
           "thresholds": alpha.tolist(),
           "options": asdict(opts),
           "clusters": [{"size": int(s), "init_loss": o.init_loss, "centroid_loss": o.anchor_loss,
                         "best_loss": o.best_loss,
                         "best_step": o.best_step}
                        for s, o in zip(result.cluster_sizes, result.optimized)],
           "dominance_holds": all(dominance)}
    (out / "grouping_run.json").write_text(json.dumps(doc, indent=2) + "\n")
    s = report.summary
    print(f"mean |re_t|: ANN pred {s['ann_pred']['mean_abs_re']:.4f}, "
          f"ANN mid {s['ann_mid']['mean_abs_re']:.4f}, K-means mid {s['km_mid']['mean_abs_re']:.4f}")
    print("grouping ACCEPTED" if accepted else "grouping REJECTED")
    return 0 if accepted else EXIT_REJECTED


def cmd_report(cfg):
    run_dir = Path(cfg["run_dir"] or cfg["out_dir"])
    if not run_dir.is_dir():
        raise FileNotFoundError(f"run directory not found: {run_dir}")
    # figures go next to the run's delimited outputs unless --out-dir says otherwise
    written = plotting.render_run(run_dir, cfg["out_dir"] if cfg["out_dir_given"] else run_dir)
    if not written:
        raise FileNotFoundError(f"no grouping or training artefacts in {run_dir}")
    for w in written:
        print(f"wrote {w}")
    return 0


COMMANDS = {"generate": cmd_generate, "value": cmd_value, "train": cmd_train,
            "group": cmd_group, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        parser.error(str(exc))
    except Exception as exc:  # noqa: BLE001 - reported with exit code 1
        if args.verbose:
            log.exception("command failed")
        print(f"mpgroup {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
