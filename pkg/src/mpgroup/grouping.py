"""Model-point optimisation through a frozen surrogate and exact backtesting.

A model point is parametrised as ``x = tanh(W)`` with ``W`` the weights of a
bias-free layer fed by the constant input 1, so a K-means centroid ``c`` is
reproduced exactly by ``W = atanh(c)``. Only ``W`` is trained; the surrogate
stays fixed. With ``m`` points per cluster the cluster output is the equal-
weight average of their predictions, scaled by the cluster size.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .actuarial import (
    DEFAULT_ASSUMPTIONS,
    ValuationAssumptions,
    bounds_for_model_points,
    policy_values,
    value_portfolio,
)
from .clustering import ClusterModel, baseline_grouping, kmeans
from .neural import make_optimizer
from .portfolio import Portfolio, bounds, scale_features, unscale_features, write_portfolio_csv

log = logging.getLogger(__name__)

EDGE = 1.0 - 1e-6


class OptimizationError(RuntimeError):
    def __init__(self, step, message="loss became NaN"):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass
class ModelPointProblem:
    target: np.ndarray  # aggregate path of the cluster, length T
    cluster_size: int
    surrogate: object
    m: int
    init: np.ndarray  # (m, 5) scaled starting points
    box: tuple | None = None  # (lo, hi) per-feature bounds within [-1, 1]
    anchor: np.ndarray | None = None  # reference point (the centroid) the result must not lose to

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=float)
        self.init = np.atleast_2d(np.asarray(self.init, dtype=float))
        if self.m < 1 or self.init.shape != (self.m, 5):
            raise ValueError(f"init must have shape ({self.m}, 5), got {self.init.shape}")
        if self.target.shape != (self.surrogate.output_dim,):
            raise ValueError("target length does not match surrogate output")
        if self.cluster_size < 1:
            raise ValueError("cluster_size must be >= 1")
        if self.box is not None:
            lo, hi = (np.asarray(b, dtype=float) for b in self.box)
            if np.any(self.init < lo - 1e-12) or np.any(self.init > hi + 1e-12):
                raise ValueError("init lies outside the feature box")
            self.box = (lo, hi)
        if self.anchor is not None:
            self.anchor = np.clip(np.asarray(self.anchor, dtype=float), -EDGE, EDGE)


@dataclass
class OptimizedModelPoints:
    points: np.ndarray  # (m, 5) scaled coordinates of the best iterate
    weights: np.ndarray
    loss_trace: list
    best_loss: float
    best_step: int  # -1: no iterate beat the anchor
    anchor_loss: float | None = None

    @property
    def init_loss(self) -> float:
        return self.loss_trace[0]


@dataclass
class GroupingOptions:
    steps: int = 2000
    lr: float = 0.05
    optimizer: str = "fixed"
    use_box: bool = True
    target: str = "exact"  # or "surrogate": optimise against the surrogate's view of the cluster
    jitter: float = 0.05
    multi_init: str = "jitter"  # or "subclusters": K-means inside the cluster
    seed: int = 0
    kmeans_max_iter: int = 300
    kmeans_tol: float = 1e-6

    @classmethod
    def from_dict(cls, doc) -> "GroupingOptions":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown grouping options: {sorted(unknown)}")
        return cls(**doc)


def init_from_centroid(centroid, m=1, jitter=0.05, box=None, rng=None):
    """Starting points for ``m`` model points; returns ``(points, clamped)``.

    Components at +-1 are pulled inside to keep ``atanh`` finite.
    """
    c = np.asarray(centroid, dtype=float)
    clamped = bool(np.any(np.abs(c) > EDGE))
    c = np.clip(c, -EDGE, EDGE)
    if m == 1:
        return c[None, :].copy(), clamped
    rng = rng if rng is not None else np.random.default_rng(0)
    pts = c[None, :] + rng.uniform(-jitter, jitter, size=(m, c.size))
    lo, hi = (-EDGE, EDGE) if box is None else box
    return np.clip(pts, np.maximum(lo, -EDGE), np.minimum(hi, EDGE)), clamped


def weights_from_points(points):
    return np.arctanh(np.clip(points, -EDGE, EDGE))


def _surrogate_output(surrogate, W, m):
    """Cluster outputs (P, T) for stacked weights W (P, m, 5), caching for backward."""
    P = W.shape[0]
    x = np.tanh(W).reshape(P * m, -1)
    pred = surrogate.forward(x)
    return x, pred.reshape(P, m, -1).mean(axis=1)


def objective(surrogate, W, targets, sizes, grad=True):
    """Per-problem losses ``mean_t (|C| * mean_i R_hat(tanh W_i)_t - target_t)^2`` and,
    optionally, their gradients w.r.t. ``W`` of shape ``(P, m, 5)``."""
    P, m, _ = W.shape
    x, out = _surrogate_output(surrogate, W, m)
    sizes = np.asarray(sizes, dtype=float)[:, None]
    resid = out * sizes - targets
    losses = np.mean(resid * resid, axis=1)
    if not grad:
        return losses, None
    d_out = 2.0 * resid * sizes / resid.shape[1]
    dx = input_gradient(surrogate, np.repeat(d_out / m, m, axis=0))
    return losses, (dx * (1.0 - x * x)).reshape(W.shape)


def optimize_batch(problems, opts: GroupingOptions = GroupingOptions()) -> list:
    """Optimise several independent problems sharing one surrogate and ``m``.

    The summed objective separates by problem, so one batched step equals a
    step on each problem alone. Each problem keeps its own best iterate.
    """
    if not problems:
        return []
    surrogate = problems[0].surrogate
    m = problems[0].m
    if any(p.surrogate is not surrogate or p.m != m for p in problems):
        raise ValueError("batched problems must share the surrogate and m")
    P = len(problems)
    W = np.stack([weights_from_points(p.init) for p in problems])  # (P, m, 5)
    lo = np.full((P, 1, 5), -np.inf)
    hi = np.full((P, 1, 5), np.inf)
    for k, p in enumerate(problems):
        if opts.use_box and p.box is not None:
            lo[k, 0] = np.arctanh(np.clip(p.box[0], -EDGE, EDGE))
            hi[k, 0] = np.arctanh(np.clip(p.box[1], -EDGE, EDGE))
    W = np.clip(W, lo, hi)
    targets = np.stack([p.target for p in problems])
    sizes = np.array([p.cluster_size for p in problems], dtype=float)[:, None]
    ref = np.maximum(np.abs(targets).max(axis=1, keepdims=True), 1e-12)

    optimizer = make_optimizer(opts.optimizer, opts.lr)
    traces = [[] for _ in range(P)]
    best = np.full(P, np.inf)
    best_W = W.copy()
    best_step = np.zeros(P, dtype=int)
    anchor_loss = [None] * P
    has_anchor = [k for k, p in enumerate(problems) if p.anchor is not None]
    if has_anchor:
        # all m points on the anchor: the starting candidate to beat
        A = np.stack([np.repeat(weights_from_points(problems[k].anchor)[None, :], m, axis=0)
                      for k in has_anchor])
        a_loss, _ = objective(surrogate, A, targets[has_anchor], sizes[has_anchor, 0], grad=False)
        for k, v, w in zip(has_anchor, a_loss, A):
            anchor_loss[k] = float(v)
            best[k], best_W[k], best_step[k] = v, w, -1
    for step in range(opts.steps + 1):
        last = step == opts.steps
        losses, gW = objective(surrogate, W, targets, sizes[:, 0], grad=not last)
        if not np.all(np.isfinite(losses)):
            raise OptimizationError(step)
        for k in range(P):
            traces[k].append(float(losses[k]))
        improved = losses < best
        best = np.where(improved, losses, best)
        best_W[improved] = W[improved]
        best_step[improved] = step
        if last:
            break
        # the step acts on a dimensionless relative error
        optimizer.step([W], [gW / (ref * ref)[:, :, None]])
        np.clip(W, lo, hi, out=W)
    if hasattr(surrogate, "clear"):
        surrogate.clear()
    return [OptimizedModelPoints(np.tanh(best_W[k]), np.full(m, 1.0 / m), traces[k],
                                 float(best[k]), int(best_step[k]), anchor_loss[k])
            for k in range(P)]


def input_gradient(surrogate, upstream):
    """Input gradient for either an ensemble or a single network (cached forward)."""
    if hasattr(surrogate, "input_gradient"):
        return surrogate.input_gradient(upstream)
    _, dz = surrogate.backward(upstream)
    return dz


def optimize_model_points(problem: ModelPointProblem, opts: GroupingOptions = GroupingOptions()):
    return optimize_batch([problem], opts)[0]


def surrogate_loss(surrogate, points, target, cluster_size):
    """Raw objective ``mean_t (|C| * mean_i R_hat(x_i)_t - target_t)^2``."""
    out = surrogate.predict(np.atleast_2d(points)).mean(axis=0)
    resid = out * cluster_size - np.asarray(target, dtype=float)
    return float(np.mean(resid * resid))


def split_counts(total, m):
    """Equal integer split of ``total`` over ``m`` points, remainder to the first ones."""
    base, rem = divmod(int(total), m)
    return np.array([base + (1 if k < rem else 0) for k in range(m)], dtype=np.int64)


# ------------------------------------------------------------ portfolio level

@dataclass
class GroupingResult:
    grouped: Portfolio  # fractional model points with integer counts
    weights: np.ndarray  # within-cluster weight of each model point
    cluster_of_point: np.ndarray
    clusters: ClusterModel | None
    optimized: list  # OptimizedModelPoints per cluster
    targets: np.ndarray  # (K, T) target path per cluster
    cluster_sizes: np.ndarray
    box_clamped: list = field(default_factory=list)

    @property
    def points_scaled(self) -> np.ndarray:
        return np.concatenate([o.points for o in self.optimized])


def cluster_portfolio(p: Portfolio, K, seed=0, max_iter=300, tol=1e-6) -> ClusterModel:
    Z = scale_features(p.line, p.features)
    if K == 1:
        w = p.counts.astype(float)
        c = (Z * w[:, None]).sum(axis=0, keepdims=True) / w.sum()
        d = np.sum((Z - c) ** 2, axis=1)
        return ClusterModel(c, np.zeros(len(p), dtype=int), float(np.dot(w, d)),
                            np.array([w.sum()]), 0, [])
    return kmeans(Z, K, seed=seed, max_iter=max_iter, tol=tol, weights=p.counts)


def group_portfolio(p: Portfolio, surrogate, K, m=1, opts: GroupingOptions = GroupingOptions(),
                    a: ValuationAssumptions = DEFAULT_ASSUMPTIONS, clusters: ClusterModel | None = None):
    """Cluster ``p`` into ``K`` groups (none for ``K == 1``) and optimise ``m`` model points each."""
    if K < 1 or m < 1:
        raise ValueError("K and m must be >= 1")
    clusters = clusters or cluster_portfolio(p, K, opts.seed, opts.kmeans_max_iter, opts.kmeans_tol)
    Z = scale_features(p.line, p.features)
    if opts.target == "surrogate":
        contract_paths = surrogate.predict(Z)
    elif opts.target == "exact":
        contract_paths = policy_values(p.line, p.features, a)
    else:
        raise ValueError(f"target must be 'exact' or 'surrogate', got {opts.target!r}")
    rng = np.random.default_rng(opts.seed)
    problems, sizes, targets, clamped = [], [], [], []
    for j in range(clusters.K):
        members = clusters.assignment == j
        w = p.counts[members]
        size = int(w.sum())
        target = (contract_paths[members] * w[:, None]).sum(axis=0)
        box = (Z[members].min(axis=0), Z[members].max(axis=0))
        if m > 1 and opts.multi_init == "subclusters":
            sub = kmeans(Z[members], min(m, int(members.sum())), seed=opts.seed, weights=w)
            init = np.clip(sub.centroids, -EDGE, EDGE)
            if len(init) < m:
                init = np.vstack([init, np.repeat(init[:1], m - len(init), axis=0)])
            c_flag = bool(np.any(np.abs(sub.centroids) > EDGE))
        else:
            init, c_flag = init_from_centroid(clusters.centroids[j], m, opts.jitter,
                                              box if opts.use_box else None, rng)
        init = np.clip(init, np.maximum(box[0], -EDGE), np.minimum(box[1], EDGE)) if opts.use_box \
            else init
        problems.append(ModelPointProblem(target, size, surrogate, m, init,
                                          box if opts.use_box else None,
                                          anchor=clusters.centroids[j]))
        sizes.append(size)
        targets.append(target)
        clamped.append(c_flag)
    optimized = optimize_batch(problems, opts)
    points, counts, weights, owner = [], [], [], []
    for j, o in enumerate(optimized):
        points.append(unscale_features(p.line, o.points, check=False))
        counts.append(split_counts(sizes[j], m))
        weights.append(o.weights)
        owner.append(np.full(m, j))
    counts = np.concatenate(counts)
    keep = counts > 0
    grouped = Portfolio(p.line, np.concatenate(points)[keep], counts[keep], validate=False)
    return GroupingResult(grouped, np.concatenate(weights)[keep], np.concatenate(owner)[keep],
                          clusters, optimized, np.array(targets), np.array(sizes), clamped)


# ------------------------------------------------------------------ backtest

METHODS = ("ann_pred", "ann_low", "ann_mid", "ann_high", "km_low", "km_mid", "km_high")


def relative_errors(series, target):
    series, target = np.asarray(series, float), np.asarray(target, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(target > 0, (series - target) / np.where(target > 0, target, 1.0), np.nan)


@dataclass
class GroupingReport:
    target: np.ndarray
    series: dict  # method -> aggregate path
    summary: dict  # method -> {stat: value}
    clamped_points: int = 0

    def mean_abs_re(self, method) -> float:
        return self.summary[method]["mean_abs_re"]

    def to_json(self) -> dict:
        return {"target": self.target.tolist(),
                "series": {k: v.tolist() for k, v in self.series.items()},
                "summary": self.summary, "clamped_points": self.clamped_points}

    def save(self, out_dir, prefix="grouping"):
        out = Path(out_dir)
        (out / f"{prefix}_report.json").write_text(json.dumps(self.to_json(), indent=2) + "\n")
        cols = ["target"] + [k for k in METHODS if k in self.series]
        rows = ["t," + ",".join(cols)]
        for t in range(len(self.target)):
            vals = [self.target[t]] + [self.series[k][t] for k in cols[1:]]
            rows.append(f"{t}," + ",".join(repr(float(v)) for v in vals))
        (out / f"{prefix}_series.csv").write_text("\n".join(rows) + "\n")
        rows = ["method,stat,value"]
        for method, stats in self.summary.items():
            rows += [f"{method},{s},{float(v)!r}" for s, v in stats.items()]
        (out / f"{prefix}_summary.csv").write_text("\n".join(rows) + "\n")


def summarize(series, target) -> dict:
    e = np.asarray(series, float) - target
    re = relative_errors(series, target)
    re = re[np.isfinite(re)]
    return {"mean_e": float(e.mean()), "mean_abs_e": float(np.abs(e).mean()),
            "mean_re": float(re.mean()) if re.size else float("nan"),
            "mean_abs_re": float(np.abs(re).mean()) if re.size else float("nan"),
            "max_abs_re": float(np.abs(re).max()) if re.size else float("nan")}


def backtest(grouped: Portfolio, original: Portfolio, surrogate,
             a: ValuationAssumptions = DEFAULT_ASSUMPTIONS, baseline: Portfolio | None = None,
             target: np.ndarray | None = None) -> GroupingReport:
    """Compare exact portfolio values against the surrogate and exact bounds of the model points."""
    if grouped.line is not original.line:
        raise ValueError("grouped and original portfolios must share the product line")
    target = value_portfolio(original, a) if target is None else np.asarray(target, float)
    w = grouped.counts.astype(float)[:, None]
    Z = scale_features(grouped.line, np.clip(grouped.features, *bounds(grouped.line)), check=False)
    series = {"ann_pred": (surrogate.predict(Z) * w).sum(axis=0)}
    b = bounds_for_model_points(grouped.line, grouped.features, a)
    series["ann_low"] = (b.low * w).sum(axis=0)
    series["ann_mid"] = (b.mid * w).sum(axis=0)
    series["ann_high"] = (b.high * w).sum(axis=0)
    clamped = int(b.clamped.sum())
    if baseline is not None:
        kb = bounds_for_model_points(baseline.line, baseline.features, a)
        wk = baseline.counts.astype(float)[:, None]
        series["km_low"] = (kb.low * wk).sum(axis=0)
        series["km_mid"] = (kb.mid * wk).sum(axis=0)
        series["km_high"] = (kb.high * wk).sum(axis=0)
    summary = {k: summarize(v, target) for k, v in series.items()}
    return GroupingReport(target, series, summary, clamped)


def accept_grouping(target, prediction, alpha) -> tuple[bool, np.ndarray]:
    """Componentwise acceptance: ``|R_t(P) - R_hat_t(P~)| / |R_t(P)| < alpha_t`` where ``R_t(P) > 0``."""
    target = np.asarray(target, float)
    alpha = np.broadcast_to(np.asarray(alpha, float), target.shape)
    rel = np.abs(relative_errors(prediction, target))
    defined = np.isfinite(rel)
    ok = np.where(defined, rel < alpha, True)
    return bool(np.all(ok)), rel


def default_thresholds(T):
    return 0.02 + 0.002 * np.arange(T)


def write_model_points_csv(result: GroupingResult, path):
    write_portfolio_csv(result.grouped, path, weights=result.weights)
