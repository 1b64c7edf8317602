"""Training and evaluation of neural surrogates for the exact valuation."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .actuarial import DEFAULT_ASSUMPTIONS, ValuationAssumptions, policy_values
from .neural import (
    Adam,
    Network,
    build_network,
    deserialize,
    loss as loss_fn,
)
from .portfolio import HORIZON, Portfolio, ProductLine, scale_features

log = logging.getLogger(__name__)


class SizeError(ValueError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, epoch, message="loss became NaN"):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


@dataclass
class Dataset:
    """Contracts (raw and scaled features) with their exact policy-value paths."""

    line: ProductLine
    X: np.ndarray
    Z: np.ndarray
    Y: np.ndarray

    def __len__(self):
        return len(self.X)

    @classmethod
    def from_portfolio(cls, p: Portfolio, a: ValuationAssumptions = DEFAULT_ASSUMPTIONS) -> "Dataset":
        return cls(p.line, p.features.copy(), scale_features(p.line, p.features),
                   policy_values(p.line, p.features, a))

    def subset(self, idx) -> "Dataset":
        return Dataset(self.line, self.X[idx], self.Z[idx], self.Y[idx])


@dataclass
class DataSplit:
    train: Dataset
    validation: Dataset
    test: Dataset
    indices: dict = field(default_factory=dict, repr=False)


def split(dataset: Dataset, seed: int = 0) -> DataSplit:
    """Shuffle, hold out 30% for testing and 25% of the rest for validation."""
    n = len(dataset)
    if n < 10:
        raise SizeError(f"need at least 10 contracts to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_test = int(np.floor(0.3 * n))
    n_val = int(np.floor(0.25 * (n - n_test)))
    test, val, train = perm[:n_test], perm[n_test:n_test + n_val], perm[n_test + n_val:]
    return DataSplit(dataset.subset(train), dataset.subset(val), dataset.subset(test),
                     {"train": train, "validation": val, "test": test})


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    hidden: int = 64
    recurrent_hidden: int = 64
    cell: str = "recurrent"
    scale_mode: str | None = None  # None: log for term life, linear for DC
    loss_kind: str = "MSE"
    max_epochs: int = 300
    patience: int = 50
    batch_size: int = 64
    lr: float = 0.001
    seed: int = 0

    @classmethod
    def from_dict(cls, doc) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class TrainResult:
    network: Network
    history: list  # (epoch, train_loss, val_loss)
    best_epoch: int
    config: TrainConfig


def default_scale_mode(line) -> str:
    return "log" if ProductLine.parse(line) is ProductLine.TERM_LIFE else "linear"


def train_surrogate(data: DataSplit, config: TrainConfig = TrainConfig()) -> TrainResult:
    """Mini-batch Adam on scaled inputs and raw-currency targets with early stopping.

    The weights of the epoch with the lowest validation loss are restored.
    """
    train, val = data.train, data.validation
    T = train.Y.shape[1]
    if train.Z.shape[1] != 5 or T != HORIZON[train.line]:
        raise ValueError("training data does not match the product line's dimensions")
    mode = config.scale_mode or default_scale_mode(train.line)
    lo = min(float(train.Y.min()), 0.0)
    hi = float(train.Y.max())
    net = build_network(5, T, hidden=config.hidden, recurrent_hidden=config.recurrent_hidden,
                        cell=config.cell, scale_mode=mode, lo=lo, hi=hi, seed=config.seed)
    # start from the mean target rather than the scale midpoint; under the log
    # scale a midpoint start sits far below most targets and can stall
    net.layers[-2].params["b"][:] = net.scale_layer.inverse(train.Y.mean())
    rng = np.random.default_rng([config.seed, 1])
    opt = Adam(lr=config.lr)
    params = net.parameters()

    def val_loss():
        return loss_fn(config.loss_kind, net.predict(val.Z), val.Y)[0]

    best, best_epoch = val_loss(), 0
    best_weights = net.get_weights()
    history = []
    n = len(train)
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for k in range(0, n, config.batch_size):
            idx = order[k:k + config.batch_size]
            pred = net.forward(train.Z[idx])
            value, grad = loss_fn(config.loss_kind, pred, train.Y[idx])
            if not np.isfinite(value):
                raise TrainingError(epoch)
            grads, _ = net.backward(grad)
            opt.step(params, grads)
            total += value * len(idx)
        net.clear()
        v = val_loss()
        if not np.isfinite(v):
            raise TrainingError(epoch, "validation loss became NaN")
        history.append((epoch, total / n, v))
        if v < best:
            best, best_epoch = v, epoch
            best_weights = net.get_weights()
        elif epoch - best_epoch >= config.patience:
            log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
            break
    net.set_weights(best_weights)
    return TrainResult(net, history, best_epoch, config)


# ---------------------------------------------------------------- ensembles

class SurrogateEnsemble:
    """Arithmetic mean of member networks; differentiable w.r.t. inputs."""

    def __init__(self, members, member_losses=None, line=None):
        if not members:
            raise ValueError("an ensemble needs at least one member")
        dims = {(m.input_dim, m.output_dim) for m in members}
        if len(dims) != 1:
            raise ValueError("ensemble members must share input and output dimensions")
        self.members = list(members)
        self.member_losses = list(member_losses or ["MSE"] * len(members))
        self.line = ProductLine.parse(line) if line is not None else None
        self.input_dim, self.output_dim = dims.pop()

    def __len__(self):
        return len(self.members)

    def predict(self, Z):
        return sum(m.predict(Z) for m in self.members) / len(self.members)

    def forward(self, Z):
        return sum(m.forward(Z) for m in self.members) / len(self.members)

    __call__ = predict

    def input_gradient(self, upstream):
        """Gradient of ``<upstream, forward(Z)>`` w.r.t. the cached inputs."""
        total = None
        for m in self.members:
            _, dz = m.backward(upstream)
            total = dz if total is None else total + dz
        return total / len(self.members)

    def clear(self):
        for m in self.members:
            m.clear()

    def to_dict(self) -> dict:
        return {"format": "mpgroup-ensemble", "version": 1,
                "line": self.line.value if self.line else None,
                "losses": self.member_losses,
                "members": [m.to_dict() for m in self.members]}

    @classmethod
    def from_dict(cls, doc) -> "SurrogateEnsemble":
        if "members" not in doc:
            raise ValueError("ensemble document lacks 'members'")
        return cls([deserialize(m) for m in doc["members"]], doc.get("losses"), doc.get("line"))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), separators=(",", ":")))

    @classmethod
    def load(cls, path) -> "SurrogateEnsemble":
        return cls.from_dict(json.loads(Path(path).read_text()))


def member_losses(n_members, losses="mse"):
    losses = losses.lower()
    if losses == "mse":
        return ["MSE"] * n_members
    if losses == "mae":
        return ["MAE"] * n_members
    if losses == "mixed":
        return ["MSE" if k % 2 == 0 else "MAE" for k in range(n_members)]
    raise ValueError(f"losses must be 'mse', 'mae' or 'mixed', got {losses!r}")


def member_seeds(seed, n_members):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n_members)]


def _train_member(args):
    data, cfg = args
    return train_surrogate(data, cfg)


def train_ensemble(data: DataSplit, config: TrainConfig = TrainConfig(), n_members: int = 3,
                   losses: str = "mse", workers: int = 1, seeds=None):
    """Train ``n_members`` networks with derived seeds; returns ``(ensemble, results)``."""
    if n_members < 1:
        raise ValueError("n_members must be >= 1")
    kinds = member_losses(n_members, losses)
    seeds = member_seeds(config.seed, n_members) if seeds is None else list(seeds)
    jobs = [(data, replace(config, loss_kind=k, seed=s)) for k, s in zip(kinds, seeds)]
    if workers > 1 and n_members > 1:
        with ProcessPoolExecutor(max_workers=min(workers, n_members)) as pool:
            results = list(pool.map(_train_member, jobs))
    else:
        results = [_train_member(j) for j in jobs]
    ens = SurrogateEnsemble([r.network for r in results], kinds, data.train.line)
    return ens, results


def write_history_csv(path, history) -> None:
    lines = ["epoch,train_loss,val_loss"] + [f"{e},{tr!r},{va!r}" for e, tr, va in history]
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------- evaluation

VOLUME_EDGES = (0.0, 0.005, 0.01, 0.05, 0.1, 0.5, 1.0)


def nearest_rank_percentile(values, q) -> float:
    a = np.sort(np.asarray(values, dtype=float).ravel())
    if a.size == 0:
        return float("nan")
    rank = int(np.ceil(q * a.size))
    return float(a[max(rank, 1) - 1])


@dataclass
class EvalReport:
    mean_e_t: float
    mean_wre_t: float
    mean_abs_wre_t: float
    pc99_abs_e: float
    pc99_abs_wre: float
    mean_re_t: float
    mean_abs_re_t: float
    re_by_volume_bucket: list
    per_t: dict

    def to_json(self) -> dict:
        return asdict(self)

    def save_json(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    def save_csv(self, path):
        rows = ["stat,t,value"]
        for name in ("mean_e_t", "mean_wre_t", "mean_abs_wre_t", "pc99_abs_e", "pc99_abs_wre",
                     "mean_re_t", "mean_abs_re_t"):
            rows.append(f"{name},all,{getattr(self, name)!r}")
        for name, series in self.per_t.items():
            rows += [f"{name},{t},{float(v)!r}" for t, v in enumerate(series)]
        for b in self.re_by_volume_bucket:
            tag = f"[{b['lower']},{b['upper']})"
            for stat in ("count", "mean_re", "mean_abs_re", "pc99_abs_re"):
                rows.append(f"re_bucket_{stat},{tag},{b[stat]!r}")
        Path(path).write_text("\n".join(rows) + "\n")


def evaluate(model, dataset: Dataset, reference: Dataset | None = None) -> EvalReport:
    """Absolute, relative and portfolio-weighted relative errors of ``model`` on ``dataset``.

    ``reference`` is the portfolio whose aggregate values weight the errors
    (defaults to ``dataset`` itself).
    """
    if len(dataset) == 0:
        raise SizeError("cannot evaluate on an empty dataset")
    Y = dataset.Y
    pred = model.predict(dataset.Z) if hasattr(model, "predict") else model(dataset.Z)
    e = pred - Y
    ref_total = (reference or dataset).Y.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        re = np.where(Y > 0, e / np.where(Y > 0, Y, 1.0), np.nan)
        wre = np.where(ref_total > 0, e / np.where(ref_total > 0, ref_total, 1.0), np.nan)
    wre_def = wre[np.isfinite(wre)]
    re_def = re[np.isfinite(re)]

    vol = Y.max(axis=1) / Y.max()
    buckets = []
    for k, (lo, hi) in enumerate(zip(VOLUME_EDGES[:-1], VOLUME_EDGES[1:])):
        last = k == len(VOLUME_EDGES) - 2
        rows = (vol >= lo) & ((vol <= hi) if last else (vol < hi))
        vals = re[rows]
        vals = vals[np.isfinite(vals)]
        buckets.append({
            "lower": lo, "upper": hi, "count": int(rows.sum()),
            "mean_re": float(vals.mean()) if vals.size else float("nan"),
            "mean_abs_re": float(np.abs(vals).mean()) if vals.size else float("nan"),
            "pc99_abs_re": nearest_rank_percentile(np.abs(vals), 0.99),
        })

    agg_pred, agg_true = pred.sum(axis=0), Y.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        agg_re = np.where(agg_true > 0, (agg_pred - agg_true) / np.where(agg_true > 0, agg_true, 1.0),
                          np.nan)
    per_t = {
        "mean_e": e.mean(axis=0).tolist(),
        # columns with a zero reference total are NaN throughout
        "mean_wre": wre.mean(axis=0).tolist(),
        "aggregate_re": agg_re.tolist(),
    }
    return EvalReport(
        mean_e_t=float(e.mean()),
        mean_wre_t=float(wre_def.mean()) if wre_def.size else float("nan"),
        mean_abs_wre_t=float(np.abs(wre_def).mean()) if wre_def.size else float("nan"),
        pc99_abs_e=nearest_rank_percentile(np.abs(e), 0.99),
        pc99_abs_wre=nearest_rank_percentile(np.abs(wre_def), 0.99),
        mean_re_t=float(re_def.mean()) if re_def.size else float("nan"),
        mean_abs_re_t=float(np.abs(re_def).mean()) if re_def.size else float("nan"),
        re_by_volume_bucket=buckets,
        per_t=per_t,
    )
