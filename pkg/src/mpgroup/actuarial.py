"""Exact valuation of term-life reserves and DC-plan fund paths.

All valuation routines are vectorised over contracts: they accept an
``(n, 5)`` feature matrix and return an ``(n, T)`` matrix of policy values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .portfolio import (
    HORIZON,
    RETIREMENT_AGE,
    Contract,
    Portfolio,
    ProductLine,
    bounds,
)


@dataclass(frozen=True)
class MortalityModel:
    """Makeham survival law ``tpx = exp(-A t - B / ln c * c^x (c^t - 1))``."""

    A: float = 0.00022
    B: float = 2.7e-6
    c: float = 1.124

    def __post_init__(self):
        if self.A < 0 or self.B < 0 or not self.c > 1:
            raise ValueError("need A >= 0, B >= 0 and c > 1")

    def survival(self, x, t=1.0):
        x = np.asarray(x, dtype=float)
        t = np.asarray(t, dtype=float)
        return np.exp(-self.A * t - self.B / np.log(self.c) * self.c ** x * (self.c ** t - 1.0))


def survival_prob(m: MortalityModel, x, t):
    if np.any(np.asarray(x) < 0) or np.any(np.asarray(t) < 0):
        raise ValueError("age and horizon must be non-negative")
    return m.survival(x, t)


@dataclass(frozen=True)
class RetirementTable:
    """Retirement probabilities by age; zero below the first tabulated age, one from 67."""

    start_age: int = 60
    rates: tuple = (0.3, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1)

    def __post_init__(self):
        object.__setattr__(self, "rates", tuple(float(r) for r in self.rates))
        if any(not 0.0 <= r <= 1.0 for r in self.rates):
            raise ValueError("retirement rates must lie in [0, 1]")
        if self.start_age < 60 or self.start_age + len(self.rates) > RETIREMENT_AGE:
            raise ValueError("retirement rates must cover ages within [60, 66]")

    def rate(self, age):
        age = np.asarray(age)
        table = np.zeros(RETIREMENT_AGE + 1)
        table[self.start_age:self.start_age + len(self.rates)] = self.rates
        table[RETIREMENT_AGE] = 1.0
        idx = np.clip(age.astype(int), 0, RETIREMENT_AGE)
        return table[idx]


@dataclass(frozen=True)
class ValuationAssumptions:
    mortality: MortalityModel = field(default_factory=MortalityModel)
    retirement: RetirementTable = field(default_factory=RetirementTable)
    dc_fund_rate: float = 0.03

    def __post_init__(self):
        if not self.dc_fund_rate > -1:
            raise ValueError("dc_fund_rate must exceed -1")

    def to_json(self) -> dict:
        return {"A": self.mortality.A, "B": self.mortality.B, "c": self.mortality.c,
                "rr": list(self.retirement.rates), "rr_start_age": self.retirement.start_age,
                "i": self.dc_fund_rate}

    @classmethod
    def from_json(cls, doc: dict) -> "ValuationAssumptions":
        d = cls()
        m = MortalityModel(doc.get("A", d.mortality.A), doc.get("B", d.mortality.B),
                           doc.get("c", d.mortality.c))
        r = RetirementTable(doc.get("rr_start_age", 60), tuple(doc.get("rr", d.retirement.rates)))
        return cls(m, r, doc.get("i", d.dc_fund_rate))

    @classmethod
    def load(cls, path) -> "ValuationAssumptions":
        return cls.from_json(json.loads(Path(path).read_text()))


DEFAULT_ASSUMPTIONS = ValuationAssumptions()


# ------------------------------------------------------------------ term life

def _tl_columns(X):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    age, S, n, lapsed, i = X.T
    return age - lapsed, S, n.astype(int), lapsed.astype(int), i


def tl_premium(X, a: ValuationAssumptions = DEFAULT_ASSUMPTIONS) -> np.ndarray:
    """Level annual equivalence-principle premium, paid in advance."""
    x0, S, n, _, i = _tl_columns(X)
    T = int(n.max())
    t = np.arange(T)
    live = t[None, :] < n[:, None]
    v = 1.0 / (1.0 + i)[:, None]
    tpx = a.mortality.survival(x0[:, None], t[None, :])
    q = 1.0 - a.mortality.survival(x0[:, None] + t[None, :], 1.0)
    benefits = np.where(live, v ** (t + 1) * tpx * q, 0.0).sum(axis=1)
    annuity = np.where(live, v ** t * tpx, 0.0).sum(axis=1)
    return S * benefits / annuity


def tl_reserves(X, a: ValuationAssumptions = DEFAULT_ASSUMPTIONS) -> np.ndarray:
    """Forward reserve recursion from issue, ``V[:, t]`` for t = 0..max duration.

    ``V[k, n_k]`` is the computed terminal reserve (zero up to rounding);
    entries past the duration are zero.
    """
    x0, S, n, _, i = _tl_columns(X)
    P = tl_premium(X, a)
    T = int(n.max())
    V = np.zeros((len(x0), T + 1))
    for t in range(T):
        p = a.mortality.survival(x0 + t, 1.0)
        nxt = ((V[:, t] + P) * (1.0 + i) - (1.0 - p) * S) / p
        V[:, t + 1] = np.where(t < n, nxt, 0.0)
    return V


def tl_policy_values(X, a: ValuationAssumptions = DEFAULT_ASSUMPTIONS) -> np.ndarray:
    """Zero-padded reserve paths ``Y[:, t] = V[lapsed + t]`` on t = 0..40.

    The terminal entry is the maturity value, exactly zero by the
    equivalence principle; the recursion's rounding residual is dropped.
    """
    _, _, n, lapsed, _ = _tl_columns(X)
    V = tl_reserves(X, a)
    T = HORIZON[ProductLine.TERM_LIFE]
    idx = lapsed[:, None] + np.arange(T)[None, :]
    keep = idx < n[:, None]
    Y = np.take_along_axis(V, np.minimum(idx, V.shape[1] - 1), axis=1)
    return np.where(keep, Y, 0.0)


# -------------------------------------------------------------------- DC plan

def dc_policy_values(X, a: ValuationAssumptions = DEFAULT_ASSUMPTIONS) -> np.ndarray:
    """Expected fund volume of still-active members on t = 0..42, zero after retirement."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    age, fund, salary, scale, contrib = X.T
    age_int = age.astype(int)
    T = HORIZON[ProductLine.DC_PLAN]
    Y = np.zeros((len(X), T))
    Y[:, 0] = fund
    horizon = RETIREMENT_AGE - age_int
    for t in range(1, T):
        attained = age_int + t - 1
        p = a.mortality.survival(attained, 1.0)
        rr = a.retirement.rate(attained)
        nxt = (Y[:, t - 1] + contrib * salary * (1.0 + scale) ** t) * (1.0 + a.dc_fund_rate) * (1.0 - rr) * p
        Y[:, t] = np.where(t <= horizon, nxt, 0.0)
    return Y


def policy_values(line, X, a: ValuationAssumptions = DEFAULT_ASSUMPTIONS) -> np.ndarray:
    line = ProductLine.parse(line)
    if line is ProductLine.TERM_LIFE:
        return tl_policy_values(X, a)
    return dc_policy_values(X, a)


def contract_values(c: Contract, a: ValuationAssumptions = DEFAULT_ASSUMPTIONS) -> np.ndarray:
    return policy_values(c.line, c.as_array()[None, :], a)[0]


def value_portfolio(p: Portfolio, a: ValuationAssumptions = DEFAULT_ASSUMPTIONS) -> np.ndarray:
    """Aggregate policy-value path ``sum_k count_k * R(x_k)``; identical rows are valued once."""
    uniq, inverse = np.unique(p.features, axis=0, return_inverse=True)
    weights = np.bincount(inverse.ravel(), weights=p.counts, minlength=len(uniq))
    paths = policy_values(p.line, uniq, a)
    return (paths * weights[:, None]).sum(axis=0)


# ------------------------------------------------- fractional model points

@dataclass
class BoundedValues:
    low: np.ndarray
    high: np.ndarray
    mid: np.ndarray
    clamped: np.ndarray  # per model point: rounding pushed a feature out of range


def _rounded_variants(line, X):
    """Two integer-feasible variants bracketing each fractional model point."""
    lo, hi = bounds(line)
    X = np.clip(np.atleast_2d(np.asarray(X, dtype=float)), lo, hi)
    low_x, high_x = X.copy(), X.copy()
    if line is ProductLine.TERM_LIFE:
        # low: shorter remaining term (floor duration, ceil lapsed); high: vice versa
        low_x[:, 2], low_x[:, 3] = np.floor(X[:, 2]), np.ceil(X[:, 3])
        high_x[:, 2], high_x[:, 3] = np.ceil(X[:, 2]), np.floor(X[:, 3])
        clamped = np.zeros(len(X), dtype=bool)
        for v in (low_x, high_x):
            over = v[:, 3] > v[:, 2] - 1
            clamped |= over
            v[:, 3] = np.where(over, v[:, 2] - 1, v[:, 3])
    else:
        # an older member retires sooner
        low_x[:, 0], high_x[:, 0] = np.ceil(X[:, 0]), np.floor(X[:, 0])
        clamped = np.zeros(len(X), dtype=bool)
    return low_x, high_x, clamped


def bounds_for_model_points(line, X, a: ValuationAssumptions = DEFAULT_ASSUMPTIONS) -> BoundedValues:
    """Exact values of fractional model points bracketed by rounding their integer features.

    Term life floors duration and ceils lapsed duration for the lower bound
    (and the reverse for the upper bound); current age stays fixed so the
    issue age follows from the rounded lapsed duration. DC plans ceil and
    floor the current age. Sum insured and the other real features are
    used unrounded.
    """
    line = ProductLine.parse(line)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    lo, hi = bounds(line)
    clamped = np.any((X < lo) | (X > hi), axis=1)
    low_x, high_x, c2 = _rounded_variants(line, X)
    low = policy_values(line, low_x, a)
    high = policy_values(line, high_x, a)
    return BoundedValues(low, high, 0.5 * (low + high), clamped | c2)


def bounds_for_model_point(line, x, a: ValuationAssumptions = DEFAULT_ASSUMPTIONS):
    b = bounds_for_model_points(line, np.asarray(x, dtype=float)[None, :], a)
    return b.low[0], b.high[0], b.mid[0]


# ------------------------------------------------------------------ export

def write_paths_csv(path, values: np.ndarray, ids=None) -> None:
    """Write ``t,value`` rows (one path) or ``id,t,value`` rows (several)."""
    values = np.asarray(values, dtype=float)
    lines = []
    if values.ndim == 1:
        lines.append("t,value")
        lines += [f"{t},{float(v)!r}" for t, v in enumerate(values)]
    else:
        ids = range(len(values)) if ids is None else ids
        lines.append("contract,t,value")
        for k, row in zip(ids, values):
            lines += [f"{k},{t},{float(v)!r}" for t, v in enumerate(row)]
    Path(path).write_text("\n".join(lines) + "\n")
