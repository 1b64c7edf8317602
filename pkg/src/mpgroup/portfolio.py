"""Contract features, portfolio containers and quasi-random portfolio synthesis."""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .sobol import sobol_points


class ProductLine(str, enum.Enum):
    TERM_LIFE = "tl"
    DC_PLAN = "dc"

    @classmethod
    def parse(cls, tag) -> "ProductLine":
        if isinstance(tag, cls):
            return tag
        try:
            return cls(str(tag).strip().lower())
        except ValueError:
            raise ValueError(f"unknown product line {tag!r}; expected 'tl' or 'dc'") from None


class RangeError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    lower: float
    upper: float
    integer_valued: bool
    unit: str

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError(f"{self.name}: lower must be < upper")
        if self.integer_valued and (self.lower != int(self.lower) or self.upper != int(self.upper)):
            raise ValueError(f"{self.name}: integer feature needs integer bounds")


ISSUE_AGE_RANGE = (25, 67)
RETIREMENT_AGE = 67

FEATURES = {
    ProductLine.TERM_LIFE: (
        # issue age <= 67 plus lapsed duration <= 39
        FeatureSpec("age", 25, 106, True, "years"),
        FeatureSpec("sum_insured", 1e3, 1e6, True, "EUR"),
        FeatureSpec("duration", 2, 40, True, "years"),
        FeatureSpec("lapsed_duration", 0, 39, True, "years"),
        FeatureSpec("interest_rate", -0.01, 0.04, False, "numeric"),
    ),
    ProductLine.DC_PLAN: (
        FeatureSpec("age", 25, 60, True, "years"),
        FeatureSpec("fund_volume", 0.0, 200_000.0, False, "EUR"),
        FeatureSpec("salary", 20_000.0, 200_000.0, False, "EUR"),
        FeatureSpec("salary_scale", 0.01, 0.05, False, "numeric"),
        FeatureSpec("contribution", 0.01, 0.1, False, "numeric"),
    ),
}

# number of policy-value entries per contract: t = 0..40 and t = 0..42
HORIZON = {ProductLine.TERM_LIFE: 41, ProductLine.DC_PLAN: 43}


def bounds(line) -> tuple[np.ndarray, np.ndarray]:
    specs = FEATURES[ProductLine.parse(line)]
    return (np.array([f.lower for f in specs], dtype=float),
            np.array([f.upper for f in specs], dtype=float))


def integer_mask(line) -> np.ndarray:
    return np.array([f.integer_valued for f in FEATURES[ProductLine.parse(line)]])


def round_half_up(x):
    return np.floor(np.asarray(x, dtype=float) + 0.5)


def check_features(line, X: np.ndarray) -> None:
    """Raise ``RangeError`` unless every row of ``X`` is a valid contract of ``line``."""
    line = ProductLine.parse(line)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != 5:
        raise RangeError(f"expected 5 features, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise RangeError("non-finite feature value")
    lo, hi = bounds(line)
    bad = np.nonzero(np.any((X < lo) | (X > hi), axis=1))[0]
    if bad.size:
        raise RangeError(f"row {bad[0]}: features {X[bad[0]].tolist()} outside {line.value} bounds")
    ints = integer_mask(line)
    bad = np.nonzero(np.any(X[:, ints] != np.round(X[:, ints]), axis=1))[0]
    if bad.size:
        raise RangeError(f"row {bad[0]}: integer-valued feature holds a fraction")
    if line is ProductLine.TERM_LIFE:
        age, _, dur, lapsed, _ = X.T
        issue = age - lapsed
        bad = np.nonzero((lapsed > dur - 1) | (issue < ISSUE_AGE_RANGE[0]) | (issue > ISSUE_AGE_RANGE[1]))[0]
        if bad.size:
            raise RangeError(f"row {bad[0]}: lapsed duration must be < duration and issue age in "
                             f"{ISSUE_AGE_RANGE}")


@dataclass(frozen=True)
class Contract:
    line: ProductLine
    x: tuple[float, float, float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "line", ProductLine.parse(self.line))
        object.__setattr__(self, "x", tuple(float(v) for v in self.x))
        check_features(self.line, np.array([self.x]))

    def as_array(self) -> np.ndarray:
        return np.array(self.x, dtype=float)


class Portfolio:
    """A multiset of contracts stored as a feature matrix plus positive counts.

    Rows may hold fractional features when ``validate=False`` (model points).
    """

    def __init__(self, line, features, counts=None, validate=True):
        self.line = ProductLine.parse(line)
        self.features = np.atleast_2d(np.asarray(features, dtype=float)).copy()
        if self.features.shape[1] != 5 or self.features.shape[0] == 0:
            raise ValueError(f"features must be a non-empty (n, 5) array, got {self.features.shape}")
        if counts is None:
            counts = np.ones(len(self.features), dtype=np.int64)
        counts = np.asarray(counts)
        if counts.shape != (len(self.features),):
            raise ValueError("counts must have one entry per contract")
        if np.any(counts != np.round(counts)) or np.any(counts < 1):
            raise ValueError("counts must be positive integers")
        self.counts = counts.astype(np.int64)
        if validate:
            check_features(self.line, self.features)
        self.features.setflags(write=False)
        self.counts.setflags(write=False)

    def __len__(self):
        return len(self.features)

    @property
    def size(self) -> int:
        """Total number of contracts N (sum of counts)."""
        return int(self.counts.sum())

    def entries(self) -> Iterator[tuple[Contract, int]]:
        for row, s in zip(self.features, self.counts):
            yield Contract(self.line, tuple(row)), int(s)

    def __eq__(self, other):
        return (isinstance(other, Portfolio) and self.line is other.line
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.counts, other.counts))

    def __repr__(self):
        return f"Portfolio(line={self.line.value}, entries={len(self)}, N={self.size})"


def synth_term_life(n: int, skip: int = 1) -> Portfolio:
    """Term-life portfolio of ``n`` contracts from a 5-d Sobol sequence.

    Issue age, sum insured and duration are drawn independently; the lapsed
    duration is a uniform fraction of ``duration - 1`` so no contract has
    matured; current age is issue age plus lapsed duration.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    u = sobol_points(5, n, skip)
    issue = round_half_up(ISSUE_AGE_RANGE[0] + u[:, 0] * (ISSUE_AGE_RANGE[1] - ISSUE_AGE_RANGE[0]))
    sum_insured = round_half_up(1e3 + u[:, 1] * (1e6 - 1e3))
    duration = round_half_up(2 + u[:, 2] * 38)
    lapsed = round_half_up(u[:, 3] * (duration - 1))
    interest = -0.01 + u[:, 4] * 0.05
    X = np.column_stack([issue + lapsed, sum_insured, duration, lapsed, interest])
    return Portfolio(ProductLine.TERM_LIFE, X)


def synth_dc(n: int, skip: int = 1) -> Portfolio:
    """Defined-contribution portfolio of ``n`` plans scaled from a 5-d Sobol sequence."""
    if n < 1:
        raise ValueError("n must be >= 1")
    lo, hi = bounds(ProductLine.DC_PLAN)
    X = lo + sobol_points(5, n, skip) * (hi - lo)
    X[:, 0] = round_half_up(X[:, 0])
    return Portfolio(ProductLine.DC_PLAN, X)


def synthesize(line, n: int, skip: int = 1) -> Portfolio:
    line = ProductLine.parse(line)
    return synth_term_life(n, skip) if line is ProductLine.TERM_LIFE else synth_dc(n, skip)


def scale_features(line, X, check=True) -> np.ndarray:
    """Affine map of raw features onto [-1, 1] per feature."""
    X = np.asarray(X, dtype=float)
    lo, hi = bounds(line)
    if check and np.any((X < lo) | (X > hi)):
        raise RangeError("feature outside its bounds; cannot scale")
    return 2.0 * (X - lo) / (hi - lo) - 1.0


def unscale_features(line, Z, check=True) -> np.ndarray:
    """Inverse of :func:`scale_features`; no integer rounding is applied."""
    Z = np.asarray(Z, dtype=float)
    if check and np.any(np.abs(Z) > 1.0):
        raise RangeError("scaled coordinate outside [-1, 1]")
    lo, hi = bounds(line)
    return lo + (Z + 1.0) * 0.5 * (hi - lo)


def scale_to_unit(c: Contract) -> np.ndarray:
    return scale_features(c.line, c.as_array())


def unscale(line, z) -> np.ndarray:
    return unscale_features(line, z)


# ---------------------------------------------------------------- CSV I/O

PORTFOLIO_HEADER = ["line", "x1", "x2", "x3", "x4", "x5", "count"]


class PortfolioFormatError(ValueError):
    pass


def _fmt(v: float) -> str:
    return repr(float(v))


def write_portfolio_csv(p: Portfolio, path, weights=None) -> None:
    header = PORTFOLIO_HEADER + (["weight"] if weights is not None else [])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for k, (row, s) in enumerate(zip(p.features, p.counts)):
        rec = [p.line.value, *(_fmt(v) for v in row), str(int(s))]
        if weights is not None:
            rec.append(_fmt(weights[k]))
        w.writerow(rec)
    Path(path).write_text(buf.getvalue())


def read_portfolio_csv(path, validate=True) -> Portfolio:
    """Read a portfolio CSV; errors name the offending line number."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [h.strip() for h in rows[0][:7]] != PORTFOLIO_HEADER:
        raise PortfolioFormatError(f"{path}: line 1: expected header {','.join(PORTFOLIO_HEADER)}")
    line, feats, counts = None, [], []
    for lineno, rec in enumerate(rows[1:], start=2):
        if not rec:
            continue
        try:
            tag = ProductLine.parse(rec[0])
            x = [float(v) for v in rec[1:6]]
            if len(x) != 5:
                raise ValueError("expected 5 feature columns")
            count = float(rec[6])
            if count != int(count) or count < 1:
                raise ValueError(f"count must be a positive integer, got {rec[6]!r}")
        except (ValueError, IndexError) as exc:
            raise PortfolioFormatError(f"{path}: line {lineno}: {exc}") from None
        if line is None:
            line = tag
        elif tag is not line:
            raise PortfolioFormatError(f"{path}: line {lineno}: mixed product lines")
        if validate:
            try:
                check_features(tag, np.array([x]))
            except RangeError as exc:
                raise PortfolioFormatError(f"{path}: line {lineno}: {exc}") from None
        feats.append(x)
        counts.append(int(count))
    if line is None:
        raise PortfolioFormatError(f"{path}: no contracts")
    return Portfolio(line, np.array(feats), np.array(counts), validate=False)
