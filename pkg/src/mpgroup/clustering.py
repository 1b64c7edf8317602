"""K-means (Lloyd) on scaled contract features and the centroid baseline grouping."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .portfolio import Portfolio, ProductLine, unscale_features


class ClusteringError(ValueError):
    pass


@dataclass
class ClusterModel:
    centroids: np.ndarray  # (K, d) in scaled coordinates
    assignment: np.ndarray  # (N,) cluster id per point
    inertia: float
    sizes: np.ndarray  # weighted cluster sizes
    n_iter: int = 0
    inertia_history: list = field(default_factory=list)

    @property
    def K(self) -> int:
        return len(self.centroids)

    def to_json(self) -> dict:
        return {"centroids": self.centroids.tolist(), "sizes": self.sizes.tolist(),
                "inertia": self.inertia, "n_iter": self.n_iter}

    def save_json(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    def save_assignment_csv(self, path):
        rows = ["contract_index,cluster"] + [f"{i},{c}" for i, c in enumerate(self.assignment)]
        Path(path).write_text("\n".join(rows) + "\n")


def sq_distances(points, centroids, chunk=65536):
    """Squared Euclidean distances, shape ``(N, K)``."""
    out = np.empty((len(points), len(centroids)))
    for k in range(0, len(points), chunk):
        diff = points[k:k + chunk, None, :] - centroids[None, :, :]
        out[k:k + chunk] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def _plusplus(points, weights, K, rng):
    n = len(points)
    first = rng.choice(n, p=weights / weights.sum())
    chosen = [first]
    d2 = sq_distances(points, points[[first]])[:, 0]
    for _ in range(1, K):
        w = weights * d2
        if w.sum() <= 0:
            # fewer distinct points than K: take any unchosen index
            rest = np.setdiff1d(np.arange(n), chosen)
            idx = int(rest[0])
        else:
            idx = int(rng.choice(n, p=w / w.sum()))
        chosen.append(idx)
        d2 = np.minimum(d2, sq_distances(points, points[[idx]])[:, 0])
    return points[chosen].copy()


def _fill_empty(points, centroids, labels, d_own, K):
    """Move each empty cluster's centroid onto the point farthest from its own centroid."""
    counts = np.bincount(labels, minlength=K)
    for j in np.nonzero(counts == 0)[0]:
        movable = counts[labels] > 1
        cand = np.where(movable, d_own, -np.inf)
        i = int(np.argmax(cand))
        counts[labels[i]] -= 1
        labels[i] = j
        counts[j] = 1
        centroids[j] = points[i]
        d_own[i] = 0.0
    return centroids, labels, d_own


def kmeans(points, K, seed=0, max_iter=300, tol=1e-6, weights=None) -> ClusterModel:
    """Lloyd iterations from k-means++ seeds on (optionally weighted) points.

    Stops when no centroid moves by more than ``tol`` (max-norm) or after
    ``max_iter`` iterations. Raises if inertia ever increases.
    """
    points = np.asarray(points, dtype=float)
    n = len(points)
    if not 1 <= K <= n:
        raise ClusteringError(f"K must satisfy 1 <= K <= N={n}, got {K}")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    rng = np.random.default_rng(seed)
    centroids = _plusplus(points, w, K, rng)
    history = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        d = sq_distances(points, centroids)
        labels = np.argmin(d, axis=1)
        d_own = d[np.arange(n), labels]
        centroids, labels, d_own = _fill_empty(points, centroids, labels, d_own, K)
        inertia = float(np.dot(w, d_own))
        if history and inertia > history[-1] * (1 + 1e-12) + 1e-12:
            raise ClusteringError(f"inertia increased at iteration {n_iter}: {history[-1]} -> {inertia}")
        history.append(inertia)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, points * w[:, None])
        mass = np.bincount(labels, weights=w, minlength=K)
        new = np.where(mass[:, None] > 0, sums / np.where(mass > 0, mass, 1.0)[:, None], centroids)
        shift = float(np.max(np.abs(new - centroids)))
        centroids = new
        if shift < tol:
            break
    d = sq_distances(points, centroids)
    labels = np.argmin(d, axis=1)
    d_own = d[np.arange(n), labels]
    centroids, labels, d_own = _fill_empty(points, centroids, labels, d_own, K)
    inertia = float(np.dot(w, d_own))
    sizes = np.bincount(labels, weights=w, minlength=K)
    return ClusterModel(centroids, labels, inertia, sizes, n_iter, history + [inertia])


def baseline_grouping(model: ClusterModel, line) -> Portfolio:
    """Centroids as model points (raw, fractional features) held with their cluster sizes."""
    line = ProductLine.parse(line)
    X = unscale_features(line, np.clip(model.centroids, -1.0, 1.0), check=False)
    sizes = np.round(model.sizes).astype(np.int64)
    return Portfolio(line, X, sizes, validate=False)
