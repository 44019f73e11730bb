"""Reduce an over-full candidate pool to exactly n diverse, high-quality points."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import kernels
from ..errors import ConfigurationError, DomainError

SELECT_METHODS = ("top_quality", "pareto", "max_min")
LOG_EPS = 1e-12


def zscore(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.size < 2:
        return np.zeros_like(v)
    sd = v.std(ddof=1)
    if not sd > 1e-12 * max(1.0, np.abs(v).max()):
        return np.zeros_like(v)
    return (v - v.mean()) / sd


def create_quality_scores(X, y, model_predictions, model_uncertainties=None, beta: float = 0.5) -> np.ndarray:
    """Higher is better: low predicted loss, optionally rewarded for uncertainty.

    ``X`` and ``y`` are accepted for interface symmetry with the other tools;
    the score depends only on the model outputs.
    """
    p = np.asarray(model_predictions, dtype=float)
    if X is not None and np.atleast_2d(X).shape[0] != p.shape[0]:
        raise DomainError("X and predictions differ in length")
    q = -zscore(p)
    if model_uncertainties is not None:
        u = np.asarray(model_uncertainties, dtype=float)
        if u.shape != p.shape:
            raise DomainError("uncertainties and predictions differ in length")
        q = q + beta * zscore(u)
    return q


def _argmax_low(v: np.ndarray, allowed: np.ndarray | None = None) -> int:
    """Index of the maximum, lowest index on ties; restricted to ``allowed``."""
    v = np.where(allowed, v, -np.inf) if allowed is not None else v
    return int(np.flatnonzero(v == v.max())[0])


def _check_n(m: int, n: int) -> None:
    if n < 1:
        raise DomainError("n_points must be >= 1")
    if n > m:
        raise DomainError(f"cannot select {n} points from a pool of {m}")


@dataclass(frozen=True)
class SelectionRequest:
    X: np.ndarray
    quality_scores: np.ndarray
    n_points: int
    method: str = "top_quality"
    seed: int = 0

    def __post_init__(self):
        q = np.asarray(self.quality_scores, dtype=float)
        if not np.all(np.isfinite(q)):
            raise DomainError("quality scores must be finite")
        if q.shape[0] != np.atleast_2d(self.X).shape[0]:
            raise DomainError("X and quality_scores differ in length")
        _check_n(q.shape[0], self.n_points)


def top_quality(q: np.ndarray, n: int) -> list[int]:
    return np.lexsort((np.arange(len(q)), -q))[:n].tolist()


def max_min(X: np.ndarray, q: np.ndarray, n: int) -> list[int]:
    first = _argmax_low(q)
    sel = [first]
    mind = np.full(X.shape[0], np.inf)
    kernels.min_dist_update(X, X[first], mind)
    free = np.ones(X.shape[0], dtype=bool)
    free[first] = False
    while len(sel) < n:
        i = _argmax_low(mind, free)
        sel.append(i)
        free[i] = False
        kernels.min_dist_update(X, X[i], mind)
    return sel


def crowding_distance(F: np.ndarray) -> np.ndarray:
    m, c = F.shape
    cd = np.zeros(m)
    if m <= 2:
        return np.full(m, np.inf)
    for j in range(c):
        order = np.argsort(F[:, j], kind="stable")
        span = F[order[-1], j] - F[order[0], j]
        cd[order[0]] = cd[order[-1]] = np.inf
        if span <= 0:
            continue
        cd[order[1:-1]] += (F[order[2:], j] - F[order[:-2], j]) / span
    return cd


def nondominated_fronts(F: np.ndarray) -> list[np.ndarray]:
    remaining = np.arange(F.shape[0])
    fronts = []
    while remaining.size:
        mask = kernels.nondominated_mask(F[remaining])
        fronts.append(remaining[mask])
        remaining = remaining[~mask]
    return fronts


def pareto_select(X: np.ndarray, Q: np.ndarray, n: int) -> list[int]:
    Q = np.asarray(Q, dtype=float)
    if Q.ndim == 1:
        # single score: pair it with isolation (distance to the nearest other candidate)
        D = kernels.pairwise_dist(X, X)
        np.fill_diagonal(D, np.inf)
        iso = D.min(axis=1) if X.shape[0] > 1 else np.zeros(1)
        Q = np.column_stack([Q, iso])
    sel: list[int] = []
    for front in nondominated_fronts(Q):
        if len(sel) + len(front) <= n:
            sel.extend(sorted(front.tolist()))
            if len(sel) == n:
                break
            continue
        cd = crowding_distance(Q[front])
        order = np.lexsort((front, -cd))
        sel.extend(front[order[: n - len(sel)]].tolist())
        break
    return sel


def select_points(request: SelectionRequest) -> list[int]:
    X = np.atleast_2d(np.asarray(request.X, dtype=float))
    Q = np.asarray(request.quality_scores, dtype=float)
    q = Q if Q.ndim == 1 else Q[:, 0]
    if request.method == "top_quality":
        return top_quality(q, request.n_points)
    if request.method == "max_min":
        return max_min(X, q, request.n_points)
    if request.method == "pareto":
        return pareto_select(X, Q, request.n_points)
    raise ConfigurationError(f"unknown selection method {request.method!r}; expected one of {SELECT_METHODS}")


def hybrid_select(X, quality_scores, distance_matrix, n_points: int, weight: float = 0.5) -> list[int]:
    q = np.asarray(quality_scores, dtype=float)
    D = np.asarray(distance_matrix, dtype=float)
    m = q.shape[0]
    if D.shape != (m, m):
        raise DomainError(f"distance matrix shape {D.shape} does not match {m} points")
    if not np.allclose(D, D.T, atol=1e-9) or np.any(np.abs(np.diag(D)) > 1e-9):
        raise DomainError("distance matrix must be symmetric with a zero diagonal")
    _check_n(m, n_points)
    zq = zscore(q)
    first = _argmax_low(q)
    sel = [first]
    free = np.ones(m, dtype=bool)
    free[first] = False
    mind = D[first].copy()
    mind[first] = 0.0
    while len(sel) < n_points:
        score = weight * zq + (1.0 - weight) * zscore(mind)
        i = _argmax_low(score, free)
        sel.append(i)
        free[i] = False
        np.minimum(mind, D[i], out=mind)
    return sel


def entropy_select(X, quality_scores, n_points: int) -> list[int]:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    q = np.asarray(quality_scores, dtype=float)
    _check_n(q.shape[0], n_points)
    zq = zscore(q)
    first = _argmax_low(q)
    sel = [first]
    free = np.ones(len(q), dtype=bool)
    free[first] = False
    mind = np.full(len(q), np.inf)
    kernels.min_dist_update(X, X[first], mind)
    while len(sel) < n_points:
        gain = zq + np.log(mind + LOG_EPS)
        i = _argmax_low(gain, free)
        sel.append(i)
        free[i] = False
        kernels.min_dist_update(X, X[i], mind)
    return sel


def knn_adjacency(X: np.ndarray, k: int) -> np.ndarray:
    m = X.shape[0]
    A = np.zeros((m, m), dtype=bool)
    if m < 2 or k < 1:
        return A
    D = kernels.pairwise_dist(X, X)
    np.fill_diagonal(D, np.inf)
    nn = np.argsort(D, axis=1, kind="stable")[:, :k]
    A[np.repeat(np.arange(m), k), nn.ravel()] = True
    return A | A.T


def graph_select(X, quality_scores, n_points: int, k: int | None = None, adjacency=None) -> list[int]:
    """Greedy independent-set style pick on a kNN graph (or a supplied adjacency)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    q = np.asarray(quality_scores, dtype=float)
    m = q.shape[0]
    _check_n(m, n_points)
    if adjacency is None:
        A = knn_adjacency(X, min(10, m - 1) if k is None else k)
    else:
        A = np.asarray(adjacency, dtype=bool)
        A = A | A.T
    sel: list[int] = []
    free = np.ones(m, dtype=bool)
    open_ = np.ones(m, dtype=bool)
    while len(sel) < n_points and (free & open_).any():
        i = _argmax_low(q, free & open_)
        sel.append(i)
        free[i] = False
        open_ &= ~A[i]
    while len(sel) < n_points:
        i = _argmax_low(q, free)
        sel.append(i)
        free[i] = False
    return sel


SELECTORS = {
    "top_quality": lambda X, q, n: top_quality(q, n),
    "max_min": lambda X, q, n: max_min(X, q, n),
    "pareto": lambda X, q, n: pareto_select(X, q, n),
    "hybrid": lambda X, q, n: hybrid_select(X, q, kernels.pairwise_dist(X, X), n),
    "entropy": lambda X, q, n: entropy_select(X, q, n),
    "graph": lambda X, q, n: graph_select(X, q, n),
}
