"""Statistical summaries of the trial matrix: correlations, structure, manifold, local density."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import kernels
from ..errors import InsufficientDataError

MAX_OUTLIERS = 32
VAR_EPS = 1e-12


def pearson(a, b) -> float:
    """Pearson correlation with the zero-variance rule (returns 0.0)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt(np.dot(da, da)), np.sqrt(np.dot(db, db))
    if sa <= VAR_EPS * max(1.0, np.abs(a).max()) or sb <= VAR_EPS * max(1.0, np.abs(b).max()):
        return 0.0
    return float(np.clip(np.dot(da, db) / (sa * sb), -1.0, 1.0))


def iqr_outliers(y, limit: int = MAX_OUTLIERS) -> list[int]:
    y = np.asarray(y, dtype=float)
    q1, med, q3 = np.percentile(y, [25, 50, 75])
    half = 1.5 * (q3 - q1)
    idx = np.flatnonzero((y < med - half) | (y > med + half))
    # most extreme first so the cap keeps the interesting ones
    idx = sorted(idx.tolist(), key=lambda i: (-abs(y[i] - med), i))
    return sorted(idx[:limit])


@dataclass
class InspectSummary:
    per_input_stats: list
    input_target_pearson: list | None
    input_target_kendall: list | None
    surrogate_target_pearson: float | None = None
    outlier_indices: list = field(default_factory=list)
    notes: str = ""
    n_rows: int = 0

    def to_dict(self) -> dict:
        return {
            "n_rows": self.n_rows,
            "per_input_stats": self.per_input_stats,
            "input_target_pearson": self.input_target_pearson,
            "input_target_kendall": self.input_target_kendall,
            "surrogate_target_pearson": self.surrogate_target_pearson,
            "outlier_indices": self.outlier_indices,
            "notes": self.notes,
        }


def inspect_distribution(X, Y, Y_surrogate=None, names=None) -> InspectSummary:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.asarray(Y, dtype=float)
    if X.shape[0] != Y.shape[0]:
        raise ValueError(f"X has {X.shape[0]} rows but Y has {Y.shape[0]}")
    n, d = X.shape
    names = list(names) if names is not None else [f"x{j}" for j in range(d)]
    stats = [
        [names[j], round(float(X[:, j].mean()), 6), round(float(X[:, j].std()), 6),
         round(float(X[:, j].min()), 6), round(float(X[:, j].max()), 6)]
        for j in range(d)
    ] if n else []
    if n < 3:
        return InspectSummary(stats, None, None, None, [], "insufficient data", n)

    notes = []
    pear, kend = [], []
    for j in range(d):
        if np.ptp(X[:, j]) == 0:
            notes.append(f"{names[j]} constant")
        pear.append(round(pearson(X[:, j], Y), 6))
        kend.append(round(float(kernels.kendall_tau_b(X[:, j], Y)), 6))
    if np.ptp(Y) == 0:
        notes.append("target constant")

    sur = None
    if Y_surrogate is not None:
        S = np.asarray(Y_surrogate, dtype=float)
        if S.shape[0] != n:
            raise ValueError("Y_surrogate length differs from Y")
        ok = np.isfinite(S) & np.isfinite(Y)
        if ok.sum() >= 3:
            sur = round(pearson(S[ok], Y[ok]), 6)
        else:
            notes.append("too few paired surrogate rows")
    return InspectSummary(stats, pear, kend, sur, iqr_outliers(Y), "; ".join(notes), n)


# ----------------------------------------------------------------------------
# structure


@dataclass
class StructureRecommendation:
    linear_r2: float
    gp_r2: float
    kernel: str
    noise_floor: float
    roughness: float

    def to_dict(self) -> dict:
        return {k: (round(v, 6) if isinstance(v, float) else v) for k, v in self.__dict__.items()}


def _folds(n: int, k: int, seed: int) -> list[np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]


def _r2(y, pred) -> float:
    ss = float(np.sum((y - y.mean()) ** 2))
    if ss <= VAR_EPS:
        return 1.0 if np.allclose(pred, y) else 0.0
    return 1.0 - float(np.sum((y - pred) ** 2)) / ss


def _cv_linear(X, y, folds):
    pred = np.empty_like(y)
    for f in folds:
        train = np.setdiff1d(np.arange(len(y)), f)
        A = np.column_stack([np.ones(len(train)), X[train]])
        coef, *_ = np.linalg.lstsq(A, y[train], rcond=None)
        pred[f] = np.column_stack([np.ones(len(f)), X[f]]) @ coef
    return pred


def _cv_gp(X, y, folds):
    from .optimize import create_kernel, create_model, predict

    pred = np.empty_like(y)
    for f in folds:
        train = np.setdiff1d(np.arange(len(y)), f)
        model = create_model(X[train], y[train], 1e-3, create_kernel("matern52", X.shape[1]))
        pred[f] = predict(model, X[f])[0]
    return pred


def residual_roughness(X, resid) -> float:
    """Mean lag-1 autocorrelation of residuals ordered along each coordinate."""
    vals = []
    for j in range(X.shape[1]):
        r = resid[np.argsort(X[:, j], kind="stable")]
        vals.append(pearson(r[:-1], r[1:]))
    return float(np.mean(vals))


def inspect_structure(X, Y, seed: int = 0) -> StructureRecommendation:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(Y, dtype=float)
    if X.shape[0] < 8:
        raise InsufficientDataError(f"structure inspection needs >= 8 rows, got {X.shape[0]}")
    folds = _folds(len(y), 5, seed)
    lin = _cv_linear(X, y, folds)
    gp = _cv_gp(X, y, folds)
    r2_lin, r2_gp = _r2(y, lin), _r2(y, gp)
    best = lin if r2_lin >= r2_gp else gp
    resid = y - best
    rough = residual_roughness(X, resid)
    if r2_lin >= 0.9:
        family = "rbf"
    elif rough > 0.5:
        family = "matern32"
    else:
        family = "matern52"
    return StructureRecommendation(r2_lin, r2_gp, family, float(np.var(resid)), rough)


# ----------------------------------------------------------------------------
# manifold


@dataclass
class ManifoldSummary:
    pca_ratios: list | None
    mds_coords: np.ndarray | None
    degenerate: bool = False

    def to_dict(self) -> dict:
        out = {"pca_ratios": None if self.pca_ratios is None else [round(r, 6) for r in self.pca_ratios],
               "degenerate": self.degenerate}
        if self.mds_coords is not None:
            c = self.mds_coords
            out["mds_extent"] = [round(float(v), 6) for v in np.ptp(c, axis=0)]
        return out


def classical_mds(X, dims: int = 2) -> np.ndarray:
    D = kernels.pairwise_dist(X, X)
    n = D.shape[0]
    J = np.eye(n) - np.full((n, n), 1.0 / n)
    B = -0.5 * J @ (D * D) @ J
    w, V = np.linalg.eigh(B)
    order = np.argsort(w)[::-1][:dims]
    w = np.clip(w[order], 0.0, None)
    coords = V[:, order] * np.sqrt(w)
    if coords.shape[1] < dims:
        coords = np.pad(coords, ((0, 0), (0, dims - coords.shape[1])))
    return coords


def analyze_manifold(X) -> ManifoldSummary:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] < 3:
        raise InsufficientDataError("manifold analysis needs >= 3 rows")
    C = X - X.mean(axis=0)
    s = np.linalg.svd(C, compute_uv=False)
    var = s * s
    total = var.sum()
    if total <= VAR_EPS:
        return ManifoldSummary(None, np.zeros((X.shape[0], 2)), True)
    ratios = np.zeros(X.shape[1])
    ratios[: len(var)] = var / total
    return ManifoldSummary(ratios.tolist(), classical_mds(X), False)


# ----------------------------------------------------------------------------
# local density


@dataclass
class LocalSummary:
    lof_scores: np.ndarray
    labels: np.ndarray
    eps: float
    n_noise: int
    n_clusters: int

    def to_dict(self, limit: int = MAX_OUTLIERS) -> dict:
        top = np.argsort(-self.lof_scores, kind="stable")[:limit]
        top = [int(i) for i in top if self.lof_scores[i] > 1.5]
        return {
            "n_clusters": self.n_clusters,
            "n_noise": self.n_noise,
            "eps": round(self.eps, 6),
            "max_lof": round(float(self.lof_scores.max()), 6),
            "lof_outliers": top,
        }


def local_outlier_factor(D: np.ndarray, k: int) -> np.ndarray:
    n = D.shape[0]
    positive = D[D > 0]
    if positive.size == 0:
        return np.ones(n)
    floor = positive.min()
    order = np.argsort(D + np.diag(np.full(n, np.inf)), axis=1, kind="stable")[:, :k]
    kdist = D[np.arange(n), order[:, -1]]
    reach = np.maximum(kdist[order], D[np.arange(n)[:, None], order])
    reach = np.maximum(reach, floor)
    lrd = 1.0 / reach.mean(axis=1)
    return lrd[order].mean(axis=1) / lrd


def dbscan(D: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    n = D.shape[0]
    nbrs = [np.flatnonzero(D[i] <= eps + 1e-9) for i in range(n)]
    core = np.array([len(nb) >= min_pts for nb in nbrs])
    labels = np.full(n, -1)
    cluster = 0
    for i in range(n):
        if labels[i] != -1 or not core[i]:
            continue
        labels[i] = cluster
        stack = [i]
        while stack:
            p = stack.pop()
            if not core[p]:
                continue
            for q in nbrs[p]:
                if labels[q] == -1:
                    labels[q] = cluster
                    stack.append(q)
        cluster += 1
    return labels


def analyze_local(X, k_dbscan: int = 4, min_pts: int = 4) -> LocalSummary:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[0]
    if n < 5:
        raise InsufficientDataError("local analysis needs >= 5 rows")
    D = kernels.pairwise_dist(X, X)
    scores = local_outlier_factor(D, min(10, n - 1))
    sorted_d = np.sort(D, axis=1)
    eps = float(np.median(sorted_d[:, min(k_dbscan, n - 1)]))
    labels = dbscan(D, eps, min_pts)
    return LocalSummary(scores, labels, eps, int(np.sum(labels == -1)), int(labels.max() + 1))
