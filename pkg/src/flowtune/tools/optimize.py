"""Gaussian-process surrogate, Expected Improvement and candidate generation."""

from __future__ import annotations

import re
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.stats import norm, qmc

from .. import kernels
from ..errors import ConditioningError, ConfigurationError, DomainError, InsufficientDataError
from ..params import ParamSpace, ParamVector

FAMILIES = {"rbf": kernels.RBF, "matern32": kernels.MATERN32, "matern52": kernels.MATERN52}
ALIASES = {"matern": "matern52", "se": "rbf", "gaussian": "rbf", "matern5/2": "matern52", "matern3/2": "matern32"}
JITTER_START, JITTER_MAX = 1e-8, 1e-2
Y_STD_FLOOR = 1e-12
EI_STD_FLOOR = 1e-12
UNCERTAINTY_FLOOR = 1e-6


@dataclass(frozen=True)
class KernelSpec:
    family: str
    input_dim: int
    length_scales: tuple | None = None  # None: resolved at fit time by the median heuristic
    signal_variance: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown kernel family {self.family!r}; supported: {sorted(FAMILIES)}")
        if self.length_scales is not None:
            if len(self.length_scales) != self.input_dim:
                raise ConfigurationError("length_scales must have one entry per input dimension")
            if any(not (ls > 0) for ls in self.length_scales):
                raise ConfigurationError("length scales must be positive")
        if not self.signal_variance > 0:
            raise ConfigurationError("signal_variance must be positive")

    @property
    def resolved(self) -> bool:
        return self.length_scales is not None

    def to_dict(self) -> dict:
        return {"family": self.family, "input_dim": self.input_dim,
                "length_scales": None if self.length_scales is None else [round(v, 6) for v in self.length_scales],
                "signal_variance": self.signal_variance}


_KERNEL_RE = re.compile(r"^\s*([A-Za-z0-9_/]+)\s*(?:\((.*)\))?\s*$")


def _parse_number_list(text: str) -> list[float]:
    text = text.strip()
    if text.startswith("["):
        if not text.endswith("]"):
            raise ConfigurationError(f"unterminated list {text!r}")
        text = text[1:-1]
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigurationError(f"bad numeric value in {text!r}") from exc


def _split_args(body: str) -> list[str]:
    parts, depth, cur = [], 0, ""
    for ch in body:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append(cur)
            cur = ""
        else:
            cur += ch
    if cur.strip():
        parts.append(cur)
    return parts


def create_kernel(spec_text: str, input_dim: int) -> KernelSpec:
    """Parse e.g. ``matern52``, ``rbf(ls=0.5)``, ``matern32(ls=[0.1,0.2], var=2)``."""
    m = _KERNEL_RE.match(spec_text or "")
    if not m:
        raise ConfigurationError(f"cannot parse kernel spec {spec_text!r}; supported: {sorted(FAMILIES)}")
    name = m.group(1).lower()
    name = ALIASES.get(name, name)
    if name not in FAMILIES:
        raise ConfigurationError(f"unknown kernel family {m.group(1)!r}; supported: {sorted(FAMILIES)}")
    ls, var = None, 1.0
    for arg in _split_args(m.group(2) or ""):
        if "=" not in arg:
            raise ConfigurationError(f"kernel argument {arg.strip()!r} is not key=value")
        key, val = (t.strip() for t in arg.split("=", 1))
        vals = _parse_number_list(val)
        if key in ("ls", "length_scale", "length_scales", "lengthscale"):
            if len(vals) == 1:
                vals = vals * input_dim
            ls = tuple(vals)
        elif key in ("var", "variance", "signal_variance"):
            if len(vals) != 1:
                raise ConfigurationError("signal variance takes one value")
            var = vals[0]
        else:
            raise ConfigurationError(f"unknown kernel argument {key!r}")
    return KernelSpec(name, int(input_dim), ls, var)


def median_length_scale(X: np.ndarray) -> float:
    n = X.shape[0]
    if n < 2:
        return 1.0
    D = kernels.pairwise_dist(X, X)[np.triu_indices(n, k=1)]
    D = D[D > 0]
    return float(np.median(D)) if D.size else 1.0


@dataclass(frozen=True)
class GPModel:
    train_X: np.ndarray
    train_y: np.ndarray  # standardized
    y_mean: float
    y_std: float
    kernel: KernelSpec
    noise_variance: np.ndarray  # per point, standardized units
    jitter: float
    chol: np.ndarray
    alpha: np.ndarray

    @property
    def n(self) -> int:
        return self.train_X.shape[0]

    def summary(self) -> dict:
        return {"n": self.n, "kernel": self.kernel.to_dict(), "jitter": self.jitter,
                "y_mean": round(self.y_mean, 6), "y_std": round(self.y_std, 6)}


def _factorize(K: np.ndarray) -> tuple[np.ndarray, float]:
    jitter = JITTER_START
    eye = np.eye(K.shape[0])
    while jitter <= JITTER_MAX * (1 + 1e-9):
        try:
            return np.linalg.cholesky(K + jitter * eye), jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise ConditioningError(f"kernel matrix not positive definite with jitter up to {JITTER_MAX}")


def _fit(X, ys, kernel: KernelSpec, noise_var) -> tuple[np.ndarray, float, np.ndarray]:
    K = kernels.kernel_matrix(X, X, np.asarray(kernel.length_scales), FAMILIES[kernel.family],
                              kernel.signal_variance)
    K[np.diag_indices_from(K)] += noise_var
    L, jitter = _factorize(K)
    alpha = cho_solve((L, True), ys)
    return L, jitter, alpha


def _cv_mse(X, ys, kernel, noise_var, folds=5) -> float:
    n = len(ys)
    idx = np.arange(n)
    err = 0.0
    for f in np.array_split(idx, folds):
        tr = np.setdiff1d(idx, f)
        try:
            L, _, alpha = _fit(X[tr], ys[tr], kernel, noise_var[tr])
        except ConditioningError:
            return np.inf
        Ks = kernels.kernel_matrix(X[f], X[tr], np.asarray(kernel.length_scales), FAMILIES[kernel.family],
                                   kernel.signal_variance)
        err += float(np.sum((Ks @ alpha - ys[f]) ** 2))
    return err / n


def create_model(X, y, noise_level=0.0, kernel: KernelSpec | str = "matern52", refine: bool = False) -> GPModel:
    """Fit a GP on unit-cube inputs.

    ``noise_level`` is a noise standard deviation in the units of ``y``,
    either one value or one per row (e.g. the uncertainty column from
    :func:`handle_surrogate`).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.shape[0]:
        raise DomainError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
    if X.shape[0] < 2:
        raise InsufficientDataError("a GP needs at least 2 training points")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise DomainError("training data must be finite")
    if isinstance(kernel, str):
        kernel = create_kernel(kernel, X.shape[1])
    if kernel.input_dim != X.shape[1]:
        raise DomainError(f"kernel expects {kernel.input_dim} inputs, data has {X.shape[1]}")
    mean = float(y.mean())
    std = max(float(y.std()), Y_STD_FLOOR)
    ys = (y - mean) / std
    noise = np.broadcast_to(np.asarray(noise_level, dtype=float), y.shape)
    if np.any(noise < 0):
        raise DomainError("noise levels must be nonnegative")
    noise_var = (noise / std) ** 2

    if not kernel.resolved:
        base = median_length_scale(X)
        kernel = replace(kernel, length_scales=(base,) * X.shape[1])
        if refine and X.shape[0] >= 10:
            options = [replace(kernel, length_scales=(base * f,) * X.shape[1]) for f in (0.5, 1.0, 2.0)]
            scores = [_cv_mse(X, ys, k, noise_var) for k in options]
            kernel = options[int(np.argmin(scores))]
    L, jitter, alpha = _fit(X, ys, kernel, noise_var)
    return GPModel(X.copy(), ys, mean, std, kernel, noise_var, jitter, L, alpha)


def _cross_kernel(model: GPModel, Xs: np.ndarray) -> np.ndarray:
    k = model.kernel
    return kernels.kernel_matrix(Xs, model.train_X, np.asarray(k.length_scales), FAMILIES[k.family],
                                 k.signal_variance)


def predict(model: GPModel, X_star) -> tuple[np.ndarray, np.ndarray]:
    Xs = np.atleast_2d(np.asarray(X_star, dtype=float))
    if Xs.shape[1] != model.train_X.shape[1]:
        raise DomainError(f"query has {Xs.shape[1]} columns, model expects {model.train_X.shape[1]}")
    Ks = _cross_kernel(model, Xs)
    mu = Ks @ model.alpha
    v = solve_triangular(model.chol, Ks.T, lower=True)
    var = np.clip(model.kernel.signal_variance - np.sum(v * v, axis=0), 0.0, None)
    return model.y_mean + model.y_std * mu, model.y_std * np.sqrt(var)


def predict_mean_gradient(model: GPModel, x) -> np.ndarray:
    """Analytic gradient of the posterior mean at one query point."""
    x = np.asarray(x, dtype=float).ravel()
    ls = np.asarray(model.kernel.length_scales)
    diff = (x[None, :] - model.train_X) / ls**2
    r = np.sqrt(np.sum(((x[None, :] - model.train_X) / ls) ** 2, axis=1))
    s2 = model.kernel.signal_variance
    fam = model.kernel.family
    if fam == "rbf":
        coef = -s2 * np.exp(-0.5 * r * r)
    elif fam == "matern32":
        coef = -3.0 * s2 * np.exp(-np.sqrt(3.0) * r)
    else:
        coef = -(5.0 / 3.0) * s2 * (1.0 + np.sqrt(5.0) * r) * np.exp(-np.sqrt(5.0) * r)
    dk = coef[:, None] * diff
    return model.y_std * (dk.T @ model.alpha)


def expected_improvement(mu, std, y_best: float) -> np.ndarray:
    """EI for minimization; zero where the predictive std vanishes."""
    if not np.isfinite(y_best):
        raise DomainError("y_best must be finite")
    mu = np.asarray(mu, dtype=float)
    std = np.asarray(std, dtype=float)
    if np.any(std < 0):
        raise DomainError("std must be nonnegative")
    ei = np.zeros(np.broadcast(mu, std).shape)
    ok = np.broadcast_to(std >= EI_STD_FLOOR, ei.shape)
    mu_b, std_b = np.broadcast_to(mu, ei.shape)[ok], np.broadcast_to(std, ei.shape)[ok]
    imp = y_best - mu_b
    z = imp / std_b
    ei[ok] = np.maximum(imp * norm.cdf(z) + std_b * norm.pdf(z), 0.0)
    return ei


# ----------------------------------------------------------------------------
# surrogate fusion


@dataclass(frozen=True)
class SurrogateFusion:
    X: np.ndarray
    y: np.ndarray
    uncertainty: np.ndarray
    slope: float
    intercept: float
    rmse: float
    branch: str  # affine | identity
    n_pairs: int
    n_filled: int

    def summary(self) -> dict:
        return {"slope": round(self.slope, 6), "intercept": round(self.intercept, 6), "rmse": round(self.rmse, 6),
                "branch": self.branch, "n_pairs": self.n_pairs, "n_filled": self.n_filled}


def fuse_surrogate(X, y_true_partial, surrogate_values, base_noise: float = UNCERTAINTY_FLOOR) -> SurrogateFusion:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    yt = np.asarray(y_true_partial, dtype=float)
    s = np.asarray(surrogate_values, dtype=float)
    if not (X.shape[0] == yt.shape[0] == s.shape[0]):
        raise DomainError("X, true and surrogate vectors must have equal length")
    has_t, has_s = np.isfinite(yt), np.isfinite(s)
    if np.any(~has_t & ~has_s):
        raise DomainError(f"rows {np.flatnonzero(~has_t & ~has_s).tolist()[:8]} have neither value")
    paired = has_t & has_s
    n_pairs = int(paired.sum())
    if n_pairs == 0 and not has_t.any():
        raise DomainError("no true values and no paired rows")
    if n_pairs >= 3 and np.ptp(s[paired]) > 0:
        A = np.column_stack([s[paired], np.ones(n_pairs)])
        (a, b), *_ = np.linalg.lstsq(A, yt[paired], rcond=None)
        rmse = float(np.sqrt(np.mean((A @ np.array([a, b]) - yt[paired]) ** 2)))
        fill_unc, branch = rmse, "affine"
    else:
        a, b = 1.0, 0.0
        observed = yt[has_t] if has_t.sum() >= 2 else s[has_s]
        rmse = float("nan")
        fill_unc, branch = 2.0 * float(np.std(observed)), "identity"
    y = np.where(has_t, yt, a * s + b)
    unc = np.where(has_t, base_noise, fill_unc)
    unc = np.maximum(unc, UNCERTAINTY_FLOOR)
    return SurrogateFusion(X, y, unc, float(a), float(b), rmse, branch, n_pairs, int((~has_t).sum()))


def handle_surrogate(X, y_true_partial, surrogate_values, base_noise: float = UNCERTAINTY_FLOOR):
    f = fuse_surrogate(X, y_true_partial, surrogate_values, base_noise)
    return f.X, f.y, f.uncertainty


# ----------------------------------------------------------------------------
# sampling and proposals


def latin_hypercube(n_points: int, n_dims: int, seed) -> np.ndarray:
    if n_points < 1 or n_dims < 1:
        raise DomainError("latin_hypercube needs n_points >= 1 and n_dims >= 1")
    U = qmc.LatinHypercube(d=n_dims, seed=np.random.default_rng(seed)).random(n_points)
    # strata are [i/n, (i+1)/n); nudge an exact lower edge off zero to stay inside the open cube
    return np.where(U <= 0.0, 0.5 / n_points, U)


def propose_candidates(model: GPModel, space: ParamSpace, n_candidates: int, y_best: float,
                       seed: int = 0) -> list[tuple[ParamVector, float]]:
    """Top-EI grid points from a Latin-hypercube pool."""
    if not np.isfinite(y_best):
        raise DomainError("y_best must be a finite incumbent value")
    if n_candidates < 1:
        raise DomainError("n_candidates must be >= 1")
    if model.train_X.shape[1] != space.dim:
        raise DomainError("model and space dimensions differ")
    pool = space.snap_unit(latin_hypercube(max(20 * n_candidates, 2000), space.dim, seed))
    mu, std = predict(model, pool)
    ei = expected_improvement(mu, std, y_best)
    order = np.lexsort((np.arange(len(ei)), -ei))
    chosen, seen, dupes = [], set(), []
    for i in order:
        key = pool[i].tobytes()
        if key in seen:
            dupes.append(i)
            continue
        seen.add(key)
        chosen.append(i)
        if len(chosen) == n_candidates:
            break
    chosen.extend(dupes[: n_candidates - len(chosen)])
    return [(space.from_unit(pool[i]), float(ei[i])) for i in chosen]
