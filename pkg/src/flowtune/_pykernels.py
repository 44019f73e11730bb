"""Pure numpy implementations of the numerical inner loops.

Same signatures as the compiled ``_ckernels`` module; used when the
extension is not built or ``FLOWTUNE_PURE=1`` is set.
"""

import numpy as np

RBF, MATERN32, MATERN52 = 0, 1, 2

_SQRT3 = np.sqrt(3.0)
_SQRT5 = np.sqrt(5.0)


def pairwise_dist(A, B):
    A = np.ascontiguousarray(A, dtype=np.float64)
    B = np.ascontiguousarray(B, dtype=np.float64)
    diff = A[:, None, :] - B[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def kernel_matrix(A, B, length_scales, family, signal_variance):
    ls = np.asarray(length_scales, dtype=np.float64)
    r = pairwise_dist(np.asarray(A, float) / ls, np.asarray(B, float) / ls)
    if family == RBF:
        K = np.exp(-0.5 * r * r)
    elif family == MATERN32:
        K = (1.0 + _SQRT3 * r) * np.exp(-_SQRT3 * r)
    elif family == MATERN52:
        K = (1.0 + _SQRT5 * r + (5.0 / 3.0) * r * r) * np.exp(-_SQRT5 * r)
    else:
        raise ValueError(f"unknown kernel family code {family}")
    return signal_variance * K


def kendall_tau_b(x, y):
    """Tie-corrected Kendall rank correlation by explicit pair counting."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        return 0.0
    iu = np.triu_indices(n, k=1)
    sx = np.sign(x[:, None] - x[None, :])[iu]
    sy = np.sign(y[:, None] - y[None, :])[iu]
    s = float(np.sum(sx * sy))
    nx = float(np.count_nonzero(sx))
    ny = float(np.count_nonzero(sy))
    if nx == 0.0 or ny == 0.0:
        return 0.0
    return s / np.sqrt(nx * ny)


def nondominated_mask(F):
    """Mask of rows not dominated by any other row (all columns maximized)."""
    F = np.asarray(F, dtype=np.float64)
    m = F.shape[0]
    mask = np.ones(m, dtype=bool)
    for i in range(m):
        ge = np.all(F >= F[i], axis=1)
        gt = np.any(F > F[i], axis=1)
        if np.any(ge & gt):
            mask[i] = False
    return mask


def min_dist_update(X, p, mind):
    d = np.sqrt(np.sum((np.asarray(X, float) - np.asarray(p, float)) ** 2, axis=1))
    np.minimum(mind, d, out=mind)
    return mind
