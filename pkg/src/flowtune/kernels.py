"""Kernel dispatch: compiled extension when available, numpy otherwise.

Set ``FLOWTUNE_PURE=1`` before import to force the numpy path.
"""

import os

from . import _pykernels

if os.environ.get("FLOWTUNE_PURE") == "1":
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = _pykernels

BACKEND = "python" if _impl is _pykernels else "cython"

RBF, MATERN32, MATERN52 = 0, 1, 2

pairwise_dist = _impl.pairwise_dist
kernel_matrix = _impl.kernel_matrix
kendall_tau_b = _impl.kendall_tau_b
nondominated_mask = _impl.nondominated_mask
min_dist_update = _impl.min_dist_update

__all__ = [
    "BACKEND",
    "RBF",
    "MATERN32",
    "MATERN52",
    "pairwise_dist",
    "kernel_matrix",
    "kendall_tau_b",
    "nondominated_mask",
    "min_dist_update",
]
