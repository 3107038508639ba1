"""Counted dense-block linear algebra primitives.

All hot-path block operations in the solvers go through these wrappers so
the instrumented flop counters in :mod:`negfgw.flops` see every product
and factorization exactly once.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as sla

from . import flops
from .errors import SingularBlockError

Array = np.ndarray


def gemm(a: Array, b: Array) -> Array:
    """Counted matrix product."""
    flops.add_gemm(a.shape[0], a.shape[1], b.shape[1])
    return a @ b


def herm(a: Array) -> Array:
    """Conjugate transpose (flop-free)."""
    return a.conj().T


def invert(a: Array, label: str = "block") -> tuple[Array, float]:
    """LU inverse of a dense block with a cheap conditioning proxy.

    Returns the inverse together with the spread max|diag(U)| / min|diag(U)|
    of the LU factor, which solvers log as a pivot-health indicator.

    Raises
    ------
    SingularBlockError
        If the factorization produces an exactly zero pivot.
    """
    n = a.shape[0]
    try:
        lu, piv = sla.lu_factor(a, check_finite=False)
    except (ValueError, sla.LinAlgError) as exc:  # non-finite input
        raise SingularBlockError(f"LU factorization failed for {label}: {exc}") from exc
    diag = np.abs(np.diag(lu))
    dmin = diag.min()
    if dmin == 0.0 or not np.isfinite(diag).all():
        raise SingularBlockError(f"singular pivot while inverting {label}")
    flops.add_inv(n)
    inv = sla.lu_solve((lu, piv), np.eye(n, dtype=complex), check_finite=False)
    return inv, float(diag.max() / dmin)


def solve(a: Array, b: Array, label: str = "system") -> Array:
    """Counted LU solve a @ x = b."""
    try:
        lu, piv = sla.lu_factor(a, check_finite=False)
    except (ValueError, sla.LinAlgError) as exc:
        raise SingularBlockError(f"LU factorization failed for {label}: {exc}") from exc
    if np.abs(np.diag(lu)).min() == 0.0:
        raise SingularBlockError(f"singular pivot while solving {label}")
    flops.add_lu_solve(a.shape[0], b.shape[1] if b.ndim == 2 else 1)
    return sla.lu_solve((lu, piv), b, check_finite=False)
