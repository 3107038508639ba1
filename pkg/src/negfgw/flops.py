"""Instrumented floating-point operation counters and the symbolic cost model.

Counters are thread-local so that worker ranks of the in-process
communicator accumulate independent tallies.  Kernel code reports through
the ``add_*`` helpers, which are no-ops unless a :class:`FlopCounter` is
active on the calling thread.

Cost conventions (complex arithmetic, real flops):

* matrix product (n x k) @ (k x m): ``8 n k m``
* LU factorization + explicit inverse of an n x n block: ``INV_UNIT * n**3``
* dense SVD / nonsymmetric eigendecomposition: ``SVD_UNIT * n**3`` and
  ``EIG_UNIT * n**3``.  These are bookkeeping constants, not LAPACK truth;
  the model formulas use the same constants so model-vs-counter
  consistency checks cancel them exactly.
* one complex FFT of length m: ``5 m log2 m``
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager

INV_UNIT = 8.0 / 3.0 + 8.0
SVD_UNIT = 8.0 * 22.0
EIG_UNIT = 8.0 * 25.0

_tls = threading.local()


class FlopCounter:
    """Accumulates real-flop tallies, optionally split by category."""

    def __init__(self) -> None:
        self.total = 0.0
        self.by_category: dict[str, float] = {}
        self._category: str | None = None

    def add(self, flops: float) -> None:
        self.total += flops
        if self._category is not None:
            self.by_category[self._category] = (
                self.by_category.get(self._category, 0.0) + flops
            )

    @contextmanager
    def category(self, name: str):
        """Attribute flops recorded inside the context to ``name``."""
        previous = self._category
        self._category = name
        try:
            yield self
        finally:
            self._category = previous


def _active() -> FlopCounter | None:
    return getattr(_tls, "counter", None)


@contextmanager
def recording(counter: FlopCounter | None = None):
    """Activate a counter on this thread for the duration of the context."""
    if counter is None:
        counter = FlopCounter()
    previous = getattr(_tls, "counter", None)
    _tls.counter = counter
    try:
        yield counter
    finally:
        _tls.counter = previous


def add_gemm(n: int, k: int | None = None, m: int | None = None) -> None:
    counter = _active()
    if counter is not None:
        k = n if k is None else k
        m = n if m is None else m
        counter.add(8.0 * n * k * m)


def add_inv(n: int) -> None:
    counter = _active()
    if counter is not None:
        counter.add(INV_UNIT * n**3)


def add_lu_solve(n: int, nrhs: int) -> None:
    counter = _active()
    if counter is not None:
        counter.add(8.0 / 3.0 * n**3 + 8.0 * n**2 * nrhs)


def add_svd(n: int) -> None:
    counter = _active()
    if counter is not None:
        counter.add(SVD_UNIT * n**3)


def add_eig(n: int) -> None:
    counter = _active()
    if counter is not None:
        counter.add(EIG_UNIT * n**3)


def add_fft(length: int, batch: int = 1) -> None:
    counter = _active()
    if counter is not None and length > 1:
        counter.add(5.0 * length * math.log2(length) * batch)


def gemm_flops(n: int, count: float = 1.0) -> float:
    """Model-side cost of ``count`` products of n x n blocks."""
    return 8.0 * n**3 * count


def inv_flops(n: int, count: float = 1.0) -> float:
    return INV_UNIT * n**3 * count
