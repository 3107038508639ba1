"""Block-banded complex matrices with dense square blocks.

This is the shared container for every matrix-valued quantity in the
pipeline: system matrices, self-energies, polarizations and interaction
kernels are all block matrices with a small odd block bandwidth.  Two
storage modes exist:

``full``
    every in-band block may be stored.

``lg_compressed``
    only blocks with ``j >= i`` are stored.  The lower triangle is implied
    by the lesser/greater symmetry ``X[j, i] = -X[i, j].conj().T`` and is
    reconstructed on access.  Writing below the diagonal is rejected.

Missing in-band blocks read back as exact zero blocks, so sparse-banded
patterns need no placeholder storage.
"""

from __future__ import annotations

import numpy as np

from . import flops
from .errors import BlockStructureError

Array = np.ndarray

FULL = "full"
LG_COMPRESSED = "lg_compressed"
_MODES = (FULL, LG_COMPRESSED)


class BlockMatrix:
    """Square block matrix with ``n_blocks`` rows/columns of dense
    ``block_size`` x ``block_size`` complex blocks inside an odd block
    bandwidth.

    Parameters
    ----------
    n_blocks : int
        Number of block rows (= block columns).
    block_size : int
        Edge length of each dense block.
    block_bandwidth : int
        Odd count of populated block diagonals; 3 means tridiagonal.
    storage_mode : str
        ``"full"`` or ``"lg_compressed"``.
    """

    __slots__ = ("n_blocks", "block_size", "block_bandwidth", "storage_mode", "_blocks")

    def __init__(
        self,
        n_blocks: int,
        block_size: int,
        block_bandwidth: int = 3,
        storage_mode: str = FULL,
    ) -> None:
        if n_blocks < 1 or block_size < 1:
            raise BlockStructureError(
                f"need n_blocks >= 1 and block_size >= 1, got {n_blocks}, {block_size}"
            )
        if block_bandwidth < 1 or block_bandwidth % 2 == 0:
            raise BlockStructureError(
                f"block bandwidth must be odd and positive, got {block_bandwidth}"
            )
        if block_bandwidth > 2 * n_blocks - 1:
            raise BlockStructureError(
                f"bandwidth {block_bandwidth} exceeds 2*n_blocks-1 = {2 * n_blocks - 1}"
            )
        if storage_mode not in _MODES:
            raise BlockStructureError(f"unknown storage mode {storage_mode!r}")
        self.n_blocks = n_blocks
        self.block_size = block_size
        self.block_bandwidth = block_bandwidth
        self.storage_mode = storage_mode
        self._blocks: dict[tuple[int, int], Array] = {}

    # -- structure helpers -------------------------------------------------

    @property
    def half_bandwidth(self) -> int:
        return (self.block_bandwidth - 1) // 2

    @property
    def shape(self) -> tuple[int, int]:
        n = self.n_blocks * self.block_size
        return (n, n)

    def in_band(self, i: int, j: int) -> bool:
        return (
            0 <= i < self.n_blocks
            and 0 <= j < self.n_blocks
            and abs(i - j) <= self.half_bandwidth
        )

    def _check_band(self, i: int, j: int) -> None:
        if not self.in_band(i, j):
            raise BlockStructureError(
                f"block ({i}, {j}) outside band of width {self.block_bandwidth} "
                f"with {self.n_blocks} block rows"
            )

    def stored_keys(self) -> list[tuple[int, int]]:
        return sorted(self._blocks.keys())

    # -- element access ----------------------------------------------------

    def get_block(self, i: int, j: int) -> Array:
        """Return block (i, j), reconstructing implied lower blocks in
        compressed mode.  In-band blocks never written read as zeros."""
        self._check_band(i, j)
        if self.storage_mode == LG_COMPRESSED and j < i:
            stored = self._blocks.get((j, i))
            if stored is None:
                return self._zero_block()
            return -stored.conj().T
        stored = self._blocks.get((i, j))
        if stored is None:
            return self._zero_block()
        return stored

    def set_block(self, i: int, j: int, value: Array) -> None:
        self._check_band(i, j)
        if self.storage_mode == LG_COMPRESSED and j < i:
            raise BlockStructureError(
                f"write into implied triangle ({i}, {j}) of lg_compressed storage"
            )
        value = np.asarray(value, dtype=complex)
        if value.shape != (self.block_size, self.block_size):
            raise BlockStructureError(
                f"block ({i}, {j}) has shape {value.shape}, expected "
                f"({self.block_size}, {self.block_size})"
            )
        self._blocks[(i, j)] = value

    def add_to_block(self, i: int, j: int, value: Array) -> None:
        self.set_block(i, j, self.get_block(i, j) + value)

    def _zero_block(self) -> Array:
        return np.zeros((self.block_size, self.block_size), dtype=complex)

    # -- constructors ------------------------------------------------------

    @classmethod
    def identity(cls, n_blocks: int, block_size: int) -> "BlockMatrix":
        out = cls(n_blocks, block_size, 1, FULL)
        eye = np.eye(block_size, dtype=complex)
        for i in range(n_blocks):
            out.set_block(i, i, eye.copy())
        return out

    @classmethod
    def from_dense(
        cls,
        dense: Array,
        n_blocks: int,
        block_bandwidth: int | None = None,
        storage_mode: str = FULL,
        drop_tol: float = 0.0,
    ) -> "BlockMatrix":
        """Cut a dense matrix into blocks.

        With ``block_bandwidth=None`` the minimal bandwidth containing all
        nonzero blocks is used.  An explicit bandwidth that would truncate
        blocks with max-norm above ``drop_tol`` raises, so silent structure
        loss is impossible.
        """
        dense = np.asarray(dense, dtype=complex)
        n = dense.shape[0]
        if dense.ndim != 2 or dense.shape[0] != dense.shape[1]:
            raise BlockStructureError(f"dense input must be square, got {dense.shape}")
        if n % n_blocks != 0:
            raise BlockStructureError(
                f"matrix size {n} does not group into {n_blocks} equal blocks"
            )
        bs = n // n_blocks
        occupied = 0
        cut: dict[tuple[int, int], Array] = {}
        for i in range(n_blocks):
            for j in range(n_blocks):
                blk = dense[i * bs : (i + 1) * bs, j * bs : (j + 1) * bs]
                if np.abs(blk).max(initial=0.0) > drop_tol:
                    cut[(i, j)] = blk
                    occupied = max(occupied, abs(i - j))
        if block_bandwidth is None:
            block_bandwidth = 2 * occupied + 1
        elif occupied > (block_bandwidth - 1) // 2:
            raise BlockStructureError(
                f"bandwidth {block_bandwidth} would drop populated block "
                f"diagonal {occupied}"
            )
        out = cls(n_blocks, bs, block_bandwidth, storage_mode)
        for (i, j), blk in cut.items():
            if storage_mode == LG_COMPRESSED and j < i:
                continue
            out.set_block(i, j, blk.copy())
        return out

    # -- conversions -------------------------------------------------------

    def to_dense(self) -> Array:
        n = self.n_blocks * self.block_size
        bs = self.block_size
        dense = np.zeros((n, n), dtype=complex)
        h = self.half_bandwidth
        for i in range(self.n_blocks):
            for j in range(max(0, i - h), min(self.n_blocks, i + h + 1)):
                blk = self.get_block(i, j)
                if blk is not None:
                    dense[i * bs : (i + 1) * bs, j * bs : (j + 1) * bs] = blk
        return dense

    def copy(self) -> "BlockMatrix":
        out = BlockMatrix(
            self.n_blocks, self.block_size, self.block_bandwidth, self.storage_mode
        )
        out._blocks = {k: v.copy() for k, v in self._blocks.items()}
        return out

    def to_full_storage(self) -> "BlockMatrix":
        """Materialize implied lower blocks into ``full`` storage."""
        if self.storage_mode == FULL:
            return self.copy()
        out = BlockMatrix(self.n_blocks, self.block_size, self.block_bandwidth, FULL)
        h = self.half_bandwidth
        for i in range(self.n_blocks):
            for j in range(max(0, i - h), min(self.n_blocks, i + h + 1)):
                out.set_block(i, j, self.get_block(i, j))
        return out

    # -- arithmetic --------------------------------------------------------

    def _binary(self, other: "BlockMatrix", sign: float) -> "BlockMatrix":
        if (self.n_blocks, self.block_size) != (other.n_blocks, other.block_size):
            raise BlockStructureError("block layouts differ in add/sub")
        bw = max(self.block_bandwidth, other.block_bandwidth)
        out = BlockMatrix(self.n_blocks, self.block_size, bw, FULL)
        h = out.half_bandwidth
        for i in range(self.n_blocks):
            for j in range(max(0, i - h), min(self.n_blocks, i + h + 1)):
                a = self.get_block(i, j) if self.in_band(i, j) else 0.0
                b = other.get_block(i, j) if other.in_band(i, j) else 0.0
                blk = a + sign * b
                if np.isscalar(blk):
                    continue
                out.set_block(i, j, blk)
        return out

    def __add__(self, other: "BlockMatrix") -> "BlockMatrix":
        return self._binary(other, 1.0)

    def __sub__(self, other: "BlockMatrix") -> "BlockMatrix":
        return self._binary(other, -1.0)

    def scaled(self, alpha: complex) -> "BlockMatrix":
        out = self.copy()
        for key in out._blocks:
            out._blocks[key] = alpha * out._blocks[key]
        return out

    def conj_transpose(self) -> "BlockMatrix":
        out = BlockMatrix(self.n_blocks, self.block_size, self.block_bandwidth, FULL)
        h = self.half_bandwidth
        for i in range(self.n_blocks):
            for j in range(max(0, i - h), min(self.n_blocks, i + h + 1)):
                out.set_block(j, i, self.get_block(i, j).conj().T)
        return out

    def max_abs(self) -> float:
        return max(
            (float(np.abs(b).max()) for b in self._blocks.values()), default=0.0
        )


def bt_multiply(a: BlockMatrix, b: BlockMatrix) -> BlockMatrix:
    """Banded block product; the result bandwidth grows to
    ``bw_a + bw_b - 1`` (clipped to the full matrix)."""
    if (a.n_blocks, a.block_size) != (b.n_blocks, b.block_size):
        raise BlockStructureError("block layouts differ in bt_multiply")
    n, bs = a.n_blocks, a.block_size
    bw = min(a.block_bandwidth + b.block_bandwidth - 1, 2 * n - 1)
    out = BlockMatrix(n, bs, bw, FULL)
    ha, hb, hc = a.half_bandwidth, b.half_bandwidth, (bw - 1) // 2
    for i in range(n):
        for j in range(max(0, i - hc), min(n, i + hc + 1)):
            acc = None
            for k in range(max(0, i - ha, j - hb), min(n, i + ha + 1, j + hb + 1)):
                ab = a._blocks.get((i, k))
                if ab is None and a.storage_mode == LG_COMPRESSED and k < i:
                    ab = a.get_block(i, k)
                bb = b._blocks.get((k, j))
                if bb is None and b.storage_mode == LG_COMPRESSED and j < k:
                    bb = b.get_block(k, j)
                if ab is None or bb is None:
                    continue
                flops.add_gemm(bs)
                term = ab @ bb
                acc = term if acc is None else acc + term
            if acc is not None:
                out.set_block(i, j, acc)
    return out


def symmetrize_lg(x: BlockMatrix) -> BlockMatrix:
    """Project onto the lesser/greater symmetry
    ``X[i, j] = (X[i, j] - X[j, i].conj().T) / 2``.

    The projection is idempotent.  For compressed storage only the diagonal
    blocks carry independent information and are projected onto their
    anti-Hermitian part.
    """
    out = x.copy()
    if x.storage_mode == LG_COMPRESSED:
        for i in range(x.n_blocks):
            d = x.get_block(i, i)
            out.set_block(i, i, 0.5 * (d - d.conj().T))
        return out
    h = x.half_bandwidth
    for i in range(x.n_blocks):
        for j in range(max(0, i - h), min(x.n_blocks, i + h + 1)):
            if j < i:
                continue
            xij = x.get_block(i, j)
            xji = x.get_block(j, i)
            sym = 0.5 * (xij - xji.conj().T)
            out.set_block(i, j, sym)
            if j > i:
                out.set_block(j, i, -sym.conj().T)
    return out


def truncate_bandwidth(x: BlockMatrix, block_bandwidth: int) -> BlockMatrix:
    """Drop block diagonals beyond the requested odd bandwidth."""
    if block_bandwidth < 1 or block_bandwidth % 2 == 0:
        raise BlockStructureError(f"bandwidth must be odd, got {block_bandwidth}")
    out = BlockMatrix(x.n_blocks, x.block_size, block_bandwidth, x.storage_mode)
    h = out.half_bandwidth
    for (i, j), blk in x._blocks.items():
        if abs(i - j) <= h:
            out.set_block(i, j, blk.copy())
    return out


def reverse_blocks(x: BlockMatrix) -> BlockMatrix:
    """Reverse the block ordering: block (i, j) moves to (n-1-i, n-1-j).

    Used to run forward recursions from the opposite device end without a
    mirrored code path.
    """
    out = BlockMatrix(x.n_blocks, x.block_size, x.block_bandwidth, FULL)
    n = x.n_blocks
    h = x.half_bandwidth
    for i in range(n):
        for j in range(max(0, i - h), min(n, i + h + 1)):
            out.set_block(n - 1 - i, n - 1 - j, x.get_block(i, j))
    return out
