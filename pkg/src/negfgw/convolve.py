"""Energy-axis convolutions, entry-major spectra, and causality
reconstruction.

All spectral quantities share one uniform energy grid, so the integral
B(E) ~ int dE' X1(E-E') X2(E') becomes an index-space linear convolution
(or correlation, for the polarization's X2(E'-E) form) scaled by the grid
spacing.  The FFT path zero-pads to at least 2*N_E-1 samples, so it equals
the direct O(N_E^2) sum to roundoff; the direct sum stays available as the
oracle.

Entry-major layout: a quantity is a (n_entries, n_e) array whose rows are
the per-matrix-entry energy series, enumerated by an EntryPattern.  For
lesser/greater quantities the pattern keeps only global upper entries
(row <= col); the lower ones are implied by X[col, row] = -conj(X[row, col])
and reconstructed on demand, which halves the communication volume when
these arrays move between workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.fft import fft, ifft, next_fast_len

from . import flops
from .blocks import BlockMatrix, FULL, LG_COMPRESSED
from .device import EnergyGrid

Array = np.ndarray

MODE_CONVOLUTION = "convolution"
MODE_CORRELATION = "correlation"


# -- core transforms -------------------------------------------------------


def convolve_energy(
    x1: Array,
    x2: Array,
    mode: str,
    prefactor: complex,
    de: float,
) -> Array:
    """Linear convolution or correlation along the last axis via FFT.

    convolution:  out[k] = prefactor * de * sum_m x1[k-m] x2[m]
    correlation:  out[k] = prefactor * de * sum_m x1[m] x2[m-k]

    with out-of-range indices treated as zero (spectra vanish outside the
    window).  Output has the input length.
    """
    x1 = np.asarray(x1, dtype=complex)
    x2 = np.asarray(x2, dtype=complex)
    if x1.shape != x2.shape:
        raise ValueError(f"shape mismatch {x1.shape} vs {x2.shape}")
    n = x1.shape[-1]
    if mode == MODE_CORRELATION:
        x2 = x2[..., ::-1]
    elif mode != MODE_CONVOLUTION:
        raise ValueError(f"unknown mode {mode!r}")
    m = next_fast_len(2 * n - 1)
    batch = int(np.prod(x1.shape[:-1], dtype=int)) if x1.ndim > 1 else 1
    flops.add_fft(m, batch=3 * batch)
    full = ifft(fft(x1, n=m) * fft(x2, n=m), n=m)
    if mode == MODE_CORRELATION:
        out = full[..., n - 1 : 2 * n - 1]
    else:
        out = full[..., :n]
    return prefactor * de * out


def convolve_energy_direct(
    x1: Array,
    x2: Array,
    mode: str,
    prefactor: complex,
    de: float,
) -> Array:
    """O(N_E^2) reference sum with explicit index bookkeeping; the oracle
    the FFT path is validated against."""
    x1 = np.asarray(x1, dtype=complex)
    x2 = np.asarray(x2, dtype=complex)
    n = x1.shape[-1]
    out = np.zeros_like(x1)
    for k in range(n):
        if mode == MODE_CONVOLUTION:
            m_lo, m_hi = max(0, k - n + 1), k + 1
            for m_idx in range(m_lo, m_hi):
                out[..., k] += x1[..., k - m_idx] * x2[..., m_idx]
        elif mode == MODE_CORRELATION:
            m_lo, m_hi = k, n
            for m_idx in range(m_lo, m_hi):
                out[..., k] += x1[..., m_idx] * x2[..., m_idx - k]
        else:
            raise ValueError(f"unknown mode {mode!r}")
    return prefactor * de * out


def retarded_from_lg(x_lesser: Array, x_greater: Array) -> Array:
    """Causal (retarded) component from the lesser/greater pair.

    The difference d = X^> - X^< is transformed, weighted by the
    discrete step function (half weight at the symmetric bins), and
    transformed back:

        r = ifft(theta * fft(d)),  theta = [0.5, 1, .., 1, 0.5, 0, .., 0]

    Because theta[m] + theta[(M-m) % M] = 1 for every bin, the identity
    X^> - X^< = X^R - X^R_dag holds exactly entrywise for symmetric
    lesser/greater inputs, independent of padding.
    """
    x_lesser = np.asarray(x_lesser, dtype=complex)
    x_greater = np.asarray(x_greater, dtype=complex)
    if x_lesser.shape != x_greater.shape:
        raise ValueError(f"shape mismatch {x_lesser.shape} vs {x_greater.shape}")
    n = x_lesser.shape[-1]
    m = next_fast_len(2 * n)
    if m % 2 == 1:
        m = next_fast_len(m + 1)
    d = x_greater - x_lesser
    theta = np.zeros(m)
    theta[0] = 0.5
    theta[m // 2] = 0.5
    theta[1 : m // 2] = 1.0
    batch = int(np.prod(d.shape[:-1], dtype=int)) if d.ndim > 1 else 1
    flops.add_fft(m, batch=2 * batch)
    return ifft(theta * fft(d, n=m), n=m)[..., :n]


# -- entry-major layout ----------------------------------------------------


@dataclass(frozen=True)
class EntryPattern:
    """Enumeration of the stored matrix entries of a block-banded quantity.

    With ``compressed`` set, only global upper entries are kept: the full
    upper triangle of diagonal blocks and every entry of upper off-diagonal
    blocks.  All stored entries then satisfy row <= col, and the implied
    lower entries follow from the lesser/greater symmetry.
    """

    n_blocks: int
    block_size: int
    block_bandwidth: int
    compressed: bool
    rows: Array = field(repr=False, default=None)  # type: ignore[assignment]
    cols: Array = field(repr=False, default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.rows is not None:
            return
        h = (self.block_bandwidth - 1) // 2
        bs = self.block_size
        rows, cols = [], []
        for bi in range(self.n_blocks):
            for bj in range(max(0, bi - h), min(self.n_blocks, bi + h + 1)):
                if self.compressed and bj < bi:
                    continue
                for r in range(bs):
                    for c in range(bs):
                        if self.compressed and bi == bj and c < r:
                            continue
                        rows.append(bi * bs + r)
                        cols.append(bj * bs + c)
        object.__setattr__(self, "rows", np.asarray(rows, dtype=np.intp))
        object.__setattr__(self, "cols", np.asarray(cols, dtype=np.intp))

    @property
    def n_entries(self) -> int:
        return len(self.rows)

    def full_entry_count(self) -> int:
        """In-band entry count of the uncompressed pattern."""
        h = (self.block_bandwidth - 1) // 2
        n_off = sum(
            1
            for bi in range(self.n_blocks)
            for bj in range(max(0, bi - h), min(self.n_blocks, bi + h + 1))
            if bi != bj
        )
        return (self.n_blocks + n_off) * self.block_size**2

    def index_map(self) -> dict[tuple[int, int], int]:
        return {(int(r), int(c)): k for k, (r, c) in enumerate(zip(self.rows, self.cols))}


@dataclass
class EntrySpectra:
    """Per-entry energy series of one quantity: data[k] is the series of
    pattern entry k over the full grid."""

    pattern: EntryPattern
    grid: EnergyGrid
    data: Array
    lg_symmetric: bool = True

    @classmethod
    def zeros(cls, pattern: EntryPattern, grid: EnergyGrid, lg_symmetric: bool = True) -> "EntrySpectra":
        return cls(pattern, grid, np.zeros((pattern.n_entries, grid.n_e), dtype=complex), lg_symmetric)

    @classmethod
    def from_block_matrices(
        cls,
        mats: list[BlockMatrix],
        pattern: EntryPattern,
        grid: EnergyGrid,
        lg_symmetric: bool = True,
    ) -> "EntrySpectra":
        if len(mats) != grid.n_e:
            raise ValueError(f"{len(mats)} matrices for {grid.n_e} energies")
        out = cls.zeros(pattern, grid, lg_symmetric)
        bs = pattern.block_size
        idx = 0
        h = (pattern.block_bandwidth - 1) // 2
        for bi in range(pattern.n_blocks):
            for bj in range(max(0, bi - h), min(pattern.n_blocks, bi + h + 1)):
                if pattern.compressed and bj < bi:
                    continue
                sel = _block_entry_slice(pattern, bi, bj)
                for e, mat in enumerate(mats):
                    blk = mat.get_block(bi, bj)
                    if pattern.compressed and bi == bj:
                        r, c = np.triu_indices(bs)
                        out.data[idx : idx + len(r), e] = blk[r, c]
                    else:
                        out.data[idx : idx + bs * bs, e] = blk.ravel()
                idx += sel
        return out

    def to_block_matrix(self, e_index: int, storage_mode: str | None = None) -> BlockMatrix:
        p = self.pattern
        if p.compressed and not self.lg_symmetric:
            raise ValueError("compressed pattern without the mirror rule cannot be expanded")
        if storage_mode is None:
            storage_mode = LG_COMPRESSED if p.compressed else FULL
        out = BlockMatrix(p.n_blocks, p.block_size, p.block_bandwidth, storage_mode)
        bs = p.block_size
        h = (p.block_bandwidth - 1) // 2
        idx = 0
        for bi in range(p.n_blocks):
            for bj in range(max(0, bi - h), min(p.n_blocks, bi + h + 1)):
                if p.compressed and bj < bi:
                    continue
                if p.compressed and bi == bj:
                    r, c = np.triu_indices(bs)
                    blk = np.zeros((bs, bs), dtype=complex)
                    blk[r, c] = self.data[idx : idx + len(r), e_index]
                    low = -np.conj(blk.T)
                    il, jl = np.tril_indices(bs, -1)
                    blk[il, jl] = low[il, jl]
                    idx += len(r)
                else:
                    blk = self.data[idx : idx + bs * bs, e_index].reshape(bs, bs)
                    idx += bs * bs
                if storage_mode == FULL or bj >= bi:
                    out.set_block(bi, bj, blk)
                if storage_mode == FULL and bj > bi and p.compressed:
                    out.set_block(bj, bi, -blk.conj().T)
        return out

    def uncompressed(self) -> "EntrySpectra":
        """Expand onto the uncompressed pattern, filling the implied lower
        entries via the mirror rule."""
        p = self.pattern
        if not p.compressed:
            return self.copy()
        if not self.lg_symmetric:
            raise ValueError("compressed pattern without the mirror rule cannot be expanded")
        full = EntryPattern(p.n_blocks, p.block_size, p.block_bandwidth, compressed=False)
        src_map = p.index_map()
        data = np.empty((full.n_entries, self.grid.n_e), dtype=complex)
        for k, (r, c) in enumerate(zip(full.rows, full.cols)):
            pos = src_map.get((int(r), int(c)))
            if pos is not None:
                data[k] = self.data[pos]
            else:
                data[k] = -np.conj(self.data[src_map[(int(c), int(r))]])
        return EntrySpectra(full, self.grid, data, lg_symmetric=True)

    def mirrored_data(self) -> Array:
        """Series of the transposed entries: entry (row, col) -> (col, row),
        valid for compressed lesser/greater quantities."""
        if not self.lg_symmetric:
            raise ValueError("mirror rule requires a lesser/greater quantity")
        return -np.conj(self.data)

    def n_bytes(self) -> int:
        return int(self.data.size) * 16

    def copy(self) -> "EntrySpectra":
        return EntrySpectra(self.pattern, self.grid, self.data.copy(), self.lg_symmetric)


def _block_entry_slice(pattern: EntryPattern, bi: int, bj: int) -> int:
    bs = pattern.block_size
    if pattern.compressed and bi == bj:
        return bs * (bs + 1) // 2
    return bs * bs


def align_entries(source: EntrySpectra, target_pattern: EntryPattern) -> Array:
    """Gather the source series at the target pattern's (row, col) entries.

    Entries outside the source band read as zero.  Both patterns index the
    same global orbital space; stored entries of compressed patterns all
    satisfy row <= col, so no mirroring is needed on either side.
    """
    src_map = source.pattern.index_map()
    out = np.zeros((target_pattern.n_entries, source.grid.n_e), dtype=complex)
    for k, (r, c) in enumerate(zip(target_pattern.rows, target_pattern.cols)):
        pos = src_map.get((int(r), int(c)))
        if pos is not None:
            out[k] = source.data[pos]
    return out


# -- physics convolutions --------------------------------------------------


def compute_polarization(
    g_lesser: EntrySpectra,
    g_greater: EntrySpectra,
    prefactor: complex,
) -> tuple[EntrySpectra, EntrySpectra, EntrySpectra]:
    """Polarization from the electron pair bubble, entry by entry:

        P^<[row,col](E) = c sum_{E'} G^<[row,col](E') G^>[col,row](E'-E) dE
        P^>[row,col](E) = c sum_{E'} G^>[row,col](E') G^<[col,row](E'-E) dE

    The transposed series come from the mirror rule of the compressed
    storage; with a purely imaginary prefactor the outputs satisfy the
    lesser/greater symmetry exactly, and the retarded component follows
    from the causality reconstruction.
    """
    de = g_lesser.grid.de
    p_lesser = g_lesser.copy()
    p_greater = g_lesser.copy()
    p_lesser.data = convolve_energy(
        g_lesser.data, g_greater.mirrored_data(), MODE_CORRELATION, prefactor, de
    )
    p_greater.data = convolve_energy(
        g_greater.data, g_lesser.mirrored_data(), MODE_CORRELATION, prefactor, de
    )
    _project_diag_entries(p_lesser)
    _project_diag_entries(p_greater)
    p_retarded = _retarded_spectra(p_lesser, p_greater)
    return p_lesser, p_greater, p_retarded


def compute_sigma(
    g_lesser: EntrySpectra,
    g_greater: EntrySpectra,
    w_lesser: EntrySpectra,
    w_greater: EntrySpectra,
    prefactor: complex,
) -> tuple[EntrySpectra, EntrySpectra, EntrySpectra]:
    """Scattering self-energy, entry by entry on the electron pattern:

        S^<[row,col](E) = c sum_{E'} G^<[row,col](E-E') W^<[row,col](E') dE

    and likewise for the greater kind.  The interaction entries are
    gathered onto the electron pattern (its band nests inside the
    interaction band).
    """
    de = g_lesser.grid.de
    w_l = align_entries(w_lesser, g_lesser.pattern)
    w_g = align_entries(w_greater, g_lesser.pattern)
    s_lesser = g_lesser.copy()
    s_greater = g_lesser.copy()
    s_lesser.data = convolve_energy(g_lesser.data, w_l, MODE_CONVOLUTION, prefactor, de)
    s_greater.data = convolve_energy(g_greater.data, w_g, MODE_CONVOLUTION, prefactor, de)
    _project_diag_entries(s_lesser)
    _project_diag_entries(s_greater)
    s_retarded = _retarded_spectra(s_lesser, s_greater)
    return s_lesser, s_greater, s_retarded


def _retarded_spectra(lesser: EntrySpectra, greater: EntrySpectra) -> EntrySpectra:
    """Causal component on the uncompressed pattern; the lower entries need
    their own reconstruction because the mirror rule does not carry over to
    the retarded kind."""
    l_full = lesser.uncompressed()
    g_full = greater.uncompressed()
    out = EntrySpectra(
        l_full.pattern,
        lesser.grid,
        retarded_from_lg(l_full.data, g_full.data),
        lg_symmetric=False,
    )
    return out


def _project_diag_entries(spectra: EntrySpectra) -> None:
    """Project row == col entries onto their anti-Hermitian (imaginary)
    part; idempotent guard for the scalar diagonal symmetry."""
    mask = spectra.pattern.rows == spectra.pattern.cols
    d = spectra.data[mask]
    spectra.data[mask] = 0.5 * (d - np.conj(d))
