"""Device description and the device-to-matrix mapping.

A device is a linear repetition of primitive unit cells (PUCs).  The
electronic structure is given per PUC: the onsite block ``h[0]`` and
coupling blocks ``h[1] .. h[range]`` to the following cells.  The bare
interaction ``v`` uses the same layout.  Grouping ``n_u`` consecutive PUCs
into one transport cell turns the block-banded PUC matrix into a
block-tridiagonal one, which is what the selected solvers consume.  The
electron and screened-interaction subsystems may group differently
(``n_u_g`` vs ``n_u_w``), giving different block sizes over the same
orbital space.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .blocks import FULL, BlockMatrix
from .errors import BlockStructureError

Array = np.ndarray

HERMITICITY_TOL = 1e-10

SUBSYSTEM_G = "G"
SUBSYSTEM_W = "W"


def fermi(e: Array | float, mu: float, kT: float) -> Array | float:
    """Fermi-Dirac occupation 1/(1+exp((e-mu)/kT)), overflow safe."""
    if kT <= 0.0:
        raise ValueError(f"kT must be positive, got {kT}")
    return expit(-(np.asarray(e, dtype=float) - mu) / kT)


@dataclass(frozen=True)
class EnergyGrid:
    """Uniform energy axis shared by all spectral quantities.

    Parameters
    ----------
    e_min, e_max : float
        Window edges in eV.
    n_e : int
        Number of grid points, at least 2.
    eta : float
        Positive imaginary broadening in eV; the sanctioned regularizer
        for all retarded solves.
    """

    e_min: float
    e_max: float
    n_e: int
    eta: float = 1e-3

    def __post_init__(self) -> None:
        if self.n_e < 2:
            raise ValueError(f"n_e must be at least 2, got {self.n_e}")
        if not self.e_max > self.e_min:
            raise ValueError(f"need e_max > e_min, got [{self.e_min}, {self.e_max}]")
        if not self.eta > 0.0:
            raise ValueError(f"eta must be positive, got {self.eta}")

    @property
    def de(self) -> float:
        return (self.e_max - self.e_min) / (self.n_e - 1)

    @property
    def energies(self) -> Array:
        return np.linspace(self.e_min, self.e_max, self.n_e)


@dataclass(frozen=True)
class DeviceSpec:
    """Primitive-cell description of a quasi-1D device.

    Parameters
    ----------
    n_orb_puc : int
        Orbitals per primitive unit cell.
    n_u_g, n_u_w : int
        PUCs grouped into one transport cell for the electron and the
        screened-interaction subsystem respectively.  ``n_u_w`` must be a
        multiple of ``n_u_g`` so the two block grids nest.
    n_b : int
        Transport cells of the electron subsystem (block rows of its
        block-tridiagonal matrix).
    puc_h_blocks : tuple of arrays
        ``(h_0, h_1, .., h_R)``: onsite block and couplings to the R
        following cells; R must not exceed ``n_u_g``.  Couplings to
        preceding cells are the conjugate transposes.
    puc_v_blocks : tuple of arrays
        Same layout for the bare interaction; range bounded by ``n_u_w``.
    orbital_positions : array, shape (n_orb_puc, 3)
        Orbital centers within one PUC, in Angstrom.
    cell_length : float
        PUC repeat length along the transport axis, in Angstrom.
    r_cut : float
        Interaction cutoff radius in Angstrom.
    """

    n_orb_puc: int
    n_u_g: int
    n_u_w: int
    n_b: int
    puc_h_blocks: tuple[Array, ...]
    puc_v_blocks: tuple[Array, ...]
    orbital_positions: Array = field(repr=False, default=None)  # type: ignore[assignment]
    cell_length: float = 1.0
    r_cut: float = np.inf

    def __post_init__(self) -> None:
        if self.n_orb_puc < 1:
            raise ValueError(f"n_orb_puc must be positive, got {self.n_orb_puc}")
        if self.n_u_g < 1 or self.n_u_w < 1:
            raise ValueError(
                f"grouping counts must be positive, got {self.n_u_g}, {self.n_u_w}"
            )
        if self.n_b < 2:
            raise ValueError(f"need at least 2 transport cells, got {self.n_b}")
        if self.n_u_w % self.n_u_g != 0:
            raise ValueError(
                f"n_u_w={self.n_u_w} must be a multiple of n_u_g={self.n_u_g} "
                "so the block grids nest"
            )
        if (self.n_b * self.n_u_g) % self.n_u_w != 0:
            raise ValueError(
                f"{self.n_b * self.n_u_g} primitive cells do not group into "
                f"transport cells of {self.n_u_w}"
            )
        if self.n_b * self.n_u_g // self.n_u_w < 2:
            raise ValueError("interaction subsystem needs at least 2 transport cells")
        for name, blocks, reach in (
            ("puc_h_blocks", self.puc_h_blocks, self.n_u_g),
            ("puc_v_blocks", self.puc_v_blocks, self.n_u_w),
        ):
            if len(blocks) < 1:
                raise ValueError(f"{name} needs at least the onsite block")
            if len(blocks) - 1 > reach:
                raise ValueError(
                    f"{name} couples {len(blocks) - 1} cells ahead, beyond the "
                    f"grouping of {reach}; the grouped matrix would not be "
                    "block tridiagonal"
                )
            for k, blk in enumerate(blocks):
                if np.asarray(blk).shape != (self.n_orb_puc, self.n_orb_puc):
                    raise ValueError(
                        f"{name}[{k}] has shape {np.asarray(blk).shape}, expected "
                        f"({self.n_orb_puc}, {self.n_orb_puc})"
                    )
        for name, blocks in (("h", self.puc_h_blocks), ("v", self.puc_v_blocks)):
            onsite = np.asarray(blocks[0])
            defect = np.abs(onsite - onsite.conj().T).max()
            scale = max(np.abs(onsite).max(), 1.0)
            if defect > HERMITICITY_TOL * scale:
                raise ValueError(
                    f"onsite {name} block is not Hermitian "
                    f"(defect {defect:.3e}, tolerance {HERMITICITY_TOL:.0e})"
                )
        pos = np.asarray(self.orbital_positions, dtype=float)
        if pos.shape != (self.n_orb_puc, 3):
            raise ValueError(
                f"orbital_positions shape {pos.shape}, expected ({self.n_orb_puc}, 3)"
            )
        object.__setattr__(self, "orbital_positions", pos)
        if not self.cell_length > 0.0:
            raise ValueError(f"cell_length must be positive, got {self.cell_length}")
        if not self.r_cut > 0.0:
            raise ValueError(f"r_cut must be positive, got {self.r_cut}")

    # -- derived sizes -------------------------------------------------------

    @property
    def n_cells(self) -> int:
        """Total primitive cells in the device."""
        return self.n_b * self.n_u_g

    @property
    def n_ao(self) -> int:
        """Total orbital count."""
        return self.n_cells * self.n_orb_puc

    def n_u(self, subsystem: str) -> int:
        if subsystem == SUBSYSTEM_G:
            return self.n_u_g
        if subsystem == SUBSYSTEM_W:
            return self.n_u_w
        raise ValueError(f"unknown subsystem {subsystem!r}")

    def block_size(self, subsystem: str) -> int:
        return self.n_orb_puc * self.n_u(subsystem)

    def n_blocks(self, subsystem: str) -> int:
        return self.n_ao // self.block_size(subsystem)

    # -- geometry ------------------------------------------------------------

    def positions(self) -> Array:
        """All orbital centers: PUC positions translated cell by cell."""
        shift = np.zeros(3)
        out = np.empty((self.n_ao, 3))
        for c in range(self.n_cells):
            shift[0] = c * self.cell_length
            out[c * self.n_orb_puc : (c + 1) * self.n_orb_puc] = (
                self.orbital_positions + shift
            )
        return out


def _puc_block(blocks: tuple[Array, ...], offset: int, n_orb: int) -> Array | None:
    """PUC-level block at cell offset; negative offsets use Hermitian
    counterparts, out-of-range offsets are structural zeros."""
    reach = len(blocks) - 1
    if 0 <= offset <= reach:
        return np.asarray(blocks[offset], dtype=complex)
    if -reach <= offset < 0:
        return np.asarray(blocks[-offset], dtype=complex).conj().T
    return None


def assemble_from_puc(spec: DeviceSpec, which: str, subsystem: str) -> BlockMatrix:
    """Tile primitive blocks into the subsystem's block-tridiagonal matrix.

    Parameters
    ----------
    which : {"hamiltonian", "coulomb"}
        Selects ``puc_h_blocks`` or ``puc_v_blocks``.
    subsystem : {"G", "W"}
        Selects the grouping, hence the transport-cell block size.

    Returns
    -------
    BlockMatrix
        Block tridiagonal; its dense expansion equals the band matrix
        obtained by tiling the primitive blocks directly.
    """
    if which == "hamiltonian":
        blocks = spec.puc_h_blocks
    elif which == "coulomb":
        blocks = spec.puc_v_blocks
    else:
        raise ValueError(f"unknown matrix kind {which!r}")
    n_u = spec.n_u(subsystem)
    bs = spec.block_size(subsystem)
    nb = spec.n_blocks(subsystem)
    if nb * bs != spec.n_ao:
        raise BlockStructureError(
            f"{spec.n_ao} orbitals do not group into blocks of {bs}"
        )
    reach = len(blocks) - 1
    if reach > n_u:
        raise BlockStructureError(
            f"primitive coupling range {reach} exceeds grouping {n_u} "
            f"for subsystem {subsystem}"
        )
    no = spec.n_orb_puc
    out = BlockMatrix(nb, bs, 3, FULL)
    for bi in range(nb):
        for bj in range(max(0, bi - 1), min(nb, bi + 2)):
            cell = np.zeros((bs, bs), dtype=complex)
            filled = False
            for a in range(n_u):
                for b in range(n_u):
                    off = (bj * n_u + b) - (bi * n_u + a)
                    blk = _puc_block(blocks, off, no)
                    if blk is None:
                        continue
                    cell[a * no : (a + 1) * no, b * no : (b + 1) * no] = blk
                    filled = True
            if filled:
                out.set_block(bi, bj, cell)
    return out


def apply_rcut(
    matrix: Array | BlockMatrix,
    positions: Array,
    r_cut: float,
    n_blocks: int | None = None,
) -> BlockMatrix:
    """Zero all entries between orbitals farther apart than ``r_cut``.

    The result's block bandwidth is the minimal one holding the surviving
    pattern.  Works on a dense matrix or a BlockMatrix; for a dense input
    the target block count must be given.
    """
    if not r_cut > 0.0:
        raise ValueError(f"r_cut must be positive, got {r_cut}")
    if isinstance(matrix, BlockMatrix):
        dense = matrix.to_dense()
        n_blocks = matrix.n_blocks
    else:
        dense = np.asarray(matrix, dtype=complex).copy()
        if n_blocks is None:
            raise ValueError("n_blocks required for dense input")
    positions = np.asarray(positions, dtype=float)
    if positions.shape != (dense.shape[0], 3):
        raise ValueError(
            f"positions shape {positions.shape} does not cover {dense.shape[0]} orbitals"
        )
    diff = positions[:, None, :] - positions[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=2))
    dense = np.where(dist <= r_cut, dense, 0.0)
    return BlockMatrix.from_dense(dense, n_blocks)
