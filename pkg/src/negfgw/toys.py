"""Seeded toy inputs: random solver systems, model devices, and leads.

Every generator takes an integer seed and is deterministic, so test
suites and command-line runs need no external data files.  The random
block-tridiagonal systems are diagonally dominant (hence far from
singular) and their lesser/greater sources satisfy the anti-Hermitian
pairing B_ij = -B_ji^dag that selected solvers assume.
"""

from __future__ import annotations

import numpy as np
from numpy.random import default_rng

from ._linalg import herm
from .blocks import FULL, LG_COMPRESSED, BlockMatrix
from .device import DeviceSpec
from .obc import ContactBlocks

Array = np.ndarray


def _rand_block(rng, n: int, m: int | None = None) -> Array:
    m = n if m is None else m
    return rng.standard_normal((n, m)) + 1j * rng.standard_normal((n, m))


def _rand_hermitian(rng, n: int) -> Array:
    a = _rand_block(rng, n)
    return 0.5 * (a + herm(a))


def random_bt_system(
    seed: int,
    n_blocks: int | None = None,
    block_size: int | None = None,
    max_blocks: int = 10,
    max_block_size: int = 8,
) -> tuple[BlockMatrix, BlockMatrix, BlockMatrix]:
    """Random well-conditioned system (M~, B^<, B^>) for solver tests.

    Sizes not given explicitly are drawn from the seed, bounded by the
    ``max_*`` arguments (lower bounds: 2 blocks, size-1 blocks).
    """
    rng = default_rng(seed)
    n = int(n_blocks or rng.integers(2, max_blocks + 1))
    bs = int(block_size or rng.integers(1, max_block_size + 1))

    m_tilde = BlockMatrix(n, bs, 3, FULL)
    for i in range(n):
        m_tilde.set_block(i, i, _rand_block(rng, bs) + (4.0 + 1.0j) * np.eye(bs))
        if i + 1 < n:
            m_tilde.set_block(i, i + 1, 0.5 * _rand_block(rng, bs))
            m_tilde.set_block(i + 1, i, 0.5 * _rand_block(rng, bs))

    sources = []
    for _ in range(2):
        b = BlockMatrix(n, bs, 3, LG_COMPRESSED)
        for i in range(n):
            d = _rand_block(rng, bs)
            b.set_block(i, i, 0.5 * (d - herm(d)))
            if i + 1 < n:
                b.set_block(i, i + 1, _rand_block(rng, bs))
        sources.append(b)
    return m_tilde, sources[0], sources[1]


def random_lead(
    seed: int,
    block_size: int,
    energy: float = 0.0,
    eta: float = 1e-3,
    coupling: float = 0.5,
) -> ContactBlocks:
    """Random broadening-regularized lead for surface-solver tests.

    The onsite block is Hermitian and the inter-cell coupling is scaled
    by ``coupling`` relative to it, so the surface recursion has decaying
    solutions for any positive ``eta``.
    """
    rng = default_rng(seed)
    h0 = _rand_hermitian(rng, block_size)
    h1 = coupling * _rand_block(rng, block_size)
    z = energy + 1j * eta
    m = z * np.eye(block_size, dtype=complex) - h0
    return ContactBlocks(m, -h1, -herm(h1))


def chain_device(
    n_blocks: int,
    block_size: int,
    t: float = 0.4,
    onsite_seed: int = 7,
    onsite_scale: float = 0.15,
) -> BlockMatrix:
    """Homogeneous chain: one random Hermitian onsite block replicated
    along the device, nearest-neighbour coupling t plus a small seeded
    perturbation."""
    rng = default_rng(onsite_seed)
    diag = onsite_scale * _rand_hermitian(rng, block_size)
    coup = t * np.eye(block_size, dtype=complex) + 0.05 * _rand_block(rng, block_size)
    h = BlockMatrix(n_blocks, block_size, 3, FULL)
    for i in range(n_blocks):
        h.set_block(i, i, diag)
        if i + 1 < n_blocks:
            h.set_block(i, i + 1, coup)
            h.set_block(i + 1, i, herm(coup))
    return h


def coulomb_matrix(
    n_blocks: int,
    block_size: int,
    v0: float = 1e-3,
    seed: int = 11,
) -> BlockMatrix:
    """Real symmetric short-range interaction replicated along the device.

    ``v0`` sets the overall scale; the screening feedback stays
    contractive when v0 times the polarization scale is small against 1.
    """
    rng = default_rng(seed)
    d = rng.standard_normal((block_size, block_size))
    diag = v0 * (np.eye(block_size) + 0.2 * 0.5 * (d + d.T))
    off = v0 * 0.3 * rng.standard_normal((block_size, block_size))
    v = BlockMatrix(n_blocks, block_size, 3, FULL)
    for i in range(n_blocks):
        v.set_block(i, i, diag.astype(complex))
        if i + 1 < n_blocks:
            v.set_block(i, i + 1, off.astype(complex))
            v.set_block(i + 1, i, off.T.astype(complex))
    return v


def random_device(
    seed: int,
    n_orb_puc: int = 2,
    n_u_g: int = 1,
    n_u_w: int = 2,
    n_b: int = 8,
    hopping: float = 0.4,
    onsite_scale: float = 0.15,
    v0: float = 1e-3,
    cell_length: float = 2.5,
) -> DeviceSpec:
    """Seeded random device in primitive-cell form.

    The Hamiltonian couples nearest primitive cells with a dominant
    uniform hopping; the bare interaction is real, symmetric, and decays
    by cell distance within the screening grouping range.
    """
    rng = default_rng(seed)
    h0 = onsite_scale * _rand_hermitian(rng, n_orb_puc)
    h1 = hopping * np.eye(n_orb_puc, dtype=complex)
    h1 += 0.05 * _rand_block(rng, n_orb_puc)

    d = rng.standard_normal((n_orb_puc, n_orb_puc))
    v_blocks = [v0 * (np.eye(n_orb_puc) + 0.2 * 0.5 * (d + d.T)).astype(complex)]
    for k in range(1, n_u_w + 1):
        off = v0 * 0.3 / k * rng.standard_normal((n_orb_puc, n_orb_puc))
        v_blocks.append(off.astype(complex))

    positions = np.zeros((n_orb_puc, 3))
    positions[:, 0] = np.linspace(0.0, cell_length, n_orb_puc, endpoint=False)
    positions[:, 1:] = 0.1 * rng.standard_normal((n_orb_puc, 2))

    return DeviceSpec(
        n_orb_puc=n_orb_puc,
        n_u_g=n_u_g,
        n_u_w=n_u_w,
        n_b=n_b,
        puc_h_blocks=(h0, h1),
        puc_v_blocks=tuple(v_blocks),
        orbital_positions=positions,
        cell_length=cell_length,
    )
