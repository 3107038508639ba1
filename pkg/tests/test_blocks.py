"""Block-banded storage, the mirror-rule compression, and banded products."""

import numpy as np
import pytest

from negfgw import (
    FULL,
    LG_COMPRESSED,
    BlockMatrix,
    bt_multiply,
    reverse_blocks,
    symmetrize_lg,
    truncate_bandwidth,
)
from negfgw.errors import BlockStructureError


def _random_banded(rng, n, bs, bw, mode=FULL):
    out = BlockMatrix(n, bs, bw, mode)
    h = out.half_bandwidth
    for i in range(n):
        for j in range(max(0, i - h), min(n, i + h + 1)):
            if mode == LG_COMPRESSED and j < i:
                continue
            blk = rng.uniform(-1, 1, (bs, bs)) + 1j * rng.uniform(-1, 1, (bs, bs))
            if mode == LG_COMPRESSED and i == j:
                blk = 0.5 * (blk - blk.conj().T)
            out.set_block(i, j, blk)
    return out


def test_structure_validation():
    with pytest.raises(BlockStructureError):
        BlockMatrix(0, 2)
    with pytest.raises(BlockStructureError):
        BlockMatrix(3, 2, block_bandwidth=2)
    with pytest.raises(BlockStructureError):
        BlockMatrix(3, 2, block_bandwidth=7)
    with pytest.raises(BlockStructureError):
        BlockMatrix(3, 2, storage_mode="sparse")
    m = BlockMatrix(3, 2)
    with pytest.raises(BlockStructureError):
        m.set_block(0, 2, np.zeros((2, 2)))
    with pytest.raises(BlockStructureError):
        m.set_block(0, 1, np.zeros((3, 3)))


def test_unset_blocks_read_as_zero():
    m = BlockMatrix(3, 2)
    assert np.all(m.get_block(1, 2) == 0)
    assert m.stored_keys() == []


def test_compressed_storage_reconstructs_exactly():
    rng = np.random.default_rng(1)
    x = _random_banded(rng, 5, 3, 3, mode=LG_COMPRESSED)
    # only diagonal and upper off-diagonal blocks are stored
    assert all(j >= i for i, j in x.stored_keys())
    assert len(x.stored_keys()) == 5 + 4
    full = x.to_full_storage()
    for i, j in full.stored_keys():
        if j < i:
            np.testing.assert_array_equal(
                full.get_block(i, j), -x.get_block(j, i).conj().T
            )
    # zero reconstruction error against the dense expansion
    dense = x.to_dense()
    np.testing.assert_array_equal(full.to_dense(), dense)


def test_compressed_write_into_implied_triangle_rejected():
    x = BlockMatrix(3, 2, 3, LG_COMPRESSED)
    with pytest.raises(BlockStructureError):
        x.set_block(1, 0, np.zeros((2, 2)))


def test_bt_multiply_matches_dense():
    rng = np.random.default_rng(2)
    for bw_a, bw_b in ((3, 3), (3, 5), (5, 3), (1, 3)):
        a = _random_banded(rng, 6, 3, bw_a)
        b = _random_banded(rng, 6, 3, bw_b)
        prod = bt_multiply(a, b)
        assert prod.block_bandwidth == min(bw_a + bw_b - 1, 2 * 6 - 1)
        ref = a.to_dense() @ b.to_dense()
        err = np.linalg.norm(prod.to_dense() - ref) / np.linalg.norm(ref)
        assert err <= 1e-12


def test_bandwidth_growth_chain():
    # bw3 x bw3 -> bw5; (bw5) x bw3 -> bw7
    rng = np.random.default_rng(3)
    v = _random_banded(rng, 6, 2, 3)
    p = _random_banded(rng, 6, 2, 3)
    vp = bt_multiply(v, p)
    assert vp.block_bandwidth == 5
    vpv = bt_multiply(vp, v)
    assert vpv.block_bandwidth == 7
    ref = v.to_dense() @ p.to_dense() @ v.to_dense()
    assert np.linalg.norm(vpv.to_dense() - ref) <= 1e-12 * np.linalg.norm(ref)


def test_truncate_bandwidth_keeps_inner_band():
    rng = np.random.default_rng(4)
    x = _random_banded(rng, 6, 2, 5)
    t = truncate_bandwidth(x, 3)
    assert t.block_bandwidth == 3
    for i, j in t.stored_keys():
        np.testing.assert_array_equal(t.get_block(i, j), x.get_block(i, j))
    dense = t.to_dense()
    # outer diagonals are dropped
    assert np.all(dense[:2, 4:6] == 0)


def test_symmetrize_lg_is_projection():
    rng = np.random.default_rng(5)
    x = _random_banded(rng, 5, 3, 3)
    s = symmetrize_lg(x)
    dense = s.to_dense()
    # anti-Hermitian after projection, and applying it twice changes nothing
    assert np.abs(dense + dense.conj().T).max() <= 1e-14
    s2 = symmetrize_lg(s)
    assert (s2 - s).max_abs() <= 1e-15


def test_reverse_blocks_is_involution():
    rng = np.random.default_rng(6)
    x = _random_banded(rng, 5, 2, 3)
    r = reverse_blocks(x)
    n = x.n_blocks
    for i, j in x.stored_keys():
        np.testing.assert_array_equal(
            r.get_block(n - 1 - i, n - 1 - j), x.get_block(i, j)
        )
    back = reverse_blocks(r)
    assert (back - x).max_abs() == 0.0


def test_single_block_degenerate_case():
    m = BlockMatrix(1, 4, 1)
    blk = np.arange(16, dtype=complex).reshape(4, 4)
    m.set_block(0, 0, blk)
    np.testing.assert_array_equal(m.to_dense(), blk)
    prod = bt_multiply(m, m)
    np.testing.assert_allclose(prod.to_dense(), blk @ blk, rtol=1e-14)


def test_from_dense_round_trip_and_truncation_guard():
    rng = np.random.default_rng(7)
    x = _random_banded(rng, 4, 3, 3)
    dense = x.to_dense()
    cut = BlockMatrix.from_dense(dense, 4)
    assert cut.block_bandwidth == 3
    np.testing.assert_array_equal(cut.to_dense(), dense)
    with pytest.raises(BlockStructureError):
        BlockMatrix.from_dense(dense, 4, block_bandwidth=1)


def test_arithmetic_and_conj_transpose():
    rng = np.random.default_rng(8)
    a = _random_banded(rng, 4, 2, 3)
    b = _random_banded(rng, 4, 2, 3)
    np.testing.assert_allclose(
        (a + b).to_dense(), a.to_dense() + b.to_dense(), atol=1e-15
    )
    np.testing.assert_allclose(
        (a - b).to_dense(), a.to_dense() - b.to_dense(), atol=1e-15
    )
    np.testing.assert_allclose(
        a.conj_transpose().to_dense(), a.to_dense().conj().T, atol=1e-15
    )
    np.testing.assert_allclose(
        a.scaled(2.5j).to_dense(), 2.5j * a.to_dense(), atol=1e-15
    )
