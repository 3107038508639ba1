"""Energy grid, primitive-cell assembly, cutoff pattern, and device files."""

import numpy as np
import pytest

from negfgw import (
    DeviceSpec,
    EnergyGrid,
    apply_rcut,
    assemble_from_puc,
    fermi,
)
from negfgw.deviceio import (
    device_from_wannier,
    load_device,
    load_wannier_hr,
    save_device,
)
from negfgw.errors import DeviceFormatError
from negfgw.toys import random_device


def test_energy_grid_validation_and_spacing():
    grid = EnergyGrid(-1.0, 1.0, 5, eta=1e-3)
    assert grid.de == pytest.approx(0.5)
    diffs = np.diff(grid.energies)
    np.testing.assert_allclose(diffs, grid.de, rtol=1e-14)
    with pytest.raises(ValueError):
        EnergyGrid(-1.0, 1.0, 1)
    with pytest.raises(ValueError):
        EnergyGrid(1.0, -1.0, 4)
    with pytest.raises(ValueError):
        EnergyGrid(-1.0, 1.0, 4, eta=0.0)


def test_fermi_limits_and_midpoint():
    assert fermi(0.0, 0.0, 0.025) == pytest.approx(0.5)
    assert fermi(-10.0, 0.0, 0.025) == pytest.approx(1.0)
    assert fermi(10.0, 0.0, 0.025) == pytest.approx(0.0, abs=1e-12)
    e = np.linspace(-1, 1, 7)
    f = fermi(e, 0.1, 0.05)
    assert np.all(np.diff(f) < 0)


def test_device_spec_validation():
    eye = np.eye(2)
    pos = np.zeros((2, 3))
    ok = dict(
        n_orb_puc=2, n_u_g=1, n_u_w=2, n_b=4,
        puc_h_blocks=(eye, 0.5 * eye), puc_v_blocks=(eye, 0.1 * eye, 0.05 * eye),
        orbital_positions=pos,
    )
    DeviceSpec(**ok)
    with pytest.raises(ValueError):
        DeviceSpec(**{**ok, "n_b": 1})
    with pytest.raises(ValueError):
        DeviceSpec(**{**ok, "n_u_w": 3})
    # coupling range beyond the grouping breaks block tridiagonality
    with pytest.raises(ValueError):
        DeviceSpec(**{**ok, "puc_h_blocks": (eye, 0.5 * eye, 0.2 * eye)})
    # non-Hermitian onsite block rejected
    bad = eye + 1e-6 * np.array([[0, 1], [0, 0]])
    with pytest.raises(ValueError):
        DeviceSpec(**{**ok, "puc_h_blocks": (bad, 0.5 * eye)})


def test_assemble_from_puc_hermitian_and_grouped():
    spec = random_device(seed=3, n_orb_puc=2, n_u_g=2, n_u_w=4, n_b=4)
    h = assemble_from_puc(spec, "hamiltonian", "G")
    assert h.n_blocks == spec.n_blocks("G") == 4
    assert h.block_size == spec.block_size("G") == 4
    dense = h.to_dense()
    defect = np.abs(dense - dense.conj().T).max()
    assert defect <= 1e-15 * max(np.abs(dense).max(), 1.0)
    v = assemble_from_puc(spec, "coulomb", "W")
    assert v.n_blocks == spec.n_blocks("W") == 2
    assert v.block_size == spec.block_size("W") == 8
    # both groupings cover the same orbital space
    assert v.shape == h.shape


def test_grouped_matrix_matches_manual_tiling():
    # 1-orbital chain: grouping two cells gives 2x2 blocks with the hop on
    # the corner of adjacent blocks
    h0 = np.array([[0.3]])
    h1 = np.array([[0.7]])
    spec = DeviceSpec(
        n_orb_puc=1, n_u_g=2, n_u_w=2, n_b=3,
        puc_h_blocks=(h0, h1), puc_v_blocks=(h0,),
        orbital_positions=np.zeros((1, 3)),
    )
    h = assemble_from_puc(spec, "hamiltonian", "G")
    np.testing.assert_allclose(h.get_block(0, 0), [[0.3, 0.7], [0.7, 0.3]])
    np.testing.assert_allclose(h.get_block(0, 1), [[0.0, 0.0], [0.7, 0.0]])
    np.testing.assert_allclose(h.get_block(1, 0), [[0.0, 0.7], [0.0, 0.0]])


def test_apply_rcut_monotone_pattern():
    spec = random_device(seed=4, n_orb_puc=2, n_u_g=1, n_u_w=2, n_b=6)
    v = assemble_from_puc(spec, "coulomb", "W")
    pos = spec.positions()
    cuts = [2.0, 4.0, 8.0]
    patterns = []
    for r in cuts:
        vc = apply_rcut(v, pos, r)
        patterns.append(np.abs(vc.to_dense()) > 0)
    # r1 <= r2 implies pattern(r1) subset of pattern(r2)
    for small, big in zip(patterns, patterns[1:]):
        assert np.all(big | ~small)
    with pytest.raises(ValueError):
        apply_rcut(v, pos, 0.0)


def test_device_file_round_trip(tmp_path):
    spec = random_device(seed=5, n_orb_puc=3, n_u_g=1, n_u_w=2, n_b=4)
    path = str(tmp_path / "device.txt")
    save_device(spec, path)
    back = load_device(path)
    assert back.n_orb_puc == spec.n_orb_puc
    assert back.n_u_g == spec.n_u_g
    assert back.n_u_w == spec.n_u_w
    assert back.n_b == spec.n_b
    for a, b in zip(back.puc_h_blocks, spec.puc_h_blocks):
        np.testing.assert_allclose(a, b, atol=1e-15)
    for a, b in zip(back.puc_v_blocks, spec.puc_v_blocks):
        np.testing.assert_allclose(a, b, atol=1e-15)
    np.testing.assert_allclose(back.orbital_positions, spec.orbital_positions)
    assert back.cell_length == spec.cell_length


def test_minimal_single_orbital_chain_file(tmp_path):
    spec = DeviceSpec(
        n_orb_puc=1, n_u_g=1, n_u_w=1, n_b=4,
        puc_h_blocks=(np.array([[0.0]]), np.array([[0.5]])),
        puc_v_blocks=(np.array([[1.0]]),),
        orbital_positions=np.zeros((1, 3)),
    )
    path = str(tmp_path / "chain.txt")
    save_device(spec, path)
    back = load_device(path)
    assert back.block_size("G") == 1
    assert back.n_blocks("G") == 4


def test_corrupted_device_file_diagnostics(tmp_path):
    spec = random_device(seed=6, n_b=4)
    path = str(tmp_path / "device.txt")
    save_device(spec, path)
    lines = open(path).read().splitlines()

    # truncated block data
    bad = str(tmp_path / "truncated.txt")
    open(bad, "w").write("\n".join(lines[:-2]))
    with pytest.raises(DeviceFormatError):
        load_device(bad)

    # non-numeric token, diagnostic names the line
    idx = next(i for i, l in enumerate(lines) if l and l[0].isdigit() or "." in l)
    broken = lines.copy()
    broken[idx] = "not_a_number " + broken[idx]
    bad2 = str(tmp_path / "broken.txt")
    open(bad2, "w").write("\n".join(broken))
    with pytest.raises(DeviceFormatError) as err:
        load_device(bad2)
    # diagnostic carries the file path and the offending line number
    assert bad2 in str(err.value)
    assert ":" in str(err.value)

    with pytest.raises(DeviceFormatError):
        load_device(str(tmp_path / "missing.txt"))


def test_hermiticity_violation_rejected(tmp_path):
    spec = random_device(seed=7, n_b=4)
    path = str(tmp_path / "device.txt")
    save_device(spec, path)
    text = open(path).read()
    # corrupt one onsite matrix element asymmetrically
    h0 = np.asarray(spec.puc_h_blocks[0])
    target = f"{h0[0, 1].real:.17g}"
    assert target in text
    text = text.replace(target, f"{h0[0, 1].real + 0.5:.17g}", 1)
    open(path, "w").write(text)
    with pytest.raises((DeviceFormatError, ValueError)):
        load_device(path)


def test_wannier_import(tmp_path):
    # two-orbital cell, hopping to the +1 neighbour cell only
    path = str(tmp_path / "toy_hr.dat")
    rows = []
    h0 = np.array([[0.1, 0.2], [0.2, -0.1]])
    h1 = np.array([[0.4, 0.0], [0.05, 0.4]])
    for (r, mat) in ((0, h0), (1, h1), (-1, h1.conj().T)):
        for i in range(2):
            for j in range(2):
                rows.append(f"{r} 0 0 {i + 1} {j + 1} {mat[i, j]:.12f} 0.0")
    header = ["toy", "2", str(len(rows) // 4), "1 1 1"]
    open(path, "w").write("\n".join(header + rows) + "\n")
    blocks = load_wannier_hr(path)
    np.testing.assert_allclose(blocks[0], h0, atol=1e-12)
    np.testing.assert_allclose(blocks[1], h1, atol=1e-12)
    spec = device_from_wannier(path, n_b=4, n_u_g=1, n_u_w=1, v0=0.5)
    h = assemble_from_puc(spec, "hamiltonian", "G")
    np.testing.assert_allclose(h.get_block(0, 0), h0, atol=1e-12)
    np.testing.assert_allclose(h.get_block(0, 1), h1, atol=1e-12)


def test_random_device_is_seed_deterministic():
    a = random_device(seed=11)
    b = random_device(seed=11)
    for x, y in zip(a.puc_h_blocks, b.puc_h_blocks):
        np.testing.assert_array_equal(x, y)
    c = random_device(seed=12)
    assert not np.array_equal(a.puc_h_blocks[0], c.puc_h_blocks[0])
