"""Device description files: documented text grammar and importers.

A device file is a single structured-text document.  Lines are read top
to bottom; ``#`` starts a comment and blank lines are ignored.  Sections:

    format negfgw-device 1
    cells <n_orb_puc> <n_u_g> <n_u_w> <n_b>
    geometry <cell_length> <r_cut>
    positions
    <x> <y> <z>                      one line per orbital, Angstrom
    hblock <index>
    <re> <im> <re> <im> ...          one line per block row
    vblock <index>
    <re> <im> <re> <im> ...
    end

Block indices are 1-based: index 1 is the onsite block, index k couples a
primitive cell to the cell k-1 ahead; couplings to preceding cells are
implied Hermitian counterparts.  Complex blocks are written as flat
(re, im) pairs in row-major order, one block row per line.  Indices of
each kind must be contiguous from 1.

Every parse failure raises :class:`DeviceFormatError` naming the file,
the 1-based line number, and the offending field.  Structural validation
(Hermitian onsite blocks, grouping consistency) is delegated to
:class:`DeviceSpec` and reported with the same file context.

The Wannier importer reads the ``_hr.dat`` text layout: a comment line,
the orbital count, the R-point count, the R-point degeneracy list, then
one entry per line with columns (R-vector integers, orbital i, orbital j,
Re, Im), 1-based orbital indices.
"""

from __future__ import annotations

import numpy as np

from .device import DeviceSpec
from .errors import DeviceFormatError

Array = np.ndarray

FORMAT_NAME = "negfgw-device"
FORMAT_VERSION = 1


def _fail(path: str, line_no: int, field: str, message: str) -> DeviceFormatError:
    return DeviceFormatError(f"{path}:{line_no}: field {field!r}: {message}")


def _parse_number(path: str, line_no: int, field: str, token: str, kind) -> float:
    try:
        return kind(token)
    except ValueError:
        want = "an integer" if kind is int else "a number"
        raise _fail(path, line_no, field, f"expected {want}, got {token!r}") from None


class _Lines:
    """Comment-stripped lines with their 1-based source numbers."""

    def __init__(self, path: str, text: str) -> None:
        self.path = path
        self.items: list[tuple[int, list[str]]] = []
        for no, raw in enumerate(text.splitlines(), start=1):
            body = raw.split("#", 1)[0].strip()
            if body:
                self.items.append((no, body.split()))
        self.pos = 0

    def take(self, context: str) -> tuple[int, list[str]]:
        if self.pos >= len(self.items):
            last = self.items[-1][0] if self.items else 1
            raise _fail(self.path, last, context, "unexpected end of file")
        item = self.items[self.pos]
        self.pos += 1
        return item

    def peek_keyword(self) -> str | None:
        if self.pos >= len(self.items):
            return None
        return self.items[self.pos][1][0]


def _read_block(lines: _Lines, n_orb: int, label: str) -> Array:
    block = np.zeros((n_orb, n_orb), dtype=complex)
    for row in range(n_orb):
        no, tokens = lines.take(f"{label} row {row + 1}")
        if len(tokens) != 2 * n_orb:
            raise _fail(
                lines.path,
                no,
                f"{label} row {row + 1}",
                f"expected {2 * n_orb} values (re, im pairs), got {len(tokens)}",
            )
        for col in range(n_orb):
            re = _parse_number(lines.path, no, f"{label}[{row + 1},{col + 1}].re",
                               tokens[2 * col], float)
            im = _parse_number(lines.path, no, f"{label}[{row + 1},{col + 1}].im",
                               tokens[2 * col + 1], float)
            block[row, col] = re + 1j * im
    return block


def _collect_blocks(
    path: str, found: dict[int, tuple[int, Array]], label: str
) -> tuple[Array, ...]:
    if not found:
        raise DeviceFormatError(f"{path}: no {label} sections; need at least index 1")
    for idx in range(1, len(found) + 1):
        if idx not in found:
            present = sorted(found)
            raise DeviceFormatError(
                f"{path}: {label} indices {present} are not contiguous from 1 "
                f"(missing {idx})"
            )
    return tuple(found[idx][1] for idx in range(1, len(found) + 1))


def load_device(path: str) -> DeviceSpec:
    """Parse a device file into a :class:`DeviceSpec`.

    Raises :class:`DeviceFormatError` with file, line, and field context
    for grammar violations, and with file context for structural ones
    (non-Hermitian onsite blocks, inconsistent grouping).
    """
    path = str(path)
    try:
        text = open(path, encoding="utf-8").read()
    except OSError as exc:
        raise DeviceFormatError(f"{path}: cannot read device file: {exc}") from exc
    lines = _Lines(path, text)

    no, tokens = lines.take("format")
    if len(tokens) != 3 or tokens[0] != "format":
        raise _fail(path, no, "format", "file must start with 'format negfgw-device 1'")
    if tokens[1] != FORMAT_NAME:
        raise _fail(path, no, "format", f"unknown format name {tokens[1]!r}")
    version = _parse_number(path, no, "format version", tokens[2], int)
    if version != FORMAT_VERSION:
        raise _fail(path, no, "format version",
                    f"unsupported version {version}, expected {FORMAT_VERSION}")

    no, tokens = lines.take("cells")
    if len(tokens) != 5 or tokens[0] != "cells":
        raise _fail(path, no, "cells",
                    "expected 'cells <n_orb_puc> <n_u_g> <n_u_w> <n_b>'")
    names = ("n_orb_puc", "n_u_g", "n_u_w", "n_b")
    n_orb, n_u_g, n_u_w, n_b = (
        _parse_number(path, no, names[k], tokens[k + 1], int) for k in range(4)
    )

    no, tokens = lines.take("geometry")
    if len(tokens) != 3 or tokens[0] != "geometry":
        raise _fail(path, no, "geometry", "expected 'geometry <cell_length> <r_cut>'")
    cell_length = _parse_number(path, no, "cell_length", tokens[1], float)
    r_cut = _parse_number(path, no, "r_cut", tokens[2], float)

    no, tokens = lines.take("positions")
    if tokens != ["positions"]:
        raise _fail(path, no, "positions", "expected a bare 'positions' line")
    positions = np.zeros((n_orb, 3))
    for row in range(n_orb):
        no, tokens = lines.take(f"position {row + 1}")
        if len(tokens) != 3:
            raise _fail(path, no, f"position {row + 1}",
                        f"expected 3 coordinates, got {len(tokens)}")
        positions[row] = [
            _parse_number(path, no, f"position {row + 1}", t, float) for t in tokens
        ]

    h_found: dict[int, tuple[int, Array]] = {}
    v_found: dict[int, tuple[int, Array]] = {}
    while True:
        keyword = lines.peek_keyword()
        if keyword is None:
            raise DeviceFormatError(f"{path}: missing 'end' line")
        if keyword == "end":
            lines.take("end")
            break
        if keyword not in ("hblock", "vblock"):
            no, tokens = lines.take("section")
            raise _fail(path, no, "section",
                        f"expected 'hblock', 'vblock', or 'end', got {keyword!r}")
        no, tokens = lines.take(keyword)
        if len(tokens) != 2:
            raise _fail(path, no, keyword, f"expected '{keyword} <index>'")
        idx = _parse_number(path, no, f"{keyword} index", tokens[1], int)
        if idx < 1:
            raise _fail(path, no, f"{keyword} index",
                        f"indices are 1-based, got {idx}")
        target = h_found if keyword == "hblock" else v_found
        if idx in target:
            first = target[idx][0]
            raise _fail(path, no, f"{keyword} index",
                        f"duplicate index {idx} (first defined on line {first})")
        target[idx] = (no, _read_block(lines, n_orb, f"{keyword} {idx}"))

    h_blocks = _collect_blocks(path, h_found, "hblock")
    v_blocks = _collect_blocks(path, v_found, "vblock")
    try:
        return DeviceSpec(
            n_orb_puc=n_orb,
            n_u_g=n_u_g,
            n_u_w=n_u_w,
            n_b=n_b,
            puc_h_blocks=h_blocks,
            puc_v_blocks=v_blocks,
            orbital_positions=positions,
            cell_length=cell_length,
            r_cut=r_cut,
        )
    except ValueError as exc:
        raise DeviceFormatError(f"{path}: {exc}") from exc


def _write_block(out: list[str], keyword: str, idx: int, block: Array) -> None:
    out.append(f"{keyword} {idx}")
    for row in np.asarray(block, dtype=complex):
        out.append(" ".join(f"{v.real:.17g} {v.imag:.17g}" for v in row))


def save_device(spec: DeviceSpec, path: str) -> None:
    """Write a :class:`DeviceSpec` in the documented text grammar.

    The writer round-trips through :func:`load_device` bit-exactly: all
    numbers are printed with 17 significant digits.
    """
    out = [
        f"format {FORMAT_NAME} {FORMAT_VERSION}",
        f"cells {spec.n_orb_puc} {spec.n_u_g} {spec.n_u_w} {spec.n_b}",
        f"geometry {spec.cell_length:.17g} {spec.r_cut:.17g}",
        "positions",
    ]
    for row in spec.orbital_positions:
        out.append(" ".join(f"{v:.17g}" for v in row))
    for idx, block in enumerate(spec.puc_h_blocks, start=1):
        _write_block(out, "hblock", idx, block)
    for idx, block in enumerate(spec.puc_v_blocks, start=1):
        _write_block(out, "vblock", idx, block)
    out.append("end")
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("\n".join(out) + "\n")


# -- Wannier import ----------------------------------------------------------


def load_wannier_hr(path: str) -> tuple[Array, ...]:
    """Read Hamiltonian blocks from a Wannier ``_hr.dat`` file.

    Returns the tuple ``(h_0, h_1, .., h_R)`` of onsite and forward
    couplings along the transport axis, each divided by its R-point
    degeneracy.  Only on-axis R-vectors ``(r, 0, 0)`` are accepted; any
    other nonzero entry is rejected as out of the quasi-1D model.
    """
    path = str(path)
    try:
        text = open(path, encoding="utf-8").read()
    except OSError as exc:
        raise DeviceFormatError(f"{path}: cannot read Wannier file: {exc}") from exc
    lines = text.splitlines()
    if len(lines) < 3:
        raise DeviceFormatError(f"{path}: truncated header, need at least 3 lines")
    num_wann = int(
        _parse_number(path, 2, "num_wann", lines[1].split()[0] if lines[1].split() else "", int)
    )
    nrpts = int(
        _parse_number(path, 3, "nrpts", lines[2].split()[0] if lines[2].split() else "", int)
    )
    if num_wann < 1 or nrpts < 1:
        raise DeviceFormatError(
            f"{path}: need positive counts, got num_wann={num_wann}, nrpts={nrpts}"
        )

    degeneracies: list[int] = []
    line_no = 3
    while len(degeneracies) < nrpts:
        line_no += 1
        if line_no > len(lines):
            raise DeviceFormatError(
                f"{path}:{line_no}: field 'degeneracy': unexpected end of file "
                f"(got {len(degeneracies)} of {nrpts} values)"
            )
        for token in lines[line_no - 1].split():
            degeneracies.append(
                int(_parse_number(path, line_no, "degeneracy", token, int))
            )
    if len(degeneracies) != nrpts:
        raise DeviceFormatError(
            f"{path}:{line_no}: field 'degeneracy': expected exactly {nrpts} "
            f"values, got {len(degeneracies)}"
        )

    blocks: dict[int, Array] = {}
    entries_per_rpt = num_wann * num_wann
    expected = nrpts * entries_per_rpt
    count = 0
    for raw_no in range(line_no + 1, len(lines) + 1):
        tokens = lines[raw_no - 1].split()
        if not tokens:
            continue
        if len(tokens) != 7:
            raise _fail(path, raw_no, "entry",
                        f"expected 7 columns (R i j Re Im), got {len(tokens)}")
        r1 = int(_parse_number(path, raw_no, "R1", tokens[0], int))
        r2 = int(_parse_number(path, raw_no, "R2", tokens[1], int))
        r3 = int(_parse_number(path, raw_no, "R3", tokens[2], int))
        i = int(_parse_number(path, raw_no, "orbital i", tokens[3], int))
        j = int(_parse_number(path, raw_no, "orbital j", tokens[4], int))
        re = _parse_number(path, raw_no, "Re", tokens[5], float)
        im = _parse_number(path, raw_no, "Im", tokens[6], float)
        if (r2, r3) != (0, 0) and (re != 0.0 or im != 0.0):
            raise _fail(path, raw_no, "R2/R3",
                        f"off-axis R-vector ({r1},{r2},{r3}) with nonzero value; "
                        "only (r,0,0) fits the quasi-1D model")
        if not (1 <= i <= num_wann and 1 <= j <= num_wann):
            raise _fail(path, raw_no, "orbital i/j",
                        f"orbital indices ({i},{j}) outside 1..{num_wann}")
        if count >= expected:
            raise _fail(path, raw_no, "entry",
                        f"more than nrpts*num_wann^2 = {expected} entries")
        deg = degeneracies[count // entries_per_rpt]
        if (r2, r3) == (0, 0) and r1 >= 0:
            block = blocks.setdefault(r1, np.zeros((num_wann, num_wann), dtype=complex))
            block[i - 1, j - 1] = (re + 1j * im) / deg
        count += 1
    if count != expected:
        raise DeviceFormatError(
            f"{path}: expected {expected} entries, got {count}"
        )
    if 0 not in blocks:
        raise DeviceFormatError(f"{path}: no onsite R=(0,0,0) block present")
    reach = max(blocks)
    return tuple(
        blocks.get(r, np.zeros((num_wann, num_wann), dtype=complex))
        for r in range(reach + 1)
    )


def device_from_wannier(
    path: str,
    n_b: int,
    n_u_g: int | None = None,
    n_u_w: int | None = None,
    v0: float = 1e-3,
    cell_length: float = 1.0,
) -> DeviceSpec:
    """Build a device from a Wannier Hamiltonian and a model interaction.

    The ``_hr.dat`` file carries no interaction, so the bare Coulomb is a
    diagonal model of scale ``v0`` with the same grouping range.  The
    electron grouping defaults to the Hamiltonian coupling range.
    """
    h_blocks = load_wannier_hr(path)
    num_wann = h_blocks[0].shape[0]
    reach = len(h_blocks) - 1
    n_u_g = n_u_g or max(reach, 1)
    n_u_w = n_u_w or n_u_g
    v_blocks = [v0 * np.eye(num_wann, dtype=complex)]
    v_blocks += [
        v0 * 0.3 / k * np.eye(num_wann, dtype=complex) for k in range(1, n_u_w + 1)
    ]
    positions = np.zeros((num_wann, 3))
    positions[:, 0] = np.linspace(0.0, cell_length, num_wann, endpoint=False)
    return DeviceSpec(
        n_orb_puc=num_wann,
        n_u_g=n_u_g,
        n_u_w=n_u_w,
        n_b=n_b,
        puc_h_blocks=h_blocks,
        puc_v_blocks=tuple(v_blocks),
        orbital_positions=positions,
        cell_length=cell_length,
    )
