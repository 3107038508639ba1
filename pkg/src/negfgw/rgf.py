"""Sequential selected solver for block-tridiagonal quadratic systems.

Solves, per energy point, the pair

    M X^R = I
    M X^lg M^dag = B^lg

for the diagonal and first off-diagonal blocks only, in O(N_B) block
operations: a forward Schur-elimination pass followed by a backward
substitution pass.  The lesser and greater components ride on the same
retarded forward intermediates, so the retarded pass is run once and its
intermediates are reused for both source kinds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._linalg import gemm, herm, invert
from .blocks import BlockMatrix
from .errors import SingularBlockError

Array = np.ndarray

KIND_LESSER = "<"
KIND_GREATER = ">"


def _get(m: BlockMatrix, i: int, j: int) -> Array:
    """Block (i, j) or a zero block when (i, j) lies outside the band."""
    if m.in_band(i, j):
        return m.get_block(i, j)
    return np.zeros((m.block_size, m.block_size), dtype=complex)


@dataclass
class RetardedPass:
    """Forward intermediates of the retarded solve.

    ``x_fwd[i]`` is the inverse of the Schur complement at block i after
    eliminating blocks 0..i-1; ``u_spread[i]`` is the cheap conditioning
    proxy (ratio of extreme LU diagonal magnitudes) logged per step.
    """

    x_fwd: list[Array] = field(default_factory=list)
    u_spread: list[float] = field(default_factory=list)


@dataclass
class LgPass:
    """Forward intermediates of one lesser/greater solve: local solutions
    ``x_fwd_lg[i] = x_fwd[i] b_fwd[i] x_fwd[i]^dag`` and the effective
    sources ``b_fwd[i]``."""

    x_fwd_lg: list[Array] = field(default_factory=list)
    b_fwd: list[Array] = field(default_factory=list)


@dataclass
class SelectedSolution:
    """Diagonal and first off-diagonal blocks of X^R and X^lg.

    Lower off-diagonal lesser/greater blocks are implied by the symmetry
    X[j, i] = -X[i, j]^dag and reconstructed on demand; retarded lower
    blocks are stored explicitly (no symmetry assumed).
    """

    n_blocks: int
    block_size: int
    x_r_diag: list[Array] = field(default_factory=list)
    x_r_upper: list[Array] = field(default_factory=list)
    x_r_lower: list[Array] = field(default_factory=list)
    x_lg_diag: dict[str, list[Array]] = field(default_factory=dict)
    x_lg_upper: dict[str, list[Array]] = field(default_factory=dict)

    def lg_lower(self, kind: str, i: int) -> Array:
        """Implied lower block (i+1, i) of the lesser/greater solution."""
        return -herm(self.x_lg_upper[kind][i])

    def symmetrize(self) -> None:
        """Project lesser/greater diagonal blocks onto their anti-Hermitian
        part; idempotent, removes roundoff symmetry defects."""
        for kind in self.x_lg_diag:
            diag = self.x_lg_diag[kind]
            for i, blk in enumerate(diag):
                diag[i] = 0.5 * (blk - herm(blk))

    def retarded_block_matrix(self) -> BlockMatrix:
        out = BlockMatrix(self.n_blocks, self.block_size, min(3, 2 * self.n_blocks - 1))
        for i, blk in enumerate(self.x_r_diag):
            out.set_block(i, i, blk)
        for i, blk in enumerate(self.x_r_upper):
            out.set_block(i, i + 1, blk)
        for i, blk in enumerate(self.x_r_lower):
            out.set_block(i + 1, i, blk)
        return out

    def lg_block_matrix(self, kind: str, storage_mode: str = "lg_compressed") -> BlockMatrix:
        out = BlockMatrix(
            self.n_blocks, self.block_size, min(3, 2 * self.n_blocks - 1), storage_mode
        )
        for i, blk in enumerate(self.x_lg_diag[kind]):
            out.set_block(i, i, blk)
        for i, blk in enumerate(self.x_lg_upper[kind]):
            out.set_block(i, i + 1, blk)
            if storage_mode == "full":
                out.set_block(i + 1, i, -herm(blk))
        return out


def forward_retarded(m_tilde: BlockMatrix) -> RetardedPass:
    """Forward Schur elimination x_i = (M_ii - M_{i,i-1} x_{i-1} M_{i-1,i})^{-1}."""
    fwd = RetardedPass()
    for i in range(m_tilde.n_blocks):
        s = _get(m_tilde, i, i)
        if i > 0:
            a = _get(m_tilde, i, i - 1)
            s = s - gemm(gemm(a, fwd.x_fwd[i - 1]), _get(m_tilde, i - 1, i))
        try:
            x, spread = invert(s)
        except SingularBlockError as exc:
            raise SingularBlockError(
                f"singular Schur complement at forward step {i}: {exc}"
            ) from exc
        fwd.x_fwd.append(x)
        fwd.u_spread.append(spread)
    return fwd


def forward_lg(m_tilde: BlockMatrix, b_lg: BlockMatrix, fwd: RetardedPass) -> LgPass:
    """Forward pass for one source kind, riding on retarded intermediates.

    The effective source picks up the eliminated block's contribution:
    b_i = B_ii + M_{i,i-1} x^lg_{i-1} M_{i,i-1}^dag - (y - y^dag) with
    y = M_{i,i-1} x_{i-1} B_{i-1,i}.
    """
    lg = LgPass()
    for i in range(m_tilde.n_blocks):
        b = _get(b_lg, i, i)
        if i > 0:
            a = _get(m_tilde, i, i - 1)
            y = gemm(gemm(a, fwd.x_fwd[i - 1]), _get(b_lg, i - 1, i))
            b = b + gemm(gemm(a, lg.x_fwd_lg[i - 1]), herm(a)) - (y - herm(y))
        x = fwd.x_fwd[i]
        lg.b_fwd.append(b)
        lg.x_fwd_lg.append(gemm(gemm(x, b), herm(x)))
    return lg


def rgf_retarded(
    m_tilde: BlockMatrix,
    fwd: RetardedPass | None = None,
    x_last: Array | None = None,
) -> tuple[SelectedSolution, RetardedPass]:
    """Selected blocks of the inverse of a block-tridiagonal matrix.

    Returns the solution holding diagonal plus both first off-diagonals,
    and the forward intermediates needed by the lesser/greater pass.
    Precomputed forward intermediates can be reused, and the exact last
    diagonal block can be seeded externally: embedded sub-chains whose
    right environment is already folded into that block re-run only the
    backward recursion.
    """
    n = m_tilde.n_blocks
    if fwd is None:
        fwd = forward_retarded(m_tilde)
    sol = SelectedSolution(n, m_tilde.block_size)
    sol.x_r_diag = [None] * n
    sol.x_r_upper = [None] * (n - 1)
    sol.x_r_lower = [None] * (n - 1)
    sol.x_r_diag[n - 1] = fwd.x_fwd[n - 1] if x_last is None else x_last
    for i in range(n - 2, -1, -1):
        x = fwd.x_fwd[i]
        x_next = sol.x_r_diag[i + 1]
        t = gemm(x, _get(m_tilde, i, i + 1))
        u = gemm(t, x_next)
        mx = gemm(_get(m_tilde, i + 1, i), x)
        sol.x_r_diag[i] = x + gemm(u, mx)
        sol.x_r_upper[i] = -u
        sol.x_r_lower[i] = -gemm(x_next, mx)
    return sol, fwd


def rgf_lesser_greater(
    m_tilde: BlockMatrix,
    b_lg: BlockMatrix,
    fwd: RetardedPass,
    sol: SelectedSolution,
    kind: str,
    lg: LgPass | None = None,
    x_last: Array | None = None,
) -> LgPass:
    """Selected blocks of X^lg = M^{-1} B^lg M^{-dag} for one source kind.

    Requires the retarded solution (its backward-pass diagonal blocks enter
    the corrections) and stores the result into ``sol`` under ``kind``.
    Returns the forward intermediates for reuse by distributed callers,
    accepts precomputed ones, and supports seeding the exact last diagonal
    block the same way as the retarded pass.
    """
    n = m_tilde.n_blocks
    if lg is None:
        lg = forward_lg(m_tilde, b_lg, fwd)
    diag: list[Array] = [None] * n
    upper: list[Array] = [None] * (n - 1)
    diag[n - 1] = lg.x_fwd_lg[n - 1] if x_last is None else x_last
    for i in range(n - 2, -1, -1):
        x = fwd.x_fwd[i]
        xl = lg.x_fwd_lg[i]
        m_up = _get(m_tilde, i, i + 1)
        m_dn = _get(m_tilde, i + 1, i)
        x_r_next = sol.x_r_diag[i + 1]
        t = gemm(x, m_up)
        u = gemm(t, x_r_next)
        y = gemm(gemm(x, _get(b_lg, i, i + 1)), herm(u))
        mxl = gemm(m_dn, xl)
        z = gemm(u, mxl)
        diag[i] = xl + gemm(gemm(t, diag[i + 1]), herm(t)) - (y - herm(y)) + (z - herm(z))
        lower = (
            gemm(gemm(x_r_next, _get(b_lg, i + 1, i)), herm(x))
            - gemm(x_r_next, mxl)
            - gemm(diag[i + 1], herm(t))
        )
        upper[i] = -herm(lower)
    sol.x_lg_diag[kind] = diag
    sol.x_lg_upper[kind] = upper
    return lg


def selected_solve(
    m_tilde: BlockMatrix,
    b_lesser: BlockMatrix | None = None,
    b_greater: BlockMatrix | None = None,
) -> SelectedSolution:
    """Retarded plus optional lesser/greater selected solve in one call."""
    sol, fwd = rgf_retarded(m_tilde)
    if b_lesser is not None:
        rgf_lesser_greater(m_tilde, b_lesser, fwd, sol, KIND_LESSER)
    if b_greater is not None:
        rgf_lesser_greater(m_tilde, b_greater, fwd, sol, KIND_GREATER)
    return sol


def dense_selected_oracle(
    m_tilde: BlockMatrix,
    b_lesser: BlockMatrix | None = None,
    b_greater: BlockMatrix | None = None,
) -> SelectedSolution:
    """Reference solver: dense inversion and triple product, cut back to the
    selected blocks.  Independent of the recursive path; test oracle and
    the ground truth for cross-checking."""
    n, bs = m_tilde.n_blocks, m_tilde.block_size
    dense = np.linalg.inv(m_tilde.to_dense())
    sol = SelectedSolution(n, bs)
    cut = lambda d, i, j: d[i * bs : (i + 1) * bs, j * bs : (j + 1) * bs]
    sol.x_r_diag = [cut(dense, i, i) for i in range(n)]
    sol.x_r_upper = [cut(dense, i, i + 1) for i in range(n - 1)]
    sol.x_r_lower = [cut(dense, i + 1, i) for i in range(n - 1)]
    for kind, b in ((KIND_LESSER, b_lesser), (KIND_GREATER, b_greater)):
        if b is None:
            continue
        full = dense @ b.to_dense() @ dense.conj().T
        sol.x_lg_diag[kind] = [cut(full, i, i) for i in range(n)]
        sol.x_lg_upper[kind] = [cut(full, i, i + 1) for i in range(n - 1)]
    return sol
