"""Spatially distributed selected solver.

The block chain is split into contiguous partitions, one per rank: one at
each device end and the rest in the middle.  The solve runs in three
phases:

1. Each end partition runs a plain forward elimination toward the device
   interior; each middle partition eliminates its interior blocks with a
   two-sided Schur sweep, producing a 2x2 block contribution on its first
   and last block (with matching source updates per kind).
2. Rank 0 assembles the reduced chain over the partition boundary blocks
   (2 p_s - 2 nodes, coupled by the original off-diagonal blocks), solves
   it sequentially, and returns to every rank the environment it needs:
   exact boundary solution blocks for the end partitions, connected
   surface blocks for the middles.
3. End partitions run the backward recursion seeded with the exact
   boundary block; middles fold the environment into their corner blocks
   and re-solve locally.  Rank 0 stitches the partition results and the
   reduced-chain cross blocks into the full selected solution.

All per-partition numerical steps and the reduced-chain composition are
validated against dense Schur and inversion oracles in the test suite.
Matrix data is replicated across ranks (desk-scale problems); what is
distributed is the work, which the flop counters attribute per rank to
the partition and reduced-system categories.
"""

from __future__ import annotations

import queue
import threading
import multiprocessing
from dataclasses import dataclass, field
from time import perf_counter

import numpy as np

from . import flops
from ._linalg import gemm, herm, invert
from .blocks import BlockMatrix, FULL, reverse_blocks
from .errors import ConfigError, PartitionError
from .rgf import (
    KIND_GREATER,
    KIND_LESSER,
    LgPass,
    RetardedPass,
    SelectedSolution,
    _get,
    forward_lg,
    forward_retarded,
    rgf_lesser_greater,
    rgf_retarded,
    selected_solve,
)

Array = np.ndarray

CATEGORY_PARTITION = "partition work"
CATEGORY_REDUCED = "reduced system"

BACKEND_IN_PROCESS = "in_process"
BACKEND_MULTI_PROCESS = "multi_process"


# -- partition plan ---------------------------------------------------------


@dataclass(frozen=True)
class PartitionPlan:
    """Contiguous split of the block chain, one range per rank."""

    n_blocks: int
    ranges: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        if not self.ranges:
            raise PartitionError("plan needs at least one partition")
        expect = 0
        for a, b in self.ranges:
            if a != expect or b < a:
                raise PartitionError(f"ranges must tile the chain, got {self.ranges}")
            expect = b + 1
        if expect != self.n_blocks:
            raise PartitionError(
                f"ranges cover {expect} blocks, chain has {self.n_blocks}"
            )
        if self.p_s > 1:
            for a, b in self.ranges:
                if b - a + 1 < 2:
                    raise PartitionError(
                        "every partition needs at least 2 blocks, "
                        f"got {self.ranges}"
                    )

    @property
    def p_s(self) -> int:
        return len(self.ranges)

    def width(self, rank: int) -> int:
        a, b = self.ranges[rank]
        return b - a + 1


def make_partition_plan(n_blocks: int, p_s: int) -> PartitionPlan:
    """Balanced contiguous split; leftover blocks go to the middle
    partitions first (they carry the larger per-block workload)."""
    if p_s < 1:
        raise PartitionError(f"p_s must be positive, got {p_s}")
    if p_s > 1 and n_blocks < 2 * p_s:
        raise PartitionError(
            f"{n_blocks} blocks cannot feed {p_s} partitions of >= 2 blocks"
        )
    base, rem = divmod(n_blocks, p_s)
    widths = [base] * p_s
    middles = list(range(1, p_s - 1)) or [0]
    order = middles + [r for r in range(p_s) if r not in middles]
    for k in range(rem):
        widths[order[k % len(order)]] += 1
    ranges = []
    start = 0
    for w in widths:
        ranges.append((start, start + w - 1))
        start += w
    return PartitionPlan(n_blocks, tuple(ranges))


# -- communicators ----------------------------------------------------------


def _payload_nbytes(obj) -> int:
    if isinstance(obj, np.ndarray):
        return obj.nbytes
    if isinstance(obj, dict):
        return sum(_payload_nbytes(v) for v in obj.values())
    if isinstance(obj, (list, tuple)):
        return sum(_payload_nbytes(v) for v in obj)
    if isinstance(obj, (int, float, complex, np.generic)):
        return 16
    if isinstance(obj, str):
        return len(obj)
    return 0


class Communicator:
    """Point-to-point message passing between the ranks of one solve.

    Channels are FIFO per (source, dest) pair; tags document the protocol
    and are checked on receive.  ``bytes_sent`` tallies payload volume.
    """

    rank: int = 0
    size: int = 1

    def __init__(self) -> None:
        self.bytes_sent = 0

    def send(self, dest: int, obj, tag: str = "") -> None:
        raise NotImplementedError

    def recv(self, src: int, tag: str = ""):
        raise NotImplementedError

    def barrier(self) -> None:
        raise NotImplementedError

    def gather(self, obj, root: int = 0, tag: str = "gather"):
        """Collect one object per rank at ``root`` (None elsewhere)."""
        if self.rank == root:
            out = []
            for r in range(self.size):
                out.append(obj if r == root else self.recv(r, tag))
            return out
        self.send(root, obj, tag)
        return None

    def bcast(self, obj, root: int = 0, tag: str = "bcast"):
        """Distribute ``root``'s object to every rank."""
        if self.rank == root:
            for r in range(self.size):
                if r != root:
                    self.send(r, obj, tag)
            return obj
        return self.recv(root, tag)


class SerialCommunicator(Communicator):
    """Single-rank stand-in; any point-to-point call is a protocol bug."""

    def send(self, dest: int, obj, tag: str = "") -> None:
        raise RuntimeError("serial communicator has no peers")

    def recv(self, src: int, tag: str = ""):
        raise RuntimeError("serial communicator has no peers")

    def barrier(self) -> None:
        return None


_ERROR_TAG = "__peer_error__"


class _ChannelCommunicator(Communicator):
    """Mailbox-backed communicator; works with both thread and process
    queues since only put/get are used."""

    def __init__(self, rank: int, size: int, channels, barrier) -> None:
        super().__init__()
        self.rank = rank
        self.size = size
        self._channels = channels
        self._barrier = barrier

    def send(self, dest: int, obj, tag: str = "") -> None:
        if dest == self.rank or not (0 <= dest < self.size):
            raise ValueError(f"bad destination {dest}")
        self.bytes_sent += _payload_nbytes(obj)
        self._channels[(self.rank, dest)].put((tag, obj))

    def recv(self, src: int, tag: str = ""):
        got_tag, obj = self._channels[(src, self.rank)].get()
        if got_tag == _ERROR_TAG:
            raise RuntimeError(f"rank {src} failed: {obj}")
        if got_tag != tag:
            raise RuntimeError(f"protocol error: expected tag {tag!r}, got {got_tag!r}")
        return obj

    def barrier(self) -> None:
        self._barrier.wait()

    def abort(self, reason: str) -> None:
        """Unblock peers waiting on this rank after a local failure."""
        for (src, dest), chan in self._channels.items():
            if src == self.rank:
                chan.put((_ERROR_TAG, reason))


def _run_in_threads(fn, size: int, args: tuple) -> list:
    channels = {
        (s, d): queue.SimpleQueue() for s in range(size) for d in range(size) if s != d
    }
    barrier = threading.Barrier(size)
    results: list = [None] * size
    errors: list = [None] * size

    def work(rank: int) -> None:
        comm = _ChannelCommunicator(rank, size, channels, barrier)
        try:
            results[rank] = fn(comm, *args)
        except BaseException as exc:  # noqa: BLE001 - reraised on the caller thread
            errors[rank] = exc
            comm.abort(repr(exc))

    threads = [threading.Thread(target=work, args=(r,)) for r in range(size)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    _raise_root_cause(errors)
    return results


def _raise_root_cause(errors: list) -> None:
    """Surface the originating failure, not a peer's secondary one."""
    nonempty = [e for e in errors if e is not None]
    if not nonempty:
        return
    for exc in nonempty:
        if not (isinstance(exc, RuntimeError) and "failed:" in str(exc)):
            raise exc
    raise nonempty[0]


def _mp_work(fn, rank, size, channels, barrier, result_q, args) -> None:
    comm = _ChannelCommunicator(rank, size, channels, barrier)
    try:
        result_q.put((rank, "ok", fn(comm, *args)))
    except BaseException as exc:  # noqa: BLE001 - forwarded to the parent
        comm.abort(repr(exc))
        result_q.put((rank, "error", exc))


def _run_in_processes(fn, size: int, args: tuple) -> list:
    ctx = multiprocessing.get_context("fork")
    channels = {
        (s, d): ctx.Queue() for s in range(size) for d in range(size) if s != d
    }
    barrier = ctx.Barrier(size)
    result_q = ctx.Queue()
    procs = [
        ctx.Process(
            target=_mp_work, args=(fn, r, size, channels, barrier, result_q, args)
        )
        for r in range(size)
    ]
    for p in procs:
        p.start()
    results: list = [None] * size
    errors: list = [None] * size
    for _ in range(size):
        rank, status, payload = result_q.get()
        if status == "ok":
            results[rank] = payload
        else:
            errors[rank] = payload
    for p in procs:
        p.join()
    _raise_root_cause(errors)
    return results


def spmd_run(fn, size: int, backend: str = BACKEND_IN_PROCESS, args: tuple = ()) -> list:
    """Run ``fn(comm, *args)`` on ``size`` ranks; returns per-rank results."""
    if size < 1:
        raise ConfigError(f"worker count must be positive, got {size}")
    if size == 1:
        return [fn(SerialCommunicator(), *args)]
    if backend == BACKEND_IN_PROCESS:
        return _run_in_threads(fn, size, args)
    if backend == BACKEND_MULTI_PROCESS:
        return _run_in_processes(fn, size, args)
    raise ConfigError(f"unknown backend {backend!r}")


# -- distributed solve ------------------------------------------------------


@dataclass
class DistStats:
    """Per-rank instrumentation of one distributed solve."""

    plan: PartitionPlan
    flops_by_rank: list[dict[str, float]] = field(default_factory=list)
    bytes_by_rank: list[int] = field(default_factory=list)
    wall_by_rank: list[float] = field(default_factory=list)

    def category_total(self, category: str) -> float:
        return sum(d.get(category, 0.0) for d in self.flops_by_rank)

    def total_flops(self) -> float:
        return sum(sum(d.values()) for d in self.flops_by_rank)

    def boundary_middle_ratio(self) -> float:
        """Mean partition-work flops of the end ranks over the middles'."""
        p = self.plan.p_s
        if p < 3:
            raise PartitionError("ratio needs at least one middle partition")
        edge = [self.flops_by_rank[r].get(CATEGORY_PARTITION, 0.0) for r in (0, p - 1)]
        mid = [
            self.flops_by_rank[r].get(CATEGORY_PARTITION, 0.0) for r in range(1, p - 1)
        ]
        return float(np.mean(edge) / np.mean(mid))


def _slice_blocks(m: BlockMatrix, a: int, b: int) -> BlockMatrix:
    """Local copy of the chain segment [a..b] as a full-storage matrix."""
    w = b - a + 1
    out = BlockMatrix(w, m.block_size, min(m.block_bandwidth, 2 * w - 1), FULL)
    h = out.half_bandwidth
    for i in range(w):
        for j in range(max(0, i - h), min(w, i + h + 1)):
            out.set_block(i, j, _get(m, a + i, a + j))
    return out


def _schur_tail(
    m_loc: BlockMatrix,
    b_loc: dict[str, BlockMatrix],
    fwd: RetardedPass,
    lgs: dict[str, LgPass],
) -> tuple[Array, dict[str, Array]]:
    """Schur complement and effective source at the last chain block after
    the forward elimination of everything before it."""
    last = m_loc.n_blocks - 1
    a = _get(m_loc, last, last - 1)
    t = gemm(a, fwd.x_fwd[last - 1])
    s = _get(m_loc, last, last) - gemm(t, _get(m_loc, last - 1, last))
    b_out = {}
    for kind, b in b_loc.items():
        y = gemm(t, _get(b, last - 1, last))
        b_out[kind] = (
            _get(b, last, last)
            + gemm(gemm(a, lgs[kind].x_fwd_lg[last - 1]), herm(a))
            - (y - herm(y))
        )
    return s, b_out


def _middle_sweep(
    m_loc: BlockMatrix, b_loc: dict[str, BlockMatrix]
) -> dict[str, object]:
    """Two-sided Schur elimination of the interior blocks 1..w-2, tracking
    the fills between the surviving corner blocks and the source updates
    for every kind.  For w == 2 the original blocks pass through."""
    w = m_loc.n_blocks
    kinds = list(b_loc)
    s_a = _get(m_loc, 0, 0)
    b_a = {k: _get(b_loc[k], 0, 0) for k in kinds}
    if w == 2:
        return {
            "s_aa": s_a,
            "s_ab": _get(m_loc, 0, 1),
            "s_ba": _get(m_loc, 1, 0),
            "s_bb": _get(m_loc, 1, 1),
            "b_aa": b_a,
            "b_ab": {k: _get(b_loc[k], 0, 1) for k in kinds},
            "b_bb": {k: _get(b_loc[k], 1, 1) for k in kinds},
        }
    f = _get(m_loc, 0, 1)
    f_p = _get(m_loc, 1, 0)
    s_i = _get(m_loc, 1, 1)
    b_ai = {k: _get(b_loc[k], 0, 1) for k in kinds}
    b_i = {k: _get(b_loc[k], 1, 1) for k in kinds}
    for i in range(1, w - 1):
        y, _ = invert(s_i, label=f"middle sweep step {i}")
        fy = gemm(f, y)
        m_dn = _get(m_loc, i + 1, i)
        m_up = _get(m_loc, i, i + 1)
        my = gemm(m_dn, y)
        s_a = s_a - gemm(fy, f_p)
        for k in kinds:
            yb = gemm(y, b_i[k])
            ybh = gemm(yb, herm(y))
            fyb = gemm(f, ybh)
            myb = gemm(m_dn, ybh)
            t1 = gemm(my, _get(b_loc[k], i, i + 1))
            b_a[k] = (
                b_a[k]
                + gemm(fy, herm(b_ai[k]))
                - gemm(b_ai[k], herm(fy))
                + gemm(fyb, herm(f))
            )
            b_ai[k] = (
                -gemm(fy, _get(b_loc[k], i, i + 1))
                - gemm(b_ai[k], herm(my))
                + gemm(fyb, herm(m_dn))
            )
            b_i[k] = _get(b_loc[k], i + 1, i + 1) - t1 + herm(t1) + gemm(myb, herm(m_dn))
        f, f_p = -gemm(fy, m_up), -gemm(my, f_p)
        s_i = _get(m_loc, i + 1, i + 1) - gemm(my, m_up)
    return {
        "s_aa": s_a,
        "s_ab": f,
        "s_ba": f_p,
        "s_bb": s_i,
        "b_aa": b_a,
        "b_ab": b_ai,
        "b_bb": b_i,
    }


def _fold_corner(
    m_loc: BlockMatrix,
    b_loc: dict[str, BlockMatrix],
    j: int,
    m_out: Array,
    m_in: Array,
    b_out: dict[str, Array],
    b_in: dict[str, Array],
    x_env: Array,
    xl_env: dict[str, Array],
) -> None:
    """Fold a connected environment into corner block ``j`` of the local
    system: the coupling to the eliminated neighbor enters through its
    surface solution ``x_env`` and local source ``xl_env``."""
    t = gemm(m_out, x_env)
    m_loc.add_to_block(j, j, -gemm(t, m_in))
    for kind in b_loc:
        corr = (
            -gemm(t, b_in[kind])
            - gemm(gemm(b_out[kind], herm(x_env)), herm(m_out))
            + gemm(gemm(m_out, xl_env[kind]), herm(m_out))
        )
        b_loc[kind].add_to_block(j, j, corr)


def _boundary_nodes(plan: PartitionPlan) -> list[int]:
    """Global indices of the reduced-chain nodes: the top partition's last
    block, each middle's first and last block, the bottom's first block."""
    nodes = [plan.ranges[0][1]]
    for a, b in plan.ranges[1:-1]:
        nodes.extend((a, b))
    nodes.append(plan.ranges[-1][0])
    return nodes


def _reduced_phase(
    contribs: list,
    m_tilde: BlockMatrix,
    b_by_kind: dict[str, BlockMatrix],
    plan: PartitionPlan,
) -> tuple[list[dict], dict[int, dict]]:
    """Assemble and solve the reduced boundary chain; returns the per-rank
    environment payloads and the cross-partition solution blocks."""
    kinds = list(b_by_kind)
    nodes = _boundary_nodes(plan)
    nr = len(nodes)
    bs = m_tilde.block_size
    m_r = BlockMatrix(nr, bs, min(3, 2 * nr - 1), FULL)
    b_r = {k: BlockMatrix(nr, bs, min(3, 2 * nr - 1), FULL) for k in kinds}

    s_top, b_top = contribs[0]
    m_r.set_block(0, 0, s_top)
    for k in kinds:
        b_r[k].set_block(0, 0, b_top[k])
    for j, sweep in enumerate(contribs[1:-1], start=1):
        p0, p1 = 2 * j - 1, 2 * j
        m_r.set_block(p0, p0, sweep["s_aa"])
        m_r.set_block(p0, p1, sweep["s_ab"])
        m_r.set_block(p1, p0, sweep["s_ba"])
        m_r.set_block(p1, p1, sweep["s_bb"])
        for k in kinds:
            b_r[k].set_block(p0, p0, sweep["b_aa"][k])
            b_r[k].set_block(p0, p1, sweep["b_ab"][k])
            b_r[k].set_block(p1, p0, -herm(sweep["b_ab"][k]))
            b_r[k].set_block(p1, p1, sweep["b_bb"][k])
    s_bot, b_bot = contribs[-1]
    m_r.set_block(nr - 1, nr - 1, s_bot)
    for k in kinds:
        b_r[k].set_block(nr - 1, nr - 1, b_bot[k])
    # cross-partition couplings keep their original blocks
    for p0 in range(0, nr - 1, 2):
        g = nodes[p0]
        m_r.set_block(p0, p0 + 1, _get(m_tilde, g, g + 1))
        m_r.set_block(p0 + 1, p0, _get(m_tilde, g + 1, g))
        for k in kinds:
            b_r[k].set_block(p0, p0 + 1, _get(b_by_kind[k], g, g + 1))
            b_r[k].set_block(p0 + 1, p0, _get(b_by_kind[k], g + 1, g))

    sol_r, fwd_r = rgf_retarded(m_r)
    lg_r = {k: rgf_lesser_greater(m_r, b_r[k], fwd_r, sol_r, k) for k in kinds}
    m_rev = reverse_blocks(m_r)
    fwd_rev = forward_retarded(m_rev)
    lg_rev = {k: forward_lg(m_rev, reverse_blocks(b_r[k]), fwd_rev) for k in kinds}

    envs: list[dict] = [None] * plan.p_s  # type: ignore[list-item]
    envs[0] = {
        "x_r": sol_r.x_r_diag[0],
        "x_lg": {k: sol_r.x_lg_diag[k][0] for k in kinds},
    }
    envs[plan.p_s - 1] = {
        "x_r": sol_r.x_r_diag[nr - 1],
        "x_lg": {k: sol_r.x_lg_diag[k][nr - 1] for k in kinds},
    }
    for j in range(1, plan.p_s - 1):
        left, right_rev = 2 * j - 2, nr - 1 - (2 * j + 1)
        envs[j] = {
            "x_left": fwd_r.x_fwd[left],
            "xl_left": {k: lg_r[k].x_fwd_lg[left] for k in kinds},
            "x_right": fwd_rev.x_fwd[right_rev],
            "xl_right": {k: lg_rev[k].x_fwd_lg[right_rev] for k in kinds},
        }

    cross: dict[int, dict] = {}
    for p0 in range(0, nr - 1, 2):
        g = nodes[p0]
        cross[g] = {
            "x_r_upper": sol_r.x_r_upper[p0],
            "x_r_lower": sol_r.x_r_lower[p0],
            "x_lg_upper": {k: sol_r.x_lg_upper[k][p0] for k in kinds},
        }
    return envs, cross


def _partition_payload(sol: SelectedSolution, kinds: list[str], reversed_chain: bool) -> dict:
    """Partition solution blocks in global chain order."""
    w = sol.n_blocks
    if not reversed_chain:
        return {
            "diag": sol.x_r_diag,
            "upper": sol.x_r_upper,
            "lower": sol.x_r_lower,
            "lg_diag": {k: sol.x_lg_diag[k] for k in kinds},
            "lg_upper": {k: sol.x_lg_upper[k] for k in kinds},
        }
    return {
        "diag": [sol.x_r_diag[w - 1 - t] for t in range(w)],
        "upper": [sol.x_r_lower[w - 2 - t] for t in range(w - 1)],
        "lower": [sol.x_r_upper[w - 2 - t] for t in range(w - 1)],
        "lg_diag": {k: [sol.x_lg_diag[k][w - 1 - t] for t in range(w)] for k in kinds},
        "lg_upper": {
            k: [-herm(sol.x_lg_upper[k][w - 2 - t]) for t in range(w - 1)]
            for k in kinds
        },
    }


def _assemble_solution(
    parts: list[dict],
    cross: dict[int, dict],
    plan: PartitionPlan,
    block_size: int,
    kinds: list[str],
) -> SelectedSolution:
    n = plan.n_blocks
    sol = SelectedSolution(n, block_size)
    sol.x_r_diag = [None] * n
    sol.x_r_upper = [None] * (n - 1)
    sol.x_r_lower = [None] * (n - 1)
    for k in kinds:
        sol.x_lg_diag[k] = [None] * n
        sol.x_lg_upper[k] = [None] * (n - 1)
    for (a, _b), part in zip(plan.ranges, parts):
        for t, blk in enumerate(part["diag"]):
            sol.x_r_diag[a + t] = blk
        for t, blk in enumerate(part["upper"]):
            sol.x_r_upper[a + t] = blk
        for t, blk in enumerate(part["lower"]):
            sol.x_r_lower[a + t] = blk
        for k in kinds:
            for t, blk in enumerate(part["lg_diag"][k]):
                sol.x_lg_diag[k][a + t] = blk
            for t, blk in enumerate(part["lg_upper"][k]):
                sol.x_lg_upper[k][a + t] = blk
    for g, blocks in cross.items():
        sol.x_r_upper[g] = blocks["x_r_upper"]
        sol.x_r_lower[g] = blocks["x_r_lower"]
        for k in kinds:
            sol.x_lg_upper[k][g] = blocks["x_lg_upper"][k]
    return sol


def _dist_body(
    comm: Communicator,
    m_tilde: BlockMatrix,
    b_by_kind: dict[str, BlockMatrix],
    plan: PartitionPlan,
    counter: flops.FlopCounter,
) -> SelectedSolution:
    kinds = list(b_by_kind)
    rank, p = comm.rank, plan.p_s
    a, b = plan.ranges[rank]
    n = plan.n_blocks

    if p == 1:
        with counter.category(CATEGORY_PARTITION):
            return selected_solve(
                m_tilde,
                b_by_kind.get(KIND_LESSER),
                b_by_kind.get(KIND_GREATER),
            )

    # phase 1: local eliminations
    with counter.category(CATEGORY_PARTITION):
        if rank == 0:
            loc_m = _slice_blocks(m_tilde, 0, b)
            loc_b = {k: _slice_blocks(b_by_kind[k], 0, b) for k in kinds}
            fwd = forward_retarded(loc_m)
            lgs = {k: forward_lg(loc_m, loc_b[k], fwd) for k in kinds}
            contrib = _schur_tail(loc_m, loc_b, fwd, lgs)
        elif rank == p - 1:
            loc_m = reverse_blocks(_slice_blocks(m_tilde, a, n - 1))
            loc_b = {
                k: reverse_blocks(_slice_blocks(b_by_kind[k], a, n - 1)) for k in kinds
            }
            fwd = forward_retarded(loc_m)
            lgs = {k: forward_lg(loc_m, loc_b[k], fwd) for k in kinds}
            contrib = _schur_tail(loc_m, loc_b, fwd, lgs)
        else:
            loc_m = _slice_blocks(m_tilde, a, b)
            loc_b = {k: _slice_blocks(b_by_kind[k], a, b) for k in kinds}
            contrib = _middle_sweep(loc_m, loc_b)

    # phase 2: reduced chain on rank 0
    contribs = comm.gather(contrib, root=0, tag="contrib")
    cross = None
    if rank == 0:
        with counter.category(CATEGORY_REDUCED):
            envs, cross = _reduced_phase(contribs, m_tilde, b_by_kind, plan)
        for dest in range(1, p):
            comm.send(dest, envs[dest], tag="env")
        env = envs[0]
    else:
        env = comm.recv(0, tag="env")

    # phase 3: local recovery
    with counter.category(CATEGORY_PARTITION):
        if rank == 0 or rank == p - 1:
            sol_loc, _ = rgf_retarded(loc_m, fwd=fwd, x_last=env["x_r"])
            for k in kinds:
                rgf_lesser_greater(
                    loc_m, loc_b[k], fwd, sol_loc, k, lg=lgs[k], x_last=env["x_lg"][k]
                )
            payload = _partition_payload(sol_loc, kinds, reversed_chain=(rank == p - 1))
        else:
            _fold_corner(
                loc_m,
                loc_b,
                0,
                _get(m_tilde, a, a - 1),
                _get(m_tilde, a - 1, a),
                {k: _get(b_by_kind[k], a, a - 1) for k in kinds},
                {k: _get(b_by_kind[k], a - 1, a) for k in kinds},
                env["x_left"],
                env["xl_left"],
            )
            _fold_corner(
                loc_m,
                loc_b,
                loc_m.n_blocks - 1,
                _get(m_tilde, b, b + 1),
                _get(m_tilde, b + 1, b),
                {k: _get(b_by_kind[k], b, b + 1) for k in kinds},
                {k: _get(b_by_kind[k], b + 1, b) for k in kinds},
                env["x_right"],
                env["xl_right"],
            )
            sol_loc = selected_solve(
                loc_m, loc_b.get(KIND_LESSER), loc_b.get(KIND_GREATER)
            )
            payload = _partition_payload(sol_loc, kinds, reversed_chain=False)

    parts = comm.gather(payload, root=0, tag="partition result")
    if rank == 0:
        sol = _assemble_solution(parts, cross, plan, m_tilde.block_size, kinds)
    else:
        sol = None
    return comm.bcast(sol, root=0, tag="solution")


def _dist_worker(
    comm: Communicator,
    m_tilde: BlockMatrix,
    b_by_kind: dict[str, BlockMatrix],
    plan: PartitionPlan,
) -> tuple[SelectedSolution, DistStats]:
    counter = flops.FlopCounter()
    t0 = perf_counter()
    with flops.recording(counter):
        sol = _dist_body(comm, m_tilde, b_by_kind, plan, counter)
    wall = perf_counter() - t0
    record = {
        "flops": dict(counter.by_category),
        "bytes": comm.bytes_sent,
        "wall": wall,
    }
    records = comm.gather(record, root=0, tag="stats")
    if comm.rank == 0:
        stats = DistStats(
            plan,
            [r["flops"] for r in records],
            [r["bytes"] for r in records],
            [r["wall"] for r in records],
        )
    else:
        stats = None
    stats = comm.bcast(stats, root=0, tag="stats out")
    return sol, stats


def dist_selected_solve(
    m_tilde: BlockMatrix,
    b_lesser: BlockMatrix | None = None,
    b_greater: BlockMatrix | None = None,
    plan: PartitionPlan | None = None,
    comm: Communicator | None = None,
) -> tuple[SelectedSolution, DistStats]:
    """Distributed selected solve; call on every rank of ``comm`` with the
    same arguments.  Every rank returns the complete solution and stats.

    With a serial communicator (or ``p_s == 1``) this reduces exactly to
    the sequential solver.
    """
    if comm is None:
        comm = SerialCommunicator()
    if plan is None:
        plan = make_partition_plan(m_tilde.n_blocks, comm.size)
    if plan.n_blocks != m_tilde.n_blocks:
        raise PartitionError(
            f"plan covers {plan.n_blocks} blocks, matrix has {m_tilde.n_blocks}"
        )
    if plan.p_s != comm.size:
        raise PartitionError(
            f"plan has {plan.p_s} partitions but communicator has {comm.size} ranks"
        )
    if m_tilde.half_bandwidth > 1:
        raise PartitionError(
            f"solver expects a block-tridiagonal system, bandwidth {m_tilde.block_bandwidth}"
        )
    b_by_kind = {}
    if b_lesser is not None:
        b_by_kind[KIND_LESSER] = b_lesser
    if b_greater is not None:
        b_by_kind[KIND_GREATER] = b_greater
    return _dist_worker(comm, m_tilde, b_by_kind, plan)


def halo_bt_multiply(
    a: BlockMatrix, b: BlockMatrix, plan: PartitionPlan, rank: int
) -> BlockMatrix:
    """Block rows of ``a @ b`` owned by ``rank``'s partition, extended by
    one halo row on each side (the corner corrections of the distributed
    solve read one block beyond the partition).

    Off-partition rows of the result are zero; operands are replicated, so
    the halo read is local.
    """
    lo, hi = plan.ranges[rank]
    lo, hi = max(0, lo - 1), min(plan.n_blocks - 1, hi + 1)
    bw = min(a.block_bandwidth + b.block_bandwidth - 1, 2 * a.n_blocks - 1)
    out = BlockMatrix(a.n_blocks, a.block_size, bw, FULL)
    ha, hb = a.half_bandwidth, b.half_bandwidth
    n = a.n_blocks
    for i in range(lo, hi + 1):
        for j in range(max(0, i - ha - hb), min(n, i + ha + hb + 1)):
            acc = None
            for k in range(max(0, i - ha, j - hb), min(n, i + ha + 1, j + hb + 1)):
                term = gemm(_get(a, i, k), _get(b, k, j))
                acc = term if acc is None else acc + term
            if acc is not None:
                out.set_block(i, j, acc)
    return out
