"""Optimal line switching that turns a target partition into bridge-blocks.

``obs_solve`` picks which cross-edges of a partition to open so that the
reduced graph becomes a tree while keeping the worst line loading as low as
possible. ``one_shot`` and ``recursive_refine`` wrap it with the clustering
step to refine the bridge-block decomposition of a whole network.
"""

from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .clustering import FlowWeights, obi_solve
from .errors import (
    CutSetError,
    DegenerateError,
    PartitionError,
    UndefinedObjectiveError,
)
from .factors import glodf
from .graphs import (
    DEFAULT_TREE_CAP,
    BridgeBlockDecomposition,
    Partition,
    bridges_and_bridge_blocks,
    cross_edges,
    enumerate_spanning_trees,
    is_finer,
    is_tree,
    reduced_graph,
    spanning_tree_count,
)
from .network import PowerNetwork
from .spectral import LaplacianSystem, build_system, dc_flow

log = logging.getLogger(__name__)

STOP_MAX_ITERS = "max_iters"
STOP_CONGESTION = "congestion_threshold"
STOP_EXHAUSTED = "exhausted"


def thread_count(default: int = 1) -> int:
    """Worker count from ``GRIDBLOCKS_THREADS`` (unset or invalid means ``default``)."""
    try:
        return max(1, int(os.environ.get("GRIDBLOCKS_THREADS", default)))
    except ValueError:
        return default


def _loading(flows: np.ndarray, caps: np.ndarray) -> tuple[float, int]:
    ratio = np.zeros_like(flows)
    finite = np.isfinite(caps)
    ratio[finite] = np.abs(flows[finite]) / caps[finite]
    gamma = float(ratio.max()) if ratio.size else 0.0
    return gamma, int(np.count_nonzero(ratio > 1.0))


@dataclass(frozen=True, eq=False)
class CongestionResult:
    gamma: float
    congested_count: int
    flows: np.ndarray
    line_ids: tuple[int, ...]


def congestion_level(net: PowerNetwork, switched: Iterable[int], p: Sequence[float]) -> CongestionResult:
    """``max |f_l| / C_l`` over the lines left after opening ``switched``.

    Lines with unlimited capacity contribute 0.

    Raises
    ------
    CutSetError
        Opening ``switched`` splits an island.
    """
    switched = list(switched)
    after = net.without_lines(switched)
    if len(after.islands()) > len(net.islands()):
        raise CutSetError(f"opening {sorted(switched)} disconnects the network", after.islands())
    f = dc_flow(build_system(after), after, p)
    gamma, count = _loading(f, after.capacities)
    return CongestionResult(gamma, count, f, tuple(int(e) for e in after.line_ids))


@dataclass(frozen=True, eq=False)
class SwitchingPlan:
    """Lines to open and the state they produce.

    Attributes
    ----------
    switched_lines : tuple of int
        Sorted ids of the opened lines.
    gamma : float
        Congestion level after switching, over the network the plan was
        solved on.
    congested_count : int
        Lines loaded above capacity after switching.
    flows_after : ndarray
        Flows on the surviving lines, labelled by ``line_ids_after``.
    line_ids_after : tuple of int
    resulting_bb : BridgeBlockDecomposition
        Decomposition of the network after switching.
    partition : Partition
        Target partition of the solved network.
    candidates : int
        Number of switching sets evaluated.
    """

    switched_lines: tuple[int, ...]
    gamma: float
    congested_count: int
    flows_after: np.ndarray
    line_ids_after: tuple[int, ...]
    resulting_bb: BridgeBlockDecomposition
    partition: Partition
    candidates: int = 0
    extras: dict = field(default_factory=dict)

    @property
    def overloaded(self) -> bool:
        return self.gamma > 1.0

    def to_dict(self) -> dict:
        out = {
            "switched_lines": list(self.switched_lines),
            "gamma": self.gamma,
            "congested_count": self.congested_count,
            "overloaded": self.overloaded,
            "candidates_evaluated": self.candidates,
            "partition": self.partition.to_list(),
            "bridge_blocks": {
                "count": self.resulting_bb.num_blocks,
                "bridges": sorted(self.resulting_bb.bridges),
                "nontrivial_sizes": self.resulting_bb.nontrivial_sizes,
            },
            "flows_after": {str(e): float(f) for e, f in zip(self.line_ids_after, self.flows_after)},
        }
        out.update(self.extras)
        return out


def _sort_key(gamma: float, count: int, switched: tuple[int, ...]) -> tuple:
    # round so that last-bit noise does not decide between equal candidates
    return (round(gamma, 10), count, switched)


def _evaluate(sys: LaplacianSystem, net: PowerNetwork, f: np.ndarray, caps: np.ndarray,
              switched: tuple[int, ...]) -> tuple[tuple, np.ndarray]:
    if not switched:
        gamma, count = _loading(f, caps)
        return _sort_key(gamma, count, switched), f
    K = glodf(sys, net, switched)
    pos = net.positions(switched)
    keep = np.ones(net.m, dtype=bool)
    keep[pos] = False
    after = f[keep] + K.values @ f[pos]
    gamma, count = _loading(after, caps[keep])
    return _sort_key(gamma, count, switched), after


def _best_plan(net: PowerNetwork, p: np.ndarray, P: Partition, candidates: Iterable[tuple[int, ...]],
               threads: int | None = None) -> SwitchingPlan:
    sys = build_system(net)
    f = dc_flow(sys, net, p)
    caps = net.capacities
    cands = list(candidates)
    if not cands:
        raise DegenerateError("no switching candidates")
    workers = threads or thread_count()

    def run(c):
        return _evaluate(sys, net, f, caps, c)

    if workers > 1 and len(cands) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, cands, chunksize=max(1, len(cands) // (4 * workers))))
    else:
        results = [run(c) for c in cands]
    k = min(range(len(cands)), key=lambda i: results[i][0])
    key, flows = results[k]
    switched = key[2]
    after = net.without_lines(switched)
    gamma, count = _loading(flows, after.capacities)
    return SwitchingPlan(switched, gamma, count, flows, tuple(int(e) for e in after.line_ids),
                         bridges_and_bridge_blocks(after), P, len(cands))


def _require_obs_input(net: PowerNetwork, P: Partition) -> None:
    if P.n != net.n:
        raise PartitionError("partition and network have different vertex counts")
    if not P.satisfies_a1(net):
        raise PartitionError("every cluster must induce a connected subgraph")
    if not reduced_graph(net, P).is_connected():
        raise PartitionError("reduced graph is disconnected")


def obs_solve(net: PowerNetwork, p: Sequence[float], P: Partition, cap: int = DEFAULT_TREE_CAP,
              threads: int | None = None) -> SwitchingPlan:
    """Best set of cross-edges to open so the reduced graph becomes a tree.

    Every spanning tree ``T`` of the reduced graph gives the candidate
    ``E_c(P) minus T``. Candidates are ranked by congestion level, then by
    the number of overloaded lines, then lexicographically.

    Raises
    ------
    EnumerationCapError
        The reduced graph has more than ``cap`` spanning trees.
    PartitionError
        A cluster is disconnected or the reduced graph is.
    """
    p = np.asarray(p, dtype=float)
    _require_obs_input(net, P)
    rg = reduced_graph(net, P)
    cross = set(rg.line_ids)
    if is_tree(rg):
        plan = _best_plan(net, p, P, [()], threads)
        plan.extras["spanning_trees"] = 1
        return plan
    count = spanning_tree_count(rg)
    trees = enumerate_spanning_trees(rg, cap)
    cands = (tuple(sorted(cross - set(T))) for T in trees)
    plan = _best_plan(net, p, P, cands, threads)
    plan.extras["spanning_trees"] = count
    return plan


def obs_bipartition(net: PowerNetwork, p: Sequence[float], P: Partition, threads: int | None = None) -> SwitchingPlan:
    """Two-cluster case: keep exactly one cross-edge and open the others.

    Raises
    ------
    DegenerateError
        The two clusters share no line.
    """
    if P.b != 2:
        raise PartitionError(f"expected a bipartition, got {P.b} clusters")
    p = np.asarray(p, dtype=float)
    cross = sorted(cross_edges(net, P))
    if not cross:
        raise DegenerateError("the two clusters are not joined by any line")
    _require_obs_input(net, P)
    cands = [tuple(e for e in cross if e != keep) for keep in cross]
    plan = _best_plan(net, p, P, cands, threads)
    plan.extras["spanning_trees"] = len(cross)
    return plan


# ---------------------------------------------------------------------------
# working on one bridge-block in isolation
# ---------------------------------------------------------------------------

def boundary_injections(net: PowerNetwork, p: Sequence[float], block: Sequence[int], flows: Sequence[float]) -> np.ndarray:
    """Injections of the subnetwork induced by ``block`` with boundary flows folded in.

    A line ``(u, v)`` with one endpoint in the block and flow ``f`` (from
    ``u`` to ``v``) lowers the injection at ``u`` by ``f`` when ``u`` is
    inside, and raises it at ``v`` by ``f`` when ``v`` is inside.
    """
    p = np.asarray(p, dtype=float)
    flows = np.asarray(flows, dtype=float)
    verts = sorted(int(v) for v in block)
    local = {v: k for k, v in enumerate(verts)}
    q = p[verts].copy()
    for k, ln in enumerate(net.lines):
        fi, ti = ln.from_bus in local, ln.to_bus in local
        if fi and not ti:
            q[local[ln.from_bus]] -= flows[k]
        elif ti and not fi:
            q[local[ln.to_bus]] += flows[k]
    return q


def local_flow_update(net: PowerNetwork, p: Sequence[float], block: Sequence[int], removed: Iterable[int],
                      prior_flows: Sequence[float]) -> np.ndarray:
    """Flows after opening lines inside one bridge-block, solving only that block.

    Parameters
    ----------
    net : PowerNetwork
        Network before opening ``removed``.
    p : array_like
        Balanced injections of ``net``.
    block : sequence of int
        A bridge-block of ``net`` containing both ends of every removed line.
    removed : iterable of int
        Line ids to open.
    prior_flows : array_like
        Flows of ``net`` in its line order.

    Returns
    -------
    ndarray
        Flows of ``net.without_lines(removed)`` in its line order. Entries
        outside the block are copied from ``prior_flows`` unchanged.

    Raises
    ------
    CutSetError
        The removed lines split the block.
    """
    removed = [int(e) for e in removed]
    prior = np.asarray(prior_flows, dtype=float)
    after = net.without_lines(removed)
    if not removed:
        return prior.copy()
    inside = set(int(v) for v in block)
    for e in removed:
        ln = net.line(e)
        if ln.from_bus not in inside or ln.to_bus not in inside:
            raise CutSetError(f"line {e} is not inside the block")
    sub, _ = after.induced(sorted(inside))
    if len(sub.islands()) > 1:
        raise CutSetError(f"opening {removed} splits the block", sub.islands())
    # boundary lines are bridges of net, so their flows carry over
    prior_after = np.array([prior[net.position(e)] for e in after.line_ids])
    q = boundary_injections(after, p, sorted(inside), prior_after)
    f_sub = dc_flow(build_system(sub), sub, q)
    out = prior_after.copy()
    for k, e in enumerate(sub.line_ids):
        out[after.position(int(e))] = f_sub[k]
    return out


def _isolate(net: PowerNetwork, p: np.ndarray, flows: np.ndarray, block: Sequence[int]):
    sub, vmap = net.induced(block)
    q = boundary_injections(net, p, block, flows)
    return sub, vmap, q


def _lift(P: Partition, vmap: np.ndarray) -> list[list[int]]:
    return [[int(vmap[v]) for v in c] for c in P.clusters]


def one_shot(net: PowerNetwork, p: Sequence[float], b: int, method: str = "fastgreedy",
             cap: int = DEFAULT_TREE_CAP, threads: int | None = None) -> SwitchingPlan:
    """Refine the largest bridge-block into (at least) ``b`` blocks in one step.

    The largest bridge-block is solved in isolation with boundary injections
    adjusted for its bridge flows. The returned plan reports network-wide
    flows and congestion after switching; the block-only congestion is in
    ``extras["gamma_block"]``.
    """
    if b < 2:
        raise PartitionError("one-shot refinement needs b >= 2")
    p = np.asarray(p, dtype=float)
    sys = build_system(net)
    f = dc_flow(sys, net, p)
    gamma0, _ = _loading(f, net.capacities)
    bb = bridges_and_bridge_blocks(net)
    block = bb.largest_block()
    extras = {"gamma_before": gamma0, "block": list(block), "method": method, "b": b}
    if len(block) < 3 or len(block) < b:
        log.info("largest bridge-block has %d bus(es); nothing to refine", len(block))
        gamma, count = _loading(f, net.capacities)
        extras.update(gamma_block=gamma, target_partition=[list(block)], spanning_trees=1)
        return SwitchingPlan((), gamma, count, f, tuple(int(e) for e in net.line_ids), bb,
                             bb.blocks, 0, extras)
    sub, vmap, q = _isolate(net, p, f, block)
    f_sub = dc_flow(build_system(sub), sub, q)
    res = obi_solve(FlowWeights.from_flows(sub, f_sub), sub, b, method)
    plan = obs_solve(sub, q, res.partition, cap, threads)
    after = net.without_lines(plan.switched_lines)
    f_after = local_flow_update(net, p, block, plan.switched_lines, f)
    gamma, count = _loading(f_after, after.capacities)
    extras.update(
        gamma_block=plan.gamma,
        target_partition=_lift(res.partition, vmap),
        Q=res.Q,
        Q_n=res.Q_n,
        spanning_trees=plan.extras.get("spanning_trees"),
    )
    full_partition = _block_partition(bb, block, res.partition, vmap)
    return SwitchingPlan(plan.switched_lines, gamma, count, f_after, tuple(int(e) for e in after.line_ids),
                         bridges_and_bridge_blocks(after), full_partition, plan.candidates, extras)


def _block_partition(bb: BridgeBlockDecomposition, block: Sequence[int], P: Partition, vmap: np.ndarray) -> Partition:
    """Global partition: the block's clusters plus every other bridge-block."""
    key = tuple(block)
    clusters = _lift(P, vmap) + [list(c) for c in bb.blocks.clusters if c != key]
    return Partition(tuple(tuple(c) for c in clusters), bb.blocks.n)


# ---------------------------------------------------------------------------
# recursive refinement
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Iteration:
    index: int
    block_size: int
    switched: tuple[int, ...]
    gamma: float
    congested_count: int
    bb_sizes: tuple[int, ...]
    num_blocks: int
    runtime_s: float
    block: tuple[int, ...] = ()
    local_deviation: float | None = None


@dataclass(frozen=True, eq=False)
class RefinementTrace:
    iterations: tuple[Iteration, ...]
    stop_reason: str
    gamma_initial: float
    network: PowerNetwork
    flows: np.ndarray
    decomposition: BridgeBlockDecomposition

    @property
    def switched_lines(self) -> tuple[int, ...]:
        return tuple(sorted(e for it in self.iterations for e in it.switched))

    def to_dict(self, timings: bool = False) -> dict:
        its = []
        for it in self.iterations:
            d = {
                "iteration": it.index,
                "block_size": it.block_size,
                "switched_lines": list(it.switched),
                "gamma": it.gamma,
                "congested_count": it.congested_count,
                "bridge_block_count": it.num_blocks,
                "nontrivial_sizes": list(it.bb_sizes),
                "block": list(it.block),
            }
            if it.local_deviation is not None:
                d["local_vs_global_max_abs"] = it.local_deviation
            if timings:
                d["runtime_s"] = it.runtime_s
            its.append(d)
        return {
            "stop_reason": self.stop_reason,
            "gamma_initial": self.gamma_initial,
            "iterations": its,
            "switched_lines": list(self.switched_lines),
            "final_bridge_blocks": {
                "count": self.decomposition.num_blocks,
                "nontrivial_sizes": self.decomposition.nontrivial_sizes,
            },
        }


def recursive_refine(
    net: PowerNetwork,
    p: Sequence[float],
    i_max: int = 3,
    delta: float = 1.0,
    method: str = "fastgreedy",
    cap: int = DEFAULT_TREE_CAP,
    threads: int | None = None,
    check_local: bool = False,
) -> RefinementTrace:
    """Split the largest bridge-block in two, repeatedly.

    Each iteration clusters the current largest bridge-block into two
    groups, opens all but one of the lines between them, and updates flows
    inside that block only. The loop runs while the network-wide congestion
    level stays below ``delta`` and fewer than ``i_max`` splits were made.
    A block whose clustering comes back as a single group is skipped in
    favour of the next largest one.

    Parameters
    ----------
    check_local : bool
        Also run a global flow solve after every iteration and record the
        largest deviation from the local update on the iteration.
    """
    p = np.asarray(p, dtype=float)
    cur = net
    f = dc_flow(build_system(cur), cur, p)
    gamma, _ = _loading(f, cur.capacities)
    gamma0 = gamma
    bb = bridges_and_bridge_blocks(cur)
    iterations: list[Iteration] = []
    reason = STOP_MAX_ITERS
    i = 0
    while True:
        if i >= i_max:
            reason = STOP_MAX_ITERS
            break
        if not gamma < delta:
            reason = STOP_CONGESTION
            break
        t0 = time.perf_counter()
        step = None
        for block in bb.blocks_by_size():
            if len(block) < 3:
                break
            step = _split_block(cur, p, f, block, method, cap, threads)
            if step is not None:
                break
            log.warning("bipartition of block of size %d is trivial; trying next block", len(block))
        if step is None:
            reason = STOP_EXHAUSTED
            break
        block, plan = step
        nxt = cur.without_lines(plan.switched_lines)
        f = local_flow_update(cur, p, block, plan.switched_lines, f)
        deviation = None
        if check_local:
            g = dc_flow(build_system(nxt), nxt, p)
            deviation = float(np.abs(g - f).max()) if f.size else 0.0
            log.info("iteration %d: local vs global flow deviation %.3g", i + 1, deviation)
        cur = nxt
        gamma, count = _loading(f, cur.capacities)
        bb = bridges_and_bridge_blocks(cur)
        i += 1
        iterations.append(Iteration(i, len(block), plan.switched_lines, gamma, count,
                                    tuple(bb.nontrivial_sizes), bb.num_blocks, time.perf_counter() - t0,
                                    tuple(int(v) for v in block), deviation))
    return RefinementTrace(tuple(iterations), reason, gamma0, cur, f, bb)


def _split_block(net: PowerNetwork, p: np.ndarray, f: np.ndarray, block: Sequence[int], method: str,
                 cap: int, threads: int | None) -> tuple[Sequence[int], SwitchingPlan] | None:
    sub, vmap, q = _isolate(net, p, f, block)
    f_sub = np.array([f[net.position(int(e))] for e in sub.line_ids])
    try:
        res = obi_solve(FlowWeights.from_flows(sub, f_sub), sub, 2, method)
    except UndefinedObjectiveError:
        return None
    P = res.partition
    if P.b < 2:
        return None
    plan = obs_bipartition(sub, q, P, threads) if P.b == 2 else obs_solve(sub, q, P, cap, threads)
    return block, plan


def check_plan(net: PowerNetwork, plan: SwitchingPlan) -> list[str]:
    """Structural checks for a plan solved on ``net``; returns failure messages."""
    problems = []
    after = net.without_lines(plan.switched_lines)
    if len(after.islands()) != len(net.islands()):
        problems.append("switching disconnects the network")
    if not is_tree(reduced_graph(after, plan.partition)):
        problems.append("reduced graph after switching is not a tree")
    if not is_finer(plan.resulting_bb.blocks, plan.partition):
        problems.append("bridge-blocks after switching are not finer than the target partition")
    return problems
