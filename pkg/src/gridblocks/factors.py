"""Power transfer and outage distribution factors.

Conventions
-----------
``D[l, s->t]`` is the flow change on line ``l`` per MW injected at ``s`` and
withdrawn at ``t``. For a line ``lh = (s, t)`` the column ``D[:, lh]`` uses the
line's own endpoints. Outage factors ``K`` give the flow change on surviving
lines per MW of pre-outage flow on the outaged lines.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.linalg as sla

from .errors import (
    BridgeOutageError,
    ConditioningError,
    ControlError,
    CutSetError,
    DataError,
    UndefinedRatioError,
)
from .graphs import (
    BlockDecomposition,
    block_decomposition,
    network_spanning_trees,
    share_simple_cycle,
    two_tree_forests,
)
from .network import PowerNetwork, components
from .spectral import LaplacianSystem, build_system

log = logging.getLogger(__name__)

ZERO_TOL = 1e-9
COND_WARN = 1e8


# ---------------------------------------------------------------------------
# PTDF
# ---------------------------------------------------------------------------

def ptdf_pair(sys: LaplacianSystem, net: PowerNetwork, line_id: int, s: int, t: int) -> float:
    """``b_l (L+_is + L+_jt - L+_it - L+_js)`` for line ``l = (i, j)``; 0 when ``s == t``."""
    if s == t:
        return 0.0
    ln = net.line(line_id)
    i, j = ln.from_bus, ln.to_bus
    X = sys.pseudo_inverse
    return float(ln.susceptance * (X[i, s] + X[j, t] - X[i, t] - X[j, s]))


@dataclass(frozen=True, eq=False)
class PTDFMatrix:
    """``D = B C^T L^+ C`` with rows and columns labelled by line ids."""

    values: np.ndarray
    line_ids: tuple[int, ...]

    def index(self, line_id: int) -> int:
        return self.line_ids.index(line_id)

    def __getitem__(self, key: tuple[int, int]) -> float:
        a, b = key
        return float(self.values[self.index(a), self.index(b)])

    @property
    def diagonal(self) -> np.ndarray:
        return np.diag(self.values).copy()


def _ptdf_columns(sys: LaplacianSystem, net: PowerNetwork, cols: Sequence[int]) -> np.ndarray:
    """Columns of ``D`` for the lines at positions ``cols`` (all rows)."""
    ends = net.endpoints
    b = net.susceptances
    X = sys.pseudo_inverse
    cols = list(cols)
    # L+ C restricted to the requested columns
    Y = X[:, ends[cols, 0]] - X[:, ends[cols, 1]]
    return b[:, None] * (Y[ends[:, 0], :] - Y[ends[:, 1], :])


def ptdf_matrix(sys: LaplacianSystem, net: PowerNetwork) -> PTDFMatrix:
    """Full ``m x m`` PTDF matrix; entries between islands are 0."""
    D = _ptdf_columns(sys, net, range(net.m))
    return PTDFMatrix(D, tuple(int(e) for e in net.line_ids))


def ptdf_forest_matrix(net: PowerNetwork) -> PTDFMatrix:
    """PTDF matrix from spanning-tree and two-tree-forest weight sums.

    ``D[l, s->t] = b_l (F({i,s},{j,t}) - F({i,t},{j,s})) / T`` with ``T`` the
    weighted spanning-tree sum and ``F(A, B)`` the weighted sum over two-tree
    forests separating ``A`` from ``B``. Exponential cost; connected networks
    with a handful of buses only.
    """
    if not net.is_connected():
        raise DataError("forest formula needs a connected network")
    b = {ln.id: ln.susceptance for ln in net.lines}
    total = math.fsum(math.prod(b[e] for e in T) for T in network_spanning_trees(net))
    forests = [(math.prod(b[e] for e in F), roots) for F, roots in two_tree_forests(net)]

    def F(a: set[int], c: set[int]) -> float:
        if a & c:
            return 0.0
        acc = []
        for w, roots in forests:
            ra = {roots[v] for v in a}
            rc = {roots[v] for v in c}
            if len(ra) == 1 and len(rc) == 1 and ra != rc:
                acc.append(w)
        return math.fsum(acc)

    m = net.m
    D = np.zeros((m, m))
    for r, ln in enumerate(net.lines):
        i, j = ln.from_bus, ln.to_bus
        for c, lh in enumerate(net.lines):
            s, t = lh.from_bus, lh.to_bus
            D[r, c] = ln.susceptance * (F({i, s}, {j, t}) - F({i, t}, {j, s})) / total
    return PTDFMatrix(D, tuple(int(e) for e in net.line_ids))


def zero_ptdf_by_cycle(bd: BlockDecomposition, line: int, outaged: int) -> bool:
    """True certifies ``D[line, outaged] == 0``; False certifies nothing."""
    return not share_simple_cycle(bd, line, outaged)


# ---------------------------------------------------------------------------
# single and multiple line outages
# ---------------------------------------------------------------------------

def _is_bridge(sys: LaplacianSystem, net: PowerNetwork, pos: int) -> bool:
    d = _ptdf_columns(sys, net, [pos])[pos, 0]
    return abs(d - 1.0) < ZERO_TOL


def lodf(sys: LaplacianSystem, net: PowerNetwork, line: int, outaged: int, bd: BlockDecomposition | None = None) -> float:
    """Single-line outage factor ``K = D[l, lh] / (1 - D[lh, lh])``.

    Raises
    ------
    BridgeOutageError
        ``outaged`` is a bridge; use :func:`bridge_outage_lodf`.
    """
    ph, pl = net.position(outaged), net.position(line)
    if bd is not None:
        bridge = not bd.is_nontrivial(bd.block_of_line[outaged])
    else:
        bridge = _is_bridge(sys, net, ph)
    if bridge:
        raise BridgeOutageError(f"line {outaged} is a bridge; its outage is a cut set (see bridge_outage_lodf)")
    if pl == ph:
        return -1.0
    col = _ptdf_columns(sys, net, [ph])[:, 0]
    return float(col[pl] / (1.0 - col[ph]))


def lodf_from_resistance(sys: LaplacianSystem, net: PowerNetwork, line: int, outaged: int) -> float:
    """Same factor written with effective resistances."""
    ln, lh = net.line(line), net.line(outaged)
    i, j, s, t = ln.from_bus, ln.to_bus, lh.from_bus, lh.to_bus
    X = sys.pseudo_inverse
    d = np.diag(X)

    def R(a: int, c: int) -> float:
        return float(d[a] + d[c] - 2 * X[a, c])

    num = ln.susceptance * (R(i, t) - R(i, s) + R(j, s) - R(j, t))
    return num / (2.0 * (1.0 - lh.susceptance * R(s, t)))


@dataclass(frozen=True, eq=False)
class GLODFMatrix:
    """``K^E`` of shape ``(m - |E|, |E|)``.

    Attributes
    ----------
    outage_set : tuple of int
        Outaged line ids (columns).
    survivors : tuple of int
        Surviving line ids (rows), in network order.
    values : ndarray
    condition : float
        2-norm condition number of ``I - D_EE``.
    """

    outage_set: tuple[int, ...]
    survivors: tuple[int, ...]
    values: np.ndarray
    condition: float = 1.0

    def __getitem__(self, key: tuple[int, int]) -> float:
        a, b = key
        return float(self.values[self.survivors.index(a), self.outage_set.index(b)])

    def flow_change(self, f_outaged: Sequence[float]) -> np.ndarray:
        return self.values @ np.asarray(f_outaged, dtype=float)


def _new_islands(net: PowerNetwork, outage: Iterable[int]) -> list[list[int]] | None:
    """Islands created by removing ``outage``; None if it is not a cut set."""
    before = len(net.islands())
    after = net.without_lines(outage).islands()
    return after if len(after) > before else None


def _split(net: PowerNetwork, outage: Sequence[int]) -> tuple[list[int], list[int]]:
    E = [net.position(e) for e in outage]
    if len(set(E)) != len(E):
        raise DataError("outage set has repeated lines")
    Es = set(E)
    rest = [k for k in range(net.m) if k not in Es]
    return E, rest


def glodf(sys: LaplacianSystem, net: PowerNetwork, outage: Iterable[int]) -> GLODFMatrix:
    """Outage factors for a simultaneous non-cut outage ``E``.

    ``K^E = D[-E, E] (I - D[E, E])^{-1}``, solved by LU with partial pivoting.

    Raises
    ------
    CutSetError
        Removing ``E`` disconnects an island.
    ConditioningError
        ``I - D[E, E]`` is numerically singular.
    """
    outage = tuple(int(e) for e in outage)
    islands = _new_islands(net, outage)
    if islands is not None:
        raise CutSetError(f"outage {list(outage)} is a cut set creating islands; use cutset_flow_change", islands)
    E, rest = _split(net, outage)
    if not E:
        return GLODFMatrix((), tuple(int(net.lines[k].id) for k in rest), np.zeros((len(rest), 0)))
    cols = _ptdf_columns(sys, net, E)
    A = np.eye(len(E)) - cols[E, :]
    cond = float(np.linalg.cond(A))
    if not np.isfinite(cond) or cond > 1e15:
        raise ConditioningError(f"I - D_EE is singular for outage {list(outage)} (cond={cond:.3g})")
    if cond > COND_WARN:
        log.warning("I - D_EE poorly conditioned for outage %s: cond=%.3g", list(outage), cond)
    lu = sla.lu_factor(A)
    # K A = D[-E,E]  <=>  A^T K^T = D[-E,E]^T
    K = sla.lu_solve(lu, cols[rest, :].T, trans=1).T
    return GLODFMatrix(outage, tuple(int(net.lines[k].id) for k in rest), K, cond)


def lodf_submatrix(sys: LaplacianSystem, net: PowerNetwork, outage: Iterable[int]) -> GLODFMatrix:
    """Columns of single-outage factors ``D[-E, E] (I - diag D[E, E])^{-1}``.

    Each column describes the outage of that line alone.

    Raises
    ------
    BridgeOutageError
        Some line of ``E`` is a bridge.
    """
    outage = tuple(int(e) for e in outage)
    E, rest = _split(net, outage)
    cols = _ptdf_columns(sys, net, E)
    diag = cols[E, :].diagonal() if E else np.zeros(0)
    bridges = [outage[k] for k, d in enumerate(diag) if abs(d - 1.0) < ZERO_TOL]
    if bridges:
        raise BridgeOutageError(f"lines {bridges} are bridges; single-outage factors are undefined for them")
    K = cols[rest, :] / (1.0 - diag)[None, :]
    return GLODFMatrix(outage, tuple(int(net.lines[k].id) for k in rest), K)


def glodf_from_submatrix(sys: LaplacianSystem, net: PowerNetwork, outage: Iterable[int]) -> np.ndarray:
    """``K^E`` rebuilt as ``K_{-EE} (I - diag D_EE)(I - D_EE)^{-1}``."""
    outage = tuple(int(e) for e in outage)
    E, _ = _split(net, outage)
    Ksub = lodf_submatrix(sys, net, outage).values
    DEE = _ptdf_columns(sys, net, E)[E, :]
    I = np.eye(len(E))
    right = np.linalg.solve((I - DEE).T, (I - np.diag(np.diag(DEE))).T).T
    return Ksub @ right


# ---------------------------------------------------------------------------
# cut-set outages under proportional control
# ---------------------------------------------------------------------------

def _island_check(net: PowerNetwork, outage: Sequence[int], island: Sequence[int]) -> list[int]:
    I = sorted(int(v) for v in island)
    after = net.without_lines(outage).islands()
    if I not in after:
        raise CutSetError(f"vertices {I[:8]}{'...' if len(I) > 8 else ''} do not form an island after the outage", after)
    return I


def _tie_inflow(net: PowerNetwork, line_id: int, inside: set[int], f_pre: np.ndarray) -> tuple[int, float]:
    """Endpoint inside the island and pre-outage flow oriented into it."""
    ln = net.line(line_id)
    f = float(f_pre[net.position(line_id)])
    fi, ti = ln.from_bus in inside, ln.to_bus in inside
    if fi == ti:
        raise CutSetError(f"line {line_id} is not a tie line of the island")
    return (ln.to_bus, f) if ti else (ln.from_bus, -f)


def island_imbalance(net: PowerNetwork, p: Sequence[float], outage: Iterable[int], island: Sequence[int]) -> float:
    """Net injection ``sum(p_I)`` of an island created by ``outage``."""
    outage = list(outage)
    I = _island_check(net, outage, island)
    return math.fsum(np.asarray(p, dtype=float)[I])


def island_imbalance_from_flows(net: PowerNetwork, f_pre: Sequence[float], outage: Iterable[int], island: Sequence[int]) -> float:
    """Same quantity as minus the pre-outage tie-line flow entering the island."""
    outage = list(outage)
    I = _island_check(net, outage, island)
    inside = set(I)
    f_pre = np.asarray(f_pre, dtype=float)
    ties = [e for e in outage if (net.line(e).from_bus in inside) != (net.line(e).to_bus in inside)]
    return -math.fsum(_tie_inflow(net, e, inside, f_pre)[1] for e in ties)


def participation(alpha: Mapping[int, float] | Sequence[float], n: int, island: Sequence[int], tol: float = 1e-9) -> np.ndarray:
    """Validate proportional-control weights and return them as a length-``n`` vector."""
    if isinstance(alpha, Mapping):
        a = np.zeros(n)
        for k, w in alpha.items():
            a[int(k)] = float(w)
    else:
        a = np.asarray(alpha, dtype=float)
        if a.shape != (n,):
            raise ControlError(f"participation vector has shape {a.shape}, expected ({n},)")
    if np.any(a < 0) or not np.all(np.isfinite(a)):
        raise ControlError("participation factors must be finite and nonnegative")
    total = math.fsum(a[list(island)])
    if abs(total - 1.0) > tol:
        raise ControlError(f"participation factors sum to {total} on the island, expected 1")
    return a


@dataclass(frozen=True, eq=False)
class FlowChange:
    """Flow changes on the surviving lines of an island, labelled by line id."""

    line_ids: tuple[int, ...]
    delta: np.ndarray

    def as_dict(self) -> dict[int, float]:
        return {e: float(d) for e, d in zip(self.line_ids, self.delta)}


def cutset_flow_change(
    net: PowerNetwork,
    island: Sequence[int],
    internal: Iterable[int],
    ties: Iterable[int],
    alpha: Mapping[int, float] | Sequence[float],
    f_pre: Sequence[float],
    system: LaplacianSystem | None = None,
) -> FlowChange:
    """Flow change inside an island after a cut-set outage with proportional control.

    The island ``I`` loses its tie lines ``ties`` and the internal lines
    ``internal``. Its imbalance is spread over buses by ``alpha``. With
    ``D`` and ``K`` computed on the island alone and ``f_t`` the tie flow
    entering ``I`` at bus ``j(t)``::

        df = K f_int + sum_t f_t sum_k alpha_k (D[-int, k->j(t)] + K D[int, k->j(t)])

    Parameters
    ----------
    net : PowerNetwork
        Pre-outage network.
    island : sequence of int
        Vertices of ``I``; must be an island of ``net`` minus both line sets.
    internal, ties : iterable of int
        Line ids. ``internal`` must not disconnect ``I``.
    alpha : mapping or array
        Participation factors, nonnegative and summing to 1 on ``I``.
    f_pre : array_like
        Pre-outage flows of ``net`` in network line order.
    system : LaplacianSystem, optional
        System of the induced island network, if already built.

    Raises
    ------
    ControlError
        ``alpha`` is not normalized on ``I``.
    CutSetError
        ``internal`` splits ``I`` or ``I`` is not an island.
    """
    internal, ties = [int(e) for e in internal], [int(e) for e in ties]
    I = _island_check(net, internal + ties, island)
    inside = set(I)
    f_pre = np.asarray(f_pre, dtype=float)
    a = participation(alpha, net.n, I)
    sub, vmap = net.induced(I)
    local = {int(v): k for k, v in enumerate(vmap)}
    for e in internal:
        if not sub.has_line(e):
            raise CutSetError(f"line {e} is not internal to the island")
    sys_I = system if system is not None else build_system(sub)
    E, rest = _split(sub, internal)
    if E:
        if _new_islands(sub, internal) is not None:
            raise CutSetError(f"internal outage {internal} splits the island")
        K = glodf(sys_I, sub, internal).values
    else:
        K = np.zeros((len(rest), 0))
    f_int = np.array([f_pre[net.position(e)] for e in internal])
    delta = K @ f_int if E else np.zeros(len(rest))

    # injection shift that moves each tie inflow from its endpoint to the participants
    shift = np.zeros(sub.n)
    a_loc = np.array([a[v] for v in vmap])
    for e in ties:
        j, f_in = _tie_inflow(net, e, inside, f_pre)
        shift += f_in * a_loc
        shift[local[j]] -= f_in
    theta = sys_I.pseudo_inverse @ shift
    ends = sub.endpoints
    d0 = sub.susceptances * (theta[ends[:, 0]] - theta[ends[:, 1]])
    delta = delta + d0[rest] + (K @ d0[E] if E else 0.0)
    return FlowChange(tuple(int(sub.lines[k].id) for k in rest), delta)


def bridge_outage_lodf(
    net: PowerNetwork,
    line: int,
    bridge: int,
    alpha: Mapping[int, float] | Sequence[float],
    f_pre: Sequence[float],
) -> float:
    """Flow change on ``line`` per MW of pre-outage bridge flow.

    The island containing ``line`` after the bridge opens rebalances by
    ``alpha``. With ``jh`` the bridge endpoint in that island the factor is
    ``+-sum_k alpha_k D[line, k->jh]``, the sign being + when the bridge is
    oriented into the island.

    Raises
    ------
    UndefinedRatioError
        The bridge carries no flow, so both islands are unaffected.
    CutSetError
        ``bridge`` is not a bridge, or ``line`` is the bridge itself.
    """
    if line == bridge:
        raise CutSetError("the monitored line is the outaged bridge")
    islands = _new_islands(net, [bridge])
    if islands is None:
        raise CutSetError(f"line {bridge} is not a bridge")
    fb = float(np.asarray(f_pre, dtype=float)[net.position(bridge)])
    if fb == 0.0:
        raise UndefinedRatioError(f"bridge {bridge} carries no flow; the ratio is undefined")
    ln = net.line(line)
    I = next(c for c in islands if ln.from_bus in c)
    change = cutset_flow_change(net, I, [], [bridge], alpha, f_pre)
    return change.as_dict()[line] / fb


# ---------------------------------------------------------------------------
# localization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InfluenceGraph:
    nodes: tuple[int, ...]
    edges: tuple[tuple[int, int], ...]
    k_min: float

    def components(self) -> list[list[int]]:
        index = {e: k for k, e in enumerate(self.nodes)}
        ends = np.array([(index[a], index[b]) for a, b in self.edges], dtype=int).reshape(-1, 2)
        return [[self.nodes[k] for k in c] for c in components(len(self.nodes), ends)]

    def nontrivial_components(self) -> list[list[int]]:
        return [c for c in self.components() if len(c) > 1]


def lodf_matrix(sys: LaplacianSystem, net: PowerNetwork) -> tuple[np.ndarray, np.ndarray]:
    """All single-outage factors; bridge columns are NaN.

    Returns ``(K, is_bridge)`` with ``K[r, c]`` the change on line ``r`` per
    MW on outaged line ``c`` and ``K[c, c] = -1``.
    """
    D = _ptdf_columns(sys, net, range(net.m))
    diag = np.diag(D).copy()
    is_bridge = np.abs(diag - 1.0) < ZERO_TOL
    with np.errstate(divide="ignore", invalid="ignore"):
        K = D / (1.0 - diag)[None, :]
    K[:, is_bridge] = np.nan
    K[np.arange(net.m), np.arange(net.m)] = np.where(is_bridge, np.nan, -1.0)
    return K, is_bridge


def influence_graph(sys: LaplacianSystem, net: PowerNetwork, k_min: float) -> InfluenceGraph:
    """Line graph keeping pairs whose larger directed outage factor exceeds ``k_min``.

    Bridges never act as the outaged line but remain nodes.
    """
    if not k_min > 0:
        raise DataError("k_min must be positive")
    K, _ = lodf_matrix(sys, net)
    A = np.abs(np.nan_to_num(K, nan=0.0))
    A = np.maximum(A, A.T)
    np.fill_diagonal(A, 0.0)
    ids = tuple(int(e) for e in net.line_ids)
    r, c = np.nonzero(np.triu(A > k_min, k=1))
    edges = tuple(sorted((min(ids[a], ids[b]), max(ids[a], ids[b])) for a, b in zip(r, c)))
    return InfluenceGraph(ids, edges, float(k_min))


ZERO_CERTIFIED = "certified_zero"
CYCLE_BLOCKED = "cycle_blocked"
UNKNOWN = "unknown"


def zero_glodf_conditions(net: PowerNetwork, outage: Iterable[int], line: int, outaged: int,
                          bd: BlockDecomposition | None = None) -> str:
    """Topological certificate for ``K^E[line, outaged] == 0``.

    Returns
    -------
    str
        ``certified_zero`` if the two lines share no simple cycle of the
        network, ``cycle_blocked`` if they share one but every such cycle runs
        through another line of ``E``, ``unknown`` otherwise.
    """
    outage = [int(e) for e in outage]
    if outaged not in outage or line in outage:
        raise DataError("outaged must belong to E and line must survive it")
    bd = bd if bd is not None else block_decomposition(net)
    if not share_simple_cycle(bd, line, outaged):
        return ZERO_CERTIFIED
    others = [e for e in outage if e != outaged]
    bd_rest = block_decomposition(net.without_lines(others))
    if not share_simple_cycle(bd_rest, line, outaged):
        return CYCLE_BLOCKED
    return UNKNOWN


def cross_block_max(K: np.ndarray, net: PowerNetwork, bd: BlockDecomposition, row_ids: Sequence[int], col_ids: Sequence[int]) -> float:
    """Largest ``|K|`` over entries whose lines lie in different blocks."""
    best = 0.0
    for r, a in enumerate(row_ids):
        for c, b in enumerate(col_ids):
            if a != b and bd.block_of_line[a] != bd.block_of_line[b]:
                v = K[r, c]
                if np.isfinite(v):
                    best = max(best, abs(float(v)))
    return best
