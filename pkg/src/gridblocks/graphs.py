"""Bridges, blocks, bridge-blocks, partitions and spanning-tree machinery."""

from __future__ import annotations

import itertools
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import EnumerationCapError, PartitionError
from .network import PowerNetwork, components

DEFAULT_TREE_CAP = 10**6


# ---------------------------------------------------------------------------
# partitions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Partition:
    """Disjoint cover of ``{0..n-1}`` by nonempty clusters.

    Clusters are stored sorted, and ordered by their smallest vertex, so two
    partitions with the same clusters compare equal.
    """

    clusters: tuple[tuple[int, ...], ...]
    n: int = field(default=-1)

    def __post_init__(self) -> None:
        cl = tuple(sorted((tuple(sorted(int(v) for v in c)) for c in self.clusters), key=lambda c: c[0] if c else -1))
        if any(len(c) == 0 for c in cl):
            raise PartitionError("clusters must be nonempty")
        flat = [v for c in cl for v in c]
        n = self.n if self.n >= 0 else len(flat)
        if len(flat) != len(set(flat)) or sorted(flat) != list(range(n)):
            raise PartitionError(f"clusters do not form a disjoint cover of 0..{n - 1}")
        object.__setattr__(self, "clusters", cl)
        object.__setattr__(self, "n", n)

    @classmethod
    def from_labels(cls, labels: Sequence[int]) -> "Partition":
        groups: dict[int, list[int]] = {}
        for v, lab in enumerate(labels):
            groups.setdefault(int(lab), []).append(v)
        return cls(tuple(tuple(g) for g in groups.values()), len(labels))

    @classmethod
    def singletons(cls, n: int) -> "Partition":
        return cls(tuple((v,) for v in range(n)), n)

    @classmethod
    def whole(cls, n: int) -> "Partition":
        return cls((tuple(range(n)),), n)

    @property
    def b(self) -> int:
        return len(self.clusters)

    @property
    def cluster_of(self) -> np.ndarray:
        lab = np.empty(self.n, dtype=int)
        for k, c in enumerate(self.clusters):
            lab[list(c)] = k
        return lab

    @property
    def sizes(self) -> list[int]:
        return [len(c) for c in self.clusters]

    def satisfies_a1(self, net: PowerNetwork) -> bool:
        """True when every cluster induces a connected subgraph."""
        return self.connected_refinement(net) == self

    def connected_refinement(self, net: PowerNetwork) -> "Partition":
        """Split each cluster into the components of its induced subgraph."""
        lab = self.cluster_of
        ends = net.endpoints
        internal = ends[lab[ends[:, 0]] == lab[ends[:, 1]]] if net.m else ends
        return Partition(tuple(tuple(c) for c in components(self.n, internal)), self.n)

    def to_list(self) -> list[list[int]]:
        return [list(c) for c in self.clusters]


def is_finer(p1: Partition, p2: Partition) -> bool:
    """True iff every cluster of ``p1`` lies inside a cluster of ``p2``."""
    if p1.n != p2.n:
        raise PartitionError("partitions are over different vertex sets")
    lab2 = p2.cluster_of
    return all(len({int(lab2[v]) for v in c}) == 1 for c in p1.clusters)


# ---------------------------------------------------------------------------
# reduced multigraphs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReducedMultigraph:
    """Quotient multigraph: one node per cluster, one edge per cross-edge.

    ``edges`` holds ``(cluster_a, cluster_b, line_id)`` with parallel edges kept.
    """

    num_nodes: int
    edges: tuple[tuple[int, int, int], ...]

    @property
    def nodes(self) -> range:
        return range(self.num_nodes)

    @property
    def line_ids(self) -> list[int]:
        return [e[2] for e in self.edges]

    def is_connected(self) -> bool:
        if self.num_nodes == 0:
            return False
        ends = np.array([(a, b) for a, b, _ in self.edges], dtype=int).reshape(-1, 2)
        return len(components(self.num_nodes, ends)) == 1


def reduced_graph(net: PowerNetwork, p: Partition) -> ReducedMultigraph:
    lab = p.cluster_of
    edges = tuple(
        (int(lab[ln.from_bus]), int(lab[ln.to_bus]), ln.id)
        for ln in net.lines
        if lab[ln.from_bus] != lab[ln.to_bus]
    )
    return ReducedMultigraph(p.b, edges)


def cross_edges(net: PowerNetwork, p: Partition) -> list[int]:
    return reduced_graph(net, p).line_ids


def is_tree(rg: ReducedMultigraph) -> bool:
    return rg.num_nodes > 0 and len(rg.edges) == rg.num_nodes - 1 and rg.is_connected()


def _det_bareiss(M: list[list[int]]) -> int:
    """Exact integer determinant by fraction-free elimination."""
    A = [row[:] for row in M]
    k = len(A)
    if k == 0:
        return 1
    sign, prev = 1, 1
    for i in range(k - 1):
        if A[i][i] == 0:
            swap = next((r for r in range(i + 1, k) if A[r][i] != 0), None)
            if swap is None:
                return 0
            A[i], A[swap] = A[swap], A[i]
            sign = -sign
        for r in range(i + 1, k):
            for c in range(i + 1, k):
                A[r][c] = (A[r][c] * A[i][i] - A[r][i] * A[i][c]) // prev
        prev = A[i][i]
    return sign * A[k - 1][k - 1]


def _multigraph_laplacian(num_nodes: int, pairs: Iterable[tuple[int, int]], weights: Iterable | None = None):
    L = [[0] * num_nodes for _ in range(num_nodes)]
    ws = itertools.repeat(1) if weights is None else weights
    for (a, b), w in zip(pairs, ws):
        if a == b:
            continue
        L[a][a] += w
        L[b][b] += w
        L[a][b] -= w
        L[b][a] -= w
    return L


def spanning_tree_count(rg: ReducedMultigraph, exact_limit: int = 300) -> int:
    """Number of spanning trees via the matrix-tree theorem.

    Exact integer arithmetic up to ``exact_limit`` nodes, a rounded
    floating-point log-determinant beyond. Disconnected graphs give 0.
    """
    k = rg.num_nodes
    if k <= 1:
        return 1 if k == 1 else 0
    if not rg.is_connected():
        return 0
    L = _multigraph_laplacian(k, ((a, b) for a, b, _ in rg.edges))
    minor = [row[1:] for row in L[1:]]
    if k <= exact_limit:
        return _det_bareiss(minor)
    sign, logdet = np.linalg.slogdet(np.array(minor, dtype=float))
    return int(round(math.exp(logdet))) if sign > 0 else 0


def weighted_tree_sum(n: int, endpoints: np.ndarray, weights: np.ndarray) -> float:
    """Sum over spanning trees of the product of edge weights (weighted matrix-tree)."""
    if n <= 1:
        return 1.0
    L = np.zeros((n, n))
    for (i, j), w in zip(np.asarray(endpoints).reshape(-1, 2), weights):
        L[i, i] += w
        L[j, j] += w
        L[i, j] -= w
        L[j, i] -= w
    return float(np.linalg.det(L[1:, 1:]))


class _DSU:
    __slots__ = ("parent",)

    def __init__(self, n: int, parent: list[int] | None = None):
        self.parent = list(range(n)) if parent is None else parent[:]

    def find(self, x: int) -> int:
        p = self.parent
        while p[x] != x:
            p[x] = p[p[x]]
            x = p[x]
        return x

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.parent[max(ra, rb)] = min(ra, rb)
        return True

    def copy(self) -> "_DSU":
        return _DSU(0, self.parent)


def enumerate_spanning_trees(rg: ReducedMultigraph, cap: int = DEFAULT_TREE_CAP) -> Iterator[tuple[int, ...]]:
    """Yield every spanning tree of ``rg`` as a sorted tuple of line ids.

    Trees come out in lexicographic order: edges are scanned by ascending
    line id and the include branch is explored before the exclude branch.

    Raises
    ------
    EnumerationCapError
        The matrix-tree count exceeds ``cap`` (checked before any yield).
    """
    count = spanning_tree_count(rg)
    if count > cap:
        raise EnumerationCapError(count, cap, "use the recursive bipartition refinement instead")
    return _tree_stream(rg)


def _tree_stream(rg: ReducedMultigraph) -> Iterator[tuple[int, ...]]:
    k = rg.num_nodes
    if k == 0 or not rg.is_connected():
        return
    edges = sorted(rg.edges, key=lambda e: e[2])
    m = len(edges)

    def reachable(dsu: _DSU, start: int) -> bool:
        d = dsu.copy()
        for a, b, _ in edges[start:]:
            d.union(a, b)
        root = d.find(0)
        return all(d.find(v) == root for v in range(k))

    chosen: list[int] = []

    def rec(idx: int, dsu: _DSU, joined: int) -> Iterator[tuple[int, ...]]:
        if joined == k - 1:
            yield tuple(chosen)
            return
        if idx == m or m - idx < k - 1 - joined:
            return
        a, b, lid = edges[idx]
        if dsu.find(a) != dsu.find(b):
            d2 = dsu.copy()
            d2.union(a, b)
            chosen.append(lid)
            yield from rec(idx + 1, d2, joined + 1)
            chosen.pop()
        if reachable(dsu, idx + 1):
            yield from rec(idx + 1, dsu, joined)

    yield from rec(0, _DSU(k), 0)


def network_spanning_trees(net: PowerNetwork, cap: int = DEFAULT_TREE_CAP) -> Iterator[tuple[int, ...]]:
    """Spanning trees of a connected network as sorted line-id tuples."""
    return enumerate_spanning_trees(reduced_graph(net, Partition.singletons(net.n)), cap)


def enumerate_two_tree_forests(
    net: PowerNetwork,
    V1: Iterable[int],
    V2: Iterable[int],
    max_edges: int = 20,
) -> Iterator[tuple[int, ...]]:
    """Spanning forests with exactly two trees separating ``V1`` from ``V2``.

    Exhaustive subset scan intended for small test graphs; yields sorted
    line-id tuples. Overlapping or empty vertex sets yield nothing.
    """
    V1, V2 = set(V1), set(V2)
    if not V1 or not V2 or V1 & V2:
        return
    n, m = net.n, net.m
    if m > max_edges:
        raise EnumerationCapError(math.comb(m, max(n - 2, 0)), math.comb(max_edges, max(n - 2, 0)),
                                  "two-tree forest scan is for small graphs only")
    ends = net.endpoints
    ids = net.line_ids
    for subset in itertools.combinations(range(m), n - 2):
        d = _DSU(n)
        if not all(d.union(int(ends[k, 0]), int(ends[k, 1])) for k in subset):
            continue
        r1 = {d.find(v) for v in V1}
        r2 = {d.find(v) for v in V2}
        if len(r1) == 1 and len(r2) == 1 and r1 != r2:
            yield tuple(sorted(int(ids[k]) for k in subset))


def two_tree_forests(net: PowerNetwork, max_edges: int = 24) -> Iterator[tuple[tuple[int, ...], list[int]]]:
    """All spanning forests with exactly two trees.

    Yields ``(line_ids, roots)`` where ``roots[v]`` identifies the tree of
    vertex ``v``. Exhaustive; for small graphs only.
    """
    n, m = net.n, net.m
    if n < 2:
        return
    if m > max_edges:
        raise EnumerationCapError(math.comb(m, max(n - 2, 0)), math.comb(max_edges, max(n - 2, 0)),
                                  "two-tree forest scan is for small graphs only")
    ends = net.endpoints
    ids = net.line_ids
    for subset in itertools.combinations(range(m), n - 2):
        d = _DSU(n)
        if all(d.union(int(ends[k, 0]), int(ends[k, 1])) for k in subset):
            yield tuple(int(ids[k]) for k in subset), [d.find(v) for v in range(n)]


def beta_weight(net: PowerNetwork, edge_set: Iterable[int]) -> float:
    """Product of susceptances over ``edge_set``.

    The empty set weighs 0 on a network with lines and 1 on a network
    without lines.
    """
    es = list(edge_set)
    if not es:
        return 1.0 if net.m == 0 else 0.0
    return math.prod(net.line(e).susceptance for e in es)


# ---------------------------------------------------------------------------
# bridges, blocks, bridge-blocks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _DFSResult:
    bridges: tuple[int, ...]  # line positions
    cut_vertices: frozenset[int]
    edge_blocks: tuple[tuple[int, ...], ...]  # line positions per biconnected component


def _dfs(net: PowerNetwork) -> _DFSResult:
    n = net.n
    adj = net.adjacency()
    disc = [-1] * n
    low = [0] * n
    bridges: list[int] = []
    cuts: set[int] = set()
    blocks: list[tuple[int, ...]] = []
    estack: list[int] = []
    t = 0
    for root in range(n):
        if disc[root] != -1:
            continue
        disc[root] = low[root] = t
        t += 1
        root_children = 0
        stack = [(root, -1, iter(adj[root]))]
        while stack:
            v, pe, it = stack[-1]
            advanced = False
            for w, k in it:
                if k == pe:
                    continue
                if disc[w] == -1:
                    estack.append(k)
                    disc[w] = low[w] = t
                    t += 1
                    if v == root:
                        root_children += 1
                    stack.append((w, k, iter(adj[w])))
                    advanced = True
                    break
                if disc[w] < disc[v]:
                    low[v] = min(low[v], disc[w])
                    estack.append(k)
            if advanced:
                continue
            stack.pop()
            if not stack:
                continue
            u = stack[-1][0]
            low[u] = min(low[u], low[v])
            if low[v] > disc[u]:
                bridges.append(pe)
            if low[v] >= disc[u]:
                if u != root or root_children > 1:
                    cuts.add(u)
                comp = []
                while True:
                    k = estack.pop()
                    comp.append(k)
                    if k == pe:
                        break
                blocks.append(tuple(sorted(comp)))
        # the first child of a root may finish before the second is discovered
        if root_children > 1:
            cuts.add(root)
    return _DFSResult(tuple(sorted(bridges)), frozenset(cuts), tuple(sorted(blocks)))


@dataclass(frozen=True)
class BridgeBlockDecomposition:
    """Two-edge-connected components joined by bridges.

    Attributes
    ----------
    blocks : Partition
        Vertex partition into bridge-blocks.
    bridges : frozenset of int
        Line ids of the bridges.
    bb_tree : tuple of (int, int, int)
        ``(block_a, block_b, line_id)`` for every bridge; a forest with one
        tree per island.
    """

    blocks: Partition
    bridges: frozenset[int]
    bb_tree: tuple[tuple[int, int, int], ...]

    @property
    def num_blocks(self) -> int:
        return self.blocks.b

    @property
    def nontrivial_sizes(self) -> list[int]:
        return sorted((len(c) for c in self.blocks.clusters if len(c) > 1), reverse=True)

    def largest_block(self) -> tuple[int, ...]:
        """Largest bridge-block; ties go to the one with the smallest vertex."""
        return max(self.blocks.clusters, key=lambda c: (len(c), -c[0]))

    def blocks_by_size(self) -> list[tuple[int, ...]]:
        return sorted(self.blocks.clusters, key=lambda c: (-len(c), c[0]))


def bridges_and_bridge_blocks(net: PowerNetwork, circuits: bool = False) -> BridgeBlockDecomposition:
    """Bridge-block decomposition by one low-link DFS.

    Parameters
    ----------
    circuits : bool
        When true, a merged line standing for several parallel circuits is
        never a bridge, as in the underlying multigraph.
    """
    res = _dfs(net)
    bridge_pos = [k for k in res.bridges if not (circuits and net.lines[k].multiplicity > 1)]
    bridge_set = set(bridge_pos)
    keep = np.array([k not in bridge_set for k in range(net.m)], dtype=bool)
    ends = net.endpoints
    comps = components(net.n, ends[keep] if net.m else ends)
    part = Partition(tuple(tuple(c) for c in comps), net.n)
    lab = part.cluster_of
    tree = tuple(
        (int(lab[ends[k, 0]]), int(lab[ends[k, 1]]), net.lines[k].id) for k in sorted(bridge_pos, key=lambda k: net.lines[k].id)
    )
    return BridgeBlockDecomposition(part, frozenset(net.lines[k].id for k in bridge_pos), tree)


@dataclass(frozen=True)
class BlockDecomposition:
    """Biconnected components of a network.

    Attributes
    ----------
    blocks : tuple of tuple of int
        Line ids of each block; they partition the line set.
    block_vertices : tuple of frozenset of int
    cut_vertices : frozenset of int
    block_of_line : dict
        Line id to block index.
    n : int
        Number of buses of the network.
    """

    blocks: tuple[tuple[int, ...], ...]
    block_vertices: tuple[frozenset[int], ...]
    cut_vertices: frozenset[int]
    block_of_line: dict[int, int]
    n: int

    def is_nontrivial(self, k: int) -> bool:
        return len(self.blocks[k]) > 1

    def blocks_of_vertex(self, v: int) -> list[int]:
        return [k for k, vs in enumerate(self.block_vertices) if v in vs]


def block_decomposition(net: PowerNetwork) -> BlockDecomposition:
    res = _dfs(net)
    ids = net.line_ids
    ends = net.endpoints
    blocks = []
    verts = []
    for comp in res.edge_blocks:
        blocks.append(tuple(sorted(int(ids[k]) for k in comp)))
        verts.append(frozenset(int(v) for k in comp for v in ends[k]))
    order = sorted(range(len(blocks)), key=lambda k: blocks[k])
    blocks = [blocks[k] for k in order]
    verts = [verts[k] for k in order]
    owner = {e: k for k, b in enumerate(blocks) for e in b}
    return BlockDecomposition(tuple(blocks), tuple(verts), res.cut_vertices, owner, net.n)


def share_simple_cycle(bd: BlockDecomposition, line_a: int, line_b: int) -> bool:
    """True iff the two lines lie in the same nontrivial block."""
    ka, kb = bd.block_of_line[line_a], bd.block_of_line[line_b]
    return ka == kb and bd.is_nontrivial(ka)


def _block_cut_path(bd: BlockDecomposition, j: int, k: int) -> list[int] | None:
    """Block indices on the block-cut tree path between vertices ``j`` and ``k``."""
    nb = len(bd.blocks)
    # tree nodes: blocks 0..nb-1, cut vertex v -> nb + v
    def node_of(v: int) -> int | None:
        if v in bd.cut_vertices:
            return nb + v
        owners = bd.blocks_of_vertex(v)
        return owners[0] if owners else None

    s, t = node_of(j), node_of(k)
    if s is None or t is None:
        return None
    nbrs: dict[int, list[int]] = {}
    for b, vs in enumerate(bd.block_vertices):
        for v in vs:
            if v in bd.cut_vertices:
                nbrs.setdefault(b, []).append(nb + v)
                nbrs.setdefault(nb + v, []).append(b)
    prev = {s: s}
    q = deque([s])
    while q:
        x = q.popleft()
        if x == t:
            break
        for y in nbrs.get(x, []):
            if y not in prev:
                prev[y] = x
                q.append(y)
    if t not in prev:
        return None
    path = [t]
    while path[-1] != s:
        path.append(prev[path[-1]])
    return [x for x in path if x < nb]


def on_simple_path(bd: BlockDecomposition, line: int, j: int, k: int) -> bool:
    """True iff some simple path from ``j`` to ``k`` uses ``line``."""
    if j == k:
        return False
    path = _block_cut_path(bd, j, k)
    if path is None:
        return False
    return bd.block_of_line[line] in path
