"""Flow-weighted modularity and the clustering methods used to pick candidate blocks.

Edge weights are absolute line flows. Lines with zero flow stay in the graph
so that clusters remain connected through them, but they carry no weight.
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

from .errors import NumericError, PartitionError, UndefinedObjectiveError
from .graphs import Partition, cross_edges
from .network import PowerNetwork

log = logging.getLogger(__name__)

METHODS = ("fastgreedy", "spectral_Ln", "spectral_Bn")
_TIE_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class FlowWeights:
    """Absolute flows as edge weights.

    Attributes
    ----------
    edge_weight : ndarray
        ``|f_l|`` per line, in network order.
    endpoints : ndarray
        ``(m, 2)`` bus indices.
    n : int
    """

    edge_weight: np.ndarray
    endpoints: np.ndarray
    n: int

    @classmethod
    def from_flows(cls, net: PowerNetwork, f: Sequence[float]) -> "FlowWeights":
        f = np.asarray(f, dtype=float)
        if f.shape != (net.m,):
            raise PartitionError(f"flow vector has shape {f.shape}, expected ({net.m},)")
        return cls(np.abs(f), net.endpoints, net.n)

    @property
    def strength(self) -> np.ndarray:
        F = np.zeros(self.n)
        np.add.at(F, self.endpoints[:, 0], self.edge_weight)
        np.add.at(F, self.endpoints[:, 1], self.edge_weight)
        return F

    @property
    def total(self) -> float:
        """``M``, the total edge weight (half the strength sum)."""
        return math.fsum(self.edge_weight)

    def adjacency(self) -> np.ndarray:
        A = np.zeros((self.n, self.n))
        np.add.at(A, (self.endpoints[:, 0], self.endpoints[:, 1]), self.edge_weight)
        return A + A.T

    def scaled(self, c: float) -> "FlowWeights":
        return FlowWeights(self.edge_weight * c, self.endpoints, self.n)


def flow_weights(net: PowerNetwork, f: Sequence[float]) -> FlowWeights:
    return FlowWeights.from_flows(net, f)


def _cluster_sums(w: FlowWeights, p: Partition) -> tuple[np.ndarray, np.ndarray]:
    """Internal weight and volume of every cluster."""
    lab = p.cluster_of
    a, c = lab[w.endpoints[:, 0]], lab[w.endpoints[:, 1]]
    internal = np.zeros(p.b)
    np.add.at(internal, a[a == c], w.edge_weight[a == c])
    vol = np.zeros(p.b)
    np.add.at(vol, lab, w.strength)
    return internal, vol


def modularity(w: FlowWeights, p: Partition) -> float:
    """``Q = (1/2M) sum_r [sum_{i,j in V_r} |f_ij| - Vol_r^2 / 2M]``."""
    two_m = 2.0 * w.total
    if two_m <= 0:
        raise UndefinedObjectiveError("modularity is undefined when every flow is zero")
    internal, vol = _cluster_sums(w, p)
    return float(np.sum(2.0 * internal / two_m - (vol / two_m) ** 2))


def normalized_modularity(w: FlowWeights, p: Partition) -> float:
    """Modularity with each cluster's term divided by its volume."""
    two_m = 2.0 * w.total
    if two_m <= 0:
        raise UndefinedObjectiveError("normalized modularity is undefined when every flow is zero")
    internal, vol = _cluster_sums(w, p)
    if np.any(vol <= 0):
        raise UndefinedObjectiveError("normalized modularity needs every cluster to carry flow")
    return float(np.sum(2.0 * internal / vol - vol / two_m) / two_m)


def cut_value(w: FlowWeights, cluster: Iterable[int]) -> float:
    inside = np.zeros(w.n, dtype=bool)
    inside[list(cluster)] = True
    crossing = inside[w.endpoints[:, 0]] != inside[w.endpoints[:, 1]]
    return math.fsum(w.edge_weight[crossing])


def volume(w: FlowWeights, cluster: Iterable[int]) -> float:
    return math.fsum(w.strength[list(cluster)])


def ncut(w: FlowWeights, p: Partition) -> float:
    """``Cut/Vol(V) + Cut/Vol(V^c)`` for a bipartition."""
    if p.b != 2:
        raise PartitionError(f"normalized cut is defined for bipartitions; got {p.b} cluster(s)")
    return ncut_general(w, p)


def ncut_general(w: FlowWeights, p: Partition) -> float:
    """``sum_r Cut_r / Vol_r`` for any partition."""
    terms = []
    for c in p.clusters:
        vol = volume(w, c)
        if vol <= 0:
            raise UndefinedObjectiveError("normalized cut needs every cluster to carry flow")
        terms.append(cut_value(w, c) / vol)
    return math.fsum(terms)


@dataclass(frozen=True)
class ClusteringResult:
    partition: Partition
    method: str
    Q: float
    Q_n: float | None
    merges: tuple = field(default=(), compare=False)


def _scores(w: FlowWeights, p: Partition) -> tuple[float, float | None]:
    Q = modularity(w, p)
    try:
        Qn = normalized_modularity(w, p)
    except UndefinedObjectiveError:
        Qn = None
    return Q, Qn


# ---------------------------------------------------------------------------
# FastGreedy
# ---------------------------------------------------------------------------

def fastgreedy(w: FlowWeights, net: PowerNetwork, b: int) -> ClusteringResult:
    """Greedy agglomeration on the weighted modularity.

    Starts from singletons and repeatedly merges the pair of adjacent
    clusters with the largest modularity gain
    ``2 (W_rs / 2M - Vol_r Vol_s / (2M)^2)`` until ``b`` clusters remain.
    Clusters are labelled by their smallest vertex; gains within 1e-12 of the
    best are tied and the lowest label pair wins.

    Raises
    ------
    PartitionError
        ``b`` outside ``1..n`` or the graph too disconnected to reach ``b``.
    UndefinedObjectiveError
        All weights are zero.
    """
    n = net.n
    if not 1 <= b <= n:
        raise PartitionError(f"b={b} must lie in 1..{n}")
    two_m = 2.0 * w.total
    if two_m <= 0:
        raise UndefinedObjectiveError("modularity is undefined when every flow is zero")
    F = w.strength
    members: dict[int, list[int]] = {v: [v] for v in range(n)}
    vol: dict[int, float] = {v: float(F[v]) for v in range(n)}
    between: dict[int, dict[int, float]] = {v: {} for v in range(n)}
    for (i, j), x in zip(w.endpoints, w.edge_weight):
        i, j = int(i), int(j)
        between[i][j] = between[i].get(j, 0.0) + float(x)
        between[j][i] = between[j].get(i, 0.0) + float(x)
    merges = []
    while len(members) > b:
        best = None
        gains = []
        for r in members:
            for s, wrs in between[r].items():
                if r < s:
                    gains.append((2.0 * (wrs / two_m - vol[r] * vol[s] / two_m**2), r, s))
        if not gains:
            raise PartitionError(f"cannot reach {b} clusters: no adjacent clusters left at {len(members)}")
        top = max(g for g, _, _ in gains)
        best = min((r, s) for g, r, s in gains if g >= top - _TIE_TOL)
        r, s = best
        # absorb s into r (r < s keeps labels equal to the smallest vertex)
        members[r].extend(members.pop(s))
        vol[r] += vol.pop(s)
        for t, x in between.pop(s).items():
            if t == r:
                continue
            between[t].pop(s)
            between[r][t] = between[r].get(t, 0.0) + x
            between[t][r] = between[t].get(r, 0.0) + x
        between[r].pop(s, None)
        merges.append((r, s, top))
    part = Partition(tuple(tuple(c) for c in members.values()), n)
    Q, Qn = _scores(w, part)
    return ClusteringResult(part, "fastgreedy", Q, Qn, tuple(merges))


# ---------------------------------------------------------------------------
# spectral clustering
# ---------------------------------------------------------------------------

def _fix_signs(V: np.ndarray) -> np.ndarray:
    V = V.copy()
    for k in range(V.shape[1]):
        col = V[:, k]
        idx = int(np.argmax(np.abs(col) - 1e-12 * np.arange(col.size)))
        if col[idx] < 0:
            V[:, k] = -col
    return V


def kmeans(X: np.ndarray, k: int, iters: int = 100) -> np.ndarray:
    """Lloyd iterations from deterministic farthest-point seeds.

    The first seed is the row of largest norm; each next seed is the row
    farthest from the chosen seeds. Ties go to the lowest row index.
    """
    n = X.shape[0]
    if k >= n:
        return np.arange(n)
    seeds = [int(np.argmax(np.linalg.norm(X, axis=1)))]
    dist = np.linalg.norm(X - X[seeds[0]], axis=1)
    while len(seeds) < k:
        nxt = int(np.argmax(dist))
        seeds.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(X - X[nxt], axis=1))
    C = X[seeds].copy()
    labels = np.full(n, -1)
    for _ in range(iters):
        d = np.linalg.norm(X[:, None, :] - C[None, :, :], axis=2)
        new = np.argmin(d, axis=1)
        if np.array_equal(new, labels):
            break
        labels = new
        for c in range(k):
            if np.any(labels == c):
                C[c] = X[labels == c].mean(axis=0)
    return labels


def _hop_assign(net: PowerNetwork, labels: np.ndarray) -> np.ndarray:
    """Give every unlabelled vertex (-1) the label of its nearest labelled vertex."""
    labels = labels.copy()
    adj = [sorted(nb for nb, _ in row) for row in net.adjacency()]
    for v in np.flatnonzero(labels < 0):
        seen = {int(v)}
        frontier = [int(v)]
        found = None
        while frontier and found is None:
            nxt = []
            for u in frontier:
                for x in adj[u]:
                    if x not in seen:
                        seen.add(x)
                        nxt.append(x)
            hits = sorted(x for x in nxt if labels[x] >= 0)
            if hits:
                found = hits[0]
            frontier = nxt
        if found is None:
            raise PartitionError(f"vertex {v} cannot reach any clustered vertex")
        labels[v] = labels[found]
    return labels


def spectral_cluster(w: FlowWeights, net: PowerNetwork, b: int, kind: str = "Ln") -> ClusteringResult:
    """Spectral clustering on the normalized flow Laplacian or modularity matrix.

    Parameters
    ----------
    kind : {"Ln", "Bn"}
        ``Ln`` embeds on eigenvectors 2..b of ``W^{-1/2} L W^{-1/2}``; ``Bn``
        on the top ``b-1`` eigenvectors of ``W^{-1/2} B W^{-1/2}``, with
        ``W = diag(F)``. Rows are rescaled by ``W^{-1/2}``. For ``b = 2`` the
        sign of the single coordinate decides the side (zero goes to the
        nonnegative side); otherwise k-means.

    Vertices without flow are left out of the eigenproblem and then join the
    cluster of the nearest clustered vertex by hop distance.
    """
    if kind not in ("Ln", "Bn"):
        raise PartitionError(f"unknown spectral kind {kind!r}")
    method = f"spectral_{kind}"
    n = net.n
    if not 1 <= b <= n:
        raise PartitionError(f"b={b} must lie in 1..{n}")
    two_m = 2.0 * w.total
    if two_m <= 0:
        raise UndefinedObjectiveError("spectral clustering needs nonzero flows")
    if b == 1:
        part = Partition.whole(n)
        return ClusteringResult(part, method, *_scores(w, part))
    F = w.strength
    active = np.flatnonzero(F > 0)
    if active.size < b:
        raise PartitionError(f"only {active.size} vertices carry flow; cannot form {b} clusters")
    A = w.adjacency()[np.ix_(active, active)]
    Fa = F[active]
    s = 1.0 / np.sqrt(Fa)
    if kind == "Ln":
        M = np.eye(active.size) - s[:, None] * A * s[None, :]
    else:
        M = s[:, None] * (A - np.outer(Fa, Fa) / two_m) * s[None, :]
    M = 0.5 * (M + M.T)
    try:
        vals, vecs = np.linalg.eigh(M)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigensolver failed: {exc}") from None
    if kind == "Ln":
        V = vecs[:, 1:b]
    else:
        V = vecs[:, ::-1][:, : b - 1]
    V = _fix_signs(V) * s[:, None]
    if b == 2:
        x = V[:, 0]
        lab_a = (x < -1e-10 * np.abs(x).max()).astype(int)
    else:
        lab_a = kmeans(V, b)
    labels = np.full(n, -1)
    labels[active] = lab_a
    labels = _hop_assign(net, labels)
    part = Partition.from_labels(labels)
    return ClusteringResult(part, method, *_scores(w, part))


# ---------------------------------------------------------------------------
# OBI dispatch and method comparison
# ---------------------------------------------------------------------------

def obi_solve(w: FlowWeights, net: PowerNetwork, b: int, method: str = "fastgreedy") -> ClusteringResult:
    """Cluster a (connected) block into ``b`` groups and enforce connected clusters.

    Clusters that induce a disconnected subgraph are split into their
    components, so the returned partition may have more than ``b`` clusters.
    """
    if method == "fastgreedy":
        res = fastgreedy(w, net, b)
    elif method in ("spectral_Ln", "spectral_Bn"):
        res = spectral_cluster(w, net, b, method.split("_")[1])
    else:
        raise PartitionError(f"unknown method {method!r}; choose from {METHODS}")
    refined = res.partition.connected_refinement(net)
    if refined != res.partition:
        log.info("%s: split %d disconnected cluster(s)", method, refined.b - res.partition.b)
        res = ClusteringResult(refined, method, *_scores(w, refined), res.merges)
    return res


@dataclass(frozen=True)
class ComparisonRow:
    method: str
    b: int
    runtime_s: float
    Q: float
    Q_n: float | None
    cross_edges: int
    cross_edge_fraction: float
    sizes: tuple[int, ...]


def compare_methods(
    w: FlowWeights,
    net: PowerNetwork,
    b: int,
    methods: Sequence[str] = METHODS,
    threads: int | None = None,
) -> list[ComparisonRow]:
    """Run several OBI methods concurrently; rows come back in ``methods`` order."""
    threads = threads or int(os.environ.get("GRIDBLOCKS_THREADS", "0") or 0) or min(4, len(methods))

    def run(method: str) -> ComparisonRow:
        t0 = time.perf_counter()
        res = obi_solve(w, net, b, method)
        dt = time.perf_counter() - t0
        ce = len(cross_edges(net, res.partition))
        return ComparisonRow(method, res.partition.b, dt, res.Q, res.Q_n, ce,
                             ce / net.m if net.m else 0.0,
                             tuple(sorted(res.partition.sizes, reverse=True)))

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        return list(pool.map(run, methods))
