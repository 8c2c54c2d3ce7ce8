"""Exact kNN graph construction and Louvain community detection.

The kNN graph is directed (each node points at its k nearest others by
Euclidean distance, ties broken by lower index).  Louvain runs on a
symmetrized view where an edge's weight counts how many of the two
directions exist.  The sweep protocol runs Louvain across a fixed
resolution grid and keeps the partition that best matches the reference
labels by NMI.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metrics import nmi

__all__ = [
    "ClusteringError",
    "DegenerateInput",
    "KnnGraph",
    "Partition",
    "knn_graph",
    "louvain",
    "modularity",
    "sweep",
    "SWEEP_RESOLUTIONS",
]

SWEEP_RESOLUTIONS = tuple(round(0.1 * i, 1) for i in range(1, 21))


class ClusteringError(Exception):
    pass


class DegenerateInput(ClusteringError):
    pass


@dataclass(frozen=True)
class KnnGraph:
    """Directed nearest-neighbor graph; neighbors[i] holds i's out-edges."""

    n: int
    k: int
    neighbors: tuple[np.ndarray, ...]

    def symmetrized(self) -> dict[int, dict[int, float]]:
        """Undirected weights: 2.0 for mutual edges, 1.0 for one-way."""
        adj: dict[int, dict[int, float]] = {i: {} for i in range(self.n)}
        for u in range(self.n):
            for v in self.neighbors[u]:
                v = int(v)
                adj[u][v] = adj[u].get(v, 0.0) + 1.0
                adj[v][u] = adj[v].get(u, 0.0) + 1.0
        return adj


@dataclass(frozen=True)
class Partition:
    """Community id per node (dense 0..C-1) plus run provenance."""

    labels: np.ndarray
    resolution: float
    quality: float
    quality_trace: tuple[float, ...] = ()

    @property
    def n_communities(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0


def knn_graph(embeddings: np.ndarray, k: int) -> KnnGraph:
    """k nearest others per node, Euclidean, ties broken by lower index."""
    emb = np.asarray(embeddings, dtype=np.float64)
    n = emb.shape[0]
    if n < 2:
        raise DegenerateInput(f"need at least 2 points, got {n}")
    if k < 1:
        raise ValueError("k must be >= 1")
    k_eff = min(k, n - 1)
    sq = np.einsum("ij,ij->i", emb, emb)
    dist2 = sq[:, None] + sq[None, :] - 2.0 * (emb @ emb.T)
    np.fill_diagonal(dist2, np.inf)
    # stable sort keeps lower indices first among equal distances
    order = np.argsort(dist2, axis=1, kind="stable")[:, :k_eff]
    return KnnGraph(n=n, k=k, neighbors=tuple(row.copy() for row in order))


def modularity(adj: dict[int, dict[int, float]], labels: np.ndarray,
               resolution: float = 1.0) -> float:
    """Newman modularity with a resolution-scaled null model (no self-loops)."""
    degree = {u: sum(nbrs.values()) for u, nbrs in adj.items()}
    two_m = sum(degree.values())
    if two_m == 0:
        return 0.0
    internal = 0.0
    for u, nbrs in adj.items():
        for v, w in nbrs.items():
            if labels[u] == labels[v]:
                internal += w
    comm_degree: dict[int, float] = {}
    for u, d in degree.items():
        comm_degree[labels[u]] = comm_degree.get(labels[u], 0.0) + d
    null = sum(d * d for d in comm_degree.values()) / (two_m * two_m)
    return internal / two_m - resolution * null


class _Level:
    """One aggregation level: weighted adjacency plus per-node self-loops."""

    def __init__(self, adj: dict[int, dict[int, float]], self_loops: dict[int, float]):
        self.adj = adj
        self.self_loops = self_loops
        self.n = len(adj)
        self.degree = {
            u: sum(adj[u].values()) + 2.0 * self_loops.get(u, 0.0) for u in adj
        }
        self.two_m = sum(self.degree.values())


def _local_move(level: _Level, resolution: float, rng: np.random.Generator):
    comm = {u: u for u in level.adj}
    comm_degree = dict(level.degree)
    two_m = level.two_m
    order = list(level.adj)
    rng.shuffle(order)
    moved_any = False
    improved = True
    while improved:
        improved = False
        for u in order:
            cu = comm[u]
            ku = level.degree[u]
            # weights from u into each adjacent community
            links: dict[int, float] = {}
            for v, w in level.adj[u].items():
                links[comm[v]] = links.get(comm[v], 0.0) + w
            comm_degree[cu] -= ku
            base = links.get(cu, 0.0) - resolution * ku * comm_degree[cu] / two_m
            best_c, best_gain = cu, 0.0
            for c, w_in in links.items():
                if c == cu:
                    continue
                gain = w_in - resolution * ku * comm_degree[c] / two_m
                if gain - base > best_gain + 1e-12:
                    best_gain = gain - base
                    best_c = c
            comm_degree[best_c] = comm_degree.get(best_c, 0.0) + ku
            if best_c != cu:
                comm[u] = best_c
                improved = True
                moved_any = True
    return comm, moved_any


def _aggregate(level: _Level, comm: dict[int, int]):
    ids = sorted(set(comm.values()))
    remap = {c: i for i, c in enumerate(ids)}
    adj: dict[int, dict[int, float]] = {i: {} for i in range(len(ids))}
    self_loops: dict[int, float] = {i: 0.0 for i in range(len(ids))}
    for c, extra in level.self_loops.items():
        self_loops[remap[comm[c]]] += extra
    for u, nbrs in level.adj.items():
        cu = remap[comm[u]]
        for v, w in nbrs.items():
            cv = remap[comm[v]]
            if cu == cv:
                self_loops[cu] += w / 2.0  # each internal edge visited twice
            else:
                adj[cu][cv] = adj[cu].get(cv, 0.0) + w
    return _Level(adj, self_loops), remap


def louvain(graph: KnnGraph, resolution: float = 1.0, seed: int = 0) -> Partition:
    """Greedy modularity maximization: local moves then aggregation, repeated.

    Node visit order is shuffled per level from ``seed``; the reported
    quality is the modularity of the final flat partition on the original
    symmetrized graph.
    """
    if resolution <= 0:
        raise ValueError("resolution must be > 0")
    base_adj = graph.symmetrized()
    rng = np.random.default_rng(np.random.SeedSequence((seed, graph.n)))
    level = _Level(base_adj, {u: 0.0 for u in base_adj})
    node_comm = np.arange(graph.n)
    trace: list[float] = []
    while True:
        comm, moved = _local_move(level, resolution, rng)
        aggregated, remap = _aggregate(level, comm)
        node_comm = np.array([remap[comm[c]] for c in node_comm])
        trace.append(modularity(base_adj, node_comm, resolution))
        if not moved or aggregated.n == level.n:
            break
        level = aggregated

    # densify community ids 0..C-1 in first-appearance order
    _, dense = np.unique(node_comm, return_inverse=True)
    quality = modularity(base_adj, dense, resolution)
    return Partition(
        labels=dense,
        resolution=resolution,
        quality=quality,
        quality_trace=tuple(trace),
    )


def sweep(embeddings: np.ndarray, labels, k: int = 15) -> tuple[Partition, float]:
    """Louvain across resolutions 0.1..2.0 (step 0.1); keep the highest-NMI
    partition against ``labels``, lowest resolution winning ties."""
    labels = np.asarray(labels)
    if labels.shape[0] != np.asarray(embeddings).shape[0]:
        raise ValueError("labels must cover all embedding rows")
    graph = knn_graph(embeddings, k)
    best: Partition | None = None
    best_nmi = -1.0
    for res in SWEEP_RESOLUTIONS:
        part = louvain(graph, resolution=res, seed=0)
        score = nmi(labels, part.labels)
        if score > best_nmi:
            best, best_nmi = part, score
    assert best is not None
    return best, best_nmi
