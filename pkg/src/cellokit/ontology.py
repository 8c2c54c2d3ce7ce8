"""Cell-type ontology graph, random-walk structural similarity, and negative sets.

The ontology is a DAG of "is a subtype of" edges stored child -> parent.
Structural similarity between two cell types is the personalized-PageRank
mass the walk deposits on one type when teleporting back to the other,
discretized into integer levels.  Those levels drive the relational
contrastive objective: for a target cell i and a positive j, every batch
member whose type is strictly less similar to c_i than c_j is a negative,
except cells whose type is an ancestor of c_i.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "OntologyError",
    "CycleDetected",
    "DuplicateEdge",
    "SelfLoop",
    "MalformedLine",
    "UnknownNode",
    "NoConvergence",
    "MissingSimilarity",
    "OntologyGraph",
    "PPRVector",
    "SimilarityTable",
    "parse_ontology",
    "compute_ppr",
    "transform_similarity",
    "build_similarity_table",
    "ancestors",
    "ancestor_sets",
    "negative_set",
    "negative_mask",
]

DEFAULT_DAMPING = 0.9
DEFAULT_THRESHOLD = 1e-4
DEFAULT_TOLERANCE = 1e-10
DEFAULT_MAX_ITERS = 10_000


class OntologyError(Exception):
    pass


class CycleDetected(OntologyError):
    pass


class DuplicateEdge(OntologyError):
    pass


class SelfLoop(OntologyError):
    pass


class MalformedLine(OntologyError):
    def __init__(self, line_number: int, line: str):
        self.line_number = line_number
        super().__init__(f"line {line_number}: expected 'child parent', got {line!r}")


class UnknownNode(OntologyError):
    pass


class NoConvergence(OntologyError):
    def __init__(self, residual: float, max_iters: int):
        self.residual = residual
        super().__init__(
            f"power iteration did not reach tolerance in {max_iters} iterations "
            f"(residual {residual:.3e})"
        )


class MissingSimilarity(OntologyError):
    pass


@dataclass(frozen=True)
class OntologyGraph:
    """Validated cell-type taxonomy: a DAG plus its undirected view.

    ``directed_edges`` are (child, parent) pairs.  The undirected adjacency
    ignores direction, which is what the random walk uses.
    """

    nodes: tuple[str, ...]
    directed_edges: tuple[tuple[str, str], ...]
    index: dict[str, int] = field(repr=False)
    neighbors: tuple[tuple[int, ...], ...] = field(repr=False)  # undirected
    parents: tuple[tuple[int, ...], ...] = field(repr=False)  # child -> parent

    def __contains__(self, node: str) -> bool:
        return node in self.index

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def has_undirected_edge(self, u: str, v: str) -> bool:
        return self.index[v] in self.neighbors[self.index[u]]


def _build_graph(nodes: list[str], edges: list[tuple[str, str]]) -> OntologyGraph:
    index = {n: i for i, n in enumerate(nodes)}
    seen: set[tuple[str, str]] = set()
    for child, parent in edges:
        if child == parent:
            raise SelfLoop(f"self-loop on {child!r}")
        if (child, parent) in seen:
            raise DuplicateEdge(f"duplicate edge {child!r} -> {parent!r}")
        seen.add((child, parent))

    n = len(nodes)
    nbr: list[set[int]] = [set() for _ in range(n)]
    par: list[set[int]] = [set() for _ in range(n)]
    for child, parent in edges:
        c, p = index[child], index[parent]
        nbr[c].add(p)
        nbr[p].add(c)
        par[c].add(p)

    # Kahn's algorithm on the directed edges; leftover nodes mean a cycle.
    out_deg = [len(par[i]) for i in range(n)]
    children: list[list[int]] = [[] for _ in range(n)]
    for child, parent in edges:
        children[index[parent]].append(index[child])
    frontier = [i for i in range(n) if out_deg[i] == 0]
    visited = 0
    while frontier:
        u = frontier.pop()
        visited += 1
        for c in children[u]:
            out_deg[c] -= 1
            if out_deg[c] == 0:
                frontier.append(c)
    if visited != n:
        stuck = [nodes[i] for i in range(n) if out_deg[i] > 0]
        raise CycleDetected(f"directed cycle through {stuck[:5]}")

    return OntologyGraph(
        nodes=tuple(nodes),
        directed_edges=tuple(edges),
        index=index,
        neighbors=tuple(tuple(sorted(s)) for s in nbr),
        parents=tuple(tuple(sorted(s)) for s in par),
    )


def parse_ontology(edge_text: str) -> OntologyGraph:
    """Parse line-oriented "child parent" pairs into a validated graph.

    Tokens are whitespace-separated; '#' starts a comment line.  Raises
    MalformedLine / SelfLoop / DuplicateEdge / CycleDetected on bad input.
    """
    nodes: list[str] = []
    node_set: set[str] = set()
    edges: list[tuple[str, str]] = []
    for lineno, raw in enumerate(edge_text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if len(tokens) != 2:
            raise MalformedLine(lineno, raw)
        child, parent = tokens
        for node in (child, parent):
            if node not in node_set:
                node_set.add(node)
                nodes.append(node)
        edges.append((child, parent))
    return _build_graph(nodes, edges)


@dataclass(frozen=True)
class PPRVector:
    """Stationary teleporting-walk distribution for one source node."""

    source: str
    scores: dict[str, float]
    damping: float
    tolerance: float

    def __getitem__(self, node: str) -> float:
        return self.scores[node]


def compute_ppr(
    graph: OntologyGraph,
    source: str,
    damping: float = DEFAULT_DAMPING,
    tolerance: float = DEFAULT_TOLERANCE,
    max_iters: int = DEFAULT_MAX_ITERS,
) -> PPRVector:
    """Power-iterate p <- (1-d)*e_source + d*W*p on the undirected view.

    W is the column-stochastic random-walk matrix; ``damping`` is the
    probability of following an edge, 1-damping the probability of
    teleporting back to the source.  Degree-zero nodes hand their walk mass
    back to the source so the scores stay a probability distribution.
    """
    if source not in graph:
        raise UnknownNode(f"unknown node {source!r}")
    if not 0.0 < damping < 1.0:
        raise ValueError(f"damping must be in (0, 1), got {damping}")

    n = graph.n_nodes
    src = graph.index[source]
    deg = np.array([len(nb) for nb in graph.neighbors], dtype=np.float64)
    # flat edge arrays (both directions) for the vectorized walk step
    tail = np.array(
        [u for u in range(n) for _ in graph.neighbors[u]], dtype=np.intp
    )
    head = np.array(
        [v for u in range(n) for v in graph.neighbors[u]], dtype=np.intp
    )
    dangling = deg == 0.0

    p = np.zeros(n)
    p[src] = 1.0
    for _ in range(max_iters):
        spread = np.zeros(n)
        if tail.size:
            np.add.at(spread, head, p[tail] / deg[tail])
        spread[src] += p[dangling].sum()
        p_new = damping * spread
        p_new[src] += 1.0 - damping
        residual = float(np.abs(p_new - p).sum())
        p = p_new
        if residual < tolerance:
            break
    else:
        raise NoConvergence(residual, max_iters)

    return PPRVector(
        source=source,
        scores={graph.nodes[i]: float(p[i]) for i in range(n)},
        damping=damping,
        tolerance=tolerance,
    )


def transform_similarity(ppr_value: float, threshold_s: float = DEFAULT_THRESHOLD) -> int:
    """Discretize a walk score into an integer similarity level >= 1.

    Scores below the threshold collapse to level 1; above it the level grows
    logarithmically, which flattens the heavy skew of raw walk scores.  The
    floor carries a 1e-9 guard so ratios that are integers in exact
    arithmetic (e.g. 3e-4 / 1e-4) land on the intended level despite binary
    rounding of the operands.
    """
    if threshold_s <= 0.0:
        raise ValueError(f"threshold_s must be > 0, got {threshold_s}")
    if ppr_value < threshold_s:
        return 1
    return int(math.floor(math.log2(ppr_value / threshold_s + 1.0) + 1e-9))


@dataclass(frozen=True)
class SimilarityTable:
    """Integer similarity levels (and the raw scores behind them) per node pair."""

    levels: dict[tuple[str, str], int]
    pprs: dict[tuple[str, str], float]
    threshold_s: float

    def level(self, u: str, v: str) -> int:
        try:
            return self.levels[(u, v)]
        except KeyError:
            raise MissingSimilarity(f"no similarity stored for ({u!r}, {v!r})") from None

    def __post_init__(self):
        for pair, lev in self.levels.items():
            if lev < 1:
                raise ValueError(f"level {lev} < 1 for pair {pair}")


def build_similarity_table(
    graph: OntologyGraph,
    node_subset: list[str] | tuple[str, ...],
    damping: float = DEFAULT_DAMPING,
    threshold_s: float = DEFAULT_THRESHOLD,
    tolerance: float = DEFAULT_TOLERANCE,
    max_iters: int = DEFAULT_MAX_ITERS,
) -> SimilarityTable:
    """Similarity levels over node_subset x node_subset (diagonal included)."""
    for node in node_subset:
        if node not in graph:
            raise UnknownNode(f"unknown node {node!r}")
    levels: dict[tuple[str, str], int] = {}
    pprs: dict[tuple[str, str], float] = {}
    for u in node_subset:
        vec = compute_ppr(graph, u, damping, tolerance, max_iters)
        for v in node_subset:
            score = vec[v]
            pprs[(u, v)] = score
            levels[(u, v)] = transform_similarity(score, threshold_s)
    return SimilarityTable(levels=levels, pprs=pprs, threshold_s=threshold_s)


def ancestors(graph: OntologyGraph, node: str) -> frozenset[str]:
    """All strict ancestors of ``node`` along child -> parent edges."""
    if node not in graph:
        raise UnknownNode(f"unknown node {node!r}")
    seen: set[int] = set()
    stack = list(graph.parents[graph.index[node]])
    while stack:
        u = stack.pop()
        if u in seen:
            continue
        seen.add(u)
        stack.extend(graph.parents[u])
    return frozenset(graph.nodes[i] for i in seen)


def ancestor_sets(graph: OntologyGraph) -> dict[str, frozenset[str]]:
    """Ancestor set for every node (strict: a node is not its own ancestor)."""
    return {node: ancestors(graph, node) for node in graph.nodes}


def negative_set(
    target_index: int,
    positive_index: int,
    batch_types: list[str],
    table: SimilarityTable,
    anc: dict[str, frozenset[str]],
) -> set[int]:
    """Batch indices to contrast against the (target, positive) pair.

    k qualifies when its type is strictly less similar to the target's type
    than the positive's type is, and is not an ancestor of the target's type.
    """
    if target_index == positive_index:
        raise ValueError("target and positive must differ")
    ti, tj = batch_types[target_index], batch_types[positive_index]
    bar = table.level(ti, tj)
    excluded = anc.get(ti, frozenset())
    out: set[int] = set()
    for k, tk in enumerate(batch_types):
        if k == target_index:
            continue
        if tk in excluded:
            continue
        if bar > table.level(ti, tk):
            out.add(k)
    return out


def negative_mask(
    batch_types: list[str],
    table: SimilarityTable,
    anc: dict[str, frozenset[str]],
) -> np.ndarray:
    """Vectorized negative sets: mask[i, j, k] == (k in negative_set(i, j)).

    Same rule as :func:`negative_set`, evaluated for every (i, j) pair at
    once so the relational loss can consume it as one boolean tensor.
    """
    b = len(batch_types)
    lev = np.empty((b, b), dtype=np.int64)
    for i, ti in enumerate(batch_types):
        for k, tk in enumerate(batch_types):
            lev[i, k] = table.level(ti, tk)
    anc_mask = np.zeros((b, b), dtype=bool)  # anc_mask[i, k]: c_k ancestor of c_i
    for i, ti in enumerate(batch_types):
        excluded = anc.get(ti, frozenset())
        for k, tk in enumerate(batch_types):
            anc_mask[i, k] = tk in excluded
    # strict level comparison, broadcast over (i, j, k)
    mask = lev[:, :, None] > lev[:, None, :]
    mask &= ~anc_mask[:, None, :]
    idx = np.arange(b)
    mask[idx, :, idx] = False  # k == i never qualifies
    return mask
