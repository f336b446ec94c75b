"""Undirected graphs: construction, edge-list I/O, scale-free generation, structure stats."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import IO, Iterable, Union

import numpy as np

__all__ = [
    "Graph",
    "DegreeStats",
    "GraphError",
    "ParseError",
    "SelfLoopError",
    "DisconnectedError",
    "InvalidParamsError",
    "load_edge_list",
    "serialize_edge_list",
    "generate_ba",
    "degree_stats",
    "average_shortest_path_length",
    "bfs_distances",
    "is_connected",
]


class GraphError(Exception):
    """Base class for graph construction and validation failures."""


class ParseError(GraphError):
    """Malformed or empty edge-list input."""


class SelfLoopError(GraphError):
    """An edge joins a vertex to itself."""


class DisconnectedError(GraphError):
    """The graph is not connected."""


class InvalidParamsError(GraphError):
    """Parameters outside the valid range."""


class Graph:
    """Immutable simple undirected graph on dense 0-based vertex ids.

    Holds the edge set, a symmetric 0/1 adjacency matrix with zero diagonal,
    the degree sequence, and per-vertex sorted neighbor arrays. All arrays
    are frozen after construction so a Graph can be shared freely across
    workers.
    """

    def __init__(self, n: int, edges: Iterable[tuple[int, int]], require_connected: bool = True):
        if n < 1:
            raise InvalidParamsError(f"vertex count must be positive, got {n}")
        canonical = set()
        for u, v in edges:
            u, v = int(u), int(v)
            if u == v:
                raise SelfLoopError(f"self-loop at vertex {u}")
            if not (0 <= u < n and 0 <= v < n):
                raise InvalidParamsError(f"edge ({u}, {v}) outside vertex range [0, {n})")
            canonical.add((min(u, v), max(u, v)))

        self.n = n
        self.edges = tuple(sorted(canonical))

        adjacency = np.zeros((n, n), dtype=np.uint8)
        for u, v in self.edges:
            adjacency[u, v] = 1
            adjacency[v, u] = 1
        adjacency.flags.writeable = False
        self.adjacency = adjacency

        degrees = adjacency.sum(axis=1).astype(np.int64)
        degrees.flags.writeable = False
        self.degrees = degrees

        neighbors = []
        for v in range(n):
            nb = np.flatnonzero(adjacency[v]).astype(np.int64)
            nb.flags.writeable = False
            neighbors.append(nb)
        self._neighbors = tuple(neighbors)

        if require_connected and not is_connected(self):
            raise DisconnectedError(f"graph on {n} vertices is not connected")

    def neighbors_of(self, v: int) -> np.ndarray:
        """Sorted neighbor ids of vertex ``v`` (read-only array)."""
        return self._neighbors[v]

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    def __eq__(self, other) -> bool:
        return isinstance(other, Graph) and self.n == other.n and self.edges == other.edges

    def __hash__(self):
        return hash((self.n, self.edges))

    def __repr__(self) -> str:
        return f"Graph(n={self.n}, edges={self.edge_count})"


@dataclass(frozen=True)
class DegreeStats:
    """Degree summary of a graph.

    ``harmonic_bound`` is the harmonic mean of the degrees, i.e. the
    reciprocal of the mean inverse degree. It never exceeds ``mean_degree``
    (arithmetic-harmonic mean inequality) and the two coincide exactly on
    regular graphs.
    """

    mean_degree: float
    mean_inverse_degree: float
    harmonic_bound: float
    min_degree: int
    max_degree: int


def is_connected(g: Graph) -> bool:
    """True iff a breadth-first traversal from vertex 0 reaches every vertex."""
    seen = np.zeros(g.n, dtype=bool)
    seen[0] = True
    queue = deque([0])
    while queue:
        v = queue.popleft()
        for w in g.neighbors_of(v):
            if not seen[w]:
                seen[w] = True
                queue.append(int(w))
    return bool(seen.all())


def bfs_distances(g: Graph, source: int) -> np.ndarray:
    """Hop-count distances from ``source`` to every vertex; -1 where unreachable."""
    dist = np.full(g.n, -1, dtype=np.int64)
    dist[source] = 0
    queue = deque([source])
    while queue:
        v = queue.popleft()
        dv = dist[v]
        for w in g.neighbors_of(v):
            if dist[w] < 0:
                dist[w] = dv + 1
                queue.append(int(w))
    return dist


def load_edge_list(source: Union[str, IO, Iterable[str]]) -> Graph:
    """Parse an edge-list text into a connected Graph.

    Each non-comment line holds two distinct nonnegative integer vertex ids
    separated by whitespace. Lines starting with ``#`` and blank lines are
    ignored; duplicate edges collapse. The vertex count is one plus the
    largest id seen, so gaps in the id range surface as a
    :class:`DisconnectedError`.
    """
    if isinstance(source, str):
        lines = source.splitlines()
    else:
        lines = source

    edges = []
    max_id = -1
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ParseError(f"line {lineno}: expected two vertex ids, got {line!r}")
        try:
            u, v = int(parts[0]), int(parts[1])
        except ValueError:
            raise ParseError(f"line {lineno}: non-integer vertex id in {line!r}") from None
        if u < 0 or v < 0:
            raise ParseError(f"line {lineno}: negative vertex id in {line!r}")
        if u == v:
            raise SelfLoopError(f"line {lineno}: self-loop at vertex {u}")
        edges.append((u, v))
        max_id = max(max_id, u, v)

    if not edges:
        raise ParseError("edge list is empty")
    return Graph(max_id + 1, edges)


def serialize_edge_list(g: Graph) -> str:
    """Edge-list text mirroring the input format, edges sorted lexicographically."""
    return "".join(f"{u} {v}\n" for u, v in g.edges)


def generate_ba(n: int, m: int, seed: int) -> Graph:
    """Grow a scale-free graph by preferential attachment.

    Starts from a clique on ``m + 1`` vertices; each later vertex attaches
    ``m`` edges to distinct existing vertices drawn with probability
    proportional to their degree at the moment the vertex arrives
    (duplicate draws are rejected and redrawn). The result is connected
    with minimum degree ``m``. Deterministic for a fixed seed.
    """
    if m < 1 or n <= m:
        raise InvalidParamsError(f"need n > m >= 1, got n={n}, m={m}")

    rng = np.random.default_rng(seed)
    edges = [(u, v) for u in range(m + 1) for v in range(u + 1, m + 1)]
    degrees = np.zeros(n, dtype=np.float64)
    degrees[: m + 1] = m

    for v in range(m + 1, n):
        cum = np.cumsum(degrees[:v])
        total = cum[-1]
        targets: set[int] = set()
        while len(targets) < m:
            t = int(np.searchsorted(cum, rng.random() * total, side="right"))
            targets.add(t)
        for t in targets:
            edges.append((t, v))
            degrees[t] += 1
        degrees[v] = m

    return Graph(n, edges)


def degree_stats(g: Graph) -> DegreeStats:
    """Mean degree, mean inverse degree, and the harmonic-mean degree bound."""
    k = g.degrees.astype(float)
    if k.min() < 1:
        raise InvalidParamsError("degree statistics need minimum degree >= 1")
    mean_inv = float(np.mean(1.0 / k))
    return DegreeStats(
        mean_degree=float(k.mean()),
        mean_inverse_degree=mean_inv,
        harmonic_bound=1.0 / mean_inv,
        min_degree=int(k.min()),
        max_degree=int(k.max()),
    )


def average_shortest_path_length(g: Graph) -> float:
    """Mean hop-count distance over all ordered vertex pairs ``u != v``."""
    if g.n < 2:
        raise InvalidParamsError("average shortest path length needs at least 2 vertices")
    total = 0
    for v in range(g.n):
        dist = bfs_distances(g, v)
        if (dist < 0).any():
            raise DisconnectedError("graph is not connected")
        total += int(dist.sum())
    return total / (g.n * (g.n - 1))
