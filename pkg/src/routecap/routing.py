"""Static routing strategies encoded as row-stochastic transition matrices.

A local routing is a single matrix used for every packet; a global routing
keeps one matrix per destination vertex. Both are time-invariant.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np
from scipy import sparse

from .graph import Graph, bfs_distances

__all__ = [
    "TransitionMatrix",
    "RoutingSpec",
    "StationaryDistribution",
    "ConsistencyReport",
    "NonConvergenceError",
    "uniform_random_walk",
    "degree_biased",
    "shortest_path_routing",
    "validate_consistency",
    "validate_routing_spec",
    "stationary_distribution",
    "save_matrix_csv",
    "load_matrix",
]

ROW_SUM_TOL = 1e-12

LOCAL = "local"
GLOBAL = "global"


class NonConvergenceError(Exception):
    """Iterative solve hit its iteration cap before reaching tolerance."""


class TransitionMatrix:
    """Square row-stochastic nonnegative matrix with zero diagonal.

    Entry ``p[i, j]`` is the probability that a packet forwarded from vertex
    i is handed to vertex j. Support consistency with a particular graph is
    checked separately by :func:`validate_consistency`.
    """

    def __init__(self, p):
        p = np.array(p, dtype=np.float64)
        if p.ndim != 2 or p.shape[0] != p.shape[1]:
            raise ValueError(f"transition matrix must be square, got shape {p.shape}")
        if not np.isfinite(p).all():
            raise ValueError("transition matrix contains non-finite entries")
        if (p < 0).any() or (p > 1 + ROW_SUM_TOL).any():
            raise ValueError("transition matrix entries must lie in [0, 1]")
        if np.diagonal(p).any():
            raise ValueError("transition matrix diagonal must be zero")
        row_err = np.abs(p.sum(axis=1) - 1.0).max()
        if row_err > ROW_SUM_TOL:
            raise ValueError(f"rows must sum to 1 within {ROW_SUM_TOL}, worst error {row_err:.3e}")
        p.flags.writeable = False
        self.p = p

    @property
    def n(self) -> int:
        return self.p.shape[0]

    def __repr__(self) -> str:
        return f"TransitionMatrix(n={self.n})"


@dataclass(frozen=True)
class RoutingSpec:
    """A static routing: one matrix (local) or one matrix per destination (global)."""

    kind: str
    local: TransitionMatrix | None = None
    per_destination: tuple[TransitionMatrix, ...] | None = None

    @classmethod
    def from_local(cls, tm: TransitionMatrix) -> "RoutingSpec":
        return cls(kind=LOCAL, local=tm)

    @classmethod
    def from_global(cls, matrices: Sequence[TransitionMatrix]) -> "RoutingSpec":
        mats = tuple(matrices)
        n = mats[0].n
        if len(mats) != n:
            raise ValueError(f"global routing needs exactly {n} matrices, got {len(mats)}")
        if any(m.n != n for m in mats):
            raise ValueError("all per-destination matrices must share one size")
        return cls(kind=GLOBAL, per_destination=mats)

    @property
    def is_global(self) -> bool:
        return self.kind == GLOBAL

    @property
    def n(self) -> int:
        if self.kind == LOCAL:
            return self.local.n
        return self.per_destination[0].n

    def matrix_for(self, dest: int) -> np.ndarray:
        """Transition matrix applied to packets bound for ``dest``."""
        if self.kind == LOCAL:
            return self.local.p
        return self.per_destination[dest].p


@dataclass(frozen=True)
class StationaryDistribution:
    """Left fixed vector of a routing chain: pi = P^T pi, sum(pi) = 1."""

    pi: np.ndarray
    pi_max: float
    residual: float
    iterations: int


@dataclass
class ConsistencyReport:
    ok: bool
    reasons: list[str] = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.ok


def uniform_random_walk(g: Graph) -> TransitionMatrix:
    """Equal probability over the neighbors of each vertex: p[i, j] = A[i, j] / k_i."""
    p = g.adjacency.astype(np.float64) / g.degrees[:, None]
    return TransitionMatrix(p)


def degree_biased(g: Graph, beta: float) -> TransitionMatrix:
    """Hop probability weighted by the target's degree raised to ``beta``.

    beta = 0 reproduces the uniform random walk; negative beta steers traffic
    away from hubs.
    """
    weights = g.adjacency.astype(np.float64) * (g.degrees.astype(np.float64) ** beta)[None, :]
    p = weights / weights.sum(axis=1, keepdims=True)
    return TransitionMatrix(p)


def _shortest_path_counts(g: Graph, dest: int) -> tuple[np.ndarray, np.ndarray]:
    """Distances to ``dest`` and the number of shortest paths from each vertex to it."""
    dist = np.full(g.n, -1, dtype=np.int64)
    sigma = np.zeros(g.n, dtype=np.float64)
    dist[dest] = 0
    sigma[dest] = 1.0
    queue = deque([dest])
    while queue:
        v = queue.popleft()
        for w in g.neighbors_of(v):
            if dist[w] < 0:
                dist[w] = dist[v] + 1
                queue.append(int(w))
            if dist[w] == dist[v] + 1:
                sigma[w] += sigma[v]
    return dist, sigma


def shortest_path_routing(g: Graph) -> RoutingSpec:
    """Global routing that picks uniformly among all shortest paths to the target.

    For destination x the row of vertex i puts, on each neighbor j one hop
    closer to x, probability proportional to the number of shortest j->x
    paths. The row of x itself (never consulted for packets bound for x) is
    filled with the uniform random walk row so every matrix stays
    row-stochastic.
    """
    walk_rows = g.adjacency.astype(np.float64) / g.degrees[:, None]
    matrices = []
    for dest in range(g.n):
        dist, sigma = _shortest_path_counts(g, dest)
        p = np.zeros((g.n, g.n), dtype=np.float64)
        for i in range(g.n):
            if i == dest:
                p[i] = walk_rows[i]
                continue
            nb = g.neighbors_of(i)
            downhill = nb[dist[nb] == dist[i] - 1]
            p[i, downhill] = sigma[downhill] / sigma[i]
        matrices.append(TransitionMatrix(p))
    return RoutingSpec.from_global(matrices)


def validate_consistency(p: Union[np.ndarray, TransitionMatrix], g: Graph) -> ConsistencyReport:
    """Check that a candidate matrix is a routing consistent with the graph.

    Verifies shape, entry range, zero diagonal, unit row sums, and that the
    support lies inside the adjacency support. Returns a report rather than
    raising, with one reason per violated condition.
    """
    mat = p.p if isinstance(p, TransitionMatrix) else np.asarray(p, dtype=np.float64)
    reasons: list[str] = []
    if mat.ndim != 2 or mat.shape != (g.n, g.n):
        return ConsistencyReport(False, [f"shape {mat.shape} does not match graph size {g.n}"])
    if not np.isfinite(mat).all():
        reasons.append("non-finite entries present")
    if (mat < -ROW_SUM_TOL).any() or (mat > 1 + ROW_SUM_TOL).any():
        reasons.append("entries outside [0, 1]")
    diag = np.abs(np.diagonal(mat))
    if diag.max(initial=0.0) > 0:
        reasons.append(f"nonzero diagonal at vertices {np.flatnonzero(diag).tolist()[:10]}")
    row_sums = mat.sum(axis=1)
    bad_rows = np.flatnonzero(np.abs(row_sums - 1.0) > ROW_SUM_TOL)
    if bad_rows.size:
        worst = bad_rows[np.argmax(np.abs(row_sums[bad_rows] - 1.0))]
        reasons.append(
            f"{bad_rows.size} rows do not sum to 1 (e.g. row {worst} sums to {row_sums[worst]:.12g})"
        )
    off_support = (mat > 0) & (g.adjacency == 0)
    if off_support.any():
        where = list(zip(*np.nonzero(off_support)))[:10]
        reasons.append(f"positive entries off the adjacency support, e.g. {where}")
    return ConsistencyReport(not reasons, reasons)


def validate_routing_spec(spec: RoutingSpec, g: Graph) -> ConsistencyReport:
    """Validate a full routing spec against a graph.

    Local: plain consistency. Global: consistency of all matrices plus, for
    every destination x, reachability of x's neighborhood from every other
    vertex along the positive support (otherwise some packet could never be
    delivered and the occupancy solve would diverge).
    """
    if spec.kind == LOCAL:
        return validate_consistency(spec.local, g)

    reasons: list[str] = []
    for dest, tm in enumerate(spec.per_destination):
        rep = validate_consistency(tm, g)
        if not rep.ok:
            reasons.extend(f"destination {dest}: {r}" for r in rep.reasons)
            continue
        # Reverse reachability of the absorbing set (dest's neighborhood).
        reached = np.zeros(g.n, dtype=bool)
        frontier = list(g.neighbors_of(dest))
        reached[frontier] = True
        support = tm.p > 0
        while frontier:
            nxt = support[:, frontier].any(axis=1) & ~reached
            frontier = np.flatnonzero(nxt).tolist()
            reached[frontier] = True
        reached[dest] = True
        missing = np.flatnonzero(~reached)
        if missing.size:
            reasons.append(
                f"destination {dest}: vertices {missing.tolist()[:10]} cannot reach it"
            )
    return ConsistencyReport(not reasons, reasons)


def stationary_distribution(
    p: Union[np.ndarray, TransitionMatrix],
    tol: float = 1e-12,
    max_iter: int = 500_000,
) -> StationaryDistribution:
    """Stationary distribution of an irreducible routing chain by power iteration.

    Plain left-multiplication iteration; when the residual stagnates (the
    signature of a periodic chain, e.g. any bipartite graph under the random
    walk) successive iterates are averaged, which cancels the oscillating
    eigencomponent while preserving the fixed vector. Raises
    :class:`NonConvergenceError` at the iteration cap.
    """
    mat = p.p if isinstance(p, TransitionMatrix) else np.asarray(p, dtype=np.float64)
    n = mat.shape[0]
    if n == 1:
        return StationaryDistribution(np.ones(1), 1.0, 0.0, 0)
    pt = sparse.csr_matrix(mat.T) if n >= 64 else mat.T

    x = np.full(n, 1.0 / n)
    checkpoint = np.inf
    stagnations = 0
    lazy = False
    for it in range(1, max_iter + 1):
        y = pt @ x
        if lazy:
            y = 0.5 * (x + y)
        y /= y.sum()
        residual = float(np.abs(y - x).sum())
        if residual <= tol:
            return StationaryDistribution(
                pi=y, pi_max=float(y.max()), residual=residual, iterations=it
            )
        if it % 100 == 0:
            if residual > 0.5 * checkpoint:
                # Not contracting: collapse the period-2 component.
                y = 0.5 * (x + y)
                y /= y.sum()
                stagnations += 1
                if stagnations >= 3:
                    lazy = True
            checkpoint = residual
        x = y
    raise NonConvergenceError(
        f"stationary distribution did not reach {tol} in {max_iter} iterations"
    )


def save_matrix_csv(p: Union[np.ndarray, TransitionMatrix], path) -> None:
    """Write a matrix as dense CSV, one row per line."""
    mat = p.p if isinstance(p, TransitionMatrix) else np.asarray(p, dtype=np.float64)
    np.savetxt(path, mat, delimiter=",", fmt="%.17g")


def load_matrix(source: Union[str, Iterable[str]], n: int | None = None) -> np.ndarray:
    """Read a matrix from dense CSV rows or sparse ``i j p`` triplet lines.

    Lines with commas are dense CSV rows; otherwise every line must be an
    ``i j value`` triplet. For triplet input the size is ``n`` when given,
    else one plus the largest index seen. The result is a plain array;
    validate it with :func:`validate_consistency` before use.
    """
    if isinstance(source, str):
        lines = source.splitlines()
    else:
        lines = list(source)
    rows = [ln.strip() for ln in lines if ln.strip() and not ln.strip().startswith("#")]
    if not rows:
        raise ValueError("matrix input is empty")

    if any("," in ln for ln in rows):
        data = [[float(tok) for tok in ln.split(",")] for ln in rows]
        mat = np.asarray(data, dtype=np.float64)
        if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
            raise ValueError(f"dense CSV must be square, got shape {mat.shape}")
        return mat

    triplets = []
    for ln in rows:
        parts = ln.split()
        if len(parts) != 3:
            raise ValueError(f"triplet line must have three fields, got {ln!r}")
        triplets.append((int(parts[0]), int(parts[1]), float(parts[2])))
    size = n if n is not None else 1 + max(max(i, j) for i, j, _ in triplets)
    mat = np.zeros((size, size), dtype=np.float64)
    for i, j, val in triplets:
        mat[i, j] = val
    return mat
