"""Steady-state occupancy analysis of static routings.

Solves the head-of-queue occupancy balance

    alpha0 = P^T alpha0 - P^T (A o alpha0) + J

column by column (one absorbing-chain solve per destination) and derives
capacity, transit times, queue lengths, betweenness, and the bound checks
from the solution. ``o`` is the elementwise product; J is the uniform
generation pattern with 1/(N(N-1)) off the diagonal.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np
import scipy.linalg
from scipy import sparse

from .graph import DegreeStats, Graph
from .routing import LOCAL, RoutingSpec, StationaryDistribution, TransitionMatrix

__all__ = [
    "OccupancyMatrix",
    "CapacityReport",
    "QueueLengthReport",
    "BoundEntry",
    "BoundsReport",
    "NonConvergentError",
    "SingularSystemError",
    "CongestedError",
    "generation_matrix",
    "destination_restricted_matrix",
    "solve_occupancy",
    "capacity_report",
    "queue_lengths",
    "approx_capacity",
    "bounds_report",
    "report_json",
]

# Above this size a local routing is solved via one shared factorization plus
# exact low-rank corrections instead of one factorization per destination.
_LOWRANK_MIN_N = 160

_METHODS = ("direct", "neumann", "dense", "lowrank")


class NonConvergentError(Exception):
    """Occupancy solve failed to reach tolerance (iterate diverged or stalled)."""


class SingularSystemError(Exception):
    """Direct solve hit a rank-deficient system (some destination unreachable)."""


class CongestedError(Exception):
    """Requested load is at or beyond the congestion threshold."""


def generation_matrix(n: int) -> np.ndarray:
    """Uniform per-step generation pattern: 1/(n(n-1)) off-diagonal, zero diagonal."""
    j = np.full((n, n), 1.0 / (n * (n - 1)))
    np.fill_diagonal(j, 0.0)
    return j


def destination_restricted_matrix(
    p: Union[np.ndarray, TransitionMatrix], g: Graph, dest: int
) -> np.ndarray:
    """Routing matrix with the rows of ``dest``'s neighbors zeroed.

    Encodes delivery on the final hop: a packet bound for ``dest`` that
    reaches a neighbor is handed over and leaves the system instead of being
    forwarded again.
    """
    mat = p.p if isinstance(p, TransitionMatrix) else np.asarray(p, dtype=np.float64)
    pd = mat.copy()
    pd[g.adjacency[dest] == 1, :] = 0.0
    return pd


@dataclass
class OccupancyMatrix:
    """Per-unit-rate head-of-queue occupancy, one column per destination.

    ``occupancy[i, j]`` is the stationary probability (per unit injection
    rate, normalized by service capacity) that the head of vertex i's queue
    holds a packet bound for j. Row sums drive every capacity quantity.
    """

    occupancy: np.ndarray
    row_sums: np.ndarray
    method: str
    tol: float
    residual: float

    @property
    def n(self) -> int:
        return self.occupancy.shape[0]


@dataclass
class CapacityReport:
    """Capacity, transit-time, and betweenness summary of a solved instance."""

    rc0: float                        # service-normalized transmission capacity
    mean_time: float                  # T: mean queue visits per packet
    t0: float                         # T / N
    per_destination_time: np.ndarray  # T_s: mean visits for packets bound for s
    row_sums: np.ndarray              # s0
    betweenness: np.ndarray           # B_i = N(N-1) s0_i
    b_max: float
    b_mean: float


@dataclass
class QueueLengthReport:
    """Expected queue lengths in the free-flow regime at injection rate R."""

    per_vertex: np.ndarray
    total: float
    rate: float
    capacity: float


@dataclass
class BoundEntry:
    """One evaluated inequality; ``satisfied`` is None for purely reported ratios."""

    name: str
    tag: str  # "hard" | "soft"
    satisfied: bool | None
    value: float
    limit: float | None = None
    detail: str = ""


@dataclass
class BoundsReport:
    entries: list[BoundEntry] = field(default_factory=list)

    def entry(self, name: str) -> BoundEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)


def _column_residual(p_dest: np.ndarray, nbr_mask: np.ndarray, beta: np.ndarray,
                     j_col: np.ndarray) -> float:
    masked = beta.copy()
    masked[nbr_mask] = 0.0
    return float(np.abs(beta - p_dest.T @ masked - j_col).max())


def _solve_dense_column(p_dest: np.ndarray, g: Graph, dest: int, j_col: np.ndarray) -> np.ndarray:
    n = g.n
    system = np.eye(n) - p_dest.T
    system[:, g.adjacency[dest] == 1] += p_dest.T[:, g.adjacency[dest] == 1]
    # system == I - Pd^T with Pd^T = P^T (I - diag(a_dest)); built without
    # materializing Pd to keep one allocation per destination.
    try:
        beta = np.linalg.solve(system, j_col)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(
            f"singular system for destination {dest}: {exc}"
        ) from exc
    return beta


def _solve_neumann_column(
    pt_csr, nbr_mask: np.ndarray, j_col: np.ndarray, tol: float, max_iter: int, dest: int
) -> np.ndarray:
    beta = j_col.copy()
    bound = 1e12
    for _ in range(max_iter):
        masked = beta.copy()
        masked[nbr_mask] = 0.0
        new = pt_csr @ masked + j_col
        delta = float(np.abs(new - beta).sum())
        beta = new
        if delta <= tol:
            return beta
        if not np.isfinite(delta) or beta.sum() > bound:
            break
    raise NonConvergentError(
        f"series iteration for destination {dest} did not contract to {tol}"
    )


def _solve_local_lowrank(g: Graph, p: np.ndarray) -> np.ndarray:
    """All destination columns for a local routing from one factorization.

    For destination d the system matrix differs from I - P^T only by the
    added columns P^T restricted to d's neighbors, a rank-k_d perturbation.
    Factor the (regularized, invertible) base M = I - P^T + (1/n) 1 1^T once
    and apply the Woodbury identity per destination; algebraically identical
    to the per-destination dense solve.
    """
    n = g.n
    base = np.eye(n) - p.T + 1.0 / n
    lu, piv = scipy.linalg.lu_factor(base)
    inv_base = scipy.linalg.lu_solve((lu, piv), np.eye(n))
    inv_base_pt = scipy.linalg.lu_solve((lu, piv), np.ascontiguousarray(p.T))
    row_image_of_ones = inv_base.sum(axis=1)          # M^{-1} 1
    colsum_inv = inv_base.sum(axis=0)                 # 1^T M^{-1}
    colsum_inv_pt = inv_base_pt.sum(axis=0)           # 1^T M^{-1} P^T
    total = float(row_image_of_ones.sum())
    scale = 1.0 / (n * (n - 1))

    alpha = np.empty((n, n), dtype=np.float64)
    for dest in range(n):
        nb = g.neighbors_of(dest)
        k = nb.size
        rhs = scale * (row_image_of_ones - inv_base[:, dest])   # M^{-1} J_dest
        update = np.empty((n, k + 1), dtype=np.float64)
        update[:, :k] = inv_base_pt[:, nb]
        update[:, k] = (-1.0 / n) * row_image_of_ones
        small = np.empty((k + 1, k + 1), dtype=np.float64)
        small[:k, :k] = inv_base_pt[np.ix_(nb, nb)]
        small[:k, k] = (-1.0 / n) * row_image_of_ones[nb]
        small[k, :k] = colsum_inv_pt[nb]
        small[k, k] = 1.0 - total / n
        small[np.arange(k), np.arange(k)] += 1.0
        rhs_small = np.empty(k + 1, dtype=np.float64)
        rhs_small[:k] = rhs[nb]
        rhs_small[k] = scale * (total - colsum_inv[dest])
        try:
            correction = np.linalg.solve(small, rhs_small)
        except np.linalg.LinAlgError as exc:
            raise SingularSystemError(
                f"singular correction system for destination {dest}: {exc}"
            ) from exc
        alpha[:, dest] = rhs - update @ correction
    return alpha


def _local_matrix_residual(p: np.ndarray, g: Graph, alpha: np.ndarray) -> float:
    pt = sparse.csr_matrix(p.T)
    flow = alpha - g.adjacency * alpha  # zero the entries that deliver next hop
    resid = alpha - pt @ flow - generation_matrix(g.n)
    return float(np.abs(resid).max())


def solve_occupancy(
    g: Graph,
    routing: RoutingSpec,
    method: str = "direct",
    tol: float = 1e-12,
    max_iter: int = 1_000_000,
) -> OccupancyMatrix:
    """Solve the occupancy balance for every destination and assemble the matrix.

    Methods: ``direct`` (exact linear solves; large local routings route
    through the shared-factorization low-rank path, which is algebraically
    the same solve), ``dense`` (force
    one factorization per destination), ``lowrank`` (force the shared
    factorization; local only), ``neumann`` (geometric-series iteration to
    ``tol``).

    Raises :class:`NonConvergentError` when iteration diverges or stalls and
    :class:`SingularSystemError` on rank-deficient systems; both signal a
    destination unreachable under the routing's support.
    """
    if method not in _METHODS:
        raise ValueError(f"unknown method {method!r}, expected one of {_METHODS}")
    n = g.n
    if routing.n != n:
        raise ValueError(f"routing size {routing.n} does not match graph size {n}")
    if n < 2:
        raise ValueError("occupancy analysis needs at least 2 vertices")

    effective = method
    if method == "direct":
        effective = "lowrank" if (routing.kind == LOCAL and n >= _LOWRANK_MIN_N) else "dense"
    if effective == "lowrank" and routing.kind != LOCAL:
        effective = "dense"

    j_full = generation_matrix(n)

    if effective == "lowrank":
        try:
            alpha = _solve_local_lowrank(g, routing.local.p)
        except (np.linalg.LinAlgError, SingularSystemError):
            # Reducible support makes the shared base singular; per-destination
            # systems can still be fine, so fall back.
            effective = "dense"

    if effective in ("dense", "neumann"):
        alpha = np.empty((n, n), dtype=np.float64)
        pt_csr = None
        if effective == "neumann" and routing.kind == LOCAL:
            pt_csr = sparse.csr_matrix(routing.local.p.T)
        for dest in range(n):
            p_dest = routing.matrix_for(dest)
            nbr_mask = g.adjacency[dest] == 1
            if effective == "dense":
                beta = _solve_dense_column(p_dest, g, dest, j_full[:, dest])
            else:
                csr = pt_csr if pt_csr is not None else sparse.csr_matrix(p_dest.T)
                beta = _solve_neumann_column(
                    csr, nbr_mask, j_full[:, dest], tol, max_iter, dest
                )
            alpha[:, dest] = beta

    # The balance forces zero self-occupancy; a violation beyond roundoff
    # means the solve went wrong, so check before snapping the diagonal.
    diag = np.abs(np.diagonal(alpha))
    if diag.max(initial=0.0) > max(100 * tol, 1e-9):
        raise NonConvergentError(
            f"self-occupancy should vanish, found {diag.max():.3e}"
        )
    np.fill_diagonal(alpha, 0.0)
    if alpha.min() < -1e-9:
        raise NonConvergentError(f"negative occupancy {alpha.min():.3e}")
    np.clip(alpha, 0.0, None, out=alpha)

    if routing.kind == LOCAL:
        residual = _local_matrix_residual(routing.local.p, g, alpha)
    else:
        residual = 0.0
        for dest in range(n):
            residual = max(
                residual,
                _column_residual(
                    routing.matrix_for(dest), g.adjacency[dest] == 1,
                    alpha[:, dest], j_full[:, dest],
                ),
            )
    cap = max(tol, 1e-10) if effective != "neumann" else max(10 * tol, 1e-10)
    if residual > cap:
        raise NonConvergentError(f"occupancy residual {residual:.3e} exceeds {cap:.1e}")

    return OccupancyMatrix(
        occupancy=alpha,
        row_sums=alpha.sum(axis=1),
        method=effective,
        tol=tol,
        residual=residual,
    )


def capacity_report(occ: OccupancyMatrix) -> CapacityReport:
    """Derive capacity, transit times, and betweenness from a solved occupancy."""
    n = occ.n
    s0 = occ.row_sums
    rc0 = 1.0 / float(s0.max())
    mean_time = float(s0.sum())
    betweenness = n * (n - 1) * s0
    b_max = float(betweenness.max())
    # Same quantity through the betweenness identity; guards the assembly.
    alt = n * (n - 1) / b_max
    if abs(alt - rc0) > 1e-9 * max(1.0, rc0):
        raise AssertionError(f"capacity identity violated: {rc0} vs {alt}")
    return CapacityReport(
        rc0=rc0,
        mean_time=mean_time,
        t0=mean_time / n,
        per_destination_time=n * occ.occupancy.sum(axis=0),
        row_sums=s0,
        betweenness=betweenness,
        b_max=b_max,
        b_mean=float(betweenness.mean()),
    )


def queue_lengths(occ: OccupancyMatrix, rate: float, capacity: float) -> QueueLengthReport:
    """Expected stationary queue lengths L_i = R * s0_i in the free-flow regime.

    Requires (R/C) * max s0 < 1; beyond that there is no stationary state and
    :class:`CongestedError` is raised. The totals satisfy L / R = T exactly.
    """
    if rate < 0 or capacity <= 0:
        raise ValueError("need rate >= 0 and capacity > 0")
    load = (rate / capacity) * float(occ.row_sums.max())
    if load >= 1.0:
        raise CongestedError(
            f"rate {rate} with capacity {capacity} gives head load {load:.4f} >= 1"
        )
    per_vertex = rate * occ.row_sums
    total = float(per_vertex.sum())
    if rate > 0:
        mean_time = float(occ.row_sums.sum())
        assert abs(total / rate - mean_time) <= 1e-12 * max(1.0, mean_time)
    return QueueLengthReport(per_vertex=per_vertex, total=total, rate=rate, capacity=capacity)


def approx_capacity(g: Graph, pi: StationaryDistribution) -> float:
    """Large-sparse-network capacity approximation from the stationary distribution.

    Returns N / (pi_max * sum_i 1 / (A pi)_i). Exact capacity requires the
    full occupancy solve; this needs only the chain's fixed vector and
    degrades on small dense graphs.
    """
    neighbor_mass = g.adjacency.astype(np.float64) @ pi.pi
    return g.n / (pi.pi_max * float((1.0 / neighbor_mass).sum()))


def bounds_report(
    report: CapacityReport,
    stats: DegreeStats,
    z: float,
    pi: StationaryDistribution | None = None,
) -> BoundsReport:
    """Evaluate the capacity/time inequalities for one solved instance.

    (a) t0 * rc0 <= 1 is exact for every graph and routing (hard). The
    others are approximations: (b) rc0 against the harmonic-mean degree
    bound (local routings, large sparse graphs), (c) rc0 <= N/Z and T >= Z
    (hop metric; tight for shortest-path routing), (d) the asymptotic
    consistency ratio T * pi_max * rc0, reported without a verdict.
    """
    entries = []
    product = report.t0 * report.rc0
    entries.append(
        BoundEntry(
            name="time_capacity_product",
            tag="hard",
            satisfied=bool(product <= 1.0 + 1e-12),
            value=product,
            limit=1.0,
            detail="t0 * rc0; equality iff the load is perfectly uniform",
        )
    )
    entries.append(
        BoundEntry(
            name="harmonic",
            tag="soft",
            satisfied=bool(report.rc0 <= stats.harmonic_bound + 1e-9),
            value=report.rc0,
            limit=stats.harmonic_bound,
            detail="rc0 vs 1/<1/k>; asymptotic, local routings on large sparse graphs",
        )
    )
    n = report.row_sums.shape[0]
    diam_ok = report.rc0 <= n / z + 1e-9 and report.mean_time >= z - 1e-9
    entries.append(
        BoundEntry(
            name="diameter",
            tag="soft",
            satisfied=bool(diam_ok),
            value=report.rc0,
            limit=n / z,
            detail=f"rc0 vs N/Z and T={report.mean_time:.6g} vs Z={z:.6g}; "
            "hard only under shortest-path routing in the hop metric",
        )
    )
    ratio = report.mean_time * pi.pi_max * report.rc0 if pi is not None else float("nan")
    entries.append(
        BoundEntry(
            name="stationary_ratio",
            tag="soft",
            satisfied=None,
            value=ratio,
            limit=1.0,
            detail="T * pi_max * rc0; approaches 1 on large networks, reported only",
        )
    )
    return BoundsReport(entries=entries)


def report_json(
    g: Graph,
    routing_kind: str,
    occ: OccupancyMatrix,
    cap: CapacityReport,
    bounds: BoundsReport | None = None,
) -> dict:
    """Assemble the exported report object (JSON-serializable dict)."""
    def _entry(name: str):
        if bounds is None:
            return None
        e = bounds.entry(name)
        out = {"tag": e.tag, "value": e.value, "limit": e.limit, "detail": e.detail}
        if e.satisfied is not None:
            out["satisfied"] = e.satisfied
        if not np.isfinite(e.value):
            out["value"] = None
        return out

    return {
        "n": g.n,
        "routing_kind": routing_kind,
        "rc0": cap.rc0,
        "T": cap.mean_time,
        "t0": cap.t0,
        "T_s": cap.per_destination_time.tolist(),
        "s0": cap.row_sums.tolist(),
        "betweenness": cap.betweenness.tolist(),
        "bounds": {
            "t0rc0": _entry("time_capacity_product"),
            "harmonic": _entry("harmonic"),
            "diameter": _entry("diameter"),
            "eq5_ratio": _entry("stationary_ratio"),
        },
        "solver": {"method": occ.method, "tol": occ.tol, "residual": occ.residual},
    }
