"""Exact discrete-time packet-transport simulation.

Synchronous steps: every vertex serves up to C packets from the head of its
FIFO queue (snapshot at step start); a served packet adjacent to its
destination is handed over and leaves the network, any other is forwarded
along the routing row, excluding the last ``n_avoid`` vertices it visited.
Then R new packets (fractional rate via a Bernoulli draw) enter uniformly
random source queues with uniformly random distinct destinations. State is
kept in flat arrays so steps are vectorized; FIFO order is an arrival
sequence number.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .graph import Graph
from .routing import GLOBAL, LOCAL, RoutingSpec, validate_routing_spec

__all__ = [
    "SimConfig",
    "SimResult",
    "Packet",
    "Simulator",
    "RcEstimate",
    "DegenerateWindowError",
    "BadBracketError",
    "run_simulation",
    "order_parameter",
    "estimate_rc",
]


class DegenerateWindowError(Exception):
    """Too few trace points to fit a slope."""


class BadBracketError(Exception):
    """Both bisection endpoints classify the same."""

    def __init__(self, message: str, eta_low: float, eta_high: float):
        super().__init__(message)
        self.eta_low = eta_low
        self.eta_high = eta_high


@dataclass(frozen=True)
class SimConfig:
    """Parameters of one simulation run.

    ``service`` is the per-vertex per-step service budget C, ``rate`` the
    mean packets generated per step R. ``abort_above`` optionally truncates a
    run once the in-network count exceeds it (supercritical runs grow without
    bound; the truncated trace still ends with a well-defined state).
    """

    graph: Graph
    routing: RoutingSpec
    rate: float
    service: int = 1
    n_avoid: int = 1
    seed: int = 0
    warmup_steps: int = 20_000
    measure_steps: int = 30_000
    track_head_occupancy: Optional[bool] = None
    head_batches: int = 0
    abort_above: Optional[int] = None

    def __post_init__(self):
        if self.service < 1:
            raise ValueError("service capacity C must be a positive integer")
        if self.rate < 0:
            raise ValueError("generation rate R must be nonnegative")
        if self.n_avoid < 0:
            raise ValueError("n_avoid must be nonnegative")
        if self.warmup_steps < 0 or self.measure_steps < 100:
            raise ValueError("need warmup_steps >= 0 and measure_steps >= 100")
        if self.n_avoid >= int(self.graph.degrees.min()) and self.n_avoid > 0:
            warnings.warn(
                f"n_avoid={self.n_avoid} is not below the minimum degree "
                f"{int(self.graph.degrees.min())}; avoidance will fall back often",
                stacklevel=2,
            )


@dataclass(frozen=True)
class Packet:
    """Inspection view of one in-flight packet."""

    id: int
    source: int
    destination: int
    birth_step: int
    recent_visits: tuple[int, ...]


@dataclass
class SimResult:
    """Measured outcome of a run.

    Per-vertex and per-destination statistics are collected over the
    measurement window only; ``w_trace`` covers the whole run. The order
    parameter ``eta`` is fitted on the measurement window.
    """

    w_trace: np.ndarray
    window: tuple[int, int]
    eta: float
    delivered_count: int
    generated_count: int
    mean_delivery_time: float
    per_destination_delivery_time: np.ndarray
    per_destination_delivered: np.ndarray
    mean_queue_lengths: np.ndarray
    head_occupancy: Optional[np.ndarray]
    head_occupancy_batches: Optional[np.ndarray]
    delivered_total: int
    generated_total: int
    steps_run: int
    aborted: bool

    @property
    def mean_total_queue_length(self) -> float:
        return float(self.mean_queue_lengths.sum())


class Simulator:
    """Mutable simulation state with a vectorized synchronous step."""

    def __init__(self, config: SimConfig):
        rep = validate_routing_spec(config.routing, config.graph)
        if not rep.ok:
            raise ValueError("routing inconsistent with graph: " + "; ".join(rep.reasons))
        self.config = config
        g = config.graph
        self.n = g.n
        self.rng = np.random.default_rng(config.seed)
        self.adj_bool = g.adjacency.astype(bool)
        self.deg = g.degrees.astype(np.int64)

        # CSR neighbor layout shared by all sampling tables.
        self._indptr = np.zeros(self.n + 1, dtype=np.int64)
        self._indptr[1:] = np.cumsum(self.deg)
        self._nbr_flat = np.concatenate([g.neighbors_of(v) for v in range(self.n)])
        self._nnz = int(self._indptr[-1])
        self._build_sampling_tables()

        # Packet state, one row per in-flight packet.
        self.cur = np.empty(0, dtype=np.int64)
        self.dst = np.empty(0, dtype=np.int64)
        self.src = np.empty(0, dtype=np.int64)
        self.born = np.empty(0, dtype=np.int64)
        self.seq = np.empty(0, dtype=np.int64)
        self.ids = np.empty(0, dtype=np.int64)
        self.recent = np.empty((0, config.n_avoid), dtype=np.int64)

        self.t = 0
        self._seq_counter = 0
        self._id_counter = 0
        self.generated_total = 0
        self.delivered_total = 0

    def _build_sampling_tables(self):
        """Cumulative-probability rows laid out flat so one searchsorted call
        samples a next hop for every forwarded packet at once. Entries are
        offset by (destination-group * n + vertex) to keep the flat array
        strictly increasing; the last entry of each row is pinned to the
        offset + 1 so a uniform draw never spills into the next row."""
        spec = self.config.routing
        groups = self.n if spec.kind == GLOBAL else 1
        aug = np.empty(groups * self._nnz, dtype=np.float64)
        for grp in range(groups):
            p = spec.matrix_for(grp) if spec.kind == GLOBAL else spec.local.p
            base = grp * self._nnz
            for v in range(self.n):
                lo, hi = self._indptr[v], self._indptr[v + 1]
                row = np.minimum(np.cumsum(p[v, self._nbr_flat[lo:hi]]), 1.0)
                row[-1] = 1.0
                aug[base + lo : base + hi] = (grp * self.n + v) + row
        self._aug = aug
        self._groups = groups

    def _row_support(self, group: int, vertex: int) -> tuple[np.ndarray, np.ndarray]:
        """Neighbor ids and hop probabilities of one routing row."""
        lo, hi = self._indptr[vertex], self._indptr[vertex + 1]
        base = group * self._nnz
        cum = self._aug[base + lo : base + hi] - (group * self.n + vertex)
        probs = np.diff(cum, prepend=0.0)
        return self._nbr_flat[lo:hi], probs

    @property
    def in_network(self) -> int:
        return self.cur.shape[0]

    def inject(self, source: int, destination: int, birth_step: Optional[int] = None) -> int:
        """Append one packet to a source queue (testing/debug hook); returns its id."""
        if source == destination:
            raise ValueError("destination must differ from source")
        self.cur = np.append(self.cur, source)
        self.dst = np.append(self.dst, destination)
        self.src = np.append(self.src, source)
        self.born = np.append(self.born, self.t if birth_step is None else birth_step)
        self.seq = np.append(self.seq, self._seq_counter)
        pid = self._id_counter
        self.ids = np.append(self.ids, pid)
        self.recent = np.vstack(
            [self.recent, np.full((1, self.config.n_avoid), -1, dtype=np.int64)]
        )
        self._seq_counter += 1
        self._id_counter += 1
        self.generated_total += 1
        return pid

    def queues(self) -> list[list[Packet]]:
        """Reconstruct the per-vertex FIFO queues as Packet views."""
        out: list[list[Packet]] = [[] for _ in range(self.n)]
        order = np.lexsort((self.seq, self.cur))
        for idx in order:
            out[int(self.cur[idx])].append(
                Packet(
                    id=int(self.ids[idx]),
                    source=int(self.src[idx]),
                    destination=int(self.dst[idx]),
                    birth_step=int(self.born[idx]),
                    recent_visits=tuple(int(r) for r in self.recent[idx] if r >= 0),
                )
            )
        return out

    def _sample_hops(self, movers: np.ndarray) -> np.ndarray:
        cfg = self.config
        cur_m = self.cur[movers]
        group = self.dst[movers] if self._groups > 1 else np.zeros(len(movers), dtype=np.int64)
        key = (group * self.n + cur_m).astype(np.float64)

        def draw(rows_key):
            u = self.rng.random(rows_key.shape[0])
            pos = np.searchsorted(self._aug, rows_key + u, side="right")
            return self._nbr_flat[pos % self._nnz]

        nxt = draw(key)
        if cfg.n_avoid == 0:
            return nxt

        rec = self.recent[movers]
        # A packet whose every neighbor sits in its recent list must ignore
        # the avoidance set; its full-row sample above already stands.
        if cfg.n_avoid == 1:
            single = self.deg[cur_m] == 1
            only = self._nbr_flat[self._indptr[cur_m]]
            forced = single & (only == rec[:, 0])
        else:
            forced = np.zeros(len(movers), dtype=bool)
            for i in np.flatnonzero(self.deg[cur_m] <= cfg.n_avoid):
                v = cur_m[i]
                nbrs = self._nbr_flat[self._indptr[v] : self._indptr[v + 1]]
                forced[i] = np.isin(nbrs, rec[i]).all()

        def collides(cand, rows):
            hit = np.zeros(cand.shape[0], dtype=bool)
            for j in range(cfg.n_avoid):
                hit |= cand == rec[rows, j]
            return hit

        active = np.flatnonzero(~forced)
        busy = active[collides(nxt[active], active)]
        rounds = 0
        while busy.size:
            rounds += 1
            if rounds > 64:
                for i in busy:
                    grp = int(group[i])
                    nbrs, probs = self._row_support(grp, int(cur_m[i]))
                    ok = probs > 0
                    for j in range(cfg.n_avoid):
                        ok &= nbrs != rec[i, j]
                    if ok.any():
                        w = probs[ok]
                        nxt[i] = self.rng.choice(nbrs[ok], p=w / w.sum())
                    else:
                        w = probs[probs > 0]
                        nxt[i] = self.rng.choice(nbrs[probs > 0], p=w / w.sum())
                break
            nxt[busy] = draw(key[busy])
            busy = busy[collides(nxt[busy], busy)]
        return nxt

    def step(self, _record=None) -> tuple[int, int]:
        """Advance one synchronous step; returns (delivered, generated).

        ``_record`` is the internal measurement hook used by :meth:`run`.
        """
        cfg = self.config
        w0 = self.in_network
        delivered_idx = np.empty(0, dtype=np.int64)

        if w0:
            order = np.lexsort((self.seq, self.cur))
            occupied = self.cur[order]
            starts = np.flatnonzero(np.r_[True, occupied[1:] != occupied[:-1]])
            if _record is not None and _record.heads is not None:
                heads = order[starts]
                _record.note_heads(self.cur[heads], self.dst[heads])
            counts = np.diff(np.r_[starts, w0])
            rank = np.arange(w0) - np.repeat(starts, counts)
            served = order[rank < cfg.service]

            arrives = self.adj_bool[self.cur[served], self.dst[served]]
            delivered_idx = served[arrives]
            movers = served[~arrives]

            if movers.size:
                nxt = self._sample_hops(movers)
                if cfg.n_avoid > 0:
                    self.recent[movers, 1:] = self.recent[movers, :-1]
                    self.recent[movers, 0] = self.cur[movers]
                self.cur[movers] = nxt
                # Simultaneous forwarded arrivals enter their queues in a
                # seeded random order, ahead of this step's generated packets.
                perm = self.rng.permutation(movers.size)
                self.seq[movers[perm]] = self._seq_counter + np.arange(movers.size)
                self._seq_counter += movers.size

        delivered = int(delivered_idx.size)
        if _record is not None and delivered:
            _record.note_delivery(self.dst[delivered_idx], self.t - self.born[delivered_idx])

        if delivered:
            keep = np.ones(w0, dtype=bool)
            keep[delivered_idx] = False
            self.cur = self.cur[keep]
            self.dst = self.dst[keep]
            self.src = self.src[keep]
            self.born = self.born[keep]
            self.seq = self.seq[keep]
            self.ids = self.ids[keep]
            self.recent = self.recent[keep]

        n_new = int(cfg.rate)
        frac = cfg.rate - n_new
        if frac > 0 and self.rng.random() < frac:
            n_new += 1
        if n_new:
            src = self.rng.integers(0, self.n, n_new)
            dst = self.rng.integers(0, self.n - 1, n_new)
            dst += dst >= src
            self.cur = np.concatenate([self.cur, src])
            self.dst = np.concatenate([self.dst, dst])
            self.src = np.concatenate([self.src, src])
            self.born = np.concatenate([self.born, np.full(n_new, self.t, dtype=np.int64)])
            self.seq = np.concatenate(
                [self.seq, self._seq_counter + np.arange(n_new, dtype=np.int64)]
            )
            self.ids = np.concatenate(
                [self.ids, self._id_counter + np.arange(n_new, dtype=np.int64)]
            )
            self.recent = np.vstack(
                [self.recent, np.full((n_new, cfg.n_avoid), -1, dtype=np.int64)]
            )
            self._seq_counter += n_new
            self._id_counter += n_new

        self.generated_total += n_new
        self.delivered_total += delivered
        # Exact per-step conservation of packets.
        assert self.in_network == w0 - delivered + n_new
        self.t += 1
        return delivered, n_new


class _Recorder:
    """Measurement-window accumulators."""

    def __init__(self, n: int, track_heads: bool, batches: int, measure_steps: int):
        self.qlen = np.zeros(n, dtype=np.float64)
        self.delivery_sum = np.zeros(n, dtype=np.float64)
        self.delivery_cnt = np.zeros(n, dtype=np.int64)
        self.heads = np.zeros((n, n), dtype=np.int64) if track_heads else None
        self.batches = (
            np.zeros((batches, n, n), dtype=np.int64) if track_heads and batches else None
        )
        self._measure_steps = measure_steps
        self._batch_count = batches
        self.step_in_window = 0
        self.steps_recorded = 0

    def note_heads(self, vertices, destinations):
        np.add.at(self.heads, (vertices, destinations), 1)
        if self.batches is not None:
            b = self.step_in_window * self._batch_count // self._measure_steps
            np.add.at(self.batches[b], (vertices, destinations), 1)

    def note_delivery(self, destinations, times):
        np.add.at(self.delivery_sum, destinations, times)
        np.add.at(self.delivery_cnt, destinations, 1)


def run_simulation(config: SimConfig) -> SimResult:
    """Execute warmup then measurement steps and collect statistics.

    Deterministic for a fixed config and seed. If ``abort_above`` is set and
    the in-network count crosses it the run stops early with
    ``aborted=True`` and statistics over the portion observed so far.
    """
    sim = Simulator(config)
    n = config.graph.n
    track = config.track_head_occupancy
    if track is None:
        track = n <= 64
    total_steps = config.warmup_steps + config.measure_steps
    w_trace = np.empty(total_steps, dtype=np.int64)
    rec = _Recorder(n, track, config.head_batches, config.measure_steps)

    delivered_window = 0
    generated_window = 0
    aborted = False
    steps_done = 0
    for t in range(total_steps):
        measuring = t >= config.warmup_steps
        delivered, generated = sim.step(rec if measuring else None)
        w_trace[t] = sim.in_network
        steps_done = t + 1
        if measuring:
            rec.qlen += np.bincount(sim.cur, minlength=n)
            rec.step_in_window += 1
            delivered_window += delivered
            generated_window += generated
        if config.abort_above is not None and sim.in_network > config.abort_above:
            aborted = True
            break

    w_trace = w_trace[:steps_done]
    measured = max(rec.step_in_window, 0)
    window = (min(config.warmup_steps, steps_done), steps_done)

    if config.rate > 0 and window[1] - window[0] >= 10:
        eta = order_parameter(
            w_trace, config.service, config.rate, window=window
        )
    elif aborted and config.rate > 0:
        # Aborted before a usable window: the count blew past the cap.
        eta = 1.0
    else:
        eta = 0.0

    with np.errstate(invalid="ignore", divide="ignore"):
        per_dest_time = rec.delivery_sum / rec.delivery_cnt
    total_delivered = int(rec.delivery_cnt.sum())
    mean_delivery = (
        float(rec.delivery_sum.sum() / total_delivered) if total_delivered else float("nan")
    )

    return SimResult(
        w_trace=w_trace,
        window=window,
        eta=eta,
        delivered_count=delivered_window,
        generated_count=generated_window,
        mean_delivery_time=mean_delivery,
        per_destination_delivery_time=per_dest_time,
        per_destination_delivered=rec.delivery_cnt,
        mean_queue_lengths=rec.qlen / measured if measured else rec.qlen,
        head_occupancy=rec.heads / measured if (rec.heads is not None and measured) else rec.heads,
        head_occupancy_batches=rec.batches,
        delivered_total=sim.delivered_total,
        generated_total=sim.generated_total,
        steps_run=steps_done,
        aborted=aborted,
    )


def order_parameter(
    w_trace: np.ndarray,
    service: float,
    rate: float,
    window: Optional[tuple[int, int]] = None,
) -> float:
    """Congestion order parameter: C/R times the least-squares slope of W(t).

    Zero in free flow (W fluctuates around a constant), positive when the
    in-network count grows; clamped below at zero.
    """
    if rate <= 0:
        raise ValueError("order parameter needs a positive generation rate")
    w = np.asarray(w_trace, dtype=np.float64)
    if window is not None:
        w = w[window[0] : window[1]]
    if w.size < 10:
        raise DegenerateWindowError(f"window has {w.size} points, need at least 10")
    slope = np.polyfit(np.arange(w.size), w, 1)[0]
    return max(0.0, float(service * slope / rate))


@dataclass
class RcEstimate:
    """Bisection estimate of the congestion threshold, with the probe log."""

    value: float
    probes: list[tuple[float, float]] = field(default_factory=list)

    def __float__(self) -> float:
        return self.value


def estimate_rc(
    graph: Graph,
    routing: RoutingSpec,
    base_config: SimConfig,
    r_low: float,
    r_high: float,
    resolution: float,
    eta_threshold: float = 0.05,
) -> RcEstimate:
    """Locate the congestion transition by bisection on the generation rate.

    Each probe is an independent seeded run classified congested when its
    order parameter exceeds ``eta_threshold``. Requires a valid bracket:
    ``r_low`` free-flowing and ``r_high`` congested, else
    :class:`BadBracketError`. Returns the bracket midpoint once the width
    drops below ``resolution``.
    """
    if not (0 < r_low < r_high):
        raise ValueError("need 0 < r_low < r_high")
    if resolution <= 0:
        raise ValueError("resolution must be positive")

    probes: list[tuple[float, float]] = []
    probe_index = 0
    abort_floor = 0

    def probe(r: float) -> float:
        nonlocal probe_index, abort_floor
        # A run crossing the cap is unambiguously congested; the cap only
        # keeps supercritical probes from ballooning. Start from a generous
        # size-based guess and recalibrate off the first free-flow probe.
        cap = abort_floor if abort_floor else max(10_000, int(20 * r_high * graph.n))
        cfg = replace(
            base_config,
            graph=graph,
            routing=routing,
            rate=r,
            seed=base_config.seed + probe_index,
            track_head_occupancy=False,
            abort_above=cap,
        )
        probe_index += 1
        res = run_simulation(cfg)
        eta = 1.0 if res.aborted else res.eta
        probes.append((r, eta))
        if not abort_floor and eta <= eta_threshold and np.isfinite(res.mean_total_queue_length):
            abort_floor = max(
                5_000,
                int(200 * max(1.0, res.mean_total_queue_length) * (r_high / max(r, 1e-9))),
            )
        return eta

    eta_low = probe(r_low)
    eta_high = probe(r_high)
    if eta_low > eta_threshold:
        raise BadBracketError(
            f"lower endpoint R={r_low} already congested (eta={eta_low:.4f}, "
            f"threshold {eta_threshold})",
            eta_low,
            eta_high,
        )
    if eta_high <= eta_threshold:
        raise BadBracketError(
            f"upper endpoint R={r_high} still free-flowing (eta={eta_high:.4f}, "
            f"threshold {eta_threshold})",
            eta_low,
            eta_high,
        )

    lo, hi = r_low, r_high
    while hi - lo > resolution:
        mid = 0.5 * (lo + hi)
        if probe(mid) > eta_threshold:
            hi = mid
        else:
            lo = mid
    return RcEstimate(value=0.5 * (lo + hi), probes=probes)
