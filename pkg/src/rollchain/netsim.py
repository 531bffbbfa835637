"""Topology generation, link-removal attacks, and connectivity Monte Carlo.

Graph generators cover three deployment styles: uniform random graphs with an
exact edge count, linear roadside deployments (fixed sensors on a line plus
scattered extras, edges from the union of per-sensor radio cliques), and
hub-anchored segmented networks with shared boundary mobiles.

Every Monte Carlo trial draws its random stream from (master seed, cell key,
trial index) so estimates are independent of execution order and thread count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from itertools import combinations
from typing import Iterable, Sequence

import numpy as np

SeedLike = int | Sequence[int]


class TooManyEdges(ValueError):
    """Requested edge count exceeds n*(n-1)/2."""


class EnumerationTooLarge(ValueError):
    """Exact enumeration is only feasible for small graphs."""


class DegenerateArea(ValueError):
    """Deployment area has non-positive width or height."""


class TopologyError(ValueError):
    """Inconsistent topology generator configuration."""


def max_edge_count(n: int) -> int:
    return n * (n - 1) // 2


@lru_cache(maxsize=None)
def _pair_table(n: int) -> tuple[tuple[int, int], ...]:
    return tuple(combinations(range(n), 2))


@dataclass
class Graph:
    """Undirected simple graph on nodes 0..n-1.

    ``positions`` (meters) and ``kinds`` ("fixed"/"mobile") are carried by the
    geometric generators; ``endpoints`` marks the probe pair used by path
    statistics.
    """

    n: int
    edges: list[tuple[int, int]]
    positions: np.ndarray | None = None
    kinds: list[str] | None = None
    endpoints: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        norm = sorted({(u, v) if u < v else (v, u) for u, v in self.edges})
        for u, v in norm:
            if u == v:
                raise ValueError("self-loops are not allowed")
            if not (0 <= u < self.n and 0 <= v < self.n):
                raise ValueError(f"edge ({u}, {v}) references an unknown node")
        self.edges = norm

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    def adjacency(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(self.n)]
        for u, v in self.edges:
            adj[u].append(v)
            adj[v].append(u)
        return adj

    def adjacency_map(self) -> dict[int, list[int]]:
        return {i: sorted(nbrs) for i, nbrs in enumerate(self.adjacency())}


def _connected(n: int, edges: Iterable[tuple[int, int]], a: int, b: int) -> bool:
    parent = list(range(n))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for u, v in edges:
        ru, rv = find(u), find(v)
        if ru != rv:
            parent[ru] = rv
    return find(a) == find(b)


def has_path(graph: Graph, a: int, b: int) -> bool:
    if a == b:
        return True
    return _connected(graph.n, graph.edges, a, b)


def shortest_path_length(graph: Graph, a: int, b: int) -> int | float:
    """Minimum hop count from a to b; math.inf when unreachable."""
    if not (0 <= a < graph.n and 0 <= b < graph.n):
        raise ValueError("endpoint out of range")
    if a == b:
        return 0
    return _bfs_hops(graph.n, graph.adjacency(), a, b)


def _bfs_hops(n: int, adj: Sequence[Sequence[int]], a: int, b: int) -> int | float:
    if a == b:
        return 0
    dist = [-1] * n
    dist[a] = 0
    frontier = [a]
    while frontier:
        nxt = []
        for u in frontier:
            du = dist[u]
            for v in adj[u]:
                if dist[v] < 0:
                    if v == b:
                        return du + 1
                    dist[v] = du + 1
                    nxt.append(v)
        frontier = nxt
    return math.inf


def gen_random_graph(n: int, edge_count: int, rng: np.random.Generator) -> Graph:
    """Uniformly random graph with exactly ``edge_count`` distinct edges."""
    cap = max_edge_count(n)
    if not 0 <= edge_count <= cap:
        raise TooManyEdges(f"edge_count {edge_count} outside [0, {cap}] for n={n}")
    pairs = _pair_table(n)
    if edge_count == 0:
        return Graph(n, [])
    idx = np.sort(rng.choice(cap, size=edge_count, replace=False))
    return Graph(n, [pairs[i] for i in idx])


def gen_gnp_graph(n: int, p: float, rng: np.random.Generator) -> Graph:
    """Bernoulli-per-edge alternative: each possible edge present with
    probability ``p`` independently."""
    if not 0 <= p <= 1:
        raise ValueError("edge probability must be within [0, 1]")
    pairs = _pair_table(n)
    mask = rng.random(len(pairs)) < p
    return Graph(n, [pairs[i] for i in np.flatnonzero(mask)])


def gen_linear_deployment(
    line_node_count: int,
    spacing: float,
    radius: float,
    extra_density: float,
    area: tuple[float, float],
    rng: np.random.Generator,
) -> Graph:
    """Fixed sensors every ``spacing`` meters along a line, plus extras spread
    uniformly over ``area`` = (width, height) centered on the line.

    Each line sensor contributes the complete graph on every node inside its
    radio radius; the edge set is the union of those cliques. Endpoints are
    the first and last line sensors.
    """
    if line_node_count < 2:
        raise ValueError("need at least two line sensors")
    if spacing <= 0 or radius <= 0:
        raise ValueError("spacing and radius must be positive")
    width, height = area
    if width <= 0 or height <= 0:
        raise DegenerateArea(f"area {area} has a non-positive dimension")
    if extra_density < 0:
        raise ValueError("extra_density must be nonnegative")

    k = line_node_count
    line = np.column_stack((np.arange(k) * spacing, np.zeros(k)))
    extra_count = int(math.floor(extra_density * width * height + 0.5))
    if extra_count:
        extras = np.column_stack(
            (
                rng.uniform(0.0, width, extra_count),
                rng.uniform(-height / 2.0, height / 2.0, extra_count),
            )
        )
        positions = np.vstack((line, extras))
    else:
        positions = line

    edges: set[tuple[int, int]] = set()
    r2 = radius * radius
    for i in range(k):
        delta = positions - positions[i]
        members = np.flatnonzero((delta * delta).sum(axis=1) <= r2)
        edges.update(combinations(members.tolist(), 2))
    kinds = ["fixed"] * k + ["mobile"] * (len(positions) - k)
    return Graph(
        len(positions), sorted(edges), positions=positions, kinds=kinds,
        endpoints=(0, k - 1),
    )


@dataclass(frozen=True)
class SegmentedTopology:
    """Hub-anchored subnets with shared boundary mobiles.

    Hubs are stationary nodes 0..hub_count-1; mobiles are numbered after them.
    Adjacent segments share ``overlap_count`` mobiles, and those boundary
    nodes are the carriers of the previous segment's final block.
    """

    hub_ids: tuple[int, ...]
    membership: dict[int, tuple[int, ...]]
    mobiles_per_segment: int
    overlap_count: int

    @property
    def mobile_ids(self) -> tuple[int, ...]:
        seen: set[int] = set()
        for members in self.membership.values():
            seen.update(members)
        return tuple(sorted(seen))

    @property
    def boundary_ids(self) -> tuple[int, ...]:
        counts: dict[int, int] = {}
        for members in self.membership.values():
            for m in members:
                counts[m] = counts.get(m, 0) + 1
        return tuple(sorted(m for m, c in counts.items() if c >= 2))

    def segments(self) -> list[tuple[int, tuple[int, ...]]]:
        return [(hub, self.membership[hub]) for hub in self.hub_ids]

    def to_graph(self) -> Graph:
        node_count = len(self.hub_ids) + len(self.mobile_ids)
        edges: set[tuple[int, int]] = set()
        for hub, members in self.membership.items():
            group = (hub, *members)
            edges.update(
                (u, v) if u < v else (v, u) for u, v in combinations(group, 2)
            )
        kinds = ["fixed"] * len(self.hub_ids) + ["mobile"] * len(self.mobile_ids)
        return Graph(node_count, sorted(edges), kinds=kinds)

    def resample(self, rng: np.random.Generator) -> "SegmentedTopology":
        """New assignment of mobiles to segments with the same shape; models
        mobile churn between cycles."""
        return gen_segmented_topology(
            len(self.hub_ids), self.mobiles_per_segment, self.overlap_count, rng
        )


def gen_segmented_topology(
    hub_count: int,
    mobiles_per_segment: int,
    overlap_count: int,
    rng: np.random.Generator,
) -> SegmentedTopology:
    if hub_count < 1:
        raise TopologyError("need at least one hub")
    if mobiles_per_segment < 1:
        raise TopologyError("segments need at least one mobile")
    if not 0 <= overlap_count <= mobiles_per_segment:
        raise TopologyError("overlap_count must be within [0, mobiles_per_segment]")
    if hub_count >= 3 and mobiles_per_segment < 2 * overlap_count:
        raise TopologyError(
            "interior segments share overlap_count mobiles with both neighbors; "
            "need mobiles_per_segment >= 2 * overlap_count"
        )
    stride = mobiles_per_segment - overlap_count
    unique = hub_count * mobiles_per_segment - (hub_count - 1) * overlap_count
    pool = [int(hub_count + i) for i in rng.permutation(unique)]
    membership = {
        hub: tuple(pool[hub * stride : hub * stride + mobiles_per_segment])
        for hub in range(hub_count)
    }
    return SegmentedTopology(
        tuple(range(hub_count)), membership, mobiles_per_segment, overlap_count
    )


def _removal_count(fraction: float, edge_count: int) -> int:
    # Round half up: "a portion of the links" becomes an exact edge count.
    return int(math.floor(fraction * edge_count + 0.5))


def remove_links(graph: Graph, fraction: float, rng: np.random.Generator) -> Graph:
    """Remove exactly round(fraction * |edges|) edges, chosen uniformly."""
    if not 0 <= fraction <= 1:
        raise ValueError("fraction must be within [0, 1]")
    m = graph.edge_count
    k = _removal_count(fraction, m)
    doomed = set(rng.choice(m, size=k, replace=False).tolist()) if k else set()
    kept = [e for i, e in enumerate(graph.edges) if i not in doomed]
    return Graph(graph.n, kept, graph.positions, graph.kinds, graph.endpoints)


def remove_links_coupled(
    graph: Graph, fractions: Sequence[float], rng: np.random.Generator
) -> list[Graph]:
    """One graph per fraction, sharing a single random edge-removal order, so
    the removed sets are nested and path survival is exactly monotone."""
    for f in fractions:
        if not 0 <= f <= 1:
            raise ValueError("fraction must be within [0, 1]")
    m = graph.edge_count
    order = rng.permutation(m)
    rank = np.empty(m, dtype=np.int64)
    rank[order] = np.arange(m)
    out = []
    for f in fractions:
        k = _removal_count(f, m)
        kept = [e for i, e in enumerate(graph.edges) if rank[i] >= k]
        out.append(Graph(graph.n, kept, graph.positions, graph.kinds, graph.endpoints))
    return out


@dataclass(frozen=True)
class Estimate:
    p_hat: float
    stderr: float
    trials: int
    hits: int


def _seed_key(seed: SeedLike) -> tuple[int, ...]:
    if isinstance(seed, (int, np.integer)):
        return (int(seed),)
    return tuple(int(s) for s in seed)


def trial_rng(seed: SeedLike, *indices: int) -> np.random.Generator:
    """Deterministic per-trial stream from (master seed, trial identifiers)."""
    return np.random.default_rng(_seed_key(seed) + tuple(int(i) for i in indices))


def _binomial_estimate(hits: int, trials: int) -> Estimate:
    p = hits / trials
    return Estimate(p, math.sqrt(p * (1.0 - p) / trials), trials, hits)


def mc_path_probability(
    n: int,
    edge_count: int,
    trials: int,
    seed: SeedLike,
    model: str = "exact",
    threads: int = 1,
) -> Estimate:
    """Monte Carlo probability that nodes 0 and n-1 are connected in a random
    graph with the given edge count (or edge probability edge_count / max,
    under the "bernoulli" model)."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    cap = max_edge_count(n)
    if not 0 <= edge_count <= cap:
        raise TooManyEdges(f"edge_count {edge_count} outside [0, {cap}] for n={n}")
    if model not in ("exact", "bernoulli"):
        raise ValueError(f"unknown graph model {model!r}")
    p_edge = edge_count / cap if cap else 0.0

    def run_one(t: int) -> int:
        rng = trial_rng(seed, t)
        if model == "exact":
            g = gen_random_graph(n, edge_count, rng)
        else:
            g = gen_gnp_graph(n, p_edge, rng)
        return 1 if _connected(g.n, g.edges, 0, n - 1) else 0

    hits = sum(_map_trials(run_one, trials, threads))
    return _binomial_estimate(hits, trials)


def _map_trials(fn, trials: int, threads: int) -> list:
    if threads <= 1:
        return [fn(t) for t in range(trials)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(trials)))


def brute_force_path_probability(n: int, edge_count: int) -> Fraction:
    """Exact probability by enumerating every edge set of the given size."""
    if n > 7:
        raise EnumerationTooLarge("exact enumeration supported for n <= 7")
    cap = max_edge_count(n)
    if not 0 <= edge_count <= cap:
        raise TooManyEdges(f"edge_count {edge_count} outside [0, {cap}] for n={n}")
    pairs = _pair_table(n)
    total = math.comb(cap, edge_count)
    connected = sum(
        1 for subset in combinations(pairs, edge_count) if _connected(n, subset, 0, n - 1)
    )
    return Fraction(connected, total)


@dataclass(frozen=True)
class DeploymentSpec:
    line_node_count: int
    spacing: float
    radius: float
    area: tuple[float, float]


@dataclass(frozen=True)
class AttackCell:
    density: float
    fraction: float
    trials: int
    p_hat: float
    stderr: float
    mean_spl: float | None
    mean_stretch: float | None


@dataclass
class AttackSweepReport:
    deployment: DeploymentSpec
    densities: list[float]
    fractions: list[float]
    trials: int
    seed: SeedLike
    cells: list[AttackCell] = field(default_factory=list)

    def cells_for(self, density: float) -> list[AttackCell]:
        return [c for c in self.cells if c.density == density]

    def breakdown_fraction(self, density: float) -> float | None:
        """Smallest removal fraction at which the endpoint path probability
        drops below one half; None if it never does."""
        for cell in self.cells_for(density):
            if cell.p_hat < 0.5:
                return cell.fraction
        return None


def attack_sweep(
    deployment: DeploymentSpec,
    densities: Sequence[float],
    fractions: Sequence[float],
    trials: int,
    seed: SeedLike,
    threads: int = 1,
) -> AttackSweepReport:
    """Per (density, fraction): regenerate the deployment each trial, remove a
    coupled random fraction of links, and record endpoint path survival plus
    shortest-path statistics (hop stretch is relative to the intact graph)."""
    if not densities:
        raise TopologyError("need at least one density")
    fracs = list(fractions)
    if not fracs or any(not 0 <= f <= 1 for f in fracs) or fracs != sorted(fracs):
        raise TopologyError("fractions must be sorted ascending within [0, 1]")
    if trials < 1:
        raise TopologyError("trials must be >= 1")

    report = AttackSweepReport(
        DeploymentSpec(*deployment) if not isinstance(deployment, DeploymentSpec) else deployment,
        list(densities),
        fracs,
        trials,
        seed,
    )

    for d_idx, density in enumerate(densities):

        def run_one(t: int, _density=density, _d_idx=d_idx) -> list[tuple[int, float, float]]:
            rng = trial_rng(seed, _d_idx, t)
            g = gen_linear_deployment(
                report.deployment.line_node_count,
                report.deployment.spacing,
                report.deployment.radius,
                _density,
                report.deployment.area,
                rng,
            )
            a, b = g.endpoints
            adj = g.adjacency()
            base_spl = _bfs_hops(g.n, adj, a, b)
            m = g.edge_count
            order = rng.permutation(m)
            rank = np.empty(m, dtype=np.int64)
            rank[order] = np.arange(m)
            out = []
            for f in fracs:
                k = _removal_count(f, m)
                adj_f: list[list[int]] = [[] for _ in range(g.n)]
                for i, (u, v) in enumerate(g.edges):
                    if rank[i] >= k:
                        adj_f[u].append(v)
                        adj_f[v].append(u)
                spl = _bfs_hops(g.n, adj_f, a, b)
                hit = 1 if math.isfinite(spl) else 0
                stretch = (
                    spl / base_spl
                    if hit and math.isfinite(base_spl) and base_spl > 0
                    else math.nan
                )
                out.append((hit, spl if hit else math.nan, stretch))
            return out

        per_trial = _map_trials(run_one, trials, threads)
        for f_idx, f in enumerate(fracs):
            hits = sum(row[f_idx][0] for row in per_trial)
            spls = [row[f_idx][1] for row in per_trial if row[f_idx][0]]
            stretches = [
                row[f_idx][2] for row in per_trial if not math.isnan(row[f_idx][2])
            ]
            est = _binomial_estimate(hits, trials)
            report.cells.append(
                AttackCell(
                    density=density,
                    fraction=f,
                    trials=trials,
                    p_hat=est.p_hat,
                    stderr=est.stderr,
                    mean_spl=float(np.mean(spls)) if spls else None,
                    mean_stretch=float(np.mean(stretches)) if stretches else None,
                )
            )
    return report
