"""Seeded multigraph generators and per-configuration constraint calibration.

Every instance draws from its own Philox stream keyed by ``(seed, index)``,
so instance ``i`` of a batch is the same whether it is produced alone or in
a worker pool.
"""

from __future__ import annotations

import enum
import functools
import heapq
import math
import re
from dataclasses import dataclass, replace

import numpy as np

from .core import MultigraphInstance, ProblemSpec, Variant, cheapest_edge_index, evaluate_route, Route


class CalibrationUnstable(RuntimeError):
    pass


class Distribution(str, enum.Enum):
    FLEX = "flex"
    FIX = "fix"
    REALISTIC = "realistic"


CORRELATION = {"SC": (0.9, 0.1), "WC": (0.5, 0.5), "NC": (0.1, 0.9)}

CVRP_CAPACITY = 50.0
CVRP_MAX_DEMAND = 9


@dataclass(frozen=True)
class GenConfig:
    distribution: Distribution
    n: int
    variant: Variant
    x: int = 2
    correlation: str = "NC"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "distribution", Distribution(self.distribution))
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.n < 3:
            raise ValueError("n must be at least 3")
        if self.x < 1:
            raise ValueError("x must be at least 1")
        if self.correlation not in CORRELATION:
            raise ValueError(f"correlation must be one of {sorted(CORRELATION)}")

    @property
    def tag(self) -> str:
        if self.distribution is Distribution.REALISTIC:
            return f"realistic-{self.correlation.lower()}"
        return f"{self.distribution.value}{self.x}"

    @classmethod
    def parse(cls, dist: str, n: int, variant: str | Variant, seed: int = 0) -> "GenConfig":
        """Build from a short tag such as ``flex2``, ``fix5`` or ``realistic-nc``."""
        dist = dist.lower()
        m = re.fullmatch(r"(flex|fix)(\d+)", dist)
        if m:
            return cls(Distribution(m.group(1)), n, Variant(variant), x=int(m.group(2)), seed=seed)
        m = re.fullmatch(r"realistic-?(sc|wc|nc)", dist)
        if m:
            return cls(Distribution.REALISTIC, n, Variant(variant), correlation=m.group(1).upper(), seed=seed)
        raise ValueError(f"unknown distribution tag {dist!r}")


def rng_for(seed: int, *key: int) -> np.random.Generator:
    """Counter-based stream for the given key path."""
    ss = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, *key])
    return np.random.Generator(np.random.Philox(ss))


# --- edge-set distributions -------------------------------------------------


def gen_flex(config: GenConfig, index: int = 0, attr_dim: int = 2) -> MultigraphInstance:
    """Edge count per ordered pair uniform on 1..x; attributes i.i.d. U[0, 1]."""
    n, x = config.n, config.x
    rng = rng_for(config.seed, 0, index)
    counts = rng.integers(1, x + 1, size=(n, n))
    attrs = rng.random((n, n, x, attr_dim))
    np.fill_diagonal(counts, 0)
    return MultigraphInstance(attrs, counts)


def gen_fix(config: GenConfig, index: int = 0) -> MultigraphInstance:
    """Exactly x edges per pair; second attribute mirrors the first with U[-0.1, 0.1] noise."""
    n, x = config.n, config.x
    rng = rng_for(config.seed, 1, index)
    a1 = rng.random((n, n, x))
    noise = rng.uniform(-0.1, 0.1, size=(n, n, x))
    a2 = np.clip(1.0 - a1 + noise, 0.0, 1.0)
    counts = np.full((n, n), x)
    np.fill_diagonal(counts, 0)
    return MultigraphInstance(np.stack([a1, a2], axis=-1), counts)


def second_distance(d1, gamma, d1_max, nu, mu):
    """Correlated second distance ``nu * d1 + mu * gamma * max(d1)``."""
    return nu * d1 + mu * gamma * d1_max


def pareto_paths_from(source: int, w: np.ndarray) -> list[list[tuple[float, float]]]:
    """Bi-objective label setting from ``source`` over a complete simple graph.

    ``w`` has shape ``(N, N, 2)``. Returns, per target, the Pareto set of
    path cost vectors sorted by the first objective.
    """
    n = w.shape[0]
    fronts: list[list[tuple[float, float]]] = [[] for _ in range(n)]
    heap = [(0.0, 0.0, source)]
    while heap:
        c1, c2, u = heapq.heappop(heap)
        front = fronts[u]
        # labels pop in lexicographic order, so only the last c2 matters
        if front and front[-1][1] <= c2:
            continue
        front.append((c1, c2))
        for v in range(n):
            if v == u or v == source:
                continue
            n1 = c1 + w[u, v, 0]
            n2 = c2 + w[u, v, 1]
            fv = fronts[v]
            if fv and fv[-1][1] <= n2:
                continue
            heapq.heappush(heap, (n1, n2, v))
    fronts[source] = []
    return fronts


def gen_realistic(config: GenConfig, index: int = 0) -> MultigraphInstance:
    """Euclidean points turned into a multigraph of Pareto-optimal paths."""
    n = config.n
    nu, mu = CORRELATION[config.correlation]
    rng = rng_for(config.seed, 2, index)
    pts = rng.random((n, 2))
    gamma = rng.random((n, n))
    d1 = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
    d2 = second_distance(d1, gamma, d1.max(), nu, mu)
    np.fill_diagonal(d2, 0.0)
    w = np.stack([d1, d2], axis=-1)
    fronts = [pareto_paths_from(s, w) for s in range(n)]
    m = max(len(fronts[u][v]) for u in range(n) for v in range(n) if u != v)
    attrs = np.zeros((n, n, m, 2))
    counts = np.zeros((n, n), dtype=np.int64)
    for u in range(n):
        for v in range(n):
            if u != v:
                f = fronts[u][v]
                attrs[u, v, : len(f)] = f
                counts[u, v] = len(f)
    return MultigraphInstance(attrs, counts)


# --- variant-level decoration ---------------------------------------------


def gen_time_windows(instance: MultigraphInstance, seed: int, index: int = 0, width: float = 0.15) -> dict[str, np.ndarray]:
    """Windows centred on the arrival times of a random reference tour.

    The reference tour takes the fastest parallel edge per hop; each
    customer gets ``[max(0, a - w), a + w]`` with ``w = width * duration``.
    The depot window is ``[0, inf)``.
    """
    n, depot = instance.num_nodes, instance.depot
    rng = rng_for(seed, 3, index)
    customers = np.array([x for x in range(n) if x != depot])
    order = [depot, *rng.permutation(customers).tolist(), depot]
    fastest = np.where(instance.edge_mask, instance.attrs[..., 1], np.inf).min(axis=2)
    arrival = np.zeros(n)
    clock = 0.0
    for u, v in zip(order[:-1], order[1:]):
        clock += fastest[u, v]
        if v != depot:
            arrival[v] = clock
    w = width * clock
    tw_open = np.maximum(0.0, arrival - w)
    tw_close = arrival + w
    tw_open[depot] = 0.0
    tw_close[depot] = np.inf
    return {"tw_open": tw_open, "tw_close": tw_close}


def _base_graph(config: GenConfig, index: int) -> MultigraphInstance:
    if config.distribution is Distribution.FLEX:
        return gen_flex(config, index)
    if config.distribution is Distribution.FIX:
        return gen_fix(config, index)
    return gen_realistic(config, index)


def decorate(instance: MultigraphInstance, config: GenConfig, index: int) -> MultigraphInstance:
    """Attach the node attributes the variant needs."""
    v = config.variant
    rng = rng_for(config.seed, 4, index)
    depot = instance.depot
    if v in (Variant.OP, Variant.MOOP):
        prize = rng.random(instance.num_nodes)
        prize[depot] = 0.0
        return instance.with_node_attrs(prize=prize)
    if v is Variant.MOCVRP:
        demand = rng.integers(1, CVRP_MAX_DEMAND + 1, size=instance.num_nodes).astype(float)
        demand[depot] = 0.0
        return instance.with_node_attrs(demand=demand)
    if v is Variant.MOTSPTW:
        return instance.with_node_attrs(**gen_time_windows(instance, config.seed, index))
    return instance


def generate(config: GenConfig, index: int = 0) -> MultigraphInstance:
    return decorate(_base_graph(config, index), config, index)


def generate_many(config: GenConfig, count: int, start: int = 0) -> list[MultigraphInstance]:
    return [generate(config, i) for i in range(start, start + count)]


# --- calibration -------------------------------------------------------------


def nn_tour_single(instance: MultigraphInstance, attr: int) -> Route:
    """Nearest-neighbour tour from the depot under one attribute with cheapest edges."""
    w = np.zeros(instance.attr_dim)
    w[attr] = 1.0
    idx = cheapest_edge_index(instance, w)
    cost = np.where(instance.edge_mask, instance.attrs[..., attr], np.inf).min(axis=2)
    n, cur = instance.num_nodes, instance.depot
    visited = np.zeros(n, dtype=bool)
    visited[cur] = True
    nodes = [cur]
    for _ in range(n - 1):
        row = np.where(visited, np.inf, cost[cur])
        nxt = int(np.argmin(row))
        visited[nxt] = True
        nodes.append(nxt)
        cur = nxt
    nodes.append(instance.depot)
    edges = [int(idx[u, v]) for u, v in zip(nodes[:-1], nodes[1:])]
    return Route(nodes, edges)


def _cost_matrix(instance, attr_tour: int):
    r = nn_tour_single(instance, attr_tour)
    u = np.asarray(r.nodes[:-1])
    v = np.asarray(r.nodes[1:])
    arcs = instance.attrs[u, v, np.asarray(r.edges)]
    return arcs.sum(axis=0)


def estimate_tour_costs(config: GenConfig, samples: int, seed: int) -> np.ndarray:
    """``out[j, i]``: mean attribute-``i`` total of a tour built greedily on attribute ``j``."""
    cfg = replace(config, variant=Variant.MOTSP, seed=seed)
    acc = np.zeros((2, 2))
    for k in range(samples):
        inst = _base_graph(cfg, k)
        for j in range(2):
            acc[j] += _cost_matrix(inst, j)
    return acc / samples


def resource_limit_from(r_cost: float, r_resource: float) -> float:
    return (r_cost + r_resource) / 4.0


def op_threshold_from(c12: float, c22: float) -> float:
    return (c12 + c22) / 8.0


HV_REFERENCE = {
    # (variant, distribution) at N = 100; scaled linearly with N elsewhere
    (Variant.MOTSP, Distribution.FLEX): (60.0, 60.0),
    (Variant.MOTSP, Distribution.FIX): (100.0, 100.0),
    (Variant.MOCVRP, Distribution.FLEX): (60.0, 60.0),
    (Variant.MOCVRP, Distribution.FIX): (100.0, 100.0),
    (Variant.MOTSPTW, Distribution.FLEX): (105.0, 60.0),
    (Variant.MOTSPTW, Distribution.FIX): (105.0, 100.0),
    (Variant.MOOP, Distribution.FLEX): (50.0, 25.0),
    (Variant.MOOP, Distribution.FIX): (50.0, 30.0),
}


def hv_reference(variant: Variant, distribution: Distribution, n: int) -> tuple[float, float] | None:
    if not variant.multi_objective:
        return None
    dist = Distribution.FLEX if distribution is Distribution.REALISTIC else distribution
    ref = HV_REFERENCE[(variant, dist)]
    if variant is Variant.MOTSPTW:
        # first axis counts violated windows, bounded by n
        return (1.05 * n, ref[1] * n / 100.0)
    return tuple(r * n / 100.0 for r in ref)


CALIBRATION_SEED = 0x5EED


@functools.lru_cache(maxsize=None)
def _calibrated_costs(distribution: Distribution, x: int, correlation: str, n: int, samples: int) -> tuple:
    cfg = GenConfig(distribution, n, Variant.MOTSP, x=x, correlation=correlation)
    half = max(1, samples // 2)
    a = estimate_tour_costs(cfg, half, CALIBRATION_SEED)
    b = estimate_tour_costs(cfg, samples - half if samples > 1 else 1, CALIBRATION_SEED + 1)
    rel = np.abs(a - b) / np.maximum(np.abs(a + b) / 2, 1e-12)
    if samples > 1 and np.max(rel) > 0.10:
        raise CalibrationUnstable(f"half-sample estimates differ by {np.max(rel):.1%}")
    full = (a * half + b * (samples - half)) / samples if samples > 1 else a
    return tuple(map(tuple, full))


def calibrate_thresholds(config: GenConfig, samples: int = 500) -> ProblemSpec:
    """Problem spec with constraint levels estimated from fresh instances.

    Results are cached per (distribution, x, correlation, n, samples).
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    v = config.variant
    ref = hv_reference(v, config.distribution, config.n)
    if v is Variant.MOCVRP:
        return ProblemSpec(v, capacity=CVRP_CAPACITY, hv_reference=ref)
    if v in (Variant.MOTSP, Variant.MOTSPTW):
        return ProblemSpec(v, hv_reference=ref)
    c = np.array(
        _calibrated_costs(config.distribution, config.x, config.correlation, config.n, samples)
    )
    if v in (Variant.RCTSP, Variant.MOOP):
        # attribute 0 is cost, attribute 1 is resource
        limit = resource_limit_from(c[0, 1], c[1, 1])
        return ProblemSpec(v, resource_limit=float(limit), hv_reference=ref)
    t = op_threshold_from(c[0, 1], c[1, 1])
    return ProblemSpec(v, thresholds=(float(t), float(t)))


def cost_estimates(config: GenConfig, samples: int = 500) -> np.ndarray:
    """The calibration matrix ``C[j, i]`` used by :func:`calibrate_thresholds`."""
    return np.array(_calibrated_costs(config.distribution, config.x, config.correlation, config.n, samples))
