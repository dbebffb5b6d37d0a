"""Constructive heuristics used as comparison points.

All functions are deterministic; ties go to the lowest node or edge index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (
    MultigraphInstance,
    ProblemSpec,
    Route,
    SpecMismatch,
    Variant,
    cheapest_edge_index,
    cheapest_edge_matrix,
    evaluate_route,
)


class NoFeasibleRoute(RuntimeError):
    pass


def _require(spec: ProblemSpec, *variants: Variant) -> None:
    if spec.variant not in variants:
        raise SpecMismatch(f"heuristic supports {[v.value for v in variants]}, got {spec.variant.value}")


def nearest_neighbor(instance: MultigraphInstance, spec: ProblemSpec, pref) -> Route:
    """Greedy nearest-neighbour construction under a linear scalarization.

    For MOCVRP the vehicle returns to the depot whenever no unvisited
    customer fits into the remaining capacity.
    """
    _require(spec, Variant.MOTSP, Variant.MOCVRP)
    w = np.asarray(pref, dtype=np.float64)
    cost = cheapest_edge_matrix(instance, w)
    idx = cheapest_edge_index(instance, w)
    n, depot = instance.num_nodes, instance.depot
    visited = np.zeros(n, dtype=bool)
    visited[depot] = True
    nodes = [depot]
    cur = depot
    if spec.variant is Variant.MOTSP:
        for _ in range(n - 1):
            cur = int(np.argmin(np.where(visited, np.inf, cost[cur])))
            visited[cur] = True
            nodes.append(cur)
    else:
        demand = instance.node_attrs["demand"]
        remaining = spec.capacity
        while not visited.all():
            fits = ~visited & (demand <= remaining)
            if not fits.any():
                if cur == depot:
                    raise SpecMismatch("a customer demand exceeds vehicle capacity")
                cur, remaining = depot, spec.capacity
                nodes.append(depot)
                continue
            cur = int(np.argmin(np.where(fits, cost[cur], np.inf)))
            visited[cur] = True
            remaining -= demand[cur]
            nodes.append(cur)
    nodes.append(depot)
    edges = [int(idx[u, v]) for u, v in zip(nodes[:-1], nodes[1:])]
    return Route(nodes, edges)


# --- RCTSP beam search -------------------------------------------------------


@dataclass
class _Beam:
    nodes: list[int]
    edges: list[int]
    cost: float
    resource: float
    visited: int  # bitmask


def _beam_pass(instance, limit, lam, beam_width):
    n = instance.num_nodes
    counts, attrs = instance.counts, instance.attrs
    beams = [_Beam([0], [], 0.0, 0.0, 1)]
    bounded = math.isfinite(limit)
    for step in range(n):
        closing = step == n - 1
        cands = []
        for b in beams:
            u = b.nodes[-1]
            targets = [0] if closing else [v for v in range(n) if not b.visited >> v & 1]
            for v in targets:
                for e in range(counts[u, v]):
                    c, r = attrs[u, v, e, 0], attrs[u, v, e, 1]
                    cands.append((b.cost + c + lam * (b.resource + r), b, v, e, b.cost + c, b.resource + r))
        cands.sort(key=lambda x: x[0])
        feasible = [x for x in cands if x[5] <= limit]
        pool = feasible if feasible else cands
        kept: list[_Beam] = []
        fronts: dict[tuple[int, int], list[tuple[float, float]]] = {}
        for score, b, v, e, c, r in pool:
            key = (b.visited | (1 << v), v)
            front = fronts.setdefault(key, [])
            # an inactive limit makes resource irrelevant to dominance
            rk = r if bounded else 0.0
            if any(fc <= c and fr <= rk for fc, fr in front):
                continue
            front.append((c, rk))
            kept.append(_Beam(b.nodes + [v], b.edges + [e], c, r, b.visited | (1 << v)))
            if len(kept) >= beam_width:
                break
        beams = kept
    return beams


def _repair(instance, route: Route, limit: float) -> Route:
    """Swap parallel edges for lower-resource ones, cheapest extra cost per unit saved first."""
    edges = list(route.edges)
    pairs = list(zip(route.nodes[:-1], route.nodes[1:]))
    usage = sum(instance.attrs[u, v, e, 1] for (u, v), e in zip(pairs, edges))
    while usage > limit:
        best = None
        for t, ((u, v), e) in enumerate(zip(pairs, edges)):
            cur = instance.attrs[u, v, e]
            for alt in range(instance.counts[u, v]):
                a = instance.attrs[u, v, alt]
                saved = cur[1] - a[1]
                if saved <= 0:
                    continue
                ratio = (a[0] - cur[0]) / saved
                if best is None or ratio < best[0]:
                    best = (ratio, t, alt, saved)
        if best is None:
            break
        _, t, alt, saved = best
        edges[t] = alt
        usage -= saved
    return Route(route.nodes, edges)


def beam_search_rctsp(
    instance: MultigraphInstance,
    spec: ProblemSpec,
    beam_width: int = 50,
    outer_iters: int = 5,
    lam: float = 1.0,
    strict: bool = False,
) -> Route:
    """Lagrangian beam search for the resource-constrained TSP.

    Each outer iteration builds tours scored by ``cost + lam * resource``,
    repairs the best completed tour, and doubles ``lam`` if it is still
    infeasible, otherwise halves it. The cheapest feasible tour seen wins;
    with none, the least-violating tour is returned (``strict`` raises).
    """
    _require(spec, Variant.RCTSP)
    limit = spec.resource_limit
    if limit == float("inf"):
        lam = 0.0
    best_feasible = None
    best_any = None
    for _ in range(outer_iters):
        beams = _beam_pass(instance, limit, lam, beam_width)
        done = [_repair(instance, Route(b.nodes, b.edges), limit) for b in beams]
        evals = [evaluate_route(instance, spec, r) for r in done]
        order = sorted(range(len(done)), key=lambda i: (evals[i].violation, evals[i].objectives[0]))
        top = order[0]
        r, ev = done[top], evals[top]
        if ev.feasible:
            if best_feasible is None or ev.objectives[0] < best_feasible[1]:
                best_feasible = (r, ev.objectives[0])
            lam = lam / 2.0
        else:
            if best_any is None or ev.violation < best_any[1]:
                best_any = (r, ev.violation)
            lam = lam * 2.0 if lam > 0 else 1.0
    if best_feasible is not None:
        return best_feasible[0]
    if strict:
        raise NoFeasibleRoute("no tour within the resource limit was found")
    return best_any[0]


# --- orienteering --------------------------------------------------------------


def _scarcity(cost_vec, used, limits):
    """Edge cost expressed as the fraction of each remaining budget it consumes."""
    out = 0.0
    for c, u, t in zip(cost_vec, used, limits):
        if math.isinf(t):
            continue
        rem = t - u
        out += c / rem if rem > 0 else math.inf
    return out


def greedy_op(instance: MultigraphInstance, spec: ProblemSpec) -> Route:
    """Prize-per-scarcity greedy path that always keeps a direct way home."""
    _require(spec, Variant.OP)
    limits = spec.thresholds
    prize = instance.node_attrs["prize"]
    n, depot = instance.num_nodes, instance.depot
    counts, attrs = instance.counts, instance.attrs
    used = np.zeros(2)
    cur = depot
    visited = np.zeros(n, dtype=bool)
    visited[depot] = True
    nodes, edges = [depot], []

    def fits(total):
        return total[0] <= limits[0] and total[1] <= limits[1]

    while True:
        best = None
        for v in range(n):
            if visited[v]:
                continue
            for e in range(counts[cur, v]):
                after = used + attrs[cur, v, e]
                if not any(fits(after + attrs[v, depot, r]) for r in range(counts[v, depot])):
                    continue
                w = _scarcity(attrs[cur, v, e], used, limits)
                ratio = prize[v] / w if w > 0 else math.inf
                if best is None or (ratio, prize[v]) > best[0]:
                    best = ((ratio, prize[v]), v, e)
        if best is None:
            break
        _, v, e = best
        used = used + attrs[cur, v, e]
        visited[v] = True
        nodes.append(v)
        edges.append(e)
        cur = v
    if cur == depot:
        return Route([depot, depot], [0])
    ret = [r for r in range(counts[cur, depot]) if fits(used + attrs[cur, depot, r])]
    e = min(ret, key=lambda r: (_scarcity(attrs[cur, depot, r], used, limits), r))
    nodes.append(depot)
    edges.append(e)
    return Route(nodes, edges)


def greedy_moop(instance: MultigraphInstance, spec: ProblemSpec, pref) -> Route:
    """Greedy MOOP path for one preference ``(prize weight, cost weight)``.

    The next move maximizes ``w_prize * prize / (w_cost * cost)``; a move is
    only taken if a direct return edge keeps the resource within the limit.
    Among the parallel edges to a node the one with the lowest
    ``w_cost * cost + w_prize * resource`` is used.
    """
    _require(spec, Variant.MOOP)
    w_prize, w_cost = (float(x) for x in np.asarray(pref))
    limit = spec.resource_limit
    prize = instance.node_attrs["prize"]
    n, depot = instance.num_nodes, instance.depot
    counts, attrs = instance.counts, instance.attrs
    used = 0.0
    cur = depot
    visited = np.zeros(n, dtype=bool)
    visited[depot] = True
    nodes, edges = [depot], []
    min_return = np.where(instance.edge_mask[:, depot], attrs[:, depot, :, 1], np.inf).min(axis=1)
    while True:
        best = None
        for v in range(n):
            if visited[v]:
                continue
            options = [
                e for e in range(counts[cur, v]) if used + attrs[cur, v, e, 1] + min_return[v] <= limit
            ]
            if not options:
                continue
            e = min(options, key=lambda k: (w_cost * attrs[cur, v, k, 0] + w_prize * attrs[cur, v, k, 1], k))
            gain = w_prize * prize[v]
            if gain <= 0:
                continue
            denom = w_cost * attrs[cur, v, e, 0]
            ratio = gain / denom if denom > 0 else math.inf
            if best is None or (ratio, prize[v]) > best[0]:
                best = ((ratio, prize[v]), v, e)
        if best is None:
            break
        _, v, e = best
        used += attrs[cur, v, e, 1]
        visited[v] = True
        nodes.append(v)
        edges.append(e)
        cur = v
    if cur == depot:
        return Route([depot, depot], [0])
    ret = [r for r in range(counts[cur, depot]) if used + attrs[cur, depot, r, 1] <= limit]
    e = min(ret, key=lambda r: (w_cost * attrs[cur, depot, r, 0] + w_prize * attrs[cur, depot, r, 1], r))
    nodes.append(depot)
    edges.append(e)
    return Route(nodes, edges)


# --- MOTSPTW insertion -------------------------------------------------------


def _late_count(arrival: np.ndarray, close: np.ndarray) -> int:
    return int(np.sum(arrival > close))


def insertion_motsptw(instance: MultigraphInstance, spec: ProblemSpec, pref) -> Route:
    """Cheapest insertion on ``w_viol * late windows + w_dist * distance``.

    Every (node, position, in-edge, out-edge) option is scored exactly,
    shifting downstream arrival times.
    """
    _require(spec, Variant.MOTSPTW)
    w_viol, w_dist = (float(x) for x in np.asarray(pref))
    n, depot = instance.num_nodes, instance.depot
    close = instance.node_attrs["tw_close"].copy()
    close[depot] = np.inf
    counts, attrs = instance.counts, instance.attrs
    nodes = [depot, depot]
    edges: list[int] = []  # edge per arc; the depot-depot placeholder has none
    remaining = [v for v in range(n) if v != depot]
    while remaining:
        # arrival[t] at position t of the current tour
        if edges:
            times = np.array([attrs[u, v, e, 1] for (u, v), e in zip(zip(nodes[:-1], nodes[1:]), edges)])
            dists = np.array([attrs[u, v, e, 0] for (u, v), e in zip(zip(nodes[:-1], nodes[1:]), edges)])
        else:
            times = np.zeros(1)
            dists = np.zeros(1)
        arrival = np.concatenate([[0.0], np.cumsum(times)])
        tour_close = close[np.asarray(nodes)]
        best = None
        for p in range(len(nodes) - 1):
            a, b = nodes[p], nodes[p + 1]
            old_t, old_d = times[p], dists[p]
            down_slack = tour_close[p + 1 :] - arrival[p + 1 :]
            late_before = np.sum(down_slack < 0)
            for v in remaining:
                ta = attrs[a, v, : counts[a, v], 1]
                da = attrs[a, v, : counts[a, v], 0]
                tb = attrs[v, b, : counts[v, b], 1]
                db = attrs[v, b, : counts[v, b], 0]
                arr_v = arrival[p] + ta
                late_v = (arr_v > close[v]).astype(float)
                shift = ta[:, None] + tb[None, :] - old_t
                late_down = np.sum(down_slack[None, None, :] < shift[..., None], axis=-1) - late_before
                score = (
                    w_viol * (late_v[:, None] + late_down)
                    + w_dist * (da[:, None] + db[None, :] - old_d)
                )
                i, j = np.unravel_index(int(np.argmin(score)), score.shape)
                s = score[i, j]
                if best is None or s < best[0]:
                    best = (s, p, v, int(i), int(j))
        _, p, v, i, j = best
        nodes.insert(p + 1, v)
        if edges:
            edges[p : p + 1] = [i, j]
        else:
            edges = [i, j]
        remaining.remove(v)
    return Route(nodes, edges)
