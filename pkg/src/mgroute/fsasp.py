"""Fixed-sequence arc selection: exact label DP, greedy selection, gap study.

Labels are partial sums of edge attributes accumulated left to right along
the fixed node sequence, in exactly the order :func:`core.evaluate_route`
uses, so terminal objective values of the DP and of the evaluator agree
bit for bit.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .core import MultigraphInstance, ProblemSpec, Route, Variant, evaluate_route, validate_route
from .pareto import Preference, ParetoArchive, chebyshev_cost, hypervolume_2d, linear_cost, pareto_insert

LABEL_CAP = 10_000


class Infeasible(RuntimeError):
    """No edge selection satisfies the hard constraints of the variant."""


@dataclass
class DPResult:
    edges: tuple[int, ...]
    cost: float
    objectives: np.ndarray
    approximate: bool = False
    max_labels: int = 0

    def __iter__(self):
        # unpacks as (edges, cost)
        return iter((self.edges, self.cost))


def _pref_array(spec: ProblemSpec, pref) -> np.ndarray:
    if pref is None:
        return np.full(spec.objective_dim, 1.0 / spec.objective_dim)
    return np.asarray(pref, dtype=np.float64)


def _scalarize(spec: ProblemSpec, objectives: np.ndarray, pref, ideal) -> np.ndarray:
    """Route cost the DP minimizes: the objective itself or its Chebyshev scalarization."""
    if spec.objective_dim == 1:
        return objectives[..., 0]
    z = np.zeros(spec.objective_dim) if ideal is None else np.asarray(ideal, dtype=np.float64)
    return chebyshev_cost(objectives, _pref_array(spec, pref), z)


def _prize_not_collected(instance, nodes) -> float:
    prize = instance.node_attrs["prize"]
    collected = 0.0
    for x in nodes:
        if x != instance.depot:
            collected += prize[x]
    total = float(np.sum(np.delete(prize, instance.depot)))
    return total - collected, total


def _terminal_objectives(instance, spec, nodes, labels):
    """Objective vectors and feasibility for terminal labels (mirrors the evaluator)."""
    v = spec.variant
    if v in (Variant.MOTSP, Variant.MOCVRP):
        return labels[:, :2].copy(), np.ones(len(labels), dtype=bool)
    if v is Variant.RCTSP:
        return labels[:, :1].copy(), labels[:, 1] <= spec.resource_limit
    if v is Variant.OP:
        miss, _ = _prize_not_collected(instance, nodes)
        t1, t2 = spec.thresholds
        ok = (labels[:, 0] <= t1) & (labels[:, 1] <= t2)
        return np.full((len(labels), 1), miss), ok
    if v is Variant.MOOP:
        miss, total = _prize_not_collected(instance, nodes)
        ok = labels[:, 1] <= spec.resource_limit
        first = np.where(ok, miss, total)
        return np.stack([first, labels[:, 0]], axis=1), ok
    if v is Variant.MOTSPTW:
        # label = (late windows, distance, clock)
        return labels[:, :2].copy(), np.ones(len(labels), dtype=bool)
    raise ValueError(v)


def _prune(labels: np.ndarray) -> np.ndarray:
    """Indices of the non-dominated labels; exact duplicates keep their first copy."""
    L, D = labels.shape
    # stable lexicographic order: duplicates keep their earliest copy first
    order = np.lexsort(tuple(labels[:, k] for k in reversed(range(D))))
    if D == 2:
        keep = []
        best = np.inf
        for i in order:
            if labels[i, 1] < best:
                keep.append(i)
                best = labels[i, 1]
        return np.array(keep, dtype=np.int64)
    keep = []
    kept_vals = np.empty((0, D))
    for i in order:
        lab = labels[i]
        if len(kept_vals) and np.any(np.all(kept_vals <= lab, axis=1)):
            continue
        keep.append(i)
        kept_vals = np.vstack([kept_vals, lab])
    return np.array(keep, dtype=np.int64)


def fsasp_dp(
    instance: MultigraphInstance,
    spec: ProblemSpec,
    pi,
    pref=None,
    ideal=None,
    prune: bool = True,
    label_cap: int = LABEL_CAP,
) -> DPResult:
    """Optimal edge selection for a fixed node sequence by forward label DP.

    Labels carry the partial attribute sums (plus late-window count and
    clock for MOTSPTW). Resource-exceeding labels are dropped early since
    resources never decrease; dominated labels are pruned at every step.
    With more than ``label_cap`` survivors the best ``label_cap`` by partial
    scalarized cost are kept and the result is flagged approximate.
    """
    nodes = tuple(int(x) for x in pi)
    # index 0 exists for every pair, so this checks the node sequence only
    validate_route(instance, spec, Route(nodes, [0] * (len(nodes) - 1)))
    v = spec.variant
    if v.orienteering and nodes == (instance.depot, instance.depot):
        res = evaluate_route(instance, spec, Route(nodes, [0]))
        return DPResult((0,), float(_scalarize(spec, res.objectives[None], pref, ideal)[0]), res.objectives, False, 1)

    tw = v is Variant.MOTSPTW
    if tw:
        close = instance.node_attrs["tw_close"]
    D = 3 if tw else instance.attr_dim
    labels = np.zeros((1, D))
    parents: list[np.ndarray] = []
    choices: list[np.ndarray] = []
    approximate = False
    max_labels = 1
    limit_col, limit_val = _hard_limits(spec)
    for t in range(len(nodes) - 1):
        a, b = nodes[t], nodes[t + 1]
        m = int(instance.counts[a, b])
        arcs = instance.attrs[a, b, :m]
        par = np.repeat(np.arange(len(labels)), m)
        ch = np.tile(np.arange(m), len(labels))
        if tw:
            clock = labels[par, 2] + arcs[ch, 1]
            late = (clock > close[b]) if b != instance.depot else np.zeros(len(par), dtype=bool)
            new = np.stack([labels[par, 0] + late, labels[par, 1] + arcs[ch, 0], clock], axis=1)
        else:
            new = labels[par] + arcs[ch]
        if limit_col is not None:
            ok = np.all(new[:, limit_col] <= limit_val, axis=1)
            new, par, ch = new[ok], par[ok], ch[ok]
            if len(new) == 0:
                raise Infeasible(f"every selection breaks the limits by position {t + 1}")
        if prune:
            keep = _prune(new)
            new, par, ch = new[keep], par[keep], ch[keep]
        if len(new) > label_cap:
            partial = _partial_score(spec, new, pref)
            keep = np.sort(np.argsort(partial, kind="stable")[:label_cap])
            new, par, ch = new[keep], par[keep], ch[keep]
            approximate = True
        labels = new
        parents.append(par)
        choices.append(ch)
        max_labels = max(max_labels, len(labels))

    objs, feasible = _terminal_objectives(instance, spec, nodes, labels)
    if not feasible.any():
        raise Infeasible("no terminal label satisfies the constraints")
    scores = np.where(feasible, _scalarize(spec, objs, pref, ideal), np.inf)
    if v is Variant.OP:
        # objective fixed by the node sequence; prefer the lightest selection
        scores = np.where(feasible, labels[:, 0] + labels[:, 1], np.inf)
    best = int(np.argmin(scores))
    edges = []
    idx = best
    for par, ch in zip(reversed(parents), reversed(choices)):
        edges.append(int(ch[idx]))
        idx = int(par[idx])
    edges.reverse()
    cost = float(_scalarize(spec, objs[best : best + 1], pref, ideal)[0])
    return DPResult(tuple(edges), cost, objs[best], approximate, max_labels)


def _hard_limits(spec: ProblemSpec):
    v = spec.variant
    if v in (Variant.RCTSP, Variant.MOOP):
        return [1], np.array([spec.resource_limit])
    if v is Variant.OP:
        return [0, 1], np.array(spec.thresholds)
    return None, None


def _partial_score(spec, labels, pref):
    v = spec.variant
    if v is Variant.MOTSPTW:
        return chebyshev_cost(labels[:, :2], _pref_array(spec, pref))
    if v in (Variant.MOTSP, Variant.MOCVRP):
        return chebyshev_cost(labels, _pref_array(spec, pref))
    return labels[:, 0]


def fsasp_enumerate(instance, spec, pi, pref=None, ideal=None):
    """Brute force over every edge combination; returns ``(edges, cost)`` or raises Infeasible."""
    nodes = tuple(int(x) for x in pi)
    ranges = [range(int(instance.counts[a, b])) for a, b in zip(nodes[:-1], nodes[1:])]
    best = None
    for combo in itertools.product(*ranges):
        ev = evaluate_route(instance, spec, Route(nodes, combo))
        if not ev.feasible:
            continue
        if spec.variant is Variant.OP:
            key = ev.resource_usage[0] + ev.resource_usage[1]
        else:
            key = float(_scalarize(spec, ev.objectives[None], pref, ideal)[0])
        if best is None or key < best[0]:
            cost = float(_scalarize(spec, ev.objectives[None], pref, ideal)[0])
            best = (key, combo, cost)
    if best is None:
        raise Infeasible("no feasible combination")
    return best[1], best[2]


def fsasp_greedy_linear(instance: MultigraphInstance, spec: ProblemSpec, pi, pref=None) -> tuple[int, ...]:
    """Per position, the parallel edge with the lowest ``pref . e``."""
    nodes = [int(x) for x in pi]
    w = np.zeros(instance.attr_dim)
    p = np.asarray(pref if pref is not None else [1.0], dtype=np.float64)
    w[: len(p)] = p
    if instance.depot == nodes[0] == nodes[-1] and len(nodes) == 2:
        return (0,)
    out = []
    for a, b in zip(nodes[:-1], nodes[1:]):
        scal = instance.attrs[a, b, : instance.counts[a, b]] @ w
        out.append(int(np.argmin(scal)))
    return tuple(out)


# --- greedy-vs-optimal study -----------------------------------------------------


def fsasp_gap_study(
    gen_config,
    n_instances: int,
    pref_grid=None,
    permutation_source=None,
    reference=None,
    start: int = 0,
):
    """Chebyshev gap of greedy linear edge selection against the DP optimum.

    For every instance and preference a node permutation is produced by
    ``permutation_source(instance, spec, pref)`` (nearest neighbour by
    default); both selectors then pick edges for it. Returns
    ``(cells, hv_rows)``: one dict per (instance, preference) and one per
    instance with the hypervolume of both strategies' fronts. Instance
    indices run from ``start``.
    """
    from .baselines import nearest_neighbor
    from .instancegen import calibrate_thresholds, generate

    spec = calibrate_thresholds(gen_config)
    if pref_grid is None:
        from .pareto import preference_grid

        pref_grid = preference_grid(101)
    source = permutation_source or (lambda inst, sp, pr: nearest_neighbor(inst, sp, pr).nodes)
    ref = reference if reference is not None else spec.hv_reference
    cells, hv_rows = [], []
    for i in range(start, start + n_instances):
        inst = generate(gen_config, i)
        arch_g, arch_d = ParetoArchive(), ParetoArchive()
        for pref in pref_grid:
            w = np.asarray(pref, dtype=np.float64)
            pi = source(inst, spec, w)
            eg = fsasp_greedy_linear(inst, spec, pi, w)
            obj_g = evaluate_route(inst, spec, Route(pi, eg)).objectives
            cheb_g = chebyshev_cost(obj_g, w)
            dp = fsasp_dp(inst, spec, pi, w)
            gap = (cheb_g - dp.cost) / dp.cost if dp.cost > 0 else 0.0
            cells.append(
                {
                    "instance": i,
                    "lambda1": float(w[0]),
                    "cheb_greedy": float(cheb_g),
                    "cheb_dp": float(dp.cost),
                    "gap": float(gap),
                    "approximate": bool(dp.approximate),
                }
            )
            pareto_insert(arch_g, obj_g)
            pareto_insert(arch_d, dp.objectives)
        row = {"instance": i}
        if ref is not None:
            row["hv_greedy"] = hypervolume_2d(arch_g, ref)
            row["hv_dp"] = hypervolume_2d(arch_d, ref)
            row["hv_diff"] = row["hv_greedy"] - row["hv_dp"]
        hv_rows.append(row)
    return cells, hv_rows
