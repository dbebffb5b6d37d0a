import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgroute.core import (
    MultigraphInstance,
    ProblemSpec,
    Route,
    SpecMismatch,
    StructuralError,
    Variant,
    cheapest_edge_matrix,
    evaluate_route,
    instance_from_json,
    instance_to_json,
    validate_route,
)
from mgroute.instancegen import GenConfig, calibrate_thresholds, generate


def complete(n, edge_fn, node_attrs=None):
    edges = []
    for u in range(n):
        for v in range(n):
            if u != v:
                for a in edge_fn(u, v):
                    edges.append((u, v, a))
    return MultigraphInstance.from_edge_lists(n, edges, node_attrs)


def random_instance(rng, n, M=3, **node_attrs):
    return complete(n, lambda u, v: rng.random((rng.integers(1, M + 1), 2)).tolist(), node_attrs or None)


def test_three_node_motsp_sums():
    table = {(0, 1): [(1, 2)], (1, 2): [(2, 1)], (2, 0): [(3, 3)]}
    inst = complete(3, lambda u, v: table.get((u, v), [(9, 9)]))
    ev = evaluate_route(inst, ProblemSpec("motsp"), Route((0, 1, 2, 0), (0, 0, 0)))
    assert ev.objectives.tolist() == [6.0, 6.0]
    assert ev.feasible and ev.violation == 0.0


def test_rctsp_usage_equal_to_limit_is_feasible():
    inst = complete(3, lambda u, v: [(1.0, 0.5)])
    spec = ProblemSpec("rctsp", resource_limit=1.5)
    ev = evaluate_route(inst, spec, Route((0, 1, 2, 0), (0, 0, 0)))
    assert ev.resource_usage[0] == 1.5
    assert ev.violation == 0.0 and ev.feasible
    ev = evaluate_route(inst, ProblemSpec("rctsp", resource_limit=1.25), Route((0, 1, 2, 0), (0, 0, 0)))
    assert ev.violation == pytest.approx(0.25) and not ev.feasible


def clock_simulation(inst, nodes, eps):
    """Scalar re-simulation of the time-window rules."""
    t = 0.0
    late = 0
    dist = 0.0
    for a, b, e in zip(nodes[:-1], nodes[1:], eps):
        dist += inst.attrs[a, b, e, 0]
        t += inst.attrs[a, b, e, 1]
        if b != 0 and t > inst.node_attrs["tw_close"][b]:
            late += 1
    return late, dist


def test_motsptw_one_late_arrival():
    # unit travel time everywhere; node 2 must be reached by time 1.5 but is visited second
    inst = complete(
        4,
        lambda u, v: [(1.0 + u + v, 1.0)],
        {"tw_open": [0, 0, 0, 0], "tw_close": [math.inf, 10, 1.5, 10]},
    )
    route = Route((0, 1, 2, 3, 0), (0, 0, 0, 0))
    ev = evaluate_route(inst, ProblemSpec("motsptw"), route)
    late, dist = clock_simulation(inst, route.nodes, route.edges)
    assert ev.objectives[0] == 1 == late
    assert ev.objectives[1] == dist
    assert ev.state_trace[:, 0].tolist() == [0.0, 1.0, 2.0, 3.0, 4.0]


def test_motsptw_random_routes_match_simulation():
    rng = np.random.default_rng(3)
    for _ in range(50):
        n = 6
        close = np.r_[math.inf, rng.random(n - 1) * 3]
        inst = random_instance(rng, n, tw_open=np.zeros(n), tw_close=close)
        nodes = (0, *rng.permutation(np.arange(1, n)).tolist(), 0)
        eps = [int(rng.integers(inst.counts[a, b])) for a, b in zip(nodes[:-1], nodes[1:])]
        ev = evaluate_route(inst, ProblemSpec("motsptw"), Route(nodes, eps))
        late, dist = clock_simulation(inst, nodes, eps)
        assert ev.objectives[0] == late
        assert ev.objectives[1] == pytest.approx(dist, abs=1e-12)


def test_op_and_moop_objectives():
    prize = [0.0, 0.3, 0.5, 0.2]
    inst = complete(4, lambda u, v: [(0.5, 0.25)], {"prize": prize})
    op = ProblemSpec("op", thresholds=(1.0, 1.0))
    ev = evaluate_route(inst, op, Route((0, 1, 0), (0, 0)))
    assert ev.objectives[0] == pytest.approx(0.7)
    assert ev.feasible
    ev = evaluate_route(inst, op, Route((0, 1, 2, 0), (0, 0, 0)))
    assert ev.violation == pytest.approx(0.5) and not ev.feasible
    moop = ProblemSpec("moop", resource_limit=0.5)
    ev = evaluate_route(inst, moop, Route((0, 1, 0), (0, 0)))
    assert ev.objectives.tolist() == pytest.approx([0.7, 1.0])
    ev = evaluate_route(inst, moop, Route((0, 1, 2, 0), (0, 0, 0)))
    # over the resource limit: nothing counts as collected
    assert ev.objectives[0] == pytest.approx(1.0) and ev.violation == pytest.approx(0.25)


def test_empty_orienteering_route():
    inst = complete(3, lambda u, v: [(1, 1)], {"prize": [0, 1, 1]})
    ev = evaluate_route(inst, ProblemSpec("op", thresholds=(0, 0)), Route((0, 0), (0,)))
    assert ev.objectives[0] == 2.0 and ev.feasible


def test_mocvrp_capacity_accounting():
    inst = complete(4, lambda u, v: [(1, 1)], {"demand": [0, 30, 30, 10]})
    spec = ProblemSpec("mocvrp", capacity=50)
    ok = evaluate_route(inst, spec, Route((0, 1, 0, 2, 3, 0), (0,) * 5))
    assert ok.feasible and ok.objectives.tolist() == [5.0, 5.0]
    bad = evaluate_route(inst, spec, Route((0, 1, 2, 3, 0), (0,) * 4))
    assert bad.violation == 20.0 and not bad.feasible


def test_structural_errors():
    rng = np.random.default_rng(0)
    inst = random_instance(rng, 4, M=1)
    spec = ProblemSpec("motsp")
    with pytest.raises(StructuralError):
        evaluate_route(inst, spec, Route((0, 1, 2, 3, 0), (0, 0, 1, 0)))
    with pytest.raises(StructuralError):
        evaluate_route(inst, spec, Route((0, 1, 2, 0), (0, 0, 0)))
    with pytest.raises(StructuralError):
        evaluate_route(inst, spec, Route((0, 1, 2, 3), (0, 0, 0)))
    with pytest.raises(StructuralError):
        evaluate_route(inst, spec, Route((0, 1), (0, 0)))
    with pytest.raises(SpecMismatch):
        evaluate_route(inst, ProblemSpec("op", thresholds=(1, 1)), Route((0, 1, 0), (0, 0)))


def test_instance_invariants_rejected():
    with pytest.raises(StructuralError):
        MultigraphInstance.from_edge_lists(3, [(0, 1, (1, 1))])
    with pytest.raises((StructuralError, ValueError)):
        complete(3, lambda u, v: [(-1.0, 1.0)])


def test_cheapest_edge_examples():
    inst = complete(2, lambda u, v: [(1, 5), (4, 1)])
    assert cheapest_edge_matrix(inst, (1, 0))[0, 1] == 1
    inst = complete(2, lambda u, v: [(2, 2), (3, 0)])
    assert cheapest_edge_matrix(inst, (0.5, 0.5))[0, 1] == 1.5
    assert cheapest_edge_matrix(inst, (0.5, 0.5))[0, 0] == 0


def test_cheapest_edge_matches_scan():
    rng = np.random.default_rng(1)
    inst = random_instance(rng, 7, M=5)
    w = rng.random(2)
    mat = cheapest_edge_matrix(inst, w)
    for (u, v), edges in inst.edge_sets.items():
        assert mat[u, v] == pytest.approx(min(float(w[0] * e[0] + w[1] * e[1]) for e in edges), abs=1e-12)


def test_json_roundtrip(tmp_path):
    for variant in Variant:
        cfg = GenConfig.parse("flex3", 6, variant, seed=4)
        inst = generate(cfg, 2)
        spec = calibrate_thresholds(cfg, samples=200)
        back, spec2 = instance_from_json(instance_to_json(inst, spec))
        assert np.array_equal(back.attrs, inst.attrs)
        assert np.array_equal(back.counts, inst.counts)
        assert spec2 == spec
        for k, vals in inst.node_attrs.items():
            assert np.array_equal(back.node_attrs[k], vals)
    r = Route((0, 2, 1, 0), (1, 0, 0))
    assert Route.from_json(r.to_json()) == r


# --- properties -------------------------------------------------------------------


def random_route(rng, inst, variant):
    n = inst.num_nodes
    if variant.tour:
        body = rng.permutation(n).tolist()
        if variant is Variant.MOTSPTW:
            body.remove(0)
            body = [0] + body
        nodes = body + [body[0]]
    elif variant is Variant.MOCVRP:
        cust = rng.permutation(np.arange(1, n)).tolist()
        nodes = [0]
        for c in cust:
            nodes.append(c)
            if rng.random() < 0.3:
                nodes.append(0)
        if nodes[-1] != 0:
            nodes.append(0)
    else:
        k = int(rng.integers(1, n))
        nodes = [0, *rng.permutation(np.arange(1, n))[:k].tolist(), 0]
    eps = [int(rng.integers(inst.counts[a, b])) for a, b in zip(nodes[:-1], nodes[1:])]
    return Route(nodes, eps)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), variant=st.sampled_from(list(Variant)))
def test_violation_zero_iff_feasible(seed, variant):
    rng = np.random.default_rng(seed)
    cfg = GenConfig.parse("flex3", 6, variant, seed=seed)
    inst = generate(cfg, 0)
    spec = calibrate_thresholds(GenConfig.parse("flex3", 6, variant), samples=200)
    if variant is Variant.MOCVRP:
        spec = ProblemSpec("mocvrp", capacity=float(rng.integers(9, 30)))
    route = random_route(rng, inst, variant)
    ev = evaluate_route(inst, spec, route)
    assert ev.feasible == (ev.violation == 0.0)
    assert ev.violation >= 0 and np.all(np.isfinite(ev.objectives))
    assert len(ev.state_trace) == len(route.nodes)
    again = evaluate_route(inst, spec, route)
    assert np.array_equal(again.objectives, ev.objectives) and again.violation == ev.violation


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_motsp_objectives_additive_over_segments(seed):
    rng = np.random.default_rng(seed)
    inst = random_instance(rng, 7)
    route = random_route(rng, inst, Variant.MOTSP)
    total = evaluate_route(inst, ProblemSpec("motsp"), route).objectives
    cut = int(rng.integers(1, len(route.edges)))
    arcs = [inst.attrs[a, b, e] for a, b, e in zip(route.nodes[:-1], route.nodes[1:], route.edges)]
    seg = np.sum(arcs[:cut], axis=0) + np.sum(arcs[cut:], axis=0)
    assert np.allclose(total, seg, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_mocvrp_additive_over_trips(seed):
    rng = np.random.default_rng(seed)
    inst = random_instance(rng, 7, demand=np.r_[0, rng.integers(1, 10, 6)])
    spec = ProblemSpec("mocvrp", capacity=50)
    route = random_route(rng, inst, Variant.MOCVRP)
    total = evaluate_route(inst, spec, route).objectives
    # split at depot visits into single-trip routes
    trips, cur, ce = [], [0], []
    for x, e in zip(route.nodes[1:], route.edges):
        cur.append(x)
        ce.append(e)
        if x == 0:
            trips.append(Route(cur, ce))
            cur, ce = [0], []
    parts = []
    for t in trips:
        # a single trip is not a complete route, so sum its arcs directly
        parts.append(np.sum([inst.attrs[a, b, e] for a, b, e in zip(t.nodes[:-1], t.nodes[1:], t.edges)], axis=0))
    assert np.allclose(total, np.sum(parts, axis=0), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_reversal_on_symmetric_instance(seed):
    rng = np.random.default_rng(seed)
    n = 6
    sets = {}
    for u in range(n):
        for v in range(u + 1, n):
            sets[(u, v)] = sets[(v, u)] = rng.random((rng.integers(1, 4), 2)).tolist()
    inst = complete(n, lambda u, v: sets[(u, v)])
    route = random_route(rng, inst, Variant.MOTSP)
    rev = Route(route.nodes[::-1], route.edges[::-1])
    a = evaluate_route(inst, ProblemSpec("motsp"), route).objectives
    b = evaluate_route(inst, ProblemSpec("motsp"), rev).objectives
    assert np.allclose(a, b, atol=1e-12)


def test_validate_accepts_generated_baseline_shapes():
    rng = np.random.default_rng(5)
    for variant in Variant:
        inst = generate(GenConfig.parse("flex2", 6, variant), 0)
        validate_route(inst, ProblemSpec(variant, resource_limit=1, thresholds=(1, 1), capacity=50), random_route(rng, inst, variant))
