"""Generate one instance of every variant and solve it with its constructive heuristic.

    python demos/heuristics_by_variant.py
"""

import numpy as np

from mgroute.baselines import beam_search_rctsp, greedy_moop, greedy_op, insertion_motsptw, nearest_neighbor
from mgroute.core import evaluate_route
from mgroute.instancegen import GenConfig, calibrate_thresholds, generate

pref = np.array([0.5, 0.5])
solvers = {
    "motsp": lambda x, s: nearest_neighbor(x, s, pref),
    "mocvrp": lambda x, s: nearest_neighbor(x, s, pref),
    "rctsp": beam_search_rctsp,
    "op": greedy_op,
    "moop": lambda x, s: greedy_moop(x, s, pref),
    "motsptw": lambda x, s: insertion_motsptw(x, s, pref),
}

for variant, solve in solvers.items():
    cfg = GenConfig.parse("flex3", 20, variant, seed=1)
    spec = calibrate_thresholds(cfg)
    inst = generate(cfg, 0)
    route = solve(inst, spec)
    ev = evaluate_route(inst, spec, route)
    print(f"{variant:8s} nodes={len(route.nodes):3d} objectives={np.round(ev.objectives, 3)} feasible={ev.feasible}")
