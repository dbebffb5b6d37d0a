"""Quick built-in checks behind ``mgroute selftest``.

Each check compares a component against an independent route (enumeration,
grid integration, finite differences, the scalar evaluator) on small random
cases. The whole run takes a few seconds.
"""

from __future__ import annotations

import itertools
import time

import numpy as np
import torch

from . import diffcore as dc
from .core import MultigraphInstance, ProblemSpec, Route, evaluate_route
from .fsasp import Infeasible, fsasp_dp
from .instancegen import GenConfig, calibrate_thresholds, generate
from .model import InstanceBatch, ModelConfig, NEPFModel, trim_route
from .pareto import chebyshev_cost, hypervolume_2d, nondominated
from .training import batch_evaluate, edge_advantage, losses_from_rollout, node_advantage, step_generator

SMALL = dict(d=8, d_edge=8, l1=1, l2=1, heads=2, heads_edge=2, ffn=16, hyper_hidden=8)


def _random_case(rng, variant):
    n = int(rng.integers(3, 6))
    m = 3
    counts = rng.integers(1, m + 1, size=(n, n))
    np.fill_diagonal(counts, 0)
    attrs = rng.random((n, n, m, 2))
    attrs[np.arange(m)[None, None, :] >= counts[..., None]] = 0.0
    na = {}
    if variant == "motsptw":
        na = {"tw_open": np.zeros(n), "tw_close": np.r_[np.inf, rng.random(n - 1) * n]}
    inst = MultigraphInstance(attrs, counts, na)
    spec = {
        "motsp": ProblemSpec("motsp"),
        "rctsp": ProblemSpec("rctsp", resource_limit=0.5 * n),
        "motsptw": ProblemSpec("motsptw"),
    }[variant]
    nodes = (0, *rng.permutation(np.arange(1, n)).tolist(), 0)
    return inst, spec, nodes


def check_fsasp(cases: int = 60) -> bool:
    rng = np.random.default_rng(0)
    for c in range(cases):
        variant = ("motsp", "rctsp", "motsptw")[c % 3]
        inst, spec, nodes = _random_case(rng, variant)
        pref = np.array([0.4, 0.6])
        best = np.inf
        pairs = list(zip(nodes[:-1], nodes[1:]))
        for combo in itertools.product(*(range(inst.counts[u, v]) for u, v in pairs)):
            ev = evaluate_route(inst, spec, Route(nodes, combo))
            if ev.feasible:
                score = chebyshev_cost(ev.objectives, pref) if spec.objective_dim == 2 else ev.objectives[0]
                best = min(best, score)
        try:
            got = fsasp_dp(inst, spec, nodes, pref).cost
        except Infeasible:
            got = np.inf
        if got != best:
            return False
    return True


def check_hypervolume(archives: int = 10, grid: int = 400) -> bool:
    rng = np.random.default_rng(1)
    ref = np.array([1.0, 1.0])
    mids = (np.arange(grid) + 0.5) / grid
    X, Y = np.meshgrid(mids, mids, indexing="ij")
    for _ in range(archives):
        pts = nondominated(rng.random((int(rng.integers(1, 8)), 2)))
        covered = np.zeros_like(X, dtype=bool)
        for p in pts:
            covered |= (X >= p[0]) & (Y >= p[1])
        if abs(covered.mean() - hypervolume_2d(pts, ref)) > 5.0 / grid:
            return False
    return True


def check_gradients(per_param: int = 2) -> bool:
    cfg = GenConfig.parse("flex2", 5, "moop")
    spec = calibrate_thresholds(cfg, samples=200)
    model = NEPFModel(ModelConfig("moop", edge_stage="learned", **SMALL))
    g = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.05 * torch.randn(p.shape, generator=g, dtype=p.dtype))
    batch = InstanceBatch([generate(cfg, i) for i in range(2)], spec)
    pref = np.array([0.3, 0.7])
    with torch.no_grad():
        enc = model.encode_batch(batch)
        cond = model.condition(batch, pref)
        ro = model.rollout(batch, enc, cond, 4, decode="sample", generator=step_generator(0, 1))
        eps = model.fsasp_stage(batch, ro.nodes, ro.inst, cond, 3, generator=step_generator(0, 2)).eps

    def loss():
        enc = model.encode_batch(batch)
        cond = model.condition(batch, pref)
        r = model.rollout(batch, enc, cond, 4, replay=ro.nodes)
        out = losses_from_rollout(model, batch, enc, cond, r, pref, 4, 3, 5.0, None, eps=eps)
        return out["node_loss"] + out["edge_loss"] + out["est_loss"]

    params = list(model.parameters())
    dc.backward(loss(), params)
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(min(per_param, flat.numel())):
                orig = flat[i].item()
                h = 1e-4 * max(1.0, abs(orig))
                flat[i] = orig + h
                up = loss().item()
                flat[i] = orig - h
                down = loss().item()
                flat[i] = orig
                num = torch.tensor((up - down) / (2 * h), dtype=dc.DTYPE)
                if dc.relative_error(p.grad.view(-1)[i], num).item() > 1e-4:
                    return False
    return True


def check_invariance() -> bool:
    cfg = GenConfig.parse("flex4", 6, "motsp")
    model = NEPFModel(ModelConfig("motsp", **SMALL))
    rng = np.random.default_rng(2)
    inst = generate(cfg, 0)
    attrs = inst.attrs.copy()
    for u in range(6):
        for v in range(6):
            c = inst.counts[u, v]
            attrs[u, v, :c] = attrs[u, v, rng.permutation(c)]
    spec = ProblemSpec("motsp")
    a = model.pre_encode(InstanceBatch([inst], spec))
    b = model.pre_encode(InstanceBatch([MultigraphInstance(attrs, inst.counts)], spec))
    return (a - b).abs().max().item() <= 1e-12


def check_advantages() -> bool:
    rng = np.random.default_rng(3)
    best = torch.from_numpy(rng.standard_normal(30))
    sums = node_advantage(best, 6).view(5, 6).sum(1)
    R = torch.from_numpy(rng.standard_normal((4, 5)))
    R[1] = R[1, 0]
    return bool(sums.abs().max() <= 1e-13 and torch.all(edge_advantage(R)[1] == 0))


def check_batch_evaluator() -> bool:
    for variant in ("rctsp", "moop", "motsptw", "mocvrp"):
        cfg = GenConfig.parse("flex2", 6, variant)
        spec = calibrate_thresholds(cfg, samples=200)
        batch = InstanceBatch([generate(cfg, i) for i in range(2)], spec)
        model = NEPFModel(ModelConfig(variant, edge_stage="learned", **SMALL))
        pref = np.array([0.5, 0.5]) if spec.objective_dim == 2 else None
        gen = step_generator(0, 3)
        with torch.no_grad():
            enc = model.encode_batch(batch)
            cond = model.condition(batch, pref)
            ro = model.rollout(batch, enc, cond, 5, decode="sample", generator=gen)
            eps = model.fsasp_stage(batch, ro.nodes, ro.inst, cond, 2, generator=gen).eps
        out = batch_evaluate(batch, ro.nodes.numpy(), eps.numpy(), ro.inst.numpy())
        for p in range(ro.nodes.shape[0]):
            inst = batch.instances[int(ro.inst[p])]
            for k in range(2):
                nodes, e = trim_route(ro.nodes[p], eps[p, k], inst.depot)
                ref = evaluate_route(inst, spec, Route(nodes, e))
                if not np.array_equal(out.objectives[p, k], ref.objectives) or out.feasible[p, k] != ref.feasible:
                    return False
    return True


CHECKS = [
    ("edge selection DP vs enumeration", check_fsasp),
    ("hypervolume vs grid integration", check_hypervolume),
    ("autodiff vs finite differences", check_gradients),
    ("parallel-edge order invariance", check_invariance),
    ("advantage identities", check_advantages),
    ("batched vs scalar route evaluation", check_batch_evaluator),
]


def run_selftest(verbose: bool = True) -> bool:
    torch.set_num_threads(1)
    ok = True
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            passed = bool(fn())
            note = ""
        except Exception as exc:  # a crash is a failed check, reported with its cause
            passed, note = False, f" ({type(exc).__name__}: {exc})"
        ok &= passed
        if verbose:
            print(f"{'PASS' if passed else 'FAIL'}  {name}  [{time.perf_counter() - t0:.1f}s]{note}")
    return ok
