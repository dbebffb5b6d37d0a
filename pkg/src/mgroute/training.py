"""Hierarchical REINFORCE for the two-stage policy, validation and evaluation.

Each step samples ``K1`` POMO node permutations per instance and ``K2`` edge
selections per permutation. The node policy is reinforced with the best
downstream reward over its edge samples against the POMO mean; the edge
policy with each sample's reward against the mean over its ``K2`` siblings.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from . import diffcore as dc
from .core import MultigraphInstance, ProblemSpec, Route, RouteEvaluation, Variant
from .instancegen import GenConfig, calibrate_thresholds, generate
from .model import InstanceBatch, ModelConfig, NEPFModel, save_model, trim_route
from .pareto import ParetoArchive, chebyshev_cost, hypervolume_2d, pareto_insert, preference_grid

AUG_FACTORS = (1.0, 0.5, 2.0, 0.8, 1.25, 0.9, 1.1, 0.75)
# second-axis partner of each factor; the first variant is the identity
_AUG_PARTNER = (0, 2, 1, 4, 3, 6, 5, 7)
VALIDATION_SEED_OFFSET = 7919


def aug_scalings(aug: int) -> list[tuple[float, float]]:
    """Per-axis attribute scalings for ``aug`` augmented copies; copy 0 is unscaled."""
    if not 1 <= aug <= len(AUG_FACTORS):
        raise ValueError(f"aug must be in 1..{len(AUG_FACTORS)}")
    return [(AUG_FACTORS[i], AUG_FACTORS[_AUG_PARTNER[i]]) for i in range(aug)]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    instances_per_epoch: int = 2000
    batch_size: int = 64
    k1: int | None = None
    k2_train: int = 20
    k2_eval: int = 50
    lr: float = 1e-4
    weight_decay: float = 1e-6
    penalty: float | None = None
    seed: int = 0
    val_instances: int = 100
    check_routes: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.instances_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("epochs, instances_per_epoch and batch_size must be positive")
        if self.k2_train < 2:
            raise ValueError("k2_train must be at least 2")
        if self.k1 is not None and self.k1 < 1:
            raise ValueError("k1 must be positive")


def default_penalty(gen_config: GenConfig, probes: int = 4) -> float:
    """Ten times the mean edge attribute of the distribution."""
    vals = []
    for i in range(probes):
        inst = generate(replace(gen_config, seed=0), i)
        vals.append(inst.attrs[inst.edge_mask].mean())
    return float(10.0 * np.mean(vals))


# --- batched route evaluation --------------------------------------------------------


@dataclass
class BatchEvaluation:
    objectives: np.ndarray  # (P, K, m)
    violation: np.ndarray  # (P, K)
    trace: np.ndarray  # (P, K, T, s) state on arrival at each position

    @property
    def feasible(self) -> np.ndarray:
        return self.violation == 0.0


def batch_evaluate(batch: InstanceBatch, nodes, eps, inst) -> BatchEvaluation:
    """Vectorized counterpart of :func:`core.evaluate_route` over padded routes.

    ``nodes (P, T)``, ``eps (P, K, T-1)``, ``inst (P,)``. Depot stays at the tail
    contribute nothing. Sums run left to right so the numbers match the
    scalar evaluator exactly.
    """
    nodes = np.asarray(nodes)
    eps = np.asarray(eps)
    inst = np.asarray(inst)
    spec = batch.spec
    v = spec.variant
    depot = batch.depot
    P, T = nodes.shape
    K = eps.shape[1]
    u, w = nodes[:, None, :-1], nodes[:, None, 1:]
    arcs = batch.attrs_np[inst[:, None, None], u, w, eps]  # (P, K, T-1, k)
    cum = np.zeros((P, K, T, batch.k))
    cum[:, :, 1:] = np.cumsum(arcs, axis=2)
    totals = cum[:, :, -1]
    zeros = np.zeros((P, K))

    if v is Variant.MOTSP:
        return BatchEvaluation(totals.copy(), zeros, cum)
    if v is Variant.RCTSP:
        viol = np.maximum(0.0, totals[..., 1] - spec.resource_limit)
        return BatchEvaluation(totals[..., :1].copy(), viol, cum[..., 1:2])
    if v in (Variant.OP, Variant.MOOP):
        prize = batch.node_attrs["prize"]
        on_route = np.where(nodes == depot, 0.0, prize[inst[:, None], nodes])
        collected = np.cumsum(on_route, axis=1)[:, -1]
        total = np.array([np.sum(np.delete(prize[b], depot)) for b in inst])
        miss = np.broadcast_to((total - collected)[:, None], (P, K))
        if v is Variant.OP:
            t1, t2 = spec.thresholds
            viol = np.maximum(0.0, totals[..., 0] - t1) + np.maximum(0.0, totals[..., 1] - t2)
            return BatchEvaluation(miss[..., None].copy(), viol, cum)
        viol = np.maximum(0.0, totals[..., 1] - spec.resource_limit)
        first = np.where(viol > 0.0, total[:, None], miss)
        return BatchEvaluation(np.stack([first, totals[..., 0]], axis=-1), viol, cum[..., 1:2])
    if v is Variant.MOCVRP:
        demand = batch.node_attrs["demand"][inst[:, None], nodes]  # (P, T)
        load = np.zeros(P)
        viol = np.zeros(P)
        trace = np.zeros((P, T, 1))
        for t in range(T):
            at_depot = nodes[:, t] == depot
            viol = viol + np.where(at_depot, np.maximum(0.0, load - spec.capacity), 0.0)
            load = np.where(at_depot, 0.0, load + demand[:, t])
            trace[:, t, 0] = load
        return BatchEvaluation(totals.copy(), np.broadcast_to(viol[:, None], (P, K)).copy(), np.broadcast_to(trace[:, None], (P, K, T, 1)))
    if v is Variant.MOTSPTW:
        close = batch.node_attrs["tw_close"][inst[:, None], nodes]  # (P, T)
        clock = cum[..., 1]
        late = (clock[:, :, 1:] > close[:, None, 1:]) & (nodes[:, None, 1:] != depot)
        obj = np.stack([late.sum(axis=-1).astype(float), totals[..., 0]], axis=-1)
        return BatchEvaluation(obj, zeros, clock[..., None])
    raise ValueError(v)


def scalarized(objectives: np.ndarray, spec: ProblemSpec, pref) -> np.ndarray:
    if spec.variant.multi_objective:
        return np.asarray(chebyshev_cost(objectives, np.asarray(pref, dtype=np.float64)))
    return objectives[..., 0]


def reward(evaluation: RouteEvaluation | BatchEvaluation, spec: ProblemSpec, pref=None, penalty_coeff: float = 0.0):
    """Negative (scalarized) objective minus the weighted constraint violation."""
    cost = scalarized(np.asarray(evaluation.objectives), spec, pref)
    out = -cost - penalty_coeff * np.asarray(evaluation.violation)
    return float(out) if np.ndim(out) == 0 else out


# --- one training step ------------------------------------------------------------------


def node_advantage(best: torch.Tensor, K1: int) -> torch.Tensor:
    """``R*_ij - mean_j R*_ij`` for flat ``(B * K1,)`` rewards."""
    r = best.view(-1, K1)
    return (r - r.mean(dim=1, keepdim=True)).view(-1)


def edge_advantage(rewards: torch.Tensor) -> torch.Tensor:
    """``R_ijk - mean_k R_ijk``; computed around the first sample so equal rows give exact zeros."""
    anchor = rewards[:, :1]
    centred = rewards - anchor
    return centred - centred.mean(dim=1, keepdim=True)


@dataclass
class StepResult:
    loss: float
    node_loss: float
    edge_loss: float
    est_loss: float
    mean_reward: float
    mean_best_reward: float
    node_adv_sums: np.ndarray
    equal_rows: int
    equal_rows_zero: bool
    feasible_rate: float

    @property
    def identities_hold(self) -> bool:
        return bool(np.all(np.abs(self.node_adv_sums) <= 1e-12 * max(1.0, self._scale))) and self.equal_rows_zero

    _scale: float = 1.0


def step_generator(seed: int, *key: int) -> torch.Generator:
    ss = np.random.SeedSequence([seed, *key])
    return torch.Generator().manual_seed(int(ss.generate_state(1, dtype=np.uint64)[0] >> 1))


def rollout_losses(model: NEPFModel, batch: InstanceBatch, pref, K1: int, K2: int, penalty: float, generator):
    """Sampled rollouts and the three loss terms (no optimizer step)."""
    enc = model.encode_batch(batch)
    cond = model.condition(batch, pref)
    ro = model.rollout(batch, enc, cond, K1, decode="sample", generator=generator)
    return losses_from_rollout(model, batch, enc, cond, ro, pref, K1, K2, penalty, generator)


def losses_from_rollout(model, batch, enc, cond, ro, pref, K1, K2, penalty, generator, eps=None):
    if model.config.learned_edges:
        es = model.fsasp_stage(batch, ro.nodes, ro.inst, cond, K2, generator=generator, replay=eps)
        eps_t, edge_logp = es.eps, es.logp
    else:
        eps_t, edge_logp = model.greedy_edges(batch, ro.nodes, ro.inst, cond), None
    ev = batch_evaluate(batch, ro.nodes.numpy(), eps_t.numpy(), ro.inst.numpy())
    R = torch.from_numpy(np.ascontiguousarray(reward(ev, batch.spec, pref, penalty)))
    best_k = R.argmax(dim=1)
    R_best = R.max(dim=1).values
    adv_node = node_advantage(R_best, K1)
    node_loss = -(adv_node * ro.logp).mean()
    if edge_logp is not None:
        adv_edge = edge_advantage(R)
        edge_loss = -(adv_edge * edge_logp).mean()
    else:
        adv_edge = torch.zeros_like(R)
        edge_loss = torch.zeros((), dtype=dc.DTYPE)
    est_loss = torch.zeros((), dtype=dc.DTYPE)
    if ro.s_hat is not None:
        S = ro.s_hat.shape[1]
        trace = torch.from_numpy(np.ascontiguousarray(ev.trace[np.arange(len(best_k)), best_k.numpy()]))
        target = trace[:, :S]
        sq = ((ro.s_hat - target) ** 2).sum(-1) * ro.s_active
        est_loss = sq.sum(dim=1).mean()
    return {
        "node_loss": node_loss,
        "edge_loss": edge_loss,
        "est_loss": est_loss,
        "rewards": R,
        "adv_node": adv_node,
        "adv_edge": adv_edge,
        "eval": ev,
        "eps": eps_t,
        "rollout": ro,
    }


def hierarchical_step(
    model: NEPFModel,
    optimizer: dc.Adam,
    batch: InstanceBatch,
    pref,
    K1: int,
    K2: int,
    penalty: float,
    generator: torch.Generator,
    check_routes: bool = False,
) -> StepResult:
    """One gradient step on a batch; raises :class:`diffcore.NonFiniteError` on NaN/Inf."""
    out = rollout_losses(model, batch, pref, K1, K2, penalty, generator)
    loss = out["node_loss"] + out["edge_loss"] + out["est_loss"]
    optimizer.zero_grad()
    try:
        dc.backward(loss, model.parameters())
    except dc.NonFiniteError as exc:
        raise dc.NonFiniteError(
            f"{exc}; node={out['node_loss'].item()} edge={out['edge_loss'].item()} est={out['est_loss'].item()}"
        ) from exc
    optimizer.step()
    if check_routes:
        _validate_rollouts(batch, out)
    R = out["rewards"]
    sums = out["adv_node"].view(-1, K1).sum(dim=1).detach().numpy()
    equal = (R == R[:, :1]).all(dim=1)
    adv_edge = out["adv_edge"]
    res = StepResult(
        loss=loss.item(),
        node_loss=out["node_loss"].item(),
        edge_loss=out["edge_loss"].item(),
        est_loss=out["est_loss"].item(),
        mean_reward=R.mean().item(),
        mean_best_reward=R.max(dim=1).values.mean().item(),
        node_adv_sums=sums,
        equal_rows=int(equal.sum()),
        equal_rows_zero=bool((adv_edge[equal] == 0).all()),
        feasible_rate=float(out["eval"].feasible.mean()),
    )
    res._scale = float(R.abs().max()) * K1
    return res


def _validate_rollouts(batch, out):
    from .core import validate_route

    ro, eps = out["rollout"], out["eps"]
    for p in range(ro.nodes.shape[0]):
        inst = batch.instances[int(ro.inst[p])]
        for k in range(eps.shape[1]):
            nodes, e = trim_route(ro.nodes[p], eps[p, k], batch.depot)
            validate_route(inst, batch.spec, Route(nodes, e))


# --- inference -----------------------------------------------------------------------------


@dataclass
class Solution:
    route: Route | None
    objectives: np.ndarray | None
    cost: float
    feasible: bool


def solve_batch(
    model: NEPFModel,
    instances: list[MultigraphInstance],
    spec: ProblemSpec,
    pref=None,
    K1: int | None = None,
    K2: int = 50,
    scaling: tuple[float, float] = (1.0, 1.0),
    seed: int = 0,
) -> list[Solution]:
    """Greedy POMO decoding, best of argmax plus ``K2`` sampled edge selections.

    The policy sees the instance with its attributes scaled by ``scaling``;
    routes are always scored on the original instances. Feasible routes win
    over infeasible ones, then the lower scalarized cost.
    """
    n = instances[0].num_nodes
    v = spec.variant
    if K1 is None:
        K1 = n - 1 if v.depot_based else n
    seen = [_scaled(x, scaling, v) for x in instances] if scaling != (1.0, 1.0) else instances
    gen = step_generator(seed, 0xE7A1)
    with torch.no_grad():
        sbatch = InstanceBatch(seen, spec)
        enc = model.encode_batch(sbatch)
        cond = model.condition(sbatch, pref)
        ro = model.rollout(sbatch, enc, cond, K1, decode="greedy")
        if model.config.learned_edges:
            eps = model.fsasp_stage(sbatch, ro.nodes, ro.inst, cond, K2, generator=gen, include_argmax=True).eps
        else:
            eps = model.greedy_edges(sbatch, ro.nodes, ro.inst, cond)
    obatch = sbatch if seen is instances else InstanceBatch(instances, spec)
    ev = batch_evaluate(obatch, ro.nodes.numpy(), eps.numpy(), ro.inst.numpy())
    cost = scalarized(ev.objectives, spec, pref)
    key = np.where(ev.feasible, cost, np.inf)
    out = []
    P, K = cost.shape
    for b in range(len(instances)):
        rows = slice(b * K1, (b + 1) * K1)
        kb, cb = key[rows], cost[rows]
        if np.isfinite(kb).any():
            flat = int(np.argmin(kb))
            feasible = True
        else:
            viol = ev.violation[rows]
            flat = int(np.lexsort((cb.ravel(), viol.ravel()))[0])
            feasible = False
        j, k = divmod(flat, K)
        p = b * K1 + j
        nodes, e = trim_route(ro.nodes[p], eps[p, k], instances[b].depot)
        out.append(Solution(Route(nodes, e), ev.objectives[p, k].copy(), float(cb[j, k]), feasible))
    return out


def _scaled(instance: MultigraphInstance, scaling, variant: Variant) -> MultigraphInstance:
    out = instance.scaled(scaling)
    if variant is Variant.MOTSPTW:
        # windows live on the travel-time axis
        na = instance.node_attrs
        out = out.with_node_attrs(tw_open=na["tw_open"] * scaling[1], tw_close=na["tw_close"] * scaling[1])
    return out


def validate(model: NEPFModel, instances, spec: ProblemSpec, K2: int, penalty: float, seed: int, chunk: int = 50) -> dict:
    pref = np.array([0.5, 0.5]) if spec.variant.multi_objective else None
    sols = []
    for i in range(0, len(instances), chunk):
        sols += solve_batch(model, instances[i : i + chunk], spec, pref, K2=K2, seed=seed + i)
    costs = np.array([s.cost for s in sols])
    feas = np.array([s.feasible for s in sols])
    return {"val_cost": float(costs.mean()), "val_feasible": float(feas.mean())}


# --- training loop --------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: NEPFModel
    log: list[dict]
    spec: ProblemSpec
    best_path: str | None = None
    identity_failures: int = 0
    steps: int = 0


def _jsonable(rec: dict) -> dict:
    return {k: (float(v) if isinstance(v, (np.floating, float)) else v) for k, v in rec.items()}


def train(
    config: TrainConfig,
    gen_config: GenConfig,
    model_config: ModelConfig,
    out_dir: str | None = None,
    progress=None,
) -> TrainResult:
    """Train from scratch; writes ``metrics.jsonl``, ``best.ckpt`` and ``last.ckpt`` under ``out_dir``.

    The metric log holds no wall-clock fields, so equal seeds give
    byte-identical logs. Epoch 0 is the untrained model.
    """
    if Variant(model_config.variant) is not gen_config.variant:
        raise ValueError("model and generator variants differ")
    torch.set_num_threads(1)
    spec = calibrate_thresholds(gen_config)
    penalty = config.penalty if config.penalty is not None else default_penalty(gen_config)
    n = gen_config.n
    K1 = config.k1 or (n - 1 if spec.variant.depot_based else n)
    model = NEPFModel(model_config)
    opt = dc.Adam(model.named_parameters(), lr=config.lr, weight_decay=config.weight_decay)
    val_cfg = replace(gen_config, seed=gen_config.seed + VALIDATION_SEED_OFFSET)
    val_set = [generate(val_cfg, i) for i in range(config.val_instances)]
    log: list[dict] = []
    log_fh = None
    best_path = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        log_fh = open(os.path.join(out_dir, "metrics.jsonl"), "w")
        best_path = os.path.join(out_dir, "best.ckpt")
    meta = {"train_config": asdict(config), "gen_config": _gen_json(gen_config), "spec": spec.to_json(), "penalty": penalty}
    best = -math.inf
    failures = 0
    steps = 0

    def emit(rec):
        log.append(rec)
        if log_fh:
            log_fh.write(json.dumps(_jsonable(rec), sort_keys=True) + "\n")
            log_fh.flush()

    def checkpoint(rec):
        nonlocal best
        score = -rec["val_cost"] + (rec["val_feasible"] if not spec.variant.multi_objective else 0.0)
        if score > best:
            best = score
            if best_path:
                save_model(best_path, model, opt, dict(meta, epoch=rec["epoch"]))

    rec = {"epoch": 0, **validate(model, val_set, spec, config.k2_eval, penalty, config.seed)}
    emit(rec)
    checkpoint(rec)
    batches = math.ceil(config.instances_per_epoch / config.batch_size)
    for epoch in range(1, config.epochs + 1):
        t0 = time.time()
        acc = {"loss": 0.0, "reward": 0.0, "est_loss": 0.0, "feasible": 0.0}
        for bi in range(batches):
            lo = bi * config.batch_size
            size = min(config.batch_size, config.instances_per_epoch - lo)
            base = (epoch - 1) * config.instances_per_epoch + lo
            instances = [generate(gen_config, base + i) for i in range(size)]
            batch = InstanceBatch(instances, spec)
            pref_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([config.seed, 0xF00D, epoch, bi])))
            pref = None
            if spec.variant.multi_objective:
                l1 = float(pref_rng.random())
                pref = np.array([l1, 1.0 - l1])
            gen = step_generator(config.seed, epoch, bi)
            res = hierarchical_step(model, opt, batch, pref, K1, config.k2_train, penalty, gen, config.check_routes)
            steps += 1
            if not res.identities_hold:
                failures += 1
            acc["loss"] += res.loss / batches
            acc["reward"] += res.mean_best_reward / batches
            acc["est_loss"] += res.est_loss / batches
            acc["feasible"] += res.feasible_rate / batches
        rec = {
            "epoch": epoch,
            "train_loss": acc["loss"],
            "train_best_reward": acc["reward"],
            "train_est_loss": acc["est_loss"],
            "train_feasible": acc["feasible"],
            "beta": model.beta.item(),
            "identity_failures": failures,
            **validate(model, val_set, spec, config.k2_eval, penalty, config.seed),
        }
        emit(rec)
        checkpoint(rec)
        if progress:
            progress(rec, time.time() - t0)
    if log_fh:
        log_fh.close()
        save_model(os.path.join(out_dir, "last.ckpt"), model, opt, dict(meta, epoch=config.epochs))
    return TrainResult(model, log, spec, best_path, failures, steps)


def _gen_json(g: GenConfig) -> dict:
    return {"distribution": g.distribution.value, "n": g.n, "variant": g.variant.value, "x": g.x, "correlation": g.correlation, "seed": g.seed}


# --- evaluation ------------------------------------------------------------------------------


def evaluate(
    model: NEPFModel,
    instances: list[MultigraphInstance],
    spec: ProblemSpec,
    prefs=None,
    aug: int = 1,
    K2: int = 50,
    seed: int = 0,
    penalty: float = 0.0,
) -> list[dict]:
    """Per-instance metric rows: hypervolume or best objective, feasibility, wall time.

    For every augmentation copy and preference, the best feasible route of
    each instance enters that instance's archive; costs are always those of
    the original instance.
    """
    v = spec.variant
    if prefs is None:
        prefs = preference_grid(101) if v.multi_objective else [None]
    prefs = [None if p is None else np.asarray(p, dtype=np.float64) for p in prefs]
    archives = [ParetoArchive() for _ in instances]
    best = [None] * len(instances)
    feas_cnt = np.zeros(len(instances))
    total = 0
    t0 = time.perf_counter()
    for scaling in aug_scalings(aug):
        for pref in prefs:
            sols = solve_batch(model, instances, spec, pref, K2=K2, scaling=scaling, seed=seed)
            total += 1
            for i, s in enumerate(sols):
                feas_cnt[i] += s.feasible
                if not s.feasible:
                    continue
                pareto_insert(archives[i], s.objectives)
                if best[i] is None or s.cost < best[i].cost:
                    best[i] = s
    wall = (time.perf_counter() - t0) * 1000.0 / len(instances)
    rows = []
    for i, inst in enumerate(instances):
        row = {
            "instance_id": i,
            "variant": v.value,
            "method": "nepf",
            "hv": hv_of(archives[i], spec) if v.multi_objective else "",
            "best_obj": best[i].objectives[0] if (best[i] is not None and not v.multi_objective) else "",
            "feasible_rate": feas_cnt[i] / total,
            "wall_ms": wall,
        }
        rows.append(row)
    return rows


def hv_of(archive: ParetoArchive, spec: ProblemSpec) -> float:
    """Normalized hypervolume of the archive points that dominate the reference."""
    ref = np.asarray(spec.hv_reference, dtype=np.float64)
    pts = archive.objectives()
    if len(pts) == 0:
        return 0.0
    pts = pts[np.all(pts <= ref, axis=1)]
    return hypervolume_2d(pts, ref)
