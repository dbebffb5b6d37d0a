"""Two-stage routing policy: node permutation first, then one edge per hop.

The node stage aggregates every parallel edge set into a latent distance
matrix with a Deep Sets module, encodes it with GREAT node-based layers and
a few transformer layers, and decodes a permutation with a multi-pointer
decoder. The edge stage pools each edge set of the chosen sequence, mixes
the pooled sequence with a BiLSTM and scores every edge against its
position's mixed embedding; edges are sampled independently per position.

Everything is batched over instances sharing the node count. Trajectories
are laid out flat: trajectory ``p`` belongs to instance ``p // K1``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import diffcore as dc
from .core import MultigraphInstance, ProblemSpec, Variant

STATE_DIM = {Variant.RCTSP: 1, Variant.OP: 2, Variant.MOOP: 1, Variant.MOCVRP: 1}
ESTIMATED_STATE = (Variant.RCTSP, Variant.OP, Variant.MOOP)


class NoFeasibleNode(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    variant: str
    d: int = 128
    d_edge: int = 64
    l1: int = 5
    l2: int = 2
    heads: int = 8
    heads_edge: int = 8
    ffn: int = 512
    clip: float = 50.0
    clip_edge: float = 1.0
    hyper_hidden: int = 128
    edge_stage: str = "auto"
    seed: int = 0

    def __post_init__(self):
        Variant(self.variant)
        for name in ("d", "d_edge", "l1", "heads", "heads_edge", "ffn", "hyper_hidden"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.l2 < 0:
            raise ValueError("l2 must be non-negative")
        if self.d % self.heads or self.d_edge % self.heads_edge:
            raise ValueError("widths must be divisible by their head counts")
        if self.d % 2 or self.d_edge % 2:
            raise ValueError("widths must be even")
        if self.edge_stage not in ("auto", "learned", "greedy"):
            raise ValueError("edge_stage must be auto, learned or greedy")

    @property
    def var(self) -> Variant:
        return Variant(self.variant)

    @property
    def learned_edges(self) -> bool:
        if self.edge_stage == "auto":
            return self.var not in (Variant.MOTSP, Variant.MOCVRP)
        return self.edge_stage == "learned"

    @property
    def multi_objective(self) -> bool:
        return self.var.multi_objective

    @classmethod
    def desk(cls, variant, **kw) -> "ModelConfig":
        """Reduced widths that train in minutes on one CPU core."""
        base = dict(d=64, d_edge=32, l1=3, l2=1, heads=4, heads_edge=4, ffn=128, hyper_hidden=64)
        base.update(kw)
        return cls(Variant(variant).value, **base)

    def to_json(self) -> dict:
        return asdict(self)


# --- instance features ----------------------------------------------------------


def _capped_close(close: np.ndarray) -> np.ndarray:
    finite = close[np.isfinite(close)]
    cap = 2.0 * finite.max() if finite.size else 1.0
    return np.minimum(close, cap)


def node_features(instance: MultigraphInstance, spec: ProblemSpec) -> np.ndarray:
    """Per-node features appended to every edge that ends at the node (node stage)."""
    v = spec.variant
    n = instance.num_nodes
    is_depot = (np.arange(n) == instance.depot).astype(float)
    if v in (Variant.OP, Variant.MOOP):
        return np.stack([instance.node_attrs["prize"], is_depot], axis=1)
    if v is Variant.MOCVRP:
        return np.stack([instance.node_attrs["demand"] / spec.capacity, is_depot], axis=1)
    if v is Variant.MOTSPTW:
        na = instance.node_attrs
        return np.stack([na["tw_open"], _capped_close(na["tw_close"]), is_depot], axis=1)
    return np.zeros((n, 0))


def edge_node_features(instance: MultigraphInstance, spec: ProblemSpec) -> np.ndarray:
    """Per-node features appended to edges in the selection stage."""
    if spec.variant is Variant.MOTSPTW:
        na = instance.node_attrs
        return np.stack([na["tw_open"], _capped_close(na["tw_close"])], axis=1)
    return np.zeros((instance.num_nodes, 0))


def node_feature_dim(variant: Variant) -> int:
    return {Variant.OP: 2, Variant.MOOP: 2, Variant.MOCVRP: 2, Variant.MOTSPTW: 3}.get(variant, 0)


def edge_feature_dim(variant: Variant) -> int:
    return 2 if variant is Variant.MOTSPTW else 0


class InstanceBatch:
    """Padded tensors for instances that share node count and attribute width."""

    def __init__(self, instances: list[MultigraphInstance], spec: ProblemSpec):
        if not instances:
            raise ValueError("empty batch")
        n = instances[0].num_nodes
        if any(x.num_nodes != n for x in instances):
            raise ValueError("instances in a batch must share the node count")
        m = max(x.max_edges for x in instances)
        k = instances[0].attr_dim
        B = len(instances)
        attrs = np.zeros((B, n, n, m, k))
        mask = np.zeros((B, n, n, m), dtype=bool)
        for b, inst in enumerate(instances):
            attrs[b, :, :, : inst.max_edges] = inst.attrs
            mask[b, :, :, : inst.max_edges] = inst.edge_mask
        self.instances = instances
        self.spec = spec
        self.variant = spec.variant
        self.depot = instances[0].depot
        self.n, self.m, self.k, self.size = n, m, k, B
        self.attrs_np = attrs
        self.attrs = torch.from_numpy(attrs)
        self.mask = torch.from_numpy(mask)
        self.node_feat = torch.from_numpy(np.stack([node_features(x, spec) for x in instances]))
        self.edge_node_feat = torch.from_numpy(np.stack([edge_node_features(x, spec) for x in instances]))
        self.node_attrs = {
            key: np.stack([x.node_attrs[key] for x in instances]) for key in spec.variant.required_node_attrs
        }

    def cheapest(self, weights) -> torch.Tensor:
        """``(B, N, N)`` cheapest scalarized edge cost; zero diagonal."""
        w = torch.as_tensor(np.asarray(weights, dtype=np.float64))
        scal = (self.attrs * w).sum(-1).masked_fill(~self.mask, math.inf)
        out = scal.min(dim=-1).values
        return torch.where(torch.isinf(out), torch.zeros((), dtype=out.dtype), out)


# --- cost terms --------------------------------------------------------------------


def decoder_cost_weights(variant: Variant, pref=None) -> np.ndarray:
    """Attribute weights for the cheapest-edge penalty in the node decoder."""
    if variant in (Variant.MOTSP, Variant.MOCVRP):
        return np.asarray(pref, dtype=np.float64)
    if variant is Variant.OP:
        return np.array([0.5, 0.5])
    if variant is Variant.RCTSP:
        # the limit is tight, so node order has to follow resource first
        return np.array([0.0, 1.0])
    return np.array([1.0, 0.0])


def fsasp_cost_weights(variant: Variant, pref=None) -> np.ndarray:
    """Attribute weights ``w`` with ``cost(l) = w . e_l`` in the edge stage.

    Multi-objective variants weight each attribute by the preference of the
    objective it drives: distance/time for MOTSPTW map to (lambda_2, lambda_1)
    and cost/resource for MOOP map to (lambda_2, lambda_1).
    """
    if variant in (Variant.MOTSP, Variant.MOCVRP):
        return np.asarray(pref, dtype=np.float64)
    if variant in (Variant.MOTSPTW, Variant.MOOP):
        p = np.asarray(pref, dtype=np.float64)
        return np.array([p[1], p[0]])
    if variant is Variant.OP:
        return np.array([0.5, 0.5])
    return np.array([1.0, 0.0])


def fsasp_cost_term(edge, variant, pref=None) -> float:
    """Scalar edge cost used in the edge-stage scores."""
    w = fsasp_cost_weights(Variant(variant), pref)
    return float(np.dot(w, np.asarray(edge, dtype=np.float64)))


# --- scoring primitives ----------------------------------------------------------------


def tanh_clip(x, c):
    """``c * tanh(x / c)``: identity for small scores, bounded by ``c``; ``c=None`` disables."""
    return x if c is None else c * torch.tanh(x / c)


def pointer_scores(q, k, scale):
    """Mean over heads of scaled dot products.

    ``q`` is ``(..., H, e)`` and ``k`` is ``(..., C, H, e)``; returns ``(..., C)``.
    """
    return (q.unsqueeze(-3) * k).sum(-1).mean(-1) * scale


def clipped_probs(scores, cost, beta, clip, mask):
    """Scores minus ``beta * cost``, tanh-clipped, masked softmax over the last axis."""
    return dc.softmax(tanh_clip(scores - beta * cost, clip), axis=-1, mask=mask)


def decode_node_step(q, keys, cost, beta, clip, mask, scale):
    """One decoder step: query ``(P, H, e)``, keys ``(P, N, H, e)`` -> probabilities ``(P, N)``."""
    if not mask.any(dim=-1).all():
        raise NoFeasibleNode("a trajectory has no feasible next node")
    return clipped_probs(pointer_scores(q, keys, scale), cost, beta, clip, mask)


# --- layers --------------------------------------------------------------------------


class GreatLayer(torch.nn.Module):
    """Node-based GREAT layer over a dense edge tensor ``D (B, N, N, d)``.

    Temporary node features concatenate gated sums of outgoing and incoming
    edge embeddings; they are projected back onto edges from both end points.
    With ``last=True`` the node features are returned instead.
    """

    def __init__(self, d: int, ffn: int, gen: torch.Generator, last: bool = False):
        super().__init__()
        self.last = last
        self.gate_out = dc.uniform_init((d,), d, gen)
        self.gate_in = dc.uniform_init((d,), d, gen)
        self.w_out = dc.Linear(d, d // 2, gen, bias=False)
        self.w_in = dc.Linear(d, d // 2, gen, bias=False)
        if not last:
            self.w_back = dc.Linear(2 * d, d, gen)
            self.norm1 = dc.LayerNorm(d)
            self.ff = dc.MLP(d, ffn, d, gen)
            self.norm2 = dc.LayerNorm(d)

    def node_features(self, D):
        n = D.shape[1]
        off = ~torch.eye(n, dtype=torch.bool)
        a_out = dc.softmax(D @ self.gate_out, axis=-1, mask=off)
        # alpha''_uv gates D_vu
        Dt = D.transpose(1, 2)
        a_in = dc.softmax(Dt @ self.gate_in, axis=-1, mask=off)
        x_out = (a_out.unsqueeze(-1) * self.w_out(D)).sum(2)
        x_in = (a_in.unsqueeze(-1) * self.w_in(Dt)).sum(2)
        return torch.cat([x_out, x_in], dim=-1)

    def forward(self, D):
        x = self.node_features(D)
        if self.last:
            return x
        n = x.shape[1]
        pair = torch.cat([x.unsqueeze(2).expand(-1, -1, n, -1), x.unsqueeze(1).expand(-1, n, -1, -1)], dim=-1)
        D = self.norm1(D + self.w_back(pair))
        return self.norm2(D + self.ff(D))


class TransformerLayer(torch.nn.Module):
    def __init__(self, d: int, heads: int, ffn: int, gen: torch.Generator):
        super().__init__()
        self.heads = heads
        self.wq = dc.Linear(d, d, gen, bias=False)
        self.wk = dc.Linear(d, d, gen, bias=False)
        self.wv = dc.Linear(d, d, gen, bias=False)
        self.wo = dc.Linear(d, d, gen)
        self.norm1 = dc.LayerNorm(d)
        self.ff = dc.MLP(d, ffn, d, gen)
        self.norm2 = dc.LayerNorm(d)

    def forward(self, h):
        B, n, d = h.shape
        e = d // self.heads

        def split(x):
            return x.view(B, n, self.heads, e).transpose(1, 2)

        q, k, v = split(self.wq(h)), split(self.wk(h)), split(self.wv(h))
        att = dc.softmax(q @ k.transpose(-1, -2) / math.sqrt(e), axis=-1)
        mixed = (att @ v).transpose(1, 2).reshape(B, n, d)
        h = self.norm1(h + self.wo(mixed))
        return self.norm2(h + self.ff(h))


class PointerWeights(torch.nn.Module):
    """Static per-head query/key projections ``(H, d, e)`` for single-objective variants."""

    def __init__(self, d: int, heads: int, gen: torch.Generator):
        super().__init__()
        e = d // heads
        self.wq = dc.uniform_init((heads, d, e), d, gen)
        self.wk = dc.uniform_init((heads, d, e), d, gen)

    def forward(self, pref=None):
        return self.wq, self.wk


class HyperNet(torch.nn.Module):
    """MLP from a preference vector to per-head query/key projections."""

    def __init__(self, d: int, heads: int, hidden: int, gen: torch.Generator, pref_dim: int = 2):
        super().__init__()
        self.shape = (heads, d, d // heads)
        self.mlp = dc.MLP(pref_dim, hidden, 2 * heads * d * (d // heads), gen)

    def forward(self, pref):
        out = self.mlp(torch.as_tensor(np.asarray(pref, dtype=np.float64)))
        wq, wk = out.chunk(2)
        return wq.view(self.shape), wk.view(self.shape)


def hypernet_condition(model: "NEPFModel", pref):
    """Pointer projections for both stages: ``((Wq, Wk) node, (Wq, Wk) edge)``."""
    return model.node_pointer(pref), model.edge_pointer(pref)


# --- rollout containers -------------------------------------------------------------


@dataclass
class Encoded:
    D: torch.Tensor
    h: torch.Tensor


@dataclass
class Conditioned:
    pref: np.ndarray | None
    node_w: tuple
    edge_w: tuple
    node_cost: torch.Tensor
    edge_cost_w: np.ndarray


@dataclass
class NodeRollout:
    nodes: torch.Tensor  # (P, T) long, padded with depot stays
    logp: torch.Tensor  # (P,)
    step_logp: torch.Tensor  # (P, S) per decision (0 where forced or finished)
    step_probs: list = field(default_factory=list)
    s_hat: torch.Tensor | None = None  # (P, S, s_dim)
    s_active: torch.Tensor | None = None  # (P, S) bool
    inst: torch.Tensor | None = None


@dataclass
class EdgeSamples:
    eps: torch.Tensor  # (P, K, T-1) long
    logp: torch.Tensor  # (P, K)
    probs: torch.Tensor  # (P, T-1, M)
    pos_valid: torch.Tensor  # (P, T-1)


# --- model ----------------------------------------------------------------------------------


class NEPFModel(torch.nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        cfg = config
        gen = torch.Generator().manual_seed(cfg.seed)
        v = cfg.var
        d, de = cfg.d, cfg.d_edge
        self.variant = v
        # pre-encoding
        self.w_g = dc.Linear(2 + node_feature_dim(v), d, gen)
        self.phi = dc.MLP(d, d, d, gen)
        self.rho = dc.MLP(d, d, d, gen)
        # encoder
        self.great = torch.nn.ModuleList(
            [GreatLayer(d, cfg.ffn, gen, last=(i == cfg.l1 - 1)) for i in range(cfg.l1)]
        )
        self.node_norm = dc.LayerNorm(d)
        self.transformer = torch.nn.ModuleList([TransformerLayer(d, cfg.heads, cfg.ffn, gen) for _ in range(cfg.l2)])
        # node decoder
        self.w1 = dc.Linear(d, d, gen, bias=False)
        self.w2 = dc.Linear(d, d, gen, bias=False)
        self.w3 = dc.Linear(d, d, gen, bias=False)
        self.w4 = dc.Linear(d, d, gen, bias=False)
        self.s_dim = STATE_DIM.get(v, 0)
        if self.s_dim:
            self.w5 = dc.Linear(self.s_dim, d, gen, bias=False)
        if v in ESTIMATED_STATE:
            self.estimator = dc.LSTM(d, d, gen)
            self.w_state = dc.Linear(d, self.s_dim, gen, bias=False)
        self.beta = torch.nn.Parameter(torch.ones((), dtype=dc.DTYPE))
        if cfg.multi_objective:
            self.node_pointer = HyperNet(d, cfg.heads, cfg.hyper_hidden, gen)
        else:
            self.node_pointer = PointerWeights(d, cfg.heads, gen)
        # edge stage
        if cfg.learned_edges:
            self.w_f = dc.Linear(2 + edge_feature_dim(v), de, gen)
            self.lstm_fwd = dc.LSTM(de, de // 2, gen)
            self.lstm_bwd = dc.LSTM(de, de // 2, gen)
            self.beta_edge = torch.nn.Parameter(torch.ones((), dtype=dc.DTYPE))
            if cfg.multi_objective:
                self.edge_pointer = HyperNet(de, cfg.heads_edge, cfg.hyper_hidden, gen)
            else:
                self.edge_pointer = PointerWeights(de, cfg.heads_edge, gen)
        else:
            self.edge_pointer = lambda pref: None

    # -- encoder ------------------------------------------------------------------

    def edge_inputs(self, batch: InstanceBatch) -> torch.Tensor:
        """Edge attributes concatenated with end-point node features: ``(B, N, N, M, k + F)``."""
        B, n, m = batch.size, batch.n, batch.m
        nf = batch.node_feat
        if nf.shape[-1] == 0:
            return batch.attrs
        ends = nf[:, None, :, None, :].expand(B, n, n, m, nf.shape[-1])
        return torch.cat([batch.attrs, ends], dim=-1)

    def pre_encode(self, batch: InstanceBatch) -> torch.Tensor:
        """Latent distance tensor ``D (B, N, N, d)``; the diagonal is zero."""
        g = self.w_g(self.edge_inputs(batch))
        pooled = dc.masked_sum(self.phi(g), batch.mask.unsqueeze(-1), axis=3)
        D = self.rho(pooled)
        off = ~torch.eye(batch.n, dtype=torch.bool)
        return D * off.unsqueeze(-1)

    def encode(self, D: torch.Tensor) -> torch.Tensor:
        """Node encodings ``h (B, N, d)`` from the latent distance tensor."""
        x = D
        for layer in self.great:
            x = layer(x)
        h = self.node_norm(x)
        for layer in self.transformer:
            h = layer(h)
        return dc.check_finite(h, "encoder output")

    def encode_batch(self, batch: InstanceBatch) -> Encoded:
        D = self.pre_encode(batch)
        return Encoded(D, self.encode(D))

    def condition(self, batch: InstanceBatch, pref=None) -> Conditioned:
        v = self.variant
        if v.multi_objective:
            if pref is None:
                raise ValueError("multi-objective models need a preference")
            pref = np.asarray(pref, dtype=np.float64)
            node_w = self.node_pointer(pref)
            edge_w = self.edge_pointer(pref)
        else:
            node_w = self.node_pointer()
            edge_w = self.edge_pointer(None)
        node_cost = batch.cheapest(decoder_cost_weights(v, pref))
        return Conditioned(pref, node_w, edge_w, node_cost, fsasp_cost_weights(v, pref))

    # -- node stage ---------------------------------------------------------------------

    def _starts(self, n: int, depot: int, K1: int):
        if self.variant.depot_based:
            customers = [x for x in range(n) if x != depot]
            return [customers[j % len(customers)] for j in range(K1)]
        return [j % n for j in range(K1)]

    def max_steps(self, n: int) -> int:
        v = self.variant
        if v is Variant.MOCVRP:
            return 2 * (n - 1)
        if v.orienteering:
            return n
        return n - 1

    def _feasible(self, batch, inst, visited, cur, load, done):
        v = self.variant
        depot = batch.depot
        P, n = visited.shape
        if v.tour:
            return ~visited
        mask = ~visited
        mask[:, depot] = False
        if v is Variant.MOCVRP:
            demand = torch.from_numpy(batch.node_attrs["demand"])[inst]
            mask = mask & (demand <= batch.spec.capacity - load.unsqueeze(-1) + 1e-9)
            all_done = (visited | (torch.arange(n) == depot)).all(dim=-1)
            mask[:, depot] = cur != depot
            mask = torch.where(all_done.unsqueeze(-1), torch.arange(n) == depot, mask)
        else:
            mask[:, depot] = cur != depot
        return torch.where(done.unsqueeze(-1), torch.arange(n) == depot, mask)

    def rollout(
        self,
        batch: InstanceBatch,
        enc: Encoded,
        cond: Conditioned,
        K1: int,
        decode: str = "greedy",
        generator: torch.Generator | None = None,
        replay: torch.Tensor | None = None,
        keep_probs: bool = False,
    ) -> NodeRollout:
        """POMO rollouts: ``K1`` trajectories per instance with distinct forced starts.

        Tour variants start trajectory ``j`` at node ``j``; depot variants start
        at the depot and force the ``j``-th customer second. ``replay`` gives
        the full node sequences ``(P, T)`` to score instead of decoding.
        """
        v = self.variant
        cfg = self.config
        B, n, depot = batch.size, batch.n, batch.depot
        if K1 > (n - 1 if v.depot_based else n):
            raise ValueError("K1 exceeds the number of distinct starts")
        P = B * K1
        inst = torch.arange(B).repeat_interleave(K1)
        h = enc.h
        hP = h[inst]
        H = cfg.heads
        e = cfg.d // H
        wq, wk = cond.node_w
        keys = torch.einsum("bnd,hde->bnhe", h, wk)[inst]
        scale = 1.0 / math.sqrt(cfg.d)
        cost = cond.node_cost[inst]
        starts = torch.tensor(self._starts(n, depot, K1) * B)
        first = torch.full((P,), depot, dtype=torch.long) if v.depot_based else starts
        rows = torch.arange(P)
        base = self.w1(hP[rows, first]) + self.w3(h.mean(dim=1))[inst]
        visited = torch.zeros((P, n), dtype=torch.bool)
        visited[rows, first] = True
        vis_sum = hP[rows, first]
        vis_cnt = torch.ones(P, 1, dtype=dc.DTYPE)
        cur = first.clone()
        done = torch.zeros(P, dtype=torch.bool)
        load = torch.zeros(P, dtype=dc.DTYPE)
        est_state = None
        if v in ESTIMATED_STATE:
            est_state = self.estimator.step(hP[rows, first])
        seq = [first]
        step_logp, s_hats, s_act, probs_log = [], [], [], []
        steps = self.max_steps(n) if replay is None else replay.shape[1] - 2
        for t in range(steps):
            if v in ESTIMATED_STATE:
                s = self.w_state(est_state[0])
                s_hats.append(s)
                s_act.append(~done)
            elif v is Variant.MOCVRP:
                s = (load / batch.spec.capacity).unsqueeze(-1)
            else:
                s = None
            q = base + self.w2(hP[rows, cur]) + self.w4(vis_sum / vis_cnt)
            if s is not None:
                q = q + self.w5(s)
            Q = torch.einsum("pd,hde->phe", q, wq)
            mask = self._feasible(batch, inst, visited, cur, load, done)
            probs = decode_node_step(Q, keys, cost[rows, cur], self.beta, cfg.clip, mask, scale)
            if keep_probs:
                probs_log.append(probs)
            forced = v.depot_based and t == 0
            if replay is not None:
                choice = replay[:, t + 1]
            elif forced:
                choice = starts
            elif decode == "greedy":
                choice = probs.detach().argmax(dim=-1)
            else:
                u = torch.rand(P, 1, generator=generator, dtype=dc.DTYPE)
                cdf = probs.detach().cumsum(dim=-1)
                choice = (cdf < u).sum(dim=-1).clamp(max=n - 1)
                # guard against landing on a masked slot through rounding
                bad = ~mask[rows, choice]
                if bad.any():
                    choice = torch.where(bad, probs.detach().argmax(dim=-1), choice)
            if not mask[rows, choice].all():
                raise NoFeasibleNode("replayed action is masked")
            lp = torch.log(probs[rows, choice].clamp_min(1e-300))
            live = ~done & (not forced)
            step_logp.append(torch.where(live, lp, torch.zeros_like(lp)))
            seq.append(choice)
            # state updates
            moved = ~done
            new_visit = moved & ~visited[rows, choice]
            visited = visited.clone()
            visited[rows, choice] = visited[rows, choice] | moved
            if v is Variant.MOCVRP:
                dem = torch.from_numpy(batch.node_attrs["demand"])[inst, choice]
                load = torch.where(choice == depot, torch.zeros_like(load), load + dem)
            hc = hP[rows, choice]
            vis_sum = vis_sum + hc * new_visit.unsqueeze(-1)
            vis_cnt = vis_cnt + new_visit.unsqueeze(-1).to(dc.DTYPE)
            if est_state is not None:
                upd = self.estimator.step(hc, est_state)
                keep = new_visit.unsqueeze(-1)
                est_state = (torch.where(keep, upd[0], est_state[0]), torch.where(keep, upd[1], est_state[1]))
            cur = torch.where(moved, choice, cur)
            if v.orienteering or v is Variant.MOCVRP:
                finished = choice == depot
                if v is Variant.MOCVRP:
                    finished = finished & (visited | (torch.arange(n) == depot)).all(dim=-1)
                done = done | (moved & finished)
        closing = first if v.tour else torch.full((P,), depot, dtype=torch.long)
        if replay is not None:
            closing = replay[:, -1]
        seq.append(closing)
        nodes = torch.stack(seq, dim=1)
        slp = torch.stack(step_logp, dim=1) if step_logp else torch.zeros(P, 0, dtype=dc.DTYPE)
        return NodeRollout(
            nodes=nodes,
            logp=slp.sum(dim=1),
            step_logp=slp,
            step_probs=probs_log,
            s_hat=torch.stack(s_hats, dim=1) if s_hats else None,
            s_active=torch.stack(s_act, dim=1) if s_act else None,
            inst=inst,
        )

    # -- edge stage ---------------------------------------------------------------------

    def edge_sets(self, batch: InstanceBatch, nodes: torch.Tensor, inst: torch.Tensor):
        """Attributes ``(P, T-1, M, k)`` and masks of the edge sets along each sequence."""
        u, v = nodes[:, :-1], nodes[:, 1:]
        b = inst.unsqueeze(-1)
        return batch.attrs[b, u, v], batch.mask[b, u, v]

    def edge_scores(self, batch, nodes, inst, cond):
        """Clipped edge-stage scores ``(P, T-1, M)``, the edge mask and the valid positions."""
        cfg = self.config
        A, msk = self.edge_sets(batch, nodes, inst)
        pos_valid = msk.any(dim=-1)
        feats = A
        ef = batch.edge_node_feat
        if ef.shape[-1]:
            ends = ef[inst.unsqueeze(-1), nodes[:, 1:]]
            feats = torch.cat([A, ends.unsqueeze(2).expand(-1, -1, A.shape[2], -1)], dim=-1)
        f = self.w_f(feats)
        cnt = msk.sum(dim=-1, keepdim=True).clamp(min=1).to(dc.DTYPE)
        pooled = dc.masked_sum(f, msk.unsqueeze(-1), axis=2) / cnt
        mixed = self.bilstm(pooled, pos_valid) + pooled
        wq, wk = cond.edge_w
        Q = torch.einsum("ptd,hde->pthe", mixed, wq)
        Kk = torch.einsum("ptmd,hde->ptmhe", f, wk)
        raw = pointer_scores(Q, Kk, 1.0 / math.sqrt(cfg.d_edge))
        cost = (A * torch.as_tensor(cond.edge_cost_w)).sum(-1)
        live = msk.clone()
        live[..., 0] |= ~pos_valid
        return raw, cost, live, pos_valid

    def bilstm(self, x, valid):
        """BiLSTM over positions; padded tail positions never feed the backward pass."""
        T = x.shape[1]
        outs_f, outs_b = [None] * T, [None] * T
        state = None
        for t in range(T):
            state = self.lstm_fwd.step(x[:, t], state)
            outs_f[t] = state[0]
        state = None
        for t in range(T - 1, -1, -1):
            new = self.lstm_bwd.step(x[:, t], state)
            if state is None:
                zero = torch.zeros_like(new[0])
                state = (zero, zero)
            keep = valid[:, t].unsqueeze(-1)
            state = (torch.where(keep, new[0], state[0]), torch.where(keep, new[1], state[1]))
            outs_b[t] = state[0]
        return torch.cat([torch.stack(outs_f, 1), torch.stack(outs_b, 1)], dim=-1)

    def fsasp_stage(
        self,
        batch: InstanceBatch,
        nodes: torch.Tensor,
        inst: torch.Tensor,
        cond: Conditioned,
        K2: int,
        generator: torch.Generator | None = None,
        include_argmax: bool = False,
        replay: torch.Tensor | None = None,
    ) -> EdgeSamples:
        """``K2`` independent joint edge selections per sequence (plus the argmax one first if asked)."""
        raw, cost, live, pos_valid = self.edge_scores(batch, nodes, inst, cond)
        probs = clipped_probs(raw, cost, self.beta_edge, self.config.clip_edge, live)
        P, T1, M = probs.shape
        pd = probs.detach()
        if replay is not None:
            eps = replay
        else:
            u = torch.rand(P, K2, T1, 1, generator=generator, dtype=dc.DTYPE)
            eps = (pd.cumsum(dim=-1).unsqueeze(1) < u).sum(dim=-1)
            cnt = live.sum(dim=-1).unsqueeze(1)
            eps = torch.minimum(eps, cnt - 1)
            if include_argmax:
                eps = torch.cat([pd.argmax(dim=-1).unsqueeze(1), eps], dim=1)
        p_sel = probs.unsqueeze(1).expand(-1, eps.shape[1], -1, -1).gather(-1, eps.unsqueeze(-1)).squeeze(-1)
        lp = torch.log(p_sel.clamp_min(1e-300)) * pos_valid.unsqueeze(1)
        return EdgeSamples(eps, lp.sum(dim=-1), probs, pos_valid)

    def greedy_edges(self, batch: InstanceBatch, nodes: torch.Tensor, inst: torch.Tensor, cond: Conditioned):
        """Lowest linearly scalarized edge per position, ties to the lowest index: ``(P, 1, T-1)``."""
        A, msk = self.edge_sets(batch, nodes, inst)
        cost = (A * torch.as_tensor(cond.edge_cost_w)).sum(-1).masked_fill(~msk, math.inf)
        eps = cost.argmin(dim=-1)
        return eps.masked_fill(~msk.any(dim=-1), 0).unsqueeze(1)


def trim_route(nodes, eps, depot: int) -> tuple[list[int], list[int]]:
    """Drop the trailing depot stays that pad variable-length routes."""
    nodes = [int(x) for x in nodes]
    eps = [int(x) for x in eps]
    while len(nodes) > 2 and nodes[-1] == depot and nodes[-2] == depot:
        nodes.pop()
        eps.pop()
    return nodes, eps


def build_model(config: ModelConfig) -> NEPFModel:
    torch.manual_seed(config.seed)
    return NEPFModel(config)


def named_parameters(model: NEPFModel) -> dict[str, torch.nn.Parameter]:
    return dict(model.named_parameters())


def save_model(path, model: NEPFModel, optimizer=None, meta: dict | None = None) -> None:
    info = {"model_config": model.config.to_json()}
    info.update(meta or {})
    dc.save_checkpoint(path, named_parameters(model), optimizer, info)


def load_model(path) -> tuple[NEPFModel, dict]:
    tensors, header = dc.load_checkpoint(path)
    cfg = ModelConfig(**header["meta"]["model_config"])
    model = NEPFModel(cfg)
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(tensors[name])
    return model, header
