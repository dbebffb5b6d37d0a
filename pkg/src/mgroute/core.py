"""Multigraph instances, routes, and per-variant route evaluation.

An instance stores its parallel edge sets densely: ``attrs[u, v, l]`` is the
attribute vector of the ``l``-th edge from ``u`` to ``v`` and ``counts[u, v]``
says how many of the ``M`` slots are real. Slots past the count are padding
and are never read by the evaluator.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np


class StructuralError(ValueError):
    """A route breaks the structural rules of its variant."""


class SpecMismatch(ValueError):
    """Instance and problem spec do not fit together."""


class Variant(str, enum.Enum):
    RCTSP = "rctsp"
    OP = "op"
    MOTSP = "motsp"
    MOCVRP = "mocvrp"
    MOTSPTW = "motsptw"
    MOOP = "moop"

    @property
    def multi_objective(self) -> bool:
        return self in (Variant.MOTSP, Variant.MOCVRP, Variant.MOTSPTW, Variant.MOOP)

    @property
    def tour(self) -> bool:
        """Every node visited exactly once and the tour closes."""
        return self in (Variant.RCTSP, Variant.MOTSP, Variant.MOTSPTW)

    @property
    def orienteering(self) -> bool:
        return self in (Variant.OP, Variant.MOOP)

    @property
    def depot_based(self) -> bool:
        return self in (Variant.MOCVRP, Variant.MOTSPTW, Variant.OP, Variant.MOOP)

    @property
    def objective_dim(self) -> int:
        return 2 if self.multi_objective else 1

    @property
    def required_node_attrs(self) -> tuple[str, ...]:
        return {
            Variant.OP: ("prize",),
            Variant.MOOP: ("prize",),
            Variant.MOCVRP: ("demand",),
            Variant.MOTSPTW: ("tw_open", "tw_close"),
        }.get(self, ())


@dataclass(frozen=True, eq=False)
class MultigraphInstance:
    """Complete directed multigraph with padded parallel edge sets.

    Args:
        attrs: ``(N, N, M, k)`` edge attributes; diagonal and padding slots are zero.
        counts: ``(N, N)`` number of parallel edges per ordered pair, 0 on the diagonal.
        node_attrs: mapping from attribute name to a length-``N`` array.
        depot: index of the depot node.
    """

    attrs: np.ndarray
    counts: np.ndarray
    node_attrs: dict[str, np.ndarray] = field(default_factory=dict)
    depot: int = 0

    def __post_init__(self):
        attrs = np.ascontiguousarray(self.attrs, dtype=np.float64)
        counts = np.ascontiguousarray(self.counts, dtype=np.int64)
        if attrs.ndim != 4 or attrs.shape[0] != attrs.shape[1]:
            raise StructuralError(f"attrs must have shape (N, N, M, k), got {attrs.shape}")
        n, _, m, _ = attrs.shape
        if counts.shape != (n, n):
            raise StructuralError(f"counts must have shape {(n, n)}, got {counts.shape}")
        off = ~np.eye(n, dtype=bool)
        if np.any(counts[off] < 1) or np.any(counts[off] > m):
            raise StructuralError("every ordered pair u != v needs between 1 and M edges")
        if np.any(np.diag(counts) != 0):
            raise StructuralError("self loops are not allowed")
        valid = np.arange(m)[None, None, :] < counts[:, :, None]
        if not np.all(np.isfinite(attrs)):
            raise StructuralError("edge attributes must be finite")
        if np.any(attrs[valid] < 0):
            raise StructuralError("edge attributes must be non-negative")
        attrs = np.where(valid[..., None], attrs, 0.0)
        node_attrs = {}
        for key, val in dict(self.node_attrs or {}).items():
            arr = np.array(val, dtype=np.float64)
            if arr.shape != (n,):
                raise StructuralError(f"node attribute {key!r} must have shape ({n},)")
            arr.setflags(write=False)
            node_attrs[key] = arr
        attrs.setflags(write=False)
        counts.setflags(write=False)
        object.__setattr__(self, "attrs", attrs)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "node_attrs", node_attrs)

    @property
    def num_nodes(self) -> int:
        return self.attrs.shape[0]

    @property
    def max_edges(self) -> int:
        return self.attrs.shape[2]

    @property
    def attr_dim(self) -> int:
        return self.attrs.shape[3]

    @property
    def edge_mask(self) -> np.ndarray:
        return np.arange(self.max_edges)[None, None, :] < self.counts[:, :, None]

    def edges(self, u: int, v: int) -> np.ndarray:
        """Attribute rows of ``E_uv`` as a ``(count, k)`` view."""
        return self.attrs[u, v, : self.counts[u, v]]

    @property
    def edge_sets(self) -> dict[tuple[int, int], np.ndarray]:
        n = self.num_nodes
        return {(u, v): self.edges(u, v) for u in range(n) for v in range(n) if u != v}

    def with_node_attrs(self, **extra: Sequence[float]) -> "MultigraphInstance":
        merged = dict(self.node_attrs)
        merged.update({k: np.asarray(v, dtype=np.float64) for k, v in extra.items()})
        return MultigraphInstance(self.attrs, self.counts, merged, self.depot)

    def scaled(self, factors: Sequence[float]) -> "MultigraphInstance":
        """Copy with edge attribute ``i`` multiplied by ``factors[i]``."""
        f = np.asarray(factors, dtype=np.float64)
        return MultigraphInstance(self.attrs * f, self.counts, self.node_attrs, self.depot)

    @classmethod
    def from_edge_lists(
        cls,
        n: int,
        edges: Iterable[tuple[int, int, Sequence[float]]],
        node_attrs: dict[str, Sequence[float]] | None = None,
        depot: int = 0,
    ) -> "MultigraphInstance":
        grouped: dict[tuple[int, int], list[Sequence[float]]] = {}
        k = None
        for u, v, a in edges:
            grouped.setdefault((int(u), int(v)), []).append(a)
            k = len(a) if k is None else k
            if len(a) != k:
                raise StructuralError("inconsistent edge attribute length")
        if k is None:
            raise StructuralError("no edges given")
        m = max(len(lst) for lst in grouped.values())
        attrs = np.zeros((n, n, m, k))
        counts = np.zeros((n, n), dtype=np.int64)
        for (u, v), lst in grouped.items():
            if not (0 <= u < n and 0 <= v < n):
                raise StructuralError(f"edge ({u}, {v}) out of range")
            attrs[u, v, : len(lst)] = lst
            counts[u, v] = len(lst)
        return cls(attrs, counts, node_attrs or {}, depot)


@dataclass(frozen=True)
class Route:
    """Node sequence plus one edge index per consecutive pair.

    The single exception is the empty orienteering route ``(depot, depot)``
    whose edge index refers to a virtual zero-cost stay at the depot.
    """

    nodes: tuple[int, ...]
    edges: tuple[int, ...]

    def __init__(self, nodes: Sequence[int], edges: Sequence[int]):
        object.__setattr__(self, "nodes", tuple(int(x) for x in nodes))
        object.__setattr__(self, "edges", tuple(int(x) for x in edges))

    def to_json(self) -> dict[str, list[int]]:
        return {"pi": list(self.nodes), "eps": list(self.edges)}

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "Route":
        return cls(obj["pi"], obj["eps"])


@dataclass(frozen=True)
class ProblemSpec:
    """Variant tag plus the parameters the evaluator and generators need."""

    variant: Variant
    resource_limit: float | None = None
    thresholds: tuple[float, float] | None = None
    capacity: float | None = None
    hv_reference: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        for name in ("resource_limit", "capacity"):
            val = getattr(self, name)
            if val is not None and not val >= 0:
                raise SpecMismatch(f"{name} must be non-negative, got {val}")
        if self.thresholds is not None:
            t = tuple(float(x) for x in self.thresholds)
            if len(t) != 2 or min(t) < 0:
                raise SpecMismatch("thresholds must be two non-negative values")
            object.__setattr__(self, "thresholds", t)
        if self.hv_reference is not None:
            object.__setattr__(self, "hv_reference", tuple(float(x) for x in self.hv_reference))
        need = {
            Variant.RCTSP: "resource_limit",
            Variant.MOOP: "resource_limit",
            Variant.OP: "thresholds",
            Variant.MOCVRP: "capacity",
        }.get(self.variant)
        if need and getattr(self, need) is None:
            raise SpecMismatch(f"{self.variant.value} requires {need}")

    @property
    def objective_dim(self) -> int:
        return self.variant.objective_dim

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {"variant": self.variant.value}
        for name in ("resource_limit", "thresholds", "capacity", "hv_reference"):
            val = getattr(self, name)
            if val is not None:
                out[name] = list(val) if isinstance(val, tuple) else val
        return out

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "ProblemSpec":
        kw = dict(obj)
        for name in ("thresholds", "hv_reference"):
            if kw.get(name) is not None:
                kw[name] = tuple(kw[name])
        return cls(**kw)


@dataclass
class RouteEvaluation:
    objectives: np.ndarray
    resource_usage: np.ndarray
    violation: float
    feasible: bool
    state_trace: np.ndarray


def _check_node_attrs(instance: MultigraphInstance, spec: ProblemSpec) -> None:
    missing = [k for k in spec.variant.required_node_attrs if k not in instance.node_attrs]
    if missing:
        raise SpecMismatch(f"{spec.variant.value} instance lacks node attributes {missing}")


def is_empty_orienteering(route: Route, instance: MultigraphInstance) -> bool:
    d = instance.depot
    return route.nodes == (d, d)


def validate_route(instance: MultigraphInstance, spec: ProblemSpec, route: Route) -> None:
    """Raise :class:`StructuralError` unless ``route`` is well formed for ``spec``."""
    nodes, eps = route.nodes, route.edges
    n, depot, variant = instance.num_nodes, instance.depot, spec.variant
    if len(nodes) < 2:
        raise StructuralError("a route needs at least two node positions")
    if len(eps) != len(nodes) - 1:
        raise StructuralError(f"expected {len(nodes) - 1} edge indices, got {len(eps)}")
    if any(not 0 <= x < n for x in nodes):
        raise StructuralError("node index out of range")
    if variant.orienteering and nodes == (depot, depot):
        if eps != (0,):
            raise StructuralError("the empty route uses edge index 0")
        return
    for t, (u, v) in enumerate(zip(nodes[:-1], nodes[1:])):
        if u == v:
            raise StructuralError(f"repeated node {u} at position {t}")
        if not 0 <= eps[t] < instance.counts[u, v]:
            raise StructuralError(f"edge index {eps[t]} invalid for pair ({u}, {v})")
    if variant.tour:
        if nodes[0] != nodes[-1]:
            raise StructuralError("tour must close at its first node")
        body = nodes[:-1]
        if sorted(body) != list(range(n)):
            raise StructuralError("tour must visit every node exactly once")
        if variant is Variant.MOTSPTW and nodes[0] != depot:
            raise StructuralError("time-window tours start at the depot")
    else:
        if nodes[0] != depot or nodes[-1] != depot:
            raise StructuralError("route must start and end at the depot")
        customers = [x for x in nodes if x != depot]
        if len(set(customers)) != len(customers):
            raise StructuralError("customer visited twice")
        if variant is Variant.MOCVRP and sorted(customers) != [x for x in range(n) if x != depot]:
            raise StructuralError("every customer must be visited")


def _arc_attrs(instance: MultigraphInstance, route: Route) -> np.ndarray:
    u = np.asarray(route.nodes[:-1])
    v = np.asarray(route.nodes[1:])
    return instance.attrs[u, v, np.asarray(route.edges)]


def evaluate_route(instance: MultigraphInstance, spec: ProblemSpec, route: Route) -> RouteEvaluation:
    """Objectives, constraint accounting and per-position state of a route.

    Sums run left to right along the route so repeated evaluation of the
    same selection is bit-identical.
    """
    _check_node_attrs(instance, spec)
    validate_route(instance, spec, route)
    variant = spec.variant
    nodes = route.nodes
    T = len(nodes)
    if variant.orienteering and is_empty_orienteering(route, instance):
        arcs = np.zeros((1, instance.attr_dim))
    else:
        arcs = _arc_attrs(instance, route)

    # cumulative attribute sums; trace[t] is the state on arrival at position t
    cum = np.zeros((T, instance.attr_dim))
    acc = np.zeros(instance.attr_dim)
    for t in range(T - 1):
        acc = acc + arcs[t]
        cum[t + 1] = acc
    totals = cum[-1]

    if variant is Variant.MOTSP:
        return RouteEvaluation(totals.copy(), totals.copy(), 0.0, True, cum)

    if variant is Variant.RCTSP:
        usage = float(totals[1])
        viol = max(0.0, usage - spec.resource_limit)
        return RouteEvaluation(
            np.array([totals[0]]), np.array([usage]), viol, viol == 0.0, cum[:, 1:2].copy()
        )

    if variant in (Variant.OP, Variant.MOOP):
        prize = instance.node_attrs["prize"]
        collected = 0.0
        for x in nodes:
            if x != instance.depot:
                collected += prize[x]
        total_prize = float(np.sum(np.delete(prize, instance.depot)))
        if variant is Variant.OP:
            t1, t2 = spec.thresholds
            viol = max(0.0, totals[0] - t1) + max(0.0, totals[1] - t2)
            return RouteEvaluation(
                np.array([total_prize - collected]), totals.copy(), float(viol), viol == 0.0, cum
            )
        usage = float(totals[1])
        viol = max(0.0, usage - spec.resource_limit)
        if viol > 0.0:
            collected = 0.0
        return RouteEvaluation(
            np.array([total_prize - collected, totals[0]]),
            np.array([usage]),
            viol,
            viol == 0.0,
            cum[:, 1:2].copy(),
        )

    if variant is Variant.MOCVRP:
        demand = instance.node_attrs["demand"]
        load = 0.0
        viol = 0.0
        trace = np.zeros((T, 1))
        for t, x in enumerate(nodes):
            if x == instance.depot:
                viol += max(0.0, load - spec.capacity)
                load = 0.0
            else:
                load += demand[x]
            trace[t, 0] = load
        return RouteEvaluation(totals.copy(), trace[:, 0].max(keepdims=True), viol, viol == 0.0, trace)

    if variant is Variant.MOTSPTW:
        close = instance.node_attrs["tw_close"]
        clock = 0.0
        late = 0
        trace = np.zeros((T, 1))
        for t in range(1, T):
            clock += arcs[t - 1, 1]
            trace[t, 0] = clock
            x = nodes[t]
            if x != instance.depot and clock > close[x]:
                late += 1
        return RouteEvaluation(np.array([float(late), totals[0]]), np.array([clock]), 0.0, True, trace)

    raise SpecMismatch(f"unsupported variant {variant}")


def cheapest_edge_matrix(instance: MultigraphInstance, weights: Sequence[float]) -> np.ndarray:
    """``out[u, v] = min_l weights . e_l`` over ``E_uv``; zero diagonal."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (instance.attr_dim,):
        raise SpecMismatch(f"weights must have length {instance.attr_dim}")
    if np.any(w < 0):
        raise SpecMismatch("weights must be non-negative")
    scal = instance.attrs @ w
    scal = np.where(instance.edge_mask, scal, np.inf)
    out = scal.min(axis=2)
    np.fill_diagonal(out, 0.0)
    return out


def cheapest_edge_index(instance: MultigraphInstance, weights: Sequence[float]) -> np.ndarray:
    """Index of the lowest-scalarized edge per pair; ties go to the lowest index."""
    w = np.asarray(weights, dtype=np.float64)
    scal = np.where(instance.edge_mask, instance.attrs @ w, np.inf)
    idx = scal.argmin(axis=2)
    np.fill_diagonal(idx, 0)
    return idx


# --- JSON interchange -----------------------------------------------------


def _finite_or_none(x: float) -> float | None:
    return None if not math.isfinite(x) else float(x)


def instance_to_json(instance: MultigraphInstance, spec: ProblemSpec | None = None) -> dict[str, Any]:
    n = instance.num_nodes
    edges = [
        [u, v, [float(a) for a in row]]
        for u in range(n)
        for v in range(n)
        if u != v
        for row in instance.edges(u, v)
    ]
    node_attrs = {k: [_finite_or_none(x) for x in v] for k, v in instance.node_attrs.items()}
    out: dict[str, Any] = {"n": n, "attr_dim": instance.attr_dim, "edges": edges, "node_attrs": node_attrs}
    if instance.depot != 0:
        out["depot"] = instance.depot
    if spec is not None:
        out["spec"] = spec.to_json()
    return out


def instance_from_json(obj: dict[str, Any]) -> tuple[MultigraphInstance, ProblemSpec | None]:
    node_attrs = {
        k: [math.inf if x is None else x for x in v] for k, v in obj.get("node_attrs", {}).items()
    }
    inst = MultigraphInstance.from_edge_lists(obj["n"], obj["edges"], node_attrs, obj.get("depot", 0))
    if inst.attr_dim != obj.get("attr_dim", inst.attr_dim):
        raise StructuralError("attr_dim does not match the edge lists")
    spec = ProblemSpec.from_json(obj["spec"]) if obj.get("spec") else None
    return inst, spec


def save_instance(path, instance: MultigraphInstance, spec: ProblemSpec | None = None) -> None:
    with open(path, "w") as fh:
        json.dump(instance_to_json(instance, spec), fh)


def load_instance(path) -> tuple[MultigraphInstance, ProblemSpec | None]:
    with open(path) as fh:
        return instance_from_json(json.load(fh))
