"""Scalarization, non-dominated archives and 2-D hypervolume."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Iterable, Sequence

import numpy as np


class DimMismatch(ValueError):
    pass


class ReferenceDominated(ValueError):
    """An archive point does not strictly dominate the reference point."""


@dataclass(frozen=True)
class Preference:
    weights: tuple[float, ...]

    def __init__(self, weights: Sequence[float]):
        w = tuple(float(x) for x in weights)
        if any(x < 0 for x in w):
            raise ValueError("preference weights must be non-negative")
        if abs(sum(w) - 1.0) > 1e-12:
            raise ValueError(f"preference weights must sum to 1, got {sum(w)}")
        object.__setattr__(self, "weights", w)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.weights, dtype=dtype)

    def __len__(self):
        return len(self.weights)


def preference_grid(count: int = 101) -> list[Preference]:
    """``count`` evenly spaced bi-objective preferences from (0, 1) to (1, 0)."""
    out = []
    for i in range(count):
        l1 = i / (count - 1) if count > 1 else 0.5
        out.append(Preference((l1, 1.0 - l1)))
    return out


def _as_vectors(objectives, pref, ideal=None):
    c = np.asarray(objectives, dtype=np.float64)
    w = np.asarray(pref, dtype=np.float64)
    if c.shape[-1] != w.shape[-1]:
        raise DimMismatch(f"{c.shape[-1]} objectives vs {w.shape[-1]} weights")
    if ideal is None:
        return c, w, None
    z = np.asarray(ideal, dtype=np.float64)
    if z.shape[-1] != c.shape[-1]:
        raise DimMismatch(f"{c.shape[-1]} objectives vs {z.shape[-1]} ideal values")
    return c, w, z


def chebyshev_cost(objectives, pref, ideal=None):
    """``max_i w_i |C_i - z_i|``; broadcasts over leading axes of ``objectives``."""
    if ideal is None:
        ideal = np.zeros(np.shape(objectives)[-1])
    c, w, z = _as_vectors(objectives, pref, ideal)
    out = np.max(w * np.abs(c - z), axis=-1)
    return float(out) if out.ndim == 0 else out


def linear_cost(objectives, pref):
    c, w, _ = _as_vectors(objectives, pref)
    out = np.sum(w * c, axis=-1)
    return float(out) if out.ndim == 0 else out


def dominates(a, b) -> bool:
    """True when ``a`` is no worse than ``b`` everywhere and better somewhere."""
    a = np.asarray(a)
    b = np.asarray(b)
    return bool(np.all(a <= b) and np.any(a < b))


@dataclass
class ParetoArchive:
    """Mutually non-dominated objective vectors with attached payloads.

    Duplicate objective vectors are kept once (the first payload wins).
    """

    points: list[tuple[np.ndarray, Hashable]] = field(default_factory=list)
    ideal: np.ndarray | None = None

    def __len__(self):
        return len(self.points)

    def objectives(self) -> np.ndarray:
        if not self.points:
            return np.zeros((0, 0 if self.ideal is None else len(self.ideal)))
        return np.array([p for p, _ in self.points])

    def key_set(self) -> set[tuple[float, ...]]:
        return {tuple(p.tolist()) for p, _ in self.points}

    def insert(self, point, payload: Hashable = None) -> bool:
        return pareto_insert(self, point, payload)

    def merge(self, other: "ParetoArchive") -> "ParetoArchive":
        out = ParetoArchive()
        for p, payload in sorted(self.points + other.points, key=lambda x: tuple(x[0].tolist())):
            out.insert(p, payload)
        return out


def pareto_insert(archive: ParetoArchive, point, payload: Hashable = None) -> bool:
    """Insert ``point`` unless something in the archive weakly dominates it.

    Returns whether the point was added. Incumbents it dominates are dropped.
    """
    p = np.asarray(point, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise ValueError("archive points must be finite")
    for q, _ in archive.points:
        if q.shape != p.shape:
            raise DimMismatch("archive points have inconsistent dimension")
        if np.all(q <= p):
            return False
    archive.points = [(q, pl) for q, pl in archive.points if not np.all(p <= q)]
    archive.points.append((p, payload))
    archive.ideal = p.copy() if archive.ideal is None else np.minimum(archive.ideal, p)
    return True


def nondominated(points: Iterable[Sequence[float]]) -> np.ndarray:
    """Unique non-dominated rows of ``points`` (bi-objective sort-and-sweep)."""
    pts = np.unique(np.asarray(list(points), dtype=np.float64).reshape(-1, 2), axis=0)
    if len(pts) == 0:
        return pts
    keep = []
    best2 = np.inf
    for row in pts:  # lexicographic order: rising first objective
        if row[1] < best2:
            keep.append(row)
            best2 = row[1]
    return np.array(keep)


def hypervolume_2d(archive, reference, normalize: bool = True) -> float:
    """Exact dominated area of a bi-objective minimization front.

    With ``normalize`` the area is divided by the box between the origin and
    ``reference``.
    """
    pts = archive.objectives() if isinstance(archive, ParetoArchive) else np.asarray(archive, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if ref.shape != (2,):
        raise DimMismatch("hypervolume_2d needs a 2-D reference point")
    pts = pts.reshape(-1, 2)
    if len(pts) and np.any(pts > ref):
        raise ReferenceDominated("every point must be no worse than the reference")
    front = nondominated(pts) if len(pts) else pts
    area = 0.0
    prev2 = ref[1]
    for x1, x2 in front:
        area += (ref[0] - x1) * (prev2 - x2)
        prev2 = x2
    if normalize:
        area /= float(ref[0] * ref[1])
    return float(area)
