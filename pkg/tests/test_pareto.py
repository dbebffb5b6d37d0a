import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgroute.core import Variant
from mgroute.instancegen import Distribution, hv_reference
from mgroute.pareto import (
    DimMismatch,
    ParetoArchive,
    Preference,
    ReferenceDominated,
    chebyshev_cost,
    dominates,
    hypervolume_2d,
    linear_cost,
    pareto_insert,
    preference_grid,
)

from oracles import grid_hypervolume


def brute_nondominated(points):
    """O(n^2) dominance filter; duplicates keep one copy."""
    pts = [tuple(p) for p in points]
    out = set()
    for p in pts:
        if not any(all(q[i] <= p[i] for i in range(len(p))) and q != p for q in pts):
            out.add(p)
    return out


def test_chebyshev_examples():
    assert chebyshev_cost([10, 20], Preference((0.5, 0.5)), [0, 0]) == 10
    assert chebyshev_cost([7, 3], Preference((1, 0)), [2, 0]) == 5
    assert chebyshev_cost([3, 4], Preference((0.3, 0.7)), [3, 4]) == 0
    with pytest.raises(DimMismatch):
        chebyshev_cost([1, 2, 3], [0.5, 0.5])


def test_linear_examples():
    assert linear_cost([10, 20], Preference((0.5, 0.5))) == 15
    assert linear_cost([3, 99], Preference((1, 0))) == 3
    rng = np.random.default_rng(0)
    for _ in range(100):
        c = rng.random(2) * 10
        w = rng.dirichlet([1, 1])
        rev = w[1] * c[1] + w[0] * c[0]
        assert abs(linear_cost(c, w) - rev) <= 1e-12
    with pytest.raises(DimMismatch):
        linear_cost([1], [0.5, 0.5])


def test_preference_validation():
    with pytest.raises(ValueError):
        Preference((0.6, 0.6))
    with pytest.raises(ValueError):
        Preference((-0.1, 1.1))
    grid = preference_grid(101)
    assert len(grid) == 101 and grid[0].weights == (0.0, 1.0) and grid[-1].weights == (1.0, 0.0)
    assert grid[37].weights[0] == pytest.approx(0.37)


def test_insert_examples():
    arch = ParetoArchive()
    pareto_insert(arch, (1, 2))
    pareto_insert(arch, (2, 1))
    assert not pareto_insert(arch, (2, 2))
    assert arch.key_set() == {(1.0, 2.0), (2.0, 1.0)}
    assert pareto_insert(arch, (0, 0))
    assert arch.key_set() == {(0.0, 0.0)}
    assert arch.ideal.tolist() == [0.0, 0.0]


def test_insert_matches_quadratic_oracle():
    rng = np.random.default_rng(1)
    pts = np.round(rng.random((1000, 2)), 2)
    arch = ParetoArchive()
    for p in pts:
        pareto_insert(arch, p)
    assert arch.key_set() == brute_nondominated(pts.tolist())
    assert np.all(arch.ideal <= arch.objectives().min(axis=0))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 8), st.integers(0, 8)), min_size=1, max_size=30), st.randoms())
def test_insert_order_independent(points, rnd):
    a, b = ParetoArchive(), ParetoArchive()
    for p in points:
        pareto_insert(a, p)
    shuffled = list(points)
    rnd.shuffle(shuffled)
    for p in shuffled:
        pareto_insert(b, p)
    assert a.key_set() == b.key_set()
    merged = a.merge(b)
    assert merged.key_set() == a.key_set()


def test_hypervolume_examples():
    pts = [(1, 3), (2, 2), (3, 1)]
    assert hypervolume_2d(pts, (4, 4), normalize=False) == 6.0
    assert abs(grid_hypervolume(pts, (4, 4), 10**6) - 6.0) < 1e-2
    assert hypervolume_2d([(4, 4)], (4, 4)) == 0.0
    assert hypervolume_2d(pts, (4, 4)) == 6.0 / 16.0
    with pytest.raises(ReferenceDominated):
        hypervolume_2d([(5, 1)], (4, 4))


def test_hypervolume_matches_grid_on_random_archives():
    rng = np.random.default_rng(2)
    for _ in range(10):
        pts = rng.random((rng.integers(1, 15), 2)) * 3
        ref = (3.0, 3.0)
        exact = hypervolume_2d(pts, ref, normalize=False)
        assert abs(exact - grid_hypervolume(pts, ref, 4 * 10**5)) < 2e-2


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=20), st.tuples(st.floats(0, 1), st.floats(0, 1)))
def test_hypervolume_monotone_under_insertion(points, new):
    arch = ParetoArchive()
    for p in points:
        pareto_insert(arch, p)
    before = hypervolume_2d(arch, (1, 1))
    pareto_insert(arch, new)
    assert hypervolume_2d(arch, (1, 1)) >= before - 1e-15


@settings(max_examples=50, deadline=None)
@given(st.tuples(st.floats(0, 10), st.floats(0, 10)), st.floats(0, 1), st.tuples(st.floats(0, 1), st.floats(0, 1)))
def test_chebyshev_axis_permutation(c, l1, z):
    w = (l1, 1 - l1)
    a = chebyshev_cost(c, w, z)
    b = chebyshev_cost(c[::-1], w[::-1], z[::-1])
    assert a == b


def test_every_archive_point_is_some_preference_optimum():
    rng = np.random.default_rng(3)
    grid = np.array([p.weights for p in preference_grid(101)])
    for _ in range(20):
        arch = ParetoArchive()
        for p in rng.random((30, 2)):
            pareto_insert(arch, p)
        objs = arch.objectives()
        cheb = np.max(grid[:, None, :] * objs[None], axis=-1)  # (101, P)
        best = cheb.min(axis=1, keepdims=True)
        # with a 101-point grid some neighbouring points may tie; allow a grid-resolution slack
        for j in range(len(objs)):
            slack = np.min(cheb[:, j] - best[:, 0])
            assert slack <= 0.01 * objs.max()


def test_dominates():
    assert dominates((1, 1), (1, 2))
    assert not dominates((1, 2), (1, 2))
    assert not dominates((0, 3), (1, 2))


def test_hv_reference_point_values():
    assert hv_reference(Variant.MOTSP, Distribution.FLEX, 100) == (60.0, 60.0)
    assert hv_reference(Variant.MOTSP, Distribution.FIX, 100) == (100.0, 100.0)
    assert hv_reference(Variant.MOOP, Distribution.FLEX, 100) == (50.0, 25.0)
    assert hv_reference(Variant.MOTSPTW, Distribution.FLEX, 100) == (105.0, 60.0)
