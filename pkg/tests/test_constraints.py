from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qbsde.constraints import (
    MEMBERSHIP_TOL,
    Ball,
    Box,
    FinitePointSet,
    FullSpace,
    HalfSpace,
    Polytope,
    TimeDependent,
    UnionOfConvex,
    argmax_consumption_log,
    argmax_consumption_power,
    min_norm_point,
    project,
    project_many,
    scale,
)
from qbsde.errors import EmptySet, NoFeasiblePoint, NoFeasiblePositivePoint, ShapeMismatch

# --- listed examples ------------------------------------------------------------


def test_fullspace_identity():
    res = project([3.0, -1.0], FullSpace(2))
    assert np.allclose(res.nearest, [3, -1]) and res.distance == 0 and res.unique


def test_box_clipping():
    res = project([2.0, 0.0], Box([-1, -1], [1, 1]))
    assert np.allclose(res.nearest, [1, 0]) and res.distance == pytest.approx(1.0)


def test_finite_points_nearest_and_tie_break():
    pts = FinitePointSet([[0, 0], [2, 0]])
    a = project([0.9, 0], pts)
    assert np.allclose(a.nearest, [0, 0]) and a.distance == pytest.approx(0.9) and a.unique
    assert np.allclose(project([1.1, 0], pts).nearest, [2, 0])
    tie = project([1.0, 0], pts)
    assert np.allclose(tie.nearest, [0, 0]) and not tie.unique


def test_scale_examples():
    assert scale(Box([0], [1]), 1.0) is not None
    b = scale(Ball([0.0], 2.0), 0.5)
    assert isinstance(b, Ball) and b.radius == 1.0
    # h(0) = 1/(1 + T) = 0.5 for r = 0, T = 1
    box = scale(Box([0.0], [1.0]), 0.5)
    assert np.allclose(box.lower, [0]) and np.allclose(box.upper, [0.5])
    with pytest.raises(ValueError):
        scale(Box([0], [1]), 0.0)


def test_log_argmax_examples():
    c, v = argmax_consumption_log(FullSpace(1), 2.0)
    assert c == 2.0 and v == pytest.approx(2 * (math.log(2) - 1))
    c, v = argmax_consumption_log(Box([3.0], [5.0]), 2.0)
    assert c == 3.0 and v == pytest.approx(2 * math.log(3) - 3)
    c, v = argmax_consumption_log(FinitePointSet([1.0, math.e]), 1.0)
    assert c == 1.0 and v == pytest.approx(-1.0)


def test_power_argmax_examples():
    c, v = argmax_consumption_power(FullSpace(1), 1.0, 0.5, 0.0)
    assert c == pytest.approx(1.0) and v == pytest.approx(1.0)
    c, v = argmax_consumption_power(Box([2.0], [3.0]), 1.0, 0.5, 0.0)
    grid = np.linspace(2, 3, 100_001)
    vals = 2 * np.sqrt(grid) - grid
    assert c == pytest.approx(grid[np.argmax(vals)]) and v == pytest.approx(vals.max())
    c, v = argmax_consumption_power(FullSpace(1), 1.0, -1.0, 0.0)
    assert c == pytest.approx(1.0) and v == pytest.approx(-2.0)


def test_errors():
    with pytest.raises(EmptySet):
        Box([1.0], [0.0])
    with pytest.raises(EmptySet):
        Ball([0.0], -1.0)
    with pytest.raises(EmptySet):
        FinitePointSet(np.zeros((0, 1)))
    with pytest.raises(NoFeasiblePositivePoint):
        argmax_consumption_log(Box([-2.0], [0.0]), 1.0)
    with pytest.raises(NoFeasiblePoint):
        argmax_consumption_power(FinitePointSet([0.0, -1.0]), 1.0, -1.0, 0.0)
    with pytest.raises(ShapeMismatch):
        project([1.0, 2.0, 3.0], Box([0, 0], [1, 1]))


def test_power_zero_consumption_allowed_for_positive_gamma():
    c, v = argmax_consumption_power(FinitePointSet([0.0]), 1.0, 0.5, 0.0)
    assert c == 0.0 and v == 0.0


def test_union_and_time_dependent():
    u = UnionOfConvex([Ball([-1.0, 0.0], 0.5), Box([1.0, -0.5], [2.0, 0.5])])
    assert not u.is_convex
    res = project([0.2, 0.0], u)
    assert np.allclose(res.nearest, [-0.5, 0.0])
    td = TimeDependent([0.0, 0.5], [Box([0.0], [0.1]), Box([0.0], [0.2])])
    assert project([1.0], td, 0.25).nearest[0] == pytest.approx(0.1)
    assert project([1.0], td, 0.75).nearest[0] == pytest.approx(0.2)


def test_polytope_square_matches_box():
    sq = Polytope([[0, 0], [1, 0], [0, 1], [1, 1]])
    box = Box([0, 0], [1, 1])
    q = np.random.default_rng(0).uniform(-2, 3, (200, 2))
    assert np.allclose(project_many(q, sq)[0], project_many(q, box)[0], atol=1e-9)


def test_min_norm_point_simplex():
    # nearest point of the segment [(1, -1), (1, 1)] to the origin is (1, 0)
    w = min_norm_point(np.array([[1.0, -1.0], [1.0, 1.0]]))
    assert np.allclose(w @ np.array([[1.0, -1.0], [1.0, 1.0]]), [1, 0])


# --- property tests -------------------------------------------------------------


def _random_set(kind, d, rng):
    if kind == "box":
        lo = rng.uniform(-1, 0, d)
        hi = lo + rng.uniform(0, 1.5, d)
        hi[rng.random(d) < 0.2] = np.inf
        return Box(lo, hi)
    if kind == "ball":
        return Ball(rng.uniform(-0.5, 0.5, d), rng.uniform(0.1, 1.0))
    if kind == "halfspace":
        return HalfSpace(rng.normal(size=d), rng.uniform(-1, 1))
    if kind == "polytope":
        return Polytope(rng.uniform(-1, 1, (d + 3, d)))
    if kind == "points":
        return FinitePointSet(rng.uniform(-1, 1, (4, d)))
    return UnionOfConvex([_random_set("ball", d, rng), _random_set("box", d, rng)])


KINDS = ["box", "ball", "halfspace", "polytope", "points", "union"]
CONVEX = ["box", "ball", "halfspace", "polytope"]
seeds = st.integers(0, 2**31)


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(KINDS), st.integers(1, 3), seeds)
def test_projection_is_member_and_idempotent(kind, d, seed):
    rng = np.random.default_rng(seed)
    cset = _random_set(kind, d, rng)
    q = rng.uniform(-2, 2, d)
    res = project(q, cset)
    assert res.distance == pytest.approx(np.linalg.norm(q - res.nearest), abs=1e-12)
    again = project(res.nearest, cset)
    assert again.distance <= 1e-9
    assert np.allclose(again.nearest, res.nearest, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(CONVEX), st.integers(1, 3), seeds)
def test_convex_projection_is_nonexpansive(kind, d, seed):
    rng = np.random.default_rng(seed)
    cset = _random_set(kind, d, rng)
    q1, q2 = rng.uniform(-2, 2, (2, d))
    p1, p2 = project(q1, cset).nearest, project(q2, cset).nearest
    assert np.linalg.norm(p1 - p2) <= np.linalg.norm(q1 - q2) + 1e-9


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(CONVEX), st.integers(1, 3), seeds)
def test_convex_projection_variational_inequality(kind, d, seed):
    # (q - p) . (x - p) <= 0 for every member x; members sampled by projecting random points
    rng = np.random.default_rng(seed)
    cset = _random_set(kind, d, rng)
    q = rng.uniform(-2, 2, d)
    p = project(q, cset).nearest
    members = project_many(rng.uniform(-2, 2, (50, d)), cset)[0]
    assert np.all((members - p) @ (q - p) <= 1e-8)


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(KINDS), st.integers(1, 3), seeds, st.floats(0.1, 5.0))
def test_scale_identity(kind, d, seed, lam):
    rng = np.random.default_rng(seed)
    cset = _random_set(kind, d, rng)
    q = rng.uniform(-2, 2, d)
    lhs = project(q, scale(cset, lam))
    rhs = project(q / lam, cset)
    assert np.allclose(lhs.nearest, lam * rhs.nearest, atol=1e-9)
    assert lhs.distance == pytest.approx(lam * rhs.distance, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(KINDS), st.integers(1, 3), seeds)
def test_distance_bounded_by_designated_member(kind, d, seed):
    rng = np.random.default_rng(seed)
    cset = _random_set(kind, d, rng)
    q = rng.uniform(-2, 2, d)
    pbar = cset.bounded_member()
    assert cset.contains(pbar[None, :], tol=1e-9)
    assert project(q, cset).distance <= np.linalg.norm(q - pbar) + 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 3), seeds)
def test_enlarging_set_never_increases_distance(d, seed):
    rng = np.random.default_rng(seed)
    lo = rng.uniform(-1, 0, d)
    hi = lo + rng.uniform(0, 1, d)
    small, large = Box(lo, hi), Box(lo - rng.uniform(0, 1, d), hi + rng.uniform(0, 1, d))
    q = rng.uniform(-3, 3, d)
    assert project(q, small).distance >= project(q, large).distance - 1e-12


def _brute_log(lo, hi, w):
    grid = np.linspace(max(lo, 1e-6), hi, 200_001)
    vals = w * np.log(grid) - grid
    return vals.max()


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 3.0), st.floats(0.05, 5.0), st.floats(0.1, 3.0))
def test_log_argmax_matches_grid_search(lo, width, w):
    c, v = argmax_consumption_log(Box([lo], [lo + width]), w)
    assert v >= _brute_log(lo, lo + width, w) - 1e-9
    assert v == pytest.approx(w * math.log(c) - c)
    assert lo <= c <= lo + width


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 2.0), st.floats(0.05, 3.0), st.sampled_from([-2.0, -0.5, 0.3, 0.7]), st.floats(-1.0, 1.0))
def test_power_argmax_matches_grid_search_and_bounds(lo, width, gamma, y):
    if gamma < 0:
        lo = max(lo, 0.01)
    alpha = 1.3
    cset = Box([lo], [lo + width])
    c, v = argmax_consumption_power(cset, alpha, gamma, y)
    grid = np.linspace(lo, lo + width, 200_001)
    with np.errstate(divide="ignore"):
        vals = (alpha / gamma) * np.power(grid, gamma) * math.exp(y) - grid
    assert v >= np.max(vals[np.isfinite(vals)]) - 1e-9
    # two-sided bound: dominates any member, dominated by the unconstrained optimum
    d = 1 - gamma
    free = (d / gamma) * alpha ** (1 / d) * math.exp(y / d)
    assert v <= free + 1e-12


def test_argmax_vectorized_over_y():
    ys = np.array([-1.0, 0.0, 1.0])
    c, v = argmax_consumption_power(FullSpace(1), 1.0, 0.5, ys)
    assert c.shape == (3,)
    assert np.allclose(c, np.exp(ys / 0.5))


def test_membership_tolerance_constant():
    assert MEMBERSHIP_TOL == 1e-12
    assert Box([0.0], [1.0]).contains([[1.0 + 1e-13]])
    assert not Box([0.0], [1.0]).contains([[1.0 + 1e-9]])


def test_nonconvex_uniqueness_flag():
    u = UnionOfConvex([Box([-1.0], [-0.5]), Box([0.5], [1.0])])
    assert not project([0.0], u).unique
    assert project([0.1], u).unique
