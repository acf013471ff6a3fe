import itertools

import numpy as np
import pytest

from flowact.constraints import (
    AffineSet,
    AllocEq,
    Ball,
    BoxOnly,
    HingeSum,
    WeightedL1,
    constraint_from_config,
)


def test_ball_feasibility():
    cs = Ball(0.05)
    assert cs.is_feasible(np.array([0.0, 0.0]))
    assert not cs.is_feasible(np.array([0.3, 0.3]))  # 0.18 > 0.05
    assert cs.is_feasible(np.array([0.1, 0.1]))


def test_alloc_eq_feasibility():
    cs = AllocEq(150, 35, 5)
    assert cs.is_feasible(np.array([30.0] * 5))
    assert not cs.is_feasible(np.array([36.0, 30.0, 30.0, 30.0, 24.0]))
    assert not cs.is_feasible(np.array([30.5, 30.5, 30.0, 30.0, 29.0]))  # non-integer


def test_dimension_mismatch_rejected():
    cs = Ball(0.05)
    with pytest.raises(ValueError):
        cs.is_feasible(np.array([0.1, 0.1, 0.1]))


def test_violation_magnitude_ball():
    cs = Ball(0.05)
    assert abs(cs.violation_magnitude(np.array([0.3, 0.3])) - 0.13) < 1e-12
    assert cs.violation_magnitude(np.array([0.1, 0.1])) == 0.0


def test_violation_magnitude_equality_margin():
    cs = AllocEq(150, 35, 5)
    inside = np.array([30.01] * 5)  # sums to 150.05, within the 0.1 margin
    assert cs.violation_magnitude(inside) == 0.0
    allmax = np.array([35.0] * 5)
    assert abs(cs.violation_magnitude(allmax) - 24.9) < 1e-12


def test_ball_projection_radial():
    cs = Ball(0.05)
    p = cs.project(np.array([1.0, 0.0]))
    assert np.allclose(p, [np.sqrt(0.05), 0.0], atol=1e-9)
    interior = np.array([0.1, 0.1])
    assert np.array_equal(cs.project(interior), interior)


def test_ball_projection_invariants():
    cs = Ball(0.05)
    rng = np.random.default_rng(0)
    pts = rng.uniform(-2, 2, size=(500, 2))
    proj = cs.project(pts)
    norms = np.sum(proj * proj, axis=1)
    assert np.all(norms <= 0.05 + 1e-12)
    outside = np.sum(pts * pts, axis=1) > 0.05
    assert np.all(np.abs(norms[outside] - 0.05) < 1e-12)
    assert np.all(cs.violation_magnitude(proj) == 0.0)


def test_projection_idempotent_all_families():
    rng = np.random.default_rng(1)
    sets = [
        Ball(0.05),
        WeightedL1(1.5, rng.uniform(-2, 2, size=4)),
        HingeSum(0.8, rng.uniform(-2, 2, size=4)),
        AllocEq(150, 35, 5),
    ]
    for cs in sets:
        pts = rng.uniform(-3, 40 if cs.integral else 3, size=(50, cs.dim))
        p1 = cs.project(pts)
        p2 = cs.project(p1)
        assert np.max(np.abs(p2 - p1)) < 1e-9
        cv = cs.violation_magnitude(p1)
        assert np.all(cv == 0.0)
        assert np.all(cs.is_feasible(p1))


def test_weighted_l1_projection_distance_sanity():
    # Projection must beat any feasible candidate from a coarse grid search.
    w = np.array([1.0, 2.0])
    cs = WeightedL1(1.0, w)
    a = np.array([0.9, 0.9])
    p = cs.project(a)
    assert cs.is_feasible(p)
    grid = np.stack(np.meshgrid(np.linspace(-1, 1, 201), np.linspace(-1, 1, 201)), axis=-1).reshape(-1, 2)
    feas = grid[cs.is_feasible(grid)]
    best = feas[np.argmin(np.sum((feas - a) ** 2, axis=1))]
    assert np.sum((p - a) ** 2) <= np.sum((best - a) ** 2) + 1e-4


def test_hinge_sum_projection_matches_grid_oracle():
    w = np.array([2.0, -1.0])
    cs = HingeSum(0.5, w)
    a = np.array([1.0, 0.5])
    p = cs.project(a)
    assert cs.is_feasible(p)
    grid = np.stack(np.meshgrid(np.linspace(-1, 1, 201), np.linspace(-1, 1, 201)), axis=-1).reshape(-1, 2)
    feas = grid[cs.is_feasible(grid)]
    best = feas[np.argmin(np.sum((feas - a) ** 2, axis=1))]
    assert np.sum((p - a) ** 2) <= np.sum((best - a) ** 2) + 1e-4


def test_alloc_projection_against_neighborhood_oracle():
    cs = AllocEq(150, 35, 5)
    a = np.array([35.0] * 5)
    p = cs.project(a)
    assert cs.is_feasible(p)
    # Exhaustive search over integer points within +-2 of the continuous
    # water-filling solution, restricted to the feasible set.
    center = np.rint(cs._project_continuous(a)).astype(int)
    best = None
    for delta in itertools.product(range(-2, 3), repeat=5):
        cand = center + np.array(delta)
        if cand.sum() != 150 or np.any(cand < 0) or np.any(cand > 35):
            continue
        d = np.sum((cand - a) ** 2)
        if best is None or d < best:
            best = d
    assert best is not None
    assert np.sum((p - a) ** 2) <= best + 1e-9


def test_alloc_projection_random_points():
    cs = AllocEq(150, 35, 5)
    rng = np.random.default_rng(3)
    pts = rng.uniform(-10, 45, size=(100, 5))
    proj = cs.project(pts)
    assert np.all(cs.is_feasible(proj))
    assert np.all(np.sum(proj, axis=1) == 150.0)


def test_violation_magnitude_is_locally_lipschitz():
    rng = np.random.default_rng(4)
    for cs in (Ball(0.05), WeightedL1(1.0, np.array([1.0, -2.0, 0.5])),
               HingeSum(0.7, np.array([1.5, -1.0, 2.0]))):
        pts = rng.uniform(-1.5, 1.5, size=(200, cs.dim))
        steps = rng.normal(size=pts.shape) * 1e-4
        cv0 = cs.violation_magnitude(pts)
        cv1 = cs.violation_magnitude(pts + steps)
        lip = 20.0 * np.linalg.norm(steps, axis=1)  # generous slope bound
        assert np.all(np.abs(cv1 - cv0) <= lip)


def test_feasible_points():
    for cs in (Ball(0.05), WeightedL1(1.0, np.ones(3)), HingeSum(1.0, np.ones(3)),
               AllocEq(150, 35, 5), BoxOnly(2, -1, 1)):
        assert cs.is_feasible(cs.feasible_point())


def test_alloc_eq_capacity_validated():
    with pytest.raises(ValueError):
        AllocEq(200, 35, 5)


def test_ball_radius_validated():
    with pytest.raises(ValueError):
        Ball(0.0)


def test_affine_set_from_matrices():
    cs = AffineSet(2, -1, 1, G=[[1.0, 1.0]], g_rhs=[1.0])
    assert cs.is_feasible(np.array([0.2, 0.2]))
    assert not cs.is_feasible(np.array([0.8, 0.8]))
    p = cs.project(np.array([1.0, 1.0]))
    assert cs.is_feasible(p, tol=1e-6)
    assert np.allclose(p, [0.5, 0.5], atol=1e-5)


def test_constraint_from_config():
    cs = constraint_from_config({"family": "ball", "radius_sq": 0.05})
    assert isinstance(cs, Ball)
    cs = constraint_from_config({"family": "alloc_eq", "total": 150, "cap": 35, "n": 5})
    assert isinstance(cs, AllocEq)
    cs = constraint_from_config(
        {"family": "affine", "dim": 2, "G": [[1, 1]], "g_rhs": [1.0]})
    assert isinstance(cs, AffineSet)
    with pytest.raises(ValueError):
        constraint_from_config({"family": "ball", "radius_sq": 0.05, "bogus": 1})
    with pytest.raises(ValueError):
        constraint_from_config({"family": "nope"})
