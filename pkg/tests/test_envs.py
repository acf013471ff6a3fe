import numpy as np
import pytest

from flowact.constraints import AllocEq, Ball, WeightedL1
from flowact.envs import (
    BikeShare,
    InfeasibleActionError,
    PointReach,
    WeightedLimit,
    env_from_config,
)


def test_pointreach_reset_deterministic():
    env = PointReach()
    a = env.reset(seed=3)
    b = env.reset(seed=3)
    assert np.array_equal(a, b)
    assert np.all(np.abs(a) <= 1.0)


def test_pointreach_reward_arithmetic():
    env = PointReach()
    env.reset(seed=0)
    env._state = np.array([0.0, 0.0, 0.0, 1.0])
    _, reward, _ = env.step(np.array([0.0, 0.2]))
    assert abs(reward + 0.8) < 1e-12


def test_pointreach_rejects_infeasible():
    env = PointReach()
    env.reset(seed=1)
    with pytest.raises(InfeasibleActionError) as exc:
        env.step(np.array([0.3, 0.3]))
    assert abs(exc.value.cv - 0.13) < 1e-12


def test_pointreach_constraint_state_independent():
    env = PointReach()
    s = env.reset(seed=2)
    cs = env.constraint_of(s)
    assert isinstance(cs, Ball)
    assert cs.radius_sq == 0.05


def test_pointreach_reward_bounds_and_horizon():
    env = PointReach()
    env.reset(seed=4)
    rng = np.random.default_rng(0)
    done = False
    steps = 0
    while not done:
        a = rng.uniform(-0.1, 0.1, size=2)
        a = env.constraint_of(None).project(a)
        _, r, done = env.step(a)
        steps += 1
        assert -2 * np.sqrt(2) - 1e-12 <= r <= 0.0
    assert steps == 50


def test_pointreach_boundary_action_accepted():
    env = PointReach()
    env.reset(seed=5)
    boundary = np.array([np.sqrt(0.05), 0.0])
    env.step(boundary)  # exactly on the constraint boundary


def test_weightedlimit_reset_range():
    env = WeightedLimit(dim=6)
    s = env.reset(seed=6)
    w = s[:6]
    assert np.all(np.abs(w) <= 2.0)
    assert s[-1] == 0.0


def test_weightedlimit_constraint_binds_state():
    env = WeightedLimit(dim=4, limit=1.0)
    s = env.reset(seed=7)
    cs = env.constraint_of(s)
    assert isinstance(cs, WeightedL1)
    assert np.array_equal(cs.weights, s[:4])
    assert np.array_equal(env.cond_of(s), s[:4])


def test_weightedlimit_step_and_reward():
    env = WeightedLimit(dim=3, limit=100.0)  # effectively unconstrained
    s = env.reset(seed=8)
    w = s[:3]
    a = np.array([0.5, -0.5, 0.25])
    _, reward, _ = env.step(a)
    drift = a.mean()
    assert abs(reward - (a @ w - 0.1 * drift ** 2)) < 1e-12


def test_weightedlimit_hinge_variant():
    env = WeightedLimit(dim=3, variant="hinge_sum", limit=0.5)
    s = env.reset(seed=9)
    cs = env.constraint_of(s)
    a = cs.project(np.ones(3))
    env.step(a)
    with pytest.raises(ValueError):
        WeightedLimit(variant="bogus")


def test_bikeshare_reset_equal_split():
    env = BikeShare()
    s = env.reset(seed=10)
    assert np.array_equal(s[:5], [30, 30, 30, 30, 30])
    assert s[:5].sum() == 150


def test_bikeshare_zero_demand_identity():
    env = BikeShare(demand_rates=(0.0,) * 5)
    env.reset(seed=11)
    alloc = np.array([35.0, 35.0, 35.0, 35.0, 10.0])
    s, reward, _ = env.step(alloc)
    assert reward == 0.0
    assert np.array_equal(s[:5], alloc)


def test_bikeshare_conservation_and_bounds():
    env = BikeShare()
    env.reset(seed=12)
    cs = env.constraint_of(None)
    rng = np.random.default_rng(1)
    done = False
    while not done:
        alloc = cs.project(rng.uniform(0, 35, size=5))
        s, reward, done = env.step(alloc)
        counts = s[:5]
        assert counts.sum() == 150
        assert np.all(counts >= 0) and np.all(counts <= 35)
        assert reward <= 0.0


def test_bikeshare_rejects_bad_allocation():
    env = BikeShare()
    env.reset(seed=13)
    with pytest.raises(InfeasibleActionError):
        env.step(np.array([35.0] * 5))
    with pytest.raises(InfeasibleActionError):
        env.step(np.array([30.5, 29.5, 30.0, 30.0, 30.0]))


def test_bikeshare_constraint():
    env = BikeShare()
    assert isinstance(env.constraint_of(None), AllocEq)


def test_fixed_seed_reproducible_trajectories():
    for make in (lambda: PointReach(), lambda: WeightedLimit(dim=3, limit=50.0),
                 lambda: BikeShare()):
        env1, env2 = make(), make()
        s1, s2 = env1.reset(seed=21), env2.reset(seed=21)
        assert np.array_equal(s1, s2)
        cs = env1.constraint_of(s1)
        rng = np.random.default_rng(2)
        for _ in range(10):
            a = env1.constraint_of(s1).project(
                rng.uniform(-1, 1, size=env1.action_dim) * (35 if isinstance(env1, BikeShare) else 1))
            cs2 = env2.constraint_of(s2)
            s1, r1, d1 = env1.step(a)
            s2, r2, d2 = env2.step(a)
            assert np.array_equal(s1, s2) and r1 == r2 and d1 == d2


def test_trajectory_csv_dump(tmp_path):
    from flowact.envs import write_trajectory_csv

    env = PointReach()
    s = env.reset(seed=30)
    rows = []
    for step in range(3):
        a = env.constraint_of(s).project(np.array([0.1, -0.1]))
        s2, r, _ = env.step(a)
        rows.append((step, *map(float, s), *map(float, a), float(r), 1))
        s = s2
    path = tmp_path / "traj.csv"
    write_trajectory_csv(path, rows)
    lines = path.read_text().strip().split("\n")
    assert len(lines) == 3
    first = lines[0].split(",")
    assert first[0] == "0" and first[-1] == "1"
    assert len(first) == 1 + 4 + 2 + 1 + 1  # step, state, action, reward, flag


def test_env_from_config():
    env = env_from_config({"name": "pointreach", "seed": 5})
    assert isinstance(env, PointReach)
    env = env_from_config({"name": "bikeshare", "total": 150, "cap": 35})
    assert isinstance(env, BikeShare)
    with pytest.raises(ValueError):
        env_from_config({"name": "mujoco"})
    with pytest.raises(TypeError):
        env_from_config({"name": "pointreach", "bogus": 1})
