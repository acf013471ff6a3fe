"""Desk-scale action-constrained environments.

Each environment owns its PRNG, exposes the usual reset/step pair, and binds a
ConstraintSet to every state via constraint_of. step refuses infeasible
actions outright (the error carries the violation magnitude): valid-action
enforcement is the environment's contract, not the agent's courtesy.

These are analogs of the published benchmark constraint families, not ports:
the constraint structure is preserved while dynamics stay analytic so runs
finish in minutes.
"""

from __future__ import annotations

import numpy as np

from .autodiff import as_generator
from .constraints import AllocEq, Ball, HingeSum, WeightedL1


class InfeasibleActionError(ValueError):
    """Raised when step() receives an action outside C(s)."""

    def __init__(self, message, cv):
        super().__init__(f"{message} (violation magnitude {cv:.6g})")
        self.cv = cv


class PointReach:
    """Move a point toward a target under a quadratic action-norm budget.

    State is (position, target) in [-1,1]^2 each; the action adds to the
    position (clipped back to the box, which also keeps the stated reward
    bounds exact); reward is the negative Euclidean distance to the target.
    """

    state_dim = 4
    action_dim = 2
    cond_dim = 0
    horizon = 50
    gamma = 0.99

    def __init__(self, radius_sq=0.05, seed=0):
        self._cs = Ball(radius_sq, dim=2)
        self._rng = as_generator(seed)
        self._state = None
        self._t = 0

    def reset(self, seed=None):
        if seed is not None:
            self._rng = as_generator(seed)
        pos = self._rng.uniform(-1, 1, size=2)
        target = self._rng.uniform(-1, 1, size=2)
        self._state = np.concatenate([pos, target])
        self._t = 0
        return self._state.copy()

    def constraint_of(self, state):
        return self._cs

    def cond_of(self, state):
        return np.zeros(0)

    def step(self, action):
        action = np.asarray(action, dtype=np.float64)
        cs = self.constraint_of(self._state)
        if not cs.is_feasible(action):
            raise InfeasibleActionError("infeasible action",
                                        cs.violation_magnitude(action))
        pos = np.clip(self._state[:2] + action, -1.0, 1.0)
        target = self._state[2:]
        self._state = np.concatenate([pos, target])
        self._t += 1
        reward = -float(np.linalg.norm(pos - target))
        return self._state.copy(), reward, self._t >= self.horizon


class WeightedLimit:
    """State-conditioned budget constraint over a box action space.

    The weight vector w is resampled uniformly from [-2,2]^D every step and is
    part of the state, so the feasible set genuinely depends on the state (it
    is the conditioning vector for the flow). Reward is sum(a*w) minus a
    quadratic penalty on the running drift of the mean action, which pushes
    the optimum onto the constraint boundary.
    """

    cond_dim: int
    horizon = 50
    gamma = 0.99

    def __init__(self, dim=6, variant="weighted_l1", limit=None, seed=0):
        if variant not in ("weighted_l1", "hinge_sum"):
            raise ValueError("variant must be 'weighted_l1' or 'hinge_sum'")
        self.action_dim = int(dim)
        self.cond_dim = int(dim)
        self.state_dim = int(dim) + 1
        self.variant = variant
        self.limit = float(limit) if limit is not None else (
            20.0 if variant == "weighted_l1" else 10.0)
        self._rng = as_generator(seed)
        self._state = None
        self._t = 0

    def _make_cs(self, w):
        if self.variant == "weighted_l1":
            return WeightedL1(self.limit, w)
        return HingeSum(self.limit, w)

    def reset(self, seed=None):
        if seed is not None:
            self._rng = as_generator(seed)
        w = self._rng.uniform(-2, 2, size=self.action_dim)
        self._state = np.concatenate([w, [0.0]])
        self._t = 0
        return self._state.copy()

    def constraint_of(self, state):
        return self._make_cs(np.asarray(state[:self.action_dim]))

    def cond_of(self, state):
        return np.asarray(state[:self.action_dim], dtype=np.float64).copy()

    def step(self, action):
        action = np.asarray(action, dtype=np.float64)
        cs = self.constraint_of(self._state)
        if not cs.is_feasible(action):
            raise InfeasibleActionError("infeasible action",
                                        cs.violation_magnitude(action))
        w = self._state[:self.action_dim]
        drift = self._state[-1] + float(action.mean())
        reward = float(action @ w) - 0.1 * drift * drift
        w_next = self._rng.uniform(-2, 2, size=self.action_dim)
        self._state = np.concatenate([w_next, [drift]])
        self._t += 1
        return self._state.copy(), reward, self._t >= self.horizon


class BikeShare:
    """Reallocate a fixed fleet across stations against stochastic demand.

    The action is the next allocation (integer, capacity-bounded, summing to
    the fleet size). Demand at each station is Poisson; served bikes are
    returned at uniformly random stations, and any arrivals beyond a station's
    capacity spill over cyclically to the next station with room. Reward is
    the negative unmet demand.
    """

    cond_dim = 0
    horizon = 50
    gamma = 0.99

    def __init__(self, n_stations=5, total=150, cap=35,
                 demand_rates=(40.0, 35.0, 30.0, 25.0, 20.0), seed=0):
        if len(demand_rates) != n_stations:
            raise ValueError("one demand rate per station required")
        self.n_stations = int(n_stations)
        self.total = int(total)
        self.cap = int(cap)
        self.demand_rates = np.asarray(demand_rates, dtype=np.float64)
        self.action_dim = self.n_stations
        self.state_dim = 2 * self.n_stations
        self._cs = AllocEq(self.total, self.cap, self.n_stations)
        self._rng = as_generator(seed)
        self._state = None
        self._t = 0

    def reset(self, seed=None):
        if seed is not None:
            self._rng = as_generator(seed)
        counts = self._cs.feasible_point()
        self._state = np.concatenate([counts, np.zeros(self.n_stations)])
        self._t = 0
        return self._state.copy()

    def constraint_of(self, state):
        return self._cs

    def cond_of(self, state):
        return np.zeros(0)

    def step(self, action):
        action = np.asarray(action, dtype=np.float64)
        if not self._cs.is_feasible(action):
            raise InfeasibleActionError("infeasible allocation",
                                        self._cs.violation_magnitude(action))
        demand = self._rng.poisson(self.demand_rates).astype(np.float64)
        served = np.minimum(action, demand)
        unmet = demand - served
        reward = -float(unmet.sum())
        counts = action - served
        n_returned = int(served.sum())
        if n_returned:
            destinations = self._rng.integers(0, self.n_stations, size=n_returned)
            counts += np.bincount(destinations, minlength=self.n_stations)
        counts = self._spill_overflow(counts)
        self._state = np.concatenate([counts, demand])
        self._t += 1
        return self._state.copy(), reward, self._t >= self.horizon

    def _spill_overflow(self, counts):
        # Push arrivals beyond capacity to the next station with room,
        # scanning cyclically; total capacity exceeds the fleet so this
        # terminates with all stations within bounds.
        counts = counts.copy()
        for i in range(self.n_stations):
            if counts[i] > self.cap:
                excess = counts[i] - self.cap
                counts[i] = self.cap
                j = (i + 1) % self.n_stations
                while excess > 0:
                    room = self.cap - counts[j]
                    moved = min(room, excess)
                    counts[j] += moved
                    excess -= moved
                    j = (j + 1) % self.n_stations
        return counts


def env_from_config(cfg):
    """Build an environment from a JSON-style dict (name + keyword parameters)."""
    if not isinstance(cfg, dict) or "name" not in cfg:
        raise ValueError("environment config must be a dict with a 'name' key")
    params = {k: v for k, v in cfg.items() if k != "name"}
    name = cfg["name"]
    builders = {"pointreach": PointReach, "weightedlimit": WeightedLimit,
                "bikeshare": BikeShare}
    if name not in builders:
        raise ValueError(f"unknown environment '{name}'")
    return builders[name](**params)


def write_trajectory_csv(path, rows):
    """Dump rollout rows: (step, state..., action..., reward, feasible_flag)."""
    with open(path, "w") as fh:
        for row in rows:
            fh.write(",".join(f"{v:.17g}" if isinstance(v, float) else str(v)
                              for v in row) + "\n")
