"""DDPG with a frozen normalizing-flow action stage.

The deterministic policy is actor -> tanh -> latent point in [-1,1]^D ->
flow -> action. Exploration noise is added to the latent (then clipped back
into the flow's trained domain) because that is where the policy lives; the
flow output is executed directly when feasible and projected otherwise, with
every projection and its violation magnitude accounted. Critic targets map
the target actor's latent through the same frozen flow, and the actor's
gradient chains dQ/da through the flow's analytic input Jacobian, so flow
parameters are never touched by training.

A "projection" baseline mode bypasses the flow: the raw tanh action (scaled to
the action box) is projected every step, and the actor update differentiates
the critic at the raw action. That is the classic projection-layer setup,
zero-gradient pathology included.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    AdamState,
    DivergenceError,
    Mlp,
    Tensor,
    as_generator,
    concat,
    load_arrays,
    save_arrays,
    zero_grads,
)


@dataclass
class DdpgConfig:
    gamma: float = 0.99
    tau: float = 0.001
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    batch_size: int = 64
    noise_std: float = 0.1
    buffer_capacity: int = 1_000_000
    warmup_steps: int = 1000
    actor_hidden: tuple = (400, 300)
    critic_hidden: tuple = (400, 300)


@dataclass
class ViolationLedger:
    """Counters for pre-projection infeasibility across a run."""

    act_calls: int = 0
    projected_count: int = 0
    cv_sum: float = 0.0
    episode_returns: list = field(default_factory=list)

    def record(self, was_projected, cv):
        self.act_calls += 1
        if was_projected:
            self.projected_count += 1
        self.cv_sum += cv

    @property
    def mean_cv(self):
        return self.cv_sum / self.act_calls if self.act_calls else 0.0

    @property
    def violation_rate(self):
        return self.projected_count / self.act_calls if self.act_calls else 0.0


class ReplayBuffer:
    """Fixed-capacity ring of (s, a, r, s') records in preallocated arrays."""

    def __init__(self, capacity, state_dim, action_dim):
        self.capacity = int(capacity)
        self.s = np.empty((self.capacity, state_dim))
        self.a = np.empty((self.capacity, action_dim))
        self.r = np.empty(self.capacity)
        self.s2 = np.empty((self.capacity, state_dim))
        self.size = 0
        self.cursor = 0

    def push(self, s, a, r, s2):
        i = self.cursor
        self.s[i] = s
        self.a[i] = a
        self.r[i] = r
        self.s2[i] = s2
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size, rng):
        idx = rng.integers(0, self.size, size=batch_size)
        return self.s[idx], self.a[idx], self.r[idx], self.s2[idx]

    def __len__(self):
        return self.size


def make_actor(state_dim, action_dim, hidden, rng):
    return Mlp([state_dim, *hidden, action_dim], hidden_activation="relu",
               output_activation="tanh", rng=rng)


def make_critic(state_dim, action_dim, hidden, rng):
    return Mlp([state_dim + action_dim, *hidden, 1], hidden_activation="relu",
               output_activation="identity", rng=rng)


def soft_update(target, online, tau=0.001):
    """target <- tau * online + (1 - tau) * target, elementwise."""
    t_params, o_params = target.parameters(), online.parameters()
    if len(t_params) != len(o_params):
        raise ValueError("target and online parameter lists differ")
    for tp, op in zip(t_params, o_params):
        if tp.data.shape != op.data.shape:
            raise ValueError("target and online parameter shapes differ")
        tp.data *= 1.0 - tau
        tp.data += tau * op.data


def act(actor, flow, state, cs, cond=None, noise_std=0.1, rng=None, latent=None):
    """One policy action: latent = clip(actor(s) + noise), action = flow(latent).

    Integer constraint sets decode the flow output onto the lattice before the
    feasibility test; an infeasible result is projected. Returns (latent,
    action, was_projected, pre-projection violation magnitude).
    """
    if latent is None:
        latent = actor.forward_np(np.asarray(state, dtype=np.float64))
        if noise_std > 0:
            latent = latent + as_generator(rng).normal(0.0, noise_std, size=latent.shape)
        latent = np.clip(latent, -1.0, 1.0)
    raw = flow.backward_map(latent, cond)
    action = cs.decode_action(raw)
    was_projected = not cs.is_feasible(action)
    cv = cs.violation_magnitude(raw) if was_projected else 0.0
    if was_projected:
        action = cs.project(raw)
    return latent, action, was_projected, cv


def act_projection(actor, state, cs, noise_std=0.1, rng=None, raw=None):
    """Projection-baseline action: scale tanh output to the box, project if needed."""
    scale = 0.5 * (cs.upper - cs.lower)
    shift = 0.5 * (cs.upper + cs.lower)
    if raw is None:
        raw = actor.forward_np(np.asarray(state, dtype=np.float64))
        if noise_std > 0:
            raw = np.clip(raw + as_generator(rng).normal(0.0, noise_std, size=raw.shape),
                          -1.0, 1.0)
    raw_action = raw * scale + shift
    probe = cs.decode_action(raw_action)
    was_projected = not cs.is_feasible(probe)
    cv = cs.violation_magnitude(raw_action) if was_projected else 0.0
    action = cs.project(raw_action) if was_projected else probe
    return raw_action, action, was_projected, cv


def _cond_batch(cond_of, states, cond_dim):
    if cond_dim == 0:
        return None
    return np.stack([cond_of(s) for s in states])


def critic_update(critic, critic_target, actor_target, flow, batch, gamma, opt,
                  cond_of=None, cond_dim=0, box=None):
    """One Adam step on the mean squared TD error; returns the pre-step loss.

    Targets: y = r + gamma * Q'(s', flow(actor'(s'), s')). Target actions are
    the raw flow output (no projection), matching the execution-time policy up
    to the rare projection fallback. The projection baseline passes flow=None
    and box=(scale, shift): targets then use the scaled raw tanh action.
    """
    s, a, r, s2 = batch
    latent2 = actor_target.forward_np(s2)
    if flow is None:
        scale, shift = box if box is not None else (1.0, 0.0)
        a2 = latent2 * scale + shift
    else:
        a2 = flow.backward_map(latent2, _cond_batch(cond_of, s2, cond_dim))
    q2 = critic_target.forward_np(np.concatenate([s2, a2], axis=1))[:, 0]
    y = r + gamma * q2
    q_t = critic(Tensor(np.concatenate([s, a], axis=1)))
    diff = q_t - Tensor(y[:, None])
    loss = (diff * diff).mean()
    if not np.isfinite(loss.data):
        raise DivergenceError("non-finite critic loss")
    params = critic.parameters()
    zero_grads(params)
    loss.backward()
    opt.step(params)
    return float(loss.data)


def actor_update(actor, critic, flow, states, opt, cond_of=None, cond_dim=0,
                 mode="analytic", box=None):
    """One Adam ascent step on J = mean Q(s, flow(actor(s), s)).

    mode='analytic' chains dQ/da through the flow's explicit input Jacobian
    (the critic and flow parameters see no update); mode='autodiff' builds the
    end-to-end tape instead. mode='raw' differentiates Q at the raw actor
    output (projection baseline: the projection is outside the gradient path).
    """
    n = states.shape[0]
    s_t = Tensor(states)
    cond = _cond_batch(cond_of, states, cond_dim)

    if mode == "analytic":
        latent = actor.forward_np(states)
        action = flow.backward_map(latent, cond)
        a_t = Tensor(action, requires_grad=True)
        q = critic(concat([Tensor(states), a_t], axis=1))
        q.sum().backward()
        dq_da = a_t.grad
        zero_grads(critic.parameters())
        jac = flow.input_gradient(latent, cond)
        cotangent = np.einsum("nd,ndk->nk", dq_da, jac)
        latent_t = actor(s_t)
        pseudo = (latent_t * Tensor(cotangent)).sum() * (-1.0 / n)
        params = actor.parameters()
        zero_grads(params)
        pseudo.backward()
        opt.step(params)
        return

    latent_t = actor(s_t)
    if mode == "autodiff":
        cond_t = Tensor(cond) if cond is not None else None
        action_t = flow.backward_map_t(latent_t, cond_t)
    elif mode == "raw":
        scale, shift = box if box is not None else (1.0, 0.0)
        action_t = latent_t * scale + shift
    else:
        raise ValueError(f"unknown actor update mode '{mode}'")
    q = critic(concat([s_t, action_t], axis=1))
    loss = -1.0 * q.mean()
    params = actor.parameters()
    zero_grads(params)
    loss.backward()
    opt.step(params)
    zero_grads(critic.parameters())
    if flow is not None:
        zero_grads(flow.parameters())


METRIC_COLUMNS = ("step", "episode", "return_ma100", "cum_violations", "mean_cv",
                  "wallclock_s")


def train_run(env, flow, episodes, horizon=None, seed=0, config=None,
              mode="flow", clock=None, collect_raw_feasibility=False):
    """Full DDPG run; returns (ledger, metric rows, actor, critic).

    mode='flow' routes the policy through the frozen flow; mode='projection'
    is the DDPG+Projection baseline (flow unused). Metric rows follow
    METRIC_COLUMNS, one row per episode. All randomness derives from `seed`;
    `clock` is injectable so deterministic tests can pin the wallclock column.
    """
    if mode not in ("flow", "projection"):
        raise ValueError("mode must be 'flow' or 'projection'")
    if mode == "flow" and flow is None:
        raise ValueError("flow mode requires a flow model")
    config = config or DdpgConfig()
    horizon = horizon or env.horizon
    seeds = np.random.SeedSequence(seed).spawn(5)
    net_rng = as_generator(seeds[0].generate_state(1)[0])
    noise_rng = as_generator(seeds[1].generate_state(1)[0])
    buffer_rng = as_generator(seeds[2].generate_state(1)[0])
    warmup_rng = as_generator(seeds[3].generate_state(1)[0])
    env_seed = int(seeds[4].generate_state(1)[0])

    actor = make_actor(env.state_dim, env.action_dim, config.actor_hidden, net_rng)
    critic = make_critic(env.state_dim, env.action_dim, config.critic_hidden, net_rng)
    actor_target = actor.copy()
    critic_target = critic.copy()
    actor_opt = AdamState(actor.parameters(), lr=config.actor_lr)
    critic_opt = AdamState(critic.parameters(), lr=config.critic_lr)

    total_steps = episodes * horizon
    buffer = ReplayBuffer(min(config.buffer_capacity, max(total_steps, 1)),
                          env.state_dim, env.action_dim)
    ledger = ViolationLedger()
    rows = []
    raw_feasibility = []
    if clock is None:
        t0 = time.perf_counter()
        clock = lambda: time.perf_counter() - t0

    cond_of = env.cond_of
    cond_dim = env.cond_dim
    use_flow = mode == "flow"
    step_count = 0
    state = env.reset(seed=env_seed)
    cs0 = env.constraint_of(state)
    box = (0.5 * (cs0.upper - cs0.lower), 0.5 * (cs0.upper + cs0.lower))
    for episode in range(episodes):
        if episode > 0:
            state = env.reset()
        ep_return = 0.0
        for _ in range(horizon):
            step_count += 1
            cs = env.constraint_of(state)
            cond = cond_of(state) if cond_dim else None
            if step_count <= config.warmup_steps:
                if use_flow:
                    lat = warmup_rng.uniform(-1.0, 1.0, size=env.action_dim)
                    _, action, was_projected, cv = act(
                        actor, flow, state, cs, cond, latent=lat)
                else:
                    raw = warmup_rng.uniform(-1.0, 1.0, size=env.action_dim)
                    _, action, was_projected, cv = act_projection(
                        actor, state, cs, raw=raw)
            elif use_flow:
                _, action, was_projected, cv = act(
                    actor, flow, state, cs, cond,
                    noise_std=config.noise_std, rng=noise_rng)
            else:
                _, action, was_projected, cv = act_projection(
                    actor, state, cs, noise_std=config.noise_std, rng=noise_rng)
            ledger.record(was_projected, cv)
            if collect_raw_feasibility:
                raw_feasibility.append(0 if was_projected else 1)
            next_state, reward, _ = env.step(action)
            buffer.push(state, action, reward, next_state)
            state = next_state
            ep_return += reward
            if step_count > config.warmup_steps and len(buffer) >= config.batch_size:
                batch = buffer.sample(config.batch_size, buffer_rng)
                critic_update(critic, critic_target, actor_target,
                              flow if use_flow else None, batch, config.gamma,
                              critic_opt, cond_of, cond_dim, box=box)
                actor_update(actor, critic, flow if use_flow else None,
                             batch[0], actor_opt, cond_of, cond_dim,
                             mode="analytic" if use_flow else "raw", box=box)
                soft_update(critic_target, critic, config.tau)
                soft_update(actor_target, actor, config.tau)
        ledger.episode_returns.append(ep_return)
        ma = float(np.mean(ledger.episode_returns[-100:]))
        rows.append((step_count, episode, ma, ledger.projected_count,
                     ledger.mean_cv, float(clock())))
    result = (ledger, rows, actor, critic)
    return result + (raw_feasibility,) if collect_raw_feasibility else result


def rollout_return(env, policy, episodes, seed=0, horizon=None):
    """Mean undiscounted return of `policy(state, env) -> feasible action`."""
    horizon = horizon or env.horizon
    returns = []
    state = env.reset(seed=seed)
    for episode in range(episodes):
        if episode > 0:
            state = env.reset()
        total = 0.0
        for _ in range(horizon):
            state_next, reward, _ = env.step(policy(state, env))
            total += reward
            state = state_next
        returns.append(total)
    return float(np.mean(returns))


def random_flow_policy(flow, seed=0):
    """Uniform latent through the flow: the 'random feasible' reference policy."""
    rng = as_generator(seed)

    def policy(state, env):
        cs = env.constraint_of(state)
        cond = env.cond_of(state) if env.cond_dim else None
        lat = rng.uniform(-1.0, 1.0, size=env.action_dim)
        raw = flow.backward_map(lat, cond)
        probe = cs.decode_action(raw)
        return probe if cs.is_feasible(probe) else cs.project(raw)

    return policy


def greedy_pointreach_policy():
    """Oracle for PointReach: step straight at the target, speed-limited."""

    def policy(state, env):
        cs = env.constraint_of(state)
        return cs.project(state[2:] - state[:2])

    return policy


def metrics_to_csv(path, rows):
    with open(path, "w") as fh:
        fh.write(",".join(METRIC_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.17g}"


def save_policy(path, actor, critic, meta=None):
    manifest = {"kind": "policy", "actor_dims": actor.layer_dims,
                "critic_dims": critic.layer_dims, "meta": meta or {}}
    arrays = {}
    for tag, net in (("actor", actor), ("critic", critic)):
        for name, arr in net.state_arrays().items():
            arrays[f"{tag}.{name}"] = arr
    save_arrays(path, manifest, arrays)


def load_policy(path):
    manifest, arrays = load_arrays(path)
    if manifest.get("kind") != "policy":
        raise ValueError("not a policy checkpoint")
    actor = Mlp(manifest["actor_dims"], hidden_activation="relu",
                output_activation="tanh", rng=np.random.default_rng(0))
    critic = Mlp(manifest["critic_dims"], hidden_activation="relu",
                 output_activation="identity", rng=np.random.default_rng(0))
    for tag, net in (("actor", actor), ("critic", critic)):
        prefix = f"{tag}."
        net.load_state_arrays({name[len(prefix):]: arr for name, arr in arrays.items()
                               if name.startswith(prefix)})
    return actor, critic
