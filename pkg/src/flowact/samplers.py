"""Uniform sampling from continuous feasible action sets, plus dataset files.

Two samplers: plain rejection from the bounding box, and Hamiltonian
Monte-Carlo with a hard-wall potential (zero energy inside the feasible set,
infinite outside). With zero potential the leapfrog trajectory is a straight
drift and the Metropolis test reduces to "accept iff the terminal point is
feasible", so every state the chain ever occupies is feasible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import as_generator


class SamplingError(RuntimeError):
    pass


class ParseError(ValueError):
    """Malformed dataset file; carries the 1-based line number."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


@dataclass
class HmcConfig:
    """Hard-wall HMC settings.

    decay is the persistent-momentum coefficient: each trajectory refreshes
    p <- decay * p + sqrt(1 - decay^2) * noise, and a rejected trajectory
    negates p so the chain turns back into the feasible region.
    """

    step_size: float = 0.2
    decay: float = 0.9
    n_steps: int = 1
    burn_in: int = 1000
    thinning: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.burn_in < 0 or self.thinning < 0:
            raise ValueError("burn_in and thinning must be nonnegative")
        if not 0.0 <= self.decay < 1.0:
            raise ValueError("decay must lie in [0, 1)")
        if self.n_steps < 1:
            raise ValueError("n_steps must be at least 1")


@dataclass
class SampleDataset:
    """Feasible-action records with their conditioning vectors."""

    x: np.ndarray                     # (count, action_dim)
    y: np.ndarray                     # (count, cond_dim); cond_dim may be 0
    source: str = "rejection"
    feasible_fraction: float = 1.0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.x.ndim != 2 or self.y.ndim != 2:
            raise ValueError("x and y must be 2-d arrays")
        if self.x.shape[0] != self.y.shape[0]:
            raise ValueError("x and y must have the same number of records")
        if not 0.0 <= self.feasible_fraction <= 1.0:
            raise ValueError("feasible_fraction must lie in [0, 1]")

    def __len__(self):
        return self.x.shape[0]

    @property
    def action_dim(self):
        return self.x.shape[1]

    @property
    def cond_dim(self):
        return self.y.shape[1]


def _tile_cond(y, count):
    y = np.zeros(0) if y is None else np.asarray(y, dtype=np.float64).ravel()
    return np.tile(y, (count, 1)) if y.size else np.zeros((count, 0))


def rejection_sample(cs, y, count, seed=0, proposal_cap=None, batch=20000):
    """Draw `count` uniform feasible samples by rejection from the box.

    Integer sets propose on the integer lattice. feasible_fraction records the
    overall acceptance rate; a rate below 1e-6 at the proposal cap aborts with
    a pointer at the HMC / diagram samplers.
    """
    if not np.all(np.isfinite(cs.lower)) or not np.all(np.isfinite(cs.upper)):
        raise SamplingError("rejection sampling needs finite box bounds")
    if proposal_cap is None:
        proposal_cap = max(2 * 10**6, 20000 * count)
    rng = as_generator(seed)
    accepted = []
    n_accepted = 0
    n_proposed = 0
    while n_accepted < count:
        if n_proposed >= proposal_cap:
            rate = n_accepted / max(n_proposed, 1)
            hint = "use hmc_sample (continuous) or the diagram sampler (integer sets)"
            raise SamplingError(
                f"acceptance rate {rate:.2e} after {n_proposed} proposals; {hint}")
        block = min(batch, proposal_cap - n_proposed)
        if cs.integral:
            props = rng.integers(np.rint(cs.lower).astype(np.int64),
                                 np.rint(cs.upper).astype(np.int64) + 1,
                                 size=(block, cs.dim)).astype(np.float64)
        else:
            props = rng.uniform(cs.lower, cs.upper, size=(block, cs.dim))
        mask = cs.is_feasible(props)
        n_proposed += block
        good = props[mask]
        if good.shape[0]:
            accepted.append(good)
            n_accepted += good.shape[0]
    x = np.concatenate(accepted, axis=0)[:count]
    return SampleDataset(x=x, y=_tile_cond(y, count), source="rejection",
                         feasible_fraction=n_accepted / n_proposed)


def acceptance_rate(cs, y=None, n_proposals=10**6, seed=0, batch=50000):
    """Monte-Carlo estimate of the feasible fraction of the bounding box."""
    rng = as_generator(seed)
    hits = 0
    done = 0
    while done < n_proposals:
        block = min(batch, n_proposals - done)
        if cs.integral:
            props = rng.integers(np.rint(cs.lower).astype(np.int64),
                                 np.rint(cs.upper).astype(np.int64) + 1,
                                 size=(block, cs.dim)).astype(np.float64)
        else:
            props = rng.uniform(cs.lower, cs.upper, size=(block, cs.dim))
        hits += int(np.count_nonzero(cs.is_feasible(props)))
        done += block
    return hits / n_proposals


def hmc_sample(cs, y, count, cfg=None):
    """Hard-wall HMC: `count` feasible samples, uniform on C asymptotically.

    The chain starts at the origin (projected into the set if infeasible).
    Intermediate leapfrog positions are never tested; with zero potential the
    momentum is constant along a trajectory, so only the terminal position
    decides acceptance.
    """
    if cfg is None:
        cfg = HmcConfig()
    if cs.integral:
        raise SamplingError("HMC cannot move on integer sets; use the diagram sampler")
    rng = as_generator(cfg.seed)
    x = np.zeros(cs.dim)
    if not cs.is_feasible(x):
        x = cs.project(x)
    if not cs.is_feasible(x):
        raise SamplingError("no feasible starting point found")

    drift = cfg.step_size * cfg.n_steps
    fresh = np.sqrt(1.0 - cfg.decay * cfg.decay)
    keep_every = max(cfg.thinning, 1)
    total = cfg.burn_in + count * keep_every
    out = np.empty((count, cs.dim))
    kept = 0
    p = rng.standard_normal(cs.dim)
    for it in range(total):
        p = cfg.decay * p + fresh * rng.standard_normal(cs.dim)
        proposal = x + drift * p
        if cs.is_feasible(proposal):
            x = proposal
        else:
            p = -p
        if it >= cfg.burn_in and (it - cfg.burn_in) % keep_every == keep_every - 1:
            out[kept] = x
            kept += 1
    assert kept == count
    return SampleDataset(x=out, y=_tile_cond(y, count), source="hmc",
                         feasible_fraction=1.0)


def merge_datasets(datasets):
    """Concatenate datasets that share dimensions and source tag."""
    if not datasets:
        raise ValueError("nothing to merge")
    source = datasets[0].source
    x = np.concatenate([d.x for d in datasets], axis=0)
    y = np.concatenate([d.y for d in datasets], axis=0)
    frac = float(np.mean([d.feasible_fraction for d in datasets]))
    return SampleDataset(x=x, y=y, source=source, feasible_fraction=frac)


# -- dataset files --------------------------------------------------------------
#
# Header line: cond_dim,action_dim,source,count,feasible_fraction
# then one CSV row per record: cond fields followed by action fields.
# Floats are written with 17 significant digits, which round-trips float64
# exactly.

def save_dataset(path, ds):
    if not isinstance(ds, SampleDataset):
        raise TypeError("expected a SampleDataset")
    if ds.x.ndim != 2 or ds.y.ndim != 2 or ds.x.shape[0] != ds.y.shape[0]:
        raise ValueError("dataset records have inconsistent dimensions")
    with open(path, "w") as fh:
        fh.write(f"{ds.cond_dim},{ds.action_dim},{ds.source},{len(ds)},"
                 f"{ds.feasible_fraction:.17g}\n")
        for yi, xi in zip(ds.y, ds.x):
            row = [f"{v:.17g}" for v in yi] + [f"{v:.17g}" for v in xi]
            fh.write(",".join(row) + "\n")


def load_dataset(path):
    with open(path) as fh:
        header = fh.readline()
        if not header:
            raise ParseError("empty file", line=1)
        parts = header.strip().split(",")
        if len(parts) != 5:
            raise ParseError(f"expected 5 header fields, got {len(parts)}", line=1)
        try:
            dy, dx, count = int(parts[0]), int(parts[1]), int(parts[3])
            frac = float(parts[4])
        except ValueError as exc:
            raise ParseError(str(exc), line=1) from None
        source = parts[2]
        y = np.empty((count, dy))
        x = np.empty((count, dx))
        for i in range(count):
            line = fh.readline()
            if not line:
                raise ParseError("unexpected end of file", line=i + 2)
            fields = line.strip().split(",")
            if len(fields) != dy + dx:
                raise ParseError(f"expected {dy + dx} fields, got {len(fields)}",
                                 line=i + 2)
            try:
                vals = [float(v) for v in fields]
            except ValueError as exc:
                raise ParseError(str(exc), line=i + 2) from None
            y[i] = vals[:dy]
            x[i] = vals[dy:]
        if fh.readline().strip():
            raise ParseError("trailing data after declared record count",
                             line=count + 2)
    return SampleDataset(x=x, y=y, source=source, feasible_fraction=frac)
