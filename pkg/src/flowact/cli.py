"""Command-line entry point: sample, train-flow, eval-flow, train-rl, compile-pb.

Every subcommand reads an optional JSON config (unknown keys are rejected),
honors --seed and --out overrides, writes all artifacts under the output
directory, and records a manifest.json with the config hash and library
versions. Exit code 0 means the run completed with every internal invariant
check passing; any violation or config error is nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import scipy

from . import __version__
from .autodiff import as_generator
from .constraints import constraint_from_config
from .diagram import (
    BitEncoding,
    DiagramManager,
    Psdd,
    all_actions,
    diagram_to_json,
    sample_actions,
)
from .envs import env_from_config
from .flow import FlowModel, load_flow, save_flow, whitening_transform
from .rl import (
    DdpgConfig,
    metrics_to_csv,
    save_policy,
    train_run,
)
from .samplers import HmcConfig, acceptance_rate, hmc_sample, rejection_sample, save_dataset, load_dataset


class ConfigError(ValueError):
    pass


_ENV_SHORTCUTS = {
    "pointreach": {"name": "pointreach"},
    "bikeshare": {"name": "bikeshare"},
    "weightedlimit": {"name": "weightedlimit"},
}


def _check_keys(cfg, allowed, where):
    unknown = set(cfg) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def _config_hash(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def _write_manifest(out_dir, subcommand, cfg, seed):
    manifest = {
        "subcommand": subcommand,
        "config_hash": _config_hash(cfg),
        "seed": seed,
        "versions": {"flowact": __version__, "numpy": np.__version__,
                     "scipy": scipy.__version__},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)


def _resolve_constraint(cfg):
    """A subcommand may name an env (its constraint is used) or a constraint."""
    if "constraint" in cfg and "env" in cfg:
        raise ConfigError("give either 'env' or 'constraint', not both")
    if "constraint" in cfg:
        return constraint_from_config(cfg["constraint"]), None, np.zeros(0)
    if "env" in cfg:
        env_cfg = cfg["env"]
        if isinstance(env_cfg, str):
            if env_cfg not in _ENV_SHORTCUTS:
                raise ConfigError(f"unknown environment shortcut '{env_cfg}'")
            env_cfg = _ENV_SHORTCUTS[env_cfg]
        try:
            env = env_from_config(env_cfg)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        state = env.reset(seed=0)
        return env.constraint_of(state), env, env.cond_of(state)
    raise ConfigError("config needs an 'env' or 'constraint' entry")


def _eval_threads():
    raw = os.environ.get("FLOWACT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def parallel_accuracy(flow, cs, y, n_samples, seed, threads=None, chunk=20000):
    """accuracy() with fixed chunking so the result is thread-count invariant."""
    threads = threads or _eval_threads()
    starts = list(range(0, n_samples, chunk))
    seeds = np.random.SeedSequence(seed).spawn(len(starts))

    def run_chunk(i):
        n = min(chunk, n_samples - starts[i])
        rng = as_generator(seeds[i].generate_state(1)[0])
        z = rng.uniform(-1.0, 1.0, size=(n, flow.dim))
        x = flow.backward_map(z, y)
        return int(np.count_nonzero(cs.is_feasible(cs.decode_action(x))))

    if threads == 1:
        hits = sum(run_chunk(i) for i in range(len(starts)))
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            hits = sum(pool.map(run_chunk, range(len(starts))))
    return hits / n_samples


# -- subcommands -----------------------------------------------------------------


def cmd_sample(cfg, seed, out_dir):
    allowed = {"method", "env", "constraint", "count", "hmc", "output", "seed",
               "rate_proposals"}
    _check_keys(cfg, allowed, "sample config")
    method = cfg.get("method", "rejection")
    count = int(cfg.get("count", 10000))
    cs, env, cond = _resolve_constraint(cfg)
    out_path = os.path.join(out_dir, cfg.get("output", "dataset.csv"))

    if method == "rejection":
        ds = rejection_sample(cs, cond, count, seed=seed)
        rate = acceptance_rate(cs, n_proposals=int(cfg.get("rate_proposals", 10**6)),
                               seed=seed + 1)
        print(f"rejection: {count} samples, acceptance rate "
              f"{100 * ds.feasible_fraction:.3f}% (monte-carlo {100 * rate:.3f}%)")
    elif method == "hmc":
        hmc_cfg_dict = dict(cfg.get("hmc", {}))
        _check_keys(hmc_cfg_dict, {"step_size", "decay", "n_steps", "burn_in",
                                   "thinning"}, "hmc config")
        ds = hmc_sample(cs, cond, count, HmcConfig(seed=seed, **hmc_cfg_dict))
        valid = float(np.mean(cs.is_feasible(ds.x)))
        print(f"hmc: {count} samples, {100 * valid:.2f}% valid")
        if valid < 1.0:
            return 1
    elif method == "psdd":
        if not cs.integral:
            raise ConfigError("psdd sampling requires an integer constraint set")
        enc, mgr, root = _compile_integer_set(cs, cfg)
        psdd = Psdd(mgr, root)
        ds = sample_actions(psdd, enc, count, seed=seed)
        valid = float(np.mean(cs.is_feasible(ds.x))) if count else 1.0
        print(f"psdd: {count} samples from {psdd.total_models} models, "
              f"{100 * valid:.2f}% valid")
        if valid < 1.0:
            return 1
    else:
        raise ConfigError(f"unknown sampling method '{method}'")
    save_dataset(out_path, ds)
    print(f"dataset written to {out_path}")
    return 0


def _compile_integer_set(cs, cfg):
    # Integer sets built from AllocEq carry (total, cap, dim).
    from .constraints import AllocEq

    if not isinstance(cs, AllocEq):
        raise ConfigError("psdd sampling currently covers allocation constraints")
    bits = int(np.ceil(np.log2(cs.cap + 1)))
    from .diagram import compile_allocation

    return compile_allocation(int(cs.total), int(cs.cap), cs.dim, bits=bits)


def cmd_train_flow(cfg, seed, out_dir):
    allowed = {"dataset", "env", "constraint", "epochs", "batch_size", "lr",
               "hidden", "n_layers", "sigma", "dequantize", "normalize",
               "checkpoint", "nll_csv", "cond_dim", "seed", "log_every"}
    _check_keys(cfg, allowed, "train-flow config")
    if "dataset" not in cfg:
        raise ConfigError("train-flow needs a 'dataset' path")
    ds = load_dataset(cfg["dataset"])
    cs, env, _ = _resolve_constraint(cfg)
    dim = ds.action_dim
    cond_dim = int(cfg.get("cond_dim", ds.cond_dim))

    normalize = cfg.get("normalize", "whiten" if cs.integral else "none")
    rotation = None
    if normalize == "box":
        lo, hi = cs.lower - 0.5, cs.upper + 0.5
        scale, shift = 0.5 * (hi - lo), 0.5 * (hi + lo)
    elif normalize == "whiten":
        pad = 0.5 * np.sqrt(dim) if cs.integral else 0.0
        rotation, scale, shift = whitening_transform(ds.x, pad=pad)
    elif normalize == "none":
        scale = shift = None
    else:
        raise ConfigError("normalize must be 'whiten', 'box', or 'none'")

    flow = FlowModel(dim, cond_dim=cond_dim, n_layers=int(cfg.get("n_layers", 6)),
                     hidden=tuple(cfg.get("hidden", (256, 256))),
                     sigma=float(cfg.get("sigma", 0.01)), seed=seed,
                     output_scale=scale, output_shift=shift,
                     output_rotation=rotation)
    dequantize = bool(cfg.get("dequantize", cs.integral))
    history = flow.train(ds, epochs=int(cfg.get("epochs", 5000)),
                         batch_size=int(cfg.get("batch_size", 5000)),
                         lr=float(cfg.get("lr", 1e-5)), seed=seed,
                         dequantize=dequantize,
                         log_every=cfg.get("log_every"))
    ckpt = os.path.join(out_dir, cfg.get("checkpoint", "flow.json"))
    save_flow(ckpt, flow)
    nll_path = os.path.join(out_dir, cfg.get("nll_csv", "nll.csv"))
    with open(nll_path, "w") as fh:
        fh.write("epoch,nll\n")
        for i, v in enumerate(history):
            fh.write(f"{i},{v:.17g}\n")
    final = history[-1] if history else float("nan")
    print(f"trained {len(history)} epochs, final nll {final:.4f}; "
          f"checkpoint {ckpt}")
    if history and history[-1] > history[0]:
        print("warning: final NLL above initial NLL")
        return 1
    return 0


def cmd_eval_flow(cfg, seed, out_dir):
    allowed = {"checkpoint", "env", "constraint", "n_samples", "reference",
               "metrics_out", "histogram_bins", "seed"}
    _check_keys(cfg, allowed, "eval-flow config")
    if "checkpoint" not in cfg:
        raise ConfigError("eval-flow needs a 'checkpoint' path")
    if not os.path.exists(cfg["checkpoint"]):
        raise ConfigError(f"missing checkpoint {cfg['checkpoint']}")
    flow = load_flow(cfg["checkpoint"])
    cs, env, cond = _resolve_constraint(cfg)
    cond = cond if flow.cond_dim else None
    n_samples = int(cfg.get("n_samples", 100000))

    acc = parallel_accuracy(flow, cs, cond, n_samples, seed)
    recall = None
    if "reference" in cfg:
        ref = load_dataset(cfg["reference"])
        recall = flow.recall(cs, cond, ref)
    dists = flow.invalid_projection_distances(cs, cond, n_samples=n_samples,
                                              seed=seed + 1)
    mean_cv = 0.0
    if len(dists):
        rng = as_generator(seed + 2)
        z = rng.uniform(-1, 1, size=(min(n_samples, 20000), flow.dim))
        x = flow.backward_map(z, cond)
        cv = cs.violation_magnitude(x)
        mean_cv = float(np.mean(cv[cv > 0])) if np.any(cv > 0) else 0.0
    bins = int(cfg.get("histogram_bins", 20))
    top = max(1.0, float(dists.max()) if len(dists) else 1.0)
    counts, edges = np.histogram(dists, bins=bins, range=(0.0, top))
    metrics = {
        "accuracy": acc,
        "recall": recall,
        "mean_cv_of_invalid": mean_cv,
        "n_invalid": int(len(dists)),
        "distance_histogram": {"edges": edges.tolist(), "counts": counts.tolist()},
    }
    out_path = os.path.join(out_dir, cfg.get("metrics_out", "flow_eval.json"))
    with open(out_path, "w") as fh:
        json.dump(metrics, fh, indent=2)
    rec_str = "n/a" if recall is None else f"{recall:.4f}"
    print(f"accuracy {acc:.4f}, recall {rec_str}, invalid {len(dists)}; "
          f"metrics {out_path}")
    return 0


def cmd_train_rl(cfg, seed, out_dir, baseline=None):
    allowed = {"env", "flow_checkpoint", "episodes", "horizon", "ddpg",
               "baseline", "metrics_csv", "policy_out", "seed",
               "deterministic_clock"}
    _check_keys(cfg, allowed, "train-rl config")
    if "env" not in cfg:
        raise ConfigError("train-rl needs an 'env' entry")
    cs, env, _ = _resolve_constraint({"env": cfg["env"]})
    baseline = baseline or cfg.get("baseline", "none")
    if baseline not in ("none", "ddpg-projection"):
        raise ConfigError("baseline must be 'none' or 'ddpg-projection'")
    mode = "projection" if baseline == "ddpg-projection" else "flow"

    flow = None
    if mode == "flow":
        if "flow_checkpoint" not in cfg:
            raise ConfigError("train-rl needs a 'flow_checkpoint' (or a baseline mode)")
        if not os.path.exists(cfg["flow_checkpoint"]):
            raise ConfigError(f"missing flow checkpoint {cfg['flow_checkpoint']}")
        flow = load_flow(cfg["flow_checkpoint"])
        if flow.dim != env.action_dim:
            raise ConfigError("flow action dimension does not match the environment")
        if flow.cond_dim not in (0, env.cond_dim):
            raise ConfigError("flow conditioning dimension does not match the environment")

    ddpg_cfg_dict = dict(cfg.get("ddpg", {}))
    _check_keys(ddpg_cfg_dict, {f.name for f in dataclasses.fields(DdpgConfig)},
                "ddpg config")
    if "actor_hidden" in ddpg_cfg_dict:
        ddpg_cfg_dict["actor_hidden"] = tuple(ddpg_cfg_dict["actor_hidden"])
    if "critic_hidden" in ddpg_cfg_dict:
        ddpg_cfg_dict["critic_hidden"] = tuple(ddpg_cfg_dict["critic_hidden"])
    config = DdpgConfig(**ddpg_cfg_dict)

    checksum = flow.parameter_checksum() if flow is not None else None
    clock = (lambda: 0.0) if cfg.get("deterministic_clock") else None
    t0 = time.perf_counter()
    ledger, rows, actor, critic = train_run(
        env, flow, episodes=int(cfg.get("episodes", 200)),
        horizon=cfg.get("horizon"), seed=seed, config=config, mode=mode,
        clock=clock)
    elapsed = time.perf_counter() - t0

    metrics_path = os.path.join(out_dir, cfg.get("metrics_csv", "metrics.csv"))
    metrics_to_csv(metrics_path, rows)
    policy_path = os.path.join(out_dir, cfg.get("policy_out", "policy.json"))
    save_policy(policy_path, actor, critic,
                meta={"mode": mode, "episodes": len(ledger.episode_returns)})

    ok = True
    if checksum is not None and flow.parameter_checksum() != checksum:
        print("invariant violated: flow parameters changed during training")
        ok = False
    mean_ret = (float(np.mean(ledger.episode_returns[-100:]))
                if ledger.episode_returns else 0.0)
    print(f"{mode} run: {len(ledger.episode_returns)} episodes, "
          f"final-100 mean return {mean_ret:.3f}, "
          f"violations {ledger.projected_count}/{ledger.act_calls}, "
          f"mean cv {ledger.mean_cv:.5f}, {elapsed:.1f}s")
    print(f"metrics {metrics_path}; policy {policy_path}")
    return 0 if ok else 1


def cmd_compile_pb(cfg, seed, out_dir):
    allowed = {"variables", "bits", "layout", "bounds", "constraints",
               "diagram_out", "node_budget", "seed"}
    _check_keys(cfg, allowed, "compile-pb config")
    for key in ("variables", "bits", "constraints"):
        if key not in cfg:
            raise ConfigError(f"compile-pb needs '{key}'")
    enc = BitEncoding(int(cfg["variables"]), int(cfg["bits"]),
                      layout=cfg.get("layout", "blocked"))
    manager = DiagramManager(enc.n_bool,
                             node_budget=int(cfg.get("node_budget", 2_000_000)))
    parts = []
    for i, raw in enumerate(cfg["constraints"]):
        _check_keys(raw, {"coeffs", "op", "threshold"}, f"constraint {i}")
        op = raw.get("op", "le")
        if op not in ("le", "eq"):
            raise ConfigError(f"constraint {i}: op must be 'le' or 'eq'")
        parts.append(manager.compile_pb(
            enc.pb_from_linear(raw["coeffs"], op, raw["threshold"])))
    bounds = cfg.get("bounds")
    if bounds is not None:
        if np.isscalar(bounds):
            bounds = [bounds] * enc.n_vars
        for var, upper in enumerate(bounds):
            parts.append(manager.compile_pb(enc.bound_constraint(var, upper)))
    root = manager.conjoin_all(parts)
    n_nodes = manager.n_nodes(root)
    models = manager.model_count(root)
    out_path = os.path.join(out_dir, cfg.get("diagram_out", "diagram.json"))
    with open(out_path, "w") as fh:
        json.dump(diagram_to_json(manager, root), fh)
    print(f"nodes {n_nodes} models {models}")
    print(f"diagram {out_path}")
    return 0 if models > 0 else 1


# -- argument parsing ----------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="flowact",
        description="Feasible-action sampling, flow training, and constrained DDPG.")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in ("sample", "train-flow", "eval-flow", "train-rl", "compile-pb"):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config path")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default="flowact_out")
        if name == "sample":
            p.add_argument("--method", default=None,
                           choices=("rejection", "hmc", "psdd"))
            p.add_argument("--env", default=None)
            p.add_argument("--count", type=int, default=None)
        if name == "train-rl":
            p.add_argument("--baseline", default=None,
                           choices=("none", "ddpg-projection"))
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args.config)
        if not isinstance(cfg, dict):
            raise ConfigError("config root must be a JSON object")
        if args.subcommand == "sample":
            if args.method:
                cfg["method"] = args.method
            if args.env:
                cfg["env"] = args.env
            if args.count is not None:
                cfg["count"] = args.count
        seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        os.makedirs(args.out, exist_ok=True)
        _write_manifest(args.out, args.subcommand, cfg, seed)
        handler = {
            "sample": cmd_sample,
            "train-flow": cmd_train_flow,
            "eval-flow": cmd_eval_flow,
            "compile-pb": cmd_compile_pb,
        }.get(args.subcommand)
        if handler is not None:
            return handler(cfg, seed, args.out)
        return cmd_train_rl(cfg, seed, args.out, baseline=args.baseline)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
