"""Command-line entry points: benchmark runs, the environment-optimal
reference, and the trajectory-dump diagnostic.

Configuration precedence per field: built-in task preset, then a YAML config
file, then explicit command-line flags.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .envs import make_env
from .errors import InvalidInputError
from .harness import (
    ExperimentConfig,
    aggregate,
    emit_csv,
    evaluate_policy,
    fit_model,
    collect_random,
    make_config,
    observation_init,
    random_baseline,
    reference_policy,
    run_suite,
    sample_eval_starts,
    box_policy,
)
from .models.io import save_model
from .numerics import RngStream
from .rollout import trajectories_to_csv, ts_rollout


def _add_common(parser):
    parser.add_argument("--task", required=True, choices=["p", "cmc", "ipsu", "idp"])
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", type=Path, default=Path("."))
    parser.add_argument("--config", type=Path, default=None,
                        help="YAML file with ExperimentConfig fields")


_FLAG_FIELDS = {
    "particles": "n_particles",
    "iterations": "iterations",
    "repeats": "repeats",
    "seed": "seed",
}


def _load_config(args, model: str, prop: str) -> ExperimentConfig:
    overrides = {}
    if args.config is not None:
        loaded = yaml.safe_load(args.config.read_text()) or {}
        if not isinstance(loaded, dict):
            raise InvalidInputError("config file must hold a mapping")
        loaded.pop("task", None)
        loaded.pop("model", None)
        loaded.pop("propagation", None)
        overrides.update(loaded)
    for flag, field in _FLAG_FIELDS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[field] = value
    return make_config(args.task, model, prop, **overrides)


def _write_manifest(out: Path, cfg: ExperimentConfig, extra: dict) -> None:
    import jax

    manifest = {
        "config": dataclasses.asdict(cfg),
        "seed": cfg.seed,
        "versions": {
            "package": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "jax": jax.__version__,
        },
    }
    manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _cmd_run(args) -> int:
    cfg = _load_config(args, args.model, args.prop)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()

    def progress(repeat, iteration, samples, reward):
        print(f"[repeat {repeat}] iter {iteration:3d}  samples {samples:5d}  "
              f"avg reward {reward:+.4f}", flush=True)

    records, _ = run_suite(cfg, progress=progress)
    for rec in records:
        if rec.error is not None:
            print(f"warning: a repeat aborted early: {rec.error}", file=sys.stderr)
    summary = aggregate(records)
    name = f"{cfg.task.lower()}_{cfg.model}_{cfg.propagation}.csv"
    emit_csv(summary, out / name)
    _write_manifest(out, cfg, {
        "command": "run",
        "csv": name,
        "wall_time_s": time.perf_counter() - t0,
        "errors": [rec.error for rec in records],
    })
    print(f"wrote {out / name}")
    return 0


def _cmd_reference(args) -> int:
    cfg = _load_config(args, "gp", "ts")
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()

    policy = reference_policy(cfg)
    spec = make_env(cfg.task)
    starts = sample_eval_starts(spec, cfg.n_eval_starts,
                                RngStream(cfg.seed).substream("eval-starts"))
    reward = evaluate_policy(policy, spec, cfg.n_eval_starts,
                             cfg.eval_horizon, starts)
    baseline = random_baseline(spec, cfg.n_eval_starts, cfg.eval_horizon,
                               starts, RngStream(cfg.seed).substream("random-baseline"))

    save_model(policy, out / f"{cfg.task.lower()}_reference_policy.npz")
    result = {"task": cfg.task, "eval_avg_reward": reward,
              "random_baseline": baseline, "eval_horizon": cfg.eval_horizon}
    (out / f"{cfg.task.lower()}_reference.json").write_text(
        json.dumps(result, indent=2) + "\n")
    _write_manifest(out, cfg, {
        "command": "reference",
        "wall_time_s": time.perf_counter() - t0,
    })
    print(f"reference avg reward {reward:+.4f} (random baseline {baseline:+.4f})")
    return 0


def _cmd_diagnose(args) -> int:
    if not args.dump_trajectories:
        print("nothing to do; pass --dump-trajectories", file=sys.stderr)
        return 2
    cfg = _load_config(args, args.model, "ts")
    out = args.out
    out.mkdir(parents=True, exist_ok=True)

    rng = RngStream(cfg.seed)
    spec = make_env(cfg.task)
    buf = collect_random(spec, cfg.initial_samples, rng.substream("init-data"),
                         cap=cfg.buffer_cap)
    model = fit_model(cfg.model, buf, rng.substream("fit", 1))
    policy = box_policy(cfg.task, cfg.n_basis, spec.u_max,
                        rng.substream("policy-init"))
    init_obs = observation_init(spec, rng.substream("obs-init"))

    result = ts_rollout(model, policy, init_obs, args.steps, args.particles,
                        spec.reward_spec, rng.substream("draws", 1),
                        terminate=spec.terminate, record_states=True)
    path = out / f"{cfg.task.lower()}_{cfg.model}_trajectories.csv"
    trajectories_to_csv(result.states, path)
    _write_manifest(out, cfg, {
        "command": "diagnose",
        "csv": path.name,
        "particles": args.particles,
        "steps": args.steps,
    })
    print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mbps", description="Model-based policy search benchmarks")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train and evaluate one configuration")
    _add_common(run)
    run.add_argument("--model", required=True, choices=["gp", "dgcn", "epnn"])
    run.add_argument("--prop", required=True, choices=["ts", "pf"])
    run.add_argument("--repeats", type=int, default=None)
    run.add_argument("--particles", type=int, default=None)
    run.add_argument("--iterations", type=int, default=None)
    run.add_argument("--preset", choices=["table1"], default="table1")
    run.set_defaults(func=_cmd_run)

    ref = sub.add_parser("reference", help="environment-optimal policy")
    _add_common(ref)
    ref.set_defaults(func=_cmd_reference)

    diag = sub.add_parser("diagnose", help="model rollout diagnostics")
    _add_common(diag)
    diag.add_argument("--model", default="gp", choices=["gp", "dgcn", "epnn"])
    diag.add_argument("--dump-trajectories", action="store_true")
    diag.add_argument("--particles", type=int, default=10_000)
    diag.add_argument("--steps", type=int, default=10)
    diag.set_defaults(func=_cmd_diagnose)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
