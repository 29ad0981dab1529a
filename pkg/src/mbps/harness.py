"""Experiment orchestration: the model-learn / policy-optimize / trial loop,
benchmark presets, evaluation protocol, aggregation, and CSV reporting.

The outer loop alternates fitting a dynamics model on the transition buffer,
optimizing the policy against simulated rollouts of that model, and running
one real trial to collect fresh transitions.  Policies are scored on a fixed
set of evaluation starts that is sampled once per suite so every (model,
propagation) combination sees bit-identical initial states.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace

import jax.numpy as jnp
import numpy as np

from .diffopt import Objective, OptimConfig, optimize
from .envs import (
    EnvSpec,
    dynamics_step,
    env_reset,
    env_step,
    make_env,
    observation_box,
    observe,
)
from .errors import InvalidInputError
from .models.dgcn import dgcn_fit
from .models.gp import gp_fit
from .models.pnn import epnn_fit
from .numerics import Gaussian, RngStream, sample_mvn
from .policy import RbfPolicy, policy_action, policy_apply
from .rollout import pf_cost_objective, reward_values, ts_cost_objective

MODELS = ("gp", "dgcn", "epnn")
PROPAGATIONS = ("ts", "pf")

_PRESETS = {
    "CMC": dict(iterations=15, learning_horizon=50, eval_horizon=50,
                n_basis=35, n_particles=100, initial_samples=50),
    "P": dict(iterations=15, learning_horizon=50, eval_horizon=50,
              n_basis=35, n_particles=100, initial_samples=50),
    "IDP": dict(iterations=15, learning_horizon=50, eval_horizon=200,
                n_basis=40, n_particles=100, initial_samples=54),
    "IPSU": dict(iterations=30, learning_horizon=80, learning_horizon_late=110,
                 eval_horizon=200, n_basis=100, n_particles=50,
                 initial_samples=80, buffer_cap=800),
}


@dataclass(frozen=True)
class ExperimentConfig:
    task: str
    model: str
    propagation: str
    iterations: int
    learning_horizon: int
    eval_horizon: int
    n_basis: int
    n_particles: int
    initial_samples: int
    buffer_cap: int | None = None
    learning_horizon_late: int | None = None
    horizon_switch: int = 6
    n_eval_starts: int = 20
    repeats: int = 5
    seed: int = 0
    policy_restarts: int = 3
    policy_steps: int = 500
    policy_learning_rate: float = 0.02
    policy_restarts_warm: int = 1
    policy_steps_warm: int = 200
    warm_after: int = 2

    def __post_init__(self):
        if self.model not in MODELS:
            raise InvalidInputError(f"unknown model {self.model!r}")
        if self.propagation not in PROPAGATIONS:
            raise InvalidInputError(f"unknown propagation {self.propagation!r}")
        counts = (self.iterations, self.learning_horizon, self.eval_horizon,
                  self.n_basis, self.n_particles, self.initial_samples,
                  self.n_eval_starts, self.repeats)
        if any(int(c) < 1 for c in counts):
            raise InvalidInputError("all experiment counts must be >= 1")
        if self.buffer_cap is not None and self.buffer_cap < 1:
            raise InvalidInputError("buffer_cap must be >= 1 when set")


def make_config(task: str, model: str, propagation: str, **overrides) -> ExperimentConfig:
    """Benchmark preset for a task with optional field overrides."""
    name = task.upper()
    if name not in _PRESETS:
        raise InvalidInputError(f"unknown task {task!r}")
    fields = dict(_PRESETS[name])
    fields.update(overrides)
    return ExperimentConfig(task=name, model=model, propagation=propagation, **fields)


def horizon_for_iteration(cfg: ExperimentConfig, iteration: int) -> int:
    """Planning horizon for a 1-based iteration; IPSU extends after 6."""
    if cfg.learning_horizon_late is not None and iteration > cfg.horizon_switch:
        return cfg.learning_horizon_late
    return cfg.learning_horizon


# --- transition buffer ----------------------------------------------------------


@dataclass(frozen=True)
class DataBuffer:
    """Transitions in arrival order: inputs (s||a), targets (s' - s)."""

    inputs: np.ndarray
    targets: np.ndarray
    cap: int | None = None

    def __post_init__(self):
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise InvalidInputError("inputs and targets must align")
        if self.cap is not None and len(self) > self.cap:
            raise InvalidInputError("buffer exceeds its cap")

    def __len__(self) -> int:
        return self.inputs.shape[0]


def buffer_append(buf: DataBuffer, inputs, targets) -> DataBuffer:
    """Append transitions, evicting the oldest beyond the cap."""
    inputs = np.asarray(inputs, dtype=float).reshape(-1, buf.inputs.shape[1])
    targets = np.asarray(targets, dtype=float).reshape(-1, buf.targets.shape[1])
    if inputs.shape[0] == 0:
        return buf
    xs = np.concatenate([buf.inputs, inputs], axis=0)
    ys = np.concatenate([buf.targets, targets], axis=0)
    if buf.cap is not None and xs.shape[0] > buf.cap:
        xs, ys = xs[-buf.cap:], ys[-buf.cap:]
    return DataBuffer(xs, ys, buf.cap)


def collect_random(spec: EnvSpec, n: int, rng: RngStream, cap: int | None = None) -> DataBuffer:
    """Roll uniformly random actions until n transitions are gathered."""
    if n < 1:
        raise InvalidInputError("need at least one transition")
    xs, ys = [], []
    state = env_reset(spec, rng)
    while len(xs) < n:
        a = rng.uniform(-spec.u_max, spec.u_max)
        nxt, terminated, _ = env_step(spec, state, a)
        xs.append(np.concatenate([state.observation, [a]]))
        ys.append(nxt.observation - state.observation)
        state = env_reset(spec, rng) if terminated else nxt
    return DataBuffer(np.asarray(xs), np.asarray(ys), cap)


# --- trials and evaluation -------------------------------------------------------


def run_trial(spec: EnvSpec, policy: RbfPolicy, horizon: int, rng: RngStream):
    """One real episode under the policy; stops early on termination."""
    xs, ys = [], []
    state = env_reset(spec, rng)
    for _ in range(horizon):
        a = float(policy_action(policy, state.observation)[0])
        nxt, terminated, _ = env_step(spec, state, a)
        xs.append(np.concatenate([state.observation, [a]]))
        ys.append(nxt.observation - state.observation)
        state = nxt
        if terminated:
            break
    return np.asarray(xs), np.asarray(ys)


def sample_eval_starts(spec: EnvSpec, n_starts: int, rng: RngStream) -> np.ndarray:
    """Internal-state starts shared by every policy evaluation in a suite."""
    return sample_mvn(spec.init, n_starts, rng)


def _episode_reward(spec: EnvSpec, horizon: int, internal_start, act) -> float:
    from .envs import EnvState

    internal = np.asarray(internal_start, dtype=float)
    state = EnvState(internal, observe(np, spec.task, internal[None, :])[0])
    total, terminated = 0.0, False
    for t in range(horizon):
        if terminated:
            total += spec.reward_spec.termination_penalty * (horizon - t)
            break
        state, terminated, reward = env_step(spec, state, act(state.observation))
        total += reward
    return total


def evaluate_policy(policy: RbfPolicy, spec: EnvSpec, n_starts: int,
                    eval_horizon: int, shared_starts) -> float:
    """Average per-step reward over fixed starts; terminated steps score the
    termination penalty for the remainder of the horizon."""
    shared_starts = np.asarray(shared_starts, dtype=float)
    if shared_starts.shape[0] != n_starts:
        raise InvalidInputError("shared_starts must hold exactly n_starts rows")

    def act(obs):
        return float(policy_action(policy, obs)[0])

    total = sum(_episode_reward(spec, eval_horizon, s, act) for s in shared_starts)
    return total / (n_starts * eval_horizon)


def random_baseline(spec: EnvSpec, n_starts: int, eval_horizon: int,
                    shared_starts, rng: RngStream) -> float:
    """Evaluation protocol applied to uniformly random actions."""
    shared_starts = np.asarray(shared_starts, dtype=float)
    if shared_starts.shape[0] != n_starts:
        raise InvalidInputError("shared_starts must hold exactly n_starts rows")

    def act(_obs):
        return float(rng.uniform(-spec.u_max, spec.u_max))

    total = sum(_episode_reward(spec, eval_horizon, s, act) for s in shared_starts)
    return total / (n_starts * eval_horizon)


# --- model fitting and planning-space plumbing ------------------------------------


# GP refits that warm-start from the previous iteration's parameters only
# need to track the shifted optimum, not find it from scratch; a full-budget
# refit redoes an O(n^3) factorization per step.  DGCN steps are minibatched
# and cheap, so its refits keep the full budget.
WARM_GP_CONFIG = OptimConfig(learning_rate=0.05, max_steps=120, restarts=1,
                             patience=20, restart_scale=1.0)


def fit_model(name: str, buf: DataBuffer, rng: RngStream, warm=None):
    if name == "gp":
        cfg = WARM_GP_CONFIG if warm is not None else None
        return gp_fit(buf.inputs, buf.targets, rng, cfg=cfg, init_model=warm)
    if name == "dgcn":
        return dgcn_fit(buf.inputs, buf.targets, rng, init_model=warm)
    if name == "epnn":
        return epnn_fit(buf.inputs, buf.targets, rng)
    raise InvalidInputError(f"unknown model {name!r}")


def observation_init(spec: EnvSpec, rng: RngStream, n: int = 2000) -> Gaussian:
    """Moment-matched Gaussian over observations of the task's init states.

    Angle encodings make the observation distribution non-Gaussian, so model
    rollouts start from a sampled mean/covariance fit instead of an exact
    transform.
    """
    internal = sample_mvn(spec.init, n, rng)
    obs = observe(np, spec.task, internal)
    mean = obs.mean(axis=0)
    centered = obs - mean
    cov = centered.T @ centered / (n - 1) + 1e-10 * np.eye(obs.shape[1])
    return Gaussian(mean, cov)


def box_policy(task: str, n_basis: int, u_max: float, rng: RngStream) -> RbfPolicy:
    """Random policy whose basis covers the task's whole operating region.

    Centers drawn from the observation box and lengthscales at half its span;
    data-local centers leave the policy featureless (hence gradient-free)
    across the unexplored part of the state space.
    """
    lo, hi = observation_box(task)
    centers = rng.uniform(0.0, 1.0, size=(n_basis, lo.size)) * (hi - lo) + lo
    weights = rng.standard_normal((n_basis, 1))
    return RbfPolicy(centers, weights, (hi - lo) / 2.0, float(u_max))


def _planning_objective(cfg, spec, model, policy, init_obs, horizon, rng):
    if cfg.propagation == "ts":
        # Particle averages tolerate single precision, which roughly halves
        # the cost of the dominant per-step Gram/solve work.  The moment-
        # matched route stays in double precision: its covariance jitter sits
        # below float32 resolution.
        return ts_cost_objective(model, policy, init_obs, horizon,
                                 cfg.n_particles, spec.reward_spec, rng,
                                 terminate=spec.terminate, dtype=jnp.float32)
    return pf_cost_objective(model, policy, init_obs, horizon,
                             cfg.n_particles, spec.reward_spec, rng)


# --- the outer loop ---------------------------------------------------------------


@dataclass
class RunRecord:
    """Per-iteration trace of one repeat."""

    config: ExperimentConfig
    seed_tags: tuple
    samples: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    stages: list = field(default_factory=list)
    wall_time: float = 0.0
    error: str | None = None

    def __post_init__(self):
        if any(b < a for a, b in zip(self.samples, self.samples[1:])):
            raise InvalidInputError("samples_used must be nondecreasing")


def train_loop(cfg: ExperimentConfig, rng: RngStream | None = None,
               shared_starts=None, progress=None) -> RunRecord:
    """Alternate model fitting, policy optimization, and real trials."""
    t0 = time.perf_counter()
    rng = rng or RngStream(cfg.seed)
    spec = make_env(cfg.task)
    record = RunRecord(config=cfg, seed_tags=(cfg.seed,) + tuple(rng.path))

    if shared_starts is None:
        shared_starts = sample_eval_starts(spec, cfg.n_eval_starts,
                                           rng.substream("eval-starts"))

    buf = collect_random(spec, cfg.initial_samples, rng.substream("init-data"),
                         cap=cfg.buffer_cap)
    record.stages.append("collect_initial_data")
    policy = box_policy(cfg.task, cfg.n_basis, spec.u_max,
                        rng.substream("policy-init"))
    record.stages.append("init_policy")
    init_obs = observation_init(spec, rng.substream("obs-init"))

    samples_used = len(buf)
    model = None
    try:
        for it in range(1, cfg.iterations + 1):
            model = fit_model(cfg.model, buf, rng.substream("fit", it), warm=model)
            record.stages.append(f"fit_model[{it}]")

            # Early iterations shape the policy and get the full search
            # budget; later ones refine it against a slowly-moving model.
            warm = it > cfg.warm_after
            opt_cfg = OptimConfig(
                learning_rate=cfg.policy_learning_rate,
                max_steps=cfg.policy_steps_warm if warm else cfg.policy_steps,
                restarts=cfg.policy_restarts_warm if warm else cfg.policy_restarts,
                patience=40)
            horizon = horizon_for_iteration(cfg, it)
            objective = _planning_objective(cfg, spec, model, policy, init_obs,
                                            horizon, rng.substream("draws", it))
            pv = optimize(objective, policy.to_paramvector(), opt_cfg,
                          rng.substream("opt", it))
            policy = policy.with_paramvector(pv)
            record.stages.append(f"optimize_policy[{it}]")

            xs, ys = run_trial(spec, policy, horizon, rng.substream("trial", it))
            record.stages.append(f"trial[{it}]")
            buf = buffer_append(buf, xs, ys)
            samples_used += xs.shape[0]
            record.stages.append(f"append_data[{it}]")

            reward = evaluate_policy(policy, spec, cfg.n_eval_starts,
                                     cfg.eval_horizon, shared_starts)
            record.stages.append(f"evaluate[{it}]")
            record.samples.append(samples_used)
            record.rewards.append(reward)
            if progress is not None:
                progress(it, samples_used, reward)
    except Exception as exc:  # noqa: BLE001 - partial record per contract
        record.error = f"{type(exc).__name__}: {exc}"
    record.wall_time = time.perf_counter() - t0
    return record


def run_suite(cfg: ExperimentConfig, progress=None) -> tuple[list, np.ndarray]:
    """All repeats of one configuration with suite-shared evaluation starts."""
    spec = make_env(cfg.task)
    root = RngStream(cfg.seed)
    shared_starts = sample_eval_starts(spec, cfg.n_eval_starts,
                                       root.substream("eval-starts"))
    records = []
    for r in range(cfg.repeats):
        cb = (lambda it, s, w, _r=r: progress(_r, it, s, w)) if progress else None
        records.append(train_loop(cfg, rng=root.substream("repeat", r),
                                  shared_starts=shared_starts, progress=cb))
    return records, shared_starts


# --- aggregation and reporting -----------------------------------------------------


@dataclass(frozen=True)
class QuantileSummary:
    iteration: np.ndarray
    samples: np.ndarray
    median: np.ndarray
    q25: np.ndarray
    q75: np.ndarray


def aggregate(records) -> QuantileSummary:
    """Median and quartiles of evaluation reward across repeats."""
    if not records:
        raise InvalidInputError("need at least one record")
    n_iter = min(len(r.rewards) for r in records)
    rewards = np.array([r.rewards[:n_iter] for r in records])
    samples = np.array([r.samples[:n_iter] for r in records])
    if n_iter == 0:
        empty = np.array([])
        return QuantileSummary(empty.astype(int), empty.astype(int), empty, empty, empty)
    q25, med, q75 = np.quantile(rewards, [0.25, 0.5, 0.75], axis=0)
    samp = np.median(samples, axis=0).round().astype(int)
    return QuantileSummary(np.arange(1, n_iter + 1), samp, med, q25, q75)


def emit_csv(summary: QuantileSummary, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "samples", "median", "q25", "q75"])
        for i in range(summary.iteration.size):
            writer.writerow([
                int(summary.iteration[i]), int(summary.samples[i]),
                repr(float(summary.median[i])), repr(float(summary.q25[i])),
                repr(float(summary.q75[i])),
            ])


# --- environment-level reference optimum --------------------------------------------


def _env_cost(values, static, starts, target, wvec):
    import jax
    import jax.numpy as jnp

    task, constants, nb, d_obs, act_dim, u_max, shifted, horizon = static
    centers = values[: nb * d_obs].reshape(nb, d_obs)
    weights = values[nb * d_obs: nb * (d_obs + act_dim)].reshape(nb, act_dim)
    inv_ls = jnp.exp(-values[nb * (d_obs + act_dim):])

    def step(internal, _):
        obs = observe(jnp, task, internal)
        act = policy_apply(jnp, centers, weights, inv_ls, u_max, obs)
        nxt = dynamics_step(jnp, task, constants, internal, act[:, 0])
        reward = reward_values(jnp, observe(jnp, task, nxt), target, wvec, shifted)
        return nxt, jnp.mean(reward)

    _, rewards = jax.lax.scan(jax.checkpoint(step), starts, None, length=horizon)
    return -jnp.mean(rewards)


def reference_policy(cfg: ExperimentConfig, rng: RngStream | None = None,
                     n_starts: int = 20, opt_cfg: OptimConfig | None = None) -> RbfPolicy:
    """Optimize a policy directly against the true dynamics (no model).

    The exponential reward is nearly flat far from the target, so a single
    descent run stalls; many randomized restarts keep the best basin found.
    """
    rng = rng or RngStream(cfg.seed)
    spec = make_env(cfg.task)
    starts = sample_mvn(spec.init, n_starts, rng.substream("reference-starts"))
    policy = box_policy(cfg.task, cfg.n_basis, spec.u_max,
                        rng.substream("reference-policy"))

    static = (spec.task, spec.constants, cfg.n_basis, spec.obs_dim, 1,
              spec.u_max, spec.reward_spec.shifted, cfg.eval_horizon)
    objective = Objective(
        fun=_env_cost, static=static,
        args=(starts, spec.reward_spec.target, spec.reward_spec.weights),
    )
    opt_cfg = opt_cfg or OptimConfig(learning_rate=0.05, max_steps=1000,
                                     restarts=16, patience=250)
    pv = optimize(objective, policy.to_paramvector(), opt_cfg,
                  rng.substream("reference-opt"))
    return policy.with_paramvector(pv)
