"""Uncertainty propagation through a learned model under a policy.

Two propagation schemes over the horizon:

* density-based (PF): each step approximates the state distribution by a
  Gaussian whose moments are Monte-Carlo estimates over particles drawn from
  the previous step's Gaussian;
* trajectory sampling (TS): a fixed set of particles, each propagated by
  sampling its own predictive Gaussian every step, rewards averaged across
  particles per step.

Both come in a plain numpy host form (the reference semantics) and as
traceable scalar cost objectives over flat policy parameters, with the noise
draws fixed per objective so the cost is deterministic and differentiable
(reparametrized sampling).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np

from .diffopt import Objective
from .errors import InvalidInputError, NumericalFailureError
from .models.base import predict_arrays
from .models.dgcn import DgcnModel, dgcn_predict_core
from .models.gp import GpModel, gp_predict_core
from .models.pnn import EpnnModel, epnn_predict_core
from .numerics import Gaussian, RngStream, psd_sqrt, sample_mvn
from .policy import RbfPolicy, policy_apply


@dataclass(frozen=True)
class RewardSpec:
    """Exponential reward toward a target observation.

    ``weights`` is the diagonal of the distance metric (inverse squared
    observation units).  ``shifted`` subtracts 1 so rewards lie in (-1, 0],
    the convention the termination penalty of -1 extends naturally.
    """

    target: np.ndarray
    weights: np.ndarray
    shifted: bool = True
    termination_penalty: float = -1.0

    def __post_init__(self):
        target = np.asarray(self.target, dtype=float).reshape(-1)
        weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if weights.shape != target.shape:
            raise InvalidInputError("weights must match target dimension")
        if np.any(weights < 0):
            raise InvalidInputError("weights must be nonnegative")
        object.__setattr__(self, "target", target)
        object.__setattr__(self, "weights", weights)


@dataclass
class ParticleSet:
    """States of ``n_p`` particles at one time index, with liveness flags."""

    states: np.ndarray
    time_index: int = 0
    alive: np.ndarray | None = None

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        if self.states.shape[0] < 1:
            raise InvalidInputError("need at least one particle")
        if self.alive is None:
            self.alive = np.ones(self.states.shape[0], dtype=bool)
        else:
            self.alive = np.asarray(self.alive, dtype=bool).reshape(-1)
            if self.alive.shape[0] != self.states.shape[0]:
                raise InvalidInputError("alive flags must match particle count")

    @property
    def n_particles(self) -> int:
        return self.states.shape[0]


@dataclass(frozen=True)
class RolloutResult:
    """Expected cost, the per-step average rewards behind it, and optional
    per-trajectory states ``(n_p, T+1, dim)`` for diagnostics."""

    expected_cost: float
    per_step_avg_reward: np.ndarray
    states: np.ndarray | None = None


def reward_values(xp, states, target, weights, shifted: bool):
    """Batched exponential reward, generic in the array module ``xp``."""
    d = states - target
    e = xp.exp(-xp.sum(d * d * weights, axis=-1))
    return e - 1.0 if shifted else e


def exponential_reward(s_next, spec: RewardSpec) -> float:
    """Reward of one observation; in (-1, 0] shifted, (0, 1] otherwise."""
    s = np.asarray(s_next, dtype=float).reshape(-1)
    if s.shape != spec.target.shape:
        raise InvalidInputError(f"state must have dimension {spec.target.size}")
    return float(reward_values(np, s, spec.target, spec.weights, spec.shifted))


def _ensure_gaussian(mean: np.ndarray, cov: np.ndarray) -> Gaussian:
    """Symmetrize, rescue marginal negative eigenvalues, or fail loudly."""
    cov = 0.5 * (cov + cov.T)
    low = float(np.linalg.eigvalsh(cov)[0])
    trace = max(float(np.trace(cov)), 0.0)
    if low < -1e-10 * trace:
        bump = -low + 1e-12 * max(trace, 1.0)
        if bump > 1e-4 * max(trace / cov.shape[0], 1e-12):
            raise NumericalFailureError(
                f"propagated covariance is not PSD (min eigenvalue {low:.3e})"
            )
        cov = cov + bump * np.eye(cov.shape[0])
    return Gaussian(mean, cov)


def _policy_actions(policy: RbfPolicy, states: np.ndarray) -> np.ndarray:
    return policy_apply(
        np, policy.centers, policy.weights, 1.0 / policy.lengthscales, policy.u_max, states
    )


def pf_step(model, policy: RbfPolicy, dist: Gaussian, n_p: int, rng: RngStream) -> Gaussian:
    """One density-propagation step: next-state Gaussian from particle moments.

    Particles are drawn from ``dist``; predictive means and variances at
    (particle, action) give the delta moments as plain Monte-Carlo averages
    (1/n_p normalization throughout), and the next covariance adds the
    input-output cross term twice since the next state is state + delta.
    """
    if n_p < 2:
        raise InvalidInputError("density propagation needs n_p >= 2")
    particles = sample_mvn(dist, n_p, rng)
    actions = _policy_actions(policy, particles)
    mu, var = predict_arrays(model, np.concatenate([particles, actions], axis=1))

    mu_bar = mu.mean(axis=0)
    mu_c = mu - mu_bar
    sigma_delta = np.diag(var.mean(axis=0)) + (mu_c.T @ mu_c) / n_p
    s_c = particles - particles.mean(axis=0)
    c = (s_c.T @ mu_c) / n_p
    return _ensure_gaussian(dist.mean + mu_bar, dist.covariance + sigma_delta + c + c.T)


def pf_rollout(
    model,
    policy: RbfPolicy,
    init: Gaussian,
    T: int,
    n_p: int,
    spec: RewardSpec,
    rng: RngStream,
) -> RolloutResult:
    """Chain ``pf_step`` over the horizon; rewards from fresh per-step draws."""
    if T < 0:
        raise InvalidInputError("horizon must be nonnegative")
    dist = init
    rewards = np.zeros(T)
    for t in range(T):
        dist = pf_step(model, policy, dist, n_p, rng.substream("prop", t))
        samples = sample_mvn(dist, n_p, rng.substream("reward", t))
        rewards[t] = float(
            np.mean(reward_values(np, samples, spec.target, spec.weights, spec.shifted))
        )
    return RolloutResult(float(-np.sum(rewards)), rewards)


def ts_rollout(
    model,
    policy: RbfPolicy,
    init: Gaussian,
    T: int,
    n_p: int,
    spec: RewardSpec,
    rng: RngStream,
    terminate=None,
    record_states: bool = False,
) -> RolloutResult:
    """Propagate ``n_p`` sampled trajectories; average rewards per step.

    ``terminate``, when given, is a predicate ``terminate(xp, states) -> bool
    mask``; a particle whose next state fires it earns the termination penalty
    for that step and every remaining one, and its state freezes.  Draws are
    consumed in fixed particle order, so results are deterministic per seed.
    """
    if T < 0:
        raise InvalidInputError("horizon must be nonnegative")
    if n_p < 1:
        raise InvalidInputError("need at least one particle")
    particles = ParticleSet(sample_mvn(init, n_p, rng.substream("init")))
    states = particles.states
    alive = particles.alive.copy()
    rewards = np.zeros(T)
    trace = [states.copy()] if record_states else None
    noise = rng.substream("steps")
    for t in range(T):
        actions = _policy_actions(policy, states)
        mu, var = predict_arrays(model, np.concatenate([states, actions], axis=1))
        s_next = states + mu + np.sqrt(var) * noise.standard_normal(states.shape)
        r_q = reward_values(np, s_next, spec.target, spec.weights, spec.shifted)
        if terminate is not None:
            fired = np.asarray(terminate(np, s_next), dtype=bool)
            alive = alive & ~fired
        r_q = np.where(alive, r_q, spec.termination_penalty)
        states = np.where(alive[:, None], s_next, states)
        rewards[t] = float(np.mean(r_q))
        if record_states:
            trace.append(states.copy())
    return RolloutResult(
        float(-np.sum(rewards)),
        rewards,
        np.stack(trace, axis=1) if record_states else None,
    )


def trajectories_to_csv(states: np.ndarray, path) -> None:
    """Write per-trajectory state sequences: trajectory_id, t, s0..s{d-1}."""
    states = np.asarray(states, dtype=float)
    if states.ndim != 3:
        raise InvalidInputError("states must be (n_trajectories, T+1, dim)")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["trajectory_id", "t"] + [f"s{j}" for j in range(states.shape[2])])
        for q in range(states.shape[0]):
            for t in range(states.shape[1]):
                writer.writerow([q, t] + [repr(float(v)) for v in states[q, t]])


# --- differentiable cost objectives -----------------------------------------


def _model_parts(model, dtype):
    if isinstance(model, GpModel):
        return "gp", model.family, model.rollout_cache(dtype)
    if isinstance(model, DgcnModel):
        return "dgcn", (model.widths, model.output_dim, model.input_dim), model.rollout_cache(dtype)
    if isinstance(model, EpnnModel):
        static = (model.members[0].widths, model.output_dim, model.input_dim)
        return "epnn", static, model.rollout_cache(dtype)
    raise InvalidInputError(f"no traceable prediction core for {type(model).__name__}")


def _predict_core(kind, model_static, cache, x):
    if kind == "gp":
        return gp_predict_core(cache, x, model_static)
    if kind == "dgcn":
        return dgcn_predict_core(cache, x, model_static)
    return epnn_predict_core(cache, x, model_static)


def _unpack_policy(values, nb, d_obs, act_dim):
    centers = values[: nb * d_obs].reshape(nb, d_obs)
    weights = values[nb * d_obs : nb * (d_obs + act_dim)].reshape(nb, act_dim)
    inv_ls = jnp.exp(-values[nb * (d_obs + act_dim) :])
    return centers, weights, inv_ls


def _ts_cost(values, static, cache, init_mean, init_sqrt, eps0, eps, target, wvec):
    """Expected cost of a TS rollout under fixed standard-normal draws."""
    kind, model_static, nb, d_obs, act_dim, u_max, shifted, penalty, terminate = static
    centers, weights, inv_ls = _unpack_policy(values, nb, d_obs, act_dim)

    def step(carry, eps_t):
        s, alive = carry
        a = policy_apply(jnp, centers, weights, inv_ls, u_max, s)
        mu, var = _predict_core(kind, model_static, cache, jnp.concatenate([s, a], axis=1))
        s_next = s + mu + jnp.sqrt(var) * eps_t
        r_q = reward_values(jnp, s_next, target, wvec, shifted)
        if terminate is None:
            return (s_next, alive), jnp.mean(r_q)
        fired = terminate(jnp, s_next)
        alive = alive * (1.0 - fired.astype(s.dtype))
        r_q = alive * r_q + (1.0 - alive) * penalty
        s_keep = jnp.where(alive[:, None] > 0, s_next, s)
        return (s_keep, alive), jnp.mean(r_q)

    s0 = init_mean + eps0 @ init_sqrt.T
    alive0 = jnp.ones(s0.shape[0], dtype=s0.dtype)
    _, rewards = jax.lax.scan(jax.checkpoint(step), (s0, alive0), eps)
    return -jnp.sum(rewards)


def _pf_cost(values, static, cache, init_mean, init_cov, eps_prop, eps_rew, target, wvec):
    """Expected cost of a PF rollout under fixed standard-normal draws."""
    kind, model_static, nb, d_obs, act_dim, u_max, shifted = static
    centers, weights, inv_ls = _unpack_policy(values, nb, d_obs, act_dim)
    n_p = eps_prop.shape[1]
    eye = jnp.eye(init_mean.shape[0], dtype=init_mean.dtype)

    def factor(p):
        # The covariance update mixes the analytic carry with sampled cross
        # terms, so small negative eigenvalues (sampling noise) are expected;
        # escalate the rescue jitter, take the first tier that factors, and
        # return the jittered matrix alongside so callers can carry it (the
        # replay-path rescue bakes its bump into the propagated Gaussian the
        # same way; an unrepaired carry accumulates deficiency until no tier
        # covers it).  The probing factorizations feed only finiteness tests,
        # so their NaNs have no gradient path; violations beyond the largest
        # tier still fail loudly as NaN.
        scale = jnp.abs(jnp.trace(p)) / p.shape[0]

        def tier(eps):
            a = p + (eps * scale + 1e-15) * eye
            return jnp.all(jnp.isfinite(jnp.linalg.cholesky(a))), a

        ok1, a1 = tier(1e-9)
        ok2, a2 = tier(1e-5)
        a3 = p + (1e-2 * scale + 1e-15) * eye
        a = jnp.where(ok1, a1, jnp.where(ok2, a2, a3))
        return jnp.linalg.cholesky(a), a

    def step(carry, eps_t):
        m, p = carry
        e_prop, e_rew = eps_t
        l_prop, _ = factor(p)
        sq = m + e_prop @ l_prop.T
        a = policy_apply(jnp, centers, weights, inv_ls, u_max, sq)
        mu, var = _predict_core(kind, model_static, cache, jnp.concatenate([sq, a], axis=1))
        mu_bar = jnp.mean(mu, axis=0)
        mu_c = mu - mu_bar
        sigma_delta = jnp.diag(jnp.mean(var, axis=0)) + (mu_c.T @ mu_c) / n_p
        s_c = sq - jnp.mean(sq, axis=0)
        c = (s_c.T @ mu_c) / n_p
        m2 = m + mu_bar
        p2 = p + sigma_delta + c + c.T
        p2 = 0.5 * (p2 + p2.T)
        l_rew, p2 = factor(p2)
        s_rew = m2 + e_rew @ l_rew.T
        r = jnp.mean(reward_values(jnp, s_rew, target, wvec, shifted))
        return (m2, p2), r

    _, rewards = jax.lax.scan(jax.checkpoint(step), (init_mean, init_cov), (eps_prop, eps_rew))
    return -jnp.sum(rewards)


def ts_cost_objective(
    model,
    policy: RbfPolicy,
    init: Gaussian,
    T: int,
    n_p: int,
    spec: RewardSpec,
    rng: RngStream,
    terminate=None,
    dtype=None,
) -> Objective:
    """Objective over flat policy parameters for :func:`diffopt.optimize`.

    The standard-normal draws are taken once here, so every evaluation of the
    returned objective sees the same sampled paths (deterministic cost; build
    a fresh objective to resample).  ``terminate`` must be a module-level
    function for the compiled program to be reused across calls.
    """
    if T < 1 or n_p < 1:
        raise InvalidInputError("need T >= 1 and n_p >= 1")
    dt = dtype or jnp.float64
    kind, model_static, cache = _model_parts(model, dt)
    arr = lambda a: jnp.asarray(a, dtype=dt)
    static = (
        kind,
        model_static,
        policy.n_basis,
        policy.obs_dim,
        policy.act_dim,
        float(policy.u_max),
        bool(spec.shifted),
        float(spec.termination_penalty),
        terminate,
    )
    args = (
        cache,
        arr(init.mean),
        arr(psd_sqrt(init.covariance)),
        arr(rng.substream("init").standard_normal((n_p, init.dim))),
        arr(rng.substream("steps").standard_normal((T, n_p, init.dim))),
        arr(spec.target),
        arr(spec.weights),
    )
    return Objective(fun=_ts_cost, static=static, args=args, dtype=dt)


def pf_cost_objective(
    model,
    policy: RbfPolicy,
    init: Gaussian,
    T: int,
    n_p: int,
    spec: RewardSpec,
    rng: RngStream,
    dtype=None,
) -> Objective:
    """Density-propagation analogue of :func:`ts_cost_objective`."""
    if T < 1 or n_p < 2:
        raise InvalidInputError("need T >= 1 and n_p >= 2")
    dt = dtype or jnp.float64
    kind, model_static, cache = _model_parts(model, dt)
    arr = lambda a: jnp.asarray(a, dtype=dt)
    static = (
        kind,
        model_static,
        policy.n_basis,
        policy.obs_dim,
        policy.act_dim,
        float(policy.u_max),
        bool(spec.shifted),
    )
    args = (
        cache,
        arr(init.mean),
        arr(init.covariance),
        arr(rng.substream("prop").standard_normal((T, n_p, init.dim))),
        arr(rng.substream("reward").standard_normal((T, n_p, init.dim))),
        arr(spec.target),
        arr(spec.weights),
    )
    return Objective(fun=_pf_cost, static=static, args=args, dtype=dt)
