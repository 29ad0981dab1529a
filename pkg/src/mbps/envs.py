"""Analytic benchmark tasks: pendulum swing-up (P), continuous mountain car
(CMC), cart-pole swing-up (IPSU), and cart double-pole balancing (IDP).

Each task exposes batched, backend-generic dynamics (numpy or jax.numpy via
the ``xp`` argument) so the same step function serves real-environment trials
and differentiable environment-level optimization.  Internal state layouts:

    P     (theta, theta_dot)            theta = 0 upright
    CMC   (position, velocity)
    IPSU  (x, x_dot, theta, theta_dot)  theta = 0 upright
    IDP   (x, theta1, theta2, x_dot, theta1_dot, theta2_dot)

Angles are absolute, measured from the upright vertical.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, NamedTuple

import numpy as np

from .errors import EnvironmentFailureError, InvalidInputError
from .numerics import Gaussian, RngStream, sample_mvn
from .rollout import RewardSpec, exponential_reward

TASKS = ("P", "CMC", "IPSU", "IDP")


class PConstants(NamedTuple):
    gravity: float = 10.0
    mass: float = 1.0
    length: float = 1.0
    dt: float = 0.05


class CmcConstants(NamedTuple):
    force_scale: float = 0.0015
    gravity_scale: float = 0.0025
    v_max: float = 0.07
    p_min: float = -1.2
    p_max: float = 0.6


class IpsuConstants(NamedTuple):
    cart_mass: float = 0.5
    pole_mass: float = 0.5
    pole_length: float = 0.6
    gravity: float = 9.81
    dt: float = 0.1


class IdpConstants(NamedTuple):
    cart_mass: float = 0.5
    pole_mass: float = 0.1
    pole_length: float = 0.5
    gravity: float = 9.81
    dt: float = 0.05


_INTERNAL_DIM = {"P": 2, "CMC": 2, "IPSU": 4, "IDP": 6}
_OBS_DIM = {"P": 3, "CMC": 2, "IPSU": 5, "IDP": 6}


@dataclass(frozen=True)
class EnvSpec:
    """Immutable task description: physics, bounds, init, and reward."""

    task: str
    constants: tuple
    dt: float
    u_max: float
    obs_dim: int
    init: Gaussian
    reward_spec: RewardSpec
    terminate: Callable | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise InvalidInputError(f"unknown task {self.task!r}")
        if self.obs_dim != _OBS_DIM[self.task]:
            raise InvalidInputError(
                f"obs_dim {self.obs_dim} does not match task {self.task}"
            )
        if not (np.isfinite(self.u_max) and self.u_max > 0):
            raise InvalidInputError("u_max must be positive and finite")
        if self.init.dim != _INTERNAL_DIM[self.task]:
            raise InvalidInputError("init distribution has wrong dimension")


@dataclass(frozen=True)
class EnvState:
    internal: np.ndarray
    observation: np.ndarray


# --- batched dynamics ---------------------------------------------------------


def _p_step(xp, c: PConstants, states, actions):
    th, om = states[:, 0], states[:, 1]
    acc = 1.5 * c.gravity / c.length * xp.sin(th) + 3.0 * actions / (
        c.mass * c.length**2
    )
    om_next = om + c.dt * acc
    th_next = th + c.dt * om_next
    return xp.stack([th_next, om_next], axis=1)


def _cmc_step(xp, c: CmcConstants, states, actions):
    p, v = states[:, 0], states[:, 1]
    v_next = v + c.force_scale * actions - c.gravity_scale * xp.cos(3.0 * p)
    v_next = xp.clip(v_next, -c.v_max, c.v_max)
    p_next = xp.clip(p + v_next, c.p_min, c.p_max)
    # hitting the left wall kills leftward momentum
    at_wall = (p_next <= c.p_min) & (v_next < 0.0)
    v_next = xp.where(at_wall, 0.0, v_next)
    return xp.stack([p_next, v_next], axis=1)


def _ipsu_derivatives(xp, c: IpsuConstants, states, actions):
    """Cart with a uniform-rod pole; 2x2 mass-matrix solve."""
    x_dot, th, th_dot = states[:, 1], states[:, 2], states[:, 3]
    m, big_m, length = c.pole_mass, c.cart_mass, c.pole_length
    half = 0.5 * length
    sin, cos = xp.sin(th), xp.cos(th)

    m11 = xp.full_like(th, big_m + m)
    m12 = m * half * cos
    m22 = xp.full_like(th, m * length**2 / 3.0)
    b1 = actions + m * half * th_dot**2 * sin
    b2 = m * c.gravity * half * sin

    det = m11 * m22 - m12 * m12
    x_acc = (m22 * b1 - m12 * b2) / det
    th_acc = (m11 * b2 - m12 * b1) / det
    return xp.stack([x_dot, x_acc, th_dot, th_acc], axis=1)


def _idp_derivatives(xp, c: IdpConstants, states, actions):
    """Cart with two uniform-rod poles; 3x3 mass-matrix solve."""
    th1, th2 = states[:, 1], states[:, 2]
    x_dot, om1, om2 = states[:, 3], states[:, 4], states[:, 5]
    m0, m, length = c.cart_mass, c.pole_mass, c.pole_length
    half = 0.5 * length
    inertia = m * length**2 / 12.0
    s1, c1 = xp.sin(th1), xp.cos(th1)
    s2, c2 = xp.sin(th2), xp.cos(th2)
    s12, c12 = xp.sin(th1 - th2), xp.cos(th1 - th2)

    ones = xp.ones_like(th1)
    m11 = (m0 + 2.0 * m) * ones
    m12 = m * (half + length) * c1
    m13 = m * half * c2
    m22 = (m * half**2 + inertia + m * length**2) * ones
    m23 = m * length * half * c12
    m33 = (m * half**2 + inertia) * ones
    mass = xp.stack(
        [
            xp.stack([m11, m12, m13], axis=1),
            xp.stack([m12, m22, m23], axis=1),
            xp.stack([m13, m23, m33], axis=1),
        ],
        axis=1,
    )
    b1 = actions + m * (half + length) * om1**2 * s1 + m * half * om2**2 * s2
    b2 = m * (half + length) * c.gravity * s1 - m * length * half * om2**2 * s12
    b3 = m * half * c.gravity * s2 + m * length * half * om1**2 * s12
    rhs = xp.stack([b1, b2, b3], axis=1)
    acc = xp.linalg.solve(mass, rhs[..., None])[..., 0]
    return xp.concatenate([states[:, 3:], acc], axis=1)


def _rk4(xp, deriv, c, states, actions):
    dt = c.dt
    k1 = deriv(xp, c, states, actions)
    k2 = deriv(xp, c, states + 0.5 * dt * k1, actions)
    k3 = deriv(xp, c, states + 0.5 * dt * k2, actions)
    k4 = deriv(xp, c, states + dt * k3, actions)
    return states + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def dynamics_step(xp, task: str, constants, states, actions):
    """Advance a batch of internal states one time step.

    states (n, internal_dim); actions (n,) already clipped to the bound.
    """
    if task == "P":
        return _p_step(xp, constants, states, actions)
    if task == "CMC":
        return _cmc_step(xp, constants, states, actions)
    if task == "IPSU":
        return _rk4(xp, _ipsu_derivatives, constants, states, actions)
    if task == "IDP":
        return _rk4(xp, _idp_derivatives, constants, states, actions)
    raise InvalidInputError(f"unknown task {task!r}")


def observe(xp, task: str, states):
    """Map a batch of internal states to the model-facing observation."""
    if task == "P":
        th = states[:, 0]
        return xp.stack([xp.cos(th), xp.sin(th), states[:, 1]], axis=1)
    if task == "CMC" or task == "IDP":
        return states
    if task == "IPSU":
        th = states[:, 2]
        return xp.stack(
            [states[:, 0], states[:, 1], xp.cos(th), xp.sin(th), states[:, 3]],
            axis=1,
        )
    raise InvalidInputError(f"unknown task {task!r}")


def observation_box(task: str) -> tuple[np.ndarray, np.ndarray]:
    """Operating region per observation dimension (policy basis coverage)."""
    boxes = {
        "P": ([-1.0, -1.0, -8.0], [1.0, 1.0, 8.0]),
        "CMC": ([-1.2, -0.07], [0.6, 0.07]),
        "IPSU": ([-2.5, -5.0, -1.0, -1.0, -10.0], [2.5, 5.0, 1.0, 1.0, 10.0]),
        "IDP": ([-1.5, -0.7, -0.7, -3.0, -3.0, -3.0], [1.5, 0.7, 0.7, 3.0, 3.0, 3.0]),
    }
    if task not in boxes:
        raise InvalidInputError(f"unknown task {task!r}")
    lo, hi = boxes[task]
    return np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)


def idp_tip_height(xp, observations, constants: IdpConstants = IdpConstants()):
    """Height of the second pole's tip above the pivot, batched."""
    length = constants.pole_length
    return length * xp.cos(observations[:, 1]) + length * xp.cos(observations[:, 2])


def idp_terminated(xp, observations):
    """Failure predicate: upper tip below 0.8 x full extension."""
    c = IdpConstants()
    return idp_tip_height(xp, observations, c) < 0.8 * 2.0 * c.pole_length


# --- task presets -------------------------------------------------------------


def _diag_gaussian(mean, std):
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)
    return Gaussian(mean, np.diag(std**2))


_VALLEY = -np.pi / 6.0


def _preset(task: str):
    if task == "P":
        return dict(
            constants=PConstants(),
            dt=PConstants().dt,
            u_max=2.0,
            init=_diag_gaussian([np.pi, 0.0], [0.1, 0.05]),
            target=[1.0, 0.0, 0.0],
            weights=[1.0, 1.0, 0.1],
            terminate=None,
        )
    if task == "CMC":
        return dict(
            constants=CmcConstants(),
            dt=1.0,
            u_max=1.0,
            init=_diag_gaussian([_VALLEY, 0.0], [0.05, 0.01]),
            target=[0.45, 0.0],
            weights=[1.0, 0.1],
            terminate=None,
        )
    if task == "IPSU":
        return dict(
            constants=IpsuConstants(),
            dt=IpsuConstants().dt,
            u_max=10.0,
            init=_diag_gaussian([0.0, 0.0, np.pi, 0.0], [0.02, 0.02, 0.05, 0.05]),
            target=[0.0, 0.0, 1.0, 0.0, 0.0],
            weights=[1.0, 0.1, 1.0, 1.0, 0.1],
            terminate=None,
        )
    if task == "IDP":
        return dict(
            constants=IdpConstants(),
            dt=IdpConstants().dt,
            u_max=10.0,
            init=_diag_gaussian(np.zeros(6), np.full(6, 0.05)),
            target=np.zeros(6),
            weights=[1.0, 1.0, 1.0, 0.1, 0.1, 0.1],
            terminate=idp_terminated,
        )
    raise InvalidInputError(f"unknown task {task!r}")


def make_env(
    task: str,
    *,
    constants=None,
    u_max: float | None = None,
    init: Gaussian | None = None,
    weights=None,
    shifted: bool = True,
) -> EnvSpec:
    """Build a task preset, optionally overriding physics or reward pieces."""
    name = task.upper()
    if name not in TASKS:
        raise InvalidInputError(f"unknown task {task!r}")
    preset = _preset(name)
    if constants is not None:
        preset["constants"] = constants
        if hasattr(constants, "dt"):
            preset["dt"] = constants.dt
    if u_max is not None:
        preset["u_max"] = float(u_max)
    if init is not None:
        preset["init"] = init
    if weights is not None:
        preset["weights"] = weights
    reward_spec = RewardSpec(
        np.asarray(preset["target"], dtype=float),
        np.asarray(preset["weights"], dtype=float),
        shifted=shifted,
    )
    return EnvSpec(
        task=name,
        constants=preset["constants"],
        dt=preset["dt"],
        u_max=preset["u_max"],
        obs_dim=_OBS_DIM[name],
        init=preset["init"],
        reward_spec=reward_spec,
        terminate=preset["terminate"],
    )


def with_unshifted_reward(spec: EnvSpec) -> EnvSpec:
    return replace(
        spec, reward_spec=replace(spec.reward_spec, shifted=False)
    )


# --- single-state transition API ----------------------------------------------


def env_reset(spec: EnvSpec, rng: RngStream) -> EnvState:
    internal = sample_mvn(spec.init, 1, rng)[0]
    observation = observe(np, spec.task, internal[None, :])[0]
    return EnvState(internal, observation)


def env_step(spec: EnvSpec, state: EnvState, action: float):
    """One real-environment transition; returns (state', terminated, reward)."""
    a = float(np.clip(action, -spec.u_max, spec.u_max))
    nxt = dynamics_step(
        np, spec.task, spec.constants, state.internal[None, :], np.array([a])
    )[0]
    if not np.all(np.isfinite(nxt)):
        raise EnvironmentFailureError(f"non-finite state in task {spec.task}")
    obs = observe(np, spec.task, nxt[None, :])[0]
    terminated = bool(spec.terminate(np, obs[None, :])[0]) if spec.terminate else False
    reward = exponential_reward(obs, spec.reward_spec)
    return EnvState(nxt, obs), terminated, reward
