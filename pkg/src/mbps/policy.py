"""RBF controller with bounded, smooth action squashing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffopt import ParamVector
from .errors import InvalidInputError
from .numerics import RngStream


def param_count(state_dim: int, n_basis: int) -> int:
    """Trainable parameters of a one-action RBF policy.

    Center coordinates (``n_basis * state_dim``) plus one weight per basis
    function plus the shared per-dimension lengthscales.
    """
    if state_dim < 1 or n_basis < 1:
        raise InvalidInputError("state_dim and n_basis must be >= 1")
    return (state_dim + 1) * n_basis + state_dim


def squash(xp, raw):
    """Odd, smooth squashing onto exactly [-1, 1] (maximum at pi/2)."""
    return (9.0 * xp.sin(raw) + xp.sin(3.0 * raw)) / 8.0


@dataclass
class RbfPolicy:
    """Radial-basis controller: squashed weighted sum of Gaussian bumps.

    Lengthscales are shared across basis functions.  Actions are bounded by
    ``u_max`` through the sine squash, which is differentiable everywhere.
    """

    centers: np.ndarray  # (n_basis, obs_dim)
    weights: np.ndarray  # (n_basis, act_dim)
    lengthscales: np.ndarray  # (obs_dim,)
    u_max: float

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.ndim == 1:
            self.weights = self.weights[:, None]
        self.lengthscales = np.asarray(self.lengthscales, dtype=float).reshape(-1)
        if self.centers.ndim != 2 or self.weights.shape[0] != self.centers.shape[0]:
            raise InvalidInputError("need one weight row per center")
        if self.lengthscales.size != self.centers.shape[1]:
            raise InvalidInputError("need one lengthscale per observation dimension")
        if np.any(self.lengthscales <= 0):
            raise InvalidInputError("lengthscales must be positive")
        if self.u_max <= 0:
            raise InvalidInputError("u_max must be positive")

    @property
    def n_basis(self) -> int:
        return self.centers.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.centers.shape[1]

    @property
    def act_dim(self) -> int:
        return self.weights.shape[1]

    def to_paramvector(self) -> ParamVector:
        return ParamVector.from_segments(
            {
                "centers": self.centers.reshape(-1),
                "weights": self.weights.reshape(-1),
                "log_lengthscales": np.log(self.lengthscales),
            }
        )

    def with_paramvector(self, pv: ParamVector) -> "RbfPolicy":
        return RbfPolicy(
            centers=np.asarray(pv.segment("centers")).reshape(self.n_basis, self.obs_dim),
            weights=np.asarray(pv.segment("weights")).reshape(self.n_basis, self.act_dim),
            lengthscales=np.exp(np.asarray(pv.segment("log_lengthscales"))),
            u_max=self.u_max,
        )


def policy_apply(xp, centers, weights, inv_ls, u_max, s_batch):
    """Batched actions ``(B, act_dim)``; generic in the array module ``xp``."""
    diff = (s_batch[:, None, :] - centers[None, :, :]) * inv_ls
    phi = xp.exp(-0.5 * xp.sum(diff * diff, axis=-1))
    return u_max * squash(xp, phi @ weights)


def policy_action(p: RbfPolicy, s) -> np.ndarray:
    """Action for one observation vector; magnitude never exceeds ``u_max``."""
    s = np.asarray(s, dtype=float).reshape(-1)
    if s.size != p.obs_dim:
        raise InvalidInputError(f"observation must have dimension {p.obs_dim}")
    return policy_apply(np, p.centers, p.weights, 1.0 / p.lengthscales, p.u_max, s[None, :])[0]


def policy_init(
    state_dim: int,
    n_basis: int,
    u_max: float,
    obs_scale,
    rng: RngStream,
    act_dim: int = 1,
) -> RbfPolicy:
    """Random policy: centers spread like the observations, unit weights."""
    obs_scale = np.asarray(obs_scale, dtype=float).reshape(-1)
    if obs_scale.size != state_dim or np.any(obs_scale <= 0):
        raise InvalidInputError("obs_scale must hold one positive entry per dimension")
    centers = rng.standard_normal((n_basis, state_dim)) * obs_scale
    weights = rng.standard_normal((n_basis, act_dim))
    return RbfPolicy(centers, weights, obs_scale.copy(), float(u_max))
