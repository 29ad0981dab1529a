"""Stationary and nonstationary covariance functions.

Five families are supported: squared exponential, Matern with
nu in {1/2, 3/2, 5/2}, and rational quadratic.  The nonstationary variant
lets every point carry its own per-family lengthscales, noise, signal
variance, and family mixture weights; kernel values between two points use
the Gibbs construction (harmonic-mean squared lengthscales with a
normalizing prefactor), which stays positive semi-definite for arbitrary
positive local lengthscales.

The scalar operations are the reference API.  The ``*_cross`` functions are
batched cores over point sets, generic in the array module ``xp`` (``numpy``
or ``jax.numpy``) so model code can trace them under jit.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import InvalidInputError


class KernelFamily(enum.Enum):
    SE = "SE"
    MATERN12 = "Matern12"
    MATERN32 = "Matern32"
    MATERN52 = "Matern52"
    RQ = "RQ"


FAMILIES: tuple[KernelFamily, ...] = (
    KernelFamily.SE,
    KernelFamily.MATERN12,
    KernelFamily.MATERN32,
    KernelFamily.MATERN52,
    KernelFamily.RQ,
)
N_FAMILIES = len(FAMILIES)

# Guards sqrt at zero squared distance so Matern gradients stay finite on the
# Gram diagonal (the distance there is identically zero, so the true gradient
# contribution is zero as well).
_SQRT_GUARD = 1e-36


@dataclass(frozen=True)
class StationaryParams:
    """Globally constant kernel parameters (one lengthscale per input dim)."""

    lengthscales: np.ndarray
    signal_variance: float
    noise_variance: float = 0.0
    rq_alpha: float = 1.0

    def __post_init__(self):
        ls = np.asarray(self.lengthscales, dtype=float).reshape(-1)
        if ls.size == 0 or np.any(ls <= 0) or not np.all(np.isfinite(ls)):
            raise InvalidInputError("lengthscales must be positive and finite")
        if self.signal_variance <= 0:
            raise InvalidInputError("signal_variance must be positive")
        if self.noise_variance < 0:
            raise InvalidInputError("noise_variance must be nonnegative")
        if self.rq_alpha <= 0:
            raise InvalidInputError("rq_alpha must be positive")
        object.__setattr__(self, "lengthscales", ls)


@dataclass(frozen=True)
class LocalParams:
    """Point-dependent kernel parameters predicted at a single input.

    ``lengthscales`` has one row per kernel family (shape ``(n_families,
    input_dim)``); ``mixture_weights`` holds one nonnegative weight per family
    summing to one.
    """

    lengthscales: np.ndarray
    mixture_weights: np.ndarray
    signal_variance: float
    noise_variance: float = 0.0

    def __post_init__(self):
        ls = np.asarray(self.lengthscales, dtype=float)
        if ls.ndim != 2 or ls.shape[0] != N_FAMILIES:
            raise InvalidInputError(
                f"lengthscales must have shape ({N_FAMILIES}, input_dim), got {ls.shape}"
            )
        if np.any(ls <= 0) or not np.all(np.isfinite(ls)):
            raise InvalidInputError("lengthscales must be positive and finite")
        w = np.asarray(self.mixture_weights, dtype=float).reshape(-1)
        if w.size != N_FAMILIES or np.any(w < 0):
            raise InvalidInputError(f"need {N_FAMILIES} nonnegative mixture weights")
        if abs(float(w.sum()) - 1.0) > 1e-9:
            raise InvalidInputError("mixture weights must sum to 1 within 1e-9")
        if self.signal_variance <= 0:
            raise InvalidInputError("signal_variance must be positive")
        if self.noise_variance < 0:
            raise InvalidInputError("noise_variance must be nonnegative")
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "mixture_weights", w)


class LocalParamsBatch(NamedTuple):
    """Local kernel parameters for a whole point set, in array form.

    Shapes: ``lengthscales (n_families, n, input_dim)``, ``weights
    (n_families, n)``, ``signal_variance (n,)``, ``noise_variance (n,)``.
    """

    lengthscales: np.ndarray
    weights: np.ndarray
    signal_variance: np.ndarray
    noise_variance: np.ndarray

    @classmethod
    def from_points(cls, params: Sequence[LocalParams]) -> "LocalParamsBatch":
        return cls(
            lengthscales=np.stack([p.lengthscales for p in params], axis=1),
            weights=np.stack([p.mixture_weights for p in params], axis=1),
            signal_variance=np.array([p.signal_variance for p in params]),
            noise_variance=np.array([p.noise_variance for p in params]),
        )


def profile(xp, family: KernelFamily, sq_dist, rq_alpha=1.0):
    """Unit-amplitude kernel profile as a function of squared distance."""
    if family is KernelFamily.SE:
        return xp.exp(-0.5 * sq_dist)
    if family is KernelFamily.RQ:
        return (1.0 + sq_dist / (2.0 * rq_alpha)) ** (-rq_alpha)
    r = xp.sqrt(sq_dist + _SQRT_GUARD)
    if family is KernelFamily.MATERN12:
        return xp.exp(-r)
    if family is KernelFamily.MATERN32:
        s = math.sqrt(3.0) * r
        return (1.0 + s) * xp.exp(-s)
    if family is KernelFamily.MATERN52:
        s = math.sqrt(5.0) * r
        return (1.0 + s + s * s / 3.0) * xp.exp(-s)
    raise InvalidInputError(f"unknown kernel family {family}")


def scaled_distance(x_i, x_j, lengthscales) -> float:
    """Euclidean norm of the elementwise-scaled difference ``(x_i - x_j)/l``."""
    x_i = np.asarray(x_i, dtype=float).reshape(-1)
    x_j = np.asarray(x_j, dtype=float).reshape(-1)
    ls = np.asarray(lengthscales, dtype=float).reshape(-1)
    if x_i.shape != x_j.shape or x_i.shape != ls.shape:
        raise InvalidInputError(
            f"dimension mismatch: {x_i.shape}, {x_j.shape}, {ls.shape}"
        )
    if np.any(ls <= 0):
        raise InvalidInputError("lengthscales must be positive")
    return float(np.linalg.norm((x_i - x_j) / ls))


def kernel_value(family: KernelFamily, r: float, rq_alpha: float = 1.0) -> float:
    """Kernel profile at scaled distance ``r``; lies in ``(0, 1]``."""
    if r < 0:
        raise InvalidInputError(f"r must be nonnegative, got {r}")
    if rq_alpha <= 0:
        raise InvalidInputError("rq_alpha must be positive")
    return float(profile(np, family, float(r) ** 2, rq_alpha))


def _gibbs_terms(xp, x_i, x_j, l_i, l_j):
    # one shared reciprocal and a single sqrt per pair keep this hot path lean
    inv = 2.0 / (l_i**2 + l_j**2)
    prefactor = xp.sqrt(xp.prod(l_i * l_j * inv, axis=-1))
    sq_dist = xp.sum((x_i - x_j) ** 2 * inv, axis=-1)
    return prefactor, sq_dist


def nonstationary_value(
    family: KernelFamily,
    x_i,
    x_j,
    params_i: LocalParams,
    params_j: LocalParams,
    rq_alpha: float = 1.0,
) -> float:
    """Gibbs-construction kernel between points with their own lengthscales.

    With equal lengthscales on both sides this reduces exactly to the
    stationary :func:`kernel_value`.  Unit amplitude; signal variance is
    applied by :func:`mixture_value`.
    """
    x_i = np.asarray(x_i, dtype=float).reshape(-1)
    x_j = np.asarray(x_j, dtype=float).reshape(-1)
    fi = FAMILIES.index(family)
    l_i = params_i.lengthscales[fi]
    l_j = params_j.lengthscales[fi]
    if x_i.shape != x_j.shape or l_i.shape != x_i.shape or l_j.shape != x_i.shape:
        raise InvalidInputError("point and lengthscale dimensions must match")
    prefactor, sq_dist = _gibbs_terms(np, x_i, x_j, l_i, l_j)
    return float(prefactor * profile(np, family, sq_dist, rq_alpha))


def mixture_value(
    x_i,
    x_j,
    params_i: LocalParams,
    params_j: LocalParams,
    rq_alpha: float = 1.0,
) -> float:
    """Convex family mixture with geometric-mean weights and signal variance."""
    total = 0.0
    for fi, family in enumerate(FAMILIES):
        w = math.sqrt(params_i.mixture_weights[fi] * params_j.mixture_weights[fi])
        if w == 0.0:
            continue
        total += w * nonstationary_value(family, x_i, x_j, params_i, params_j, rq_alpha)
    amp = math.sqrt(params_i.signal_variance * params_j.signal_variance)
    return float(amp * total)


def stationary_cross(xp, family: KernelFamily, x1, x2, lengthscales, signal_variance, rq_alpha=1.0):
    """Stationary cross-covariance matrix of shape ``(len(x1), len(x2))``."""
    diff = (x1 / lengthscales)[:, None, :] - (x2 / lengthscales)[None, :, :]
    sq_dist = xp.sum(diff**2, axis=-1)
    return signal_variance * profile(xp, family, sq_dist, rq_alpha)


def mixture_cross(xp, x1, local1: LocalParamsBatch, x2, local2: LocalParamsBatch, rq_alpha=1.0):
    """Nonstationary mixture cross-covariance of shape ``(len(x1), len(x2))``."""
    total = 0.0
    # sqrt on the per-side vectors, not on the pairwise matrices
    rw1, rw2 = xp.sqrt(local1.weights), xp.sqrt(local2.weights)
    for fi, family in enumerate(FAMILIES):
        l_i = local1.lengthscales[fi][:, None, :]
        l_j = local2.lengthscales[fi][None, :, :]
        prefactor, sq_dist = _gibbs_terms(
            xp, x1[:, None, :], x2[None, :, :], l_i, l_j
        )
        w = rw1[fi][:, None] * rw2[fi][None, :]
        total = total + w * prefactor * profile(xp, family, sq_dist, rq_alpha)
    amp = xp.sqrt(local1.signal_variance)[:, None] * xp.sqrt(local2.signal_variance)[None, :]
    return amp * total


def gram(
    X,
    X2,
    params,
    params2=None,
    family: KernelFamily = KernelFamily.SE,
    rq_alpha: float | None = None,
) -> np.ndarray:
    """Covariance matrix between point sets.

    ``params`` is either a single :class:`StationaryParams` (with ``family``
    selecting the profile) or a sequence of per-point :class:`LocalParams`
    (mixture kernel).  Passing ``X2=None`` requests the symmetric training
    Gram over one point set; noise variance is then added on the diagonal
    (per point in the local case).  With an explicit ``X2`` the result is a
    noise-free cross-covariance.  ``params2`` supplies the second set's local
    parameters for cross-Grams.
    """
    x1 = np.asarray(X, dtype=float)
    if x1.ndim != 2:
        raise InvalidInputError(f"X must be 2-D, got shape {x1.shape}")
    symmetric = X2 is None
    x2 = x1 if symmetric else np.asarray(X2, dtype=float)
    if x2.ndim != 2 or x2.shape[1] != x1.shape[1]:
        raise InvalidInputError("X2 must be 2-D with matching input dimension")

    if isinstance(params, StationaryParams):
        if params.lengthscales.size != x1.shape[1]:
            raise InvalidInputError("lengthscale count must match input dimension")
        k = stationary_cross(
            np, family, x1, x2, params.lengthscales, params.signal_variance, params.rq_alpha
        )
        if symmetric:
            k = k + params.noise_variance * np.eye(x1.shape[0])
        return k

    plist1 = list(params)
    if len(plist1) != x1.shape[0]:
        raise InvalidInputError("need one LocalParams per point in X")
    batch1 = LocalParamsBatch.from_points(plist1)
    if symmetric:
        batch2 = batch1
    else:
        plist2 = list(params2) if params2 is not None else None
        if plist2 is None or len(plist2) != x2.shape[0]:
            raise InvalidInputError("need one LocalParams per point in X2")
        batch2 = LocalParamsBatch.from_points(plist2)
    k = mixture_cross(np, x1, batch1, x2, batch2, rq_alpha if rq_alpha is not None else 1.0)
    if symmetric:
        k = k + np.diag(batch1.noise_variance)
    return np.asarray(k)
