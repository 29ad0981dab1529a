"""Exact Gaussian-process regression with per-output-dimension kernels.

Each output dimension gets its own stationary kernel (squared exponential by
default) whose log-parameters are fitted by maximizing the marginal
likelihood.  Posterior means and variances follow the standard noise-free
query form: the predictive variance contains epistemic and latent-function
uncertainty but no observation noise.

The heavy lifting is shared between a plain numpy path (reference API) and a
traceable core over a padded :class:`GpCache`, which rollout objectives jit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import jax.numpy as jnp
import jax.scipy.linalg as jsl
import numpy as np
import scipy.linalg

from .. import kernels
from ..diffopt import Objective, OptimConfig, ParamVector, optimize
from ..errors import InvalidInputError
from ..kernels import KernelFamily, StationaryParams
from ..numerics import RngStream, jittered_cholesky
from .base import (
    VARIANCE_FLOOR,
    Standardizer,
    pad_rows,
    padded_size,
    validate_data,
    wrap_predictions,
)

_CHUNK = 4096

# Additive floor on the fitted noise variance (standardized target space);
# keeps the training Gram factorizable throughout optimization.
NOISE_FLOOR = 1e-8

# Soft cap on the fitted signal-to-noise ratio.  Deterministic simulators
# push the likelihood-optimal noise toward zero (with signal variance and
# lengthscales diverging to compensate), which leaves numerically singular
# Grams for everything downstream; the barrier is ~0 below the cap and
# explodes past it, so well-behaved optima are unaffected.
SNR_CAP = 1e3
SNR_POWER = 30

DEFAULT_FIT_CONFIG = OptimConfig(
    learning_rate=0.05, max_steps=250, restarts=2, patience=25, restart_scale=1.0
)


class GpCache(NamedTuple):
    """Padded arrays consumed by :func:`gp_predict_core` under jit."""

    xs: jnp.ndarray  # (n_pad, d) standardized training inputs
    alpha: jnp.ndarray  # (dy, n_pad)
    u: jnp.ndarray  # (dy, n_pad, n_pad), inverse-transpose Cholesky factors
    inv_ls: jnp.ndarray  # (dy, d)
    sv: jnp.ndarray  # (dy,)
    x_mean: jnp.ndarray
    x_scale: jnp.ndarray
    y_mean: jnp.ndarray
    y_scale: jnp.ndarray
    rq_alpha: jnp.ndarray  # (dy,)


@dataclass
class GpModel:
    """Fitted exact GP over ``(state, action) -> state-delta``."""

    family: KernelFamily
    x_std: Standardizer
    y_std: Standardizer
    train_inputs: np.ndarray
    train_targets: np.ndarray
    params: tuple[StationaryParams, ...]
    xs: np.ndarray
    chol: np.ndarray
    alpha: np.ndarray
    uinv: np.ndarray

    @classmethod
    def from_params(
        cls,
        inputs,
        targets,
        params,
        family: KernelFamily = KernelFamily.SE,
        x_std: Standardizer | None = None,
        y_std: Standardizer | None = None,
    ) -> "GpModel":
        """Assemble a model (and its factorization) from given parameters.

        ``params`` live in the standardized space defined by ``x_std`` and
        ``y_std`` (identity standardizers by default, i.e. raw units).
        """
        x, y = validate_data(inputs, targets)
        dy = y.shape[1]
        params = tuple(params)
        if len(params) != dy:
            raise InvalidInputError(f"need one StationaryParams per output dim ({dy})")
        x_std = x_std or Standardizer.identity(x.shape[1])
        y_std = y_std or Standardizer.identity(dy)
        xs = x_std.transform(x)
        ys = y_std.transform(y)
        n = xs.shape[0]
        chol = np.empty((dy, n, n))
        alpha = np.empty((dy, n))
        uinv = np.empty((dy, n, n))
        for d, p in enumerate(params):
            k = kernels.stationary_cross(
                np, family, xs, xs, p.lengthscales, p.signal_variance, p.rq_alpha
            ) + p.noise_variance * np.eye(n)
            l, _ = jittered_cholesky(k)
            chol[d] = l
            alpha[d] = scipy.linalg.cho_solve((l, True), ys[:, d])
            uinv[d] = scipy.linalg.solve_triangular(l, np.eye(n), lower=True).T
        return cls(family, x_std, y_std, x, y, params, xs, chol, alpha, uinv)

    @property
    def n_train(self) -> int:
        return self.xs.shape[0]

    @property
    def output_dim(self) -> int:
        return self.train_targets.shape[1]

    def raw_params(self) -> tuple[StationaryParams, ...]:
        """Kernel parameters expressed in the original data units."""
        out = []
        for d, p in enumerate(self.params):
            out.append(
                StationaryParams(
                    lengthscales=p.lengthscales * self.x_std.scale,
                    signal_variance=p.signal_variance * float(self.y_std.scale[d] ** 2),
                    noise_variance=p.noise_variance * float(self.y_std.scale[d] ** 2),
                    rq_alpha=p.rq_alpha,
                )
            )
        return tuple(out)

    def predict_arrays(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        q = np.asarray(queries, dtype=float)
        if q.ndim != 2 or q.shape[1] != self.train_inputs.shape[1]:
            raise InvalidInputError(
                f"queries must be (B, {self.train_inputs.shape[1]}), got {q.shape}"
            )
        dy = self.output_dim
        means = np.empty((q.shape[0], dy))
        variances = np.empty((q.shape[0], dy))
        for lo in range(0, q.shape[0], _CHUNK):
            sl = slice(lo, lo + _CHUNK)
            qs = self.x_std.transform(q[sl])
            for d, p in enumerate(self.params):
                k = kernels.stationary_cross(
                    np, self.family, qs, self.xs, p.lengthscales, p.signal_variance, p.rq_alpha
                )
                m = k @ self.alpha[d]
                t = k @ self.uinv[d]
                v = p.signal_variance - np.sum(t * t, axis=-1)
                means[sl, d] = self.y_std.mean[d] + self.y_std.scale[d] * m
                variances[sl, d] = np.maximum(
                    float(self.y_std.scale[d] ** 2) * v, VARIANCE_FLOOR
                )
        return means, variances

    def rollout_cache(self, dtype=jnp.float64) -> GpCache:
        n_pad = padded_size(self.n_train)
        inv_ls = np.stack([1.0 / p.lengthscales for p in self.params])
        sv = np.array([p.signal_variance for p in self.params])
        rq = np.array([p.rq_alpha for p in self.params])
        arr = lambda a: jnp.asarray(a, dtype=dtype)
        return GpCache(
            xs=arr(pad_rows(self.xs, n_pad)),
            alpha=arr(pad_rows(self.alpha.T, n_pad).T),
            u=arr(np.stack([pad_rows(pad_rows(u, n_pad).T, n_pad).T for u in self.uinv])),
            inv_ls=arr(inv_ls),
            sv=arr(sv),
            x_mean=arr(self.x_std.mean),
            x_scale=arr(self.x_std.scale),
            y_mean=arr(self.y_std.mean),
            y_scale=arr(self.y_std.scale),
            rq_alpha=arr(rq),
        )


def gp_predict_core(cache: GpCache, xq, family: KernelFamily):
    """Traceable batched prediction: ``xq (B, d)`` raw -> ``(mean, var) (B, dy)``.

    ``family`` must be a compile-time constant.
    """
    dy = cache.alpha.shape[0]
    qs = (xq - cache.x_mean) / cache.x_scale
    means, variances = [], []
    for d in range(dy):
        q1 = qs * cache.inv_ls[d]
        x1 = cache.xs * cache.inv_ls[d]
        sq = jnp.sum(q1 * q1, -1)[:, None] - 2.0 * q1 @ x1.T + jnp.sum(x1 * x1, -1)[None, :]
        k = cache.sv[d] * kernels.profile(jnp, family, jnp.maximum(sq, 0.0), cache.rq_alpha[d])
        t = k @ cache.u[d]
        means.append(k @ cache.alpha[d])
        variances.append(cache.sv[d] - jnp.sum(t * t, -1))
    mean = cache.y_mean + cache.y_scale * jnp.stack(means, axis=-1)
    var = cache.y_scale**2 * jnp.stack(variances, axis=-1)
    return mean, jnp.maximum(var, VARIANCE_FLOOR)


def _gp_nll(values, static, xs, ys, mask, n_real):
    """Summed negative log marginal likelihood over output dimensions.

    ``xs``/``ys`` are zero-padded; ``mask`` marks real rows.  Padded rows get
    a unit diagonal, contributing nothing to the quadratic form or log
    determinant.
    """
    dy, d, family = static
    n_pad = xs.shape[0]
    log_ls = values[: dy * d].reshape(dy, d)
    log_sv = values[dy * d : dy * d + dy]
    log_noise = values[dy * d + dy : dy * d + 2 * dy]
    log_rq = values[dy * d + 2 * dy :]
    m2 = mask[:, None] * mask[None, :]
    eye = jnp.eye(n_pad)
    total = 0.0
    for i in range(dy):
        ls = jnp.exp(log_ls[i])
        sv = jnp.exp(log_sv[i])
        noise = jnp.exp(log_noise[i]) + NOISE_FLOOR
        rq_alpha = jnp.exp(log_rq[i]) if log_rq.shape[0] else 1.0
        k = kernels.stationary_cross(jnp, family, xs, xs, ls, sv, rq_alpha)
        k = k * m2 + eye * (1.0 - mask) + (noise * mask) * eye
        l = jnp.linalg.cholesky(k)
        y = ys[:, i] * mask
        a = jsl.cho_solve((l, True), y)
        total = total + 0.5 * jnp.dot(y, a) + jnp.sum(jnp.log(jnp.diag(l)))
    return total + 0.5 * dy * n_real * math.log(2.0 * math.pi)


def _gp_fit_nll(values, static, xs, ys, mask, n_real):
    """Fit objective: the marginal likelihood plus the signal-to-noise barrier."""
    dy, d, _ = static
    log_sv = values[dy * d : dy * d + dy]
    log_noise = values[dy * d + dy : dy * d + 2 * dy]
    ratio = (log_sv - log_noise) / math.log(SNR_CAP)
    return _gp_nll(values, static, xs, ys, mask, n_real) + jnp.sum(ratio**SNR_POWER)


def _theta_from_params(params, d, fit_rq: bool) -> np.ndarray:
    log_ls = np.concatenate([np.log(p.lengthscales) for p in params])
    log_sv = np.log([p.signal_variance for p in params])
    log_noise = np.log([max(p.noise_variance, NOISE_FLOOR) for p in params])
    parts = [log_ls, log_sv, log_noise]
    if fit_rq:
        parts.append(np.log([p.rq_alpha for p in params]))
    return np.concatenate(parts)


def gp_fit(
    inputs,
    targets,
    rng: RngStream,
    cfg: OptimConfig | None = None,
    family: KernelFamily = KernelFamily.SE,
    standardize: bool = True,
    init_model: GpModel | None = None,
) -> GpModel:
    """Fit kernel parameters by maximizing the marginal likelihood.

    Each output dimension is fitted independently (their likelihoods are
    separable, so one joint optimization over the concatenated log-parameters
    gives the same result).  ``init_model`` warm-starts from a previous fit;
    its parameters are converted through both standardizers.
    """
    x, y = validate_data(inputs, targets)
    dy, d = y.shape[1], x.shape[1]
    cfg = cfg or DEFAULT_FIT_CONFIG
    x_std = Standardizer.fit(x) if standardize else Standardizer.identity(d)
    y_std = Standardizer.fit(y) if standardize else Standardizer.identity(dy)
    xs, ys = x_std.transform(x), y_std.transform(y)

    fit_rq = family is KernelFamily.RQ
    if init_model is not None and init_model.family is family:
        raw = init_model.raw_params()
        init_params = [
            StationaryParams(
                lengthscales=np.maximum(p.lengthscales / x_std.scale, 1e-6),
                signal_variance=max(p.signal_variance / float(y_std.scale[i] ** 2), 1e-8),
                noise_variance=max(p.noise_variance / float(y_std.scale[i] ** 2), NOISE_FLOOR),
                rq_alpha=p.rq_alpha,
            )
            for i, p in enumerate(raw)
        ]
    else:
        init_params = [
            StationaryParams(np.ones(d), 1.0, noise_variance=1e-2) for _ in range(dy)
        ]
    theta0 = _theta_from_params(init_params, d, fit_rq)

    n_pad = padded_size(xs.shape[0])
    mask = pad_rows(np.ones(xs.shape[0]), n_pad)
    objective = Objective(
        fun=_gp_fit_nll,
        static=(dy, d, family),
        args=(
            jnp.asarray(pad_rows(xs, n_pad)),
            jnp.asarray(pad_rows(ys, n_pad)),
            jnp.asarray(mask),
            float(xs.shape[0]),
        ),
    )
    result = optimize(objective, ParamVector(theta0), cfg, rng)
    vals = np.asarray(result.values)
    log_ls = vals[: dy * d].reshape(dy, d)
    log_sv = vals[dy * d : dy * d + dy]
    log_noise = vals[dy * d + dy : dy * d + 2 * dy]
    log_rq = vals[dy * d + 2 * dy :]
    params = [
        StationaryParams(
            lengthscales=np.exp(log_ls[i]),
            signal_variance=float(np.exp(log_sv[i])),
            noise_variance=float(np.exp(log_noise[i]) + NOISE_FLOOR),
            rq_alpha=float(np.exp(log_rq[i])) if fit_rq else 1.0,
        )
        for i in range(dy)
    ]
    return GpModel.from_params(x, y, params, family=family, x_std=x_std, y_std=y_std)


def gp_predict(model: GpModel, queries) -> list:
    """Posterior predictions at ``queries`` as per-point Gaussians."""
    means, variances = model.predict_arrays(np.atleast_2d(np.asarray(queries, dtype=float)))
    return wrap_predictions(means, variances)
