"""Probabilistic neural networks and their ensemble.

A PNN maps an input to a Gaussian per output dimension through two heads
(mean and raw variance); training minimizes the Gaussian negative
log-likelihood ``(mu - f)^2 / sigma + log sigma`` (variance parametrized by
softplus with a small floor) plus a weight-decay penalty over all trainable
parameters.  The ensemble aggregates members by plain arithmetic means of
both the mean and the variance heads; no between-member spread term is
added.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import jax.numpy as jnp
import numpy as np

from ..diffopt import Objective, OptimConfig, ParamVector, optimize
from ..errors import InvalidInputError
from ..numerics import RngStream
from .base import (
    Standardizer,
    validate_data,
    wrap_predictions,
)
from .dgcn import _init_weights, _nn_apply, _softplus, _unflatten, _weight_shapes

VAR_FLOOR = 1e-6

DEFAULT_WIDTHS = (200, 200, 200)
DEFAULT_WEIGHT_DECAY = 1e-4
DEFAULT_FIT_CONFIG = OptimConfig(
    learning_rate=1e-3, max_steps=600, restarts=1, patience=150, restart_scale=0.1
)


@dataclass
class PnnModel:
    """Single probabilistic network over ``(state, action) -> state-delta``."""

    weights: dict
    widths: tuple[int, ...]
    weight_decay: float
    x_std: Standardizer
    y_std: Standardizer
    output_dim: int

    @property
    def input_dim(self) -> int:
        first = self.weights["w0"] if "w0" in self.weights else self.weights["wh"]
        return first.shape[0]

    def forward_std(self, xp, xs):
        """Standardized-space heads: ``(mu (B, dy), var (B, dy))``."""
        raw = _nn_apply(xp, self.weights, xs, len(self.widths))
        mu = raw[..., : self.output_dim]
        var = _softplus(xp, raw[..., self.output_dim :]) + VAR_FLOOR
        return mu, var

    def predict_arrays(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        q = np.asarray(queries, dtype=float)
        if q.ndim != 2 or q.shape[1] != self.input_dim:
            raise InvalidInputError(f"queries must be (B, {self.input_dim}), got {q.shape}")
        mu, var = self.forward_std(np, self.x_std.transform(q))
        return self.y_std.mean + self.y_std.scale * mu, self.y_std.scale**2 * var

    def flat_params(self) -> ParamVector:
        return ParamVector.from_segments(self.weights)


@dataclass
class EpnnModel:
    """Ensemble of PNNs with identical architectures."""

    members: tuple[PnnModel, ...]

    def __post_init__(self):
        members = tuple(self.members)
        if not members:
            raise InvalidInputError("ensemble needs at least one member")
        arch = members[0].widths
        if any(m.widths != arch for m in members):
            raise InvalidInputError("ensemble members must share one architecture")
        object.__setattr__(self, "members", members)

    @property
    def input_dim(self) -> int:
        return self.members[0].input_dim

    @property
    def output_dim(self) -> int:
        return self.members[0].output_dim

    def predict_arrays(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mus, vs = zip(*(m.predict_arrays(queries) for m in self.members))
        return np.mean(mus, axis=0), np.mean(vs, axis=0)

    def rollout_cache(self, dtype=jnp.float64) -> "EpnnCache":
        arr = lambda a: jnp.asarray(a, dtype=dtype)
        m0 = self.members[0]
        names = [name for name, _ in _weight_shapes(m0.input_dim, m0.widths, 1)]
        stacked = tuple(
            arr(np.stack([m.weights[name] for m in self.members])) for name in names
        )
        return EpnnCache(
            weights=stacked,
            x_mean=arr(m0.x_std.mean),
            x_scale=arr(m0.x_std.scale),
            y_mean=arr(m0.y_std.mean),
            y_scale=arr(m0.y_std.scale),
        )


class EpnnCache(NamedTuple):
    """Member-stacked arrays consumed by :func:`epnn_predict_core` under jit."""

    weights: tuple  # each (m, ...) stacked over members
    x_mean: jnp.ndarray
    x_scale: jnp.ndarray
    y_mean: jnp.ndarray
    y_scale: jnp.ndarray


def epnn_predict_core(cache: EpnnCache, xq, static):
    """Traceable batched ensemble prediction: means of member heads."""
    widths, dy, input_dim = static
    names = [name for name, _ in _weight_shapes(input_dim, widths, 1)]
    n_members = cache.weights[0].shape[0]
    qs = (xq - cache.x_mean) / cache.x_scale
    mus, vs = [], []
    for j in range(n_members):
        weights = {name: w[j] for name, w in zip(names, cache.weights)}
        raw = _nn_apply(jnp, weights, qs, len(widths))
        mus.append(raw[..., :dy])
        vs.append(_softplus(jnp, raw[..., dy:]) + VAR_FLOOR)
    mu = sum(mus) / n_members
    var = sum(vs) / n_members
    return cache.y_mean + cache.y_scale * mu, cache.y_scale**2 * var


def _pnn_loss_fun(values, static, x, y):
    widths, dy, weight_decay = static
    weights, _ = _unflatten(values, x.shape[1], widths, 2 * dy)
    raw = _nn_apply(jnp, weights, x, len(widths))
    mu = raw[..., :dy]
    var = _softplus(jnp, raw[..., dy:]) + VAR_FLOOR
    nll = jnp.mean((mu - y) ** 2 / var + jnp.log(var))
    return nll + weight_decay * jnp.sum(values**2)


def pnn_loss(model: PnnModel, inputs, targets) -> float:
    """Mean Gaussian NLL over samples and output dims, plus weight decay.

    Evaluated in the model's standardized spaces (identity standardizers make
    it the raw-data loss).  The decay term sums the squares of every
    trainable parameter.
    """
    x, y = validate_data(inputs, targets)
    xs = model.x_std.transform(x)
    ys = model.y_std.transform(y)
    mu, var = model.forward_std(np, xs)
    nll = float(np.mean((mu - ys) ** 2 / var + np.log(var)))
    sq = sum(float(np.sum(w**2)) for w in model.weights.values())
    return nll + model.weight_decay * sq


def pnn_fit(
    inputs,
    targets,
    rng: RngStream,
    widths: tuple[int, ...] = DEFAULT_WIDTHS,
    weight_decay: float = DEFAULT_WEIGHT_DECAY,
    cfg: OptimConfig | None = None,
    batch_size: int = 64,
    standardize: bool = True,
    x_std: Standardizer | None = None,
    y_std: Standardizer | None = None,
) -> PnnModel:
    """Train one PNN with mini-batch Adam on the Gaussian NLL."""
    x, y = validate_data(inputs, targets)
    dy, d = y.shape[1], x.shape[1]
    cfg = cfg or DEFAULT_FIT_CONFIG
    if x_std is None:
        x_std = Standardizer.fit(x) if standardize else Standardizer.identity(d)
    if y_std is None:
        y_std = Standardizer.fit(y) if standardize else Standardizer.identity(dy)
    xs, ys = x_std.transform(x), y_std.transform(y)
    n = xs.shape[0]
    b = min(batch_size, n)

    weights0 = _init_weights(d, tuple(widths), 2 * dy, rng.substream("init"))
    theta0 = ParamVector.from_segments(weights0)

    def sample_xy(gen: np.random.Generator):
        idx = gen.choice(n, size=b, replace=False)
        return jnp.asarray(xs[idx]), jnp.asarray(ys[idx])

    objective = Objective(
        fun=_pnn_loss_fun,
        static=(tuple(widths), dy, float(weight_decay)),
        sample_args=sample_xy,
    )
    result = optimize(objective, theta0, cfg, rng.substream("opt"))
    weights, _ = _unflatten(np.asarray(result.values), d, tuple(widths), 2 * dy)
    return PnnModel(
        weights={k: np.asarray(v) for k, v in weights.items()},
        widths=tuple(widths),
        weight_decay=float(weight_decay),
        x_std=x_std,
        y_std=y_std,
        output_dim=dy,
    )


def epnn_fit(
    inputs,
    targets,
    rng: RngStream,
    n_members: int = 5,
    widths: tuple[int, ...] = DEFAULT_WIDTHS,
    weight_decay: float = DEFAULT_WEIGHT_DECAY,
    cfg: OptimConfig | None = None,
    batch_size: int = 64,
    standardize: bool = True,
) -> EpnnModel:
    """Train an ensemble whose members differ by weight init and batch order."""
    x, y = validate_data(inputs, targets)
    x_std = Standardizer.fit(x) if standardize else Standardizer.identity(x.shape[1])
    y_std = Standardizer.fit(y) if standardize else Standardizer.identity(y.shape[1])
    members = [
        pnn_fit(
            x,
            y,
            member_rng,
            widths=widths,
            weight_decay=weight_decay,
            cfg=cfg,
            batch_size=batch_size,
            x_std=x_std,
            y_std=y_std,
        )
        for member_rng in rng.spawn(int(n_members))
    ]
    return EpnnModel(tuple(members))


def epnn_predict(model: EpnnModel, x):
    """Ensemble prediction at one point (or a batch) by arithmetic averaging."""
    q = np.atleast_2d(np.asarray(x, dtype=float))
    means, variances = model.predict_arrays(q)
    preds = wrap_predictions(means, variances)
    return preds[0] if np.asarray(x).ndim == 1 else preds
