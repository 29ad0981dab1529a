"""Nonstationary GP with locally predicted kernel parameters.

A small feed-forward network maps each input point to local kernel
parameters: per-family lengthscales, family mixture weights, signal
variance, and heteroscedastic noise variance, separately for every output
dimension.  The covariance between two points combines the five kernel
families through the Gibbs construction with geometric-mean weights, so the
Gram matrix stays positive semi-definite even though every point carries its
own lengthscales.  Training maximizes the marginal likelihood of random
mini-batches; prediction conditions on the full training set exactly like an
ordinary GP.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import jax.numpy as jnp
import jax.scipy.linalg as jsl
import numpy as np
import scipy.linalg

from ..diffopt import Objective, OptimConfig, ParamVector, optimize
from ..errors import InvalidInputError
from ..kernels import FAMILIES, LocalParams, LocalParamsBatch, mixture_cross
from ..numerics import RngStream, jittered_cholesky
from .base import (
    VARIANCE_FLOOR,
    Standardizer,
    pad_rows,
    padded_size,
    validate_data,
    wrap_predictions,
)

N_F = len(FAMILIES)
_CHUNK = 2048

LENGTHSCALE_FLOOR = 1e-6
SIGNAL_FLOOR = 1e-6
NOISE_HEAD_FLOOR = 1e-8
# Extra diagonal stabilizer on mini-batch Grams during fitting.
FIT_JITTER = 1e-8

DEFAULT_WIDTHS = (64, 64)
# Applied to weight matrices only; strong enough that the predicted fields
# stay near-constant on stationary data yet free to move where the
# likelihood gain is real (heteroscedastic noise, local structure).
DEFAULT_WEIGHT_DECAY = 0.3
# Adam moves a coordinate by roughly the learning rate per step, and the
# noise head often has to travel several units in raw space; keep the step
# budget generous enough for that.
DEFAULT_FIT_CONFIG = OptimConfig(
    learning_rate=1e-2, max_steps=800, restarts=1, patience=200, restart_scale=0.1
)


def head_size(input_dim: int) -> int:
    """Raw network outputs per output dimension."""
    return N_F * input_dim + N_F + 2


def _weight_shapes(input_dim: int, widths: tuple[int, ...], out_dim: int):
    shapes = []
    fan_in = input_dim
    for i, w in enumerate(widths):
        shapes.append((f"w{i}", (fan_in, w)))
        shapes.append((f"b{i}", (w,)))
        fan_in = w
    shapes.append(("wh", (fan_in, out_dim)))
    shapes.append(("bh", (out_dim,)))
    return shapes


def _init_weights(input_dim, widths, out_dim, rng: RngStream) -> dict[str, np.ndarray]:
    weights = {}
    for name, shape in _weight_shapes(input_dim, widths, out_dim):
        if name.startswith("w"):
            std = math.sqrt(2.0 / (shape[0] + shape[1]))
            weights[name] = std * rng.standard_normal(shape)
        else:
            weights[name] = np.zeros(shape)
    return weights


def _flatten_weights(weights: dict[str, np.ndarray], extra: dict[str, np.ndarray]) -> ParamVector:
    segs = {k: v for k, v in weights.items()}
    segs.update(extra)
    return ParamVector.from_segments(segs)


def _unflatten(values, input_dim, widths, out_dim):
    shapes = _weight_shapes(input_dim, widths, out_dim)
    weights, off = {}, 0
    for name, shape in shapes:
        size = int(np.prod(shape))
        weights[name] = values[off : off + size].reshape(shape)
        off += size
    return weights, off


def _nn_apply(xp, weights, x, n_hidden: int):
    h = x
    for i in range(n_hidden):
        h = xp.tanh(h @ weights[f"w{i}"] + weights[f"b{i}"])
    return h @ weights["wh"] + weights["bh"]


def _softplus(xp, x):
    return xp.logaddexp(x, 0.0)


def _local_fields(xp, raw, dy: int, input_dim: int):
    """Split raw head outputs ``(B, dy*H)`` into transformed local parameters.

    Returns ``ls (dy, F, B, d)``, ``weights (dy, F, B)``, ``sv (dy, B)``,
    ``noise (dy, B)``.
    """
    b = raw.shape[0]
    h = head_size(input_dim)
    a = raw.reshape(b, dy, h)
    ls_raw = a[..., : N_F * input_dim].reshape(b, dy, N_F, input_dim)
    w_raw = a[..., N_F * input_dim : N_F * input_dim + N_F]
    noise_raw = a[..., N_F * input_dim + N_F]
    sv_raw = a[..., N_F * input_dim + N_F + 1]
    ls = xp.transpose(_softplus(xp, ls_raw) + LENGTHSCALE_FLOOR, (1, 2, 0, 3))
    w_shift = w_raw - xp.max(w_raw, axis=-1, keepdims=True)
    w = xp.exp(w_shift)
    w = w / xp.sum(w, axis=-1, keepdims=True)
    w = xp.transpose(w, (1, 2, 0))
    sv = xp.transpose(_softplus(xp, sv_raw) + SIGNAL_FLOOR, (1, 0))
    noise = xp.transpose(_softplus(xp, noise_raw) + NOISE_HEAD_FLOOR, (1, 0))
    return ls, w, sv, noise


class DgcnCache(NamedTuple):
    """Padded arrays consumed by :func:`dgcn_predict_core` under jit."""

    weights: tuple  # flattened nn weight arrays in _weight_shapes order
    xs: jnp.ndarray  # (n_pad, d)
    ls: jnp.ndarray  # (dy, F, n_pad, d), padded with ones
    w: jnp.ndarray  # (dy, F, n_pad)
    sv: jnp.ndarray  # (dy, n_pad), padded with ones
    alpha: jnp.ndarray  # (dy, n_pad)
    u: jnp.ndarray  # (dy, n_pad, n_pad)
    rq_alpha: jnp.ndarray
    x_mean: jnp.ndarray
    x_scale: jnp.ndarray
    y_mean: jnp.ndarray
    y_scale: jnp.ndarray


@dataclass
class DgcnModel:
    """Fitted nonstationary GP over ``(state, action) -> state-delta``."""

    weights: dict
    widths: tuple[int, ...]
    rq_alpha: float
    x_std: Standardizer
    y_std: Standardizer
    train_inputs: np.ndarray
    train_targets: np.ndarray
    xs: np.ndarray
    local: tuple[LocalParamsBatch, ...]  # one batch per output dim, at train points
    chol: np.ndarray
    alpha: np.ndarray
    uinv: np.ndarray

    @property
    def input_dim(self) -> int:
        return self.train_inputs.shape[1]

    @property
    def output_dim(self) -> int:
        return self.train_targets.shape[1]

    @property
    def n_train(self) -> int:
        return self.xs.shape[0]

    def forward_fields(self, queries_std: np.ndarray):
        """Local parameter arrays at standardized query points."""
        raw = _nn_apply(np, self.weights, queries_std, len(self.widths))
        return _local_fields(np, raw, self.output_dim, self.input_dim)

    def predict_arrays(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        q = np.asarray(queries, dtype=float)
        if q.ndim != 2 or q.shape[1] != self.input_dim:
            raise InvalidInputError(f"queries must be (B, {self.input_dim}), got {q.shape}")
        dy = self.output_dim
        means = np.empty((q.shape[0], dy))
        variances = np.empty((q.shape[0], dy))
        for lo in range(0, q.shape[0], _CHUNK):
            sl = slice(lo, lo + _CHUNK)
            qs = self.x_std.transform(q[sl])
            ls, w, sv, _ = self.forward_fields(qs)
            for i in range(dy):
                qbatch = LocalParamsBatch(ls[i], w[i], sv[i], np.zeros(qs.shape[0]))
                k = mixture_cross(np, qs, qbatch, self.xs, self.local[i], self.rq_alpha)
                m = k @ self.alpha[i]
                t = k @ self.uinv[i]
                v = sv[i] - np.sum(t * t, axis=-1)
                means[sl, i] = self.y_std.mean[i] + self.y_std.scale[i] * m
                variances[sl, i] = np.maximum(
                    float(self.y_std.scale[i] ** 2) * v, VARIANCE_FLOOR
                )
        return means, variances

    def rollout_cache(self, dtype=jnp.float64) -> DgcnCache:
        n_pad = padded_size(self.n_train)
        arr = lambda a: jnp.asarray(a, dtype=dtype)
        ls = np.stack([b.lengthscales for b in self.local])  # (dy,F,n,d)
        w = np.stack([b.weights for b in self.local])
        sv = np.stack([b.signal_variance for b in self.local])
        pad = n_pad - self.n_train
        if pad:
            ls = np.pad(ls, ((0, 0), (0, 0), (0, pad), (0, 0)), constant_values=1.0)
            w = np.pad(w, ((0, 0), (0, 0), (0, pad)), constant_values=1.0 / N_F)
            sv = np.pad(sv, ((0, 0), (0, pad)), constant_values=1.0)
        weight_arrays = tuple(
            arr(self.weights[name]) for name, _ in _weight_shapes(self.input_dim, self.widths, 1)
        )
        return DgcnCache(
            weights=weight_arrays,
            xs=arr(pad_rows(self.xs, n_pad)),
            ls=arr(ls),
            w=arr(w),
            sv=arr(sv),
            alpha=arr(pad_rows(self.alpha.T, n_pad).T),
            u=arr(np.stack([pad_rows(pad_rows(u, n_pad).T, n_pad).T for u in self.uinv])),
            rq_alpha=arr(self.rq_alpha),
            x_mean=arr(self.x_std.mean),
            x_scale=arr(self.x_std.scale),
            y_mean=arr(self.y_std.mean),
            y_scale=arr(self.y_std.scale),
        )


def dgcn_predict_core(cache: DgcnCache, xq, static):
    """Traceable batched prediction: ``xq (B, d)`` raw -> ``(mean, var) (B, dy)``.

    ``static = (widths, dy, input_dim)`` must be compile-time constants.
    """
    widths, dy, input_dim = static
    names = [name for name, _ in _weight_shapes(input_dim, widths, 1)]
    weights = dict(zip(names, cache.weights))
    qs = (xq - cache.x_mean) / cache.x_scale
    raw = _nn_apply(jnp, weights, qs, len(widths))
    ls, w, sv, _ = _local_fields(jnp, raw, dy, input_dim)
    means, variances = [], []
    for i in range(dy):
        qbatch = LocalParamsBatch(ls[i], w[i], sv[i], jnp.zeros(qs.shape[0]))
        tbatch = LocalParamsBatch(
            cache.ls[i], cache.w[i], cache.sv[i], jnp.zeros(cache.xs.shape[0])
        )
        k = mixture_cross(jnp, qs, qbatch, cache.xs, tbatch, cache.rq_alpha)
        t = k @ cache.u[i]
        means.append(k @ cache.alpha[i])
        variances.append(sv[i] - jnp.sum(t * t, -1))
    mean = cache.y_mean + cache.y_scale * jnp.stack(means, axis=-1)
    var = cache.y_scale**2 * jnp.stack(variances, axis=-1)
    return mean, jnp.maximum(var, VARIANCE_FLOOR)


def _dgcn_nll(values, static, xs, ys, idx):
    """Marginal likelihood of a random subset under the mixture kernel."""
    widths, dy, input_dim, weight_decay = static
    weights, off = _unflatten(values, input_dim, widths, dy * head_size(input_dim))
    rq_alpha = jnp.exp(values[off])
    xb = xs[idx]
    yb = ys[idx]
    b = xb.shape[0]
    raw = _nn_apply(jnp, weights, xb, len(widths))
    ls, w, sv, noise = _local_fields(jnp, raw, dy, input_dim)
    eye = jnp.eye(b)
    total = 0.0
    for i in range(dy):
        batch = LocalParamsBatch(ls[i], w[i], sv[i], noise[i])
        k = mixture_cross(jnp, xb, batch, xb, batch, rq_alpha)
        k = k + jnp.diag(noise[i]) + FIT_JITTER * eye
        l = jnp.linalg.cholesky(k)
        a = jsl.cho_solve((l, True), yb[:, i])
        total = total + 0.5 * jnp.dot(yb[:, i], a) + jnp.sum(jnp.log(jnp.diag(l)))
    total = total + 0.5 * dy * b * math.log(2.0 * math.pi)
    # Biases are exempt: they carry the baseline local parameters, and the
    # decayed matrices keep the fields near-constant unless data disagrees.
    decay = sum(jnp.sum(w**2) for name, w in weights.items() if not name.startswith("b"))
    return total + weight_decay * decay


def _build_model(weights, widths, rq_alpha, x, y, x_std, y_std) -> DgcnModel:
    xs = x_std.transform(x)
    ys = y_std.transform(y)
    dy = y.shape[1]
    n = xs.shape[0]
    raw = _nn_apply(np, weights, xs, len(widths))
    ls, w, sv, noise = _local_fields(np, raw, dy, x.shape[1])
    local, chol, alpha, uinv = [], np.empty((dy, n, n)), np.empty((dy, n)), np.empty((dy, n, n))
    for i in range(dy):
        batch = LocalParamsBatch(ls[i], w[i], sv[i], noise[i])
        local.append(batch)
        k = mixture_cross(np, xs, batch, xs, batch, rq_alpha) + np.diag(noise[i])
        l, _ = jittered_cholesky(k)
        chol[i] = l
        alpha[i] = scipy.linalg.cho_solve((l, True), ys[:, i])
        uinv[i] = scipy.linalg.solve_triangular(l, np.eye(n), lower=True).T
    return DgcnModel(
        weights={k: np.asarray(v) for k, v in weights.items()},
        widths=tuple(widths),
        rq_alpha=float(rq_alpha),
        x_std=x_std,
        y_std=y_std,
        train_inputs=x,
        train_targets=y,
        xs=xs,
        local=tuple(local),
        chol=chol,
        alpha=alpha,
        uinv=uinv,
    )


def dgcn_fit(
    inputs,
    targets,
    rng: RngStream,
    cfg: OptimConfig | None = None,
    widths: tuple[int, ...] = DEFAULT_WIDTHS,
    batch_size: int = 128,
    weight_decay: float = DEFAULT_WEIGHT_DECAY,
    standardize: bool = True,
    init_model: DgcnModel | None = None,
) -> DgcnModel:
    """Fit the local-parameter network by batched marginal likelihood.

    Every optimizer step draws a random subset of ``min(batch_size, n)``
    samples, assembles its mixture Gram with the network's local parameters,
    and ascends that subset's likelihood plus a weight-decay penalty (the
    network is heavily overparametrized relative to typical buffers, and
    undecayed fits overfit the marginal likelihood itself).  The returned
    model caches local parameters and the exact factorization over the full
    training set.  ``init_model`` warm-starts the network weights.
    """
    x, y = validate_data(inputs, targets)
    dy, d = y.shape[1], x.shape[1]
    cfg = cfg or DEFAULT_FIT_CONFIG
    x_std = Standardizer.fit(x) if standardize else Standardizer.identity(d)
    y_std = Standardizer.fit(y) if standardize else Standardizer.identity(dy)
    xs, ys = x_std.transform(x), y_std.transform(y)
    n = xs.shape[0]
    b = min(batch_size, n)

    if init_model is not None and init_model.widths == tuple(widths) and init_model.input_dim == d:
        weights0 = init_model.weights
        log_rq0 = math.log(init_model.rq_alpha)
    else:
        weights0 = _init_weights(d, tuple(widths), dy * head_size(d), rng.substream("init"))
        log_rq0 = 0.0
    theta0 = _flatten_weights(weights0, {"log_rq_alpha": np.array([log_rq0])})

    def sample(gen: np.random.Generator):
        return (gen.choice(n, size=b, replace=False),)

    objective = Objective(
        fun=_dgcn_nll,
        static=(tuple(widths), dy, d, float(weight_decay)),
        args=(jnp.asarray(xs), jnp.asarray(ys)),
        sample_args=sample,
    )
    result = optimize(objective, theta0, cfg, rng.substream("opt"))
    weights, off = _unflatten(np.asarray(result.values), d, tuple(widths), dy * head_size(d))
    rq_alpha = float(np.exp(result.values[off]))
    return _build_model(weights, tuple(widths), rq_alpha, x, y, x_std, y_std)


def dgcn_forward(model: DgcnModel, x, output_dim: int = 0) -> LocalParams:
    """Local kernel parameters the network predicts at one point.

    Each output dimension owns a parameter head; ``output_dim`` selects one.
    The returned lengthscales live in the model's standardized input space.
    """
    x = np.asarray(x, dtype=float).reshape(1, -1)
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("x contains non-finite entries")
    if x.shape[1] != model.input_dim:
        raise InvalidInputError(f"x must have dimension {model.input_dim}")
    ls, w, sv, noise = model.forward_fields(model.x_std.transform(x))
    i = int(output_dim)
    return LocalParams(
        lengthscales=ls[i][:, 0, :],
        mixture_weights=w[i][:, 0],
        signal_variance=float(sv[i][0]),
        noise_variance=float(noise[i][0]),
    )


def dgcn_predict(model: DgcnModel, queries) -> list:
    """Posterior predictions at ``queries``; no observation noise is added."""
    means, variances = model.predict_arrays(np.atleast_2d(np.asarray(queries, dtype=float)))
    return wrap_predictions(means, variances)


def softplus_inverse(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return v + np.log(-np.expm1(-v))


def constant_output_model(
    inputs,
    targets,
    lengthscales,
    mixture_weights,
    signal_variance: float,
    noise_variance: float,
    rq_alpha: float = 1.0,
    widths: tuple[int, ...] = DEFAULT_WIDTHS,
    standardize: bool = False,
) -> DgcnModel:
    """Model whose network emits the same local parameters everywhere.

    Zeroed trunk and head weights with biases chosen to invert the output
    transforms.  With constant parameters the mixture kernel reduces to its
    stationary form, which is the reduction property tests rely on.
    """
    x, y = validate_data(inputs, targets)
    dy, d = y.shape[1], x.shape[1]
    ls = np.broadcast_to(np.asarray(lengthscales, dtype=float), (N_F, d))
    w = np.asarray(mixture_weights, dtype=float).reshape(N_F)
    head = np.concatenate(
        [
            softplus_inverse(ls - LENGTHSCALE_FLOOR).reshape(-1),
            np.log(np.maximum(w, 1e-300)),
            softplus_inverse(np.array([noise_variance - NOISE_HEAD_FLOOR]))
            if noise_variance > NOISE_HEAD_FLOOR
            else np.array([-60.0]),
            softplus_inverse(np.array([signal_variance - SIGNAL_FLOOR])),
        ]
    )
    weights = {
        name: np.zeros(shape)
        for name, shape in _weight_shapes(d, tuple(widths), dy * head_size(d))
    }
    weights["bh"] = np.tile(head, dy)
    x_std = Standardizer.fit(x) if standardize else Standardizer.identity(d)
    y_std = Standardizer.fit(y) if standardize else Standardizer.identity(dy)
    return _build_model(weights, tuple(widths), rq_alpha, x, y, x_std, y_std)
