"""Reverse-mode gradients and Adam with restarts and early stopping.

Objectives are scalar functions of a flat parameter vector.  Gradients come
from reverse-mode automatic differentiation, so objectives must be written
with ``jax.numpy`` primitives (plain ``numpy`` ufuncs on the traced values
also work).  Two calling conventions are supported:

* a plain callable ``objective(p: ParamVector) -> scalar`` for small or
  one-off problems;
* an :class:`Objective` record ``fun(values, static, *args)`` where ``fun``
  is a module-level traceable function, ``static`` is a hashable
  configuration, and ``args`` is a tuple of arrays.  The compiled
  value-and-gradient program is cached on ``(fun, static, shapes)``, so
  repeated :func:`optimize` calls with fresh data reuse the compilation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, NamedTuple

import jax
import jax.numpy as jnp
import numpy as np

from .errors import EvaluationFailureError, InvalidInputError, OptimizationFailureError
from .numerics import RngStream

Layout = tuple[tuple[str, int, int], ...]


@dataclass(frozen=True)
class ParamVector:
    """Flat parameter vector with named segments.

    ``layout`` maps each segment name to an ``(offset, length)`` pair; the
    segments tile the vector exactly.  Values may be a numpy array or a traced
    ``jax`` array; slicing works on both.
    """

    values: Any
    layout: Layout = ()

    def __post_init__(self):
        vals = self.values
        if isinstance(vals, np.ndarray) or np.isscalar(vals) or isinstance(vals, (list, tuple)):
            vals = np.asarray(vals, dtype=float).reshape(-1)
            if not np.all(np.isfinite(vals)):
                raise InvalidInputError("parameter vector contains non-finite values")
            object.__setattr__(self, "values", vals)
        layout = tuple((str(n), int(o), int(l)) for n, o, l in self.layout)
        if not layout:
            layout = (("all", 0, int(self.values.shape[0])),)
        total = sum(l for _, _, l in layout)
        if total != int(self.values.shape[0]):
            raise InvalidInputError(
                f"layout covers {total} values but vector has {self.values.shape[0]}"
            )
        object.__setattr__(self, "layout", layout)

    @classmethod
    def from_segments(cls, segments: dict[str, np.ndarray]) -> "ParamVector":
        names, arrays = list(segments.keys()), [np.asarray(a, float).reshape(-1) for a in segments.values()]
        layout, off = [], 0
        for name, arr in zip(names, arrays):
            layout.append((name, off, arr.size))
            off += arr.size
        return cls(np.concatenate(arrays) if arrays else np.zeros(0), tuple(layout))

    def segment(self, name: str):
        for n, off, ln in self.layout:
            if n == name:
                return self.values[off : off + ln]
        raise KeyError(name)

    def segment_names(self) -> list[str]:
        return [n for n, _, _ in self.layout]

    def with_values(self, values) -> "ParamVector":
        pv = object.__new__(ParamVector)
        object.__setattr__(pv, "values", values)
        object.__setattr__(pv, "layout", self.layout)
        return pv

    @property
    def size(self) -> int:
        return sum(l for _, _, l in self.layout)


@dataclass(frozen=True)
class OptimConfig:
    """Adam settings with restarts and early stopping.

    ``restart_scale`` sets the standard deviation of randomized restart
    initializations; when ``None`` each segment uses the RMS of its own
    initial values (floored at 1e-3).
    """

    learning_rate: float = 0.01
    max_steps: int = 500
    restarts: int = 1
    patience: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    restart_scale: float | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise InvalidInputError("learning_rate must be positive")
        if self.restarts < 1 or self.patience < 1 or self.max_steps < 1:
            raise InvalidInputError("restarts, patience and max_steps must be >= 1")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise InvalidInputError("beta1 and beta2 must lie in (0, 1)")


class Objective(NamedTuple):
    """Structured objective for compile reuse across calls.

    ``fun(values, static, *args, *sampled)`` must return a scalar.  ``static``
    is hashable configuration (compile-time constants); ``args`` are arrays
    traced by shape.  ``sample_args``, when given, draws fresh trailing arrays
    from an ``numpy`` generator at every optimizer step (mini-batching); the
    objective is then stochastic and early stopping compares per-batch values.
    """

    fun: Callable
    static: Any = None
    args: tuple = ()
    sample_args: Callable[[np.random.Generator], tuple] | None = None
    dtype: Any = None


def _raw_pv(values, layout: Layout) -> ParamVector:
    pv = object.__new__(ParamVector)
    object.__setattr__(pv, "values", values)
    object.__setattr__(pv, "layout", layout)
    return pv


def _pv_adapter(values, static):
    fn, layout = static
    return fn(_raw_pv(values, layout))


_VG_CACHE: dict[Callable, Callable] = {}


def _as_objective(objective, p: ParamVector) -> Objective:
    if isinstance(objective, Objective):
        return objective
    if callable(objective):
        return Objective(fun=_pv_adapter, static=(objective, p.layout))
    raise InvalidInputError("objective must be callable or an Objective")


def _value_and_grad_fn(fun: Callable) -> Callable:
    if fun not in _VG_CACHE:
        _VG_CACHE[fun] = jax.jit(jax.value_and_grad(fun), static_argnums=1)
    return _VG_CACHE[fun]


def _blame_segment(layout: Layout, vec: np.ndarray) -> str:
    bad = ~np.isfinite(vec)
    names = [n for n, off, ln in layout if bad[off : off + ln].any()]
    return ", ".join(names) if names else "unknown"


def gradient(objective, p: ParamVector) -> np.ndarray:
    """Reverse-mode gradient of ``objective`` at ``p`` as a flat numpy vector."""
    obj = _as_objective(objective, p)
    vg = _value_and_grad_fn(obj.fun)
    dtype = obj.dtype or jnp.float64
    extra = obj.sample_args(np.random.default_rng(0)) if obj.sample_args else ()
    val, g = vg(jnp.asarray(p.values, dtype=dtype), obj.static, *obj.args, *extra)
    val, g = float(val), np.asarray(g, dtype=float)
    if not np.isfinite(val):
        raise EvaluationFailureError(
            f"objective non-finite at p (value {val}); segments: {p.segment_names()}"
        )
    if not np.all(np.isfinite(g)):
        raise EvaluationFailureError(
            f"gradient non-finite in segment(s): {_blame_segment(p.layout, g)}"
        )
    return g


def _restart_init(init: ParamVector, cfg: OptimConfig, rng: RngStream) -> np.ndarray:
    z = rng.standard_normal(init.size)
    if cfg.restart_scale is not None:
        return cfg.restart_scale * z
    out = np.empty(init.size)
    for _, off, ln in init.layout:
        seg = np.asarray(init.values[off : off + ln], dtype=float)
        scale = max(float(np.sqrt(np.mean(seg**2))) if ln else 0.0, 1e-3)
        out[off : off + ln] = scale * z[off : off + ln]
    return out


def optimize(objective, init: ParamVector, cfg: OptimConfig, rng: RngStream) -> ParamVector:
    """Minimize ``objective`` with Adam, restarts, and early stopping.

    Runs ``cfg.restarts`` Adam runs: the first from ``init``, the rest from
    randomized initializations.  A run stops early when the objective fails to
    improve by at least 1e-6 relative (with an absolute floor of 1) over
    ``cfg.patience`` consecutive steps.  Returns the parameter vector with the
    lowest objective value seen anywhere, so the result is never worse than
    ``init``.  Deterministic given the same seed.
    """
    obj = _as_objective(objective, init)
    vg = _value_and_grad_fn(obj.fun)
    dtype = obj.dtype or jnp.float64
    args = obj.args

    best_val, best_vec = np.inf, None
    any_finite = False
    for r in range(cfg.restarts):
        sub = rng.substream("restart", r)
        batch_gen = sub.substream("batches").generator
        v = np.asarray(init.values, dtype=float) if r == 0 else _restart_init(init, cfg, sub)
        m = np.zeros_like(v)
        s = np.zeros_like(v)
        run_best = np.inf
        stall = 0
        for step in range(1, cfg.max_steps + 1):
            extra = obj.sample_args(batch_gen) if obj.sample_args else ()
            val, g = vg(jnp.asarray(v, dtype=dtype), obj.static, *args, *extra)
            val = float(val)
            if not np.isfinite(val):
                break
            any_finite = True
            if val < best_val:
                best_val, best_vec = val, v.copy()
            if run_best - val >= 1e-6 * max(1.0, abs(run_best)):
                run_best = min(run_best, val)
                stall = 0
            else:
                run_best = min(run_best, val)
                stall += 1
                if stall >= cfg.patience:
                    break
            g = np.asarray(g, dtype=float)
            if not np.all(np.isfinite(g)):
                break
            m = cfg.beta1 * m + (1 - cfg.beta1) * g
            s = cfg.beta2 * s + (1 - cfg.beta2) * g * g
            mhat = m / (1 - cfg.beta1**step)
            shat = s / (1 - cfg.beta2**step)
            v = v - cfg.learning_rate * mhat / (np.sqrt(shat) + cfg.epsilon)
    if not any_finite or best_vec is None:
        raise OptimizationFailureError("no restart produced a finite objective value")
    return ParamVector(best_vec, init.layout)
