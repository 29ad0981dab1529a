"""Shared model plumbing: predictive containers, standardization, padding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InvalidInputError

# Padded training-set sizes are rounded up to a multiple of this, so jitted
# prediction programs recompile only when the buffer crosses a boundary.
PAD_MULTIPLE = 128

VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class PredictiveGaussian:
    """Per-output-dimension mean and variance of one prediction."""

    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        var = np.asarray(self.variance, dtype=float).reshape(-1)
        if mean.shape != var.shape:
            raise InvalidInputError("mean and variance must have equal length")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(var))):
            raise InvalidInputError("prediction contains non-finite entries")
        if np.any(var <= 0):
            raise InvalidInputError("variance entries must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variance", var)


@dataclass(frozen=True)
class Standardizer:
    """Per-dimension affine map to zero mean and unit scale."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, data: np.ndarray) -> "Standardizer":
        data = np.asarray(data, dtype=float)
        scale = data.std(axis=0)
        return cls(data.mean(axis=0), np.maximum(scale, 1e-8))

    @classmethod
    def identity(cls, dim: int) -> "Standardizer":
        return cls(np.zeros(dim), np.ones(dim))

    def transform(self, data: np.ndarray) -> np.ndarray:
        return (np.asarray(data, dtype=float) - self.mean) / self.scale

    def untransform_mean(self, mean):
        return self.mean + self.scale * mean

    def untransform_delta(self, delta):
        return self.scale * delta

    def untransform_var(self, var):
        return self.scale**2 * var


def validate_data(inputs, targets) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(inputs, dtype=float)
    y = np.asarray(targets, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise InvalidInputError(
            f"inputs {x.shape} and targets {y.shape} must be 2-D with equal row counts"
        )
    if x.shape[0] < 2:
        raise InvalidInputError("need at least 2 samples")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise InvalidInputError("training data contains non-finite entries")
    return x, y


def padded_size(n: int) -> int:
    return ((n + PAD_MULTIPLE - 1) // PAD_MULTIPLE) * PAD_MULTIPLE


def pad_rows(a: np.ndarray, n_pad: int) -> np.ndarray:
    """Zero-pad ``a`` along axis 0 to ``n_pad`` rows."""
    if a.shape[0] == n_pad:
        return a
    width = [(0, n_pad - a.shape[0])] + [(0, 0)] * (a.ndim - 1)
    return np.pad(a, width)


def predict_arrays(model, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batch prediction as ``(means, variances)`` arrays of shape ``(B, dy)``.

    Dispatches on the model's own array-prediction method; every model class
    in this package provides one.
    """
    return model.predict_arrays(np.asarray(queries, dtype=float))


def wrap_predictions(means: np.ndarray, variances: np.ndarray) -> list[PredictiveGaussian]:
    return [PredictiveGaussian(m, v) for m, v in zip(means, variances)]
