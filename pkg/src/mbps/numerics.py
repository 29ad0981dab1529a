"""Dense linear algebra, positive-definite solves, and seeded Gaussian sampling.

Matrices are plain two-dimensional ``numpy`` arrays in row-major order.  The
helpers here add the small amount of policy every caller needs on top of
``scipy.linalg``: a diagonal-jitter retry schedule for nearly singular
positive-definite systems, covariance symmetrization, and a splittable
counter-based random stream so that parallel consumers can own independent
substreams derived from one experiment seed.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import InvalidInputError, NumericalFailureError

# Jitter schedule for ill-conditioned Gram matrices: relative to the mean
# diagonal, starting at 1e-10 and growing tenfold up to 1e-4.
JITTER_START = 1e-10
JITTER_MAX = 1e-4
JITTER_GROWTH = 10.0


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and return ``a`` as a finite 2-D float array."""
    m = np.asarray(a, dtype=float)
    if m.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return m


def _is_symmetric(a: np.ndarray) -> bool:
    scale = np.max(np.abs(a)) if a.size else 0.0
    return bool(np.allclose(a, a.T, atol=1e-10 * max(scale, 1.0), rtol=1e-8))


def jittered_cholesky(a: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``a``, retrying with growing diagonal jitter.

    Returns ``(L, jitter)`` where ``jitter`` is the absolute value added to
    the diagonal (0.0 when the plain factorization succeeds).  Raises
    :class:`NumericalFailureError` once the jitter would exceed
    ``JITTER_MAX`` times the mean diagonal.
    """
    a = as_matrix(a, "A")
    if a.shape[0] != a.shape[1]:
        raise InvalidInputError(f"A must be square, got shape {a.shape}")
    mean_diag = float(np.mean(np.diag(a))) if a.shape[0] else 0.0
    jitter = 0.0
    while True:
        try:
            aj = a if jitter == 0.0 else a + jitter * np.eye(a.shape[0])
            return scipy.linalg.cholesky(aj, lower=True), jitter
        except scipy.linalg.LinAlgError:
            nxt = JITTER_START * mean_diag if jitter == 0.0 else jitter * JITTER_GROWTH
            if mean_diag <= 0.0 or nxt > JITTER_MAX * mean_diag:
                raise NumericalFailureError(
                    f"Cholesky failed at max jitter {jitter:.3e} "
                    f"(mean diagonal {mean_diag:.3e})"
                ) from None
            jitter = nxt


def cholesky_solve(a, b) -> np.ndarray:
    """Solve ``A X = B`` for symmetric positive definite ``A``.

    ``A`` gets the jitter retry schedule of :func:`jittered_cholesky` when the
    plain factorization fails.  ``B`` may be a vector or a matrix; the result
    has the same number of dimensions.
    """
    a = as_matrix(a, "A")
    if a.shape[0] != a.shape[1]:
        raise InvalidInputError(f"A must be square, got shape {a.shape}")
    if not _is_symmetric(a):
        raise InvalidInputError("A must be symmetric")
    b_arr = np.asarray(b, dtype=float)
    if not np.all(np.isfinite(b_arr)):
        raise InvalidInputError("B contains non-finite entries")
    vec = b_arr.ndim == 1
    bm = b_arr[:, None] if vec else b_arr
    if bm.ndim != 2 or bm.shape[0] != a.shape[0]:
        raise InvalidInputError(
            f"B row count {bm.shape[0] if bm.ndim == 2 else bm.shape} "
            f"does not match A dimension {a.shape[0]}"
        )
    l, _ = jittered_cholesky(a)
    x = scipy.linalg.cho_solve((l, True), bm)
    return x[:, 0] if vec else x


@dataclass(frozen=True)
class Gaussian:
    """Multivariate normal with an explicitly symmetrized covariance.

    Covariances assembled from sample statistics accumulate asymmetric
    floating-point error, so the constructor averages the covariance with its
    transpose and then checks positive semi-definiteness (eigenvalues no
    smaller than ``-1e-10`` times the trace).
    """

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = as_matrix(self.covariance, "covariance")
        if not np.all(np.isfinite(mean)):
            raise InvalidInputError("mean contains non-finite entries")
        if cov.shape != (mean.size, mean.size):
            raise InvalidInputError(
                f"covariance shape {cov.shape} does not match mean size {mean.size}"
            )
        cov = 0.5 * (cov + cov.T)
        evals = np.linalg.eigvalsh(cov)
        tol = 1e-10 * max(float(np.trace(cov)), 0.0)
        if evals.size and evals[0] < -tol:
            raise InvalidInputError(
                f"covariance is not PSD: min eigenvalue {evals[0]:.3e} < {-tol:.3e}"
            )
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @property
    def dim(self) -> int:
        return self.mean.size


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFF
    return zlib.crc32(str(tag).encode("utf-8"))


@dataclass
class RngStream:
    """Seeded counter-based random stream with deterministic substreams.

    Built on ``numpy``'s Philox generator and ``SeedSequence`` spawn keys:
    identical seeds yield identical sample sequences, and substreams derived
    from distinct tag paths are statistically independent.  A stream is
    single-owner; hand each parallel consumer its own :meth:`substream` or
    :meth:`spawn` child instead of sharing one stream.
    """

    seed: int
    path: tuple[int, ...] = ()
    _gen: np.random.Generator = field(init=False, repr=False)
    _spawned: int = field(default=0, init=False, repr=False)

    def __post_init__(self):
        self.seed = int(self.seed)
        self.path = tuple(int(p) for p in self.path)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(seq))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def substream(self, *tags) -> "RngStream":
        """Independent stream addressed by a path of string or integer tags."""
        return RngStream(self.seed, self.path + tuple(_tag_to_int(t) for t in tags))

    def spawn(self, n: int) -> list["RngStream"]:
        """``n`` fresh independent child streams (advances a spawn counter)."""
        kids = [
            self.substream("spawn", self._spawned + i) for i in range(int(n))
        ]
        self._spawned += int(n)
        return kids

    # Conveniences mirroring numpy.random.Generator.
    def normal(self, loc=0.0, scale=1.0, size=None) -> np.ndarray:
        return self._gen.normal(loc, scale, size)

    def standard_normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size)

    def choice(self, a, size=None, replace=True) -> np.ndarray:
        return self._gen.choice(a, size=size, replace=replace)


def psd_sqrt(cov: np.ndarray) -> np.ndarray:
    """Lower-triangular square root of a PSD matrix, tolerating rank deficiency.

    An exactly zero covariance returns a zero factor; otherwise the jittered
    Cholesky schedule applies.
    """
    cov = as_matrix(cov, "covariance")
    if not np.any(cov):
        return np.zeros_like(cov)
    l, _ = jittered_cholesky(cov)
    return l


def sample_mvn(g: Gaussian, n: int, rng: RngStream) -> np.ndarray:
    """Draw ``n`` samples from ``g`` as an ``(n, dim)`` array."""
    if n < 1:
        raise InvalidInputError(f"n must be >= 1, got {n}")
    l = psd_sqrt(g.covariance)
    z = rng.standard_normal((int(n), g.dim))
    return g.mean + z @ l.T
