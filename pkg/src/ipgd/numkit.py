"""
Dense linear-algebra helpers, seeded random streams and power iteration.

Everything runs in float64. Matrices are plain ``numpy.ndarray`` objects of
shape (d, d); columns are accessed as ``M[:, j]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError

SERVER_STREAM = 0


def as_vec(v, d: int | None = None) -> np.ndarray:
    """Return ``v`` as a 1-D float64 array, optionally checking its length."""
    out = np.asarray(v, dtype=np.float64)
    if out.ndim != 1:
        raise ConfigError(f"expected a vector, got shape {out.shape}")
    if d is not None and out.shape[0] != d:
        raise ConfigError(f"expected a vector of length {d}, got {out.shape[0]}")
    return out


def as_mat(M, d: int | None = None) -> np.ndarray:
    """Return ``M`` as a square 2-D float64 array."""
    out = np.asarray(M, dtype=np.float64)
    if out.ndim != 2 or out.shape[0] != out.shape[1]:
        raise ConfigError(f"expected a square matrix, got shape {out.shape}")
    if d is not None and out.shape[0] != d:
        raise ConfigError(f"expected a {d}x{d} matrix, got {out.shape}")
    return out


def mat_vec(M, v) -> np.ndarray:
    """Matrix-vector product with a dimension check."""
    M = np.asarray(M, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if M.ndim != 2 or v.ndim != 1 or M.shape[1] != v.shape[0]:
        raise ConfigError(f"cannot multiply {M.shape} by {v.shape}")
    return M @ v


def spectral_norm(M) -> float:
    """Induced 2-norm of a dense matrix."""
    M = np.asarray(M, dtype=np.float64)
    if M.size == 0:
        return 0.0
    return float(np.linalg.norm(M, 2))


def is_finite(*arrays) -> bool:
    return all(bool(np.all(np.isfinite(a))) for a in arrays)


@dataclass
class SeededRng:
    """
    A reproducible random stream identified by ``(seed, stream_id)``.

    Stream 0 belongs to the server; agent ``i`` uses stream ``i + 1``. The same
    pair always yields the same sequence of draws.
    """

    seed: int
    stream_id: int = SERVER_STREAM
    gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=(int(self.stream_id),))
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def spawn(self, stream_id: int) -> "SeededRng":
        """A sibling stream with the same seed."""
        return SeededRng(self.seed, stream_id)


def draw_normal(rng: SeededRng, mean: float, std: float, n: int) -> np.ndarray:
    """``n`` i.i.d. draws from N(mean, std**2)."""
    if std < 0:
        raise ConfigError("std must be non-negative")
    z = rng.gen.standard_normal(n)
    return mean + std * z


def draw_uniform(rng: SeededRng, lo: float, hi: float, n: int) -> np.ndarray:
    """
    ``n`` i.i.d. draws from the open interval (lo, hi).

    The endpoints are excluded even after rounding: results are clipped one
    ulp inside each end. ``lo == hi`` returns a constant vector.
    """
    if lo > hi:
        raise ConfigError("need lo <= hi")
    if lo == hi:
        return np.full(n, float(lo))
    out = lo + (hi - lo) * rng.gen.random(n)
    return np.clip(out, np.nextafter(lo, hi), np.nextafter(hi, lo))


@dataclass(frozen=True)
class SpectralEstimate:
    value: float
    converged: bool
    iterations: int
    tol: float

    @property
    def upper_bound(self) -> float:
        """Largest value ``lambda_max`` can take given the stopping rule."""
        return self.value * (1.0 + self.tol)

    def __float__(self):
        return float(self.value)


def spectral_max(
    hvp: Callable[[np.ndarray], np.ndarray],
    d: int,
    tol: float = 1e-6,
    max_iter: int = 5000,
    rng: SeededRng | None = None,
) -> SpectralEstimate:
    """
    Largest eigenvalue of a symmetric PSD operator by power iteration.

    Parameters
    ----------
    hvp : callable
        Applies the operator to a vector of length ``d``.
    d : int
        Dimension.
    tol : float
        Relative tolerance. Iteration stops once the eigen-residual
        ``||A v - lam v||`` drops below ``tol * lam``; the Rayleigh quotient
        never exceeds ``lambda_max``, so the estimate is an underestimate by
        at most ``tol * lambda_max``.
    max_iter : int
        Iteration cap. On exhaustion the last Rayleigh quotient is returned
        with ``converged=False``.
    rng : SeededRng, optional
        Source of the random start vector (stream 0, seed 0 by default).

    Returns
    -------
    SpectralEstimate
        ``(value, converged, iterations)``. Use ``upper_bound`` to get a
        certified ``(1 + tol) * value``.
    """
    if tol <= 0:
        raise ConfigError("tol must be positive")
    rng = rng if rng is not None else SeededRng(0)
    v = rng.gen.standard_normal(d)
    v /= np.linalg.norm(v)
    lam = 0.0
    for k in range(1, max_iter + 1):
        w = np.asarray(hvp(v), dtype=np.float64)
        lam = float(v @ w)
        wn = float(np.linalg.norm(w))
        if wn == 0.0:
            return SpectralEstimate(0.0, True, k, tol)
        resid = float(np.linalg.norm(w - lam * v))
        if resid <= tol * lam:
            return SpectralEstimate(lam, True, k, tol)
        v = w / wn
    return SpectralEstimate(lam, False, max_iter, tol)
