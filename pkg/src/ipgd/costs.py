"""
Local cost functions f^i.

Each model exposes exactly what an agent needs during a round: the value,
the gradient, and the Hessian applied to a matrix (``hess_mat``) or a
vector (``hess_vec``). Models are immutable after construction.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from typing import Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigError
from .numkit import SeededRng, as_vec


class CostModel(ABC):
    """Abstract twice-differentiable convex cost over R^d."""

    dim: int

    @property
    @abstractmethod
    def n_points(self) -> int:
        """Number of data points (rows) the cost is built from."""

    @abstractmethod
    def value(self, x) -> float: ...

    @abstractmethod
    def gradient(self, x) -> np.ndarray: ...

    @abstractmethod
    def hess_mat(self, x, M) -> np.ndarray:
        """Return ``Hessian(x) @ M`` for a (d, k) matrix ``M``."""

    def hess_vec(self, x, v) -> np.ndarray:
        return self.hess_mat(x, np.asarray(v, dtype=np.float64)[:, None])[:, 0]

    def hessian(self, x) -> np.ndarray:
        return self.hess_mat(x, np.eye(self.dim))

    @abstractmethod
    def restrict(self, rows) -> "CostModel":
        """The same cost built only from the given data rows."""

    def lam_max_bound(self) -> float | None:
        """An exact upper bound on the Hessian's largest eigenvalue, if known."""
        return None

    def _check(self, x) -> np.ndarray:
        return as_vec(x, self.dim)


class QuadraticCost(CostModel):
    """
    ``f(x) = 1/2 x^T (A^T A) x - b^T x + c``.

    Built either from a dense data matrix ``A`` (n x d) or, for the noisy
    quadratic model, from a set of rows of a diagonal factor (see
    :meth:`from_diagonal_rows`), in which case the Hessian is kept as a
    length-d diagonal and never materialized.
    """

    def __init__(self, A, b=None, c: float = 0.0):
        A = np.asarray(A, dtype=np.float64)
        if A.ndim != 2:
            raise ConfigError("data matrix must be 2-D")
        self._A = A
        self.dim = A.shape[1]
        self._H = A.T @ A
        self._diag = None
        self._rows = None
        self.b = None if b is None else as_vec(b, self.dim)
        self.c = float(c)

    @classmethod
    def from_diagonal_rows(cls, rows, values, dim: int, b=None, c: float = 0.0):
        """
        Cost whose data matrix is ``diag(sqrt(values))`` restricted to ``rows``.

        ``values[k]`` is the Hessian entry for coordinate ``rows[k]``; all other
        diagonal entries are zero.
        """
        obj = cls.__new__(cls)
        rows = np.asarray(rows, dtype=np.intp)
        values = np.asarray(values, dtype=np.float64)
        if rows.shape != values.shape:
            raise ConfigError("rows and values must have the same length")
        if np.any(values < 0):
            raise ConfigError("diagonal Hessian entries must be non-negative")
        diag = np.zeros(dim)
        diag[rows] = values
        obj._A = None
        obj._H = None
        obj._diag = diag
        obj._rows = rows
        obj.dim = int(dim)
        obj.b = None if b is None else as_vec(b, obj.dim)
        obj.c = float(c)
        return obj

    @property
    def n_points(self) -> int:
        return len(self._rows) if self._diag is not None else self._A.shape[0]

    @property
    def is_diagonal(self) -> bool:
        return self._diag is not None

    @property
    def data_shape(self) -> tuple[int, int]:
        return (self.n_points, self.dim)

    def data_matrix(self) -> np.ndarray:
        """The (n x d) data matrix; materialized on demand for diagonal costs."""
        if self._diag is None:
            return self._A
        A = np.zeros((len(self._rows), self.dim))
        A[np.arange(len(self._rows)), self._rows] = np.sqrt(self._diag[self._rows])
        return A

    def hessian_diag(self) -> np.ndarray | None:
        return None if self._diag is None else self._diag.copy()

    def hessian(self, x=None) -> np.ndarray:
        if self._diag is not None:
            return np.diag(self._diag)
        return self._H.copy()

    def value(self, x) -> float:
        x = self._check(x)
        if self._diag is not None:
            quad = 0.5 * float(np.dot(self._diag * x, x))
        else:
            Ax = self._A @ x
            quad = 0.5 * float(Ax @ Ax)
        lin = 0.0 if self.b is None else float(self.b @ x)
        return quad - lin + self.c

    def gradient(self, x) -> np.ndarray:
        x = self._check(x)
        g = self._diag * x if self._diag is not None else self._H @ x
        return g if self.b is None else g - self.b

    def hess_mat(self, x, M) -> np.ndarray:
        M = np.asarray(M, dtype=np.float64)
        if M.shape[0] != self.dim:
            raise ConfigError(f"hess_mat expects {self.dim} rows, got {M.shape[0]}")
        if self._diag is None:
            return self._H @ M
        out = np.zeros(M.shape)
        out[self._rows] = self._diag[self._rows, None] * M[self._rows]
        return out

    def hess_vec(self, x, v) -> np.ndarray:
        v = as_vec(v, self.dim)
        return self._diag * v if self._diag is not None else self._H @ v

    def restrict(self, rows) -> "QuadraticCost":
        if self.b is not None or self.c != 0.0:
            raise ConfigError("row restriction is only defined for pure quadratic forms")
        rows = np.asarray(rows, dtype=np.intp)
        if self._diag is None:
            return QuadraticCost(self._A[rows])
        sel = self._rows[rows]
        return QuadraticCost.from_diagonal_rows(sel, self._diag[sel], self.dim)

    def lam_max_bound(self) -> float:
        if self._diag is not None:
            return float(self._diag.max(initial=0.0))
        return float(np.linalg.eigvalsh(self._H)[-1])

    def noise_factor(self):
        """
        A factor ``F`` with ``F F^T`` equal to the Hessian.

        Diagonal costs return the vector ``sqrt(diag)``; dense costs return
        ``A^T``.
        """
        if self._diag is not None:
            return np.sqrt(self._diag)
        return self._A.T


class LogisticCost(CostModel):
    """
    Unregularized logistic loss ``sum_k log(1 + exp(-b_k a_k^T x))``.

    Labels must be in {-1, +1}.
    """

    def __init__(self, A, b):
        A = np.asarray(A, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if A.ndim != 2 or b.ndim != 1 or A.shape[0] != b.shape[0]:
            raise ConfigError(f"incompatible shapes {A.shape} and {b.shape}")
        if not np.all(np.abs(b) == 1.0):
            raise ConfigError("logistic labels must be -1 or +1")
        self.A = A
        self.b = b
        self.dim = A.shape[1]

    @property
    def n_points(self) -> int:
        return self.A.shape[0]

    def value(self, x) -> float:
        margin = self.b * (self.A @ self._check(x))
        return float(np.sum(np.logaddexp(0.0, -margin)))

    def gradient(self, x) -> np.ndarray:
        margin = self.b * (self.A @ self._check(x))
        return self.A.T @ (-self.b * expit(-margin))

    def _curvature(self, x) -> np.ndarray:
        s = expit(self.A @ self._check(x))
        return s * (1.0 - s)

    def hess_mat(self, x, M) -> np.ndarray:
        M = np.asarray(M, dtype=np.float64)
        if M.shape[0] != self.dim:
            raise ConfigError(f"hess_mat expects {self.dim} rows, got {M.shape[0]}")
        w = self._curvature(x)
        return self.A.T @ (w[:, None] * (self.A @ M))

    def hess_vec(self, x, v) -> np.ndarray:
        w = self._curvature(x)
        return self.A.T @ (w * (self.A @ as_vec(v, self.dim)))

    def restrict(self, rows) -> "LogisticCost":
        rows = np.asarray(rows, dtype=np.intp)
        return LogisticCost(self.A[rows], self.b[rows])

    def lam_max_bound(self) -> float:
        # curvature weights are at most 1/4
        return 0.25 * float(np.linalg.norm(self.A, 2)) ** 2


class AggregateCost(CostModel):
    """The sum of several local costs; an oracle view, never used by agents."""

    def __init__(self, costs: Sequence[CostModel]):
        if not costs:
            raise ConfigError("need at least one cost")
        dims = {c.dim for c in costs}
        if len(dims) != 1:
            raise ConfigError(f"costs disagree on dimension: {sorted(dims)}")
        self.costs = list(costs)
        self.dim = dims.pop()

    @property
    def n_points(self) -> int:
        return sum(c.n_points for c in self.costs)

    def value(self, x) -> float:
        return float(sum(c.value(x) for c in self.costs))

    def gradient(self, x) -> np.ndarray:
        g = np.zeros(self.dim)
        for c in self.costs:
            g += c.gradient(x)
        return g

    def hess_mat(self, x, M) -> np.ndarray:
        M = np.asarray(M, dtype=np.float64)
        out = np.zeros((self.dim, M.shape[1]))
        for c in self.costs:
            out += c.hess_mat(x, M)
        return out

    def hess_vec(self, x, v) -> np.ndarray:
        out = np.zeros(self.dim)
        for c in self.costs:
            out += c.hess_vec(x, v)
        return out

    def restrict(self, rows):
        raise ConfigError("an aggregate cannot be row-restricted")

    def lam_max_bound(self) -> float | None:
        if all(isinstance(c, QuadraticCost) and c.is_diagonal for c in self.costs):
            return float(sum(c.hessian_diag() for c in self.costs).max())
        bounds = [c.lam_max_bound() for c in self.costs]
        return None if any(b is None for b in bounds) else float(sum(bounds))


def nqm_hessian_diag(d: int) -> np.ndarray:
    """Diagonal of the noisy-quadratic-model Hessian, ``H_ii = 1/i``."""
    return 1.0 / np.arange(1, d + 1, dtype=np.float64)


def nqm_build(d: int, m: int) -> list[QuadraticCost]:
    """
    Split the noisy quadratic model ``1/2 x^T H x`` across ``m`` agents.

    Agent ``i`` holds the contiguous block of ``d/m`` rows of ``sqrt(H)``, so
    its local Hessian is the matching diagonal slice of ``H`` and the local
    Hessians sum to ``H`` exactly.
    """
    if d <= 0 or m <= 0:
        raise ConfigError("d and m must be positive")
    if d % m:
        raise ConfigError(f"m={m} does not divide d={d}")
    h = nqm_hessian_diag(d)
    block = d // m
    out = []
    for i in range(m):
        rows = np.arange(i * block, (i + 1) * block)
        out.append(QuadraticCost.from_diagonal_rows(rows, h[rows], d))
    return out


def hessian_noise(costs: Sequence[QuadraticCost], rng: SeededRng) -> np.ndarray:
    """
    One draw from N(0, sum_i Hessian_i) for quadratic costs.

    For diagonal costs this is ``sqrt(h) * z``; otherwise ``sum_i A_i^T z_i``
    with independent standard normal ``z_i``, drawn in list order.
    """
    if all(isinstance(c, QuadraticCost) and c.is_diagonal for c in costs):
        h = sum(c.hessian_diag() for c in costs)
        return np.sqrt(h) * rng.gen.standard_normal(len(h))
    out = np.zeros(costs[0].dim)
    for c in costs:
        if not isinstance(c, QuadraticCost):
            raise ConfigError("Hessian-covariance noise needs quadratic costs")
        F = c.noise_factor()
        out += F * rng.gen.standard_normal(F.shape[0]) if F.ndim == 1 else F @ rng.gen.standard_normal(F.shape[1])
    return out
