"""
Agent-side computation for one synchronous round.

An agent receives the server's broadcast ``(x, K)``, evaluates its local
gradient and the residual columns

    R_j = (Hess f^i(x) + (beta/m) I) k_j - (1/m) e_j,

and replies with those ``d + d*d`` numbers only. Raw data rows never leave
the agent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .costs import CostModel
from .errors import ConfigError
from .numkit import SeededRng, as_mat, as_vec


@dataclass(frozen=True)
class AgentReply:
    gradient: np.ndarray
    residuals: np.ndarray | None = None

    @property
    def n_scalars(self) -> int:
        n = self.gradient.size
        return n if self.residuals is None else n + self.residuals.size


@dataclass
class Agent:
    """
    One agent: a local cost, a private random stream and the broadcast
    parameters ``beta`` and ``m_total``.

    ``batch_size=None`` means full batch. In mini-batch mode each round draws
    ``batch_size`` rows without replacement and rescales by
    ``n_points / batch_size``; ``residual_batch`` selects whether residuals
    reuse that batch (``"same"``) or the full local data (``"full"``).
    """

    id: int
    cost: CostModel
    rng: SeededRng
    m_total: int
    beta: float = 0.0
    batch_size: int | None = None
    residual_batch: str = "same"

    def __post_init__(self):
        if self.beta < 0:
            raise ConfigError("beta must be non-negative")
        if self.m_total < 1:
            raise ConfigError("m_total must be positive")
        if self.batch_size is not None:
            if self.batch_size < 1 or self.batch_size > self.cost.n_points:
                raise ConfigError(
                    f"agent {self.id}: batch_size={self.batch_size} outside [1, {self.cost.n_points}]"
                )
        if self.residual_batch not in ("same", "full"):
            raise ConfigError("residual_batch must be 'same' or 'full'")

    @property
    def dim(self) -> int:
        return self.cost.dim

    @property
    def mini_batch(self) -> bool:
        return self.batch_size is not None and self.batch_size < self.cost.n_points

    def sample_batch(self):
        """Row indices for this round, or ``None`` in full-batch mode."""
        if not self.mini_batch:
            return None
        return self.rng.gen.choice(self.cost.n_points, size=self.batch_size, replace=False)

    def _view(self, rows):
        if rows is None:
            return self.cost, 1.0
        return self.cost.restrict(rows), self.cost.n_points / len(rows)

    def compute_gradient(self, x, rows=None, *, sample=True) -> np.ndarray:
        x = as_vec(x, self.dim)
        if rows is None and sample:
            rows = self.sample_batch()
        cost, scale = self._view(rows)
        g = cost.gradient(x)
        return g if scale == 1.0 else scale * g

    def compute_residuals(self, x, K, rows=None, *, sample=True) -> np.ndarray:
        x = as_vec(x, self.dim)
        K = as_mat(K, self.dim)
        if rows is None and sample and self.residual_batch == "same":
            rows = self.sample_batch()
        cost, scale = self._view(rows)
        R = cost.hess_mat(x, K)
        if scale != 1.0:
            R *= scale
        if self.beta:
            R += (self.beta / self.m_total) * K
        R[np.diag_indices_from(R)] -= 1.0 / self.m_total
        return R

    def run_round(self, x, K) -> AgentReply:
        rows = self.sample_batch()
        g = self.compute_gradient(x, rows, sample=False)
        r_rows = rows if self.residual_batch == "same" else None
        R = self.compute_residuals(x, K, r_rows, sample=False)
        return AgentReply(g, R)

    def gradient_round(self, x) -> AgentReply:
        return AgentReply(self.compute_gradient(x))

    def value(self, x) -> float:
        """Full local cost value, used for line-search rounds."""
        return self.cost.value(as_vec(x, self.dim))
