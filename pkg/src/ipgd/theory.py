"""
Small-scale verifiers for the convergence guarantees.

These need full information (the Hessian, the minimizer) and dense
eigensolves, so they are limited to test-sized problems. They back the
theorem-mode schedules and the acceptance checks.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .coordinator import AlphaSchedule
from .errors import ConfigError
from .numkit import SeededRng, as_mat, as_vec, spectral_norm

DENSE_LIMIT = 64


def compute_rho(hess_x, alpha: float, beta: float, max_dim: int = DENSE_LIMIT) -> float:
    """
    ``||I - alpha (hess_x + beta I)||`` by a dense symmetric eigensolve.

    Refuses matrices larger than ``max_dim``; use power iteration there.
    """
    H = as_mat(hess_x)
    d = H.shape[0]
    if d > max_dim:
        raise ConfigError(f"dense rho refused for d={d} > {max_dim}")
    M = np.eye(d) - alpha * (0.5 * (H + H.T) + beta * np.eye(d))
    return float(np.max(np.abs(np.linalg.eigvalsh(M))))


@dataclass(frozen=True)
class TheoryConstants:
    l: float
    gamma: float
    eta: float
    rho: float
    mu: float
    Lambda: float

    def __post_init__(self):
        if not self.l > 0:
            raise ConfigError("l must be positive")
        if self.gamma < 0:
            raise ConfigError("gamma must be non-negative")
        if not self.eta > 0:
            raise ConfigError("eta must be positive")
        if not 0 <= self.rho < 1:
            raise ConfigError(f"rho={self.rho} outside [0, 1)")
        if not 1 < self.mu < (math.inf if self.rho == 0 else 1 / self.rho):
            raise ConfigError(f"mu={self.mu} outside (1, 1/rho)")

    def to_dict(self) -> dict:
        return asdict(self)


def quadratic_constants(H, beta: float, alpha_sched, mu: float | None = None, horizon: int = 200) -> TheoryConstants:
    """
    Exact constants for ``f(x) = 1/2 x^T H x - b^T x``.

    ``l = Lambda = lambda_max(H)``, ``gamma = 0`` (constant Hessian),
    ``eta = 1/(lambda_min(H) + beta)`` and ``rho`` is the largest
    ``||I - alpha(t)(H + beta I)||`` over the first ``horizon`` schedule
    values. A theorem-bound schedule carries its own ``rho``, which is used
    as-is to avoid a circular definition. ``mu`` defaults to
    ``min(2, (1 + 1/rho)/2)``.
    """
    H = as_mat(H)
    lam = np.linalg.eigvalsh(0.5 * (H + H.T))
    if lam[0] < -1e-12 * max(1.0, abs(lam[-1])):
        raise ConfigError("H is not positive semi-definite")
    if lam[0] + beta <= 0:
        raise ConfigError("lambda_min(H) + beta = 0: the limiting pre-conditioner does not exist")
    sched = AlphaSchedule.from_spec(alpha_sched)
    if sched.mode == "theorem_bound":
        rho = float(sched.params["rho"])
    else:
        alphas = {sched(t) for t in range(horizon)}
        rho = max(float(np.max(np.abs(1.0 - a * (lam + beta)))) for a in alphas)
    if mu is None:
        mu = 2.0 if rho == 0 else min(2.0, 0.5 * (1.0 + 1.0 / rho))
    l = float(lam[-1])
    return TheoryConstants(l=l, gamma=0.0, eta=1.0 / float(lam[0] + beta), rho=rho, mu=float(mu), Lambda=l)


def theorem_schedule(H, beta: float, mu: float, horizon: int = 400, safety: float = 0.99, grid: int = 4000):
    """
    A self-consistent theorem-mode schedule for a quadratic.

    The step bound depends on ``rho`` and ``rho`` is the largest
    ``||I - alpha(t)(H + beta I)||`` over the schedule, so a valid ``rho``
    must satisfy ``max_t rho(alpha_rho(t)) <= rho`` with ``mu * rho < 1``.
    Scans ``rho`` upward on a grid over ``(0, 1/mu)`` and returns the first
    feasible ``(schedule, rho)``. Raises :class:`ConfigError` when none
    exists, which happens once ``H + beta I`` is even mildly
    ill-conditioned.
    """
    H = as_mat(H)
    lam = np.linalg.eigvalsh(0.5 * (H + H.T))
    lo, hi = float(lam[0]) + beta, float(lam[-1]) + beta
    if lo <= 0:
        raise ConfigError("lambda_min(H) + beta must be positive")
    l = float(lam[-1])
    ts = np.arange(horizon)
    for rho in np.linspace(0.0, 1.0 / mu, grid + 1)[1:-1]:
        q = mu * rho
        alpha = np.minimum(1.0 / hi, mu**ts * (1 - q) / (2 * l * (1 - q ** (ts + 1)))) * safety
        worst = float(np.max(np.maximum(np.abs(1 - alpha * lo), np.abs(1 - alpha * hi))))
        if worst <= rho:
            return AlphaSchedule.theorem(l, beta, l, mu, float(rho), exact=True, safety=safety), float(rho)
    raise ConfigError(f"no self-consistent rho for mu={mu}; condition number {hi / lo:.3g} too large")


def _iterates(trace):
    xs = getattr(trace, "xs", trace)
    if xs is None:
        raise ConfigError("trace does not hold iterates; run with keep_iterates=True")
    return [as_vec(x) for x in xs]


def _x_star(trace, x_star):
    if x_star is None:
        x_star = getattr(trace, "x_star", None)
    if x_star is None:
        raise ConfigError("the minimizer must be provided")
    return as_vec(x_star)


@dataclass
class ContractionReport:
    mu: float
    errors: list
    contraction_ok: list
    radius_ok: list
    passed: bool
    first_failure: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def verify_linear_contraction(trace, mu: float, x_star=None, eta: float | None = None, gamma: float = 0.0) -> ContractionReport:
    """
    Check ``||z(t+1)|| <= ||z(t)||/mu`` and ``||z(t)|| < 1/(mu eta gamma)``
    at every step, with ``z(t) = x(t) - x*``.

    The radius condition is vacuous when ``gamma = 0``. ``trace`` is a run
    trace with stored iterates or a plain sequence of iterates.
    """
    xs = _iterates(trace)
    xs_star = _x_star(trace, x_star)
    errs = [float(np.linalg.norm(x - xs_star)) for x in xs]
    contraction = [errs[t + 1] <= errs[t] / mu for t in range(len(errs) - 1)]
    if gamma == 0 or eta is None:
        radius = [True] * len(errs)
    else:
        radius = [e < 1.0 / (mu * eta * gamma) for e in errs]
    bad = [t for t, ok in enumerate(contraction) if not ok] + [t for t, ok in enumerate(radius) if not ok]
    first = min(bad) if bad else None
    return ContractionReport(mu, errs, contraction, radius, first is None, first)


@dataclass
class SuperlinearReport:
    ratios: list
    tail: list
    passed: bool
    inconclusive: bool = False
    reason: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def verify_superlinear(trace, x_star=None, floor: float = 1e-13, tail: int = 10, min_iters: int = 12) -> SuperlinearReport:
    """
    Finite-sample test that ``r(t) = ||z(t+1)|| / ||z(t)||`` tends to zero.

    Only errors above ``floor * ||z(0)||`` count. A run that drops below the
    floor in a single step passes outright. A run that reaches the floor in
    fewer than ``min_iters`` iterations is inconclusive. Otherwise the last
    ``tail`` ratios must be strictly decreasing and the final one must be
    below half the first one.
    """
    xs = _iterates(trace)
    xs_star = _x_star(trace, x_star)
    errs = np.array([np.linalg.norm(x - xs_star) for x in xs])
    if errs[0] == 0:
        return SuperlinearReport([], [], True, reason="started at the minimizer")
    cut = floor * errs[0]
    above = np.flatnonzero(errs <= cut)
    n_above = int(above[0]) if above.size else len(errs)
    ratios = [float(errs[t + 1] / errs[t]) for t in range(len(errs) - 1) if errs[t + 1] > cut]
    if n_above == 1:
        return SuperlinearReport(ratios, [], True, reason="reached the floor in one step")
    if n_above < min_iters:
        return SuperlinearReport(ratios, [], False, True, f"reached the floor after {n_above} iterations")
    if len(ratios) < tail:
        return SuperlinearReport(ratios, [], False, True, "too few ratios above the floor")
    last = ratios[-tail:]
    decreasing = all(b < a for a, b in zip(last, last[1:]))
    ok = decreasing and last[-1] < 0.5 * last[0]
    reason = "" if ok else ("tail not strictly decreasing" if not decreasing else "tail did not halve")
    return SuperlinearReport(ratios, last, ok, reason=reason)


def estimate_gamma(cost, center, radius: float, n_pairs: int = 200, rng: SeededRng | None = None) -> float:
    """
    Sampled lower estimate of the Hessian Lipschitz constant in a ball.

    Maximizes ``||hess(x) - hess(y)|| / ||x - y||`` over random pairs. The
    true constant can only be larger; the value is a heuristic for tests.
    """
    rng = rng if rng is not None else SeededRng(0)
    c = as_vec(center, cost.dim)
    best = 0.0
    for _ in range(n_pairs):
        u = rng.gen.standard_normal((2, cost.dim))
        u *= (radius * rng.gen.random((2, 1)) ** (1.0 / cost.dim)) / np.linalg.norm(u, axis=1, keepdims=True)
        x, y = c + u[0], c + u[1]
        dist = float(np.linalg.norm(x - y))
        if dist == 0:
            continue
        best = max(best, spectral_norm(cost.hessian(x) - cost.hessian(y)) / dist)
    return best
