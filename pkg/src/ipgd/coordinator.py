"""
Server side of the protocol.

The server keeps the estimate ``x(t)`` and, for IPG, the pre-conditioner
``K(t)``. Each iteration it broadcasts, collects the agents' replies in
fixed agent-id order, and updates

    x(t+1) = x(t) - delta * K(t) @ sum_i g_i(t)
    K(t+1) = K(t) - alpha(t) * sum_i R_i(t)

in that order (the x-step uses the pre-update K). The module also holds the
five baseline optimizers, step-size schedules, the step-size checks used by
theorem mode, and process-noise injection.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .agent import Agent
from .costs import hessian_noise
from .errors import ConfigError, DivergenceError
from .numkit import SeededRng, as_mat, as_vec, draw_uniform, is_finite, spectral_norm

log = logging.getLogger(__name__)

DIVERGENCE_RADIUS = 1e12


# ---------------------------------------------------------------- schedules

@dataclass(frozen=True)
class AlphaSchedule:
    """
    Step-size sequence ``alpha(t)`` for a 0-based iteration counter ``t``.

    Modes: ``constant`` (c), ``two_over_sum`` (2 / (lam1 + lamd)),
    ``inverse_t`` (c / (t+1)), ``inverse_sqrt_t`` (c / sqrt(t+1)),
    ``theorem_bound`` (a safety fraction of :func:`theorem_alpha_bound`) and
    ``custom`` (an explicit list, last value repeated).
    """

    mode: str
    params: dict = field(default_factory=dict)

    MODES = ("constant", "two_over_sum", "inverse_t", "inverse_sqrt_t", "theorem_bound", "custom")

    def __post_init__(self):
        if self.mode not in self.MODES:
            raise ConfigError(f"unknown schedule mode {self.mode!r}")
        if self.mode == "custom" and not self.params.get("values"):
            raise ConfigError("custom schedule needs a non-empty 'values' list")
        if self.mode == "theorem_bound":
            mu, rho = self.params["mu"], self.params["rho"]
            if mu * rho >= 1:
                raise ConfigError(f"mu*rho = {mu * rho} >= 1")

    @classmethod
    def constant(cls, c: float):
        return cls("constant", {"c": float(c)})

    @classmethod
    def two_over_sum(cls, lam1: float, lamd: float):
        return cls("two_over_sum", {"lam1": float(lam1), "lamd": float(lamd)})

    @classmethod
    def inverse_t(cls, c: float):
        return cls("inverse_t", {"c": float(c)})

    @classmethod
    def inverse_sqrt_t(cls, c: float):
        return cls("inverse_sqrt_t", {"c": float(c)})

    @classmethod
    def custom(cls, values: Sequence[float]):
        return cls("custom", {"values": [float(v) for v in values]})

    @classmethod
    def theorem(cls, Lambda, beta, l, mu, rho, exact=True, safety=0.99):
        return cls(
            "theorem_bound",
            {"Lambda": Lambda, "beta": beta, "l": l, "mu": mu, "rho": rho, "exact": exact, "safety": safety},
        )

    def __call__(self, t: int) -> float:
        p = self.params
        if self.mode == "constant":
            a = p["c"]
        elif self.mode == "two_over_sum":
            a = 2.0 / (p["lam1"] + p["lamd"])
        elif self.mode == "inverse_t":
            a = p["c"] / (t + 1)
        elif self.mode == "inverse_sqrt_t":
            a = p["c"] / math.sqrt(t + 1)
        elif self.mode == "theorem_bound":
            a = p.get("safety", 0.99) * theorem_alpha_bound(
                t, p["Lambda"], p["beta"], p["l"], p["mu"], p["rho"], exact=p.get("exact", True)
            )
        else:
            vals = p["values"]
            a = vals[min(t, len(vals) - 1)]
        if not a > 0:
            raise ConfigError(f"schedule produced non-positive step {a} at t={t}")
        return a

    def to_dict(self) -> dict:
        return {"mode": self.mode, **self.params}

    @classmethod
    def from_spec(cls, spec) -> "AlphaSchedule":
        """Build from a number (constant) or a dict with a ``mode`` key."""
        if isinstance(spec, AlphaSchedule):
            return spec
        if isinstance(spec, (int, float)):
            return cls.constant(spec)
        spec = dict(spec)
        mode = spec.pop("mode")
        return cls(mode, spec)


def theorem_alpha_bound(t, Lambda, beta, l, mu, rho, exact=False) -> float:
    """
    Upper bound on ``alpha(t)`` from the linear-convergence theorem.

    ``exact=False`` gives the simplified form
    ``min{1/(Lambda+beta), mu^t (1 - mu rho) / (2 l)}``; ``exact=True`` keeps
    the factor ``1 / (1 - (mu rho)^(t+1))`` on the second term, which makes it
    equal to ``1/(2l)`` at ``t = 0``.
    """
    if l <= 0:
        raise ConfigError("l must be positive")
    if mu <= 1:
        raise ConfigError("mu must exceed 1")
    q = mu * rho
    if q >= 1 or q < 0:
        raise ConfigError(f"need 0 <= mu*rho < 1, got {q}")
    second = mu**t * (1.0 - q) / (2.0 * l)
    if exact:
        second /= 1.0 - q ** (t + 1)
    return min(1.0 / (Lambda + beta), second)


def alpha_valid(alpha_t: float, lam_max: float, beta: float) -> bool:
    """True iff ``0 < alpha_t < 1 / (lam_max + beta)``."""
    return 0.0 < alpha_t < 1.0 / (lam_max + beta)


def init_condition_terms(x0, K0, x_star, hess_star, beta, gamma, l):
    """Left-hand side of the initial condition and ``eta = ||K*||``."""
    hess_star = as_mat(hess_star)
    d = hess_star.shape[0]
    shifted = hess_star + beta * np.eye(d)
    lam_min = float(np.linalg.eigvalsh(0.5 * (shifted + shifted.T))[0])
    if lam_min <= 0:
        raise ConfigError("Hessian at the minimizer plus beta*I is singular")
    K_star = np.linalg.inv(shifted)
    eta = spectral_norm(K_star)
    z0 = float(np.linalg.norm(as_vec(x0, d) - as_vec(x_star, d)))
    lhs = 0.5 * eta * gamma * z0 + l * spectral_norm(as_mat(K0, d) - K_star) + eta * beta
    return lhs, eta


def init_condition_check(x0, K0, x_star, hess_star, beta, gamma, l, mu) -> bool:
    """
    ``eta*gamma/2 ||x0 - x*|| + l ||K0 - K*|| + eta*beta <= 1/(2 mu)``
    with ``K* = (hess_star + beta I)^-1`` and ``eta = ||K*||``.
    """
    lhs, _ = init_condition_terms(x0, K0, x_star, hess_star, beta, gamma, l)
    return lhs <= 1.0 / (2.0 * mu)


# ---------------------------------------------------------------- IPG updates

@dataclass
class IpgState:
    x: np.ndarray
    K: np.ndarray
    t: int = 0
    delta: float = 1.0
    beta: float = 0.0
    schedule: AlphaSchedule = field(default_factory=lambda: AlphaSchedule.constant(1e-3))


def _finite_or_raise(arr, what, t=None):
    if not np.all(np.isfinite(arr)):
        raise DivergenceError(f"non-finite {what}", t)
    return arr


def ipg_update_x(x, K, g_sum, delta: float) -> np.ndarray:
    """``x - delta * K @ g_sum``; uses the pre-update K."""
    x = as_vec(x)
    return _finite_or_raise(x - delta * (as_mat(K, x.size) @ as_vec(g_sum, x.size)), "estimate")


def ipg_update_K(K, R_sum, alpha_t: float) -> np.ndarray:
    """``K - alpha_t * R_sum`` where column j of ``R_sum`` is sum_i R_ij."""
    K = as_mat(K)
    return _finite_or_raise(K - alpha_t * as_mat(R_sum, K.shape[0]), "pre-conditioner")


# ---------------------------------------------------------------- baselines

@dataclass
class GDState:
    x: np.ndarray


@dataclass
class MomentumState:
    x: np.ndarray
    v: np.ndarray  # x(t) - x(t-1)


@dataclass
class AdamState:
    x: np.ndarray
    m: np.ndarray
    v: np.ndarray
    t: int = 0


@dataclass
class BFGSState:
    x: np.ndarray
    B: np.ndarray  # inverse-Hessian approximation
    g: np.ndarray | None = None
    f: float | None = None
    x_prev: np.ndarray | None = None


def step_gd(state: GDState, g_sum, alpha: float) -> GDState:
    return GDState(state.x - alpha * g_sum)


def step_hbm(state: MomentumState, g_sum, alpha: float, momentum: float) -> MomentumState:
    x_new = state.x - alpha * g_sum + momentum * state.v
    return MomentumState(x_new, x_new - state.x)


def nag_lookahead(state: MomentumState, momentum: float) -> np.ndarray:
    return state.x + momentum * state.v


def step_nag(state: MomentumState, g_lookahead, alpha: float, momentum: float) -> MomentumState:
    x_new = nag_lookahead(state, momentum) - alpha * g_lookahead
    return MomentumState(x_new, x_new - state.x)


def step_adam(state: AdamState, g_sum, alpha: float, b1=0.9, b2=0.999, eps=1e-8) -> AdamState:
    t = state.t + 1
    m = b1 * state.m + (1 - b1) * g_sum
    v = b2 * state.v + (1 - b2) * g_sum * g_sum
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    return AdamState(state.x - alpha * m_hat / (np.sqrt(v_hat) + eps), m, v, t)


def bfgs_update_inverse(B, s, y, curv_tol: float = 1e-12):
    """
    Two-sided rank-2 BFGS update of the inverse-Hessian approximation.

    Returns ``(B_new, True)``, or ``(B, False)`` when the curvature
    condition fails. The condition is ``s^T y > curv_tol ||s|| ||y||``, so a
    pair that is numerically orthogonal (typically at the rounding floor
    near the minimizer) is skipped as well.
    """
    sy = float(s @ y)
    if not sy > curv_tol * float(np.linalg.norm(s) * np.linalg.norm(y)):
        return B, False
    r = 1.0 / sy
    # (I - r s y^T) B (I - r y s^T) + r s s^T, expanded; overflow is caught below
    with np.errstate(over="ignore", invalid="ignore"):
        By = B @ y
        B_new = B - r * (np.outer(s, By) + np.outer(By, s)) + (r * r * float(y @ By) + r) * np.outer(s, s)
    if not np.all(np.isfinite(B_new)):
        return B, False
    return B_new, True


def step_bfgs(state: BFGSState, g_sum, alpha: float) -> BFGSState:
    """
    Fixed-step BFGS in single-round form.

    ``g_sum`` is the gradient at ``state.x``. The curvature pair from the
    previous step, ``(x - x_prev, g_sum - g_prev)``, updates ``B`` first (or
    is skipped when ``s^T y <= 0``); then ``x <- x - alpha * B g_sum``.
    """
    B = state.B
    if state.g is not None and state.x_prev is not None:
        B, _ = bfgs_update_inverse(B, state.x - state.x_prev, g_sum - state.g)
    x_new = state.x - alpha * (B @ g_sum)
    return BFGSState(x_new, B, np.array(g_sum, dtype=np.float64), None, state.x)


def armijo_backtrack(value_fn, x, direction, f0, g0, step0=1.0, c1=1e-4, shrink=0.5, max_halvings=30):
    """
    Backtracking line search on the Armijo condition.

    Returns ``(step, f_new, n_evals)``; ``step`` is ``None`` when no trial
    within ``max_halvings`` satisfies the condition.
    """
    slope = float(g0 @ direction)
    step = step0
    n = 0
    for _ in range(max_halvings + 1):
        f_new = value_fn(x + step * direction)
        n += 1
        if math.isfinite(f_new) and f_new <= f0 + c1 * step * slope:
            return step, f_new, n
        step *= shrink
    return None, None, n


# ---------------------------------------------------------------- noise

@dataclass(frozen=True)
class NoiseSpec:
    """
    ``kind``: ``none``, ``process_uniform`` (adds U(lo, hi) to every entry of
    each targeted iterated variable after every update) or
    ``gradient_gaussian`` (adds N(0, H) to the aggregated gradient of a
    quadratic problem; ``per_agent=True`` draws N(0, H_i) inside each agent).
    ``targets=None`` means every iterated variable of the optimizer.
    """

    kind: str = "none"
    lo: float = 0.0
    hi: float = 0.0
    targets: tuple | None = None
    per_agent: bool = False
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("none", "process_uniform", "gradient_gaussian"):
            raise ConfigError(f"unknown noise kind {self.kind!r}")
        if self.lo > self.hi:
            raise ConfigError("noise interval needs lo <= hi")

    @property
    def active(self) -> bool:
        if self.kind == "process_uniform":
            return self.hi > 0 or self.lo < 0
        return self.kind == "gradient_gaussian" and self.scale != 0


def inject_process_noise(state_vars, spec: NoiseSpec, rng: SeededRng):
    """
    Add independent U(lo, hi) noise to every entry of the targeted variables.

    ``state_vars`` is a dict name -> array (or a list, treated as unnamed and
    always targeted). Returns a new container of the same kind; non-targeted
    entries are returned unchanged.
    """
    if spec.kind != "process_uniform" or (spec.lo == 0 and spec.hi == 0):
        return state_vars
    if isinstance(state_vars, dict):
        out = {}
        for name, arr in state_vars.items():
            if spec.targets is None or name in spec.targets:
                arr = np.asarray(arr, dtype=np.float64)
                arr = arr + draw_uniform(rng, spec.lo, spec.hi, arr.size).reshape(arr.shape)
            out[name] = arr
        return out
    return [np.asarray(a) + draw_uniform(rng, spec.lo, spec.hi, np.size(a)).reshape(np.shape(a)) for a in state_vars]


# ---------------------------------------------------------------- network

class Network:
    """
    In-process stand-in for the synchronous server-agent network.

    Every call is one round: broadcast, all agents reply, replies are summed
    in agent-id order. ``rounds`` counts rounds of each kind.
    """

    def __init__(self, agents: Sequence[Agent], gradient_noise: NoiseSpec | None = None, rng: SeededRng | None = None):
        if not agents:
            raise ConfigError("need at least one agent")
        self.agents = sorted(agents, key=lambda a: a.id)
        dims = {a.dim for a in self.agents}
        if len(dims) != 1:
            raise ConfigError("agents disagree on dimension")
        betas = {a.beta for a in self.agents}
        ms = {a.m_total for a in self.agents}
        if len(betas) != 1 or ms != {len(self.agents)}:
            raise ConfigError("beta and m must be identical across agents and m must equal the agent count")
        self.dim = dims.pop()
        self.beta = betas.pop()
        self.noise = gradient_noise if gradient_noise is not None and gradient_noise.kind == "gradient_gaussian" else None
        self.rng = rng if rng is not None else SeededRng(0)
        self.rounds = {"gradient": 0, "ipg": 0, "cost": 0}

    def _noisy(self, g_sum):
        if self.noise is None or self.noise.scale == 0:
            return g_sum
        if self.noise.per_agent:
            eps = np.zeros(self.dim)
            for a in self.agents:
                eps += hessian_noise([a.cost], a.rng)
        else:
            eps = hessian_noise([a.cost for a in self.agents], self.rng)
        return g_sum + self.noise.scale * eps

    def ipg_round(self, x, K):
        self.rounds["ipg"] += 1
        g_sum = R_sum = None
        for a in self.agents:
            reply = a.run_round(x, K)
            if g_sum is None:
                g_sum, R_sum = reply.gradient.copy(), reply.residuals
            else:
                g_sum += reply.gradient
                R_sum += reply.residuals
        return self._noisy(g_sum), R_sum

    def gradient_round(self, x):
        self.rounds["gradient"] += 1
        g_sum = np.zeros(self.dim)
        for a in self.agents:
            g_sum += a.gradient_round(x).gradient
        return self._noisy(g_sum)

    def cost_round(self, x) -> float:
        self.rounds["cost"] += 1
        return float(sum(a.value(x) for a in self.agents))

    @property
    def total_rounds(self) -> int:
        return sum(self.rounds.values())


# ---------------------------------------------------------------- drivers

@dataclass
class StepInfo:
    alpha: float
    aux_rounds: int = 0
    events: list = field(default_factory=list)


class Optimizer:
    """Common driver interface: one call to :meth:`step` is one iteration."""

    name = "base"
    needs_residuals = False

    @property
    def x(self) -> np.ndarray:
        raise NotImplementedError

    def step(self, net: Network, t: int) -> StepInfo:
        raise NotImplementedError

    def state_vars(self) -> dict:
        raise NotImplementedError

    def set_state_vars(self, values: dict) -> None:
        raise NotImplementedError

    def hyper(self) -> dict:
        return {}


class IPG(Optimizer):
    name = "IPG"
    needs_residuals = True

    def __init__(self, x0, K0=None, delta=1.0, beta=0.0, alpha=None):
        x0 = as_vec(x0).copy()
        d = x0.size
        K0 = np.zeros((d, d)) if K0 is None else as_mat(K0, d).copy()
        self.state = IpgState(x0, K0, 0, float(delta), float(beta), AlphaSchedule.from_spec(alpha if alpha is not None else 1e-3))

    @property
    def x(self):
        return self.state.x

    @property
    def K(self):
        return self.state.K

    def step(self, net, t):
        s = self.state
        if net.beta != s.beta:
            raise ConfigError(f"server beta={s.beta} differs from broadcast beta={net.beta}")
        g_sum, R_sum = net.ipg_round(s.x, s.K)
        a = s.schedule(s.t)
        x_new = ipg_update_x(s.x, s.K, g_sum, s.delta)
        K_new = ipg_update_K(s.K, R_sum, a)
        self.state = IpgState(x_new, K_new, s.t + 1, s.delta, s.beta, s.schedule)
        return StepInfo(a)

    def state_vars(self):
        return {"x": self.state.x, "K": self.state.K}

    def set_state_vars(self, values):
        self.state.x = values["x"]
        self.state.K = values["K"]

    def hyper(self):
        return {"alpha": self.state.schedule.to_dict(), "delta": self.state.delta, "beta": self.state.beta}


class GD(Optimizer):
    name = "GD"

    def __init__(self, x0, alpha):
        self.state = GDState(as_vec(x0).copy())
        self.schedule = AlphaSchedule.from_spec(alpha)

    @property
    def x(self):
        return self.state.x

    def step(self, net, t):
        a = self.schedule(t)
        self.state = step_gd(self.state, net.gradient_round(self.state.x), a)
        return StepInfo(a)

    def state_vars(self):
        return {"x": self.state.x}

    def set_state_vars(self, values):
        self.state.x = values["x"]

    def hyper(self):
        return {"alpha": self.schedule.to_dict()}


class HBM(Optimizer):
    name = "HBM"

    def __init__(self, x0, alpha, momentum):
        x0 = as_vec(x0).copy()
        self.state = MomentumState(x0, np.zeros_like(x0))
        self.schedule = AlphaSchedule.from_spec(alpha)
        self.momentum = float(momentum)

    @property
    def x(self):
        return self.state.x

    def step(self, net, t):
        a = self.schedule(t)
        self.state = step_hbm(self.state, net.gradient_round(self.state.x), a, self.momentum)
        return StepInfo(a)

    def state_vars(self):
        return {"x": self.state.x, "momentum": self.state.v}

    def set_state_vars(self, values):
        self.state.x = values["x"]
        self.state.v = values["momentum"]

    def hyper(self):
        return {"alpha": self.schedule.to_dict(), "momentum": self.momentum}


class NAG(HBM):
    """Nesterov: the broadcast point is the look-ahead ``x + momentum*(x - x_prev)``."""

    name = "NAG"

    def step(self, net, t):
        a = self.schedule(t)
        y = nag_lookahead(self.state, self.momentum)
        self.state = step_nag(self.state, net.gradient_round(y), a, self.momentum)
        return StepInfo(a)


class Adam(Optimizer):
    name = "Adam"

    def __init__(self, x0, alpha, b1=0.9, b2=0.999, eps=1e-8):
        x0 = as_vec(x0).copy()
        self.state = AdamState(x0, np.zeros_like(x0), np.zeros_like(x0), 0)
        self.schedule = AlphaSchedule.from_spec(alpha)
        self.b1, self.b2, self.eps = float(b1), float(b2), float(eps)

    @property
    def x(self):
        return self.state.x

    def step(self, net, t):
        a = self.schedule(t)
        g = net.gradient_round(self.state.x)
        self.state = step_adam(self.state, g, a, self.b1, self.b2, self.eps)
        return StepInfo(a)

    def state_vars(self):
        return {"x": self.state.x, "m": self.state.m, "v": self.state.v}

    def set_state_vars(self, values):
        self.state.x, self.state.m, self.state.v = values["x"], values["m"], np.maximum(values["v"], 0.0)

    def hyper(self):
        return {"alpha": self.schedule.to_dict(), "b1": self.b1, "b2": self.b2, "eps": self.eps}


class BFGS(Optimizer):
    """
    BFGS on the inverse Hessian with ``B(0) = I``.

    ``alpha="backtrack"`` runs an Armijo line search (one cost round per
    trial, logged as auxiliary rounds); a number or schedule gives a fixed
    step. A failed curvature check skips the update; a failed line search
    resets ``B`` to the identity and keeps ``x``.
    """

    name = "BFGS"

    def __init__(self, x0, alpha="backtrack", c1=1e-4, shrink=0.5, max_halvings=30):
        x0 = as_vec(x0).copy()
        self.state = BFGSState(x0, np.eye(x0.size))
        self.backtrack = alpha == "backtrack"
        self.schedule = None if self.backtrack else AlphaSchedule.from_spec(alpha)
        self.c1, self.shrink, self.max_halvings = c1, shrink, max_halvings
        self.skipped_updates = 0

    @property
    def x(self):
        return self.state.x

    def step(self, net, t):
        s = self.state
        aux = 0
        events = []
        if s.g is None:
            s.g = net.gradient_round(s.x)
            aux += 1
        direction = -(s.B @ s.g)
        if self.backtrack:
            if s.f is None:
                s.f = net.cost_round(s.x)
                aux += 1
            if not float(s.g @ direction) < 0:
                events.append("bfgs_reset_nondescent")
                s.B = np.eye(s.x.size)
                direction = -s.g
            a, f_new, n = armijo_backtrack(net.cost_round, s.x, direction, s.f, s.g, 1.0, self.c1, self.shrink, self.max_halvings)
            aux += n
            if a is None:
                events.append("bfgs_line_search_failed")
                log.info("BFGS line search failed at t=%d; resetting B", t)
                s.B = np.eye(s.x.size)
                return StepInfo(0.0, aux, events)
        else:
            a = self.schedule(t)
            f_new = None
        step = a * direction
        x_new = s.x + step
        if not is_finite(x_new):
            raise DivergenceError("non-finite BFGS iterate", t)
        g_new = net.gradient_round(x_new)
        B_new, ok = bfgs_update_inverse(s.B, step, g_new - s.g)
        if not ok:
            self.skipped_updates += 1
            events.append("bfgs_skip_curvature")
            log.debug("BFGS curvature condition failed at t=%d", t)
        if not is_finite(B_new):
            raise DivergenceError("non-finite BFGS matrix", t)
        self.state = BFGSState(x_new, B_new, g_new, f_new)
        return StepInfo(a, aux, events)

    def state_vars(self):
        return {"x": self.state.x, "B": self.state.B}

    def set_state_vars(self, values):
        changed = values["x"] is not self.state.x
        self.state.x, self.state.B = values["x"], values["B"]
        if changed:
            # cached gradient and value refer to the pre-noise point
            self.state.g = None
            self.state.f = None

    def hyper(self):
        return {"alpha": "backtrack" if self.backtrack else self.schedule.to_dict()}


OPTIMIZERS = {"IPG": IPG, "GD": GD, "NAG": NAG, "HBM": HBM, "Adam": Adam, "BFGS": BFGS}
TABLE_ORDER = ("IPG", "GD", "NAG", "HBM", "Adam", "BFGS")


def make_optimizer(name: str, x0, **hyper) -> Optimizer:
    """Instantiate a driver by its table name (case-insensitive)."""
    lookup = {k.lower(): v for k, v in OPTIMIZERS.items()}
    try:
        cls = lookup[name.lower()]
    except KeyError:
        raise ConfigError(f"unknown optimizer {name!r}; choose from {list(OPTIMIZERS)}") from None
    try:
        return cls(x0, **hyper)
    except TypeError as exc:
        raise ConfigError(f"bad hyperparameters for {cls.name}: {exc}") from None
