"""
Experiment orchestration: configuration, the synchronous round loop,
stopping rules and metrics, and CSV/JSON emission.

CSV schema v1, one row per iteration ``t = 0..T``::

    t, rel_error, rel_cost, cost, alpha, noise_flag, aux_rounds

``rel_error`` and ``rel_cost`` are ``nan`` when the minimizer or optimal
value is unknown; ``alpha`` is the step used to produce row ``t`` (``nan``
at ``t = 0``); ``noise_flag`` is 1 when process noise was injected after the
update; ``aux_rounds`` counts extra cost/gradient rounds spent in that
iteration. Floats are written with ``repr`` so a round trip is exact.
"""

from __future__ import annotations

import csv
import dataclasses
import inspect
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .agent import Agent
from .coordinator import (
    DIVERGENCE_RADIUS,
    OPTIMIZERS,
    TABLE_ORDER,
    Network,
    NoiseSpec,
    inject_process_noise,
    make_optimizer,
)
from .costs import AggregateCost, LogisticCost, QuadraticCost, nqm_build
from .datapipe import DesignMatrix, cifar_design, default_data_dir, mnist_design, partition
from .errors import ConfigError, DivergenceError
from .numkit import SeededRng, draw_normal

log = logging.getLogger(__name__)

CSV_VERSION = 1
CSV_COLUMNS = ("t", "rel_error", "rel_cost", "cost", "alpha", "noise_flag", "aux_rounds")
SUMMARY_COLUMNS = ("dataset", "optimizer", "eps_tol", "iterations_to_tol", "sse", "sse_settled", "test_error", "status")

PROBLEM_KINDS = ("nqm", "mnist", "cifar10", "quadratic")
MODES = ("full_batch", "process_noise", "mini_batch")

# Step sizes and momenta per (dataset, mode); keys are optimizer names.
PRESETS = {
    ("nqm", "full_batch"): {
        "IPG": {"alpha": 1.99, "delta": 1.0, "beta": 0.0},
        "GD": {"alpha": 1.99},
        "NAG": {"alpha": 1.33, "momentum": 0.97},
        "HBM": {"alpha": 3.92, "momentum": 0.96},
        "Adam": {"alpha": {"mode": "inverse_t", "c": 1.0}},
        "BFGS": {"alpha": "backtrack"},
    },
    ("mnist", "full_batch"): {
        "IPG": {"alpha": 5e-4, "delta": 1.0, "beta": 0.0},
        "GD": {"alpha": 5e-4},
        "NAG": {"alpha": 5e-4, "momentum": 0.97},
        "HBM": {"alpha": 1e-3, "momentum": 0.94},
        "Adam": {"alpha": 2.0},
        "BFGS": {"alpha": 1e-3},
    },
    ("mnist", "process_noise"): {
        "IPG": {"alpha": 5e-4, "delta": 1.0, "beta": 0.0},
        "GD": {"alpha": 5e-4},
        "NAG": {"alpha": 5e-4, "momentum": 0.97},
        "HBM": {"alpha": 1e-3, "momentum": 0.94},
        "Adam": {"alpha": 2.0},
        "BFGS": {"alpha": 1e-3},
    },
    ("mnist", "mini_batch"): {
        "IPG": {"alpha": 1e-4, "delta": 0.05, "beta": 1.0},
        "GD": {"alpha": 1e-4},
        "NAG": {"alpha": 5e-4, "momentum": 0.97},
        "HBM": {"alpha": 1e-3, "momentum": 0.95},
        "Adam": {"alpha": 1.0},
        "BFGS": {"alpha": 0.05},
    },
    ("cifar10", "full_batch"): {
        "IPG": {"alpha": 2e-4, "delta": 1.0, "beta": 0.0},
        "GD": {"alpha": 2e-4},
        "NAG": {"alpha": 1e-4, "momentum": 0.95},
        "HBM": {"alpha": 3e-4, "momentum": 0.94},
        "Adam": {"alpha": {"mode": "inverse_sqrt_t", "c": 1.0}},
        "BFGS": {"alpha": 2e-4},
    },
    ("cifar10", "process_noise"): {
        "IPG": {"alpha": 2e-4, "delta": 0.05, "beta": 0.0},
        "GD": {"alpha": 2e-4},
        "NAG": {"alpha": 1e-4, "momentum": 0.93},
        "HBM": {"alpha": 3e-4, "momentum": 0.94},
        "Adam": {"alpha": 0.1},
        "BFGS": {"alpha": 1e-5},
    },
    ("cifar10", "mini_batch"): {
        "IPG": {"alpha": 1e-3, "delta": 0.05, "beta": 0.0},
        "GD": {"alpha": 2e-4},
        "NAG": {"alpha": 2e-4, "momentum": 0.95},
        "HBM": {"alpha": 2e-4, "momentum": 0.92},
        "Adam": {"alpha": {"mode": "inverse_sqrt_t", "c": 1.0}},
        "BFGS": {"alpha": "backtrack"},
    },
}

# (eps_tol, window) per (dataset, mode)
TOLERANCES = {
    ("nqm", "full_batch"): (1e-3, 1),
    ("mnist", "full_batch"): (1e-12, 10),
    ("mnist", "process_noise"): (6e-8, 10),
    ("mnist", "mini_batch"): (2e-3, 10),
    ("cifar10", "full_batch"): (1e-12, 10),
    ("cifar10", "process_noise"): (4e-6, 10),
    ("cifar10", "mini_batch"): (2e-3, 10),
}

PROCESS_NOISE = {"mnist": (0.0, 2.3e-4), "cifar10": (0.0, 1e-4)}


def preset(problem: str, mode: str, optimizer: str) -> dict:
    try:
        table = PRESETS[(problem, mode)]
    except KeyError:
        raise ConfigError(f"no preset for {problem}/{mode}") from None
    name = _canonical(optimizer)
    return json.loads(json.dumps(table[name]))


def _canonical(name: str) -> str:
    for k in OPTIMIZERS:
        if k.lower() == str(name).lower():
            return k
    raise ConfigError(f"unknown optimizer {name!r}")


# ---------------------------------------------------------------- config

@dataclass
class ExperimentConfig:
    """
    Everything needed to reproduce one run.

    ``problem`` is a dict with ``kind`` in ``nqm`` (``d``; ``noise``,
    ``per_agent_noise``, ``noise_scale``), ``mnist`` / ``cifar10``
    (``n``, ``classes``, ``data_dir``, ``symmetry``) or ``quadratic``
    (``H`` as nested lists, or ``eigs`` plus ``rotation_seed``; optional
    ``b``). ``hyper`` defaults to the preset for the problem and mode.
    """

    problem: dict
    optimizer: str = "IPG"
    hyper: dict | None = None
    m: int = 10
    mode: str = "full_batch"
    process_noise: dict | None = None
    batch_size: int | None = None
    seed: int = 0
    max_iter: int = 10_000
    eps_tol: float | None = None
    window: int | None = None
    metric: str | None = None
    sse_delta: float = 1e-4
    sse_window: int = 50
    stop_on_tol: bool = False
    keep_iterates: bool = False
    x0_var: float | None = None
    f_star: float | None = None
    out: str | None = None

    def __post_init__(self):
        if isinstance(self.problem, str):
            self.problem = {"kind": self.problem}
        kind = self.problem.get("kind")
        if kind not in PROBLEM_KINDS:
            raise ConfigError(f"problem kind must be one of {PROBLEM_KINDS}, got {kind!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        self.optimizer = _canonical(self.optimizer)
        if self.m < 1:
            raise ConfigError("m must be positive")
        if self.max_iter < 0:
            raise ConfigError("max_iter must be non-negative")
        if self.mode == "mini_batch":
            if kind not in ("mnist", "cifar10"):
                raise ConfigError("mini-batch mode needs a data-backed problem")
            if self.batch_size is None:
                self.batch_size = 10
        elif self.batch_size is not None:
            raise ConfigError("batch_size is only used in mini_batch mode")
        if self.hyper is None:
            self.hyper = preset(kind, self.mode, self.optimizer) if (kind, self.mode) in PRESETS else {}
        if self.mode == "process_noise" and self.process_noise is None:
            lo, hi = PROCESS_NOISE.get(kind, (0.0, 0.0))
            self.process_noise = {"lo": lo, "hi": hi, "targets": None}
        tol = TOLERANCES.get((kind, self.mode), (1e-10, 1))
        if self.eps_tol is None:
            self.eps_tol = tol[0]
        if self.window is None:
            self.window = tol[1]
        if self.metric is None:
            self.metric = "rel_cost" if kind in ("mnist", "cifar10") else "rel_error"
        if self.metric not in ("rel_error", "rel_cost"):
            raise ConfigError("metric must be rel_error or rel_cost")
        if self.x0_var is None:
            self.x0_var = 0.1 if kind in ("mnist", "cifar10") else 1.0
        allowed = set(inspect.signature(OPTIMIZERS[self.optimizer]).parameters) - {"x0"}
        extra = set(self.hyper) - allowed
        if extra:
            raise ConfigError(f"{self.optimizer} does not take {sorted(extra)}")

    @property
    def dataset(self) -> str:
        return self.problem["kind"]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def replace(self, **changes) -> "ExperimentConfig":
        d = self.to_dict()
        if "optimizer" in changes and "hyper" not in changes:
            d["hyper"] = None
        d.update(changes)
        return ExperimentConfig.from_dict(d)


# ---------------------------------------------------------------- problems

@dataclass
class Problem:
    costs: list
    x_star: np.ndarray | None = None
    f_star: float | None = None
    test_design: DesignMatrix | None = None
    gradient_noise: NoiseSpec | None = None
    fingerprint: str | None = None

    @property
    def dim(self) -> int:
        return self.costs[0].dim

    @property
    def aggregate(self) -> AggregateCost:
        return AggregateCost(self.costs)


def quadratic_from_spec(spec: dict) -> tuple[np.ndarray, np.ndarray | None]:
    """Hessian and linear term of a custom quadratic."""
    if "H" in spec:
        H = np.asarray(spec["H"], dtype=np.float64)
    elif "eigs" in spec:
        eigs = np.asarray(spec["eigs"], dtype=np.float64)
        Q, _ = np.linalg.qr(SeededRng(spec.get("rotation_seed", 0), 0).gen.standard_normal((eigs.size, eigs.size)))
        H = (Q * eigs) @ Q.T
        H = 0.5 * (H + H.T)
    else:
        raise ConfigError("quadratic problem needs 'H' or 'eigs'")
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ConfigError("H must be square")
    b = spec.get("b")
    return H, None if b is None else np.asarray(b, dtype=np.float64)


def quadratic_split(H, b, m: int) -> list[QuadraticCost]:
    """
    Give each of ``m`` agents a contiguous block of rows of a factor ``A``
    with ``A^T A = H``; the linear term is shared equally.
    """
    d = H.shape[0]
    if d % m:
        raise ConfigError(f"m={m} does not divide d={d}")
    w, V = np.linalg.eigh(0.5 * (H + H.T))
    if w[0] < -1e-12 * max(1.0, w[-1]):
        raise ConfigError("H is not positive semi-definite")
    A = (V * np.sqrt(np.clip(w, 0, None))).T
    k = d // m
    share = None if b is None else b / m
    return [QuadraticCost(A[i * k:(i + 1) * k], share) for i in range(m)]


def reference_minimum(costs, tol: float = 1e-12, max_iter: int = 100_000):
    """
    High-accuracy minimizer of a smooth convex aggregate by full-batch IPG.

    Uses ``delta = 1``, ``beta = 0``, ``K(0) = 0`` and
    ``alpha = 0.99 / lam_max_bound``. Stops once the gradient norm is below
    ``tol`` or the cost has not decreased for 200 iterations.
    """
    agg = AggregateCost(costs)
    lam = agg.lam_max_bound()
    if not lam:
        raise ConfigError("reference run needs a Hessian bound")
    d = agg.dim
    x = np.zeros(d)
    K = np.zeros((d, d))
    alpha = 0.99 / lam
    best = agg.value(x)
    stall = 0
    for _ in range(max_iter):
        g = agg.gradient(x)
        if np.linalg.norm(g) < tol:
            break
        R = agg.hess_mat(x, K) - np.eye(d)
        x = x - K @ g
        K = K - alpha * R
        f = agg.value(x)
        if f < best:
            best, stall = f, 0
        else:
            stall += 1
            if stall >= 200:
                break
    return x, agg.value(x)


def _fstar_cache(fingerprint: str, data_dir) -> Path:
    return Path(data_dir) / "cache" / f"fstar_{fingerprint[:16]}.json"


def cached_reference(costs, fingerprint: str, data_dir=None):
    """Reference minimizer and value, cached on disk by data fingerprint."""
    path = _fstar_cache(fingerprint, data_dir if data_dir is not None else default_data_dir())
    if path.exists():
        rec = json.loads(path.read_text())
        if rec.get("fingerprint") == fingerprint:
            return np.array(rec["x_star"]), float(rec["f_star"])
    x_star, f_star = reference_minimum(costs)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({"fingerprint": fingerprint, "f_star": f_star, "x_star": x_star.tolist()}))
    except OSError as exc:
        log.warning("could not cache reference optimum: %s", exc)
    return x_star, f_star


_DESIGN_MEMO: dict = {}


def _design_pair(kind: str, problem: dict, seed: int):
    data_dir = problem.get("data_dir")
    both = problem.get("symmetry", "horizontal") == "both_axes"
    key = (kind, str(data_dir), seed, problem.get("n", 10_000), tuple(problem.get("classes", ())), both)
    if key not in _DESIGN_MEMO:
        if kind == "mnist":
            root = None if data_dir is None else Path(data_dir) / "mnist"
            classes = tuple(problem.get("classes", (1, 5)))
            train = mnist_design(root, seed, problem.get("n", 10_000), classes, both_axes=both)
            try:
                test = mnist_design(root, seed, classes=classes, split="test", train=train, both_axes=both)
            except Exception as exc:  # test split is optional
                log.info("no MNIST test split: %s", exc)
                test = None
        else:
            root = None if data_dir is None else Path(data_dir) / "cifar10"
            classes = tuple(problem.get("classes", (0, 1)))
            train = cifar_design(root, seed, problem.get("n", 10_000), classes, both_axes=both)
            try:
                test = cifar_design(root, seed, classes=classes, split="test", train=train, both_axes=both)
            except Exception as exc:
                log.info("no CIFAR-10 test split: %s", exc)
                test = None
        _DESIGN_MEMO[key] = (train, test)
    return _DESIGN_MEMO[key]


def build_problem(cfg: ExperimentConfig) -> Problem:
    p = cfg.problem
    kind = p["kind"]
    if kind == "nqm":
        d = int(p.get("d", 1000))
        costs = nqm_build(d, cfg.m)
        noise = None
        if p.get("noise", True):
            noise = NoiseSpec("gradient_gaussian", per_agent=bool(p.get("per_agent_noise", False)), scale=float(p.get("noise_scale", 1.0)))
        return Problem(costs, np.zeros(d), 0.0, gradient_noise=noise)
    if kind == "quadratic":
        H, b = quadratic_from_spec(p)
        costs = quadratic_split(H, b, cfg.m)
        x_star = np.zeros(H.shape[0]) if b is None else np.linalg.solve(H, b)
        f_star = AggregateCost(costs).value(x_star)
        noise = None
        if p.get("noise", False):
            noise = NoiseSpec("gradient_gaussian", per_agent=bool(p.get("per_agent_noise", False)), scale=float(p.get("noise_scale", 1.0)))
        return Problem(costs, x_star, f_star, gradient_noise=noise)
    train, test = _design_pair(kind, p, int(p.get("data_seed", 0)))
    costs = [LogisticCost(A, b) for A, b in partition(train, cfg.m)]
    fp = train.fingerprint()
    if cfg.f_star is not None:
        x_star, f_star = None, float(cfg.f_star)
    else:
        x_star, f_star = cached_reference(costs, fp, p.get("data_dir"))
    return Problem(costs, x_star, f_star, test, fingerprint=fp)


# ---------------------------------------------------------------- traces

@dataclass
class RunTrace:
    t: list = field(default_factory=list)
    rel_error: list = field(default_factory=list)
    rel_cost: list = field(default_factory=list)
    cost: list = field(default_factory=list)
    alpha: list = field(default_factory=list)
    noise_flag: list = field(default_factory=list)
    aux_rounds: list = field(default_factory=list)
    events: list = field(default_factory=list)
    status: str = "max_iter"
    rounds: dict = field(default_factory=dict)
    x_final: np.ndarray | None = None
    xs: list | None = None
    x_star: np.ndarray | None = None
    f_star: float | None = None
    metric: str = "rel_error"
    config: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.t)

    def series(self, metric: str | None = None) -> np.ndarray:
        return np.asarray(getattr(self, metric or self.metric), dtype=np.float64)

    @property
    def diverged(self) -> bool:
        return self.status == "diverged"

    def rows(self):
        for i in range(len(self.t)):
            yield (self.t[i], self.rel_error[i], self.rel_cost[i], self.cost[i], self.alpha[i], self.noise_flag[i], self.aux_rounds[i])


def _x0(cfg: ExperimentConfig, d: int, rng: SeededRng) -> np.ndarray:
    return draw_normal(rng, 0.0, math.sqrt(cfg.x0_var), d)


def _make_agents(cfg, problem, beta):
    return [
        Agent(i, c, SeededRng(cfg.seed, i + 1), cfg.m, beta=beta, batch_size=cfg.batch_size)
        for i, c in enumerate(problem.costs)
    ]


def run_experiment(cfg: ExperimentConfig, problem: Problem | None = None) -> RunTrace:
    """
    Run one configuration through the synchronous round loop.

    Initialization: ``x(0) ~ N(0, x0_var I)`` from the server stream,
    ``K(0) = 0`` for IPG, ``B(0) = I`` for BFGS. A run ends at ``max_iter``,
    on divergence (non-finite values or ``||x|| > 1e12``), or, with
    ``stop_on_tol``, once the tolerance window is filled.
    """
    problem = problem if problem is not None else build_problem(cfg)
    d = problem.dim
    server = SeededRng(cfg.seed, 0)
    noise_rng = SeededRng(cfg.seed, cfg.m + 1)
    x0 = _x0(cfg, d, server)
    hyper = dict(cfg.hyper)
    beta = float(hyper.get("beta", 0.0)) if cfg.optimizer == "IPG" else 0.0
    net = Network(_make_agents(cfg, problem, beta), problem.gradient_noise, server)
    opt = make_optimizer(cfg.optimizer, x0, **hyper)
    pnoise = None
    if cfg.mode == "process_noise":
        pn = cfg.process_noise
        targets = pn.get("targets")
        pnoise = NoiseSpec("process_uniform", pn["lo"], pn["hi"], None if targets is None else tuple(targets))
    agg = problem.aggregate
    x_star, f_star = problem.x_star, problem.f_star
    z0 = None if x_star is None else float(np.linalg.norm(x0 - x_star))
    if z0 == 0:
        raise ConfigError("x(0) equals the minimizer; relative error undefined")
    if cfg.metric == "rel_cost" and not (f_star and f_star > 0):
        raise ConfigError("relative cost needs a positive optimal value")

    trace = RunTrace(x_star=x_star, f_star=f_star, metric=cfg.metric, config=cfg.to_dict())
    trace.xs = [] if cfg.keep_iterates else None

    def record(t, x, alpha, flag, aux):
        f = agg.value(x)
        trace.t.append(t)
        trace.rel_error.append(float(np.linalg.norm(x - x_star)) / z0 if z0 else math.nan)
        trace.rel_cost.append((f - f_star) / f_star if f_star else math.nan)
        trace.cost.append(f)
        trace.alpha.append(alpha)
        trace.noise_flag.append(flag)
        trace.aux_rounds.append(aux)
        if trace.xs is not None:
            trace.xs.append(x.copy())
        return f

    record(0, opt.x, math.nan, 0, 0)
    tol_hit = None
    for t in range(cfg.max_iter):
        try:
            info = opt.step(net, t)
            flag = 0
            if pnoise is not None and pnoise.active:
                opt.set_state_vars(inject_process_noise(opt.state_vars(), pnoise, noise_rng))
                flag = 1
            x = opt.x
            if not np.all(np.isfinite(x)) or np.linalg.norm(x) > DIVERGENCE_RADIUS:
                raise DivergenceError("iterate left the divergence radius", t + 1)
        except DivergenceError as exc:
            log.info("%s diverged at t=%s: %s", cfg.optimizer, exc.t, exc)
            trace.events.append((t + 1, f"diverged: {exc}"))
            trace.status = "diverged"
            break
        for ev in info.events:
            trace.events.append((t + 1, ev))
        f = record(t + 1, x, info.alpha, flag, info.aux_rounds)
        if not math.isfinite(f):
            trace.events.append((t + 1, "diverged: non-finite cost"))
            trace.status = "diverged"
            break
        if cfg.stop_on_tol:
            tol_hit = iterations_to_tol(trace.series(), cfg.eps_tol, cfg.window)
            if tol_hit is not None:
                trace.status = "converged"
                break
    if trace.status != "diverged":
        trace.x_final = opt.x.copy()
        if tol_hit is None and iterations_to_tol(trace.series(), cfg.eps_tol, cfg.window) is not None:
            trace.status = "converged"
    trace.rounds = dict(net.rounds)
    return trace


# ---------------------------------------------------------------- metrics

def rel_est_error(xs, x_star, x0=None) -> np.ndarray:
    """``||x(t) - x*|| / ||x(0) - x*||`` per iterate."""
    xs = [np.asarray(x, dtype=np.float64) for x in getattr(xs, "xs", xs)]
    x_star = np.asarray(x_star, dtype=np.float64)
    x0 = xs[0] if x0 is None else np.asarray(x0, dtype=np.float64)
    z0 = float(np.linalg.norm(x0 - x_star))
    if z0 == 0:
        raise ConfigError("x(0) equals the minimizer")
    return np.array([np.linalg.norm(x - x_star) / z0 for x in xs])


def rel_est_cost(costs, f_star: float) -> np.ndarray:
    """``(f(x(t)) - f*) / f*`` per value; ``f*`` must be positive."""
    if not f_star > 0:
        raise ConfigError("relative cost needs f* > 0")
    c = np.asarray(getattr(costs, "cost", costs), dtype=np.float64)
    return (c - f_star) / f_star


def iterations_to_tol(series, eps_tol: float, window: int = 10) -> int | None:
    """Smallest ``t`` with ``series[t : t + window] <= eps_tol`` throughout."""
    if window < 1:
        raise ConfigError("window must be at least 1")
    s = np.asarray(series, dtype=np.float64)
    ok = s <= eps_tol
    if window == 1:
        hit = np.flatnonzero(ok)
        return int(hit[0]) if hit.size else None
    run = 0
    for i, good in enumerate(ok):
        run = run + 1 if good else 0
        if run == window:
            return i - window + 1
    return None


def final_sse(series, delta_thresh: float = 1e-4, window: int = 50, costs=None, diverged: bool = False):
    """
    Value of ``series`` at the first index ``t`` from which ``window``
    consecutive changes ``|c(t+k+1) - c(t+k)|`` are all below
    ``delta_thresh``, where ``c`` is ``costs`` (default: the series itself).

    Returns ``(value, settled)``. Diverged runs give ``(inf, True)``; a run
    that never settles gives its last value with ``settled=False``.
    """
    s = np.asarray(series, dtype=np.float64)
    if diverged or not np.all(np.isfinite(s)):
        return math.inf, True
    c = s if costs is None else np.asarray(costs, dtype=np.float64)
    if c.size <= 1:
        return (float(s[0]) if s.size else math.nan), False
    small = np.abs(np.diff(c)) < delta_thresh
    run = 0
    for i, good in enumerate(small):
        run = run + 1 if good else 0
        if run == window:
            return float(s[i - window + 1]), True
    return float(s[-1]), False


def test_error(x_hat, design) -> float:
    """Fraction of points with ``sign(a^T x) != b``; a zero margin is an error."""
    A, b = (design.A, design.b) if isinstance(design, DesignMatrix) else design
    return float(np.mean(np.sign(A @ np.asarray(x_hat, dtype=np.float64)) != b))


# ---------------------------------------------------------------- summary

@dataclass
class SummaryRow:
    dataset: str
    optimizer: str
    eps_tol: float
    iterations_to_tol: int | None
    sse: float
    sse_settled: bool
    test_error: float | None
    status: str

    def display_iters(self, max_iter: int) -> str:
        return f">{max_iter}" if self.iterations_to_tol is None else str(self.iterations_to_tol)


def summarize(trace: RunTrace, cfg: ExperimentConfig, problem: Problem | None = None) -> SummaryRow:
    series = trace.series()
    sse, settled = final_sse(series, cfg.sse_delta, cfg.sse_window, costs=trace.cost, diverged=trace.diverged)
    te = None
    if problem is not None and problem.test_design is not None and trace.x_final is not None:
        te = test_error(trace.x_final, problem.test_design)
    return SummaryRow(
        cfg.dataset, cfg.optimizer, cfg.eps_tol, iterations_to_tol(series, cfg.eps_tol, cfg.window), sse, settled, te, trace.status
    )


def sort_rows(rows: Sequence[SummaryRow]) -> list[SummaryRow]:
    order = {n: i for i, n in enumerate(TABLE_ORDER)}
    return sorted(rows, key=lambda r: (r.dataset, order.get(r.optimizer, 99)))


# ---------------------------------------------------------------- emission

def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_trace_csv(trace: RunTrace, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for row in trace.rows():
            w.writerow([_fmt(v) for v in row])
    return path


def read_trace_csv(path) -> dict:
    """Parse a v1 trace CSV into column arrays."""
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if tuple(header) != CSV_COLUMNS:
            raise ConfigError(f"unexpected CSV header {header}")
        cols = {k: [] for k in header}
        for row in r:
            for k, v in zip(header, row):
                cols[k].append(v)
    out = {}
    for k, vals in cols.items():
        if k in ("t", "noise_flag", "aux_rounds"):
            out[k] = np.array([int(v) for v in vals], dtype=np.int64)
        else:
            out[k] = np.array([float(v) for v in vals], dtype=np.float64)
    return out


def write_summary_csv(rows: Sequence[SummaryRow], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for row in sort_rows(rows):
            w.writerow(["" if getattr(row, k) is None else _fmt(getattr(row, k)) for k in SUMMARY_COLUMNS])
    return path


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    return v


def write_run_json(trace: RunTrace, row: SummaryRow, path) -> Path:
    """Sidecar with the resolved config, summary fields, rounds and events."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "csv_version": CSV_VERSION,
        "config": trace.config,
        "summary": {k: _jsonable(v) for k, v in dataclasses.asdict(row).items()},
        "status": trace.status,
        "rounds": trace.rounds,
        "events": trace.events,
        "f_star": _jsonable(trace.f_star),
        "x_final": None if trace.x_final is None else trace.x_final.tolist(),
    }
    path.write_text(json.dumps(doc, indent=2, default=_jsonable))
    return path


def write_summary_json(rows: Sequence[SummaryRow], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = [{k: _jsonable(v) for k, v in dataclasses.asdict(r).items()} for r in sort_rows(rows)]
    path.write_text(json.dumps(doc, indent=2))
    return path


def run_and_emit(cfg: ExperimentConfig, out_dir, problem: Problem | None = None, stem: str | None = None):
    problem = problem if problem is not None else build_problem(cfg)
    trace = run_experiment(cfg, problem)
    row = summarize(trace, cfg, problem)
    stem = stem or f"{cfg.dataset}_{cfg.mode}_{cfg.optimizer}_s{cfg.seed}"
    out_dir = Path(out_dir)
    write_trace_csv(trace, out_dir / f"{stem}.csv")
    write_run_json(trace, row, out_dir / f"{stem}.json")
    return trace, row


def sweep(base: ExperimentConfig, optimizers: Sequence[str] = TABLE_ORDER, repeats: int = 1, out_dir=None):
    """
    Run each optimizer on the base configuration with its preset.

    Replicate ``r`` uses seed ``base.seed + r`` for every optimizer, so the
    optimizers in one replicate share the initial point and the data.
    """
    rows = []
    for r in range(repeats):
        seed = base.seed + r
        problem = None
        for name in optimizers:
            cfg = base.replace(optimizer=name, seed=seed)
            if problem is None:
                problem = build_problem(cfg)
            if out_dir is None:
                trace = run_experiment(cfg, problem)
                rows.append(summarize(trace, cfg, problem))
            else:
                rows.append(run_and_emit(cfg, out_dir, problem)[1])
    rows = sort_rows(rows)
    if out_dir is not None:
        write_summary_csv(rows, Path(out_dir) / "summary.csv")
        write_summary_json(rows, Path(out_dir) / "summary.json")
    return rows
