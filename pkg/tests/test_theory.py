import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ipgd.agent import Agent
from ipgd.coordinator import IPG, GD, AlphaSchedule, Network, init_condition_check, theorem_alpha_bound
from ipgd.costs import LogisticCost, QuadraticCost
from ipgd.errors import ConfigError
from ipgd.numkit import SeededRng
from ipgd.theory import (
    TheoryConstants,
    compute_rho,
    estimate_gamma,
    quadratic_constants,
    theorem_schedule,
    verify_linear_contraction,
    verify_superlinear,
)

from conftest import random_spd


def single_net(H, beta=0.0, b=None):
    w, V = np.linalg.eigh(H)
    A = (V * np.sqrt(np.clip(w, 0, None))).T
    return Network([Agent(0, QuadraticCost(A, b), SeededRng(0, 1), 1, beta=beta)])


def iterate(opt, net, T):
    xs = [opt.x.copy()]
    for t in range(T):
        opt.step(net, t)
        xs.append(opt.x.copy())
    return xs


def test_rho_examples():
    assert compute_rho(np.eye(3), 0.0, 0.0) == 1.0
    assert compute_rho(np.eye(3), 1.0, 0.0) == 0.0
    assert compute_rho(np.diag([1.0, 0.5]), 4 / 3, 0.0) == pytest.approx(1 / 3, rel=1e-15)


def test_rho_refuses_large():
    with pytest.raises(ConfigError):
        compute_rho(np.eye(65), 0.1, 0.0)


@settings(max_examples=40, deadline=None)
@given(
    eigs=st.lists(st.floats(0.0, 10.0), min_size=1, max_size=12),
    alpha=st.floats(0.0, 1.0),
    beta=st.floats(0.0, 2.0),
)
def test_rho_extremal_formula_on_diagonals(eigs, alpha, beta):
    lam = np.array(eigs)
    expected = np.max(np.abs(1 - alpha * (lam + beta)))
    assert compute_rho(np.diag(lam), alpha, beta) == pytest.approx(expected, rel=1e-12, abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), frac=st.floats(0.01, 0.99), beta=st.floats(0.01, 1.0))
def test_rho_below_one_inside_step_condition(seed, frac, beta):
    r = np.random.default_rng(seed)
    d = int(r.integers(1, 10))
    G = r.standard_normal((d, max(1, d - 2)))
    H = G @ G.T  # convex, possibly singular
    lam_max = np.linalg.eigvalsh(H)[-1]
    alpha = frac / (lam_max + beta)
    assert compute_rho(H, alpha, beta) < 1


def test_quadratic_constants_examples():
    c = quadratic_constants(np.eye(3), 0.0, 0.5)
    assert (c.l, c.gamma, c.eta, c.Lambda) == (1.0, 0.0, 1.0, 1.0)
    d, beta = 50, 0.01
    c = quadratic_constants(np.diag(1.0 / np.arange(1, d + 1)), beta, 0.5)
    assert c.l == pytest.approx(1.0) and c.eta == pytest.approx(1 / (1 / d + beta))
    assert quadratic_constants(np.diag([1.0, 0.5]), 0.5, 0.5).eta == pytest.approx(1.0)


def test_quadratic_constants_singular():
    with pytest.raises(ConfigError):
        quadratic_constants(np.diag([1.0, 0.0]), 0.0, 0.5)


def test_constants_validation():
    with pytest.raises(ConfigError):
        TheoryConstants(1.0, 0.0, 1.0, 0.5, 2.5, 1.0)
    with pytest.raises(ConfigError):
        TheoryConstants(1.0, 0.0, 1.0, 1.0, 1.1, 1.0)


def test_theorem_loop_closes():
    """Constants -> initial condition -> theorem-mode schedule -> contraction at every step."""
    r = np.random.default_rng(7)
    Q, _ = np.linalg.qr(r.standard_normal((4, 4)))
    H = (Q * np.array([1.0, 1.03, 1.07, 1.1])) @ Q.T
    beta, mu = 0.01, 1.05
    sched, rho = theorem_schedule(H, beta, mu)
    c = quadratic_constants(H, beta, sched, mu=mu)
    assert c.rho == rho and mu * rho < 1
    assert all(compute_rho(H, sched(t), beta) <= rho for t in range(400))
    assert all(sched(t) < 1 / (c.Lambda + beta) for t in range(400))
    Ks = np.linalg.inv(H + beta * np.eye(4))
    K0 = Ks + 0.05 * np.eye(4)
    x0 = np.ones(4)
    assert init_condition_check(x0, K0, np.zeros(4), H, beta, c.gamma, c.l, c.mu)
    xs = iterate(IPG(x0, K0, 1.0, beta, sched), single_net(H, beta), 200)
    rep = verify_linear_contraction(xs, c.mu, np.zeros(4), c.eta, c.gamma)
    assert rep.passed and rep.first_failure is None
    assert len(rep.contraction_ok) == 200
    json.dumps(rep.to_dict())


def test_theorem_schedule_refuses_ill_conditioned():
    with pytest.raises(ConfigError):
        theorem_schedule(np.diag([1.0, 3.0]), 0.0, 1.05)


def test_theorem_schedule_matches_brute_force_scan():
    H = np.diag([1.0, 1.1])
    _, rho = theorem_schedule(H, 0.0, 1.05, grid=2000)
    # brute force: the t=0..399 envelope evaluated with the scalar bound
    def worst(r):
        a = [0.99 * theorem_alpha_bound(t, 1.1, 0.0, 1.1, 1.05, r, exact=True) for t in range(400)]
        return max(max(abs(1 - x * 1.0), abs(1 - x * 1.1)) for x in a)
    assert worst(rho) <= rho
    assert worst(rho - 1 / (1.05 * 2000)) > rho - 1 / (1.05 * 2000)


def test_contraction_trivial_and_negative():
    xs = [np.zeros(3)] * 5
    assert verify_linear_contraction(xs, 1.1, np.zeros(3)).passed
    xs = [np.ones(2) * v for v in (1.0, 0.5, 0.6, 0.1)]
    rep = verify_linear_contraction(xs, 1.1, np.zeros(2))
    assert not rep.passed and rep.first_failure == 1
    with pytest.raises(ConfigError):
        verify_linear_contraction(xs, 1.1)


def test_contraction_radius_condition():
    xs = [np.ones(1) * v for v in (1.0, 0.5, 0.25)]
    assert verify_linear_contraction(xs, 1.5, np.zeros(1), eta=1.0, gamma=0.1).passed
    rep = verify_linear_contraction(xs, 1.5, np.zeros(1), eta=1.0, gamma=1.0)
    assert not rep.passed and rep.radius_ok == [False, True, True]


def test_superlinear_newton_exact(rng):
    H = random_spd(rng, 8)
    xs = iterate(IPG(np.ones(8), np.linalg.inv(H), 1.0, 0.0, 0.01), single_net(H), 3)
    rep = verify_superlinear(xs, np.zeros(8))
    assert rep.passed and not rep.inconclusive


def kappa10(seed):
    r = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(r.standard_normal((8, 8)))
    return (Q * np.linspace(1.0, 10.0, 8)) @ Q.T


@pytest.mark.parametrize("seed", range(5))
def test_superlinear_ipg_passes_gd_fails(seed):
    H = kappa10(seed)
    x0 = np.random.default_rng(100 + seed).standard_normal(8)
    alpha = 2 / 11.0
    ipg = iterate(IPG(x0, None, 1.0, 0.0, alpha), single_net(H), 200)
    gd = iterate(GD(x0, alpha), single_net(H), 200)
    assert verify_superlinear(ipg, np.zeros(8)).passed
    rep = verify_superlinear(gd, np.zeros(8))
    assert not rep.passed and not rep.inconclusive


def test_superlinear_inconclusive_when_floor_hit_early():
    xs = [np.array([10.0**-k]) for k in range(0, 20, 2)]
    rep = verify_superlinear(xs, np.zeros(1))
    assert rep.inconclusive and not rep.passed


def test_gamma_estimate():
    r = np.random.default_rng(0)
    q = QuadraticCost(r.standard_normal((5, 3)))
    assert estimate_gamma(q, np.zeros(3), 1.0, 20) == 0.0
    A = r.standard_normal((20, 3))
    cost = LogisticCost(A, r.choice([-1.0, 1.0], 20))
    g = estimate_gamma(cost, np.zeros(3), 2.0, 100)
    # |sigma''| <= 1/(6 sqrt 3) gives an analytic upper bound
    bound = np.sum(np.linalg.norm(A, axis=1) ** 3) / (6 * np.sqrt(3))
    assert 0 < g <= bound
