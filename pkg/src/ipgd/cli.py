"""
Command-line entry point.

    ipgd run    --config cfg.json [--seed N] [--out DIR] [--max-iter N] [--optimizer NAME]
    ipgd sweep  --config cfg.json [--optimizers IPG,GD,...] [--repeats R] --out DIR
    ipgd verify [--suite all|contraction|superlinear|newton|precond]
    ipgd ingest --dataset mnist|cifar10 [--data-dir DIR] [--seed N]
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import datapipe, harness, theory
from .coordinator import TABLE_ORDER, init_condition_check
from .errors import ConfigError, IngestError
from .numkit import SeededRng


def _load_config(args) -> harness.ExperimentConfig:
    if args.config is None:
        raise ConfigError("--config is required")
    raw = json.loads(Path(args.config).read_text())
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.max_iter is not None:
        raw["max_iter"] = args.max_iter
    if getattr(args, "optimizer", None):
        raw["optimizer"] = args.optimizer
        raw.pop("hyper", None)
    return harness.ExperimentConfig.from_dict(raw)


def cmd_run(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out or cfg.out or "runs")
    trace, row = harness.run_and_emit(cfg, out)
    print(
        f"{row.dataset} {row.optimizer}: status={row.status} "
        f"iterations_to_tol={row.display_iters(cfg.max_iter)} sse={row.sse:.3g} "
        f"test_error={'n/a' if row.test_error is None else f'{row.test_error:.4f}'}"
    )
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    names = args.optimizers.split(",") if args.optimizers else list(TABLE_ORDER)
    out = Path(args.out or cfg.out or "runs")
    rows = harness.sweep(cfg, names, args.repeats, out)
    print(f"{'optimizer':<8} {'iters':>8} {'sse':>10} {'status':>10}")
    for r in rows:
        print(f"{r.optimizer:<8} {r.display_iters(cfg.max_iter):>8} {r.sse:>10.3g} {r.status:>10}")
    return 0


def _quad(d, lo, hi, seed):
    eigs = np.linspace(lo, hi, d)
    H, _ = harness.quadratic_from_spec({"eigs": eigs, "rotation_seed": seed})
    return H


def _ipg_run(H, x0, K0, alpha, beta=0.0, T=50, x_star=None):
    from .agent import Agent
    from .coordinator import IPG, Network

    costs = harness.quadratic_split(H, None if x_star is None else H @ x_star, 1)
    net = Network([Agent(0, costs[0], SeededRng(0, 1), 1, beta=beta)])
    opt = IPG(x0, K0, 1.0, beta, alpha)
    xs = [opt.x.copy()]
    for t in range(T):
        opt.step(net, t)
        xs.append(opt.x.copy())
    return xs, opt


def cmd_verify(args) -> int:
    """Run small theory checks and print one line per check."""
    results = {}
    suites = ("precond", "contraction", "superlinear", "newton") if args.suite == "all" else (args.suite,)
    if "precond" in suites:
        H = _quad(16, 0.5, 4.0, 1)
        beta, alpha = 0.1, 0.9 / (4.0 + 0.1)
        rho = theory.compute_rho(H, alpha, beta)
        _, opt = _ipg_run(H, np.ones(16), np.zeros((16, 16)), alpha, beta, T=20)
        Ks = np.linalg.inv(H + beta * np.eye(16))
        bound = rho**20 * np.linalg.norm(Ks, 2)
        results["precond"] = bool(np.linalg.norm(opt.K - Ks, 2) <= bound * (1 + 1e-10))
    if "contraction" in suites:
        H = _quad(4, 1.0, 1.1, 2)
        beta, mu = 0.01, 1.05
        sched, _ = theory.theorem_schedule(H, beta, mu)
        c = theory.quadratic_constants(H, beta, sched, mu=mu)
        Ks = np.linalg.inv(H + beta * np.eye(4))
        K0 = Ks + 0.05 * np.eye(4)
        ok_init = init_condition_check(np.ones(4), K0, np.zeros(4), H, beta, c.gamma, c.l, mu)
        xs, _ = _ipg_run(H, np.ones(4), K0, sched, beta, T=200)
        rep = theory.verify_linear_contraction(xs, mu, np.zeros(4))
        results["contraction"] = bool(ok_init and rep.passed)
    if "superlinear" in suites:
        H = _quad(8, 1.0, 10.0, 3)
        xs, _ = _ipg_run(H, np.ones(8), np.zeros((8, 8)), 2 / 11.0, 0.0, T=200)
        results["superlinear"] = theory.verify_superlinear(xs, np.zeros(8)).passed
    if "newton" in suites:
        H = _quad(8, 0.1, 10.0, 4)
        xs, _ = _ipg_run(H, np.ones(8), np.linalg.inv(H), 1e-3, 0.0, T=1)
        results["newton"] = bool(np.linalg.norm(xs[1]) < 1e-10)
    for k, ok in results.items():
        print(f"{k:<12} {'PASS' if ok else 'FAIL'}")
    return 0 if all(results.values()) else 1


def cmd_ingest(args) -> int:
    root = Path(args.data_dir) if args.data_dir else datapipe.default_data_dir()
    if args.dataset == "mnist":
        design = datapipe.mnist_design(root / "mnist", args.seed, args.n)
    else:
        design = datapipe.cifar_design(root / "cifar10", args.seed, args.n)
    side = datapipe.save_design(design, root / "cache" / f"{args.dataset}_s{args.seed}", seed=args.seed)
    print(f"{args.dataset}: design {design.shape[0]}x{design.shape[1]} sha256={design.fingerprint()[:16]} -> {side}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ipgd", description="Distributed pre-conditioned gradient descent experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--max-iter", type=int, dest="max_iter")

    sp = sub.add_parser("run", help="run one configuration")
    common(sp)
    sp.add_argument("--optimizer", help="override the optimizer (uses its preset)")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="run several optimizers on one configuration")
    common(sp)
    sp.add_argument("--optimizers", help="comma-separated names (default: all six)")
    sp.add_argument("--repeats", type=int, default=1)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("verify", help="small-scale convergence checks")
    sp.add_argument("--suite", default="all", choices=["all", "precond", "contraction", "superlinear", "newton"])
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("ingest", help="build and cache a design matrix")
    sp.add_argument("--dataset", choices=["mnist", "cifar10"], default="mnist")
    sp.add_argument("--data-dir", dest="data_dir")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--n", type=int, default=10_000)
    sp.set_defaults(func=cmd_ingest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, IngestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
