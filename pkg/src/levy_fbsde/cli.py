"""Command line entry point ``fbsde``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .config import CHECKS, ConfigError, load_config

__all__ = ["main", "build_parser"]

SEED_ENV = "FBSDE_SEED"
INEQUALITY_CASES = ("gronwall", "bihari", "fixed-point", "apriori")


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fbsde", description="Monte Carlo laboratory for Lévy-driven path-dependent FBSDEs.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("config", help="YAML or JSON experiment file")
        sp.add_argument("--out", help="output directory (default: output.dir of the config)")
        sp.add_argument("--workers", type=int, help="noise-generation threads (default: logical cores)")
        sp.add_argument("--seed", type=int, help=f"seed override (also via ${SEED_ENV})")
        sp.add_argument("--M", help="truncation level or 'auto'")
        sp.add_argument("--n-paths", type=int)
        sp.add_argument("--no-figures", action="store_true")

    run = sub.add_parser("run", help="solve and run the configured checks")
    common(run)
    chk = sub.add_parser("check", help="run a subset of checks")
    common(chk)
    chk.add_argument("--only", required=True, help=f"comma list out of {','.join(CHECKS)}")
    mal = sub.add_parser("malliavin", help="jump-direction derivative fields and Gaussian quotients")
    common(mal)
    mal.add_argument("--shift-time", type=float, required=True)
    mal.add_argument("--atom", type=int, default=0)
    mal.add_argument("--phi-grid", type=_floats, default=[1.0, 0.5, 0.25, 0.125])

    ineq = sub.add_parser("inequality", help="evaluate one inequality case")
    ineq.add_argument("case", choices=INEQUALITY_CASES)
    ineq.add_argument("--p", type=float, default=0.5)
    ineq.add_argument("--H", type=float, default=4.0, help="constant H_T (gronwall/bihari)")
    ineq.add_argument("--X", type=float, default=None, help="constant X level (default: H)")
    ineq.add_argument("--A", type=float, default=0.0, help="A_T")
    ineq.add_argument("--r", type=float, default=2.0, help="base point of G (bihari)")
    ineq.add_argument("--C", type=float, default=1.0)
    ineq.add_argument("--exponent", type=float, default=0.5)
    ineq.add_argument("--a0", type=float, default=1.0)
    ineq.add_argument("--dxi2", type=float, default=0.0)
    ineq.add_argument("--df2", type=float, default=0.0)
    ineq.add_argument("--expX", type=float, default=1.0)
    return p


def _load(args):
    env_seed = os.environ.get(SEED_ENV)
    seed = args.seed if args.seed is not None else (int(env_seed) if env_seed else None)
    cfg = load_config(args.config, seed_override=seed)
    changes = {}
    if args.workers is not None:
        changes["workers"] = args.workers
    if args.n_paths is not None:
        changes["n_paths"] = args.n_paths
    if args.M is not None:
        solver = dict(cfg.normalized["solver"])
        solver["M"] = args.M if args.M == "auto" else float(args.M)
        changes["solver"] = solver
    return cfg.with_overrides(**changes) if changes else cfg


def _inequality(args) -> dict:
    import numpy as np

    from .inequalities import (
        FixedPointProblem,
        GronwallInstance,
        bihari_check,
        fixed_point,
        gronwall_check,
        minimize_over_n,
    )

    level = args.H if args.X is None else args.X
    if args.case == "gronwall":
        inst = GronwallInstance(np.full((1, 2), level), np.full((1, 2), args.H), args.A, args.p)
        return gronwall_check(inst).to_dict()
    if args.case == "bihari":
        inst = GronwallInstance(np.full((1, 2), level), np.full((1, 2), args.H), args.A, args.p, "xlogx", 1.0, args.r)
        return bihari_check(inst).to_dict()
    if args.case == "fixed-point":
        a, k = fixed_point(FixedPointProblem(args.C, args.exponent, args.a0))
        residual = a - FixedPointProblem(args.C, args.exponent).step(a)
        return {"a_inf": a, "iterations": k, "residual": residual, "passed": True}
    n, value = minimize_over_n(args.C, args.dxi2, args.df2, args.expX)
    return {"n": n, "value": value, "passed": True}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "inequality":
        res = _inequality(args)
        print(json.dumps(res, indent=2, sort_keys=True))
        return 0 if res["passed"] else 1
    try:
        cfg = _load(args)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return 2
    from .runner import run, run_malliavin

    if args.command == "malliavin":
        report = run_malliavin(cfg, args.shift_time, args.atom, args.phi_grid, args.out)
    else:
        only = None
        if args.command == "check":
            only = [c.strip() for c in args.only.split(",") if c.strip()]
            bad = [c for c in only if c not in CHECKS]
            if bad:
                print(f"unknown checks {bad}; choose from {list(CHECKS)}", file=sys.stderr)
                return 2
        report = run(cfg, args.out, only=only, figures=False if args.no_figures else None)
    for name, res in report.checks.items():
        print(f"{name}: {'PASS' if res.get('passed') else 'FAIL'}")
    for err in report.errors:
        print(f"error in {err['stage']}: {err['error']}", file=sys.stderr)
    print(f"report: {report.artifacts.get('report')}  config hash: {report.config_hash[:12]}")
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
