"""Experiment configuration: a YAML (or JSON) key tree validated in one pass.

Top-level keys::

    seed, n_paths, workers
    grid:    {T, N}
    noise:   {atoms: [{mark, intensity}, ...]}
    forward: {x0, sigma, drift: {constant, terms: [{functional, coef, transform}]},
              rho, kappa_rho, K_b, L_b, K_sigma}
    driver:  {terminal: <functional>, params: {c, ell, r, alpha, beta, gamma,
              L_fy, m1, m2, k_f}, constant, x_functional, x_coef, y_coef,
              z_linear, z_power, u_linear, u_power, h_linear, h_power}
    solver:  {method, M, quantile, tol, max_iter, stability_rtol,
              basis: {features, ridge}}
    checks:  [bounds, gronwall, malliavin, exp_moment, truncation_stability]
    check_options: per-check settings, see ``DEFAULT_CHECK_OPTIONS``
    output:  {dir, max_paths, figures}

A functional is ``{kind, params, lipschitz: {c, alpha, r}}``.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

import yaml

from .backward import SolverSpec, RegressionBasis
from .forward import Drift, ForwardModel, Volatility
from .noise import JumpMeasure, TimeGrid, make_grid
from .paths import PathFunctional
from .truncation import DriverParams, DriverSpec

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "CHECKS",
    "DEFAULT_CHECK_OPTIONS",
    "load_config",
    "parse_config",
    "config_hash",
]

CHECKS = ("bounds", "gronwall", "malliavin", "exp_moment", "truncation_stability")

DEFAULT_CHECK_OPTIONS: dict[str, dict] = {
    "bounds": {"max_violation": 0.01},
    "gronwall": {"p": [0.25, 0.5, 0.75], "bihari_c": 1.0},
    "malliavin": {"shift_times": [0.0, 0.25, 0.5, 0.75], "atoms": None, "t_values": None, "phi_grid": [1.0, 0.5, 0.25, 0.125]},
    "exp_moment": {"c": 1.0, "tolerance": 0.05},
    "truncation_stability": {"rtol": 0.01},
}

_TOP_KEYS = {"seed", "n_paths", "workers", "grid", "noise", "forward", "driver", "solver", "checks", "check_options", "output"}
_DRIVER_SCALARS = ("constant", "x_coef", "y_coef", "z_linear", "z_power", "u_linear", "u_power", "h_linear", "h_power")
_NON_SEMANTIC = ("output", "workers")


class ConfigError(ValueError):
    """Invalid configuration; ``problems`` lists every violation found."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  - " + "\n  - ".join(self.problems))


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    seed: int
    n_paths: int
    grid: TimeGrid
    model: ForwardModel
    driver: DriverSpec
    solver: SolverSpec
    checks: tuple[str, ...]
    check_options: dict
    output: dict
    workers: int | None
    normalized: dict = field(repr=False)

    @property
    def hash(self) -> str:
        return config_hash(self.normalized)

    def with_overrides(self, **changes) -> "ExperimentConfig":
        """Rebuild from the normalized tree with top-level keys replaced."""
        tree = copy.deepcopy(self.normalized)
        tree.update(changes)
        return parse_config(tree)


def config_hash(tree: Mapping) -> str:
    """SHA-256 of the canonical JSON of the semantic part of a normalized tree."""
    sem = {k: v for k, v in tree.items() if k not in _NON_SEMANTIC}
    blob = json.dumps(sem, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(blob.encode()).hexdigest()


def _functional(d, where, problems):
    if d is None:
        return None
    try:
        return PathFunctional.from_dict(d)
    except (KeyError, TypeError, ValueError) as exc:
        problems.append(f"{where}: {exc}")
        return None


def _capture(problems, where, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except (KeyError, TypeError, ValueError) as exc:
        problems.append(f"{where}: {exc}")
        return None


def parse_config(tree: Mapping, seed_override: int | None = None) -> ExperimentConfig:
    """Validate a raw key tree.

    Raises:
        ConfigError: listing every problem, including each violated
            structural inequality by name.
    """
    if not isinstance(tree, Mapping):
        raise ConfigError(["top level must be a mapping"])
    problems: list[str] = []
    unknown = set(tree) - _TOP_KEYS
    if unknown:
        problems.append(f"unknown top-level keys {sorted(unknown)}")

    seed = int(tree.get("seed", 0)) if seed_override is None else int(seed_override)
    n_paths = tree.get("n_paths", 10_000)
    if not isinstance(n_paths, int) or n_paths < 2:
        problems.append("n_paths must be an integer >= 2")
        n_paths = 2
    workers = tree.get("workers")

    g = dict(tree.get("grid") or {})
    T, N = float(g.get("T", 1.0)), g.get("N", 64)
    grid = None
    if T <= 0:
        problems.append("grid.T must be positive")
    elif not isinstance(N, int) or N < 1:
        problems.append("grid.N must be a positive integer")
    else:
        grid = make_grid(T, N)

    measure = _capture(problems, "noise.atoms", JumpMeasure.from_records, (tree.get("noise") or {}).get("atoms", []))

    fw = dict(tree.get("forward") or {})
    model = None
    if measure is not None:
        drift = _capture(problems, "forward.drift", Drift.from_dict, fw.get("drift"))
        sigma = _capture(problems, "forward.sigma", Volatility.from_spec, fw.get("sigma", 0.0))
        if drift is not None and sigma is not None:
            model = _capture(
                problems,
                "forward",
                ForwardModel,
                x0=float(fw.get("x0", 0.0)),
                measure=measure,
                drift=drift,
                sigma=sigma,
                rho=fw.get("rho"),
                kappa_rho=fw.get("kappa_rho"),
                K_b=fw.get("K_b"),
                L_b=fw.get("L_b"),
                K_sigma=fw.get("K_sigma"),
            )
    if model is not None and grid is not None:
        problems.extend(f"forward: {p}" for p in model.validate(grid.T, n_pairs=500, seed=seed))

    dv = dict(tree.get("driver") or {})
    driver = None
    params = _capture(problems, "driver.params", DriverParams.from_dict, dv.get("params"))
    terminal = _functional(dv.get("terminal", {"kind": "terminal_point"}), "driver.terminal", problems)
    xf = _functional(dv.get("x_functional"), "driver.x_functional", problems)
    bad = set(dv) - {"terminal", "params", "x_functional", *_DRIVER_SCALARS}
    if bad:
        problems.append(f"driver: unknown keys {sorted(bad)}")
    if params is not None and terminal is not None:
        scalars = {k: float(dv[k]) for k in _DRIVER_SCALARS if k in dv}
        driver = DriverSpec(terminal, params, x_functional=xf, **scalars)
        problems.extend(f"driver: {p}" for p in driver.validate(T if T > 0 else 1.0, seed=seed))

    sv = dict(tree.get("solver") or {})
    basis = _capture(problems, "solver.basis", RegressionBasis, **dict(sv.get("basis") or {}))
    solver = None
    if basis is not None:
        opts = {k: sv[k] for k in ("method", "M", "quantile", "tol", "max_iter", "stability_rtol") if k in sv}
        solver = _capture(problems, "solver", SolverSpec, basis=basis, **opts)
        if solver is not None and not 0 < solver.quantile < 1:
            problems.append("solver.quantile must lie in (0, 1)")

    checks = tuple(tree.get("checks") or ())
    for c in checks:
        if c not in CHECKS:
            problems.append(f"unknown check {c!r}; choose from {list(CHECKS)}")
    opts = copy.deepcopy(DEFAULT_CHECK_OPTIONS)
    for k, v in dict(tree.get("check_options") or {}).items():
        if k not in opts:
            problems.append(f"check_options: unknown check {k!r}")
            continue
        extra = set(v) - set(opts[k])
        if extra:
            problems.append(f"check_options.{k}: unknown keys {sorted(extra)}")
        opts[k].update(v)

    out = {"dir": "fbsde_out", "max_paths": 20, "figures": True}
    out.update(dict(tree.get("output") or {}))

    if problems:
        raise ConfigError(problems)
    if "truncation_stability" in checks:
        solver = replace(solver, stability_check=True, stability_rtol=float(opts["truncation_stability"]["rtol"]))

    normalized = {
        "seed": seed,
        "n_paths": n_paths,
        "workers": workers,
        "grid": {"T": grid.T, "N": grid.N},
        "noise": {"atoms": measure.to_records()},
        "forward": {
            "x0": model.x0,
            "sigma": model.sigma.to_spec(),
            "drift": model.drift.to_dict(),
            "rho": model.rho.tolist(),
            "kappa_rho": model.kappa_rho.tolist(),
            "K_b": model.bound_b(),
            "L_b": model.lipschitz_b(grid.T),
            "K_sigma": model.bound_sigma(),
        },
        "driver": {
            "terminal": terminal.to_dict(grid.T),
            "x_functional": xf.to_dict(grid.T) if xf is not None else None,
            "params": params.to_dict(),
            **{k: getattr(driver, k) for k in _DRIVER_SCALARS},
        },
        "solver": {
            "method": solver.method,
            "M": solver.M if solver.M == "auto" else float(solver.M),
            "quantile": solver.quantile,
            "tol": solver.tol,
            "max_iter": solver.max_iter,
            "stability_rtol": solver.stability_rtol,
            "basis": {"features": list(basis.features), "ridge": basis.ridge},
        },
        "checks": list(checks),
        "check_options": {k: opts[k] for k in checks},
        "output": out,
    }
    return ExperimentConfig(seed, n_paths, grid, model, driver, solver, checks, opts, out, workers, normalized)


def load_config(path: str | os.PathLike, seed_override: int | None = None) -> ExperimentConfig:
    """Read and validate a YAML or JSON configuration file.

    Raises:
        ConfigError: the file does not parse or violates assumptions.
    """
    text = Path(path).read_text()
    try:
        tree: Any = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError([f"parse error: {exc}"]) from exc
    return parse_config(tree or {}, seed_override)
