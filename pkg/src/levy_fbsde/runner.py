"""Experiment orchestration and artifact emission."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
import traceback
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .backward import solve_fbsde
from .config import ExperimentConfig
from .forward import euler_solve, exp_moment_estimate
from .inequalities import bihari_check, bihari_forward_instance, gronwall_check, gronwall_forward_instance
from .malliavin import (
    chain_rule_check,
    derivative_bound_check,
    forward_derivative_ratio,
    forward_quotient_check,
    jump_derivative_solution,
)
from .noise import make_grid, sample_noise

__all__ = ["RunReport", "run", "run_malliavin", "write_csv", "solution_rows", "SCHEMA_VERSION", "CSV_HEADER"]

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CSV_HEADER = ("path_id", "t", "field", "atom", "value")


@dataclass
class RunReport:
    config_hash: str
    seed: int
    n_paths: int
    checks: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    bounds: dict | None = None
    timing: dict = field(default_factory=dict)
    errors: list = field(default_factory=list)
    artifacts: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not self.errors and all(c.get("passed", False) for c in self.checks.values())

    @property
    def exit_code(self) -> int:
        return 0 if self.passed else 1

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "n_paths": self.n_paths,
            "passed": self.passed,
            "exit_code": self.exit_code,
            "checks": self.checks,
            "solver": self.solver,
            "bounds": self.bounds,
            "timing": self.timing,
            "errors": self.errors,
            "artifacts": self.artifacts,
        }


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def solution_rows(paths, sol, max_paths: int, extra: dict | None = None):
    """CSV rows ``(path_id, t, field, atom, value)`` for the first ``max_paths`` paths.

    ``X`` and ``Y`` are written at every base instant; ``Z``, ``H`` and ``U``
    at the left endpoints ``t_0 .. t_{N-1}``.  ``extra`` maps field names to
    ``(n, N + 1)``, ``(n, N)`` or ``(n, N, J)`` arrays written the same way.
    """
    times = paths.grid.times
    k = min(max_paths, paths.n_paths)
    fields = {"X": paths.at_base(), "Y": sol.Y, "Z": sol.Z, "H": sol.H, "U": sol.U}
    fields.update(extra or {})
    for p in range(k):
        for name, arr in fields.items():
            a = arr[p]
            if a.ndim == 1:
                for i in range(a.shape[0]):
                    yield (p, _fmt(times[i]), name, "", _fmt(a[i]))
            else:
                for i in range(a.shape[0]):
                    for j in range(a.shape[1]):
                        yield (p, _fmt(times[i]), name, j, _fmt(a[i, j]))


def write_csv(path: Path, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def _safe(report: RunReport, name: str, fn):
    t0 = time.perf_counter()
    try:
        report.checks[name] = fn()
    except Exception as exc:  # stage failures are reported, not raised
        log.exception("check %s failed", name)
        report.checks[name] = {"passed": False, "error": f"{type(exc).__name__}: {exc}"}
        report.errors.append({"stage": name, "error": str(exc), "traceback": traceback.format_exc()})
    report.timing[name] = time.perf_counter() - t0


def _gronwall(cfg: ExperimentConfig, paths, mart) -> dict:
    opts = cfg.check_options["gronwall"]
    rows = []
    for p in opts["p"]:
        g = gronwall_check(gronwall_forward_instance(cfg.model, paths, mart, p)).to_dict()
        b = bihari_check(bihari_forward_instance(cfg.model, paths, float(opts["bihari_c"]), p)).to_dict()
        rows.append({"p": p, "gronwall": g, "bihari": b})
    ok = all(r["gronwall"]["passed"] and r["bihari"]["passed"] for r in rows)
    return {"passed": ok, "rows": rows}


def _malliavin(cfg: ExperimentConfig, noise, paths) -> dict:
    opts = cfg.check_options["malliavin"]
    grid = cfg.grid
    default_t = [grid.times[round(k * grid.N / 4)] for k in range(5)]
    shift_times = [grid.times[grid.index_of(s)] for s in opts["shift_times"]]
    t_values = [grid.times[grid.index_of(t)] for t in (opts["t_values"] or default_t)]
    out = {}
    ok = True
    if cfg.model.measure.n_atoms:
        ratio = forward_derivative_ratio(cfg.model, noise, shift_times, t_values, base=paths)
        ratio["tolerance"] = 1 + 5 * grid.mesh
        ratio["passed"] = bool(ratio["max_ratio"] <= ratio["tolerance"])
        out["derivative_ratio"] = ratio
        ok &= ratio["passed"]
    if noise.coupled_increments is not None and cfg.model.bound_sigma() > 0:
        q = forward_quotient_check(cfg.model, noise, phis=opts["phi_grid"], base=paths)
        out["forward_quotient"] = q
        ok &= q["passed"]
        if cfg.driver.x_coef and cfg.driver.x_functional is not None:
            c = chain_rule_check(cfg.model, cfg.driver, noise, phis=opts["phi_grid"])
            out["chain_rule"] = c
            ok &= c["passed"]
    out["passed"] = bool(ok)
    return out


def _exp_moment(cfg: ExperimentConfig, paths) -> dict:
    opts = cfg.check_options["exp_moment"]
    fine_grid = make_grid(cfg.grid.T, 2 * cfg.grid.N)
    fine_noise = sample_noise(fine_grid, cfg.model.measure, cfg.n_paths, cfg.seed + 1, workers=cfg.workers)
    fine = euler_solve(cfg.model, fine_noise)
    coarse = euler_solve(cfg.model, fine_noise.coarsen(2))
    rep = exp_moment_estimate(coarse, float(opts["c"]), refined=fine)
    d = rep.to_dict()
    d["relative_change"] = abs(rep.refinement_ratio - 1.0)
    d["tolerance"] = float(opts["tolerance"])
    d["passed"] = bool(not rep.overflow and d["relative_change"] <= d["tolerance"])
    return d


def run(cfg: ExperimentConfig, out_dir: str | Path | None = None, only: list[str] | None = None, figures: bool | None = None) -> RunReport:
    """Execute the pipeline and requested checks; write CSV, JSON, figures and a plot script.

    ``only`` restricts the configured checks.  The report's ``exit_code`` is 0
    iff every requested check passed and no stage failed.
    """
    checks = list(cfg.checks if only is None else only)
    out = Path(out_dir or cfg.output["dir"])
    out.mkdir(parents=True, exist_ok=True)
    report = RunReport(cfg.hash, cfg.seed, cfg.n_paths)
    t0 = time.perf_counter()
    noise = sample_noise(cfg.grid, cfg.model.measure, cfg.n_paths, cfg.seed, coupled="malliavin" in checks, workers=cfg.workers)
    paths, mart = euler_solve(cfg.model, noise, with_martingale=True)
    report.timing["forward"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    solver = replace(cfg.solver, stability_check="truncation_stability" in checks)
    result = None
    try:
        result = solve_fbsde(cfg.model, cfg.driver, cfg.grid, cfg.n_paths, cfg.seed, solver, noise=noise, paths=paths)
    except Exception as exc:
        log.exception("backward solve failed")
        report.errors.append({"stage": "solve", "error": str(exc), "traceback": traceback.format_exc()})
    report.timing["solve"] = time.perf_counter() - t0

    if result is not None:
        sol = result.solution
        report.solver = sol.diagnostics()
        report.solver["pilot_M"] = result.pilot_M
        if result.cross_check is not None:
            report.solver["picard"] = result.cross_check.diagnostics()
            report.solver["picard_lsmc_Y0_gap"] = abs(result.cross_check.Y0 - sol.Y0)
        report.bounds = result.report.to_dict()
        if "bounds" in checks:
            tol = float(cfg.check_options["bounds"]["max_violation"])
            report.checks["bounds"] = {
                "passed": bool(result.report.max_violation <= tol),
                "max_violation": result.report.max_violation,
                "tolerance": tol,
            }
        if "truncation_stability" in checks:
            report.checks["truncation_stability"] = dict(result.report.truncation_stability)
    if "gronwall" in checks:
        _safe(report, "gronwall", lambda: _gronwall(cfg, paths, mart))
    if "malliavin" in checks:
        _safe(report, "malliavin", lambda: _malliavin(cfg, noise, paths))
    if "exp_moment" in checks:
        _safe(report, "exp_moment", lambda: _exp_moment(cfg, paths))

    if result is not None:
        csv_path = out / "solution.csv"
        write_csv(csv_path, solution_rows(paths, result.solution, int(cfg.output["max_paths"])))
        report.artifacts["csv"] = csv_path.name
    draw = cfg.output.get("figures", True) if figures is None else figures
    if draw and result is not None:
        from .report import render_figures, write_plot_script

        t0 = time.perf_counter()
        report.artifacts["figures"] = render_figures(out, paths, result, report.checks)
        report.artifacts["plot_script"] = write_plot_script(out).name
        report.timing["figures"] = time.perf_counter() - t0
    report.artifacts["report"] = "report.json"
    (out / "report.json").write_text(json.dumps(_jsonable(report.to_dict()), indent=2, sort_keys=True))
    (out / "config.normalized.json").write_text(json.dumps(cfg.normalized, indent=2, sort_keys=True))
    return report


def run_malliavin(
    cfg: ExperimentConfig,
    shift_time: float,
    atom: int,
    phi_grid: list[float],
    out_dir: str | Path | None = None,
) -> RunReport:
    """Derivative fields for one jump shift plus the Gaussian quotient diagnostics."""
    out = Path(out_dir or cfg.output["dir"])
    out.mkdir(parents=True, exist_ok=True)
    report = RunReport(cfg.hash, cfg.seed, cfg.n_paths)
    noise = sample_noise(cfg.grid, cfg.model.measure, cfg.n_paths, cfg.seed, coupled=True, workers=cfg.workers)
    paths = euler_solve(cfg.model, noise)
    res = solve_fbsde(cfg.model, cfg.driver, cfg.grid, cfg.n_paths, cfg.seed, cfg.solver, noise=noise, paths=paths)
    s = cfg.grid.times[cfg.grid.index_of(shift_time)]
    if not 0 <= atom < cfg.model.measure.n_atoms:
        raise ValueError(f"atom {atom} out of range for {cfg.model.measure.n_atoms} atoms")
    fld = jump_derivative_solution(
        cfg.model, cfg.driver, noise, s, atom, res.solution.M_used, cfg.solver.basis, base_paths=paths, base_solution=res.solution
    )
    c = res.report.constants
    bound = derivative_bound_check(fld, c.a, c.b, c.r)
    report.checks["derivative_bound"] = bound
    report.checks["derivative_summary"] = {
        "passed": bool(np.all(np.isfinite(fld.DY))),
        "s": s,
        "atom": atom,
        "mean_DY0_after_shift": float(fld.DY[:, cfg.grid.index_of(s)].mean()),
        "max_abs_DX": float(np.abs(fld.DX).max()),
    }
    if cfg.model.bound_sigma() > 0:
        report.checks["forward_quotient"] = forward_quotient_check(cfg.model, noise, phis=phi_grid, base=paths)
    report.bounds = res.report.to_dict()
    extra = {"DX": fld.DX, "DY": fld.DY, "DZ": fld.DZ, "DU": fld.DU}
    k = min(int(cfg.output["max_paths"]), paths.n_paths)
    times = cfg.grid.times

    def rows():
        for p in range(k):
            for name, arr in extra.items():
                a = arr[p]
                for i in range(a.shape[0]):
                    if a.ndim == 1:
                        yield (p, _fmt(times[i]), name, "", _fmt(a[i]))
                    else:
                        for j in range(a.shape[1]):
                            yield (p, _fmt(times[i]), name, j, _fmt(a[i, j]))

    write_csv(out / "malliavin.csv", rows())
    report.artifacts["csv"] = "malliavin.csv"
    (out / "malliavin_report.json").write_text(json.dumps(_jsonable(report.to_dict()), indent=2, sort_keys=True))
    report.artifacts["report"] = "malliavin_report.json"
    return report


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj
