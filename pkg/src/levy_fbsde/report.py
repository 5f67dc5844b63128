"""PNG figures of a run and a standalone plot script for the CSV output."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .backward import path_features  # noqa: E402

__all__ = ["render_figures", "write_plot_script", "PLOT_SCRIPT"]

_N_SHOWN = 12


def _paths_figure(path: Path, paths) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    for k in range(min(_N_SHOWN, paths.n_paths)):
        ax.step(paths.times[k], paths.values[k], where="post", lw=0.8)
    ax.set_xlabel("t")
    ax.set_ylabel("X")
    ax.set_title("forward paths (refined skeleton)")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _solution_figure(path: Path, sol) -> None:
    t = sol.grid.times
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.6))
    for name, arr, tt, ax in (("Y", sol.Y, t, axes[0]), ("Z", sol.Z, t[:-1], axes[1]), ("H", sol.H, t[:-1], axes[2])):
        for k in range(min(_N_SHOWN, arr.shape[0])):
            ax.plot(tt, arr[k], lw=0.6, alpha=0.6)
        ax.plot(tt, arr.mean(axis=0), "k", lw=1.6, label="mean")
        ax.set_title(name)
        ax.set_xlabel("t")
    axes[0].legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _bounds_figure(path: Path, paths, sol, report) -> None:
    c = report.constants
    sup = path_features(paths)["sup"][:, :-1].ravel()
    z = np.abs(sol.Z).ravel()
    idx = np.arange(0, z.size, max(1, z.size // 20_000))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.scatter(sup[idx], z[idx], s=2, alpha=0.3, label="|Z|")
    grid = np.linspace(0, sup.max() if sup.size else 1.0, 200)
    ax.plot(grid, c.a + c.b * grid**c.r, "r", label=f"a + b s^r (a={c.a:.3g}, b={c.b:.3g})")
    ax.set_xlabel("running sup |X|")
    ax.set_ylabel("|Z|")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _quotient_figure(path: Path, q: dict) -> None:
    rows = q["rows"]
    phi = [r["phi"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.errorbar(phi, [r["quotient"] for r in rows], yerr=[3 * r["standard_error"] for r in rows], fmt="o-", label="quotient")
    ax.plot(phi, [r["bound"] for r in rows], "r--", label="bound")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("phi")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_figures(out: Path, paths, result, checks: dict) -> list[str]:
    """Write the standard figures into ``out`` and return their file names."""
    out = Path(out)
    names = ["paths.png", "solution.png", "bounds.png"]
    _paths_figure(out / names[0], paths)
    _solution_figure(out / names[1], result.solution)
    _bounds_figure(out / names[2], paths, result.solution, result.report)
    q = checks.get("malliavin", {}).get("forward_quotient")
    if q:
        names.append("quotient.png")
        _quotient_figure(out / names[-1], q)
    return names


PLOT_SCRIPT = '''"""Plot a solution CSV with columns (path_id, t, field, atom, value).

Usage: python plot_results.py [solution.csv] [output.png]
"""

import csv
import sys
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def main(src="solution.csv", dst="solution_from_csv.png"):
    series = defaultdict(lambda: ([], []))
    with open(src, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["field"] + (row["atom"] and "[" + row["atom"] + "]"), int(row["path_id"]))
            series[key][0].append(float(row["t"]))
            series[key][1].append(float(row["value"]))
    fields = sorted({k[0] for k in series})
    fig, axes = plt.subplots(len(fields), 1, figsize=(7, 2.2 * len(fields)), sharex=True, squeeze=False)
    for ax, name in zip(axes[:, 0], fields):
        for (f, _), (t, v) in series.items():
            if f == name:
                ax.plot(t, v, lw=0.7)
        ax.set_ylabel(name)
    axes[-1, 0].set_xlabel("t")
    fig.tight_layout()
    fig.savefig(dst, dpi=110)


if __name__ == "__main__":
    main(*sys.argv[1:3])
'''


def write_plot_script(out: Path) -> Path:
    path = Path(out) / "plot_results.py"
    path.write_text(PLOT_SCRIPT)
    return path
