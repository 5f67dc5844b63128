"""Malliavin derivatives in jump directions and Gaussian difference quotients.

Jump directions are exact: adding a jump of size ``v`` at ``s`` to the driving
noise and re-solving on the same random numbers gives ``D_{s,v}`` of any
functional of the solution.  The Gaussian direction is only diagnosed through
the coupled-noise quotient ``||xi - xi^phi||_{L^2} / phi``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .backward import BsdeSolution, RegressionBasis, lsmc_solve, path_features
from .forward import ForwardModel, euler_solve, shifted_solve
from .noise import NoiseBundle, couple_brownian
from .paths import PathFunctional, PathSkeleton, evaluate_functional, shift_path
from .truncation import DriverSpec

__all__ = [
    "ShiftPoint",
    "DerivativeField",
    "QuotientEstimate",
    "jump_derivative_functional",
    "jump_derivative_solution",
    "derivative_bound_check",
    "forward_derivative_ratio",
    "first_chaos_quotient",
    "gaussian_quotient",
    "quotient_diagnostic",
    "forward_quotient_check",
    "chain_rule_check",
]

PHI_GRID = (1.0, 0.5, 0.25, 0.125)


@dataclass(frozen=True)
class ShiftPoint:
    """Direction of a derivative: a jump atom at ``t`` or the Gaussian direction.

    Attributes:
        t: shift instant in ``[0, T]``.
        atom: index of the jump atom, ``None`` for the Gaussian direction.
        mark: jump size ``v_j`` added to the driving path.
        phi: coupling parameter of the Gaussian direction.
    """

    t: float
    atom: int | None = None
    mark: float | None = None
    phi: float | None = None

    def __post_init__(self):
        if self.t < 0:
            raise ValueError("shift time must be nonnegative")
        if self.atom is None:
            if self.phi is None or not 0 < self.phi <= 1:
                raise ValueError("Gaussian direction needs phi in (0, 1]")
        elif self.phi is not None:
            raise ValueError("a jump direction takes no phi")

    @classmethod
    def jump(cls, t: float, atom: int, mark: float) -> "ShiftPoint":
        return cls(float(t), int(atom), float(mark))

    @classmethod
    def gaussian(cls, phi: float, t: float = 0.0) -> "ShiftPoint":
        return cls(float(t), None, None, float(phi))

    @property
    def is_gaussian(self) -> bool:
        return self.atom is None


def jump_derivative_functional(g: PathFunctional, p: PathSkeleton, s: ShiftPoint) -> np.ndarray:
    """``g(p + v 1_[t, T]) - g(p)`` per path, with ``v`` the mark of the shift."""
    if s.is_gaussian:
        raise ValueError("jump_derivative_functional needs a jump direction")
    v = s.mark if s.mark is not None else 0.0
    return evaluate_functional(g, shift_path(p, s.t, v)) - evaluate_functional(g, p)


@dataclass(frozen=True, eq=False)
class DerivativeField:
    """``D_{s, v_j}`` of the forward path and of ``(Y, Z, U)``.

    Arrays follow :class:`BsdeSolution` shapes and vanish at instants before
    ``s``.
    """

    s: float
    atom: int
    DX: np.ndarray
    DY: np.ndarray
    DZ: np.ndarray
    DU: np.ndarray
    base: BsdeSolution
    shifted: BsdeSolution
    base_paths: PathSkeleton

    def fields(self) -> dict[str, np.ndarray]:
        return {"DX": self.DX, "DY": self.DY, "DZ": self.DZ, "DU": self.DU}


def jump_derivative_solution(
    model: ForwardModel,
    spec: DriverSpec,
    noise: NoiseBundle,
    s: float,
    atom: int,
    M: float,
    basis: RegressionBasis | None = None,
    base_paths: PathSkeleton | None = None,
    base_solution: BsdeSolution | None = None,
) -> DerivativeField:
    """Solve on the shifted forward paths with the same noise and subtract the base solve."""
    shift = shifted_solve(model, noise, s, atom, base=base_paths)
    base_sol = base_solution or lsmc_solve(spec, M, shift.base, noise, basis)
    sh_sol = lsmc_solve(spec, M, shift.shifted, noise, basis)
    before = noise.grid.times < s
    DY = sh_sol.Y - base_sol.Y
    DZ = sh_sol.Z - base_sol.Z
    DU = sh_sol.U - base_sol.U
    DY[:, before] = 0.0
    DZ[:, before[:-1]] = 0.0
    DU[:, before[:-1], :] = 0.0
    return DerivativeField(float(s), int(atom), shift.derivative, DY, DZ, DU, base_sol, sh_sol, shift.base)


def derivative_bound_check(field: DerivativeField, a: float, b: float, r: float, q: float = 0.99) -> dict:
    """Fit ``C`` in ``|DZ_u| <= C (1 + a + b |X^u|^r)`` at the ``q`` level, ``u >= s``.

    ``C`` is the upper ``q``-quantile of the ratio, so at least a fraction ``q``
    of the points satisfy the bound at the fitted constant.
    """
    sup = path_features(field.base_paths)["sup"][:, :-1]
    after = field.base.grid.times[:-1] >= field.s
    denom = 1.0 + a + b * sup[:, after] ** r
    ratio = np.abs(field.DZ[:, after]) / denom
    C = float(np.quantile(ratio, q, method="higher")) if ratio.size else 0.0
    frac = float(np.mean(ratio <= C)) if ratio.size else 1.0
    return {"C": C, "fraction_within": frac, "passed": bool(frac >= q and np.isfinite(C))}


def forward_derivative_ratio(
    model: ForwardModel,
    noise: NoiseBundle,
    s_values: Sequence[float],
    t_values: Sequence[float],
    base: PathSkeleton | None = None,
) -> dict:
    """``max |D_{s, v_j} X_t| / (e^{L_b (t - s)} kappa_rho(v_j))`` over shifts, atoms and ``t >= s``."""
    grid = noise.grid
    base = euler_solve(model, noise) if base is None else base
    L_b = model.lipschitz_b(grid.T)
    worst = 0.0
    table = []
    t_idx = [grid.index_of(t) for t in t_values]
    for s in s_values:
        for j in range(model.measure.n_atoms):
            d = shifted_solve(model, noise, s, j, base=base).derivative
            for t, i in zip(t_values, t_idx):
                if t < s:
                    continue
                ratio = float(np.abs(d[:, i]).max() / (math.exp(L_b * (t - s)) * model.kappa_rho[j]))
                table.append({"s": float(s), "t": float(t), "atom": j, "ratio": ratio})
                worst = max(worst, ratio)
    return {"max_ratio": worst, "mesh": grid.mesh, "table": table}


# ---------------------------------------------------------------------------
# Gaussian direction


@dataclass(frozen=True)
class QuotientEstimate:
    phi: float
    value: float
    standard_error: float


def first_chaos_quotient(phi):
    """``sqrt(2 (1 - sqrt(1 - phi^2))) / phi``, the quotient of a unit first-chaos variable."""
    phi = np.asarray(phi, dtype=float)
    return np.sqrt(2.0 * (1.0 - np.sqrt(1.0 - phi**2))) / phi


def gaussian_quotient(xi, xi_phi, phi: float) -> QuotientEstimate:
    """Monte Carlo ``||xi - xi^phi||_{L^2} / phi`` with a delta-method standard error."""
    if not 0 < phi <= 1:
        raise ValueError("phi must lie in (0, 1]")
    d = (np.asarray(xi, dtype=float) - np.asarray(xi_phi, dtype=float)) ** 2
    m = float(d.mean())
    if m == 0.0:
        return QuotientEstimate(float(phi), 0.0, 0.0)
    se_m = float(d.std(ddof=1) / math.sqrt(d.size)) if d.size > 1 else math.inf
    return QuotientEstimate(float(phi), math.sqrt(m) / phi, se_m / (2 * math.sqrt(m)) / phi)


def quotient_diagnostic(
    functional: Callable[[NoiseBundle], np.ndarray],
    noise: NoiseBundle,
    phis: Sequence[float] = PHI_GRID,
    reference: float | None = None,
) -> dict:
    """Quotients of ``functional`` over a ``phi`` grid and their max.

    With a reference ``(E int |D_{t,0} xi|^2 dt)^{1/2}`` the max is compared
    with the two-sided bound ``[reference / 2, reference]``.
    """
    xi = functional(noise)
    ests = [gaussian_quotient(xi, functional(noise.with_brownian(couple_brownian(noise, p))), p) for p in phis]
    top = max(e.value for e in ests)
    out = {
        "phi": [e.phi for e in ests],
        "quotient": [e.value for e in ests],
        "standard_error": [e.standard_error for e in ests],
        "max_quotient": top,
    }
    if reference is not None:
        out["reference"] = float(reference)
        out["lower_bound_holds"] = bool(top >= reference / 2)
        out["upper_bound_holds"] = bool(top <= reference)
    return out


def forward_quotient_check(
    model: ForwardModel,
    noise: NoiseBundle,
    t: float | None = None,
    phis: Sequence[float] = PHI_GRID,
    base: PathSkeleton | None = None,
) -> dict:
    """Quotient of ``X_t`` against ``K_sigma sqrt(t) e^{L_b t}`` times the first-chaos factor.

    The factor ``sqrt(2 (1 - sqrt(1 - phi^2))) / phi`` is exact for ``b = 0``
    and tends to 1 as ``phi -> 0``.  A point passes when the estimate is below
    the bound plus three standard errors.
    """
    grid = noise.grid
    t = grid.T if t is None else float(t)
    i = grid.index_of(t)
    base = euler_solve(model, noise) if base is None else base
    xt = base.at_base()[:, i]
    scale = model.bound_sigma() * math.sqrt(t) * math.exp(model.lipschitz_b(grid.T) * t)
    rows = []
    for phi in phis:
        xp = euler_solve(model, noise.with_brownian(couple_brownian(noise, phi))).at_base()[:, i]
        est = gaussian_quotient(xt, xp, phi)
        bound = scale * float(first_chaos_quotient(phi))
        rows.append(
            {
                "phi": phi,
                "quotient": est.value,
                "standard_error": est.standard_error,
                "bound": bound,
                "passed": bool(est.value <= bound + 3 * est.standard_error),
            }
        )
    return {"t": t, "rows": rows, "passed": all(r["passed"] for r in rows)}


def chain_rule_check(
    model: ForwardModel,
    spec: DriverSpec,
    noise: NoiseBundle,
    t: float | None = None,
    y: float = 0.0,
    phis: Sequence[float] = PHI_GRID,
    q: float = 0.99,
) -> dict:
    """Quotient of ``f(t, X^t, y)`` at frozen ``y`` against the chain-rule shape.

    The bound is ``K_sigma sqrt(t) e^{L_b t} (c + beta S_q^r)`` times the
    first-chaos factor, with ``S_q`` the ``q``-quantile of ``|X^t|_inf``.
    A point passes when the estimate is below the bound plus 2.33 standard
    errors (one-sided 99%).
    """
    grid = noise.grid
    t = grid.T if t is None else float(t)
    i = grid.index_of(t)
    prm = spec.params

    def f_at(paths):
        return np.broadcast_to(spec.f(t, spec.x_running(paths)[:, i], y, 0.0, 0.0), (paths.n_paths,))

    base = euler_solve(model, noise)
    S = path_features(base)["sup"][:, i]
    Sq = float(np.quantile(S, q, method="higher"))
    scale = model.bound_sigma() * math.sqrt(t) * math.exp(model.lipschitz_b(grid.T) * t) * (prm.c + prm.beta * Sq**prm.r)
    fx = f_at(base)
    rows = []
    for phi in phis:
        fp = f_at(euler_solve(model, noise.with_brownian(couple_brownian(noise, phi))))
        est = gaussian_quotient(fx, fp, phi)
        bound = scale * float(first_chaos_quotient(phi))
        rows.append(
            {
                "phi": phi,
                "quotient": est.value,
                "standard_error": est.standard_error,
                "bound": bound,
                "passed": bool(est.value <= bound + 2.33 * est.standard_error),
            }
        )
    return {"t": t, "rows": rows, "passed": all(r["passed"] for r in rows)}
