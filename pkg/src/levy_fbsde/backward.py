"""Backward solvers for the truncated BSDE and the growth-bound diagnostics.

Both solvers run on a fixed batch of forward paths and estimate conditional
expectations by least squares on a small path-dependent basis.

* ``lsmc_solve`` is the explicit backward scheme: the generator is evaluated
  at the regressed ``E_i[Y_{i+1}]``.
* ``picard_solve`` repeats full backward sweeps with the generator frozen at
  the previous sweep's ``(Y, Z, H)`` until the ``S^2`` change is below ``tol``.

``Z`` and ``U`` regress the products of the fitted residual
``Y_{i+1} - E_i[Y_{i+1}]`` with the martingale increments.  Subtracting the
fit leaves the conditional mean unchanged (the increments are centered and
independent of ``F_{t_i}``) and removes most of the regression noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg
from scipy.optimize import minimize_scalar

from .forward import ForwardModel, euler_solve
from .inequalities import FixedPointProblem, fixed_point
from .noise import NoiseBundle, TimeGrid, sample_noise
from .paths import PathSkeleton
from .truncation import DriverSpec, TruncatedData, TruncationLevel, h_integral, truncated_data

__all__ = [
    "RegressionBasis",
    "BsdeSolution",
    "BoundConstants",
    "BoundReport",
    "SolverSpec",
    "PicardDivergence",
    "path_features",
    "lsmc_solve",
    "picard_solve",
    "fit_quantile_bound",
    "fit_bounds",
    "choose_truncation_level",
    "solve_fbsde",
]

BASIS_FEATURES = ("1", "x", "x2", "sup", "integral")
_COND_LIMIT = 1e12


# ---------------------------------------------------------------------------
# regression


def path_features(paths: PathSkeleton) -> dict[str, np.ndarray]:
    """Adapted regressors at every base instant, each ``(n, N + 1)``.

    ``integral`` is ``int_0^{t_i} X ds`` of the stopped path.
    """
    x = paths.at_base()
    run = np.maximum.accumulate(np.abs(paths.values), axis=1)
    dt = np.diff(paths.times, axis=1)
    cum = np.concatenate([np.zeros((paths.n_paths, 1)), np.cumsum(paths.values[:, :-1] * dt, axis=1)], axis=1)
    return {
        "x": x,
        "x2": x * x,
        "sup": np.take_along_axis(run, paths.base_index, axis=1),
        "integral": np.take_along_axis(cum, paths.base_index, axis=1),
    }


@dataclass(frozen=True)
class RegressionBasis:
    """Regressors for the conditional expectations.

    Attributes:
        features: names out of ``1, x, x2, sup, integral``.
        ridge: extra Tikhonov weight relative to ``trace / dim`` of the
            normal matrix, always applied.
    """

    features: tuple[str, ...] = BASIS_FEATURES
    ridge: float = 0.0

    def __post_init__(self):
        unknown = set(self.features) - set(BASIS_FEATURES)
        if unknown:
            raise ValueError(f"unknown basis features {sorted(unknown)}")
        if not self.features:
            raise ValueError("basis needs at least one feature")
        if self.ridge < 0:
            raise ValueError("ridge must be nonnegative")
        object.__setattr__(self, "features", tuple(self.features))

    def design(self, feats: dict[str, np.ndarray], i: int) -> np.ndarray:
        """Standardized design matrix at base instant ``i``."""
        n = next(iter(feats.values())).shape[0]
        cols = []
        for name in self.features:
            if name == "1":
                cols.append(np.ones(n))
                continue
            v = feats[name][:, i]
            sd = v.std()
            cols.append((v - v.mean()) / sd if sd > 1e-12 * (1 + abs(v.mean())) else v)
        return np.column_stack(cols)


@dataclass
class _Projector:
    A: np.ndarray
    factor: tuple
    cond: float
    ridged: bool

    def fit(self, target: np.ndarray) -> np.ndarray:
        rhs = self.A.T @ target / self.A.shape[0]
        return self.A @ linalg.cho_solve(self.factor, rhs)


def _projector(A: np.ndarray, ridge: float) -> _Projector:
    G = A.T @ A / A.shape[0]
    scale = np.trace(G) / G.shape[0]
    if ridge:
        G = G + ridge * scale * np.eye(G.shape[0])
    cond = float(np.linalg.cond(G))
    ridged = False
    if not np.isfinite(cond) or cond > _COND_LIMIT:
        G = G + 1e-8 * scale * np.eye(G.shape[0])
        ridged = True
    try:
        factor = linalg.cho_factor(G)
    except linalg.LinAlgError:
        G = G + 1e-8 * scale * np.eye(G.shape[0])
        factor = linalg.cho_factor(G)
        ridged = True
    return _Projector(A, factor, cond, ridged)


# ---------------------------------------------------------------------------
# solutions


@dataclass(frozen=True, eq=False)
class BsdeSolution:
    """Discrete solution on the base grid.

    ``Y`` is ``(n, N + 1)``; ``Z``, ``H`` are ``(n, N)`` and ``U`` is
    ``(n, N, J)``, indexed by the left endpoint ``t_i`` of each step.
    ``pathwise`` is ``g^M + sum_i dt_i f_i`` per path, whose mean equals ``Y_0``
    when the basis has an intercept; its spread gives the MC error of ``Y_0``.
    """

    grid: TimeGrid
    Y: np.ndarray
    Z: np.ndarray
    U: np.ndarray
    H: np.ndarray
    M_used: float
    method: str
    pathwise: np.ndarray
    condition_numbers: np.ndarray
    ridge_steps: tuple[int, ...] = ()
    iterations: int = 0
    residuals: tuple[float, ...] = ()

    @property
    def n_paths(self) -> int:
        return self.Y.shape[0]

    @property
    def Y0(self) -> float:
        return float(self.Y[:, 0].mean())

    @property
    def Y0_standard_error(self) -> float:
        return float(self.pathwise.std(ddof=1) / math.sqrt(self.n_paths)) if self.n_paths > 1 else math.inf

    def diagnostics(self) -> dict:
        return {
            "method": self.method,
            "M_used": self.M_used,
            "Y0": self.Y0,
            "Y0_standard_error": self.Y0_standard_error,
            "max_condition_number": float(np.max(self.condition_numbers)) if self.condition_numbers.size else 0.0,
            "ridge_steps": list(self.ridge_steps),
            "iterations": self.iterations,
            "residuals": list(self.residuals),
        }


class PicardDivergence(RuntimeError):
    """Picard sweeps did not reach the tolerance; carries the last residual."""

    def __init__(self, iterations: int, residual: float):
        super().__init__(f"Picard iteration did not converge in {iterations} sweeps (last residual {residual:.3e})")
        self.iterations = iterations
        self.residual = residual


def _check_inputs(data: TruncatedData, paths: PathSkeleton, noise: NoiseBundle):
    if paths.grid != noise.grid:
        raise ValueError("forward paths and noise use different grids")
    if paths.n_paths != noise.n_paths:
        raise ValueError("forward paths and noise have different path counts")


def _sweep(data, measure, grid, feats, xfeat, terminal, dW, dN, basis, frozen=None):
    """One backward pass.  ``frozen=(Y, Z, H)`` switches to the Picard form."""
    n, N = dW.shape
    J = measure.n_atoms
    dt = grid.steps
    lam = measure.intensities
    Y = np.empty((n, N + 1))
    Z = np.empty((n, N))
    U = np.empty((n, N, J))
    H = np.empty((n, N))
    Y[:, N] = terminal
    pathwise = terminal.copy()
    conds = np.empty(N)
    ridged = []
    for i in range(N - 1, -1, -1):
        proj = _projector(basis.design(feats, i), basis.ridge)
        conds[i] = proj.cond
        if proj.ridged:
            ridged.append(i)
        nxt = Y[:, i + 1]
        cond_mean = proj.fit(nxt)
        resid = nxt - cond_mean
        Z[:, i] = proj.fit(resid * dW[:, i]) / dt[i]
        for j in range(J):
            U[:, i, j] = proj.fit(resid * dN[:, i, j]) / (lam[j] * dt[i])
        H[:, i] = h_integral(data.spec, U[:, i, :], grid.times[i], measure, data.M)
        t = grid.times[i]
        if frozen is None:
            f = data.generator(t, xfeat[:, i], cond_mean, Z[:, i], H[:, i])
        elif frozen is False:
            f = data.generator(t, xfeat[:, i], 0.0, 0.0, 0.0)
        else:
            Yp, Zp, Hp = frozen
            f = data.generator(t, xfeat[:, i], Yp[:, i], Zp[:, i], Hp[:, i])
        f = np.broadcast_to(f, (n,))
        Y[:, i] = cond_mean + dt[i] * f
        pathwise += dt[i] * f
        if not np.all(np.isfinite(Y[:, i])):
            raise FloatingPointError(f"non-finite Y at step {i} (t={t:.6g})")
    return Y, Z, U, H, pathwise, conds, tuple(sorted(ridged))


def _prepare(data, paths, noise):
    _check_inputs(data, paths, noise)
    feats = path_features(paths)
    xfeat = data.x_running(paths)
    terminal = data.g(paths)
    if not np.all(np.isfinite(terminal)):
        raise FloatingPointError("non-finite terminal condition")
    return feats, xfeat, terminal, noise.brownian_increments, noise.compensated_increments()


def lsmc_solve(
    spec: DriverSpec,
    M,
    paths: PathSkeleton,
    noise: NoiseBundle,
    basis: RegressionBasis | None = None,
) -> BsdeSolution:
    """Explicit least-squares Monte Carlo scheme for the truncated BSDE.

    Raises:
        FloatingPointError: ``Y`` became non-finite; names the step.
    """
    data = truncated_data(spec, M)
    basis = basis or RegressionBasis()
    feats, xfeat, terminal, dW, dN = _prepare(data, paths, noise)
    Y, Z, U, H, pw, conds, ridged = _sweep(data, noise.measure, noise.grid, feats, xfeat, terminal, dW, dN, basis)
    return BsdeSolution(noise.grid, Y, Z, U, H, data.M, "lsmc", pw, conds, ridged)


def s2_distance(Y1: np.ndarray, Y2: np.ndarray) -> float:
    """Discrete ``S^2`` norm ``(E max_i |Y1 - Y2|^2)^{1/2}``."""
    return float(np.sqrt(np.mean(np.max((Y1 - Y2) ** 2, axis=1))))


def picard_solve(
    spec: DriverSpec,
    M,
    paths: PathSkeleton,
    noise: NoiseBundle,
    basis: RegressionBasis | None = None,
    tol: float = 1e-6,
    max_iter: int = 50,
) -> BsdeSolution:
    """Picard iteration of full backward sweeps.

    Sweep 0 uses ``f(t, x, 0, 0, 0)``; each further sweep freezes the
    generator at the previous ``(Y, Z, H)``.  The iteration count is the
    number of feedback sweeps, so a generator without ``(y, z, u)``
    dependence converges after one.

    Raises:
        PicardDivergence: ``max_iter`` sweeps without reaching ``tol``.
    """
    data = truncated_data(spec, M)
    basis = basis or RegressionBasis()
    feats, xfeat, terminal, dW, dN = _prepare(data, paths, noise)
    args = (data, noise.measure, noise.grid, feats, xfeat, terminal, dW, dN, basis)
    prev = _sweep(*args, frozen=False)
    residuals = []
    for k in range(1, max_iter + 1):
        cur = _sweep(*args, frozen=(prev[0], prev[1], prev[3]))
        res = s2_distance(cur[0], prev[0])
        residuals.append(res)
        prev = cur
        if res <= tol:
            Y, Z, U, H, pw, conds, ridged = cur
            return BsdeSolution(noise.grid, Y, Z, U, H, data.M, "picard", pw, conds, ridged, k, tuple(residuals))
    raise PicardDivergence(max_iter, residuals[-1])


# ---------------------------------------------------------------------------
# growth bounds


@dataclass(frozen=True)
class BoundConstants:
    """Constants of the growth bounds of ``Y``, ``Z`` and ``U``.

    ``|Z| <= a + b |X^t|^r``, ``|U(v)| <= kappa_rho(v) (a + b |X^t|^r)`` and
    ``|Y| <= c_y (1 + |X^t|^{r+1})``.  ``kappa_inf`` is the sup of
    ``kappa_rho`` over the atoms.  When ``C_iter`` is given, ``a_inf`` is the
    fixed point of ``a -> (C_iter + 1)^2 (1 + a^{r ell})`` and ``b_inf = C_iter``.
    """

    a: float
    b: float
    c_y: float
    r: float = 0.0
    kappa_inf: float = 1.0
    C_iter: float | None = None
    ell: float = 1.0
    a_inf: float | None = None
    b_inf: float | None = None

    def __post_init__(self):
        for name in ("a", "b", "c_y", "r", "kappa_inf"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.C_iter is not None and self.a_inf is None:
            a_inf, _ = fixed_point(FixedPointProblem(C=self.C_iter, exponent=self.r * self.ell))
            object.__setattr__(self, "a_inf", a_inf)
            object.__setattr__(self, "b_inf", float(self.C_iter))

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class QuantileFit:
    a: float
    b: float
    violation_rate: float
    n_points: int


def _pinball(res: np.ndarray, q: float) -> float:
    return float(np.sum(np.where(res >= 0, q * res, (q - 1) * res)))


def fit_quantile_bound(target, weight, q: float = 0.99, max_points: int = 200_000) -> QuantileFit:
    """Fit ``target <= a + b * weight`` as a ``q``-quantile regression with ``a, b >= 0``.

    ``b`` minimizes the profiled pinball loss on a deterministic subsample;
    ``a`` is then the exact ``q``-quantile of ``target - b * weight`` on all
    points (upper order statistic), which keeps the violation rate at most
    ``1 - q``.
    """
    y = np.asarray(target, dtype=float).ravel()
    w = np.asarray(weight, dtype=float).ravel()
    if y.shape != w.shape or y.size == 0:
        raise ValueError("target and weight must be nonempty and of equal size")
    stride = max(1, y.size // max_points)
    ys, ws = y[::stride], w[::stride]

    def loss(b):
        res = ys - b * ws
        return _pinball(res - np.quantile(res, q), q)

    b = 0.0
    if np.ptp(ws) > 0:
        hi = 1.0
        pos = ws > 0
        if pos.any():
            hi = max(hi, 2 * float(np.quantile(ys[pos] / ws[pos], q)))
        b = float(minimize_scalar(loss, bounds=(0.0, hi), method="bounded", options={"xatol": 1e-6 * hi}).x)
        if loss(0.0) <= loss(b):
            b = 0.0
    a = max(0.0, float(np.quantile(y - b * w, q, method="higher")))
    rate = float(np.mean(y > a + b * w))
    return QuantileFit(a, b, rate, y.size)


@dataclass
class BoundReport:
    """Fitted constants and violation rates of the three growth bounds."""

    constants: BoundConstants
    quantile: float
    violation_Z: float
    violation_U: list[float]
    violation_Y: float
    fits: dict
    Y0: float
    Y0_standard_error: float
    M_used: float
    truncation_stability: dict | None = None

    @property
    def max_violation(self) -> float:
        return max([self.violation_Z, self.violation_Y, *self.violation_U])

    @property
    def passed(self) -> bool:
        ok = self.max_violation <= 1.0 - self.quantile + 1e-12
        if self.truncation_stability is not None:
            ok = ok and self.truncation_stability["passed"]
        return ok

    def to_dict(self) -> dict:
        return {
            "constants": self.constants.to_dict(),
            "quantile": self.quantile,
            "violation_Z": self.violation_Z,
            "violation_U": list(self.violation_U),
            "violation_Y": self.violation_Y,
            "fits": self.fits,
            "Y0": self.Y0,
            "Y0_standard_error": self.Y0_standard_error,
            "M_used": self.M_used,
            "truncation_stability": self.truncation_stability,
            "passed": self.passed,
        }


def fit_bounds(
    sol: BsdeSolution,
    paths: PathSkeleton,
    r: float,
    kappa_rho: Sequence[float] = (),
    q: float = 0.99,
    ell: float = 1.0,
) -> BoundReport:
    """Quantile-fit ``(a, b, c_y)`` and report violation rates.

    The joint ``(a, b)`` is the componentwise max of the fits for ``Z`` and
    each ``U_j / kappa_rho(v_j)``, so every field keeps its rate below ``1 - q``.
    """
    if not 0 < q < 1:
        raise ValueError("q must lie in (0, 1)")
    sup = path_features(paths)["sup"]
    w = sup[:, :-1] ** r
    kappa = np.asarray(kappa_rho, dtype=float)
    fits = {"Z": fit_quantile_bound(np.abs(sol.Z), w, q)}
    for j, k in enumerate(kappa):
        fits[f"U{j}"] = fit_quantile_bound(np.abs(sol.U[:, :, j]) / k, w, q)
    a = max(f.a for f in fits.values())
    b = max(f.b for f in fits.values())
    ratio = np.abs(sol.Y) / (1.0 + sup ** (r + 1))
    c_y = float(np.quantile(ratio, q, method="higher"))
    bound = a + b * w
    vz = float(np.mean(np.abs(sol.Z) > bound))
    vu = [float(np.mean(np.abs(sol.U[:, :, j]) > k * bound)) for j, k in enumerate(kappa)]
    vy = float(np.mean(ratio > c_y))
    consts = BoundConstants(a, b, c_y, r, float(kappa.max()) if kappa.size else 1.0, ell=ell)
    return BoundReport(
        consts,
        q,
        vz,
        vu,
        vy,
        {k: dict(v.__dict__) for k, v in fits.items()},
        sol.Y0,
        sol.Y0_standard_error,
        sol.M_used,
    )


def choose_truncation_level(constants: BoundConstants, paths: PathSkeleton, q: float = 0.99) -> TruncationLevel:
    """``M = 1 +`` the ``q``-quantile over path points of the largest bound.

    At each base instant the candidate is
    ``max(c_y (1 + S^{r+1}), max(1, kappa_inf) (a + b S^r), S)`` with ``S`` the
    running sup.  The ``kappa_inf`` factor keeps ``b_M`` the identity on ``U``
    as well as on ``Z``.
    """
    if not 0 < q <= 1:
        raise ValueError("q must lie in (0, 1]")
    c = constants
    S = path_features(paths)["sup"]
    cand = np.maximum.reduce(
        [
            c.c_y * (1.0 + S ** (c.r + 1)),
            max(1.0, c.kappa_inf) * (c.a + c.b * S**c.r),
            S,
        ]
    )
    return TruncationLevel(1.0 + float(np.quantile(cand, q, method="higher")))


# ---------------------------------------------------------------------------
# pipeline


@dataclass(frozen=True)
class SolverSpec:
    """Solver selection.

    Attributes:
        method: ``lsmc``, ``picard`` or ``both``.
        M: a level ``> 1`` or ``"auto"``.
        quantile: target quantile of the bound fits and of the auto level.
        stability_check: also solve at ``2 M`` and compare ``Y_0``.
        stability_rtol: allowed relative change of ``Y_0`` under doubling.
    """

    method: str = "lsmc"
    basis: RegressionBasis = field(default_factory=RegressionBasis)
    M: float | str = "auto"
    quantile: float = 0.99
    tol: float = 1e-6
    max_iter: int = 50
    stability_check: bool = False
    stability_rtol: float = 0.01

    def __post_init__(self):
        if self.method not in ("lsmc", "picard", "both"):
            raise ValueError(f"unknown solver method {self.method!r}")
        if self.M != "auto":
            TruncationLevel(float(self.M))


def _solve(method, spec, M, paths, noise, solver: SolverSpec):
    if method == "picard":
        return picard_solve(spec, M, paths, noise, solver.basis, solver.tol, solver.max_iter)
    return lsmc_solve(spec, M, paths, noise, solver.basis)


@dataclass
class FbsdeResult:
    solution: BsdeSolution
    report: BoundReport
    paths: PathSkeleton
    noise: NoiseBundle
    pilot_M: float | None = None
    cross_check: BsdeSolution | None = None


def solve_fbsde(
    model: ForwardModel,
    spec: DriverSpec,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    solver: SolverSpec | None = None,
    *,
    noise: NoiseBundle | None = None,
    paths: PathSkeleton | None = None,
    workers: int | None = None,
) -> FbsdeResult:
    """Noise, forward paths, truncation level, backward solve and bound report.

    With ``M = "auto"`` a pilot solve at ``2 + 2 max |X|_inf`` supplies the
    fitted constants from which the final level is chosen.
    """
    solver = solver or SolverSpec()
    if noise is None:
        noise = sample_noise(grid, model.measure, n_paths, seed, workers=workers)
    if paths is None:
        paths = euler_solve(model, noise)
    kappa = model.kappa_rho
    primary = "picard" if solver.method == "picard" else "lsmc"
    pilot_M = None
    if solver.M == "auto":
        pilot_M = 2.0 + 2.0 * float(np.abs(paths.values).max())
        pilot = _solve(primary, spec, pilot_M, paths, noise, solver)
        consts = fit_bounds(pilot, paths, spec.params.r, kappa, solver.quantile, spec.params.ell).constants
        M = choose_truncation_level(consts, paths, solver.quantile).M
    else:
        M = float(solver.M)
    sol = _solve(primary, spec, M, paths, noise, solver)
    report = fit_bounds(sol, paths, spec.params.r, kappa, solver.quantile, spec.params.ell)
    cross = None
    if solver.method == "both":
        cross = _solve("picard", spec, M, paths, noise, solver)
    if solver.stability_check:
        wide = _solve(primary, spec, 2 * M, paths, noise, solver)
        change = abs(wide.Y0 - sol.Y0)
        rel = change / max(abs(sol.Y0), 1e-12)
        report.truncation_stability = {
            "M": M,
            "M_doubled": 2 * M,
            "Y0": sol.Y0,
            "Y0_doubled": wide.Y0,
            "relative_change": rel,
            "s2_distance": s2_distance(sol.Y, wide.Y),
            "passed": bool(rel <= solver.stability_rtol),
        }
    return FbsdeResult(sol, report, paths, noise, pilot_M, cross)
