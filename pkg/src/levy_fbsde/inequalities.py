"""Stochastic Gronwall and Bihari-LaSalle checks, the bound-iteration fixed point
and the a priori stability bound."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "GronwallInstance",
    "InequalityResult",
    "FixedPointProblem",
    "gronwall_check",
    "bihari_check",
    "bihari_G",
    "bihari_G_inv",
    "bihari_shift",
    "gronwall_forward_instance",
    "bihari_forward_instance",
    "fixed_point",
    "apriori_rhs",
    "minimize_over_n",
]

ETAS = ("linear", "xlogx")


def _as_paths(a, name) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or a.shape[0] == 0:
        raise ValueError(f"{name} must be an (n_paths, n_times) array")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    return a


@dataclass(frozen=True, eq=False)
class GronwallInstance:
    """Sampled data for the stochastic Gronwall / Bihari-LaSalle inequality.

    Attributes:
        X: ``(n, L)`` nonnegative sample paths of the dominated process.
        H: ``(n, L)`` nonnegative nondecreasing sample paths.
        A: deterministic nondecreasing ``A`` with ``A_0 = 0``, either the
            value ``A_T`` or its samples on a time grid.
        p: exponent in ``(0, 1)``.
        eta: ``"linear"`` or ``"xlogx"``.
        c0: lower bound of ``X`` (for ``"xlogx"`` at least 1).
        r: base point of ``G`` for ``"xlogx"``; must satisfy ``r > c0``.
    """

    X: np.ndarray
    H: np.ndarray
    A: float | np.ndarray
    p: float
    eta: str = "linear"
    c0: float = 0.0
    r: float | None = None

    def __post_init__(self):
        X = _as_paths(self.X, "X")
        H = _as_paths(self.H, "H")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "H", H)
        if X.shape[0] != H.shape[0]:
            raise ValueError("X and H must have the same number of paths")
        if not 0 < self.p < 1:
            raise ValueError("p must lie in (0, 1)")
        if self.eta not in ETAS:
            raise ValueError(f"eta must be one of {ETAS}")
        if np.any(X < self.c0):
            raise ValueError(f"X drops below c0 = {self.c0}")
        if np.any(H < 0):
            raise ValueError("H must be nonnegative")
        if np.any(np.diff(H, axis=1) < -1e-12 * (1 + np.abs(H[:, 1:]))):
            raise ValueError("H must be nondecreasing on every path")
        A = np.atleast_1d(np.asarray(self.A, dtype=float))
        if A.size > 1 and abs(A[0]) > 1e-15:
            raise ValueError("A must start at 0")
        if np.any(np.diff(A) < 0) or A[-1] < 0:
            raise ValueError("A must be nondecreasing and nonnegative")
        if self.eta == "xlogx":
            if self.c0 < 1:
                raise ValueError("x log x needs c0 >= 1")
            if self.r is None or self.r <= max(self.c0, 1.0):
                raise ValueError("x log x needs a base point r > max(c0, 1)")

    @property
    def A_T(self) -> float:
        return float(np.atleast_1d(np.asarray(self.A, dtype=float))[-1])


@dataclass(frozen=True)
class InequalityResult:
    lhs: float
    rhs: float
    margin: float
    passed: bool
    standard_error: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _mc_mean(v: np.ndarray):
    m = float(v.mean())
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return m, se


def _verdict(samples: np.ndarray, rhs: float) -> InequalityResult:
    lhs, se = _mc_mean(samples)
    rel = se / lhs if lhs > 0 else 0.0
    return InequalityResult(lhs, rhs, rhs - lhs, bool(lhs <= rhs * (1 + 3 * rel)), se)


def gronwall_check(inst: GronwallInstance) -> InequalityResult:
    """``E |X^T|_inf^p`` against ``(E H_T)^p e^{p A_T / (1-p)} / (1-p)``.

    Passes iff the left side is at most the right side times
    ``1 + 3 * relative standard error`` of the left side.
    """
    if inst.eta != "linear":
        raise ValueError("gronwall_check needs eta = 'linear'")
    p = inst.p
    lhs_samples = np.abs(inst.X).max(axis=1) ** p
    rhs = inst.H[:, -1].mean() ** p / (1 - p) * math.exp(p / (1 - p) * inst.A_T)
    return _verdict(lhs_samples, rhs)


def bihari_G(x, r: float):
    """``G(x) = log log x - log log r``, the integral of ``1 / (u log u)`` from ``r``."""
    return np.log(np.log(np.asarray(x, dtype=float))) - math.log(math.log(r))


def bihari_G_inv(g, r: float):
    """``G^{-1}(g) = exp(log(r) e^g)``."""
    return np.exp(math.log(r) * np.exp(np.asarray(g, dtype=float)))


def bihari_shift(y, c: float):
    """Closed form of ``G^{-1}(G(y) - c)`` for ``eta = x log x``: ``y^{e^{-c}}``."""
    return np.asarray(y, dtype=float) ** math.exp(-c)


def bihari_check(inst: GronwallInstance) -> InequalityResult:
    """``E[G^{-1}(G(|X^T|_inf) - A_T/(1-p))^p]`` against ``(E H_T)^p / (1-p)``."""
    if inst.eta != "xlogx":
        raise ValueError("bihari_check needs eta = 'xlogx'")
    sup = np.abs(inst.X).max(axis=1)
    if np.any(sup < inst.r):
        raise ValueError(f"running sup of X below the base point r = {inst.r}")
    p = inst.p
    lhs_samples = bihari_shift(sup, inst.A_T / (1 - p)) ** p
    rhs = inst.H[:, -1].mean() ** p / (1 - p)
    return _verdict(lhs_samples, rhs)


def gronwall_forward_instance(model, paths, martingale, p: float) -> GronwallInstance:
    """Linear instance for simulated forward paths.

    ``X = |X_path|``, ``H_t = |x0| + K_b t + sup_{s<=t} |M_s|`` with ``M`` the
    simulated martingale part, and ``A_t = L_b t``.
    """
    T = paths.T
    Msup = np.maximum.accumulate(np.abs(martingale.values), axis=1)
    H = abs(model.x0) + model.bound_b() * paths.times + Msup
    A = model.lipschitz_b(T) * paths.grid.times
    return GronwallInstance(np.abs(paths.values), H, A, p)


def bihari_forward_instance(model, paths, c: float, p: float, r: float = 2.0) -> GronwallInstance:
    """x log x instance built from ``e^{c X} + 2`` as in the exponential-moment argument.

    ``H = 2 + e^{c x0}`` and ``A_T = 2 K T`` with
    ``K = max(c K_b + c^2 K_sigma^2 / 2 + sum_j lambda_j (e^{c kappa_j} - 1 - c kappa_j), c L_b)``.
    The exponent is computed in log space and capped to avoid overflow.
    """
    T = paths.T
    kap = np.asarray(model.kappa_rho, dtype=float)
    lam = model.measure.intensities
    jump = float(np.sum(lam * (np.expm1(c * kap) - c * kap))) if kap.size else 0.0
    K = max(c * model.bound_b() + 0.5 * c**2 * model.bound_sigma() ** 2 + jump, c * model.lipschitz_b(T))
    X = np.exp(np.minimum(c * paths.values, 700.0)) + 2.0
    H = np.full((paths.n_paths, 1), 2.0 + math.exp(c * model.x0))
    return GronwallInstance(X, H, 2.0 * K * T, p, eta="xlogx", c0=1.0, r=r)


# ---------------------------------------------------------------------------
# bound iteration


@dataclass(frozen=True)
class FixedPointProblem:
    """The iteration ``a_{n+1} = (C + 1)^2 (1 + a_n^exponent)``."""

    C: float
    exponent: float
    a0: float = 1.0
    tol: float = 1e-12
    max_iter: int = 200

    def __post_init__(self):
        if self.C < 0:
            raise ValueError("C must be nonnegative")
        if not 0 <= self.exponent < 1:
            raise ValueError("exponent must lie in [0, 1)")
        if self.a0 < 1:
            raise ValueError("a0 must be at least 1")

    def step(self, a: float) -> float:
        return (self.C + 1.0) ** 2 * (1.0 + a**self.exponent)


def fixed_point(problem: FixedPointProblem) -> tuple[float, int]:
    """Iterate until successive values differ by at most ``tol * max(1, a)``.

    Returns ``(a_inf, iterations)``.

    Raises:
        RuntimeError: ``max_iter`` reached, which indicates a bug for
            exponents below 1.
    """
    a = float(problem.a0)
    for k in range(1, problem.max_iter + 1):
        nxt = problem.step(a)
        if abs(nxt - a) <= problem.tol * max(1.0, abs(nxt)):
            return nxt, k
        a = nxt
    raise RuntimeError(f"fixed-point iteration did not settle in {problem.max_iter} steps (last {a!r})")


def apriori_rhs(n: int, C: float, dxi2: float, df2: float, expX: float) -> float:
    """``C e^{C n} (dxi2 + df2) + e^{-n} C expX``."""
    if min(C, dxi2, df2, expX) < 0:
        raise ValueError("inputs must be nonnegative")
    return C * math.exp(C * n) * (dxi2 + df2) + math.exp(-n) * C * expX


def minimize_over_n(C: float, dxi2: float, df2: float, expX: float, n_range=range(0, 201)) -> tuple[int, float]:
    """Integer ``n`` minimizing :func:`apriori_rhs`, with the minimal value."""
    vals = [(apriori_rhs(n, C, dxi2, df2, expX), n) for n in n_range]
    best, n = min(vals)
    return n, best
