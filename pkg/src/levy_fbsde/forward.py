"""Euler scheme for the path-dependent jump-diffusion forward equation.

The state at each base instant is advanced with the drift evaluated on the
stopped path at the left endpoint.  Jumps are placed at their exact times: a
jump strictly inside a base interval gets its own column in the path skeleton,
a jump exactly on a base instant is added at that column.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .noise import JumpMeasure, NoiseBundle, TimeGrid
from .paths import PathFunctional, PathSkeleton, random_path_pairs, running_functional, sup_distance

__all__ = [
    "DriftTerm",
    "Drift",
    "Volatility",
    "ForwardModel",
    "ExpMomentReport",
    "ShiftResult",
    "euler_solve",
    "drift_on_paths",
    "exp_moment_estimate",
    "shifted_solve",
    "verify_drift_lipschitz",
]

_DRIFT_FUNCTIONALS = ("terminal_point", "sup_norm", "integral")
_TRANSFORMS = {"identity": lambda x: x, "sin": np.sin, "tanh": np.tanh, "atan": np.arctan}


@dataclass(frozen=True)
class DriftTerm:
    """``coef * transform(F(x^t))`` with ``F`` a catalog functional of the stopped path.

    ``F`` is one of ``terminal_point`` (the current value ``x_t``), ``sup_norm``
    or ``integral`` (Lebesgue integral over ``[0, T]`` of the stopped path).
    """

    functional: str
    coef: float
    transform: str = "identity"

    def __post_init__(self):
        if self.functional not in _DRIFT_FUNCTIONALS:
            raise ValueError(f"drift functional must be one of {_DRIFT_FUNCTIONALS}, got {self.functional!r}")
        if self.transform not in _TRANSFORMS:
            raise ValueError(f"unknown drift transform {self.transform!r}")

    def lipschitz(self, T: float) -> float:
        return abs(self.coef) * (T if self.functional == "integral" else 1.0)


@dataclass(frozen=True)
class Drift:
    """Affine combination of transformed stopped-path functionals."""

    constant: float = 0.0
    terms: tuple[DriftTerm, ...] = ()

    @classmethod
    def from_dict(cls, d: Mapping | None) -> "Drift":
        d = d or {}
        return cls(
            constant=float(d.get("constant", 0.0)),
            terms=tuple(DriftTerm(**t) for t in d.get("terms", [])),
        )

    def to_dict(self) -> dict:
        return {
            "constant": self.constant,
            "terms": [{"functional": t.functional, "coef": t.coef, "transform": t.transform} for t in self.terms],
        }

    def lipschitz(self, T: float) -> float:
        return sum(t.lipschitz(T) for t in self.terms)

    def bound_at_zero(self) -> float:
        # every transform maps 0 to 0
        return abs(self.constant)

    @property
    def is_zero(self) -> bool:
        return self.constant == 0.0 and all(t.coef == 0.0 for t in self.terms)

    def __call__(self, current, running_sup, integral):
        """Drift from the three stopped-path features (arrays of equal shape)."""
        features = {"terminal_point": current, "sup_norm": running_sup, "integral": integral}
        out = np.full(np.shape(current), self.constant, dtype=float)
        for term in self.terms:
            out = out + term.coef * _TRANSFORMS[term.transform](features[term.functional])
        return out


@dataclass(frozen=True)
class Volatility:
    """Piecewise-constant ``sigma(t)``: ``values[k]`` on ``[times[k], times[k+1])``."""

    times: tuple[float, ...] = (0.0,)
    values: tuple[float, ...] = (0.0,)

    def __post_init__(self):
        if len(self.times) != len(self.values) or not self.times or self.times[0] != 0.0:
            raise ValueError("volatility table needs matching times/values starting at t=0")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ValueError("volatility breakpoints must increase")

    @classmethod
    def constant(cls, value: float) -> "Volatility":
        return cls((0.0,), (float(value),))

    @classmethod
    def from_spec(cls, spec) -> "Volatility":
        if isinstance(spec, Mapping):
            return cls(tuple(map(float, spec["times"])), tuple(map(float, spec["values"])))
        return cls.constant(float(spec))

    def to_spec(self):
        if len(self.values) == 1:
            return self.values[0]
        return {"times": list(self.times), "values": list(self.values)}

    def __call__(self, t):
        idx = np.searchsorted(np.asarray(self.times), t, side="right") - 1
        return np.asarray(self.values)[idx]

    @property
    def bound(self) -> float:
        return max(abs(v) for v in self.values)


@dataclass(frozen=True)
class ForwardModel:
    """Coefficients of the forward equation and their declared constants.

    ``rho[j]`` is the jump coefficient ``rho(t, v_j)`` for atom ``j``
    (time-homogeneous); ``kappa_rho[j]`` dominates it.  Undeclared constants
    are derived from the coefficients.
    """

    x0: float
    measure: JumpMeasure = field(default_factory=JumpMeasure)
    drift: Drift = field(default_factory=Drift)
    sigma: Volatility = field(default_factory=Volatility)
    rho: np.ndarray | None = None
    kappa_rho: np.ndarray | None = None
    K_b: float | None = None
    L_b: float | None = None
    K_sigma: float | None = None

    def __post_init__(self):
        rho = self.measure.marks.copy() if self.rho is None else np.asarray(self.rho, dtype=float)
        if rho.shape != self.measure.marks.shape:
            raise ValueError("rho needs one value per jump atom")
        kappa = np.abs(rho) if self.kappa_rho is None else np.asarray(self.kappa_rho, dtype=float)
        if kappa.shape != rho.shape:
            raise ValueError("kappa_rho needs one value per jump atom")
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "kappa_rho", kappa)

    def lipschitz_b(self, T: float) -> float:
        return self.drift.lipschitz(T) if self.L_b is None else float(self.L_b)

    def bound_b(self) -> float:
        return self.drift.bound_at_zero() if self.K_b is None else float(self.K_b)

    def bound_sigma(self) -> float:
        return self.sigma.bound if self.K_sigma is None else float(self.K_sigma)

    @property
    def kappa_rho_2(self) -> float:
        """``||kappa_rho||_{L^2(nu)}``."""
        return float(np.sqrt((self.kappa_rho**2 * self.measure.intensities).sum()))

    @property
    def kappa_rho_inf(self) -> float:
        return float(self.kappa_rho.max()) if self.kappa_rho.size else 0.0

    def compensator_rate(self) -> float:
        """``sum_j rho(t, v_j) lambda_j``."""
        return float((self.rho * self.measure.intensities).sum())

    def validate(self, T: float, n_pairs: int = 2000, seed: int = 0) -> list[str]:
        """Violations of the forward assumptions, empty if none."""
        problems = []
        ts = np.linspace(0.0, T, 257)
        if np.any(np.abs(self.sigma(ts)) > self.bound_sigma() * (1 + 1e-12)):
            problems.append("|sigma(t)| > K_sigma")
        if np.any(np.abs(self.rho) > self.kappa_rho * (1 + 1e-12)):
            problems.append("|rho(t, v)| > kappa_rho(v)")
        if self.drift.bound_at_zero() > self.bound_b() * (1 + 1e-12):
            problems.append("|b(t, 0)| > K_b")
        if n_pairs:
            rep = verify_drift_lipschitz(self, T, n_pairs, seed)
            if rep["violations"]:
                problems.append(f"drift Lipschitz bound L_b violated on {rep['violations']} sampled pairs")
        return problems


# ---------------------------------------------------------------------------
# column layout of the refined per-path grid


@dataclass(frozen=True)
class _Layout:
    times: np.ndarray  # (n, L)
    kind: np.ndarray  # 0 base, 1 interior jump, 2 padding
    interval: np.ndarray  # base index for base columns, interval index for jump columns
    atom: np.ndarray  # atom firing at the column, -1 if none
    base_index: np.ndarray  # (n, N + 1)


def _layout(noise: NoiseBundle, extra_time: float | None = None, extra_atom: int = -1) -> _Layout:
    grid = noise.grid
    n, N = noise.n_paths, grid.N
    jp, jt, ja = noise.jump_path, noise.jump_time, noise.jump_atom
    if extra_time is not None and extra_time > 0:
        jp = np.concatenate([jp, np.arange(n)])
        jt = np.concatenate([jt, np.full(n, float(extra_time))])
        ja = np.concatenate([ja, np.full(n, int(extra_atom))])
    tol = 1e-13 * max(1.0, grid.T)
    nearest = np.clip(np.searchsorted(grid.times, jt), 0, N)
    on_grid = np.abs(grid.times[nearest] - jt) <= tol
    lower = np.clip(nearest - 1, 0, N)
    on_grid_lo = np.abs(grid.times[lower] - jt) <= tol
    nearest = np.where(on_grid_lo & ~on_grid, lower, nearest)
    on_grid = on_grid | on_grid_lo

    base_atom = np.full((n, N + 1), -1, dtype=np.int64)
    if on_grid.any():
        p, i = jp[on_grid], nearest[on_grid]
        key = p * (N + 1) + i
        if np.unique(key).size != key.size:
            raise ValueError("two jumps coincide on the same base instant of one path")
        base_atom[p, i] = ja[on_grid]

    ip, it, ia = jp[~on_grid], jt[~on_grid], ja[~on_grid]
    per_path = np.bincount(ip, minlength=n)
    L = N + 1 + (int(per_path.max()) if per_path.size else 0)

    all_path = np.concatenate([np.repeat(np.arange(n), N + 1), ip])
    all_time = np.concatenate([np.tile(grid.times, n), it])
    all_kind = np.concatenate([np.zeros(n * (N + 1), dtype=np.int8), np.ones(ip.size, dtype=np.int8)])
    all_int = np.concatenate([np.tile(np.arange(N + 1), n), grid.interval_of(it)])
    all_atom = np.concatenate([base_atom.ravel(), ia])
    order = np.lexsort((all_kind, all_time, all_path))
    all_path, all_time = all_path[order], all_time[order]
    all_kind, all_int, all_atom = all_kind[order], all_int[order], all_atom[order]
    starts = np.concatenate([[0], np.cumsum(per_path + N + 1)[:-1]])
    pos = np.arange(all_path.size) - starts[all_path]

    times = np.full((n, L), grid.T)
    kind = np.full((n, L), 2, dtype=np.int8)
    interval = np.full((n, L), N, dtype=np.int64)
    atom = np.full((n, L), -1, dtype=np.int64)
    times[all_path, pos] = all_time
    kind[all_path, pos] = all_kind
    interval[all_path, pos] = all_int
    atom[all_path, pos] = all_atom
    base_index = np.empty((n, N + 1), dtype=np.int64)
    is_base = all_kind == 0
    base_index[all_path[is_base], all_int[is_base]] = pos[is_base]
    return _Layout(times, kind, interval, atom, base_index)


def euler_solve(
    model: ForwardModel,
    noise: NoiseBundle,
    *,
    extra_jump: tuple[float, int] | None = None,
    with_martingale: bool = False,
):
    """Explicit Euler paths of the forward equation on ``noise``.

    Args:
        model: forward coefficients.
        noise: driving noise; its base grid is the time grid of the scheme.
        extra_jump: ``(s, j)`` adds a jump of atom ``j`` at grid instant ``s``
            to every path (the path shift behind jump-direction derivatives).
        with_martingale: also return the skeleton of the martingale part
            ``int sigma dW + int rho dN~``.

    Returns:
        The path skeleton, or ``(paths, martingale)`` when requested.

    Raises:
        FloatingPointError: a state became non-finite; the message names the
            path and the time.
    """
    if noise.measure != model.measure:
        raise ValueError("noise and model use different jump measures")
    grid = noise.grid
    n, N, T = noise.n_paths, grid.N, grid.T
    s_extra, a_extra = (None, -1) if extra_jump is None else (float(extra_jump[0]), int(extra_jump[1]))
    if s_extra is not None:
        grid.index_of(s_extra)
        if not 0 <= a_extra < model.measure.n_atoms:
            raise ValueError(f"atom index {a_extra} out of range")
    lay = _layout(noise, s_extra, a_extra)
    L = lay.times.shape[1]
    dt = grid.steps
    t_left = grid.times[:-1]
    sig = model.sigma(t_left)
    comp = model.compensator_rate() * dt
    dW = noise.brownian_increments
    rho = np.append(model.rho, 0.0)  # index -1 -> no jump
    rows = np.arange(n)

    v = np.full(n, float(model.x0))
    if s_extra == 0.0:
        v = v + model.rho[a_extra]
    values = np.empty((n, L))
    jumps = np.zeros((n, L))
    values[:, 0] = v
    mart = np.zeros((n, L)) if with_martingale else None
    m = np.zeros(n)
    run_sup = np.abs(v)
    integral = np.zeros(n)
    t_prev = np.zeros(n)

    def pending(i, cur):
        # increment over base interval i, fixed at its left endpoint t_i
        ic = np.minimum(i, N - 1)
        feat_int = integral + (T - grid.times[ic]) * cur
        b = model.drift(cur, run_sup, feat_int)
        noise_part = sig[ic] * dW[rows, ic] - comp[ic]
        return b * dt[ic] + noise_part, noise_part

    inc, minc = pending(np.zeros(n, dtype=np.int64), v)
    for c in range(1, L):
        kind = lay.kind[:, c]
        t = lay.times[:, c]
        integral = integral + v * (t - t_prev)
        js = rho[lay.atom[:, c]]
        is_base = kind == 0
        new = v + js + np.where(is_base, inc, 0.0)
        if not np.all(np.isfinite(new)):
            bad = int(np.flatnonzero(~np.isfinite(new))[0])
            raise FloatingPointError(f"non-finite forward state on path {bad} at t={t[bad]:.6g} (column {c})")
        run_sup = np.maximum(run_sup, np.abs(new))
        if with_martingale:
            m = m + js + np.where(is_base, minc, 0.0)
            mart[:, c] = m
        if is_base.any():
            i = lay.interval[:, c]
            new_inc, new_minc = pending(i, new)
            inc = np.where(is_base, new_inc, inc)
            minc = np.where(is_base, new_minc, minc)
        values[:, c] = new
        jumps[:, c] = js
        v = new
        t_prev = t
    paths = PathSkeleton(lay.times, values, jumps, grid, lay.base_index)
    if with_martingale:
        return paths, PathSkeleton(lay.times, mart, jumps, grid, lay.base_index)
    return paths


def drift_on_paths(drift: Drift, paths: PathSkeleton) -> np.ndarray:
    """``b(t_i, x^{t_i})`` at every base instant, ``(n, N + 1)``."""
    feats = {
        name: running_functional(PathFunctional(name, {"m": {"lebesgue": 1.0}} if name == "integral" else {}), paths)
        for name in _DRIFT_FUNCTIONALS
    }
    return drift(feats["terminal_point"], feats["sup_norm"], feats["integral"])


def verify_drift_lipschitz(model: ForwardModel, T: float, n_pairs: int, seed: int) -> dict:
    """Sample path pairs and check ``|b(t,x) - b(t,x')| <= L_b |x^t - x'^t|_inf``."""
    x, y = random_path_pairs(n_pairs, seed, T=T, N=16)
    bx = drift_on_paths(model.drift, x)
    by = drift_on_paths(model.drift, y)
    # sup distance of the stopped paths grows with t
    run_dist = np.maximum.accumulate(np.abs(x.values - y.values), axis=1)
    run_dist = np.take_along_axis(run_dist, x.base_index, axis=1)
    lhs = np.abs(bx - by)
    rhs = model.lipschitz_b(T) * run_dist
    viol = lhs > rhs * (1 + 1e-9) + 1e-12
    return {"n_pairs": n_pairs, "violations": int(viol.any(axis=1).sum())}


# ---------------------------------------------------------------------------
# exponential moments


@dataclass
class ExpMomentReport:
    """Monte Carlo estimate of ``E exp(c S)`` computed in log space.

    Attributes:
        estimate: the mean, ``inf`` when it overflows double range.
        log_estimate: log of the mean (always finite).
        overflow: the estimate exceeded double range.
        standard_error: MC standard error of ``estimate``.
        tail_share: fraction of the sum contributed by the top 1% of paths.
        refinement_ratio: estimate on the refined paths over this estimate.
    """

    c: float
    estimate: float
    log_estimate: float
    overflow: bool
    standard_error: float
    tail_share: float
    refinement_ratio: float | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _log_mean_exp(s: np.ndarray):
    top = s.max()
    w = np.exp(s - top)
    mean_w = w.mean()
    log_mean = top + math.log(mean_w)
    rel_se = w.std(ddof=1) / mean_w / math.sqrt(s.size) if s.size > 1 else math.inf
    k = max(1, math.ceil(0.01 * s.size))
    tail = np.sort(w)[-k:].sum() / w.sum()
    return log_mean, rel_se, tail


def exp_moment_estimate(
    paths: PathSkeleton,
    c: float,
    refined: PathSkeleton | None = None,
    statistic: str = "sup",
) -> ExpMomentReport:
    """Estimate ``E exp(c |X|_inf)`` (or ``E exp(c X_T)`` with ``statistic='terminal'``).

    ``refined`` should be the same Lévy paths on a finer grid; the report then
    carries the ratio of the two estimates as a mesh-stability diagnostic.
    """
    if c <= 0:
        raise ValueError("c must be positive")

    def stat(p):
        if statistic == "sup":
            return np.abs(p.values).max(axis=1)
        if statistic == "terminal":
            return p.values[:, -1]
        raise ValueError(f"unknown statistic {statistic!r}")

    log_mean, rel_se, tail = _log_mean_exp(c * stat(paths))
    overflow = log_mean > math.log(np.finfo(float).max)
    est = math.inf if overflow else math.exp(log_mean)
    ratio = None
    if refined is not None:
        log_ref, _, _ = _log_mean_exp(c * stat(refined))
        ratio = math.exp(log_ref - log_mean)
    return ExpMomentReport(float(c), est, log_mean, bool(overflow), est * rel_se, tail, ratio)


# ---------------------------------------------------------------------------
# jump-direction derivative of the forward path


@dataclass
class ShiftResult:
    """Base and shifted forward paths and ``D_{s, v_j} X`` on the base grid."""

    s: float
    atom: int
    base: PathSkeleton
    shifted: PathSkeleton
    derivative: np.ndarray  # (n, N + 1)


def shifted_solve(model: ForwardModel, noise: NoiseBundle, s: float, atom: int, base: PathSkeleton | None = None) -> ShiftResult:
    """Re-run Euler on the same noise with one extra jump of atom ``atom`` at ``s``.

    The difference of the two solutions at the base instants is the
    jump-direction Malliavin derivative of the discretized forward path; it is
    zero before ``s``.
    """
    noise.grid.index_of(s)
    base = euler_solve(model, noise) if base is None else base
    shifted = euler_solve(model, noise, extra_jump=(s, atom))
    d = shifted.at_base() - base.at_base()
    d[:, noise.grid.times < s] = 0.0
    return ShiftResult(float(s), int(atom), base, shifted, d)
