"""Càdlàg path skeletons, stopped paths, sup-norm and J1 utilities, functional catalog.

A :class:`PathSkeleton` stores a batch of piecewise-constant right-continuous
paths.  Each row has its own refined time axis: the common base grid plus that
path's jump times, padded at the end with zero-length columns at ``T``.  The
jump ledger is kept as an array of jump sizes aligned with the columns (zero
where no jump is recorded).  A single path is a batch of one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np

from .noise import TimeGrid

__all__ = [
    "PathSkeleton",
    "LipschitzProfile",
    "PathFunctional",
    "LipschitzReport",
    "stopped_path",
    "sup_norm",
    "sup_distance",
    "shift_path",
    "value_at",
    "j1_upper_bound",
    "evaluate_functional",
    "running_functional",
    "verify_lipschitz_profile",
    "random_path_pairs",
    "FUNCTIONAL_KINDS",
]

_TIME_TOL = 1e-13


@dataclass(frozen=True, eq=False)
class PathSkeleton:
    """Batch of càdlàg skeletons on per-row refined grids.

    Attributes:
        times: ``(n, L)`` nondecreasing instants per row; trailing columns
            repeat ``T`` as padding.
        values: ``(n, L)`` path value at each column (right-continuous).
        jumps: ``(n, L)`` recorded jump size at each column, 0 if none.
        grid: base grid shared by all rows.
        base_index: ``(n, N + 1)`` column holding each base instant.
    """

    times: np.ndarray
    values: np.ndarray
    jumps: np.ndarray
    grid: TimeGrid
    base_index: np.ndarray

    def __post_init__(self):
        if not (self.times.shape == self.values.shape == self.jumps.shape):
            raise ValueError("times, values and jumps must share a shape")
        if self.base_index.shape != (self.times.shape[0], self.grid.N + 1):
            raise ValueError("base_index must be (n_paths, N + 1)")

    @classmethod
    def from_values(cls, times, values, jump_times=(), grid: TimeGrid | None = None) -> "PathSkeleton":
        """Single deterministic path; recorded jumps are the value steps at ``jump_times``.

        ``grid`` defaults to ``times`` itself, so every column is a base instant.
        """
        times = np.asarray(times, dtype=float)
        values = np.asarray(values, dtype=float)
        if times.shape != values.shape or times.ndim != 1:
            raise ValueError("times and values must be 1-d and of equal length")
        if not np.all(np.isfinite(values)):
            raise ValueError("path values must be finite")
        grid = grid or TimeGrid(times)
        jumps = np.zeros_like(values)
        for t in jump_times:
            c = np.flatnonzero(np.abs(times - t) <= _TIME_TOL * max(1.0, times[-1]))
            if c.size != 1 or c[0] == 0:
                raise ValueError(f"jump time {t} is not an interior grid instant")
            jumps[c[0]] = values[c[0]] - values[c[0] - 1]
        base_index = np.searchsorted(times, grid.times)
        if not np.allclose(times[np.minimum(base_index, times.size - 1)], grid.times):
            raise ValueError("path columns must contain every base grid instant")
        return cls(times[None, :], values[None, :], jumps[None, :], grid, base_index[None, :])

    @classmethod
    def constant(cls, grid: TimeGrid, value: float, n_paths: int = 1) -> "PathSkeleton":
        t = np.broadcast_to(grid.times, (n_paths, grid.N + 1)).copy()
        v = np.full_like(t, float(value))
        idx = np.broadcast_to(np.arange(grid.N + 1), (n_paths, grid.N + 1)).copy()
        return cls(t, v, np.zeros_like(t), grid, idx)

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    @property
    def T(self) -> float:
        return self.grid.T

    def at_base(self) -> np.ndarray:
        """Values at the base grid instants, ``(n, N + 1)``."""
        return np.take_along_axis(self.values, self.base_index, axis=1)

    @property
    def terminal(self) -> np.ndarray:
        return self.values[:, -1]

    def row(self, k: int) -> "PathSkeleton":
        sl = slice(k, k + 1)
        return PathSkeleton(self.times[sl], self.values[sl], self.jumps[sl], self.grid, self.base_index[sl])

    def with_values(self, values: np.ndarray, jumps: np.ndarray | None = None) -> "PathSkeleton":
        """Same time layout, new values (and ledger if given)."""
        return PathSkeleton(
            self.times, values, self.jumps if jumps is None else jumps, self.grid, self.base_index
        )


def _check_instant(p: PathSkeleton, t: float) -> float:
    t = float(t)
    if not (-_TIME_TOL <= t <= p.T * (1 + _TIME_TOL)):
        raise ValueError(f"instant {t} outside [0, {p.T}]")
    return min(max(t, 0.0), p.T)


def _column_at(p: PathSkeleton, t: float) -> np.ndarray:
    """Last column per row with time <= t."""
    tol = _TIME_TOL * max(1.0, p.T)
    return (p.times <= t + tol).sum(axis=1) - 1


def value_at(p: PathSkeleton, t: float) -> np.ndarray:
    """``x_t`` per row."""
    t = _check_instant(p, t)
    c = _column_at(p, t)
    return p.values[np.arange(p.n_paths), c]


def stopped_path(p: PathSkeleton, t: float) -> PathSkeleton:
    """The path frozen after ``t``: ``x^t_s = x_{min(s, t)}``, same columns."""
    t = _check_instant(p, t)
    c = _column_at(p, t)
    after = np.arange(p.times.shape[1])[None, :] > c[:, None]
    vt = p.values[np.arange(p.n_paths), c]
    values = np.where(after, vt[:, None], p.values)
    jumps = np.where(after, 0.0, p.jumps)
    return p.with_values(values, jumps)


def sup_norm(p: PathSkeleton) -> np.ndarray:
    """``sup_t |x_t|`` per row.

    Left limits at jump columns are the previous column's value, so the
    maximum over columns covers them.
    """
    return np.abs(p.values).max(axis=1)


def _merge_eval(tx, vx, ty, vy):
    """Values of two piecewise-constant paths on the union of their breakpoints."""
    events = np.union1d(tx, ty)
    ix = np.searchsorted(tx, events, side="right") - 1
    iy = np.searchsorted(ty, events, side="right") - 1
    return vx[ix], vy[iy]


def sup_distance(x: PathSkeleton, y: PathSkeleton) -> np.ndarray:
    """``|x - y|_inf`` per row, exact for piecewise-constant skeletons."""
    if x.n_paths != y.n_paths:
        raise ValueError("path batches differ in size")
    if x.times.shape == y.times.shape and np.array_equal(x.times, y.times):
        return np.abs(x.values - y.values).max(axis=1)
    out = np.empty(x.n_paths)
    for k in range(x.n_paths):
        a, b = _merge_eval(x.times[k], x.values[k], y.times[k], y.values[k])
        out[k] = np.abs(a - b).max()
    return out


def shift_path(p: PathSkeleton, t: float, x: float | np.ndarray) -> PathSkeleton:
    """``p + x * 1_[t, T]`` with the shift recorded as a jump at ``t``.

    A shift at ``t = 0`` moves the whole path and records no jump, matching the
    convention that a jump at time zero is not a jump.
    """
    t = _check_instant(p, t)
    x = np.broadcast_to(np.asarray(x, dtype=float), (p.n_paths,))
    n, L = p.times.shape
    rows = np.arange(n)
    if t == 0.0:
        return p.with_values(p.values + x[:, None])
    tol = _TIME_TOL * max(1.0, p.T)
    k = (p.times < t - tol).sum(axis=1)  # first column with time >= t
    kc = np.minimum(k, L - 1)
    has = np.abs(p.times[rows, kc] - t) <= tol
    cols = np.arange(L + 1)[None, :]
    # source column of each new column; rows without a column at t get one inserted at k
    src = np.where(has[:, None], np.minimum(cols, L - 1), np.where(cols > k[:, None], cols - 1, cols))
    src = np.minimum(src, L - 1)
    times = np.take_along_axis(p.times, src, axis=1)
    values = np.take_along_axis(p.values, src, axis=1)
    jumps = np.take_along_axis(p.jumps, src, axis=1)
    new_col = ~has[:, None] & (cols == k[:, None])
    times = np.where(new_col, t, times)
    # inserted column: piecewise constant, so it carries the previous value before shifting
    prev = np.take_along_axis(p.values, np.maximum(k - 1, 0)[:, None], axis=1)
    values = np.where(new_col, prev, values)
    jumps = np.where(new_col, 0.0, jumps)
    pad = has[:, None] & (cols == L)
    jumps = np.where(pad, 0.0, jumps)
    at_or_after = cols >= k[:, None]
    values = values + np.where(at_or_after, x[:, None], 0.0)
    jumps = jumps + np.where(cols == k[:, None], x[:, None], 0.0)
    base_index = p.base_index + np.where(~has[:, None] & (p.base_index >= k[:, None]), 1, 0)
    return PathSkeleton(times, values, jumps, p.grid, base_index)


# ---------------------------------------------------------------------------
# J1 metric


def _single(p: PathSkeleton):
    if p.n_paths != 1:
        raise ValueError("expected a single path")
    return p.times[0], p.values[0], p.jumps[0]


def _j1_cost(tx, vx, ty, vy, u_knots, l_knots, T, max_log_slope):
    slopes = np.diff(l_knots) / np.diff(u_knots)
    if np.any(slopes <= 0):
        return math.inf
    distortion = float(np.abs(np.log(slopes)).max()) if slopes.size else 0.0
    if distortion > max_log_slope:
        return math.inf
    # x o lambda jumps where lambda(u) hits a breakpoint of x; the inverse
    # interpolation is exact at the knots, so matched jump times coincide exactly
    ux = np.interp(tx, l_knots, u_knots)
    events = np.union1d(ux, ty)
    ix = np.searchsorted(ux, events, side="right") - 1
    iy = np.searchsorted(ty, events, side="right") - 1
    return float(np.abs(vx[ix] - vy[iy]).max()) + distortion


def j1_upper_bound(x: PathSkeleton, y: PathSkeleton, budget: int = 64, max_log_slope: float = 8.0) -> float:
    """Certified upper bound on the Skorokhod J1 distance of two single paths.

    Searches piecewise-linear increasing bijections whose knots send jump
    times of ``y`` to jump times of ``x`` and returns the smallest
    ``|x o lambda - y|_inf + sup |log slope|`` found.  The identity is always a
    candidate, so the result never exceeds ``|x - y|_inf``.
    """
    tx, vx, jx = _single(x)
    ty, vy, jy = _single(y)
    T = x.T
    if abs(T - y.T) > _TIME_TOL * max(1.0, T):
        raise ValueError("paths live on different horizons")
    ident = np.array([0.0, T])
    best = _j1_cost(tx, vx, ty, vy, ident, ident, T, max_log_slope)
    a_idx = np.flatnonzero((jx != 0) & (tx > 0) & (tx < T))
    b_idx = np.flatnonzero((jy != 0) & (ty > 0) & (ty < T))
    if not a_idx.size or not b_idx.size:
        return best
    a, b = tx[a_idx], ty[b_idx]
    da, db = jx[a_idx], jy[b_idx]
    # candidate pairs (y-jump i -> x-jump j), cheapest first
    ii, jj = np.meshgrid(np.arange(b.size), np.arange(a.size), indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()
    score = np.abs(a[jj] - b[ii]) + np.abs(da[jj] - db[ii])
    order = np.lexsort((jj, ii, score))
    pairs = list(zip(ii[order], jj[order]))

    seen = set()
    evaluated = 0
    for start in range(len(pairs)):
        if evaluated >= budget:
            break
        chosen = [pairs[start]]
        for cand in pairs:
            if all((cand[0] - c[0]) * (cand[1] - c[1]) > 0 for c in chosen):
                chosen.append(cand)
        for matching in (chosen[:1], chosen):
            key = tuple(sorted(matching))
            if key in seen:
                continue
            seen.add(key)
            evaluated += 1
            u = np.concatenate([[0.0], b[[m[0] for m in key]], [T]])
            lam = np.concatenate([[0.0], a[[m[1] for m in key]], [T]])
            best = min(best, _j1_cost(tx, vx, ty, vy, u, lam, T, max_log_slope))
    return best


# ---------------------------------------------------------------------------
# functional catalog

FUNCTIONAL_KINDS = (
    "terminal_point",
    "sup_norm",
    "first_jump",
    "max_jump",
    "jump_at",
    "integral",
    "point_eval",
    "linear",
    "composite",
)

# scalar maps usable inside composite functionals: (function, Lipschitz constant or None)
_SCALAR_MAPS: dict[str, Callable[..., Any]] = {
    "identity": lambda x: x,
    "sin": np.sin,
    "tanh": np.tanh,
    "atan": np.arctan,
    "abs": np.abs,
}
_SCALAR_LIP = {"identity": 1.0, "sin": 1.0, "tanh": 1.0, "atan": 1.0, "abs": 1.0}


def _scalar_map(name: str, power: float | None = None):
    if name == "signed_power":
        q = 1.0 + float(power or 0.0)
        return lambda x: np.sign(x) * np.abs(x) ** q
    try:
        return _SCALAR_MAPS[name]
    except KeyError:
        raise ValueError(f"unknown scalar map {name!r}") from None


@dataclass(frozen=True)
class LipschitzProfile:
    """Constants in ``|g(x) - g(x')| <= (c + alpha/2 (|x|^r + |x'|^r)) |x - x'|_inf``."""

    c: float = 1.0
    alpha: float = 0.0
    r: float = 0.0

    def bound(self, norm_x, norm_y, dist):
        return (self.c + 0.5 * self.alpha * (norm_x**self.r + norm_y**self.r)) * dist

    def to_dict(self) -> dict:
        return {"c": self.c, "alpha": self.alpha, "r": self.r}


def _measure(params: Mapping | None):
    """``(lebesgue weight, atom times, atom weights)`` of a finite signed measure."""
    params = params or {"lebesgue": 1.0}
    leb = float(params.get("lebesgue", 0.0))
    atoms = np.asarray(params.get("atoms", []), dtype=float).reshape(-1, 2)
    return leb, atoms[:, 0], atoms[:, 1]


def _measure_mass(params, T):
    leb, _, w = _measure(params)
    return abs(leb) * T + np.abs(w).sum()


@dataclass(frozen=True)
class PathFunctional:
    """A catalog functional ``g: D[0, T] -> R`` with its declared Lipschitz profile.

    Parameters by kind:
        jump_at: ``s``.  point_eval: ``t``.
        integral: ``m`` = ``{"lebesgue": w, "atoms": [[t, w], ...]}``.
        linear: ``m`` and ``M`` = ``[[t, weight], ...]`` (jump weights).
        composite: ``outer``, ``inner`` (scalar map names), ``m``, optional
            ``inner_power`` / ``outer_power`` for ``signed_power``.
    """

    kind: str
    params: Mapping[str, Any] = field(default_factory=dict)
    lipschitz: LipschitzProfile | None = None

    def __post_init__(self):
        if self.kind not in FUNCTIONAL_KINDS:
            raise ValueError(f"unknown functional kind {self.kind!r}")
        if self.kind == "jump_at" and "s" not in self.params:
            raise ValueError("jump_at needs parameter 's'")
        if self.kind == "point_eval" and "t" not in self.params:
            raise ValueError("point_eval needs parameter 't'")
        if self.kind == "composite":
            _scalar_map(self.params.get("outer", "identity"), self.params.get("outer_power"))
            _scalar_map(self.params.get("inner", "identity"), self.params.get("inner_power"))

    @classmethod
    def from_dict(cls, d: Mapping) -> "PathFunctional":
        lip = d.get("lipschitz")
        return cls(
            kind=d["kind"],
            params=dict(d.get("params", {})),
            lipschitz=LipschitzProfile(**lip) if lip else None,
        )

    def to_dict(self, T: float = 1.0) -> dict:
        return {"kind": self.kind, "params": dict(self.params), "lipschitz": self.profile(T).to_dict()}

    def profile(self, T: float = 1.0) -> LipschitzProfile:
        """Declared profile, or the catalog default for horizon ``T``."""
        if self.lipschitz is not None:
            return self.lipschitz
        kind, prm = self.kind, self.params
        if kind in ("terminal_point", "sup_norm", "point_eval"):
            return LipschitzProfile(1.0, 0.0, 0.0)
        if kind in ("first_jump", "max_jump", "jump_at"):
            return LipschitzProfile(2.0, 0.0, 0.0)
        if kind == "integral":
            return LipschitzProfile(_measure_mass(prm.get("m"), T), 0.0, 0.0)
        if kind == "linear":
            jw = np.asarray(prm.get("M", []), dtype=float).reshape(-1, 2)[:, 1]
            return LipschitzProfile(_measure_mass(prm.get("m"), T) + 2 * np.abs(jw).sum(), 0.0, 0.0)
        # composite
        mass = _measure_mass(prm.get("m"), T)
        outer = prm.get("outer", "identity")
        inner = prm.get("inner", "identity")
        if outer == "signed_power":
            raise ValueError("signed_power is only supported as the inner map; declare a profile")
        l1 = _SCALAR_LIP[outer]
        if inner == "signed_power":
            r = float(prm.get("inner_power", 0.0))
            return LipschitzProfile(0.0, 2.0 * (1.0 + r) * l1 * mass, r)
        return LipschitzProfile(l1 * _SCALAR_LIP[inner] * mass, 0.0, 0.0)


def _integrate(p: PathSkeleton, m, values=None) -> np.ndarray:
    values = p.values if values is None else values
    leb, at, aw = _measure(m)
    out = np.zeros(p.n_paths)
    if leb:
        dt = np.diff(p.times, axis=1)
        out += leb * (values[:, :-1] * dt).sum(axis=1)
    for t, w in zip(at, aw):
        c = _column_at(p, _check_instant(p, t))
        out += w * values[np.arange(p.n_paths), c]
    return out


def _jump_at(p: PathSkeleton, s: float) -> np.ndarray:
    tol = _TIME_TOL * max(1.0, p.T)
    hit = np.abs(p.times - s) <= tol
    return np.where(hit, p.jumps, 0.0).sum(axis=1)


def evaluate_functional(g: PathFunctional, p: PathSkeleton) -> np.ndarray:
    """Value of ``g`` on every row of ``p``, shape ``(n_paths,)``."""
    kind, prm = g.kind, g.params
    rows = np.arange(p.n_paths)
    if kind == "terminal_point":
        return p.values[:, -1].copy()
    if kind == "sup_norm":
        return sup_norm(p)
    if kind == "first_jump":
        has = (p.jumps != 0) & (p.times > 0)
        first = has.argmax(axis=1)
        return np.where(has.any(axis=1), p.jumps[rows, first], 0.0)
    if kind == "max_jump":
        return np.abs(p.jumps).max(axis=1)
    if kind == "jump_at":
        return _jump_at(p, _check_instant(p, prm["s"]))
    if kind == "point_eval":
        return value_at(p, prm["t"])
    if kind == "integral":
        return _integrate(p, prm.get("m"))
    if kind == "linear":
        out = _integrate(p, prm.get("m"))
        for t, w in np.asarray(prm.get("M", []), dtype=float).reshape(-1, 2):
            out += w * _jump_at(p, t)
        return out
    inner = _scalar_map(prm.get("inner", "identity"), prm.get("inner_power"))
    outer = _scalar_map(prm.get("outer", "identity"), prm.get("outer_power"))
    return outer(_integrate(p, prm.get("m"), inner(p.values)))


def running_functional(g: PathFunctional, p: PathSkeleton) -> np.ndarray:
    """``g`` evaluated on the stopped paths ``x^{t_i}`` for every base instant.

    Returns an ``(n_paths, N + 1)`` array.  Common kinds use cumulative
    formulas; the rest stop the path at each instant explicitly.
    """
    kind, prm = g.kind, g.params
    base = p.at_base()
    if kind == "terminal_point":
        return base
    if kind == "sup_norm":
        run = np.maximum.accumulate(np.abs(p.values), axis=1)
        return np.take_along_axis(run, p.base_index, axis=1)
    if kind == "integral" or (kind == "composite" and not _measure(prm.get("m"))[1].size):
        leb, at, _ = _measure(prm.get("m"))
        if not at.size:
            vals = p.values
            if kind == "composite":
                vals = _scalar_map(prm.get("inner", "identity"), prm.get("inner_power"))(vals)
            dt = np.diff(p.times, axis=1)
            cum = np.concatenate([np.zeros((p.n_paths, 1)), np.cumsum(vals[:, :-1] * dt, axis=1)], axis=1)
            cum_b = np.take_along_axis(cum, p.base_index, axis=1)
            cur = np.take_along_axis(vals, p.base_index, axis=1)
            out = leb * (cum_b + (p.T - p.grid.times)[None, :] * cur)
            if kind == "composite":
                out = _scalar_map(prm.get("outer", "identity"), prm.get("outer_power"))(out)
            return out
    out = np.empty_like(base)
    for i, t in enumerate(p.grid.times):
        out[:, i] = evaluate_functional(g, stopped_path(p, t))
    return out


# ---------------------------------------------------------------------------
# empirical Lipschitz checks


@dataclass
class LipschitzReport:
    n_pairs: int
    violations: int
    max_ratio: float
    worst_pair: int

    @property
    def passed(self) -> bool:
        return self.violations == 0


def random_path_pairs(
    n_pairs: int,
    seed: int,
    T: float = 1.0,
    N: int = 32,
    special: tuple[float, ...] = (),
    n_jumps: int = 3,
) -> tuple[PathSkeleton, PathSkeleton]:
    """Random pairs of skeletons sharing a grid and a set of jump columns.

    Half the pairs are independent; the other half are small perturbations of
    each other, which is where local Lipschitz bounds are tight.  Recorded
    jumps equal the value steps at the jump columns, so the ledger is
    consistent with the values.
    """
    rng = np.random.default_rng(seed)
    special = tuple(s for s in special if 0 < s < T)
    grid = TimeGrid(np.unique(np.concatenate([np.linspace(0, T, N + 1), special])))
    L = grid.N + 1
    jump_cols = {int(np.searchsorted(grid.times, s)) for s in special}
    jump_cols |= set(rng.choice(np.arange(1, L), size=min(n_jumps, L - 1), replace=False).tolist())
    jump_cols = np.array(sorted(jump_cols))

    def walk(scale, with_jumps):
        v = rng.standard_normal((n_pairs, L)) * scale[:, None] / math.sqrt(L)
        v[:, 0] = rng.standard_normal(n_pairs) * scale
        v = np.cumsum(v, axis=1)
        if with_jumps:
            for c in jump_cols:
                v[:, c:] += (rng.standard_normal(n_pairs) * scale)[:, None]
        return v

    scale = np.exp(rng.uniform(np.log(0.01), np.log(10.0), n_pairs))
    x = walk(scale, True)
    eps = np.exp(rng.uniform(np.log(1e-4), np.log(1.0), n_pairs)) * scale
    y_near = x + walk(eps, False)
    y_far = walk(scale, True)
    near = rng.random(n_pairs) < 0.5
    y = np.where(near[:, None], y_near, y_far)
    times = np.broadcast_to(grid.times, (n_pairs, L)).copy()
    base_index = np.broadcast_to(np.arange(L), (n_pairs, L)).copy()

    def ledger(v):
        j = np.zeros_like(v)
        j[:, jump_cols] = v[:, jump_cols] - v[:, jump_cols - 1]
        return j

    return (
        PathSkeleton(times, x, ledger(x), grid, base_index),
        PathSkeleton(times.copy(), y, ledger(y), grid, base_index.copy()),
    )


def verify_lipschitz_profile(
    g: PathFunctional,
    n_pairs: int,
    seed: int,
    T: float = 1.0,
    N: int = 32,
    rtol: float = 1e-9,
) -> LipschitzReport:
    """Check the declared local-Lipschitz inequality of ``g`` on random path pairs."""
    if n_pairs < 1:
        raise ValueError("n_pairs must be at least 1")
    special = tuple(float(g.params[k]) for k in ("s", "t") if k in g.params)
    x, y = random_path_pairs(n_pairs, seed, T=T, N=N, special=special)
    prof = g.profile(T)
    lhs = np.abs(evaluate_functional(g, x) - evaluate_functional(g, y))
    rhs = prof.bound(sup_norm(x), sup_norm(y), sup_distance(x, y))
    slack = rtol * (1.0 + np.abs(evaluate_functional(g, x)) + np.abs(evaluate_functional(g, y)))
    viol = lhs > rhs + slack
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(rhs > 0, lhs / rhs, np.where(lhs > slack, np.inf, 0.0))
    worst = int(np.argmax(ratio))
    return LipschitzReport(n_pairs, int(viol.sum()), float(ratio[worst]), worst)
