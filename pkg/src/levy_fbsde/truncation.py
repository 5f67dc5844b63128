"""Smooth cutoff ``b_M`` and the truncated BSDE data ``(g^M, f^M, H^M)``.

``b_M`` is the odd function whose derivative is 1 on ``[0, M-1]``, falls
linearly to 0 on ``[M-1, M+1]`` and vanishes beyond.  On the ramp

    b_M(x) = x - (x - (M - 1))**2 / 4,

so ``b_M(M + 1) = M`` and ``b_M(M) = M - 1/4``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Mapping

import numpy as np

from .noise import JumpMeasure
from .paths import (
    PathFunctional,
    PathSkeleton,
    evaluate_functional,
    random_path_pairs,
    running_functional,
    sup_distance,
    sup_norm,
)

__all__ = [
    "TruncationLevel",
    "DriverParams",
    "DriverSpec",
    "TruncatedData",
    "smooth_truncate",
    "smooth_truncate_derivative",
    "truncate_path",
    "truncated_data",
    "h_integral",
]


@dataclass(frozen=True)
class TruncationLevel:
    M: float

    def __post_init__(self):
        if not np.isfinite(self.M) or self.M <= 1:
            raise ValueError(f"truncation level must be finite and > 1, got {self.M}")

    def __float__(self):
        return float(self.M)


def _level(M) -> float:
    return float(M.M if isinstance(M, TruncationLevel) else TruncationLevel(float(M)).M)


def smooth_truncate(M, x):
    """``b_M(x)``: identity on ``[-(M-1), M-1]``, ``+-M`` beyond ``M+1``, C^1 in between."""
    M = _level(M)
    x = np.asarray(x, dtype=float)
    a = np.abs(x)
    ramp = a - (a - (M - 1.0)) ** 2 / 4.0
    y = np.where(a <= M - 1.0, a, np.where(a >= M + 1.0, M, ramp))
    return np.sign(x) * y


def smooth_truncate_derivative(M, x):
    M = _level(M)
    a = np.abs(np.asarray(x, dtype=float))
    return np.clip(1.0 - (a - (M - 1.0)) / 2.0, 0.0, 1.0)


def truncate_path(M, p: PathSkeleton) -> PathSkeleton:
    """Pointwise ``b_M`` of a skeleton; recorded jumps become ``b_M(x_t) - b_M(x_{t-})``."""
    vals = smooth_truncate(M, p.values)
    left = smooth_truncate(M, p.values - p.jumps)
    jumps = np.where(p.jumps != 0, vals - left, 0.0)
    return p.with_values(vals, jumps)


@dataclass(frozen=True)
class DriverParams:
    """Locality constants of the terminal condition and the generator."""

    c: float = 1.0
    ell: float = 1.0
    r: float = 0.0
    alpha: float = 0.0
    beta: float = 0.0
    gamma: float = 0.0
    L_fy: float = 0.0
    m1: float = 0.0
    m2: float = 0.0
    k_f: float = 0.0

    @classmethod
    def from_dict(cls, d: Mapping | None) -> "DriverParams":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown driver parameters {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def violations(self) -> list[str]:
        """Every violated structural inequality, named."""
        out = []
        if self.c <= 0:
            out.append("c <= 0")
        if self.ell < 1:
            out.append("ell < 1")
        if self.r < 0:
            out.append("r < 0")
        if self.ell > 0 and self.r > 1.0 / (2.0 * self.ell) + 1e-15:
            out.append(f"r > 1/(2*ell) = {1.0 / (2.0 * self.ell):g}")
        for name in ("alpha", "beta", "gamma", "L_fy", "m1", "m2", "k_f"):
            if getattr(self, name) < 0:
                out.append(f"{name} < 0")
        if self.m1 + self.m1 * self.m2 + self.m2 > self.ell + 1e-15:
            out.append("m1+m1*m2+m2 > ell")
        return out


@dataclass(frozen=True)
class DriverSpec:
    """Terminal functional ``g``, generator ``f`` and jump aggregator ``h``.

    The generator is

        f(t, x, y, z, u) = constant + x_coef * F(x) + y_coef * y
                           + z_linear * z + z_power * |z|^ell * z
                           + u_linear * u + u_power * |u|^m1 * u

    with ``F`` a catalog functional of the stopped path, and

        h(t, u) = h_linear * u + h_power * |u|^m2 * u.
    """

    terminal: PathFunctional
    params: DriverParams = field(default_factory=DriverParams)
    constant: float = 0.0
    x_functional: PathFunctional | None = None
    x_coef: float = 0.0
    y_coef: float = 0.0
    z_linear: float = 0.0
    z_power: float = 0.0
    u_linear: float = 0.0
    u_power: float = 0.0
    h_linear: float = 1.0
    h_power: float = 0.0

    @property
    def is_zero_generator(self) -> bool:
        return not any(
            (self.constant, self.x_coef, self.y_coef, self.z_linear, self.z_power, self.u_linear, self.u_power)
        )

    def f(self, t, x, y, z, u):
        """Generator with the path argument already reduced to ``F(x^t)``."""
        p = self.params
        out = self.constant + self.y_coef * y + self.z_linear * z + self.u_linear * u
        if self.x_coef:
            out = out + self.x_coef * x
        if self.z_power:
            out = out + self.z_power * np.abs(z) ** p.ell * z
        if self.u_power:
            out = out + self.u_power * np.abs(u) ** p.m1 * u
        return out

    def h(self, t, u):
        out = self.h_linear * u
        if self.h_power:
            out = out + self.h_power * np.abs(u) ** self.params.m2 * u
        return out

    def x_value(self, path: PathSkeleton) -> np.ndarray:
        if self.x_functional is None:
            return np.zeros(path.n_paths)
        return evaluate_functional(self.x_functional, path)

    def x_running(self, paths: PathSkeleton) -> np.ndarray:
        if self.x_functional is None or not self.x_coef:
            return np.zeros((paths.n_paths, paths.grid.N + 1))
        return running_functional(self.x_functional, paths)

    def validate(self, T: float = 1.0, n_samples: int = 4000, seed: int = 0) -> list[str]:
        """Structural and sampled checks of the generator assumptions.

        Returns the list of violations (empty when all hold).
        """
        p = self.params
        out = p.violations()
        rng = np.random.default_rng(seed)
        scale = np.exp(rng.uniform(np.log(1e-3), np.log(10.0), n_samples))
        u1 = rng.standard_normal(n_samples) * scale
        u2 = u1 + rng.standard_normal(n_samples) * scale * np.exp(rng.uniform(-8, 0, n_samples))
        t = rng.uniform(0, T, n_samples)
        tol = 1e-9

        if np.any(self.h(t, np.zeros(n_samples)) != 0):
            out.append("h(s,0) != 0")
        # monotone compatibility via central differences
        eps = 1e-6 * (1 + np.abs(u1))
        zeros = np.zeros(n_samples)
        fu = (self.f(t, zeros, zeros, zeros, u1 + eps) - self.f(t, zeros, zeros, zeros, u1 - eps)) / (2 * eps)
        hu = (self.h(t, u2 + eps) - self.h(t, u2 - eps)) / (2 * eps)
        if np.any(fu * hu < -1 - 1e-6):
            out.append("f_u * h_u < -1")
        if abs(self.f(0.0, self.x_value_at_zero(), 0.0, 0.0, 0.0)) > p.k_f + tol:
            out.append("|f(t,0,0,0,0)| > k_f")
        if abs(self.y_coef) > p.L_fy + tol:
            out.append("|f_y| > L_fy")

        def local(a, b, power):
            return (p.c + 0.5 * p.gamma * (np.abs(a) ** power + np.abs(b) ** power)) * np.abs(a - b)

        dz = np.abs(self.f(t, zeros, zeros, u1, zeros) - self.f(t, zeros, zeros, u2, zeros))
        if np.any(dz > local(u1, u2, p.ell) * (1 + tol) + tol * np.abs(u1 - u2)):
            out.append("generator not locally Lipschitz in z with (c, gamma, ell)")
        du = np.abs(self.f(t, zeros, zeros, zeros, u1) - self.f(t, zeros, zeros, zeros, u2))
        if np.any(du > local(u1, u2, p.m1) * (1 + tol) + tol * np.abs(u1 - u2)):
            out.append("generator not locally Lipschitz in u with (c, gamma, m1)")
        dh = np.abs(self.h(t, u1) - self.h(t, u2))
        if np.any(dh > local(u1, u2, p.m2) * (1 + tol) + tol * np.abs(u1 - u2)):
            out.append("h not locally Lipschitz with (c, gamma, m2)")

        x, xp = random_path_pairs(min(n_samples, 2000), seed + 1, T=T, N=16)
        nx, nxp, dist = sup_norm(x), sup_norm(xp), sup_distance(x, xp)
        if self.x_coef and self.x_functional is not None:
            dx = np.abs(self.x_coef) * np.abs(evaluate_functional(self.x_functional, x) - evaluate_functional(self.x_functional, xp))
            bound = (p.c + 0.5 * p.beta * (nx**p.r + nxp**p.r)) * dist
            if np.any(dx > bound * (1 + tol) + tol):
                out.append("generator not locally Lipschitz in x with (c, beta, r)")
        dg = np.abs(evaluate_functional(self.terminal, x) - evaluate_functional(self.terminal, xp))
        bound = (p.c + 0.5 * p.alpha * (nx**p.r + nxp**p.r)) * dist
        if np.any(dg > bound * (1 + tol) + tol):
            out.append("terminal functional not locally Lipschitz with (c, alpha, r)")
        return out

    def x_value_at_zero(self) -> float:
        if self.x_functional is None or not self.x_coef:
            return 0.0
        from .noise import make_grid

        return float(evaluate_functional(self.x_functional, PathSkeleton.constant(make_grid(1.0, 4), 0.0))[0])


def h_integral(spec: DriverSpec, U, t, measure: JumpMeasure, M=None) -> np.ndarray:
    """``sum_j h(t, b_M(U_j)) * min(1, |v_j|) * lambda_j``; no cutoff when ``M`` is None.

    ``U`` has the atoms on its last axis.
    """
    U = np.asarray(U, dtype=float)
    if U.shape[-1] != measure.n_atoms:
        raise ValueError("U needs one value per jump atom on its last axis")
    if measure.n_atoms == 0:
        return np.zeros(U.shape[:-1])
    if M is not None:
        U = smooth_truncate(M, U)
    return (spec.h(t, U) * (measure.kappa * measure.intensities)).sum(axis=-1)


@dataclass(frozen=True)
class TruncatedData:
    """``g^M`` and ``f^M``; the ``y`` argument is never truncated."""

    spec: DriverSpec
    M: float

    def g(self, paths: PathSkeleton) -> np.ndarray:
        """``g(b_M(x))`` per path."""
        return evaluate_functional(self.spec.terminal, truncate_path(self.M, paths))

    def f(self, t, path: PathSkeleton, y, z, u):
        """``f(t, b_M(x), y, b_M(z), b_M(u))`` with the path given explicitly."""
        xv = self.spec.x_value(truncate_path(self.M, path))
        return self.spec.f(t, xv, y, smooth_truncate(self.M, z), smooth_truncate(self.M, u))

    def x_running(self, paths: PathSkeleton) -> np.ndarray:
        """``F(b_M(x)^{t_i})`` at every base instant."""
        return self.spec.x_running(truncate_path(self.M, paths))

    def generator(self, t, x_feature, y, z, u):
        """Vectorized ``f^M`` from a precomputed path feature of the truncated path."""
        return self.spec.f(t, x_feature, y, smooth_truncate(self.M, z), smooth_truncate(self.M, u))

    def H(self, U, t, measure: JumpMeasure):
        return h_integral(self.spec, U, t, measure, self.M)


def truncated_data(spec: DriverSpec, M) -> TruncatedData:
    return TruncatedData(spec, _level(M))
