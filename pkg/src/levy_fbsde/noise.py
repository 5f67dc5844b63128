"""Driving noise: Brownian increments and a finite-activity Poisson random measure.

Every path owns independent counter-based streams keyed by ``(seed, path index)``
with the stream role in the counter, so a path's noise never depends on how
paths are batched or how many workers generate them.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "TimeGrid",
    "JumpMeasure",
    "NoiseBundle",
    "make_grid",
    "sample_noise",
    "couple_brownian",
    "path_generator",
]

_SEED_MASK = (1 << 64) - 1

# stream roles, stored in the high word of the Philox counter
ROLE_BROWNIAN = 0
ROLE_COUPLED = 1
ROLE_JUMPS = 2


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing instants ``0 = t_0 < ... < t_N = T``."""

    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or t.size < 2:
            raise ValueError("a time grid needs at least two instants")
        if not np.all(np.isfinite(t)):
            raise ValueError("time grid contains non-finite instants")
        if t[0] != 0.0:
            raise ValueError("time grid must start at 0")
        if np.any(np.diff(t) <= 0):
            raise ValueError("time grid must be strictly increasing")
        t.setflags(write=False)
        object.__setattr__(self, "times", t)

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def N(self) -> int:
        return self.times.size - 1

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.times)

    @property
    def mesh(self) -> float:
        return float(self.steps.max())

    def index_of(self, t: float, atol: float = 1e-12) -> int:
        """Index of the grid instant equal to ``t``; raises if ``t`` is off-grid."""
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > atol * max(1.0, self.T):
            raise ValueError(f"instant {t} is not a grid instant")
        return i

    def interval_of(self, t: np.ndarray) -> np.ndarray:
        """Index ``i`` with ``t_i < t <= t_{i+1}`` for instants in ``(0, T]``."""
        return np.searchsorted(self.times, t, side="left") - 1

    def __eq__(self, other):
        return isinstance(other, TimeGrid) and np.array_equal(self.times, other.times)

    def __hash__(self):
        return hash(self.times.tobytes())


def make_grid(T: float, N: int, extra: Iterable[float] = ()) -> TimeGrid:
    """Uniform grid with ``N`` intervals on ``[0, T]`` plus the ``extra`` instants.

    >>> make_grid(1.0, 4, [0.1]).times.tolist()
    [0.0, 0.1, 0.25, 0.5, 0.75, 1.0]
    """
    T = float(T)
    if not math.isfinite(T) or T <= 0:
        raise ValueError(f"horizon must be finite and positive, got {T}")
    if int(N) != N or N < 1:
        raise ValueError(f"interval count must be a positive integer, got {N}")
    extra = np.asarray(list(extra), dtype=float)
    if extra.size and (np.any(~np.isfinite(extra)) or np.any(extra <= 0) or np.any(extra >= T)):
        raise ValueError("extra grid instants must lie in the open interval (0, T)")
    base = np.linspace(0.0, T, int(N) + 1)
    return TimeGrid(np.unique(np.concatenate([base, extra])))


@dataclass(frozen=True)
class JumpMeasure:
    """Finite Lévy measure: atoms ``v_j`` with intensities ``lambda_j``.

    The empty measure (no atoms) is the purely Brownian case.
    """

    marks: np.ndarray = field(default_factory=lambda: np.zeros(0))
    intensities: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        marks = np.atleast_1d(np.asarray(self.marks, dtype=float))
        lam = np.atleast_1d(np.asarray(self.intensities, dtype=float))
        if marks.shape != lam.shape or marks.ndim != 1:
            raise ValueError("marks and intensities must be 1-d arrays of equal length")
        if np.any(~np.isfinite(marks)) or np.any(marks == 0):
            raise ValueError("jump marks must be finite and nonzero")
        if np.any(~np.isfinite(lam)) or np.any(lam <= 0):
            raise ValueError("jump intensities must be finite and positive")
        marks.setflags(write=False)
        lam.setflags(write=False)
        object.__setattr__(self, "marks", marks)
        object.__setattr__(self, "intensities", lam)

    @classmethod
    def from_records(cls, records: Sequence[dict]) -> "JumpMeasure":
        """Build from ``[{"mark": v, "intensity": lam}, ...]``."""
        records = list(records or [])
        return cls(
            np.array([float(r["mark"]) for r in records]),
            np.array([float(r["intensity"]) for r in records]),
        )

    def to_records(self) -> list[dict]:
        return [
            {"mark": float(v), "intensity": float(lam)}
            for v, lam in zip(self.marks, self.intensities)
        ]

    @property
    def n_atoms(self) -> int:
        return self.marks.size

    @property
    def total_intensity(self) -> float:
        return float(self.intensities.sum())

    @property
    def kappa(self) -> np.ndarray:
        """``min(1, |v_j|)`` per atom."""
        return np.minimum(1.0, np.abs(self.marks))

    def __eq__(self, other):
        return (
            isinstance(other, JumpMeasure)
            and np.array_equal(self.marks, other.marks)
            and np.array_equal(self.intensities, other.intensities)
        )

    def __hash__(self):
        return hash((self.marks.tobytes(), self.intensities.tobytes()))


@dataclass(frozen=True, eq=False)
class NoiseBundle:
    """Immutable noise sample for ``n_paths`` paths on a common base grid.

    The jump ledger is stored flat, sorted by ``(path, time)``: ``jump_path[k]``
    is the owning path, ``jump_time[k]`` the exact time in ``(0, T]`` and
    ``jump_atom[k]`` the index of the atom that fired.
    """

    grid: TimeGrid
    measure: JumpMeasure
    seed: int
    brownian_increments: np.ndarray
    jump_path: np.ndarray
    jump_time: np.ndarray
    jump_atom: np.ndarray
    coupled_increments: np.ndarray | None = None

    def __post_init__(self):
        for name in ("brownian_increments", "jump_path", "jump_time", "jump_atom", "coupled_increments"):
            arr = getattr(self, name)
            if arr is not None:
                arr.setflags(write=False)

    @property
    def n_paths(self) -> int:
        return self.brownian_increments.shape[0]

    def jump_counts(self) -> np.ndarray:
        """Number of jumps of each atom per base interval, shape ``(n, N, J)``."""
        n, N, J = self.n_paths, self.grid.N, self.measure.n_atoms
        counts = np.zeros((n, N, J), dtype=np.int64)
        if self.jump_time.size:
            interval = self.grid.interval_of(self.jump_time)
            np.add.at(counts, (self.jump_path, interval, self.jump_atom), 1)
        return counts

    def compensated_increments(self) -> np.ndarray:
        """``N~`` increments per atom and interval: count minus ``lambda_j * dt``."""
        counts = self.jump_counts().astype(float)
        return counts - self.grid.steps[None, :, None] * self.measure.intensities[None, None, :]

    def jumps_of(self, path: int) -> tuple[np.ndarray, np.ndarray]:
        """``(times, atom indices)`` of one path's jumps."""
        lo, hi = np.searchsorted(self.jump_path, [path, path + 1])
        return self.jump_time[lo:hi], self.jump_atom[lo:hi]

    def with_brownian(self, increments: np.ndarray) -> "NoiseBundle":
        """Same jumps, different Brownian field (used for coupled solves)."""
        increments = np.asarray(increments, dtype=float)
        if increments.shape != self.brownian_increments.shape:
            raise ValueError("replacement Brownian field has the wrong shape")
        return replace(self, brownian_increments=increments.copy(), coupled_increments=None)

    def coarsen(self, factor: int) -> "NoiseBundle":
        """Keep every ``factor``-th grid instant and aggregate Brownian increments.

        The jump ledger is unchanged, so the coarse and fine bundles describe the
        same Lévy path at two resolutions.
        """
        N = self.grid.N
        if factor < 1 or N % factor:
            raise ValueError(f"cannot coarsen {N} intervals by a factor {factor}")
        grid = TimeGrid(self.grid.times[::factor])

        def agg(dw):
            return None if dw is None else dw.reshape(dw.shape[0], N // factor, factor).sum(axis=2)

        return replace(
            self,
            grid=grid,
            brownian_increments=agg(self.brownian_increments),
            coupled_increments=agg(self.coupled_increments),
        )


def path_generator(seed: int, path: int, role: int) -> np.random.Generator:
    """The counter-based stream for one ``(seed, path, role)`` triple."""
    bitgen = np.random.Philox(key=[int(seed) & _SEED_MASK, int(path)], counter=[0, 0, 0, int(role)])
    return np.random.Generator(bitgen)


def _fill_block(lo, hi, seed, steps, T, lam, coupled, dW, dW2, jumps):
    sqrt_dt = np.sqrt(steps)
    for p in range(lo, hi):
        dW[p] = path_generator(seed, p, ROLE_BROWNIAN).standard_normal(steps.size) * sqrt_dt
        if coupled:
            dW2[p] = path_generator(seed, p, ROLE_COUPLED).standard_normal(steps.size) * sqrt_dt
        if lam.size:
            g = path_generator(seed, p, ROLE_JUMPS)
            times, atoms = [], []
            for j, rate in enumerate(lam):
                k = int(g.poisson(rate * T))
                if k:
                    # 1 - U lies in (0, 1]
                    times.append(T * (1.0 - g.random(k)))
                    atoms.append(np.full(k, j))
            if times:
                times = np.concatenate(times)
                atoms = np.concatenate(atoms)
                order = np.argsort(times, kind="stable")
                jumps[p] = (times[order], atoms[order])


def sample_noise(
    grid: TimeGrid,
    measure: JumpMeasure,
    n_paths: int,
    seed: int,
    coupled: bool = False,
    workers: int | None = None,
) -> NoiseBundle:
    """Draw Brownian increments and the jump ledger for ``n_paths`` paths.

    Args:
        grid: base time grid.
        measure: finite jump measure; empty for the continuous case.
        n_paths: number of paths.
        seed: 64-bit seed; together with the path index it fixes a path's noise.
        coupled: also draw an independent second Brownian field ``W'``.
        workers: thread count; ``None`` or ``0`` means one per logical core.
            The output does not depend on it.
    """
    if int(n_paths) != n_paths or n_paths < 1:
        raise ValueError(f"n_paths must be a positive integer, got {n_paths}")
    n_paths = int(n_paths)
    seed = int(seed)
    workers = workers or os.cpu_count() or 1
    steps = grid.steps
    N = grid.N
    dW = np.empty((n_paths, N))
    dW2 = np.empty((n_paths, N)) if coupled else None
    jumps: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    bounds = np.linspace(0, n_paths, min(workers, n_paths) + 1).astype(int)
    args = (seed, steps, grid.T, measure.intensities, coupled, dW, dW2, jumps)
    if len(bounds) == 2:
        _fill_block(0, n_paths, *args)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_fill_block, lo, hi, *args) for lo, hi in zip(bounds[:-1], bounds[1:])]
            for fut in futures:
                fut.result()
    owners = sorted(jumps)
    if owners:
        jump_path = np.concatenate([np.full(jumps[p][0].size, p) for p in owners])
        jump_time = np.concatenate([jumps[p][0] for p in owners])
        jump_atom = np.concatenate([jumps[p][1] for p in owners])
    else:
        jump_path = np.zeros(0, dtype=np.int64)
        jump_time = np.zeros(0)
        jump_atom = np.zeros(0, dtype=np.int64)
    return NoiseBundle(
        grid=grid,
        measure=measure,
        seed=seed,
        brownian_increments=dW,
        jump_path=jump_path.astype(np.int64),
        jump_time=jump_time,
        jump_atom=jump_atom.astype(np.int64),
        coupled_increments=dW2,
    )


def couple_brownian(bundle: NoiseBundle, phi: float) -> np.ndarray:
    """Increments of ``sqrt(1 - phi^2) W + phi W'``, interval by interval."""
    if bundle.coupled_increments is None:
        raise ValueError("noise bundle carries no coupled Brownian field")
    phi = float(phi)
    if not (0.0 < phi <= 1.0):
        raise ValueError(f"coupling parameter must lie in (0, 1], got {phi}")
    return math.sqrt(1.0 - phi * phi) * bundle.brownian_increments + phi * bundle.coupled_increments
