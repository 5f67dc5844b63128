import math

import numpy as np
import pytest

from levy_fbsde.forward import (
    Drift,
    DriftTerm,
    ForwardModel,
    Volatility,
    drift_on_paths,
    euler_solve,
    exp_moment_estimate,
    shifted_solve,
)
from levy_fbsde.noise import JumpMeasure, make_grid, sample_noise
from levy_fbsde.paths import PathSkeleton

from conftest import TWO_ATOMS

NO_JUMPS = JumpMeasure(np.zeros(0), np.zeros(0))


def linear_drift(k):
    return Drift(0.0, (DriftTerm("terminal_point", k),))


def test_pure_brownian_is_exact(grid16):
    noise = sample_noise(grid16, NO_JUMPS, 500, seed=1)
    model = ForwardModel(0.7, NO_JUMPS, sigma=Volatility.constant(0.3))
    X = euler_solve(model, noise).at_base()
    expect = 0.7 + 0.3 * np.cumsum(noise.brownian_increments, axis=1)
    assert np.allclose(X[:, 1:], expect, atol=1e-13)
    assert np.all(X[:, 0] == 0.7)


def test_compensated_jumps_have_constant_mean(grid16):
    noise = sample_noise(grid16, TWO_ATOMS, 40_000, seed=2)
    X = euler_solve(ForwardModel(1.0, TWO_ATOMS), noise)
    # X_T = x0 + sum rho N_j - T sum rho lambda
    counts = noise.jump_counts().sum(axis=1)
    assert np.allclose(X.terminal, 1.0 + counts @ TWO_ATOMS.marks - TWO_ATOMS.marks @ TWO_ATOMS.intensities, atol=1e-12)
    se = X.terminal.std() / math.sqrt(X.n_paths)
    assert abs(X.terminal.mean() - 1.0) < 4 * se


def test_deterministic_drift_matches_euler_recursion():
    grid = make_grid(1.0, 64)
    noise = sample_noise(grid, NO_JUMPS, 2, seed=0)
    X = euler_solve(ForwardModel(1.0, NO_JUMPS, drift=linear_drift(-1.0)), noise)
    assert X.terminal[0] == pytest.approx((1 - 1 / 64) ** 64, rel=1e-13)
    assert abs(X.terminal[0] - math.exp(-1.0)) < 1 / 64


def test_recursion_residual_is_zero(two_atoms):
    grid = make_grid(1.0, 16)
    drift = Drift(0.1, (DriftTerm("terminal_point", -0.5), DriftTerm("sup_norm", 0.3, "sin"), DriftTerm("integral", 0.2, "tanh")))
    model = ForwardModel(0.5, two_atoms, drift=drift, sigma=Volatility.constant(0.4))
    noise = sample_noise(grid, two_atoms, 300, seed=3)
    X = euler_solve(model, noise)
    b = drift_on_paths(drift, X)
    base = X.at_base()
    jumps = noise.jump_counts() @ two_atoms.marks
    inc = b[:, :-1] / 16 + 0.4 * noise.brownian_increments - two_atoms.marks @ two_atoms.intensities / 16
    resid = np.diff(base, axis=1) - inc - jumps
    assert np.abs(resid).max() < 1e-12


def test_strong_convergence_order(two_atoms):
    drift = Drift(0.0, (DriftTerm("terminal_point", -1.0, "sin"), DriftTerm("sup_norm", 0.5, "atan")))
    model = ForwardModel(1.0, two_atoms, drift=drift, sigma=Volatility.constant(0.5))
    fine = sample_noise(make_grid(1.0, 512), two_atoms, 4000, seed=4)
    ref = euler_solve(model, fine).terminal
    err = [np.sqrt(np.mean((euler_solve(model, fine.coarsen(k)).terminal - ref) ** 2)) for k in (32, 16, 8)]
    ratios = [a / b for a, b in zip(err, err[1:])]
    assert all(1.2 <= r <= 3.0 for r in ratios), (err, ratios)


def test_exp_moment_of_constant_path(grid16):
    p = PathSkeleton.constant(grid16, -1.5, 10)
    rep = exp_moment_estimate(p, 2.0)
    assert rep.estimate == pytest.approx(math.exp(3.0))
    assert rep.standard_error == pytest.approx(0.0)


def test_exp_moment_brownian_terminal():
    grid = make_grid(1.0, 8)
    noise = sample_noise(grid, NO_JUMPS, 100_000, seed=5)
    X = euler_solve(ForwardModel(0.0, NO_JUMPS, sigma=Volatility.constant(1.0)), noise)
    rep = exp_moment_estimate(X, 1.0, statistic="terminal")
    assert abs(rep.estimate - math.exp(0.5)) < 4 * rep.standard_error


def test_exp_moment_monotone_and_log_space(two_atoms, grid16):
    noise = sample_noise(grid16, two_atoms, 2000, seed=6)
    X = euler_solve(ForwardModel(1.0, two_atoms, sigma=Volatility.constant(0.3)), noise)
    vals = [exp_moment_estimate(X, c).log_estimate for c in (0.5, 1.0, 2.0, 4.0)]
    assert all(b > a for a, b in zip(vals, vals[1:]))
    big = exp_moment_estimate(X, 1000.0)
    assert big.overflow and big.estimate == math.inf and math.isfinite(big.log_estimate)
    with pytest.raises(ValueError):
        exp_moment_estimate(X, 0.0)


@pytest.mark.parametrize("s", [0.0, 0.25, 0.5, 1.0])
@pytest.mark.parametrize("atom", [0, 1])
def test_zero_drift_derivative_is_rho(two_atoms, grid16, s, atom):
    model = ForwardModel(1.0, two_atoms, sigma=Volatility.constant(0.3), rho=[0.8, -0.3], kappa_rho=[0.8, 0.3])
    noise = sample_noise(grid16, two_atoms, 200, seed=7)
    res = shifted_solve(model, noise, s, atom)
    after = grid16.times >= s
    assert np.all(res.derivative[:, ~after] == 0.0)
    assert np.allclose(res.derivative[:, after], model.rho[atom], atol=1e-13)


def test_derivative_bounded_by_gronwall_factor(two_atoms, grid16):
    drift = Drift(0.0, (DriftTerm("terminal_point", 0.8, "sin"), DriftTerm("integral", -0.5)))
    model = ForwardModel(1.0, two_atoms, drift=drift, sigma=Volatility.constant(0.3))
    noise = sample_noise(grid16, two_atoms, 500, seed=8)
    res = shifted_solve(model, noise, 0.25, 0)
    L = model.lipschitz_b(1.0)
    assert np.abs(res.derivative).max() <= model.kappa_rho[0] * (1 + L / 16) ** 16 + 1e-12


def test_rejects_foreign_noise(grid16, two_atoms):
    noise = sample_noise(grid16, two_atoms, 4, seed=0)
    with pytest.raises(ValueError):
        euler_solve(ForwardModel(0.0, NO_JUMPS), noise)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_state_is_reported():
    grid = make_grid(1.0, 64)
    noise = sample_noise(grid, NO_JUMPS, 2, seed=0)
    model = ForwardModel(1.0, NO_JUMPS, drift=Drift(0.0, (DriftTerm("sup_norm", 1e200),)))
    with pytest.raises(FloatingPointError, match="path 0"):
        euler_solve(model, noise)


def test_validate_flags_wrong_constants(two_atoms):
    model = ForwardModel(0.0, two_atoms, drift=linear_drift(2.0), sigma=Volatility.constant(1.0), L_b=1.0, K_sigma=0.5)
    problems = model.validate(1.0, n_pairs=300)
    assert any("L_b" in p for p in problems)
    assert any("K_sigma" in p for p in problems)
    assert ForwardModel(0.0, two_atoms, drift=linear_drift(2.0)).validate(1.0, n_pairs=300) == []
