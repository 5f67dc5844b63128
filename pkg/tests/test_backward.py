import math

import numpy as np
import pytest
import statsmodels.api as sm

from levy_fbsde.backward import (
    BoundConstants,
    PicardDivergence,
    RegressionBasis,
    SolverSpec,
    choose_truncation_level,
    fit_bounds,
    fit_quantile_bound,
    lsmc_solve,
    path_features,
    picard_solve,
    s2_distance,
    solve_fbsde,
)
from levy_fbsde.forward import ForwardModel, Volatility, euler_solve
from levy_fbsde.noise import JumpMeasure, make_grid, sample_noise
from levy_fbsde.paths import PathFunctional, PathSkeleton
from levy_fbsde.truncation import DriverParams, DriverSpec, truncated_data

from conftest import TWO_ATOMS

TERMINAL = DriverSpec(PathFunctional("terminal_point"))
NO_JUMPS = JumpMeasure(np.zeros(0), np.zeros(0))
M_BIG = 50.0


@pytest.fixture(scope="module")
def jump_setup():
    grid = make_grid(1.0, 16)
    model = ForwardModel(1.0, TWO_ATOMS, sigma=Volatility.constant(0.3))
    noise = sample_noise(grid, TWO_ATOMS, 40_000, seed=11)
    return model, noise, euler_solve(model, noise)


def test_terminal_consistency(jump_setup):
    _, noise, paths = jump_setup
    spec = DriverSpec(PathFunctional("sup_norm"), z_linear=0.2)
    sol = lsmc_solve(spec, 4.0, paths, noise)
    assert np.array_equal(sol.Y[:, -1], truncated_data(spec, 4.0).g(paths))
    assert sol.Y.shape == (noise.n_paths, 17) and sol.Z.shape == (noise.n_paths, 16)
    assert sol.U.shape == (noise.n_paths, 16, 2) and sol.H.shape == (noise.n_paths, 16)


def test_martingale_terminal(jump_setup):
    _, noise, paths = jump_setup
    sol = lsmc_solve(TERMINAL, M_BIG, paths, noise)
    assert abs(sol.Y0 - 1.0) < 4 * sol.Y0_standard_error
    # the martingale representation is linear in x: Z = sigma, U_j = rho_j
    assert np.sqrt(np.mean((sol.Z - 0.3) ** 2)) < 0.06
    for j, mark in enumerate(TWO_ATOMS.marks):
        assert np.sqrt(np.mean((sol.U[:, :, j] - mark) ** 2)) < 0.1 * abs(mark) + 0.02


def test_linear_generator_discounts(jump_setup):
    _, noise, paths = jump_setup
    spec = DriverSpec(PathFunctional("terminal_point"), y_coef=0.5)
    sol = lsmc_solve(spec, M_BIG, paths, noise)
    # explicit scheme: Y0 = (1 + dt/2)^N E X_T
    assert sol.Y0 == pytest.approx((1 + 1 / 32) ** 16, abs=4 * sol.Y0_standard_error + 1e-3)
    assert abs(sol.Y0 - math.exp(0.5)) < 0.02


def test_brownian_only_z_is_sigma():
    grid = make_grid(1.0, 16)
    model = ForwardModel(0.0, NO_JUMPS, sigma=Volatility.constant(0.7))
    noise = sample_noise(grid, NO_JUMPS, 20_000, seed=12)
    sol = lsmc_solve(TERMINAL, M_BIG, euler_solve(model, noise), noise)
    assert sol.U.shape[2] == 0 and np.all(sol.H == 0)
    assert abs(sol.Z.mean() - 0.7) < 0.01
    # Y_t = X_t up to in-sample regression noise
    assert np.sqrt(np.mean((sol.Y - euler_solve(model, noise).at_base()) ** 2)) < 0.01


def test_picard_zero_generator_is_one_sweep(jump_setup):
    _, noise, paths = jump_setup
    pic = picard_solve(TERMINAL, 4.0, paths, noise)
    lsm = lsmc_solve(TERMINAL, 4.0, paths, noise)
    assert pic.iterations == 1
    assert np.allclose(pic.Y, lsm.Y, atol=1e-12)


def test_picard_contracts_and_agrees(jump_setup):
    _, noise, paths = jump_setup
    spec = DriverSpec(PathFunctional("terminal_point"), y_coef=0.5, z_linear=0.3, u_linear=0.1)
    pic = picard_solve(spec, 6.0, paths, noise, tol=1e-8)
    res = np.array(pic.residuals)
    assert np.all(res[1:] / res[:-1] < 1)
    lsm = lsmc_solve(spec, 6.0, paths, noise)
    # the fixed point is implicit in y, the explicit scheme is not: O(dt) apart
    assert abs(pic.Y0 - lsm.Y0) < abs(lsm.Y0) / 16
    assert s2_distance(pic.Y, pic.Y) == 0.0


def test_picard_divergence_reports_residual(jump_setup):
    _, noise, paths = jump_setup
    spec = DriverSpec(PathFunctional("terminal_point"), y_coef=0.5)
    with pytest.raises(PicardDivergence) as err:
        picard_solve(spec, 6.0, paths, noise, tol=1e-14, max_iter=2)
    assert err.value.iterations == 2 and err.value.residual > 0


def test_deterministic(jump_setup):
    _, noise, paths = jump_setup
    spec = DriverSpec(PathFunctional("sup_norm"), z_power=0.5, params=DriverParams(ell=1, gamma=1))
    a = lsmc_solve(spec, 4.0, paths, noise)
    b = lsmc_solve(spec, 4.0, paths, noise)
    assert np.array_equal(a.Y, b.Y) and np.array_equal(a.U, b.U)


def test_constant_design_is_ridged():
    grid = make_grid(1.0, 4)
    noise = sample_noise(grid, NO_JUMPS, 100, seed=1)
    paths = euler_solve(ForwardModel(2.0, NO_JUMPS), noise)
    sol = lsmc_solve(TERMINAL, M_BIG, paths, noise)
    assert set(sol.ridge_steps) == {0, 1, 2, 3}
    assert np.allclose(sol.Y, 2.0) and np.allclose(sol.Z, 0.0, atol=1e-6)


def test_explicit_ridge_and_basis_validation():
    with pytest.raises(ValueError):
        RegressionBasis(("1", "cubic"))
    with pytest.raises(ValueError):
        RegressionBasis(ridge=-1.0)
    with pytest.raises(ValueError):
        RegressionBasis(())


def test_mismatched_inputs(jump_setup):
    _, noise, paths = jump_setup
    other = sample_noise(make_grid(1.0, 8), TWO_ATOMS, noise.n_paths, seed=0)
    with pytest.raises(ValueError, match="grids"):
        lsmc_solve(TERMINAL, 4.0, paths, other)


def test_nonfinite_generator_is_reported():
    grid = make_grid(1.0, 4)
    noise = sample_noise(grid, NO_JUMPS, 50, seed=1)
    paths = euler_solve(ForwardModel(0.0, NO_JUMPS, sigma=Volatility.constant(1.0)), noise)
    spec = DriverSpec(PathFunctional("terminal_point"), constant=np.inf)
    with pytest.raises(FloatingPointError, match="step 3"):
        lsmc_solve(spec, 4.0, paths, noise)


def test_path_features_match_direct_computation(jump_setup):
    _, _, paths = jump_setup
    f = path_features(paths)
    k = 7
    row = paths.row(k)
    for i, t in enumerate(paths.grid.times):
        m = row.times[0] <= t
        assert f["sup"][k, i] == np.abs(row.values[0][m]).max()
        tt = np.append(row.times[0][m], t)
        assert f["integral"][k, i] == pytest.approx(np.sum(row.values[0][m] * np.diff(tt)), abs=1e-12)


# ---------------------------------------------------------------------------
# bounds


def test_quantile_fit_agrees_with_quantreg():
    rng = np.random.default_rng(3)
    w = rng.uniform(0, 4, 20_000)
    y = 1.0 + 2.0 * w + rng.exponential(0.5, w.size)
    ours = fit_quantile_bound(y, w, 0.9)
    qr = sm.QuantReg(y, sm.add_constant(w)).fit(q=0.9)
    assert ours.b == pytest.approx(qr.params[1], rel=0.03)
    assert ours.a == pytest.approx(qr.params[0], rel=0.05)
    assert ours.violation_rate <= 0.1


def test_quantile_fit_slope_clamped_at_zero():
    rng = np.random.default_rng(4)
    w = rng.uniform(0, 4, 5000)
    y = 5.0 - w + rng.uniform(0, 0.1, w.size)
    fit = fit_quantile_bound(y, w, 0.95)
    assert fit.b == 0.0 and fit.violation_rate <= 0.05


def test_quantile_fit_errors():
    with pytest.raises(ValueError):
        fit_quantile_bound([], [], 0.9)
    with pytest.raises(ValueError):
        fit_quantile_bound([1.0, 2.0], [1.0], 0.9)


def test_fit_bounds_respects_quantile(jump_setup):
    model, noise, paths = jump_setup
    sol = lsmc_solve(DriverSpec(PathFunctional("sup_norm"), z_linear=0.2), 5.0, paths, noise)
    rep = fit_bounds(sol, paths, 0.25, model.kappa_rho, q=0.95)
    assert rep.max_violation <= 0.05
    assert rep.passed
    assert rep.constants.kappa_inf == 1.0


def test_choose_level_example():
    grid = make_grid(1.0, 8)
    paths = PathSkeleton.constant(grid, 1.0, 3)
    c = BoundConstants(a=1.0, b=0.0, c_y=0.0, r=0.0)
    assert choose_truncation_level(c, paths).M == 2.0
    c2 = BoundConstants(a=1.0, b=1.0, c_y=1.0, r=0.0)
    assert choose_truncation_level(c2, paths).M == 3.0
    assert choose_truncation_level(c2, paths, 1.0).M == 3.0


def test_choose_level_monotone_in_q(jump_setup):
    _, _, paths = jump_setup
    c = BoundConstants(a=0.5, b=0.3, c_y=0.4, r=0.5, kappa_inf=1.0)
    Ms = [choose_truncation_level(c, paths, q).M for q in (0.5, 0.9, 0.99, 1.0)]
    assert all(b >= a for a, b in zip(Ms, Ms[1:]))
    S = path_features(paths)["sup"]
    # q = 1 covers every path point, so the cutoff is inactive on all bounds
    assert Ms[-1] - 1 >= S.max()


def test_bound_constants_iteration_limits():
    c = BoundConstants(a=1.0, b=1.0, c_y=1.0, r=0.0, C_iter=0.0)
    assert c.a_inf == pytest.approx(2.0) and c.b_inf == 0.0
    with pytest.raises(ValueError):
        BoundConstants(a=-1.0, b=0.0, c_y=0.0)


def test_solver_spec_validation():
    with pytest.raises(ValueError):
        SolverSpec(method="newton")
    with pytest.raises(ValueError):
        SolverSpec(M=0.5)


def test_auto_level_pipeline():
    grid = make_grid(1.0, 16)
    model = ForwardModel(1.0, TWO_ATOMS, sigma=Volatility.constant(0.3))
    spec = DriverSpec(PathFunctional("terminal_point"), y_coef=0.2)
    res = solve_fbsde(model, spec, grid, 10_000, 3, SolverSpec(stability_check=True))
    assert res.pilot_M == pytest.approx(2 + 2 * np.abs(res.paths.values).max())
    assert 1 < res.solution.M_used
    assert res.report.truncation_stability["relative_change"] < 0.01
    assert res.report.passed
