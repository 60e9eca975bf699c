import math

import numpy as np
import pytest

from bprelab import models
from bprelab.errors import BudgetError, ConvergenceError, UnsupportedDimensionError
from bprelab.spectral import (
    DirectionGrid,
    apply_transfer,
    calibrate,
    default_grid,
    lambda_subadditive,
    lyapunov_curve,
    lyapunov_slope,
    solve_eigen,
    transfer_matrix,
)
from bprelab.streams import substream

from oracles import scalar_moment_rate, scalar_slope_at

W_SCALAR = [0.8, 0.2]
M_SCALAR = [0.5, 2.0]


# ---------------------------------------------------------------------------
# grids
# ---------------------------------------------------------------------------


def test_grid_unsupported_dimension():
    with pytest.raises(UnsupportedDimensionError):
        default_grid(4)


def test_grid_interpolation_exact_on_affine():
    for p, size in ((2, 41), (3, 13)):
        grid = DirectionGrid.build(p, size)
        coef = np.arange(1, p + 1, dtype=float)
        values = grid.nodes @ coef
        rng = np.random.default_rng(0)
        dirs = rng.dirichlet(np.ones(p), size=200)
        np.testing.assert_allclose(grid.interp(values, dirs), dirs @ coef,
                                   rtol=0, atol=1e-12)


def test_grid_interpolation_exact_at_nodes():
    grid = DirectionGrid.build(3, 9)
    values = np.sin(np.arange(len(grid)))
    np.testing.assert_allclose(grid.interp(values, grid.nodes), values, atol=1e-12)


# ---------------------------------------------------------------------------
# transfer operator
# ---------------------------------------------------------------------------


def test_apply_transfer_scalar_closed_form(scalar_model):
    grid = default_grid(1)
    out = apply_transfer(1.0, scalar_model, grid, np.ones(1))
    assert out[0] == pytest.approx(0.8, abs=1e-15)


def test_apply_transfer_rank_one():
    model = models.rank_one_p(2, 0.3)
    grid = default_grid(2, 51)
    g = grid.nodes[:, 0] ** 2 + 0.5
    out = apply_transfer(1.0, model, grid, g)
    g_mid = 0.25 + 0.5    # g at the collapsed direction (0.5, 0.5)
    np.testing.assert_allclose(out, 0.6 * g_mid, atol=1e-12)


def test_apply_transfer_linearity(p2_model, rng):
    grid = default_grid(2, 101)
    g1 = rng.random(len(grid))
    g2 = rng.random(len(grid))
    lhs = apply_transfer(1.3, p2_model, grid, 2.0 * g1 + 0.5 * g2)
    rhs = 2.0 * apply_transfer(1.3, p2_model, grid, g1) \
        + 0.5 * apply_transfer(1.3, p2_model, grid, g2)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


# ---------------------------------------------------------------------------
# eigен solve
# ---------------------------------------------------------------------------


def test_solve_eigen_scalar_exact(scalar_model):
    for theta in (0.3, 1.0, 1.7):
        sol = solve_eigen(theta, scalar_model)
        assert sol.lam == pytest.approx(
            scalar_moment_rate(W_SCALAR, M_SCALAR, theta), abs=1e-12)
        assert np.allclose(sol.r_values, 1.0)
        assert sol.residual <= 1e-12


def test_solve_eigen_rank_one_p2():
    sol = solve_eigen(1.0, models.rank_one_p(2, 0.3), default_grid(2, 101))
    assert sol.lam == pytest.approx(0.6, abs=1e-12)
    assert np.ptp(sol.r_values) <= 1e-12


def test_solve_eigen_mean_matrix_oracle(p2_calibrated, p2_sp1):
    # at theta = 1 the growth rate equals the spectral radius of the mean
    # matrix (expectations of the products factorize)
    mbar = np.tensordot(p2_calibrated.weights, p2_calibrated.mean_matrices, axes=1)
    rho = float(max(abs(np.linalg.eigvals(mbar))))
    assert p2_sp1.lam == pytest.approx(rho, rel=1e-12)


def test_solve_eigen_mean_matrix_oracle_p3():
    rng = np.random.default_rng(3)
    mats = [0.3 + rng.random((3, 3)) for _ in range(2)]
    import bprelab.env as env
    model = env.EnvModel(weights=np.array([0.6, 0.4]),
                         points=tuple(env.EnvPoint.poisson(m) for m in mats),
                         declared_delta=5.0)
    sol = solve_eigen(1.0, model, default_grid(3, 41))
    mbar = 0.6 * mats[0] + 0.4 * mats[1]
    rho = float(max(abs(np.linalg.eigvals(mbar))))
    assert sol.lam == pytest.approx(rho, rel=1e-10)


def test_eigen_scalings_and_stationarity(p2_calibrated):
    grid = default_grid(2, 201)
    sol = solve_eigen(0.6, p2_calibrated, grid)
    assert np.all(sol.r_values > 0.0)
    assert sol.l_weights.sum() == pytest.approx(1.0, abs=1e-9)
    assert float(sol.r_values @ sol.l_weights) == pytest.approx(1.0, abs=1e-9)
    assert sol.l_star.sum() == pytest.approx(1.0, abs=1e-9)
    assert float(sol.r_star @ sol.l_star) == pytest.approx(1.0, abs=1e-9)
    # left-eigen stationarity under one adjoint application
    A = transfer_matrix(p2_calibrated, grid, 0.6)
    np.testing.assert_allclose(sol.l_weights @ A, sol.lam * sol.l_weights,
                               atol=1e-10)


def test_solve_eigen_convergence_error(scalar_model):
    with pytest.raises(ConvergenceError):
        solve_eigen(1.0, models.reference_p2(), default_grid(2, 51),
                    tol=1e-16, max_iter=3)


# ---------------------------------------------------------------------------
# subadditive oracle
# ---------------------------------------------------------------------------


def test_lambda_subadditive_scalar_exact(scalar_model):
    for n in (3, 7):
        est = lambda_subadditive(1.0, scalar_model, n)
        assert est.value == pytest.approx(0.8, abs=1e-12)


def test_lambda_subadditive_rank_one_constant_bias():
    # deterministic all-equal matrices: E|L_n| = 2 * 0.6^n exactly, so the
    # n-th root converges to 0.6 with the 2^(1/n) constant bias
    model = models.rank_one_p(2, 0.3)
    est = lambda_subadditive(1.0, model, 5)
    assert est.value == pytest.approx(0.6 * 2 ** (1 / 5), rel=1e-10)
    est20 = lambda_subadditive(1.0, model, 20)
    assert abs(est20.value - 0.6) <= 0.05


def test_lambda_subadditive_budget():
    with pytest.raises(BudgetError):
        lambda_subadditive(1.0, models.reference_p2(), 25)


def test_lambda_enumerate_vs_grid_gap_shrinks(p2_calibrated, p2_sp1):
    # the n-th root keeps an O(log C / n) bias; the log gap must shrink
    # monotonically and stay under the worst-case constant bound
    gaps = []
    for n in (6, 10, 14):
        est = lambda_subadditive(1.0, p2_calibrated, n)
        gaps.append(abs(math.log(est.value) - math.log(p2_sp1.lam)))
        assert gaps[-1] <= math.log(2.5) / n
    assert gaps[0] > gaps[1] > gaps[2]


def test_lambda_enumerate_vs_monte_carlo(p2_calibrated):
    enum = lambda_subadditive(1.0, p2_calibrated, 8)
    mc = lambda_subadditive(1.0, p2_calibrated, 8, mode="monte-carlo",
                            n_samples=20000, rng=substream(4, "mc"))
    assert abs(math.log(mc.value) - math.log(enum.value)) <= 3 * mc.se_log


# ---------------------------------------------------------------------------
# Lyapunov curve and calibration
# ---------------------------------------------------------------------------


def test_lyapunov_curve_scalar_closed_forms(scalar_model):
    curve = lyapunov_curve(scalar_model, [0.0, 0.25, 0.5, 0.75, 1.0, 1.25])
    idx = list(curve.thetas).index(0.5)
    expected = math.log(scalar_moment_rate(W_SCALAR, M_SCALAR, 0.5))
    assert curve.log_lambdas[idx] == pytest.approx(expected, abs=1e-12)
    assert curve.slope_at_one == pytest.approx(0.0, abs=1e-6)
    assert curve.slope_at_zero == pytest.approx(
        scalar_slope_at(W_SCALAR, M_SCALAR, 0.0), abs=1e-4)
    assert curve.convex
    idx0 = list(curve.thetas).index(0.0)
    assert curve.log_lambdas[idx0] == pytest.approx(0.0, abs=1e-12)


def test_lyapunov_convexity_p2(p2_calibrated):
    curve = lyapunov_curve(p2_calibrated, np.linspace(0.0, 1.5, 7),
                           grid=default_grid(2, 201))
    assert curve.min_second_difference >= -1e-8


def test_calibrate_quarter_one_model():
    cal = calibrate(models.uncalibrated_scalar())
    assert cal.c == pytest.approx(math.exp(0.27726), abs=1e-4)
    assert abs(cal.slope_after) <= 1e-6
    assert not cal.degenerate


def test_calibrate_fixed_point(scalar_model):
    cal = calibrate(scalar_model)
    assert cal.c == pytest.approx(1.0, abs=1e-6)


def test_calibrate_degenerate_single_scenario():
    cal = calibrate(models.deterministic_scalar(0.5))
    assert cal.c == pytest.approx(2.0, abs=1e-9)
    assert cal.degenerate


def test_calibrate_scaling_covariance(p2_model):
    # scaling the means by c multiplies lam(1) by c and leaves r unchanged
    from bprelab.env import scale_means

    grid = default_grid(2, 201)
    base = solve_eigen(1.0, p2_model, grid)
    scaled = solve_eigen(1.0, scale_means(p2_model, 1.37), grid)
    assert scaled.lam == pytest.approx(1.37 * base.lam, rel=1e-6)
    np.testing.assert_allclose(scaled.r_values, base.r_values, atol=1e-8)


def test_slope_shift_under_scaling(p2_model):
    # Lambda'(1) shifts by exactly log c under mean scaling
    from bprelab.env import scale_means

    grid = default_grid(2, 101)
    s0 = lyapunov_slope(p2_model, 1.0, grid)
    s1 = lyapunov_slope(scale_means(p2_model, 1.5), 1.0, grid)
    assert s1 - s0 == pytest.approx(math.log(1.5), abs=1e-6)
