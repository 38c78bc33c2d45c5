"""Tests for services/meanfield.py: densities, symmetric Sinkhorn, rescaled maps, heat simulation."""

import numpy as np
import pytest
from scipy.integrate import trapezoid

from services.errors import DimensionMismatchError, InvalidParameterError
from services.flows import SymmetricAttentionParams
from services.meanfield import (
    DensityModel,
    EpsilonSweep,
    HeatTrace,
    analytic_limit_sink,
    analytic_limit_softmax,
    epsilon_convergence_experiment,
    extend_potentials,
    field_gap,
    heat_simulation,
    rescaled_sink_field,
    rescaled_softmax_field,
    solve_potentials,
    uniform_grid,
    variance_slope,
)
from services.numerics import SeededRng, finite_diff_gradient
from services.sinkhorn import sinkhorn

SWEEP = (0.5, 0.2, 0.1, 0.05)


def identity_params(d: int = 1) -> SymmetricAttentionParams:
    return SymmetricAttentionParams.tied(np.eye(d))


def softmax_params() -> SymmetricAttentionParams:
    return SymmetricAttentionParams(2.0 * np.eye(1), np.eye(1))


def rel_rms(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sqrt(np.mean((a - b) ** 2)) / np.sqrt(np.mean(b ** 2)))


# ════════════════════════════════════════════════════════════════
# DensityModel
# ════════════════════════════════════════════════════════════════


class TestDensityModel:
    def test_standard_gaussian_score(self):
        rho = DensityModel.standard(1)
        x = np.linspace(-2.0, 2.0, 9)
        np.testing.assert_allclose(rho.score(x)[:, 0], -x, atol=1e-14)

    def test_pdf_integrates_to_one(self):
        rho = DensityModel.mixture([(0.3, [-1.0], [[0.25]]), (0.7, [1.5], [[0.5]])])
        x = np.linspace(-8.0, 10.0, 20_001)
        assert trapezoid(rho.pdf(x), x) == pytest.approx(1.0, abs=1e-8)

    def test_mixture_score_matches_log_pdf_gradient(self):
        rho = DensityModel.mixture([(0.5, [-1.0, 0.0], np.eye(2) * 0.5), (0.5, [1.0, 0.5], [[1.0, 0.3], [0.3, 0.8]])])
        x = np.array([0.2, -0.4])
        numeric = finite_diff_gradient(lambda v: float(rho.log_pdf(v)[0]), x, step=1e-6)
        np.testing.assert_allclose(rho.score(x)[0], numeric, rtol=1e-6)

    def test_grad_is_pdf_times_score(self):
        rho = DensityModel.gaussian([0.5], [[2.0]])
        x = np.array([[0.0], [1.0]])
        np.testing.assert_allclose(rho.grad(x), rho.pdf(x)[:, None] * rho.score(x))

    def test_weights_are_normalised(self):
        rho = DensityModel.mixture([(2.0, [0.0], [[1.0]]), (6.0, [1.0], [[1.0]])])
        np.testing.assert_allclose(rho.weights, [0.25, 0.75])

    def test_rejects_bad_covariance(self):
        with pytest.raises(InvalidParameterError):
            DensityModel.gaussian([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])

    def test_rejects_wrong_query_dimension(self):
        with pytest.raises(DimensionMismatchError):
            DensityModel.standard(2).score(np.zeros((3, 3)))


class TestSampling:
    @pytest.mark.parametrize("sampling", ["iid", "stratified"])
    def test_moments(self, sampling):
        x = DensityModel.standard(1).sample(SeededRng(0), 4000, sampling)
        assert x.shape == (4000, 1)
        assert abs(x.mean()) < 0.05
        assert x.var() == pytest.approx(1.0, abs=0.08)

    def test_stratified_is_tighter(self):
        x = DensityModel.standard(1).sample(SeededRng(1), 2000, "stratified")
        assert abs(x.mean()) < 0.01
        assert x.var() == pytest.approx(1.0, abs=0.02)

    def test_stratified_mixture_counts(self):
        rho = DensityModel.mixture([(0.25, [-5.0], [[0.01]]), (0.75, [5.0], [[0.01]])])
        x = rho.sample(SeededRng(2), 101, "stratified")
        assert int(np.sum(x < 0)) in (25, 26)
        assert x.shape == (101, 1)

    def test_deterministic(self):
        rho = DensityModel.standard(2)
        np.testing.assert_array_equal(rho.sample(SeededRng(3), 50, "stratified"), rho.sample(SeededRng(3), 50, "stratified"))

    def test_unknown_mode(self):
        with pytest.raises(InvalidParameterError):
            DensityModel.standard(1).sample(SeededRng(0), 10, "sobol")


# ════════════════════════════════════════════════════════════════
# solve_potentials / extend_potentials
# ════════════════════════════════════════════════════════════════


class TestSolvePotentials:
    def test_normalisation_holds(self):
        x = DensityModel.standard(1).sample(SeededRng(4), 200)
        eps = 0.2
        sol = solve_potentials(x, identity_params(), eps, tol=1e-12)
        c = -0.5 * (x - x.T) ** 2
        k = np.exp(c / eps + sol.g[:, None] + sol.g[None, :])
        np.testing.assert_allclose(k.mean(axis=1), 1.0, atol=1e-10)
        assert sol.violation <= 1e-12

    def test_matches_dense_sinkhorn(self):
        x = DensityModel.standard(2).sample(SeededRng(5), 60)
        p = SymmetricAttentionParams.tied(np.array([[1.0, 0.2], [0.0, 0.7]]))
        eps = 2.0
        sol = solve_potentials(x, p, eps, tol=1e-13)
        C = (x @ p.interaction @ x.T) / eps
        f_c, g = sinkhorn(C, tolerance=1e-13).continuous_potentials()
        # same kernel: symmetric gauge of the dot cost differs by the per-point term ½ xᵀMx/ε
        half_norm = 0.5 * np.einsum("ij,jk,ik->i", x, p.interaction, x) / eps
        np.testing.assert_allclose(sol.g, 0.5 * (f_c + g) + half_norm, atol=1e-8)

    def test_block_size_does_not_change_result(self):
        x = DensityModel.standard(1).sample(SeededRng(6), 300)
        a = solve_potentials(x, identity_params(), 0.1, tol=1e-12, block=7)
        b = solve_potentials(x, identity_params(), 0.1, tol=1e-12, block=512)
        np.testing.assert_allclose(a.g, b.g, atol=1e-12)

    def test_warm_start_needs_fewer_iterations(self):
        x = DensityModel.standard(1).sample(SeededRng(7), 300)
        cold = solve_potentials(x, identity_params(), 0.1, tol=1e-11)
        warm = solve_potentials(x, identity_params(), 0.1, tol=1e-11, initial=cold.g)
        assert warm.iterations == 0

    def test_extension_reproduces_samples(self):
        x = DensityModel.standard(1).sample(SeededRng(8), 150)
        sol = solve_potentials(x, identity_params(), 0.2, tol=1e-12)
        np.testing.assert_allclose(extend_potentials(x, identity_params(), sol, x), sol.g, atol=1e-10)

    def test_indefinite_interaction_rejected(self):
        p = SymmetricAttentionParams.from_interaction(-np.eye(1))
        with pytest.raises(InvalidParameterError):
            solve_potentials(np.zeros((3, 1)), p, 0.1)

    def test_non_positive_bandwidth(self):
        with pytest.raises(InvalidParameterError):
            solve_potentials(np.zeros((3, 1)), identity_params(), 0.0)


# ════════════════════════════════════════════════════════════════
# Analytic limits
# ════════════════════════════════════════════════════════════════


class TestAnalyticLimits:
    def test_sink_limit_is_minus_score(self):
        x = np.linspace(-1.5, 1.5, 7)
        np.testing.assert_allclose(analytic_limit_sink(DensityModel.standard(1), x)[:, 0], x)

    def test_softmax_limit_closed_form(self):
        x = np.linspace(-1.5, 1.5, 7)
        out = analytic_limit_softmax(DensityModel.standard(1), softmax_params(), x)
        np.testing.assert_allclose(out[:, 0], 4.0 * x)

    def test_limits_coincide_for_tied_identity(self):
        rho = DensityModel.mixture([(0.5, [-1.0], [[0.3]]), (0.5, [1.0], [[0.3]])])
        x = np.linspace(-2.0, 2.0, 11)
        np.testing.assert_allclose(
            analytic_limit_softmax(rho, identity_params(), x), analytic_limit_sink(rho, x), atol=1e-12
        )

    def test_general_value_matrix(self):
        p = SymmetricAttentionParams.from_interaction(np.diag([2.0, 0.5]))
        V = np.array([[1.0, 0.0], [1.0, 1.0]])
        x = np.array([[0.3, -0.2]])
        rho = DensityModel.standard(2)
        expected = V @ np.linalg.inv(p.interaction) @ rho.score(x)[0]
        np.testing.assert_allclose(analytic_limit_sink(rho, x, p, value_matrix=V)[0], expected)

    def test_value_matrix_minus_interaction_collapses(self):
        p = SymmetricAttentionParams.from_interaction(np.diag([2.0, 0.5]))
        rho = DensityModel.standard(2)
        x = np.array([[0.3, -0.2], [1.0, 0.4]])
        np.testing.assert_allclose(analytic_limit_sink(rho, x, p, value_matrix=p.W_V), analytic_limit_sink(rho, x))


# ════════════════════════════════════════════════════════════════
# Rescaled maps
# ════════════════════════════════════════════════════════════════


class TestRescaledFields:
    def test_sink_field_on_gaussian_close_to_exact_bandwidth_law(self):
        # for ρ = N(0, 1) the population map is (2/ε)(1 - r)x with r = (-ε + √(ε² + 4))/2
        eps = 0.2
        x = DensityModel.standard(1).sample(SeededRng(9), 3000, "stratified")
        grid = uniform_grid(-1.0, 1.0, 11)
        r = (-eps + np.sqrt(eps ** 2 + 4.0)) / 2.0
        exact = (2.0 / eps) * (1.0 - r) * grid
        assert rel_rms(rescaled_sink_field(x, identity_params(), eps, grid, tol=1e-9), exact) < 0.05

    def test_drift_scale_is_a_prefactor(self):
        x = DensityModel.standard(1).sample(SeededRng(10), 400, "stratified")
        grid = uniform_grid(-1.0, 1.0, 5)
        full = rescaled_sink_field(x, identity_params(), 0.2, grid, tol=1e-11)
        half = rescaled_sink_field(x, identity_params(), 0.2, grid, tol=1e-11, drift_scale=1.0)
        np.testing.assert_allclose(half, 0.5 * full, rtol=1e-12)

    def test_reused_potentials_match_fresh_solve(self):
        x = DensityModel.standard(1).sample(SeededRng(11), 300)
        grid = uniform_grid(-1.0, 1.0, 5)
        sol = solve_potentials(x, identity_params(), 0.2, tol=1e-12)
        np.testing.assert_allclose(
            rescaled_sink_field(x, identity_params(), 0.2, grid, potentials=sol),
            rescaled_sink_field(x, identity_params(), 0.2, grid, tol=1e-12),
            atol=1e-9,
        )

    def test_potentials_for_other_bandwidth_rejected(self):
        x = DensityModel.standard(1).sample(SeededRng(12), 50)
        sol = solve_potentials(x, identity_params(), 0.2)
        with pytest.raises(InvalidParameterError):
            rescaled_sink_field(x, identity_params(), 0.1, x, potentials=sol)

    def test_softmax_field_of_a_single_atom(self):
        # every weight sits on x0, so the map is (x - x0)/ε
        grid = uniform_grid(-1.0, 1.0, 5)
        values = rescaled_softmax_field(np.full((5, 1), 0.7), identity_params(), 0.3, grid)
        np.testing.assert_allclose(values, (grid.reshape(-1, 1) - 0.7) / 0.3, atol=1e-12)

    def test_softmax_needs_invertible_key(self):
        p = SymmetricAttentionParams(np.zeros((1, 1)), np.zeros((1, 1)))
        with pytest.raises(InvalidParameterError):
            rescaled_softmax_field(np.zeros((3, 1)), p, 0.1, np.zeros((1, 1)))

    def test_query_dimension_checked(self):
        with pytest.raises(DimensionMismatchError):
            rescaled_softmax_field(np.zeros((3, 1)), identity_params(), 0.1, np.zeros((2, 2)))


# ════════════════════════════════════════════════════════════════
# epsilon_convergence_experiment
# ════════════════════════════════════════════════════════════════


class TestEpsilonConvergence:
    def test_sink_map_converges_to_minus_score(self):
        sweep = EpsilonSweep(SWEEP, 3000, uniform_grid(-1.5, 1.5, 21), seed=0, sampling="stratified")
        table = epsilon_convergence_experiment(DensityModel.standard(1), identity_params(), sweep, "sink", tol=1e-9)
        assert list(table.columns) == ["epsilon", "rms_error", "relative_rms", "iterations"]
        assert np.all(np.diff(table["rms_error"].to_numpy()) < 0)
        assert table["relative_rms"].iloc[-1] < 0.15

    def test_softmax_map_converges_to_its_own_limit(self):
        sweep = EpsilonSweep(SWEEP, 10_000, uniform_grid(-1.5, 1.5, 21), seed=0, sampling="stratified")
        table = epsilon_convergence_experiment(DensityModel.standard(1), softmax_params(), sweep, "softmax")
        assert np.all(np.diff(table["rms_error"].to_numpy()) < 0)
        assert table["relative_rms"].iloc[-1] < 0.15

    def test_softmax_map_is_far_from_sink_limit(self):
        rho = DensityModel.standard(1)
        grid = uniform_grid(-1.5, 1.5, 21)
        x = rho.sample(SeededRng(13), 10_000, "stratified")
        soft = rescaled_softmax_field(x, softmax_params(), 0.1, grid)
        assert rel_rms(soft, analytic_limit_sink(rho, grid)) > 0.2

    def test_empirical_softmax_and_sink_maps_differ(self):
        grid = uniform_grid(-1.5, 1.5, 21)
        gap = field_gap(DensityModel.standard(1), softmax_params(), 0.1, 3000, grid, seed=13, tol=1e-9)
        assert gap > 0.2

    def test_sweep_must_decrease(self):
        with pytest.raises(InvalidParameterError):
            EpsilonSweep((0.1, 0.2), 10, uniform_grid(0.0, 1.0, 3))
        with pytest.raises(InvalidParameterError):
            EpsilonSweep((0.1, 0.1), 10, uniform_grid(0.0, 1.0, 3))

    def test_unknown_field(self):
        sweep = EpsilonSweep((0.1,), 10, uniform_grid(0.0, 1.0, 3))
        with pytest.raises(InvalidParameterError):
            epsilon_convergence_experiment(DensityModel.standard(1), identity_params(), sweep, "k2")


# ════════════════════════════════════════════════════════════════
# heat_simulation
# ════════════════════════════════════════════════════════════════


class TestHeatSimulation:
    def test_variance_grows_like_heat_equation(self):
        trace = heat_simulation(
            DensityModel.standard(1), eps=0.05, h=0.01, steps=50, n=2000, seed=0, sampling="stratified", tol=1e-8
        )
        assert trace.times[-1] == pytest.approx(0.5)
        assert trace.variance[-1] == pytest.approx(2.0, rel=0.1)
        assert 1.7 <= variance_slope(trace) <= 2.3

    def test_snapshots_and_frame(self):
        trace = heat_simulation(DensityModel.standard(1), eps=0.2, h=0.05, steps=4, n=100, snapshot_every=2)
        assert sorted(trace.snapshots) == [0, 2, 4]
        frame = trace.to_frame()
        assert list(frame.columns) == ["step", "time", "mean_0", "variance_0", "variance"]
        assert len(frame) == 5
        assert len(trace.iterations) == 4

    def test_two_dimensions(self):
        trace = heat_simulation(DensityModel.standard(2), eps=0.2, h=0.05, steps=2, n=100)
        assert trace.variances.shape == (3, 2)

    def test_zero_steps_keep_initial_variance(self):
        rho = DensityModel.standard(1)
        trace = heat_simulation(rho, eps=0.2, h=0.05, steps=0, n=150, seed=4)
        np.testing.assert_array_equal(trace.times, [0.0])
        np.testing.assert_array_equal(trace.variances[0], rho.sample(SeededRng(4), 150, "iid").var(axis=0))
        assert trace.iterations == []

    def test_mean_stays_within_three_standard_errors(self):
        n = 200
        trace = heat_simulation(
            DensityModel.standard(1), eps=0.2, h=0.05, steps=6, n=n, seed=2, sampling="stratified", tol=1e-10
        )
        standard_error = np.sqrt(trace.variances[:, 0] / n)
        assert np.all(np.abs(trace.means[:, 0]) <= 3.0 * standard_error)

    def test_step_above_quarter_bandwidth_rejected(self):
        with pytest.raises(InvalidParameterError):
            heat_simulation(DensityModel.standard(1), eps=0.05, h=0.02, steps=1, n=10)

    def test_three_dimensions_rejected(self):
        with pytest.raises(InvalidParameterError):
            heat_simulation(DensityModel.standard(3), eps=0.2, h=0.01, steps=1, n=10)


class TestVarianceSlope:
    def test_exact_line(self):
        times = np.linspace(0.0, 1.0, 11)
        variances = (1.0 + 2.0 * times)[:, None]
        trace = HeatTrace(times, np.zeros_like(variances), variances, {}, [])
        assert variance_slope(trace) == pytest.approx(2.0)

    def test_needs_two_points(self):
        trace = HeatTrace(np.zeros(1), np.zeros((1, 1)), np.ones((1, 1)), {}, [])
        with pytest.raises(InvalidParameterError):
            variance_slope(trace)
