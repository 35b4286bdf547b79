import numpy as np
import pytest

from mfdelay.errors import PreconditionError, SolverError
from mfdelay.models.builtin import brownian_bsde, linear_toy
from mfdelay.models.coefficients import CoefficientModel, ControlProcess, HorizonMode
from mfdelay.models.delay import DelaySpec
from mfdelay.models.noise import sample_noise
from mfdelay.models.paths import make_grid
from mfdelay.services.backward import (
    RegressionBasis, bsde_consistency_check, objective_values, solve_backward,
)
from mfdelay.services.forward import simulate_forward
from mfdelay.utils.regression import log_slope, polynomial_features, project, standard_error

SEED = 5
BSDE_TOLERANCE = 0.05


def _solve(model, grid, n_particles, control_value=0.0, basis=None):
    noise = sample_noise(grid, model.jumps, n_particles, SEED)
    control = ControlProcess.constant(grid, control_value, model.control_bounds)
    ens = simulate_forward(model, control, noise)
    return ens, control, solve_backward(model, ens, control, basis)


@pytest.mark.slow
def test_brownian_terminal_value_recovers_state_and_unit_z():
    grid = make_grid(1.0, 0.02)
    model = brownian_bsde(grid, a=1.0)
    ens, control, triple = _solve(model, grid, 10_000, basis=RegressionBasis(2))
    y_gap = triple.Y.main - ens.X.main
    assert np.sqrt(np.mean(y_gap ** 2)) <= BSDE_TOLERANCE
    assert np.max(np.abs(y_gap.mean(axis=0))) <= BSDE_TOLERANCE
    assert np.sqrt(np.mean((triple.Z - 1.0) ** 2)) <= BSDE_TOLERANCE
    assert abs(triple.Z.mean() - 1.0) <= 0.02


@pytest.mark.slow
def test_brownian_deviation_shrinks_as_particles_double():
    grid = make_grid(1.0, 0.01)
    model = brownian_bsde(grid, a=1.0)
    deviations = []
    for n_particles in (1000, 2000, 4000, 8000):
        # particle i draws from the same substream for every ensemble size
        ens, control, triple = _solve(model, grid, n_particles, basis=RegressionBasis(1))
        y_rms = np.sqrt(np.mean((triple.Y.main - ens.X.main) ** 2))
        z_rms = np.sqrt(np.mean((triple.Z - 1.0) ** 2))
        deviations.append(max(y_rms, z_rms))
    assert np.all(np.diff(deviations) <= 0), deviations


def test_linear_driver_discounts_terminal_value():
    alpha, xi, a = 0.5, 2.0, 1.5
    grid = make_grid(1.0, 0.01)
    model = CoefficientModel(
        name='discounted',
        b=lambda pt: np.zeros(pt.size),
        g=lambda pt: -alpha * pt.y,
        a=a,
        x0=lambda times: np.full(np.shape(times), xi),
        delay=DelaySpec.no_delay(grid.dt),
        horizon=HorizonMode.finite(grid.t_end),
    )
    ens, control, triple = _solve(model, grid, 4)
    discrete = a * xi * (1 - alpha * grid.dt) ** grid.n_steps
    np.testing.assert_allclose(triple.Y0, discrete, rtol=1e-12)
    assert abs(triple.Y0[0] - a * xi * np.exp(-alpha)) < 5e-3
    np.testing.assert_allclose(triple.Z, 0.0, atol=1e-12)


def test_consistency_residual_is_zero_on_the_same_node():
    grid = make_grid(1.0, 0.1)
    model = brownian_bsde(grid)
    ens, control, triple = _solve(model, grid, 200)
    assert bsde_consistency_check(triple, model, ens, control, 0.5, 0.5) == 0.0
    assert bsde_consistency_check(triple, model, ens, control, 0.0, 1.0) < BSDE_TOLERANCE
    with pytest.raises(PreconditionError):
        bsde_consistency_check(triple, model, ens, control, 0.8, 0.2)


def test_objective_of_deterministic_linear_toy():
    grid = make_grid(1.0, 0.01)
    model = linear_toy(grid, c1=0.0, c2=1.0, sigma=0.0, x0=1.0)
    ens, control, triple = _solve(model, grid, 3, control_value=0.5)
    x = 1.0 + 0.5 * grid.main_times[:-1]
    expected = np.sum(-0.5 * (x ** 2 + 0.25)) * grid.dt
    np.testing.assert_allclose(objective_values(model, ens, triple, control), expected, rtol=1e-12)


def test_project_with_constant_features_returns_the_mean():
    targets = np.array([1.0, 2.0, 6.0])
    np.testing.assert_allclose(project(np.ones((3, 2)), targets), 3.0)
    np.testing.assert_allclose(project(np.zeros((3, 0)), targets), 3.0)


def test_project_reproduces_polynomials_in_the_span():
    rng = np.random.default_rng(0)
    x = rng.normal(size=500)
    targets = 1.0 - 2.0 * x + 0.5 * x ** 2
    fitted = project(polynomial_features(x, 2), targets, ridge=0.0)
    np.testing.assert_allclose(fitted, targets, atol=1e-9)


def test_collinear_features_without_ridge():
    x = np.linspace(0.0, 1.0, 20)
    features = np.column_stack([x, 2.0 * x])
    with pytest.raises(SolverError):
        project(features, x ** 2, ridge=0.0)


def test_polynomial_feature_count():
    variables = np.ones((4, 2))
    assert polynomial_features(variables, 2).shape == (4, 5)
    assert polynomial_features(variables, 0).shape == (4, 0)


def test_regression_helpers():
    assert standard_error(np.ones(1)) == 0.0
    assert log_slope([1.0, 2.0, 3.0], np.exp([-0.5, -1.0, -1.5])) == pytest.approx(-0.5)
    assert np.isnan(log_slope([1.0, 2.0], [1.0, 0.0]))


def test_basis_rejects_negative_degree():
    with pytest.raises(PreconditionError):
        RegressionBasis(-1)
