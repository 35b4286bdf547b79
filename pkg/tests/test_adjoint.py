import numpy as np
import pytest

from mfdelay.models.builtin import linear_toy, lq_open_loop_optimum
from mfdelay.models.coefficients import ControlProcess
from mfdelay.models.delay import DelayMeasure, DelaySpec
from mfdelay.models.noise import JumpSpec, sample_noise
from mfdelay.models.paths import make_grid
from mfdelay.services.adjoint import UPSILON_ORIENTATION, compute_upsilon, solve_system
from mfdelay.services.recursive_utility import ConsumptionModel
from mfdelay.services.verification import Perturbation, gradient_identity_check, necessary_residual
from mfdelay.utils.expressions import build_expression_model

SEED = 9
LAMBDA_TOLERANCE = 1e-4


def test_lambda_matches_closed_form_at_fine_step():
    grid = make_grid(2.0, 1e-3)
    consumption = ConsumptionModel(alpha=0.4, beta=0.1, T=2.0)
    model = consumption.to_coefficient_model(grid)
    noise = sample_noise(grid, model.jumps, 8, SEED)
    solution = solve_system(model, ControlProcess.constant(grid, 1.0, model.control_bounds), noise)
    lam = solution.lam.mean
    assert lam[0] == 1.0
    assert np.max(np.abs(lam - np.exp(-0.3 * grid.main_times))) <= LAMBDA_TOLERANCE


def test_p_matches_closed_form_in_infinite_mode():
    grid = make_grid(2.0, 0.01)
    consumption = ConsumptionModel(c=0.05, alpha=0.4, beta=0.1, T=2.0)
    model = consumption.to_coefficient_model(grid)
    noise = sample_noise(grid, model.jumps, 8, SEED)
    solution = solve_system(model, ControlProcess.constant(grid, 1.0, model.control_bounds), noise)
    p = solution.adjoint.p.mean
    assert p[-1] == pytest.approx(-solution.lam.mean[-1])
    np.testing.assert_allclose(p, consumption.closed_form_p(grid.main_times), rtol=2e-3)
    assert solution.adjoint.decay_ok


def test_lq_optimum_has_small_residual():
    grid = make_grid(1.0, 1e-3)
    model = linear_toy(grid, c1=0.0, c2=1.0, sigma=0.0, qx=1.0, ru=1.0, x0=1.0)
    noise = sample_noise(grid, model.jumps, 4, SEED)
    optimum = ControlProcess(grid, lq_open_loop_optimum(grid), model.control_bounds)
    adjoint = solve_system(model, optimum, noise).adjoint
    assert necessary_residual(model, optimum, adjoint).sup <= 1e-2
    np.testing.assert_allclose(adjoint.p_cond[0, :-1], optimum.values[:-1], atol=1e-2)

    scaled = ControlProcess(grid, 1.5 * optimum.values, model.control_bounds)
    assert necessary_residual(model, scaled, solve_system(model, scaled, noise).adjoint).sup > 0.1


def test_discrete_adjoint_gives_the_exact_lq_gradient():
    grid = make_grid(1.0, 0.01)
    model = linear_toy(grid, c1=0.5, c2=1.0, sigma=0.0)
    control = ControlProcess.constant(grid, 0.2, model.control_bounds)
    eta = Perturbation.bump(grid, 0.3, 0.2)
    pair = gradient_identity_check(model, control, eta, 0.01, [SEED], n_particles=3)
    assert abs(pair.lhs - pair.rhs) <= 1e-8 * max(1.0, abs(pair.lhs))
    assert abs(pair.derivative - pair.lhs) <= 1e-8 * max(1.0, abs(pair.lhs))
    assert pair.ci <= 1e-10


def test_time_advanced_adjoint_gives_the_exact_delayed_gradient():
    grid = make_grid(1.0, 0.01, 0.2)
    delay = DelaySpec(0.2, (
        DelayMeasure.dirac_at_zero(0.2, 0.01),
        DelayMeasure.dirac_at_minus_delta(0.2, 0.01),
        DelayMeasure.exponential(1.0, 0.2, 0.01),
    ))
    model = build_expression_model(
        {'b': 'x2 + 0.5*x3 + u', 'f': '-0.5*x1^2 - 0.5*u^2'},
        grid, delay, JumpSpec.empty(), control_bounds=(-2.0, 2.0),
    )
    control = ControlProcess.constant(grid, 0.3, model.control_bounds)
    for eta in (Perturbation.bump(grid, 0.1, 0.3), Perturbation.bump(grid, 0.7, 0.25, -1.0)):
        pair = gradient_identity_check(model, control, eta, 0.01, [SEED], n_particles=3)
        assert abs(pair.lhs - pair.rhs) <= 1e-8 * max(1.0, abs(pair.lhs))
        assert abs(pair.derivative - pair.lhs) <= 1e-8 * max(1.0, abs(pair.lhs))


def test_upsilon_orientation_per_mode():
    grid = make_grid(1.0, 0.1)
    model = linear_toy(grid)
    dH_dx = np.arange(2 * grid.n_main, dtype=float).reshape(2, grid.n_main, 1)
    dH_dm = np.ones((2, grid.n_main, 1))
    state = np.zeros(2)
    value = compute_upsilon(model, dH_dx, dH_dm, 3, state, mode='finite')
    np.testing.assert_allclose(value, -dH_dx[:, 3, 0] - 1.0)
    value = compute_upsilon(model, dH_dx, dH_dm, 3, state, mode='infinite')
    np.testing.assert_allclose(value, dH_dx[:, 3, 0] + 1.0)
    assert UPSILON_ORIENTATION == {'finite': -1.0, 'infinite': 1.0}
