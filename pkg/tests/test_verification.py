import numpy as np
import pytest

from mfdelay.errors import GridError, PreconditionError
from mfdelay.models.builtin import linear_toy, lq_open_loop_optimum, ornstein_uhlenbeck, quadratic_toy
from mfdelay.models.coefficients import ControlProcess
from mfdelay.models.delay import DelayMeasure, anticipated_step
from mfdelay.models.noise import sample_noise
from mfdelay.models.paths import make_grid
from mfdelay.services.adjoint import solve_system
from mfdelay.services.backward import solve_backward
from mfdelay.services.forward import simulate_forward
from mfdelay.services.verification import (
    InformationFlow, Perturbation, VerificationReport, ascent_direction_check, crn_variance_ratio,
    fubini_identity_check, necessary_residual, perturbation_scaling, simulate_derivative_processes,
    sufficient_conditions_probe,
)

SEED = 21
FUBINI_TOLERANCE = 1e-12
SCALING_WINDOW = (1.8, 2.2)
ALPHAS = (0.1, 0.05, 0.025, 0.0125)


def _fubini_measures(delta, dt):
    return [
        DelayMeasure.dirac_at_zero(delta, dt),
        DelayMeasure.dirac_at_minus_delta(delta, dt),
        DelayMeasure.exponential(1.0, delta, dt),
        DelayMeasure.discrete([0.0, -2 * dt, -delta], [0.3, 0.5, 0.2], delta, dt),
    ]


def _brute_double_sum(phi, X, mu, dt):
    """sum over t and s of X(t) phi(t + s) mu(ds), X zero before 0, phi zero after T."""
    n = len(X)
    total = 0.0
    for t in range(n):
        for lag, mass in zip(mu.lags, mu.masses):
            if t + lag < n:
                total += X[t] * phi[t + lag] * mass
    return total * dt


@pytest.mark.parametrize('n_steps', [10, 1000])
def test_fubini_identity(n_steps):
    dt = 0.01
    rng = np.random.default_rng(n_steps)
    phi = rng.normal(size=n_steps + 1)
    X = rng.normal(size=n_steps + 1)
    for mu in _fubini_measures(0.05, dt):
        assert fubini_identity_check(phi, X, mu, dt) <= FUBINI_TOLERANCE


def test_fubini_sides_match_brute_force_on_small_grid():
    dt = 0.01
    rng = np.random.default_rng(0)
    phi = rng.normal(size=11)
    X = rng.normal(size=11)
    for mu in _fubini_measures(0.05, dt):
        forward = sum(X[k] * anticipated_step(phi, k, mu) for k in range(11)) * dt
        assert abs(forward - _brute_double_sum(phi, X, mu, dt)) <= FUBINI_TOLERANCE


def test_fubini_needs_dt_for_arrays():
    with pytest.raises(PreconditionError):
        fubini_identity_check(np.ones(3), np.ones(3), DelayMeasure.dirac_at_zero())


def test_perturbation_bump_and_bounds():
    grid = make_grid(1.0, 0.1)
    eta = Perturbation.bump(grid, 0.2, 0.3, 2.0)
    np.testing.assert_array_equal(np.nonzero(eta.values)[0], [2, 3, 4])
    assert eta.bound == 2.0
    assert np.all(Perturbation.zero(grid).values == 0)
    with pytest.raises(PreconditionError):
        Perturbation(grid, np.full(grid.n_main, 2.0), 1.0)
    with pytest.raises(GridError):
        Perturbation(grid, np.ones(3))


def test_admissibility_of_perturbed_control():
    grid = make_grid(1.0, 0.1)
    control = ControlProcess.constant(grid, 1.9, (-2.0, 2.0))
    eta = Perturbation.bump(grid, 0.0, 0.5)
    eta.check_admissible(control, 0.05)
    with pytest.raises(PreconditionError):
        eta.check_admissible(control, 0.5)


def test_information_flow():
    grid = make_grid(1.0, 0.1)
    assert InformationFlow.delayed(0.3).lag_steps(grid) == 3
    with pytest.raises(GridError):
        InformationFlow.delayed(0.25).lag_steps(grid)
    with pytest.raises(PreconditionError):
        InformationFlow.delayed(-0.1)
    with pytest.raises(PreconditionError):
        InformationFlow('partial')


def test_zero_direction_gives_zero_derivative_processes():
    grid = make_grid(1.0, 0.01)
    model = quadratic_toy(grid)
    noise = sample_noise(grid, model.jumps, 50, SEED)
    control = ControlProcess.constant(grid, 1.0, model.control_bounds)
    ens = simulate_forward(model, control, noise)
    triple = solve_backward(model, ens, control)
    deriv = simulate_derivative_processes(model, control, Perturbation.zero(grid), ens, triple)
    assert np.all(deriv.X.values == 0)
    assert np.all(deriv.Y.values == 0)
    assert np.all(deriv.Z == 0)


def test_derivative_process_of_linear_model_equals_difference_quotient():
    grid = make_grid(1.0, 0.01)
    model = linear_toy(grid, c1=0.5, c2=1.0, sigma=0.3)
    noise = sample_noise(grid, model.jumps, 50, SEED)
    control = ControlProcess.constant(grid, 0.1, model.control_bounds)
    eta = Perturbation.bump(grid, 0.2, 0.5)
    ens = simulate_forward(model, control, noise)
    triple = solve_backward(model, ens, control)
    deriv = simulate_derivative_processes(model, control, eta, ens, triple)
    alpha = 0.1
    moved = simulate_forward(model, control.shifted(eta.values, alpha), noise)
    quotient = (moved.X.main - ens.X.main) / alpha
    np.testing.assert_allclose(deriv.X.main, quotient, atol=1e-10)


def test_perturbation_scaling_slope_is_two():
    grid = make_grid(1.0, 0.01)
    model = quadratic_toy(grid, sigma=0.2)
    noise = sample_noise(grid, model.jumps, 500, SEED)
    control = ControlProcess.constant(grid, 1.0, model.control_bounds)
    eta = Perturbation(grid, np.ones(grid.n_main), 1.0)
    result = perturbation_scaling(model, control, eta, noise, ALPHAS)
    assert SCALING_WINDOW[0] <= result.slope <= SCALING_WINDOW[1]
    assert np.all(np.diff(result.values) < 0)


def test_independent_response_to_control_has_zero_residual():
    grid = make_grid(1.0, 0.01)
    model = ornstein_uhlenbeck(grid)
    noise = sample_noise(grid, model.jumps, 100, SEED)
    control = ControlProcess.constant(grid, 0.5)
    adjoint = solve_system(model, control, noise).adjoint
    residual = necessary_residual(model, control, adjoint)
    assert residual.sup == 0.0
    assert residual.times.shape == (grid.n_steps,)


def test_delayed_information_needs_the_ensemble():
    grid = make_grid(1.0, 0.1)
    model = quadratic_toy(grid)
    noise = sample_noise(grid, model.jumps, 100, SEED)
    control = ControlProcess.constant(grid, 0.5, model.control_bounds)
    solution = solve_system(model, control, noise)
    flow = InformationFlow.delayed(0.2)
    with pytest.raises(PreconditionError):
        necessary_residual(model, control, solution.adjoint, flow)
    delayed = necessary_residual(model, control, solution.adjoint, flow, solution.ens)
    full = necessary_residual(model, control, solution.adjoint)
    np.testing.assert_allclose(delayed.residual, full.residual, atol=1e-8)


def test_lq_optimum_passes_the_sufficiency_probes():
    grid = make_grid(1.0, 0.01)
    model = linear_toy(grid, c1=0.0, c2=1.0, sigma=0.0)
    noise = sample_noise(grid, model.jumps, 5, SEED)
    candidate = ControlProcess(grid, lq_open_loop_optimum(grid), model.control_bounds)
    alternatives = [ControlProcess.constant(grid, v, model.control_bounds) for v in (-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0)]
    report = sufficient_conditions_probe(
        model, candidate, alternatives, n_probe=300, noise=noise, variables=('x', 'u'),
    )
    assert report.concavity_violations == 0
    assert report.terminal_violations == 0
    assert report.u_curvature == 'concave'
    assert not report.degenerate_max
    assert report.max_attained_fraction == 1.0
    assert report.candidate_best
    assert all(report.J_candidate > value for value, _ in report.J_alternatives)


def test_control_free_hamiltonian_has_degenerate_maximum():
    grid = make_grid(1.0, 0.05)
    model = ornstein_uhlenbeck(grid)
    noise = sample_noise(grid, model.jumps, 20, SEED)
    candidate = ControlProcess.constant(grid, 0.0)
    report = sufficient_conditions_probe(model, candidate, [], n_probe=50, noise=noise)
    assert report.degenerate_max
    assert report.u_curvature == 'flat'
    assert report.max_attained_fraction == 1.0


def test_sufficiency_probe_needs_a_system():
    grid = make_grid(1.0, 0.1)
    model = ornstein_uhlenbeck(grid)
    with pytest.raises(PreconditionError):
        sufficient_conditions_probe(model, ControlProcess.constant(grid, 0.0), [])


def test_common_noise_reduces_difference_variance():
    grid = make_grid(1.0, 0.02)
    model = linear_toy(grid, c1=0.0, c2=1.0, sigma=0.3)
    control = ControlProcess.constant(grid, 0.5, model.control_bounds)
    eta = Perturbation.bump(grid, 0.2, 0.4)
    common, independent = crn_variance_ratio(model, control, eta, 0.01, 400, SEED)
    assert common < 0.01 * independent


def test_ascent_direction_from_non_optimal_control():
    grid = make_grid(1.0, 0.01)
    model = linear_toy(grid, c1=0.0, c2=1.0, sigma=0.0)
    noise = sample_noise(grid, model.jumps, 4, SEED)
    control = ControlProcess.constant(grid, 1.0, model.control_bounds)
    fd, ci, found = ascent_direction_check(model, control, noise)
    assert found
    assert fd > 0


def test_report_records_comparisons():
    report = VerificationReport()
    assert report.record('small', 0.1, 0.2)
    assert not report.record('nan', float('nan'), 1.0)
    assert not report.passed
    summary = report.to_dict()
    assert [check['name'] for check in summary['checks']] == ['small', 'nan']
