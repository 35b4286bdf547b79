import numpy as np
import pytest

from mfdelay.errors import PreconditionError, SimulationError
from mfdelay.models.builtin import jump_martingale, linear_toy, ornstein_uhlenbeck
from mfdelay.models.coefficients import CoefficientModel, ControlProcess, HorizonMode
from mfdelay.models.delay import DelayMeasure, DelaySpec
from mfdelay.models.noise import JumpSpec, sample_noise
from mfdelay.models.paths import make_grid
from mfdelay.services.forward import growth_flag, mean_square_norms, simulate_forward
from mfdelay.utils.regression import log_slope, standard_error

SEED = 3
X0 = 1.0


def test_compensated_jumps_are_a_martingale():
    grid = make_grid(1.0, 0.01)
    model = jump_martingale(grid, marks=(1.0,), weights=(2.0,), x0=X0)
    noise = sample_noise(grid, model.jumps, 2000, SEED)
    ens = simulate_forward(model, ControlProcess.constant(grid, 0.0), noise)
    values = ens.X.main
    gap = np.abs(values.mean(axis=0) - X0)
    se = standard_error(values)
    assert gap[0] == 0.0
    assert gap[-1] <= 3 * se[-1]
    assert np.all(gap <= 4 * se + 1e-12)


def test_deterministic_linear_drift_is_euler_exact():
    grid = make_grid(1.0, 0.01)
    model = linear_toy(grid, c1=0.5, c2=0.0, sigma=0.0, x0=2.0)
    noise = sample_noise(grid, model.jumps, 3, SEED)
    ens = simulate_forward(model, ControlProcess.constant(grid, 0.0, model.control_bounds), noise)
    expected = 2.0 * (1 + 0.5 * grid.dt) ** np.arange(grid.n_main)
    np.testing.assert_allclose(ens.X.main[0], expected, rtol=1e-12)
    np.testing.assert_allclose(ens.mean_phi, expected, rtol=1e-12)


def test_mean_field_drift_uses_the_ensemble_average():
    grid = make_grid(1.0, 0.1)
    model = CoefficientModel(
        name='mean_reverting_to_average',
        b=lambda pt: pt.m[:, 0] - pt.x[:, 0],
        x0=lambda times: np.ones_like(times),
        delay=DelaySpec.no_delay(grid.dt),
        horizon=HorizonMode.finite(grid.t_end),
    )
    noise = sample_noise(grid, model.jumps, 5, SEED)
    ens = simulate_forward(model, ControlProcess.constant(grid, 0.0), noise)
    np.testing.assert_allclose(ens.X.main, 1.0)


@pytest.mark.slow
def test_weak_euler_error_is_first_order():
    # noiseless, so the ensemble mean carries only the Euler bias
    dts = np.array([1 / 32, 1 / 64, 1 / 128, 1 / 256])
    errors = []
    for dt in dts:
        grid = make_grid(1.0, dt)
        model = linear_toy(grid, c1=1.0, c2=0.0, sigma=0.0, x0=X0)
        noise = sample_noise(grid, model.jumps, 4, SEED)
        ens = simulate_forward(model, ControlProcess.constant(grid, 0.0, model.control_bounds), noise)
        errors.append(abs(ens.X.main[:, -1].mean() - X0 * np.exp(1.0)))
    assert np.all(np.diff(errors) < 0)
    assert 0.7 <= log_slope(np.log(dts), errors) <= 1.3


def test_delayed_drift_reads_the_prehistory():
    grid = make_grid(1.0, 0.1, 0.3)
    spec = DelaySpec(0.3, (DelayMeasure.dirac_at_zero(0.3, 0.1), DelayMeasure.dirac_at_minus_delta(0.3, 0.1)))
    model = CoefficientModel(
        name='pure_delay',
        b=lambda pt: pt.x[:, 1],
        x0=lambda times: 1.0 + times,
        delay=spec,
        horizon=HorizonMode.finite(grid.t_end),
    )
    noise = sample_noise(grid, model.jumps, 1, SEED)
    ens = simulate_forward(model, ControlProcess.constant(grid, 0.0), noise)
    path = ens.X.main[0]
    # X(0.1) = X(0) + X(-0.3) dt
    assert path[1] == pytest.approx(1.0 + 0.7 * 0.1)
    assert path[2] == pytest.approx(path[1] + 0.8 * 0.1)
    np.testing.assert_allclose(ens.lifts[0, :, 1][3:], path[:-3])


def test_blow_up_names_particle_and_step():
    grid = make_grid(1.0, 0.1)
    model = CoefficientModel(
        name='explosive',
        b=lambda pt: 1e200 * pt.x[:, 0] ** 2,
        x0=lambda times: np.full(np.shape(times), 10.0),
        delay=DelaySpec.no_delay(grid.dt),
        horizon=HorizonMode.finite(grid.t_end),
    )
    noise = sample_noise(grid, model.jumps, 2, SEED)
    with pytest.raises(SimulationError) as info:
        with np.errstate(over='ignore', invalid='ignore'):
            simulate_forward(model, ControlProcess.constant(grid, 0.0), noise)
    assert info.value.particle == 0
    assert info.value.step >= 1


def test_mismatched_inputs_are_rejected():
    grid = make_grid(1.0, 0.1)
    other = make_grid(1.0, 0.05)
    model = ornstein_uhlenbeck(grid)
    noise = sample_noise(grid, model.jumps, 2, SEED)
    with pytest.raises(PreconditionError):
        simulate_forward(model, ControlProcess.constant(other, 0.0), noise)
    with pytest.raises(PreconditionError):
        simulate_forward(model, ControlProcess.constant(grid, 0.0), sample_noise(grid, JumpSpec([1.0], [1.0]), 2, SEED))


def test_growth_flag():
    dt = 0.01
    t = np.arange(1001) * dt
    assert growth_flag(np.exp(t), dt)
    assert not growth_flag(np.exp(-t), dt)
    assert not growth_flag(np.ones(5), dt)


def test_mean_square_norms_of_stable_diffusion():
    grid = make_grid(2.0, 0.01)
    model = ornstein_uhlenbeck(grid, theta=1.0, sigma=0.5)
    noise = sample_noise(grid, model.jumps, 500, SEED)
    ens = simulate_forward(model, ControlProcess.constant(grid, 0.0), noise)
    summary = mean_square_norms(ens, kappa=0.0)
    assert np.isfinite(summary.l2)
    assert summary.weighted == pytest.approx(summary.l2)
    assert summary.sup_weighted >= summary.second_moment.max() - 1e-12
    assert not summary.divergent
