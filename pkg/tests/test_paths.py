import numpy as np
import pytest

from mfdelay.errors import GridError, GridRangeError
from mfdelay.models.paths import Trajectory, make_grid, set_prehistory


def test_grid_sizes():
    grid = make_grid(2.0, 0.01, 0.5)
    assert grid.n_pre == 51
    assert grid.n_main == 201
    assert grid.n_nodes == 252
    assert grid.delay == pytest.approx(0.5)
    assert grid.t_start == pytest.approx(-0.5)
    assert grid.nodes.size == 251


def test_grid_without_delay_has_single_prehistory_node():
    grid = make_grid(1.0, 0.1)
    assert grid.n_pre == 1
    assert grid.delay_steps == 0
    np.testing.assert_allclose(grid.prehistory_times, [0.0])


def test_horizon_not_multiple_of_dt():
    with pytest.raises(GridError, match='T/dt'):
        make_grid(1.0, 0.3)


def test_delay_not_multiple_of_dt_names_both_values():
    with pytest.raises(GridError, match=r'0\.5/0\.3'):
        make_grid(0.9, 0.3, 0.5)


@pytest.mark.parametrize('T, dt, delta', [(0.0, 0.1, 0.0), (1.0, -0.1, 0.0), (1.0, 0.1, -0.2)])
def test_invalid_grid_arguments(T, dt, delta):
    with pytest.raises(GridError):
        make_grid(T, dt, delta)


def test_main_index():
    grid = make_grid(1.0, 0.01)
    assert grid.main_index(0.37) == 37
    assert grid.main_index(1.0) == 100
    with pytest.raises(GridRangeError):
        grid.main_index(2.5)
    with pytest.raises(IndexError):
        grid.main_index(0.375)


def test_lag_indices_cross_into_prehistory(delayed_grid):
    np.testing.assert_array_equal(delayed_grid.lag_indices(0, [0, 1, 3]), [4, 2, 0])
    assert delayed_grid.lag_indices(5, 2) == 7
    with pytest.raises(GridRangeError):
        delayed_grid.lag_indices(0, 4)


def test_lag_indices_point_at_matching_times(delayed_grid):
    times = delayed_grid.times
    for k in range(delayed_grid.n_main):
        for lag in range(delayed_grid.delay_steps + 1):
            index = delayed_grid.lag_indices(k, lag)
            assert times[index] == pytest.approx((k - lag) * delayed_grid.dt)


def test_trajectory_is_left_constant():
    grid = make_grid(1.0, 0.01)
    traj = Trajectory(grid, np.arange(grid.n_nodes, dtype=float))
    assert traj.at(0.155) == traj.main[15]
    assert traj.at(1.0) == traj.main[-1]
    with pytest.raises(GridRangeError):
        traj.at(1.5)


def test_trajectory_shape_is_checked():
    grid = make_grid(1.0, 0.1)
    with pytest.raises(GridError):
        Trajectory(grid, np.zeros(5))
    assert Trajectory(grid, np.zeros(grid.n_main), main_only=True).main.shape == (grid.n_main,)


def test_set_prehistory(delayed_grid):
    traj = set_prehistory(Trajectory.zeros(delayed_grid, 3), lambda t: 1.0 + t)
    np.testing.assert_allclose(traj.prehistory, np.tile([0.7, 0.8, 0.9, 1.0], (3, 1)))
    np.testing.assert_allclose(traj.main, 0.0)
    with pytest.raises(GridRangeError):
        Trajectory.zeros(delayed_grid, main_only=True).prehistory
