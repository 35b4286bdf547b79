"""Time grids with a prehistory segment and trajectory storage."""
import math
from dataclasses import dataclass

import numpy as np

from mfdelay.errors import GridError, GridRangeError

GRID_TOLERANCE = 1e-9


def _whole_steps(length, dt, label):
    """Return length/dt as an int, or raise if it is not integral."""
    ratio = length / dt
    nearest = round(ratio)
    if abs(ratio - nearest) > GRID_TOLERANCE * max(1.0, abs(ratio)):
        raise GridError(
            f"{label}/dt = {length}/{dt} = {ratio:.6g} is not an integer"
        )
    return int(nearest)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [-delta, T].

    Node 0 belongs to both segments, so storage holds n_pre + n_main values:
    the prehistory covers [-delta, 0] and the main segment covers [0, T].
    """
    t_start: float
    t0: float
    t_end: float
    dt: float
    n_pre: int
    n_main: int

    @property
    def delay(self):
        return (self.n_pre - 1) * self.dt

    @property
    def delay_steps(self):
        return self.n_pre - 1

    @property
    def n_steps(self):
        return self.n_main - 1

    @property
    def n_nodes(self):
        return self.n_pre + self.n_main

    @property
    def prehistory_times(self):
        return -self.dt * np.arange(self.n_pre - 1, -1, -1, dtype=float)

    @property
    def main_times(self):
        return self.dt * np.arange(self.n_main, dtype=float)

    @property
    def times(self):
        """Times in storage order (node 0 appears twice)."""
        return np.concatenate([self.prehistory_times, self.main_times])

    @property
    def nodes(self):
        """Distinct node times from -delta to T."""
        return np.concatenate([self.prehistory_times[:-1], self.main_times])

    def main_index(self, t):
        """Index of main node t; raises GridRangeError off the main grid."""
        k = round(t / self.dt)
        if abs(t - k * self.dt) > GRID_TOLERANCE * max(1.0, abs(t)) or not 0 <= k <= self.n_steps:
            raise GridRangeError(f"t = {t} is not a main-grid node of [0, {self.t_end}]")
        return int(k)

    def lag_indices(self, k, lags):
        """Storage indices of main node k shifted back by each lag (in steps)."""
        k = np.asarray(k)
        lags = np.asarray(lags)
        back = k - lags
        if np.any(-back > self.delay_steps):
            raise GridRangeError(
                f"lookup reaches before the grid start t = {self.t_start}"
            )
        return np.where(back >= 0, self.n_pre + back, self.n_pre - 1 + back)

    def matches(self, other):
        return (
            self.n_pre == other.n_pre
            and self.n_main == other.n_main
            and math.isclose(self.dt, other.dt, rel_tol=1e-12)
        )


def make_grid(T, dt, delta=0.0):
    """Build the grid for horizon T, step dt and delay delta.

    Args:
        T: horizon (or truncation point in infinite-horizon mode)
        dt: step size
        delta: delay length, a whole number of steps

    Returns:
        TimeGrid
    """
    if not T > 0:
        raise GridError(f"T must be positive, got {T}")
    if not dt > 0:
        raise GridError(f"dt must be positive, got {dt}")
    if delta < 0:
        raise GridError(f"delta must be non-negative, got {delta}")

    n_steps = _whole_steps(T, dt, 'T')
    delay_steps = _whole_steps(delta, dt, 'delta') if delta > 0 else 0

    return TimeGrid(
        t_start=-delay_steps * dt,
        t0=0.0,
        t_end=n_steps * dt,
        dt=float(dt),
        n_pre=delay_steps + 1,
        n_main=n_steps + 1,
    )


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Values of one path (1-D) or of a particle ensemble (particles x nodes)."""
    grid: TimeGrid
    values: np.ndarray
    main_only: bool = False

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        expected = self.grid.n_main if self.main_only else self.grid.n_nodes
        if values.ndim not in (1, 2) or values.shape[-1] != expected:
            raise GridError(
                f"trajectory needs {expected} values per path, got shape {values.shape}"
            )
        object.__setattr__(self, 'values', values)

    @classmethod
    def zeros(cls, grid, n_particles=None, main_only=False):
        length = grid.n_main if main_only else grid.n_nodes
        shape = (length,) if n_particles is None else (n_particles, length)
        return cls(grid, np.zeros(shape), main_only=main_only)

    @property
    def main(self):
        if self.main_only:
            return self.values
        return self.values[..., self.grid.n_pre:]

    @property
    def prehistory(self):
        if self.main_only:
            raise GridRangeError("trajectory has no prehistory segment")
        return self.values[..., :self.grid.n_pre]

    @property
    def mean(self):
        """Cross-sectional mean path."""
        return self.values.mean(axis=0) if self.values.ndim == 2 else self.values

    def at(self, t):
        """Left-constant (cadlag) evaluation at time t."""
        grid = self.grid
        if t > grid.t_end + GRID_TOLERANCE or t < grid.t_start - GRID_TOLERANCE:
            raise GridRangeError(f"t = {t} outside [{grid.t_start}, {grid.t_end}]")
        if t >= -GRID_TOLERANCE:
            k = min(int(math.floor(t / grid.dt + GRID_TOLERANCE)), grid.n_steps)
            return self.main[..., max(k, 0)]
        if self.main_only:
            raise GridRangeError(f"t = {t} lies in the prehistory of a main-grid trajectory")
        i = int(math.floor((t - grid.t_start) / grid.dt + GRID_TOLERANCE))
        return self.values[..., min(i, grid.n_pre - 1)]


def set_prehistory(traj, x0):
    """Copy of traj with the prehistory nodes set to x0(t)."""
    grid = traj.grid
    pre = np.broadcast_to(np.asarray(x0(grid.prehistory_times), dtype=float), (grid.n_pre,))
    values = traj.values.copy()
    values[..., :grid.n_pre] = pre
    return Trajectory(grid, values)
