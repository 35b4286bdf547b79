"""Delay measures on [-delta, 0], segment functionals and their time-advanced duals.

Every measure is stored as atoms at whole-step lags: lag j means offset -j*dt.
"""
import logging
from dataclasses import dataclass

import numpy as np

from mfdelay.errors import GridRangeError, ModelError
from mfdelay.models.paths import GRID_TOLERANCE, Trajectory

logger = logging.getLogger(__name__)

MEASURE_KINDS = ('dirac_zero', 'dirac_minus_delta', 'exponential', 'discrete')


def _steps(length, dt, label):
    ratio = length / dt
    nearest = round(ratio)
    if abs(ratio - nearest) > GRID_TOLERANCE * max(1.0, abs(ratio)):
        raise ModelError(f"{label} = {length} is not a multiple of dt = {dt}")
    return int(nearest)


@dataclass(frozen=True, eq=False)
class DelayMeasure:
    kind: str
    delta: float
    dt: float
    lags: np.ndarray
    masses: np.ndarray
    rate: float = None

    def __post_init__(self):
        if self.kind not in MEASURE_KINDS:
            raise ModelError(f"unknown measure kind '{self.kind}'")
        lags = np.atleast_1d(np.asarray(self.lags, dtype=np.int64))
        masses = np.atleast_1d(np.asarray(self.masses, dtype=float))
        if lags.shape != masses.shape or lags.size == 0:
            raise ModelError("a delay measure needs as many masses as atoms, and at least one atom")
        max_steps = _steps(self.delta, self.dt, 'delta') if self.delta > 0 else 0
        if np.any(lags < 0) or np.any(lags > max_steps):
            raise ModelError(f"atom offsets of '{self.kind}' must lie in [-{self.delta}, 0]")
        if not np.all(np.isfinite(masses)) or np.any(masses <= 0):
            raise ModelError(f"masses of '{self.kind}' must be finite and positive")
        object.__setattr__(self, 'lags', lags)
        object.__setattr__(self, 'masses', masses)

    @classmethod
    def dirac_at_zero(cls, delta=0.0, dt=1.0):
        return cls('dirac_zero', delta, dt, [0], [1.0])

    @classmethod
    def dirac_at_minus_delta(cls, delta, dt):
        lag = _steps(delta, dt, 'delta') if delta > 0 else 0
        return cls('dirac_minus_delta', delta, dt, [lag], [1.0])

    @classmethod
    def exponential(cls, rate, delta, dt):
        """Density e^{rate*s} on [-delta, 0], atomized on the grid.

        Cell k = [-(k+1)dt, -k*dt) carries its exact mass and sits at its left
        endpoint, so the atoms sum to (1 - e^{-rate*delta}) / rate.
        """
        n_cells = _steps(delta, dt, 'delta') if delta > 0 else 0
        if n_cells == 0:
            raise ModelError("an exponential delay density needs delta > 0")
        k = np.arange(n_cells, dtype=float)
        if rate == 0:
            masses = np.full(n_cells, float(dt))
        else:
            masses = (np.exp(-rate * k * dt) - np.exp(-rate * (k + 1) * dt)) / rate
        return cls('exponential', delta, dt, np.arange(1, n_cells + 1), masses, rate=float(rate))

    @classmethod
    def discrete(cls, offsets, masses, delta, dt):
        offsets = np.atleast_1d(np.asarray(offsets, dtype=float))
        if np.any(offsets > GRID_TOLERANCE):
            raise ModelError("discrete atom offsets must be non-positive")
        lags = [_steps(-s, dt, 'atom offset') if s < 0 else 0 for s in offsets]
        return cls('discrete', delta, dt, lags, masses)

    @property
    def total_mass(self):
        return float(self.masses.sum())

    @property
    def offsets(self):
        return -self.lags * self.dt

    @property
    def max_lag(self):
        return int(self.lags.max())

    @property
    def anticipates(self):
        """True when some atom sits strictly before 0."""
        return bool(np.any(self.lags > 0))

    def label(self):
        if self.kind == 'exponential':
            return f"exponential(rate={self.rate:g})"
        if self.kind == 'discrete':
            return f"discrete({self.lags.size} atoms)"
        return self.kind


@dataclass(frozen=True, eq=False)
class DelaySpec:
    delta: float
    measures: tuple

    def __post_init__(self):
        measures = tuple(self.measures)
        if not measures:
            raise ModelError("a delay spec needs at least one measure")
        for mu in measures:
            if abs(mu.delta - self.delta) > GRID_TOLERANCE * max(1.0, self.delta):
                raise ModelError(
                    f"measure '{mu.kind}' has delta = {mu.delta}, expected {self.delta}"
                )
        object.__setattr__(self, 'measures', measures)

    @classmethod
    def no_delay(cls, dt=1.0):
        return cls(0.0, (DelayMeasure.dirac_at_zero(0.0, dt),))

    @property
    def n(self):
        return len(self.measures)

    @property
    def total_masses(self):
        return np.array([mu.total_mass for mu in self.measures])

    @property
    def anticipates(self):
        return any(mu.anticipates for mu in self.measures)


def segment_step(values, grid, k, mu):
    """Segment functional at main node k from raw storage-order values."""
    idx = grid.lag_indices(k, mu.lags)
    return values[..., idx] @ mu.masses


def lift_step(values, grid, k, spec):
    """Lifted state at main node k, shaped (..., N)."""
    return np.stack([segment_step(values, grid, k, mu) for mu in spec.measures], axis=-1)


def segment_functional(traj, t, mu):
    """Integral of X(t+s) mu(ds) over [-delta, 0] at main node t."""
    grid = traj.grid
    if traj.main_only:
        raise GridRangeError("segment functionals need a trajectory with prehistory")
    k = grid.main_index(t)
    return segment_step(traj.values, grid, k, mu)


def lifted_state(traj, t, spec):
    """Vector of segment functionals, one per measure in spec."""
    return np.stack([segment_functional(traj, t, mu) for mu in spec.measures], axis=-1)


def anticipated_step(values, k, mu, horizon_clamp=True, part='all'):
    """Sum of mass * phi(k + lag) from main-grid values shaped (..., n_main).

    part selects the atoms: 'all', 'adapted' (lag 0) or 'future' (lag > 0).
    Lookups past the last node contribute 0 when clamped, the terminal value otherwise.
    """
    last = values.shape[-1] - 1
    out = np.zeros(values.shape[:-1])
    for lag, mass in zip(mu.lags, mu.masses):
        if (part == 'adapted' and lag > 0) or (part == 'future' and lag == 0):
            continue
        target = k + lag
        if target > last:
            if horizon_clamp:
                continue
            target = last
        out = out + mass * values[..., target]
    return out


def anticipated_convolution(phi, t, mu, horizon_clamp=True):
    """Integral of phi(t-s) mu(ds): a weighted average of future values on [t, t+delta]."""
    if isinstance(phi, Trajectory):
        k = phi.grid.main_index(t)
        return anticipated_step(phi.main, k, mu, horizon_clamp)
    raise GridRangeError("anticipated convolution needs a Trajectory")


def anticipated_path(values, mu, horizon_clamp=True):
    """anticipated_step at every main node at once."""
    n_main = values.shape[-1]
    out = np.zeros(values.shape)
    for lag, mass in zip(mu.lags, mu.masses):
        shifted = np.zeros(values.shape)
        if lag < n_main:
            shifted[..., :n_main - lag] = values[..., lag:]
        if not horizon_clamp:
            shifted[..., max(n_main - lag, 0):] = values[..., -1:]
        out += mass * shifted
    return out


def segment_path(values, grid, mu):
    """Segment functional at every main node, shaped (..., n_main)."""
    k = np.arange(grid.n_main)
    out = np.zeros(values.shape[:-1] + (grid.n_main,))
    for lag, mass in zip(mu.lags, mu.masses):
        out += mass * values[..., grid.lag_indices(k, lag)]
    return out
