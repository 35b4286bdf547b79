"""Brownian and compensated-jump increments with per-particle substreams."""
import logging
from dataclasses import dataclass, field

import numpy as np

from mfdelay.errors import ModelError, PreconditionError
from mfdelay.extensions import get_executor

logger = logging.getLogger(__name__)

# Particles per worker task
CHUNK_SIZE = 512


@dataclass(frozen=True, eq=False)
class JumpSpec:
    """Finitely supported Levy measure nu = sum_j w_j * delta_{e_j}."""
    marks: np.ndarray = field(default_factory=lambda: np.zeros(0))
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        marks = np.atleast_1d(np.asarray(self.marks, dtype=float))
        weights = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if marks.shape != weights.shape or marks.ndim != 1:
            raise ModelError(
                f"jump marks and weights must have equal length, got {marks.size} and {weights.size}"
            )
        if not np.all(np.isfinite(marks)) or np.any(marks == 0):
            raise ModelError("jump marks must be finite and nonzero")
        if not np.all(np.isfinite(weights)) or np.any(weights <= 0):
            raise ModelError("jump weights must be finite and strictly positive")
        object.__setattr__(self, 'marks', marks)
        object.__setattr__(self, 'weights', weights)

    @classmethod
    def empty(cls):
        return cls()

    @property
    def n_marks(self):
        return self.marks.size

    @property
    def total_intensity(self):
        return float(self.weights.sum())

    def integrate(self, values):
        """Integral against nu of per-mark values shaped (..., n_marks)."""
        values = np.asarray(values, dtype=float)
        if self.n_marks == 0:
            return np.zeros(values.shape[:-1])
        return values @ self.weights


@dataclass(frozen=True, eq=False)
class NoiseEnsemble:
    grid: object
    jumps: JumpSpec
    n_particles: int
    seed: int
    brownian_increments: np.ndarray
    jump_counts: np.ndarray

    @property
    def n_marks(self):
        return self.jumps.n_marks

    def compensated_jumps(self):
        """Counts minus compensator, shaped (particles, steps, marks)."""
        return self.jump_counts - self.jumps.weights * self.grid.dt


def particle_generator(seed, index):
    """Generator for one particle, keyed by (seed, particle index)."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def _fill_rows(rows, seed, dt, rates, brownian, counts):
    n_steps = brownian.shape[1]
    scale = np.sqrt(dt)
    for i in rows:
        rng = particle_generator(seed, i)
        brownian[i] = rng.normal(0.0, scale, n_steps)
        if rates.size:
            counts[i] = rng.poisson(rates, size=(n_steps, rates.size))


def sample_noise(grid, jumps, n_particles, seed):
    """Draw Brownian increments and jump counts for every particle.

    Particle i always uses the substream (seed, i), so the result does not
    depend on how the particles are split across workers.

    Args:
        grid: TimeGrid
        jumps: JumpSpec
        n_particles: ensemble size
        seed: non-negative integer

    Returns:
        NoiseEnsemble
    """
    if n_particles < 1:
        raise PreconditionError(f"n_particles must be at least 1, got {n_particles}")
    if seed < 0:
        raise PreconditionError(f"seed must be non-negative, got {seed}")

    n_steps = grid.n_steps
    rates = jumps.weights * grid.dt
    brownian = np.empty((n_particles, n_steps))
    counts = np.zeros((n_particles, n_steps, jumps.n_marks), dtype=np.int64)

    chunks = [range(lo, min(lo + CHUNK_SIZE, n_particles)) for lo in range(0, n_particles, CHUNK_SIZE)]
    executor = get_executor()
    if executor is None or len(chunks) == 1:
        for rows in chunks:
            _fill_rows(rows, seed, grid.dt, rates, brownian, counts)
    else:
        futures = [
            executor.submit(_fill_rows, rows, seed, grid.dt, rates, brownian, counts)
            for rows in chunks
        ]
        for future in futures:
            future.result()

    logger.debug(f"Sampled noise: {n_particles} particles x {n_steps} steps, {jumps.n_marks} marks")
    return NoiseEnsemble(
        grid=grid,
        jumps=jumps,
        n_particles=n_particles,
        seed=seed,
        brownian_increments=brownian,
        jump_counts=counts,
    )
