"""Interacting-particle Euler scheme for the forward state."""
import logging
import time
from dataclasses import dataclass

import numpy as np

from mfdelay.errors import PreconditionError, SimulationError
from mfdelay.models.coefficients import HamiltonianPoint
from mfdelay.models.delay import lift_step
from mfdelay.models.paths import Trajectory, set_prehistory
from mfdelay.utils.regression import standard_error

logger = logging.getLogger(__name__)

# Ratio of late to early growth of the running integral that counts as divergence
DIVERGENCE_RATIO = 1.1


@dataclass(eq=False)
class ParticleEnsemble:
    """Forward particles with the mean-field summaries used at each step.

    lifts: (n, n_main, N); mean_lift: (n_main, N); mean_phi: (n_main,).
    """
    model: object
    control: object
    noise: object
    X: Trajectory
    lifts: np.ndarray
    mean_lift: np.ndarray
    mean_phi: np.ndarray

    @property
    def grid(self):
        return self.X.grid

    @property
    def n_particles(self):
        return self.X.values.shape[0]

    def state(self, k):
        return self.X.main[:, k]

    def mean_field(self, k):
        """Mean-field argument at step k: [E Phi(X)] or E[lifted state]."""
        if self.model.horizon.is_finite:
            return np.array([self.mean_phi[k]])
        return self.mean_lift[k]

    def point(self, k, /, **adjoint):
        """Evaluation point at step k with the ensemble's state arguments."""
        return HamiltonianPoint.build(
            t=k * self.grid.dt,
            x=self.lifts[:, k],
            m=self.mean_field(k),
            u=self.control.at_step(k),
            n_marks=self.model.n_marks,
            **adjoint,
        )

    def recompute_mean_field(self):
        main = self.X.main
        return self.lifts.mean(axis=0), self.model.phi(main).mean(axis=0)


def _check_inputs(model, control, noise, grid):
    if not noise.grid.matches(grid):
        raise PreconditionError("noise was sampled on a different grid")
    if not control.grid.matches(grid):
        raise PreconditionError("control lives on a different grid")
    if noise.n_marks != model.n_marks:
        raise PreconditionError(
            f"noise has {noise.n_marks} jump marks, model expects {model.n_marks}"
        )
    if grid.delay_steps < max(mu.max_lag for mu in model.delay.measures):
        raise PreconditionError("grid prehistory is shorter than the model's delay")


def simulate_forward(model, control, noise, grid=None):
    """Simulate every particle of the forward equation.

    X_{k+1} = X_k + b dt + sigma dB_k + sum_j gamma(e_j) (count_kj - w_j dt),
    with coefficients at the left endpoint and the mean-field average of step k.

    Args:
        model: CoefficientModel
        control: ControlProcess on the grid
        noise: NoiseEnsemble on the grid
        grid: TimeGrid (defaults to the noise grid)

    Returns:
        ParticleEnsemble
    """
    grid = grid or noise.grid
    _check_inputs(model, control, noise, grid)
    started = time.time()

    n = noise.n_particles
    dt = grid.dt
    n_pre = grid.n_pre
    X = set_prehistory(Trajectory.zeros(grid, n), model.x0)
    values = X.values
    values[:, n_pre] = values[:, n_pre - 1]

    lifts = np.empty((n, grid.n_main, model.n_lift))
    mean_lift = np.empty((grid.n_main, model.n_lift))
    mean_phi = np.empty(grid.n_main)
    ens = ParticleEnsemble(model, control, noise, X, lifts, mean_lift, mean_phi)

    brownian = noise.brownian_increments
    jumps = noise.compensated_jumps()

    for k in range(grid.n_main):
        lifts[:, k] = lift_step(values, grid, k, model.delay)
        mean_lift[k] = lifts[:, k].mean(axis=0)
        mean_phi[k] = model.phi(values[:, n_pre + k]).mean()
        if k == grid.n_steps:
            break

        pt = ens.point(k)
        increment = model.b(pt) * dt + model.sigma(pt) * brownian[:, k]
        if model.n_marks:
            increment = increment + np.sum(model.gamma_matrix(pt) * jumps[:, k], axis=1)
        values[:, n_pre + k + 1] = values[:, n_pre + k] + increment

        bad = ~np.isfinite(values[:, n_pre + k + 1])
        if np.any(bad):
            particle = int(np.argmax(bad))
            raise SimulationError(
                f"non-finite state for particle {particle} at step {k + 1}",
                particle=particle, step=k + 1,
            )

    logger.info(f"Forward pass ({model.name}): {n} particles, {grid.n_steps} steps, {time.time() - started:.2f}s")
    return ens


def growth_flag(path, dt):
    """True when the running integral of `path` grows superlinearly over the last quarter."""
    n = len(path)
    if n < 8:
        return False
    running = np.concatenate([[0.0], np.cumsum(path[:-1]) * dt])
    start = (3 * (n - 1)) // 4
    middle = (start + n - 1) // 2
    early = running[middle] - running[start]
    late = running[n - 1] - running[middle]
    if late <= 0:
        return False
    # Halves may differ by one node
    late *= (middle - start) / max(n - 1 - middle, 1)
    return bool(late > DIVERGENCE_RATIO * max(early, 0.0) and late > 1e-300)


@dataclass
class NormSummary:
    l2: float
    weighted: float
    sup_weighted: float
    second_moment: np.ndarray
    second_moment_se: np.ndarray
    divergent: bool
    backward: dict = None
    adjoint: dict = None


def mean_square_norms(ens, kappa=0.0, triple=None, adjoint=None):
    """Mean-square and kappa-weighted norms of the state (and optionally Y, Z, K, p).

    Args:
        ens: ParticleEnsemble
        kappa: weight rate in e^{kappa t}
        triple: BackwardTriple to include (optional)
        adjoint: AdjointState to include (optional)

    Returns:
        NormSummary
    """
    grid = ens.grid
    dt = grid.dt
    weight = np.exp(kappa * grid.main_times)
    squares = ens.X.main ** 2
    moment = squares.mean(axis=0)

    summary = NormSummary(
        l2=float(moment[:-1].sum() * dt),
        weighted=float((weight * moment)[:-1].sum() * dt),
        sup_weighted=float(np.mean(np.max(weight * squares, axis=1))),
        second_moment=moment,
        second_moment_se=standard_error(squares),
        divergent=growth_flag(weight * moment, dt),
    )
    if triple is not None:
        weights = ens.model.jumps.weights
        jump_part = np.sum(triple.K ** 2 * weights, axis=2) if ens.model.n_marks else 0.0
        summary.backward = {
            'sup_weighted_y': float(np.mean(np.max(weight * triple.Y.main ** 2, axis=1))),
            'weighted_zk': float(np.mean(np.sum(weight[:-1] * (triple.Z ** 2 + jump_part), axis=1)) * dt),
        }
    if adjoint is not None:
        p_moment = (adjoint.p.main ** 2).mean(axis=0)
        summary.adjoint = {
            'sup_weighted_p': float(np.max(weight * p_moment)),
            'divergent_p': growth_flag(weight * p_moment, dt),
        }
    return summary
