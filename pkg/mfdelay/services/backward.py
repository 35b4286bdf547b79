"""Regression-based backward induction for (Y, Z, K)."""
import logging
import time
from dataclasses import dataclass

import numpy as np

from mfdelay.config import get_config
from mfdelay.errors import PreconditionError, SolverError
from mfdelay.models.paths import Trajectory
from mfdelay.utils.regression import polynomial_features, project

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RegressionBasis:
    """Polynomial features of X(t) and of the lifts that look into the past.

    Lifts of Dirac-at-0 measures duplicate X(t) and are left out; t itself is
    constant across particles at a node and adds nothing to the fit.
    """
    degree: int = None
    ridge: float = None

    def __post_init__(self):
        settings = get_config()
        if self.degree is None:
            object.__setattr__(self, 'degree', settings.BASIS_DEGREE)
        if self.ridge is None:
            object.__setattr__(self, 'ridge', settings.RIDGE)
        if self.degree < 0 or self.ridge < 0:
            raise PreconditionError("basis degree and ridge must be non-negative")

    def variables(self, ens, k):
        columns = [ens.state(k)]
        for i, mu in enumerate(ens.model.delay.measures):
            if mu.anticipates:
                columns.append(ens.lifts[:, k, i])
        return np.column_stack(columns)

    def features(self, ens, k):
        return polynomial_features(self.variables(ens, k), self.degree)

    def project(self, ens, k, targets):
        """E[targets | F_{t_k}] by least squares on the features at node k."""
        return project(self.features(ens, k), targets, self.ridge)


@dataclass(eq=False)
class BackwardTriple:
    """Y on the main grid, Z and K on steps.

    Y_cond[:, k] is E[Y_{k+1} | F_k], the value fed to the driver at step k;
    driver[:, k] is g evaluated at step k.
    """
    Y: Trajectory
    Y_cond: np.ndarray
    Z: np.ndarray
    K: np.ndarray
    driver: np.ndarray

    @property
    def Y0(self):
        return self.Y.main[:, 0]

    def point_arguments(self, k):
        """Y-side arguments of the coefficients at step k."""
        n_steps = self.Z.shape[1]
        y = self.Y_cond[:, k]
        if k < n_steps:
            return {'y': y, 'n': y.mean(), 'z': self.Z[:, k], 'k': self.K[:, k]}
        return {'y': y, 'n': y.mean()}


def regress_martingale_parts(basis, ens, k, centered, jumps, weights):
    """Z-like and K-like coefficients of a centred increment at step k.

    jumps holds the compensated counts of every step, shaped (n, steps, marks).
    """
    dt = ens.grid.dt
    targets = np.column_stack([centered * ens.noise.brownian_increments[:, k], centered[:, None] * jumps[:, k]])
    fitted = basis.project(ens, k, targets)
    return fitted[:, 0] / dt, fitted[:, 1:] / (weights * dt)


def solve_backward(model, ens, control, basis=None):
    """Backward induction from Y(T) = a X(T).

    Z_k = E[(Y_{k+1} - Ybar_k) dB_k] / dt, K_kj = E[(Y_{k+1} - Ybar_k) dN_kj] / (w_j dt),
    Y_k = Ybar_k + g(t_k, ..., y=Ybar_k, n=mean(Ybar_k), Z_k, K_k, u_k) dt,
    where Ybar_k = E[Y_{k+1} | F_k] by regression.

    Args:
        model: CoefficientModel
        ens: ParticleEnsemble simulated under `control`
        control: ControlProcess
        basis: RegressionBasis

    Returns:
        BackwardTriple
    """
    basis = basis or RegressionBasis()
    started = time.time()
    grid = ens.grid
    dt = grid.dt
    n, J = ens.n_particles, model.n_marks
    weights = model.jumps.weights
    jumps = ens.noise.compensated_jumps()

    Y = np.empty((n, grid.n_main))
    Y_cond = np.empty((n, grid.n_main))
    Z = np.zeros((n, grid.n_steps))
    K = np.zeros((n, grid.n_steps, J))
    driver = np.zeros((n, grid.n_steps))

    Y[:, -1] = model.a * ens.state(grid.n_steps)
    Y_cond[:, -1] = Y[:, -1]

    for k in range(grid.n_steps - 1, -1, -1):
        following = Y[:, k + 1]
        ybar = basis.project(ens, k, following)
        Z[:, k], K[:, k] = regress_martingale_parts(basis, ens, k, following - ybar, jumps, weights)
        pt = ens.point(k, y=ybar, n=ybar.mean(), z=Z[:, k], k=K[:, k])
        driver[:, k] = model.g(pt)
        Y_cond[:, k] = ybar
        Y[:, k] = ybar + driver[:, k] * dt
        if not np.all(np.isfinite(Y[:, k])):
            raise SolverError(f"non-finite Y at step {k}")

    logger.info(f"Backward pass ({model.name}): {time.time() - started:.2f}s")
    return BackwardTriple(
        Y=Trajectory(grid, Y, main_only=True), Y_cond=Y_cond, Z=Z, K=K, driver=driver,
    )


def bsde_consistency_check(triple, model, ens, control, t, t_prime, basis=None):
    """RMS of Y(t) - E[Y(T') + sum of g dt over [t, T') | F_t]."""
    basis = basis or RegressionBasis()
    grid = ens.grid
    k1, k2 = grid.main_index(t), grid.main_index(t_prime)
    if k1 > k2:
        raise PreconditionError(f"need t <= T', got t = {t}, T' = {t_prime}")
    if k1 == k2:
        return 0.0
    target = triple.Y.main[:, k2] + triple.driver[:, k1:k2].sum(axis=1) * grid.dt
    residual = triple.Y.main[:, k1] - basis.project(ens, k1, target)
    return float(np.sqrt(np.mean(residual ** 2)))


def objective_values(model, ens, triple, control):
    """Per-particle performance: sum of f dt + h1(Y(0)) (+ h2 at T in finite mode)."""
    grid = ens.grid
    total = np.zeros(ens.n_particles)
    if not getattr(model.f, 'is_zero', False):
        for k in range(grid.n_steps):
            pt = ens.point(k, **triple.point_arguments(k))
            total += model.f(pt) * grid.dt
    total += model.h1(triple.Y0)
    if model.horizon.is_finite and not getattr(model.h2, 'is_zero', False):
        x_T = ens.state(grid.n_steps)
        total += model.h2(x_T, np.full(x_T.shape, model.psi(x_T).mean()))
    return total
