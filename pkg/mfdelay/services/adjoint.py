"""Adjoint equations: forward lambda and the time-advanced backward (p, q, r)."""
import logging
import time
from dataclasses import dataclass

import numpy as np

from mfdelay.errors import SolverError
from mfdelay.models.delay import anticipated_step
from mfdelay.models.paths import Trajectory
from mfdelay.services.backward import (
    RegressionBasis, regress_martingale_parts, solve_backward,
)
from mfdelay.services.forward import growth_flag, simulate_forward
from mfdelay.services.hamiltonian import grad_H, solution_point

logger = logging.getLogger(__name__)

# Upsilon-tilde = orientation * Upsilon, so that dp = -E[Upsilon-tilde | F_t] dt in both modes
UPSILON_ORIENTATION = {'finite': -1.0, 'infinite': 1.0}


@dataclass(eq=False)
class AdjointState:
    """Adjoint paths.

    p_cond[:, k] = E[p_{k+1} | F_k] is the p used inside H at step k.
    dH_dx, dH_dm, dH_du hold the H derivatives per step; the last node is 0.
    upsilon holds Upsilon before conditioning, in the orientation of the mode.
    """
    p: Trajectory
    p_cond: np.ndarray
    q: np.ndarray
    r: np.ndarray
    lam: Trajectory
    upsilon: np.ndarray
    dH_dx: np.ndarray
    dH_dm: np.ndarray
    dH_du: np.ndarray
    decay_ok: bool = True


def solve_lambda_forward(model, triple, ens, control):
    """Euler scheme for lambda from lambda(0) = h1'(Y(0)).

    lambda_{k+1} = lambda_k + (dH/dy + E[dH/dn]) dt + dH/dz dB_k + sum_j grad_k H(e_j) dN_kj
    """
    grid = ens.grid
    dt = grid.dt
    lam = np.empty((ens.n_particles, grid.n_main))
    lam[:, 0] = model.scalar_partial('h1', 'y', triple.Y0)
    brownian = ens.noise.brownian_increments
    jumps = ens.noise.compensated_jumps()

    for k in range(grid.n_steps):
        pt = solution_point(ens, triple, k, lam=lam[:, k])
        drift = grad_H(model, pt, 'y') + grad_H(model, pt, 'n').mean()
        step = lam[:, k] + drift * dt + grad_H(model, pt, 'z') * brownian[:, k]
        if model.n_marks:
            step = step + np.sum(grad_H(model, pt, 'k') * jumps[:, k], axis=1)
        lam[:, k + 1] = step
        if not np.all(np.isfinite(step)):
            raise SolverError(f"non-finite lambda at step {k + 1}")

    return Trajectory(grid, lam, main_only=True)


def compute_upsilon(model, dH_dx, dH_dm, k, state, mode=None, part='all'):
    """Upsilon at step k from H-derivative paths, horizon clamping on.

    Finite:   -sum_i conv(dH/dx_i, mu_i) - E[dH/dm] Phi'(X(t))
    Infinite: +sum_i conv(dH/dx_i + E[dH/dm_i], mu_i)

    Args:
        dH_dx: (n, n_main, N) derivative paths
        dH_dm: (n, n_main, M) derivative paths
        k: step index
        state: X(t_k) per particle (used by Phi')
        part: 'all', 'adapted' (lag-0 atoms) or 'future' (lags > 0)
    """
    mode = mode or model.mode
    n = dH_dx.shape[0]
    total = np.zeros(n)
    if mode == 'finite':
        for i, mu in enumerate(model.delay.measures):
            total -= anticipated_step(dH_dx[:, :, i], k, mu, part=part)
        if part != 'future':
            total -= dH_dm[:, k, 0].mean() * model.scalar_partial('phi', 'x', state)
        return total

    mean_m = dH_dm.mean(axis=0)
    for i, mu in enumerate(model.delay.measures):
        total += anticipated_step(dH_dx[:, :, i] + mean_m[None, :, i], k, mu, part=part)
    return total


def solve_adjoint_backward(model, ens, triple, lam, control, basis=None):
    """Backward induction for (p, q, r).

    p_k = E[p_{k+1} | F_k] + E[Upsilon-tilde_k | F_k] dt, with q and r from the
    centred increment as for Z and K. Only the time-advanced part of
    Upsilon-tilde needs the regression.

    Terminal: finite mode p(T) = a lam(T) + dh2/dx + E[dh2/dn] psi'(X(T));
    infinite mode p(T_max) = a lam(T_max), which is 0 for the default a = 0.
    """
    basis = basis or RegressionBasis()
    started = time.time()
    grid = ens.grid
    dt = grid.dt
    n, J = ens.n_particles, model.n_marks
    weights = model.jumps.weights
    jumps = ens.noise.compensated_jumps()
    orientation = UPSILON_ORIENTATION[model.mode]
    lam_values = lam.values

    p = np.empty((n, grid.n_main))
    p_cond = np.empty((n, grid.n_main))
    q = np.zeros((n, grid.n_steps))
    r = np.zeros((n, grid.n_steps, J))
    upsilon = np.zeros((n, grid.n_steps))
    dH_dx = np.zeros((n, grid.n_main, model.n_lift))
    dH_dm = np.zeros((n, grid.n_main, model.m_dim))
    dH_du = np.zeros((n, grid.n_main))

    x_T = ens.state(grid.n_steps)
    p_T = model.a * lam_values[:, -1]
    if model.horizon.is_finite:
        n_T = np.full(x_T.shape, model.psi(x_T).mean())
        p_T = (
            p_T
            + model.scalar_partial('h2', 'x', x_T, n_T)
            + model.scalar_partial('h2', 'n', x_T, n_T).mean() * model.scalar_partial('psi', 'x', x_T)
        )
    p[:, -1] = p_T
    p_cond[:, -1] = p_T

    for k in range(grid.n_steps - 1, -1, -1):
        following = p[:, k + 1]
        pbar = basis.project(ens, k, following)
        q[:, k], r[:, k] = regress_martingale_parts(basis, ens, k, following - pbar, jumps, weights)

        pt = solution_point(ens, triple, k, p=pbar, q=q[:, k], r=r[:, k], lam=lam_values[:, k])
        dH_dx[:, k] = grad_H(model, pt, 'x')
        dH_dm[:, k] = grad_H(model, pt, 'm')
        dH_du[:, k] = grad_H(model, pt, 'u')

        state = ens.state(k)
        adapted = orientation * compute_upsilon(model, dH_dx, dH_dm, k, state, part='adapted')
        future = orientation * compute_upsilon(model, dH_dx, dH_dm, k, state, part='future')
        upsilon[:, k] = orientation * (adapted + future)
        if model.delay.anticipates:
            future = basis.project(ens, k, future)

        p_cond[:, k] = pbar
        p[:, k] = pbar + (adapted + future) * dt
        if not np.all(np.isfinite(p[:, k])):
            raise SolverError(f"non-finite p at step {k}")

    decay_ok = True
    if not model.horizon.is_finite:
        weight = np.exp(model.horizon.kappa * grid.main_times)
        decay_ok = not growth_flag(weight * (p ** 2).mean(axis=0), dt)
        if not decay_ok:
            logger.warning(f"Adjoint p of '{model.name}' grows over the last quarter of the horizon")

    logger.info(f"Adjoint pass ({model.name}): {time.time() - started:.2f}s")
    return AdjointState(
        p=Trajectory(grid, p, main_only=True), p_cond=p_cond, q=q, r=r, lam=lam,
        upsilon=upsilon, dH_dx=dH_dx, dH_dm=dH_dm, dH_du=dH_du, decay_ok=decay_ok,
    )


@dataclass(eq=False)
class SystemSolution:
    ens: object
    triple: object
    adjoint: AdjointState

    @property
    def lam(self):
        return self.adjoint.lam


def solve_system(model, control, noise, basis=None):
    """Forward, backward, lambda and p for one control on one noise ensemble."""
    basis = basis or RegressionBasis()
    ens = simulate_forward(model, control, noise)
    triple = solve_backward(model, ens, control, basis)
    lam = solve_lambda_forward(model, triple, ens, control)
    adjoint = solve_adjoint_backward(model, ens, triple, lam, control, basis)
    return SystemSolution(ens, triple, adjoint)
