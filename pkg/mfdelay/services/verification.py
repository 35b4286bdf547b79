"""Numerical checks of the necessary and sufficient maximum principles."""
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from mfdelay.config import get_config
from mfdelay.errors import GridError, PreconditionError, SimulationError
from mfdelay.models.coefficients import HamiltonianPoint
from mfdelay.models.delay import anticipated_step, lift_step, segment_step
from mfdelay.models.noise import sample_noise
from mfdelay.models.paths import GRID_TOLERANCE, Trajectory, make_grid
from mfdelay.services.adjoint import solve_system
from mfdelay.services.backward import (
    RegressionBasis, objective_values, regress_martingale_parts, solve_backward,
)
from mfdelay.services.forward import simulate_forward
from mfdelay.services.hamiltonian import eval_H, solution_point
from mfdelay.utils.regression import log_slope, standard_error

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Perturbation:
    """Deterministic bounded control direction on the main grid."""
    grid: object
    values: np.ndarray
    bound: float = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != (self.grid.n_main,):
            raise GridError(f"perturbation needs {self.grid.n_main} values, got shape {values.shape}")
        bound = float(np.max(np.abs(values))) if self.bound is None else float(self.bound)
        if np.any(np.abs(values) > bound + GRID_TOLERANCE):
            raise PreconditionError(f"perturbation exceeds its bound {bound}")
        object.__setattr__(self, 'values', values)
        object.__setattr__(self, 'bound', bound)

    @classmethod
    def bump(cls, grid, t0, h, alpha=1.0):
        """alpha on [t0, t0 + h), zero elsewhere."""
        t = grid.main_times
        inside = (t >= t0 - GRID_TOLERANCE) & (t < t0 + h - GRID_TOLERANCE)
        return cls(grid, alpha * inside.astype(float), abs(alpha))

    @classmethod
    def zero(cls, grid):
        return cls(grid, np.zeros(grid.n_main), 0.0)

    @property
    def trajectory(self):
        return Trajectory(self.grid, self.values, main_only=True)

    def check_admissible(self, control, s_max):
        """Raise unless control + s*eta stays in U for |s| <= s_max."""
        lo, hi = control.bounds
        for s in (-s_max, s_max):
            shifted = control.values + s * self.values
            if np.any(shifted < lo - GRID_TOLERANCE) or np.any(shifted > hi + GRID_TOLERANCE):
                raise PreconditionError(
                    f"control +/- {s_max} * eta leaves the admissible interval [{lo}, {hi}]"
                )


@dataclass(frozen=True)
class InformationFlow:
    """Controller information: everything (full) or the past up to (t - lag)+."""
    mode: str = 'full'
    lag: float = 0.0

    def __post_init__(self):
        if self.mode not in ('full', 'delayed'):
            raise PreconditionError(f"information mode must be 'full' or 'delayed', got '{self.mode}'")
        if self.lag < 0:
            raise PreconditionError(f"information lag must be non-negative, got {self.lag}")

    @classmethod
    def full(cls):
        return cls('full', 0.0)

    @classmethod
    def delayed(cls, lag):
        return cls('delayed', float(lag))

    def lag_steps(self, grid):
        steps = round(self.lag / grid.dt)
        if abs(steps * grid.dt - self.lag) > GRID_TOLERANCE * max(1.0, self.lag):
            raise GridError(f"information lag {self.lag} is not a multiple of dt = {grid.dt}")
        return steps

    def conditional(self, basis, ens, k, targets):
        """E[targets | G_{t_k}]; targets at step k are already F_{t_k}-measurable."""
        if self.mode == 'full':
            return np.asarray(targets, dtype=float)
        return basis.project(ens, max(k - self.lag_steps(ens.grid), 0), targets)


@dataclass(eq=False)
class DerivativeProcesses:
    """First variations along a control direction; X is zero on the prehistory."""
    X: Trajectory
    Y: Trajectory
    Y_cond: np.ndarray
    Z: np.ndarray
    K: np.ndarray
    lifts: np.ndarray
    mean_field: np.ndarray


class VerificationReport:
    """Pass/fail record; each flag comes from a recorded comparison."""

    def __init__(self):
        self.checks = []
        self.residual_path = None
        self.gradient_pairs = []
        self.transversality_table = None
        self.concavity_violations = None
        self.fubini_gap = None
        self.scaling_slope = None

    def record(self, name, measured, threshold, passed=None, detail=''):
        """Add a check; passes when measured <= threshold unless `passed` is given."""
        if passed is None:
            passed = bool(np.isfinite(measured) and measured <= threshold)
        self.checks.append({
            'name': name,
            'passed': bool(passed),
            'measured': float(measured),
            'threshold': float(threshold),
            'detail': detail,
        })
        return bool(passed)

    @property
    def passed(self):
        return all(check['passed'] for check in self.checks)

    def to_dict(self):
        return {
            'passed': self.passed,
            'checks': list(self.checks),
            'concavity_violations': self.concavity_violations,
            'fubini_gap': self.fubini_gap,
            'scaling_slope': self.scaling_slope,
        }


def _linearized(model, name, pt, lift_dir, mean_dir, eta, mark=None):
    """grad_x c . lift_dir + grad_m c . mean_dir + dc/du * eta for coefficient c."""
    value = np.sum(model.partial(name, 'x', pt, mark) * lift_dir, axis=1)
    value = value + model.partial(name, 'm', pt, mark) @ mean_dir
    return value + model.partial(name, 'u', pt, mark) * eta


def _mean_field_direction(model, ens, Xd, lifts_d, k):
    if model.horizon.is_finite:
        state = ens.state(k)
        return np.array([np.mean(model.scalar_partial('phi', 'x', state) * Xd[:, ens.grid.n_pre + k])])
    return lifts_d[:, k].mean(axis=0)


def simulate_derivative_processes(model, control, eta, ens, triple, basis=None):
    """Euler scheme for the system linearized along eta.

    Coefficient gradients are taken along the base solution; mean-field
    terms use ensemble averages of the derivative lifts.
    """
    basis = basis or RegressionBasis()
    eta = eta.values if isinstance(eta, Perturbation) else np.asarray(eta, dtype=float)
    grid = ens.grid
    dt = grid.dt
    n, n_pre = ens.n_particles, grid.n_pre
    brownian = ens.noise.brownian_increments
    jumps = ens.noise.compensated_jumps()

    Xd = np.zeros((n, grid.n_nodes))
    lifts_d = np.zeros((n, grid.n_main, model.n_lift))
    mean_d = np.zeros((grid.n_main, model.m_dim))

    for k in range(grid.n_main):
        lifts_d[:, k] = lift_step(Xd, grid, k, model.delay)
        mean_d[k] = _mean_field_direction(model, ens, Xd, lifts_d, k)
        if k == grid.n_steps:
            break
        pt = ens.point(k)
        increment = _linearized(model, 'b', pt, lifts_d[:, k], mean_d[k], eta[k]) * dt
        increment = increment + _linearized(model, 'sigma', pt, lifts_d[:, k], mean_d[k], eta[k]) * brownian[:, k]
        for j, e in enumerate(model.jumps.marks):
            increment = increment + _linearized(model, 'gamma', pt, lifts_d[:, k], mean_d[k], eta[k], mark=e) * jumps[:, k, j]
        Xd[:, n_pre + k + 1] = Xd[:, n_pre + k] + increment
        bad = ~np.isfinite(Xd[:, n_pre + k + 1])
        if np.any(bad):
            particle = int(np.argmax(bad))
            raise SimulationError(
                f"non-finite derivative state for particle {particle} at step {k + 1}",
                particle=particle, step=k + 1,
            )

    weights = model.jumps.weights
    Yd = np.zeros((n, grid.n_main))
    Yd_cond = np.zeros((n, grid.n_main))
    Zd = np.zeros((n, grid.n_steps))
    Kd = np.zeros((n, grid.n_steps, model.n_marks))
    Yd[:, -1] = model.a * Xd[:, -1]
    Yd_cond[:, -1] = Yd[:, -1]
    for k in range(grid.n_steps - 1, -1, -1):
        following = Yd[:, k + 1]
        ybar = basis.project(ens, k, following)
        Zd[:, k], Kd[:, k] = regress_martingale_parts(basis, ens, k, following - ybar, jumps, weights)
        pt = solution_point(ens, triple, k)
        change = _linearized(model, 'g', pt, lifts_d[:, k], mean_d[k], eta[k])
        change = change + model.partial('g', 'y', pt) * ybar + model.partial('g', 'n', pt) * ybar.mean()
        change = change + model.partial('g', 'z', pt) * Zd[:, k]
        if model.n_marks:
            change = change + np.sum(model.partial('g', 'k', pt) * Kd[:, k], axis=1)
        Yd_cond[:, k] = ybar
        Yd[:, k] = ybar + change * dt

    return DerivativeProcesses(
        X=Trajectory(grid, Xd), Y=Trajectory(grid, Yd, main_only=True), Y_cond=Yd_cond,
        Z=Zd, K=Kd, lifts=lifts_d, mean_field=mean_d,
    )


def directional_derivative(model, ens, triple, deriv, eta):
    """Per-particle J'(pi) eta from the derivative processes."""
    eta = eta.values if isinstance(eta, Perturbation) else np.asarray(eta, dtype=float)
    grid = ens.grid
    total = np.zeros(ens.n_particles)
    if not getattr(model.f, 'is_zero', False):
        for k in range(grid.n_steps):
            pt = solution_point(ens, triple, k)
            change = _linearized(model, 'f', pt, deriv.lifts[:, k], deriv.mean_field[k], eta[k])
            ybar = deriv.Y_cond[:, k]
            change = change + model.partial('f', 'y', pt) * ybar + model.partial('f', 'n', pt) * ybar.mean()
            change = change + model.partial('f', 'z', pt) * deriv.Z[:, k]
            if model.n_marks:
                change = change + np.sum(model.partial('f', 'k', pt) * deriv.K[:, k], axis=1)
            total += change * grid.dt
    total += model.scalar_partial('h1', 'y', triple.Y0) * deriv.Y.main[:, 0]
    if model.horizon.is_finite and not getattr(model.h2, 'is_zero', False):
        x_T = ens.state(grid.n_steps)
        xd_T = deriv.X.main[:, -1]
        n_T = np.full(x_T.shape, model.psi(x_T).mean())
        total += model.scalar_partial('h2', 'x', x_T, n_T) * xd_T
        total += model.scalar_partial('h2', 'n', x_T, n_T) * np.mean(model.scalar_partial('psi', 'x', x_T) * xd_T)
    return total


def _objective(model, control, noise, basis):
    ens = simulate_forward(model, control, noise)
    triple = solve_backward(model, ens, control, basis)
    return objective_values(model, ens, triple, control)


@dataclass
class ScalingResult:
    alphas: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    slope: float


def perturbation_scaling(model, control, eta, noise, alphas=None):
    """E[sup_t |X^{pi + alpha eta} - X^pi|^2] for each alpha, with its log-log slope."""
    alphas = np.asarray(alphas if alphas is not None else get_config().SCALING_ALPHAS, dtype=float)
    eta = eta.values if isinstance(eta, Perturbation) else np.asarray(eta, dtype=float)
    base = simulate_forward(model, control, noise).X.main
    values, errors = [], []
    for alpha in alphas:
        moved = simulate_forward(model, control.shifted(eta, alpha), noise).X.main
        sup_sq = np.max((moved - base) ** 2, axis=1)
        values.append(sup_sq.mean())
        errors.append(standard_error(sup_sq))
    values = np.asarray(values)
    slope = float(np.polyfit(np.log(alphas), np.log(values), 1)[0]) if np.all(values > 0) else float('nan')
    return ScalingResult(alphas, values, np.asarray(errors), slope)


@dataclass
class GradientPair:
    lhs: float
    rhs: float
    ci: float
    derivative: float = float('nan')

    def agrees(self, slack=0.0):
        return abs(self.lhs - self.rhs) <= self.ci + slack


def gradient_identity_check(model, control, eta, s_fd, seeds, n_particles=None, basis=None):
    """Central finite difference of J against E[sum dH/du eta dt] on common noise.

    Args:
        model: CoefficientModel
        control: ControlProcess
        eta: Perturbation
        s_fd: finite-difference step
        seeds: seeds of the noise ensembles to pool
        n_particles: particles per ensemble

    Returns:
        GradientPair(lhs, rhs, ci, derivative)
    """
    basis = basis or RegressionBasis()
    n_particles = n_particles or get_config().N_PARTICLES
    eta.check_admissible(control, s_fd)
    dt = control.grid.dt
    fd_parts, rhs_parts, derivative_parts = [], [], []
    for seed in seeds:
        noise = sample_noise(control.grid, model.jumps, n_particles, seed)
        solution = solve_system(model, control, noise, basis)
        rhs_parts.append(np.sum(solution.adjoint.dH_du[:, :-1] * eta.values[:-1], axis=1) * dt)
        plus = _objective(model, control.shifted(eta.values, s_fd), noise, basis)
        minus = _objective(model, control.shifted(eta.values, -s_fd), noise, basis)
        fd_parts.append((plus - minus) / (2.0 * s_fd))
        deriv = simulate_derivative_processes(model, control, eta, solution.ens, solution.triple, basis)
        derivative_parts.append(directional_derivative(model, solution.ens, solution.triple, deriv, eta))

    fd = np.concatenate(fd_parts)
    rhs = np.concatenate(rhs_parts)
    ci = get_config().STAT_SIGMAS * standard_error(fd - rhs)
    pair = GradientPair(float(fd.mean()), float(rhs.mean()), float(ci), float(np.concatenate(derivative_parts).mean()))
    logger.debug(f"Gradient identity: lhs={pair.lhs:.6g} rhs={pair.rhs:.6g} ci={pair.ci:.3g}")
    return pair


@dataclass
class ResidualPath:
    times: np.ndarray
    residual: np.ndarray
    stderr: np.ndarray
    conditional_rms: np.ndarray

    @property
    def sup(self):
        return float(np.max(np.abs(self.residual)))

    def threshold(self, sigmas=None, slack=None):
        settings = get_config()
        sigmas = settings.RESIDUAL_SIGMAS if sigmas is None else sigmas
        slack = settings.RESIDUAL_SLACK if slack is None else slack
        return float(sigmas * np.max(self.stderr) + slack)


def necessary_residual(model, control, adjoint, flow=None, ens=None, basis=None):
    """Estimate of E[dH/du(t) | G_t] on every step.

    Full information uses the cross-sectional average; delayed information
    first regresses on features at (t - lag)+ and needs `ens`.
    """
    flow = flow or InformationFlow.full()
    values = adjoint.dH_du[:, :-1]
    grid = control.grid
    if flow.mode == 'delayed':
        if ens is None:
            raise PreconditionError("delayed information needs the particle ensemble")
        basis = basis or RegressionBasis()
        values = np.column_stack([
            flow.conditional(basis, ens, k, values[:, k]) for k in range(values.shape[1])
        ])
    return ResidualPath(
        times=grid.main_times[:-1],
        residual=values.mean(axis=0),
        stderr=standard_error(values),
        conditional_rms=np.sqrt(np.mean(values ** 2, axis=0)),
    )


@dataclass
class SufficiencyReport:
    n_probe: int
    concavity_violations: int
    terminal_violations: int
    u_curvature: str
    degenerate_max: bool
    max_attained_fraction: float
    J_candidate: float
    J_alternatives: list = field(default_factory=list)
    candidate_best: bool = True
    candidate_least: bool = True


def _probe_pairs(model, solution, candidate, n_probe, rng, variables):
    ens, triple, adjoint = solution.ens, solution.triple, solution.adjoint
    grid = ens.grid
    n = ens.n_particles
    steps = rng.integers(0, grid.n_steps, n_probe)
    other_steps = rng.integers(0, grid.n_steps, n_probe)
    first = rng.integers(0, n, n_probe)
    second = rng.integers(0, n, n_probe)

    lo, hi = model.control_bounds
    if not (np.isfinite(lo) and np.isfinite(hi)):
        lo, hi = candidate.values.min() - 1.0, candidate.values.max() + 1.0

    mean_fields = np.stack([ens.mean_field(k) for k in range(grid.n_main)])

    def side(rows, nodes, u):
        return {
            'x': ens.lifts[rows, steps],
            'm': mean_fields[nodes],
            'y': triple.Y_cond[rows, steps],
            'z': triple.Z[rows, steps],
            'k': triple.K[rows, steps],
            'u': u,
        }

    one = side(first, steps, rng.uniform(lo, hi, n_probe))
    two = side(second, other_steps, rng.uniform(lo, hi, n_probe))
    for name in one:
        if name not in variables:
            two[name] = one[name]

    common = {
        't': steps * grid.dt,
        'n_marks': model.n_marks,
        'n': triple.Y_cond[:, steps].mean(axis=0),
        'p': adjoint.p_cond[first, steps],
        'q': adjoint.q[first, steps],
        'r': adjoint.r[first, steps],
        'lam': adjoint.lam.values[first, steps],
    }
    return one, two, common


def _midpoint_defects(model, one, two, common):
    middle = {name: 0.5 * (one[name] + two[name]) for name in one}
    with np.errstate(divide='ignore', invalid='ignore'):
        values = [eval_H(model, HamiltonianPoint.build(**common, **side)) for side in (one, two, middle)]
    h1, h2, hm = values
    defect = hm - 0.5 * (h1 + h2)
    scale = 1.0 + np.abs(h1) + np.abs(h2)
    return defect, scale


def _concavity_probe(model, solution, candidate, n_probe, rng, variables):
    settings = get_config()
    tol = settings.CONCAVITY_TOLERANCE
    one, two, common = _probe_pairs(model, solution, candidate, n_probe, rng, variables)
    defect, scale = _midpoint_defects(model, one, two, common)
    violations = int(np.sum(~(defect >= -tol * scale)))

    only_u = dict(one)
    only_u['u'] = two['u']
    defect_u, scale_u = _midpoint_defects(model, one, only_u, common)
    if np.all(defect_u >= -tol * scale_u):
        curvature = 'flat' if np.all(np.abs(defect_u) <= tol * scale_u) else 'concave'
    elif np.all(defect_u <= tol * scale_u):
        curvature = 'convex'
    else:
        curvature = 'mixed'

    terminal = 0
    if 'y' in variables:
        y1, y2 = one['y'], two['y']
        gap = model.h1(0.5 * (y1 + y2)) - 0.5 * (model.h1(y1) + model.h1(y2))
        terminal += int(np.sum(~(gap >= -tol * (1.0 + np.abs(model.h1(y1)) + np.abs(model.h1(y2))))))
    if 'x' in variables and model.horizon.is_finite:
        x1, x2 = one['x'][:, 0], two['x'][:, 0]
        nn = common['n']
        gap = model.h2(0.5 * (x1 + x2), nn) - 0.5 * (model.h2(x1, nn) + model.h2(x2, nn))
        terminal += int(np.sum(~(gap >= -tol * (1.0 + np.abs(model.h2(x1, nn)) + np.abs(model.h2(x2, nn))))))
    return violations, terminal, curvature


def _maximum_probe(model, solution, candidate, flow, basis, v_points, node_stride):
    ens, triple, adjoint = solution.ens, solution.triple, solution.adjoint
    grid = ens.grid
    lo, hi = model.control_bounds
    if not (np.isfinite(lo) and np.isfinite(hi)):
        lo, hi = candidate.values.min() - 1.0, candidate.values.max() + 1.0
    grid_v = np.linspace(lo, hi, v_points)
    spacing = grid_v[1] - grid_v[0] if v_points > 1 else 0.0
    stride = node_stride or max(1, grid.n_steps // 20)

    attained, total, degenerate_all = 0, 0, True
    for k in range(0, grid.n_steps, stride):
        pt = solution_point(
            ens, triple, k, p=adjoint.p_cond[:, k], q=adjoint.q[:, k], r=adjoint.r[:, k],
            lam=adjoint.lam.values[:, k],
        )
        with np.errstate(divide='ignore', invalid='ignore'):
            surface = np.column_stack([
                eval_H(model, pt.with_values(u=np.full(pt.size, v))) for v in grid_v
            ])
        surface = np.where(np.isnan(surface), -np.inf, surface)
        if flow.mode == 'delayed':
            finite = np.where(np.isfinite(surface), surface, 0.0)
            surface = np.where(np.isfinite(surface), flow.conditional(basis, ens, k, finite), surface)
        top = surface.max(axis=1)
        span = top - surface.min(axis=1)
        flat = np.isfinite(span) & (span <= 1e-12 * (1.0 + np.abs(top)))
        degenerate_all = degenerate_all and bool(np.all(flat))
        best = grid_v[np.argmax(surface, axis=1)]
        target = np.broadcast_to(candidate.at_step(k), best.shape)
        ok = flat | (np.abs(best - target) <= spacing + GRID_TOLERANCE)
        attained += int(np.sum(ok))
        total += ok.size
    return degenerate_all, attained / max(total, 1)


def sufficient_conditions_probe(model, candidate, alternatives, n_probe=None, noise=None,
                                basis=None, flow=None, variables=('x', 'm', 'y', 'z', 'k', 'u'),
                                v_points=None, node_stride=None, seed=0, solution=None):
    """Concavity, conditional-maximum and objective-comparison probes around a candidate.

    Args:
        model: CoefficientModel
        candidate: ControlProcess under test
        alternatives: ControlProcess list compared on the same noise
        n_probe: number of random point pairs for the concavity probe
        noise: NoiseEnsemble (needed unless `solution` is given)
        variables: arguments of H varied by the concavity probe
        v_points: size of the control grid over U

    Returns:
        SufficiencyReport
    """
    settings = get_config()
    basis = basis or RegressionBasis()
    flow = flow or InformationFlow.full()
    n_probe = n_probe or settings.N_PROBE
    v_points = v_points or settings.V_GRID_POINTS
    if solution is None:
        if noise is None:
            raise PreconditionError("sufficient_conditions_probe needs noise or a solved system")
        solution = solve_system(model, candidate, noise, basis)
    noise = solution.ens.noise
    rng = np.random.default_rng(seed)

    violations, terminal, curvature = _concavity_probe(model, solution, candidate, n_probe, rng, set(variables))
    degenerate, fraction = _maximum_probe(model, solution, candidate, flow, basis, v_points, node_stride)

    own = objective_values(model, solution.ens, solution.triple, candidate)
    report = SufficiencyReport(
        n_probe=n_probe,
        concavity_violations=violations,
        terminal_violations=terminal,
        u_curvature=curvature,
        degenerate_max=degenerate,
        max_attained_fraction=fraction,
        J_candidate=float(own.mean()),
    )
    sigmas = settings.STAT_SIGMAS
    for alternative in alternatives:
        other = _objective(model, alternative, noise, basis)
        difference = own - other
        se = float(standard_error(difference))
        report.J_alternatives.append((float(other.mean()), se))
        report.candidate_best &= bool(difference.mean() >= -sigmas * se - GRID_TOLERANCE)
        report.candidate_least &= bool(difference.mean() <= sigmas * se + GRID_TOLERANCE)
    logger.info(
        f"Sufficiency probe: {violations}/{n_probe} concavity violations, "
        f"u-curvature {curvature}, maximum attained at {fraction:.0%} of probes"
    )
    return report


def transversality_check(model_for_horizon, candidate_for, alternative_for, T_list,
                         n_particles, seed, basis=None):
    """Boundary pairings at each truncation horizon.

    Args:
        model_for_horizon: T -> (CoefficientModel, TimeGrid)
        candidate_for: (model, grid, noise) -> candidate ControlProcess
        alternative_for: (model, grid) -> alternative ControlProcess
        T_list: horizons
        n_particles: particles per horizon
        seed: noise seed

    Returns:
        (DataFrame with one row per T, fitted log-slope of |E[p(T) X_alt(T)]|)
    """
    basis = basis or RegressionBasis()
    rows = []
    for T in T_list:
        model, grid = model_for_horizon(T)
        noise = sample_noise(grid, model.jumps, n_particles, seed)
        candidate = candidate_for(model, grid, noise)
        alternative = alternative_for(model, grid)
        solution = solve_system(model, candidate, noise, basis)
        other = simulate_forward(model, alternative, noise)
        eta = Perturbation(grid, alternative.values - candidate.values)
        deriv = simulate_derivative_processes(model, candidate, eta, solution.ens, solution.triple, basis)

        p_T = solution.adjoint.p.main[:, -1]
        lam_T = solution.adjoint.lam.main[:, -1]
        x_hat = solution.ens.state(grid.n_steps)
        x_alt = other.state(grid.n_steps)
        # Y(T) = a X(T) for both controls
        columns = {
            'p_dx': p_T * (x_hat - x_alt),
            'lam_dy': lam_T * model.a * (x_hat - x_alt),
            'p_calx': p_T * deriv.X.main[:, -1],
            'lam_caly': lam_T * deriv.Y.main[:, -1],
            'pX': p_T * x_alt,
        }
        row = {'T': float(T)}
        for name, samples in columns.items():
            row[name] = float(samples.mean())
            row[f"{name}_se"] = float(standard_error(samples))
        rows.append(row)
        logger.info(f"Transversality at T={T}: E[p(T) X(T)] = {row['pX']:.6g}")

    table = pd.DataFrame(rows)
    slope = log_slope(table['T'], table['pX'])
    return table, slope


def fubini_identity_check(phi, X, mu, dt=None):
    """|sum X(t) conv(phi)(t) - sum phi(t) seg(X)(t)| dt, X zero before time 0.

    phi and X are main-grid values (or Trajectories, whose grid supplies dt).
    """
    if isinstance(phi, Trajectory):
        dt = phi.grid.dt
        phi = phi.main
    if isinstance(X, Trajectory):
        dt = X.grid.dt if dt is None else dt
        X = X.main
    if dt is None:
        raise PreconditionError("fubini_identity_check needs dt for plain arrays")
    phi = np.asarray(phi, dtype=float)
    X = np.asarray(X, dtype=float)
    n_main = X.shape[-1]

    grid = make_grid((n_main - 1) * dt, dt, max(mu.max_lag, 0) * dt)
    padded = np.zeros(grid.n_nodes)
    padded[grid.n_pre:] = X
    forward = sum(X[k] * anticipated_step(phi, k, mu) for k in range(n_main))
    backward = sum(phi[k] * segment_step(padded, grid, k, mu) for k in range(n_main))
    return float(abs(forward - backward) * dt)


def ascent_direction_check(model, control, noise, s_fd=None, threshold=None, basis=None):
    """Look for an ascent direction from a control with large residual.

    eta = sign(residual) on the steps where |residual| exceeds `threshold`.

    Returns:
        (finite difference of J along eta, its CI half-width, ascent found)
    """
    settings = get_config()
    basis = basis or RegressionBasis()
    s_fd = s_fd or settings.FD_CONTROL_STEP
    solution = solve_system(model, control, noise, basis)
    residual = necessary_residual(model, control, solution.adjoint)
    if threshold is None:
        threshold = residual.threshold()
    grid = control.grid
    direction = np.zeros(grid.n_main)
    large = np.abs(residual.residual) > threshold
    direction[:-1][large] = np.sign(residual.residual[large])
    if not np.any(large):
        return 0.0, 0.0, False
    eta = Perturbation(grid, direction, 1.0)
    eta.check_admissible(control, s_fd)
    plus = _objective(model, control.shifted(eta.values, s_fd), noise, basis)
    minus = _objective(model, control.shifted(eta.values, -s_fd), noise, basis)
    difference = (plus - minus) / (2.0 * s_fd)
    ci = settings.STAT_SIGMAS * standard_error(difference)
    return float(difference.mean()), float(ci), bool(difference.mean() > ci)


def crn_variance_ratio(model, control, eta, s_fd, n_particles, seed, basis=None):
    """Variance of J(pi + s eta) - J(pi - s eta) on common vs independent noise."""
    basis = basis or RegressionBasis()
    grid = control.grid
    noise = sample_noise(grid, model.jumps, n_particles, seed)
    other = sample_noise(grid, model.jumps, n_particles, seed + 1_000_003)
    plus = _objective(model, control.shifted(eta.values, s_fd), noise, basis)
    minus_common = _objective(model, control.shifted(eta.values, -s_fd), noise, basis)
    minus_independent = _objective(model, control.shifted(eta.values, -s_fd), other, basis)
    return float(np.var(plus - minus_common)), float(np.var(plus - minus_independent))
