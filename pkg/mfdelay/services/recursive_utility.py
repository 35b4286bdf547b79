"""Optimal consumption with recursive utility and a mean-field cash drift.

Cash follows dX = (c E[X] - pi) dt (+ optional noise), utility solves
dY = -(-alpha Y + beta E[Y] - ln pi) dt + ..., and J(pi) = Y(0).
"""
import logging
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

from mfdelay.config import get_config
from mfdelay.errors import PreconditionError, SolverError
from mfdelay.models.coefficients import (
    CoefficientModel, ControlProcess, HorizonMode, zero_coefficient,
)
from mfdelay.models.delay import DelayMeasure, DelaySpec
from mfdelay.models.noise import JumpSpec, sample_noise
from mfdelay.models.paths import Trajectory, make_grid
from mfdelay.services.adjoint import solve_system
from mfdelay.services.backward import RegressionBasis, objective_values, solve_backward
from mfdelay.services.forward import simulate_forward
from mfdelay.services.verification import (
    InformationFlow, VerificationReport, necessary_residual,
    sufficient_conditions_probe, transversality_check,
)
from mfdelay.utils.regression import standard_error

logger = logging.getLogger(__name__)

DECAY_WARNING = "decay condition violated: c<α−β required"

# Smallest |p| for which -lambda/p is still a usable consumption rate
P_FLOOR = 1e-12

# Scale factors applied to the candidate for the extremality comparison
ALTERNATIVE_FACTORS = (0.5, 0.8, 1.25, 1.5)


def closed_form_lambda(alpha, beta, t):
    """lambda(t) = exp(-(alpha - beta) t)."""
    return np.exp(-(alpha - beta) * np.asarray(t, dtype=float))


@dataclass
class ConsumptionModel:
    """Parameters of the consumption problem.

    sigma and gamma scale the optional noise sigma*x dB and gamma*e*x N~(de);
    they leave E[X], lambda and p unchanged. terminal_coupling is the a in
    Y(T) = a X(T), p(T) = a lambda(T) on the truncated horizon.
    """
    x: float = 1.0
    c: float = 0.05
    alpha: float = 0.4
    beta: float = 0.1
    sigma: float = 0.0
    gamma: float = 0.0
    marks: tuple = ()
    weights: tuple = ()
    delta: float = 0.0
    T: float = 2.0
    kappa: float = 0.0
    terminal_coupling: float = -1.0
    consumption_cap: float = 50.0

    def __post_init__(self):
        if self.x <= 0:
            raise PreconditionError(f"initial cash must be positive, got {self.x}")
        if self.consumption_cap <= 0:
            raise PreconditionError(f"consumption cap must be positive, got {self.consumption_cap}")
        if self.terminal_coupling == 0:
            raise PreconditionError("terminal_coupling must be nonzero so that p stays away from 0")

    @property
    def decay_rate(self):
        """alpha - beta - c; |E[p(T) X(T)]| decays like exp(-decay_rate T)."""
        return self.alpha - self.beta - self.c

    def check_conditions(self):
        """Warnings for violated decay conditions (empty when all hold)."""
        warnings = []
        if not self.alpha > self.beta:
            warnings.append("lambda does not decay: alpha > beta required")
        if not self.c < self.alpha - self.beta:
            warnings.append(DECAY_WARNING)
        for message in warnings:
            logger.warning(f"Consumption model: {message}")
        return warnings

    def horizon(self, T):
        return replace(self, T=float(T))

    def closed_form_lambda(self, t):
        return closed_form_lambda(self.alpha, self.beta, t)

    def closed_form_p(self, t):
        """p(t) = a lambda(T) exp(c (T - t))."""
        t = np.asarray(t, dtype=float)
        return self.terminal_coupling * self.closed_form_lambda(self.T) * np.exp(self.c * (self.T - t))

    def closed_form_mean(self, t):
        """E[X(t)] under zero consumption."""
        return self.x * np.exp(self.c * np.asarray(t, dtype=float))

    def to_coefficient_model(self, grid):
        """CoefficientModel on the truncated infinite horizon, derivatives checked."""
        c, alpha, beta = self.c, self.alpha, self.beta
        jumps = JumpSpec(self.marks, self.weights) if len(self.marks) else JumpSpec.empty()

        def zeros_column(pt, *args):
            return np.zeros((pt.size, 1))

        def zeros_row(pt, *args):
            return np.zeros(pt.size)

        derivatives = {
            'b:x': zeros_column,
            'b:m': lambda pt: np.full((pt.size, 1), c),
            'b:u': lambda pt: -np.ones(pt.size),
            'g:x': zeros_column,
            'g:m': zeros_column,
            'g:y': lambda pt: np.full(pt.size, -alpha),
            'g:n': lambda pt: np.full(pt.size, beta),
            'g:z': zeros_row,
            'g:k': lambda pt: np.zeros((pt.size, jumps.n_marks)),
            'g:u': lambda pt: -1.0 / pt.u,
        }

        sigma = zero_coefficient
        if self.sigma:
            scale = self.sigma

            def sigma(pt):
                return scale * pt.x[:, 0]

            derivatives.update({
                'sigma:x': lambda pt: np.full((pt.size, 1), scale),
                'sigma:m': zeros_column,
                'sigma:u': zeros_row,
            })

        gamma = zero_coefficient
        if self.gamma and jumps.n_marks:
            size = self.gamma

            def gamma(pt, e):
                return size * e * pt.x[:, 0]

            derivatives.update({
                'gamma:x': lambda pt, e: np.full((pt.size, 1), size * e),
                'gamma:m': zeros_column,
                'gamma:u': zeros_row,
            })

        x = self.x
        return CoefficientModel(
            name='recursive_utility',
            b=lambda pt: c * pt.m[:, 0] - pt.u,
            sigma=sigma,
            gamma=gamma,
            g=lambda pt: -alpha * pt.y + beta * pt.n - np.log(pt.u),
            x0=lambda times: np.full(np.shape(times), x),
            a=self.terminal_coupling,
            control_bounds=(0.0, self.consumption_cap),
            delay=DelaySpec(grid.delay, (DelayMeasure.dirac_at_zero(grid.delay, grid.dt),)),
            jumps=jumps,
            horizon=HorizonMode.infinite(grid.t_end, self.kappa),
            derivatives=derivatives,
        )


def solve_p_deterministic(model, p_T, grid, convention='printed'):
    """Backward Euler for the deterministic p with b0 = c m.

    'printed':  p(t) = p(T) - integral_t^T c p ds, so p_k = p_{k+1} / (1 + c dt)
    'adjoint':  p(t) = p(T) + integral_t^T c p ds, so p_k = p_{k+1} (1 + c dt)
    """
    if convention not in ('printed', 'adjoint'):
        raise PreconditionError(f"convention must be 'printed' or 'adjoint', got '{convention}'")
    factor = 1.0 + model.c * grid.dt
    if convention == 'printed' and factor <= 0:
        raise SolverError(f"1 + c dt = {factor} is not positive")
    p = np.empty(grid.n_main)
    p[-1] = p_T
    for k in range(grid.n_steps - 1, -1, -1):
        p[k] = p[k + 1] / factor if convention == 'printed' else p[k + 1] * factor
    return Trajectory(grid, p, main_only=True)


def optimal_consumption(lam, p, bounds=(0.0, np.inf)):
    """pi = -lambda / p, clamped to the bounds.

    Accepts Trajectories (returns a Trajectory) or arrays.
    """
    grid = None
    if isinstance(lam, Trajectory):
        grid = lam.grid
        lam = lam.main
    if isinstance(p, Trajectory):
        grid = grid or p.grid
        p = p.main
    lam = np.asarray(lam, dtype=float)
    p = np.asarray(p, dtype=float)
    if np.any(np.abs(p) <= P_FLOOR):
        raise SolverError("p touches 0, consumption is unbounded")
    pi = -lam / p
    if np.any(pi <= 0):
        raise PreconditionError("-lambda/p must be positive; p and lambda need opposite signs")
    pi = np.clip(pi, *bounds)
    if grid is not None:
        return Trajectory(grid, pi, main_only=True)
    return pi


def candidate_consumption(model, noise, basis=None, iterations=2, start=None):
    """Iterate pi <- -lambda/p starting from a constant control.

    p_cond (the p seen by H at each step) is used, so the residual of the
    returned control vanishes up to the conditional-expectation error.
    """
    basis = basis or RegressionBasis()
    start = get_config().CONTROL_VALUE if start is None else start
    grid = noise.grid
    control = ControlProcess.constant(grid, start, model.control_bounds)
    for _ in range(iterations):
        solution = solve_system(model, control, noise, basis)
        values = optimal_consumption(solution.lam.mean, solution.adjoint.p_cond.mean(axis=0), model.control_bounds)
        control = ControlProcess(grid, values, model.control_bounds)
    return control


class ExampleReport(VerificationReport):
    """Checks and tables of one consumption run."""

    def __init__(self, consumption):
        super().__init__()
        self.consumption = consumption
        self.tables = {}
        self.warnings = []
        self.notes = []

    def add_check(self, name, passed, measured, threshold, detail=''):
        return self.record(name, measured, threshold, passed=passed, detail=detail)

    def to_dict(self):
        result = super().to_dict()
        result.update({
            'model': {
                'x': self.consumption.x,
                'c': self.consumption.c,
                'alpha': self.consumption.alpha,
                'beta': self.consumption.beta,
                'T': self.consumption.T,
            },
            'warnings': list(self.warnings),
            'notes': list(self.notes),
            'tables': sorted(self.tables),
        })
        return result


def _gronwall_tables(report, consumption, coefficients, grid, noise):
    settings = get_config()
    zero = ControlProcess.constant(grid, 0.0, coefficients.control_bounds)
    ens = simulate_forward(coefficients, zero, noise)
    values = ens.X.main
    mean = values.mean(axis=0)
    se = standard_error(values)
    bound = consumption.closed_form_mean(grid.main_times)
    report.tables['forward_mean'] = pd.DataFrame({'t': grid.main_times, 'mean': mean, 'stderr': se})

    # Euler error of x (1 + c dt)^k against x e^{ct}
    euler = consumption.x * np.exp(abs(consumption.c) * grid.t_end) * consumption.c ** 2 * grid.t_end * grid.dt
    slack = settings.STAT_SIGMAS * se + euler + 1e-12
    excess = float(np.max(mean - bound - slack))
    report.add_check('gronwall_bound', excess <= 0, max(excess, 0.0), 0.0, 'mean cash under zero consumption <= x e^{ct}')
    gap = float(np.max(np.abs(mean - bound) - slack))
    report.add_check('gronwall_equality', gap <= 0, max(gap, 0.0), 0.0, 'linear drift: mean equals x e^{ct}')


def run_example(consumption, n_particles=None, seeds=None, basis=None, T_list=None, dt=None,
                flow=None, transversality_particles=None, include_transversality=True):
    """Consumption example end to end.

    Args:
        consumption: ConsumptionModel
        n_particles: particles of the main run
        seeds: seed or list of seeds; the first drives the main run, all of them
            the objective comparison
        T_list: truncation horizons of the transversality table
        dt: step size
        flow: InformationFlow; delayed flows are reported without a verdict
        transversality_particles: particles per horizon in the transversality table

    Returns:
        ExampleReport
    """
    settings = get_config()
    n_particles = n_particles or settings.N_PARTICLES
    seeds = [int(s) for s in np.atleast_1d(settings.SEED if seeds is None else seeds)]
    basis = basis or RegressionBasis()
    dt = dt or settings.DT
    T_list = tuple(T_list or settings.TRANSVERSALITY_T)
    flow = flow or InformationFlow.full()

    report = ExampleReport(consumption)
    report.warnings.extend(consumption.check_conditions())

    grid = make_grid(consumption.T, dt, consumption.delta)
    coefficients = consumption.to_coefficient_model(grid)
    noise = sample_noise(grid, coefficients.jumps, n_particles, seeds[0])
    times = grid.main_times

    _gronwall_tables(report, consumption, coefficients, grid, noise)

    candidate = candidate_consumption(coefficients, noise, basis)
    solution = solve_system(coefficients, candidate, noise, basis)

    lam = solution.lam.mean
    lam_exact = consumption.closed_form_lambda(times)
    lam_error = np.abs(lam - lam_exact)
    report.tables['lambda'] = pd.DataFrame({'t': times, 'lambda': lam, 'closed_form': lam_exact, 'abs_err': lam_error})
    lam_threshold = settings.LAMBDA_TOLERANCE * dt / settings.LAMBDA_REFERENCE_DT
    report.add_check('lambda_closed_form', None, float(lam_error.max()), lam_threshold)
    if consumption.alpha > consumption.beta:
        report.add_check('lambda_decreasing', bool(np.all(np.diff(lam) < 0) and np.all(lam > 0)), 0.0, 0.0)

    p = solution.adjoint.p.mean
    p_exact = consumption.closed_form_p(times)
    report.tables['p'] = pd.DataFrame({'t': times, 'p': p, 'closed_form': p_exact, 'abs_err': np.abs(p - p_exact)})
    report.add_check('consumption_positive', bool(np.all(candidate.values > 0)), float(candidate.values.min()), 0.0,
                     'candidate consumption -lambda/p is positive')

    residual = necessary_residual(coefficients, candidate, solution.adjoint, flow, solution.ens, basis)
    report.residual_path = residual
    report.tables['residual'] = pd.DataFrame({'t': residual.times, 'residual': residual.residual, 'stderr': residual.stderr})
    if flow.mode == 'full':
        report.add_check('necessary_residual', None, residual.sup, residual.threshold())
    else:
        report.notes.append(f"delayed information (lag {flow.lag:g}): residual reported without a verdict")

    if include_transversality:
        add_transversality(report, consumption, dt, T_list, transversality_particles, seeds[0], basis)

    _extremality(report, coefficients, candidate, solution, seeds, n_particles, grid, basis)
    logger.info(f"Consumption example: {sum(c['passed'] for c in report.checks)}/{len(report.checks)} checks passed")
    return report


def add_transversality(report, consumption, dt, T_list, n_particles, seed, basis):
    settings = get_config()
    n_particles = n_particles or settings.TRANSVERSALITY_PARTICLES

    def model_for_horizon(T):
        grid = make_grid(T, dt, consumption.delta)
        return consumption.horizon(T).to_coefficient_model(grid), grid

    def candidate_for(model, grid, noise):
        return candidate_consumption(model, noise, basis)

    def alternative_for(model, grid):
        return ControlProcess.constant(grid, 0.0, model.control_bounds)

    table, slope = transversality_check(model_for_horizon, candidate_for, alternative_for, T_list, n_particles, seed, basis)
    report.transversality_table = table
    report.tables['transversality'] = pd.DataFrame({
        'T': table['T'],
        'pX': table['pX'],
        'stderr': table['pX_se'],
        'fitted_slope': np.full(len(table), slope),
    })
    expected = -consumption.decay_rate
    if consumption.decay_rate > 0:
        threshold = settings.SLOPE_TOLERANCE * abs(expected)
        report.add_check('transversality', None, abs(slope - expected), threshold,
                         f"fitted slope {slope:.4f}, expected {expected:.4f}")
    else:
        report.add_check('transversality', False, slope, 0.0,
                         f"{DECAY_WARNING}; fitted slope {slope:+.4f}, divergence {'detected' if slope > 0 else 'not detected'}")


def _extremality(report, coefficients, candidate, solution, seeds, n_particles, grid, basis):
    """Compare J at the candidate with scaled candidates, in the direction of the H curvature."""
    settings = get_config()
    bounds = coefficients.control_bounds
    alternatives = [ControlProcess(grid, candidate.values * factor, bounds) for factor in ALTERNATIVE_FACTORS]
    probe = sufficient_conditions_probe(
        coefficients, candidate, [], n_probe=settings.N_PROBE, variables=('u',), solution=solution,
    )
    report.concavity_violations = probe.concavity_violations
    curvature = probe.u_curvature

    differences = []
    for seed in seeds:
        noise = solution.ens.noise if seed == seeds[0] else sample_noise(grid, coefficients.jumps, n_particles, seed)
        own = solution if seed == seeds[0] else solve_system(coefficients, candidate, noise, basis)
        J_hat = objective_values(coefficients, own.ens, own.triple, candidate)
        for alternative in alternatives:
            ens = simulate_forward(coefficients, alternative, noise)
            triple = solve_backward(coefficients, ens, alternative, basis)
            differences.append(J_hat - objective_values(coefficients, ens, triple, alternative))
    differences = np.stack(differences)
    means = differences.mean(axis=1)
    errors = np.array([standard_error(row) for row in differences])
    slack = settings.STAT_SIGMAS * errors + 1e-12

    if curvature == 'concave':
        worst = float(np.max(-means - slack))
        report.add_check('extremality', worst <= 0, max(worst, 0.0), 0.0, 'H concave in u: candidate maximises J')
    elif curvature == 'convex':
        worst = float(np.max(means - slack))
        report.add_check('extremality', worst <= 0, max(worst, 0.0), 0.0, 'H convex in u: candidate minimises J')
        report.notes.append('H is convex in the consumption rate; the sufficient (concavity) conditions do not apply')
    else:
        report.notes.append(f"H curvature in u is {curvature}; extremality not assessed")
