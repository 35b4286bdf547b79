"""Experiment orchestration: run the requested checks and write the artifacts."""
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from mfdelay import __version__
from mfdelay.config import get_config
from mfdelay.errors import EXIT_CHECK_FAILED, EXIT_NUMERICAL, EXIT_OK, MFDelayError
from mfdelay.extensions import init_executor, shutdown_executor
from mfdelay.models.coefficients import ControlProcess
from mfdelay.models.delay import DelayMeasure
from mfdelay.models.noise import sample_noise
from mfdelay.models.paths import make_grid
from mfdelay.services.adjoint import solve_system
from mfdelay.services.backward import bsde_consistency_check, solve_backward
from mfdelay.services.forward import simulate_forward
from mfdelay.services.recursive_utility import ExampleReport, add_transversality, run_example
from mfdelay.services.verification import (
    Perturbation, VerificationReport, fubini_identity_check, gradient_identity_check,
    necessary_residual, perturbation_scaling, sufficient_conditions_probe,
)

logger = logging.getLogger(__name__)

# Fixed CSV number format so identical runs give identical bytes
FLOAT_FORMAT = '%.10g'

# Number of random constant controls compared in the sufficiency probe
SUFFICIENT_ALTERNATIVES = 10

CHECK_ORDER = ('example', 'lambda', 'residual', 'gradient', 'transversality',
               'fubini', 'scaling', 'bsde', 'sufficient')


@dataclass
class RunManifest:
    """What ran, with which inputs, and where it stopped."""
    config_hash: str
    version: str
    seed: int
    checks: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    wall_clock: float = 0.0
    failed_at: str = None
    error: str = None

    def to_dict(self):
        return {
            'config_hash': self.config_hash,
            'version': self.version,
            'seed': self.seed,
            'wall_clock': round(self.wall_clock, 3),
            'checks': dict(self.checks),
            'artifacts': list(self.artifacts),
            'warnings': list(self.warnings),
            'failed_at': self.failed_at,
            'error': self.error,
        }


@dataclass
class RunOutcome:
    exit_code: int
    artifacts: list
    manifest: RunManifest
    report: VerificationReport = None


class _Context:
    """Shared state of one run: grid, model, noise and the base solution, built on demand."""

    def __init__(self, config, out_dir, report, manifest):
        self.config = config
        self.out_dir = out_dir
        self.report = report
        self.manifest = manifest
        self._grid = None
        self._model = None
        self._noise = None
        self._control = None
        self._solution = None

    @property
    def grid(self):
        if self._grid is None:
            self._grid = self.config.grid()
        return self._grid

    @property
    def model(self):
        if self._model is None:
            self._model = self.config.build_model(self.grid)
        return self._model

    @property
    def noise(self):
        if self._noise is None:
            self._noise = sample_noise(self.grid, self.model.jumps, self.config.n_particles, self.config.seed)
        return self._noise

    @property
    def control(self):
        if self._control is None:
            self._control = self.config.control(self.model, self.grid, self.noise)
        return self._control

    @property
    def solution(self):
        if self._solution is None:
            self._solution = solve_system(self.model, self.control, self.noise, self.config.basis())
        return self._solution

    def write(self, name, frame):
        path = self.out_dir / name
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator='\n')
        self.manifest.artifacts.append(name)
        logger.debug(f"Wrote {path}")
        return path


# --- Check handlers ---

def _run_example(ctx):
    config = ctx.config
    example = run_example(
        config.consumption(),
        n_particles=config.n_particles,
        seeds=config.seed,
        basis=config.basis(),
        T_list=config.transversality_T,
        dt=config.dt,
        flow=config.flow(),
        transversality_particles=config.transversality_particles,
    )
    for name in ('forward_mean', 'lambda', 'p', 'residual', 'transversality'):
        if name in example.tables:
            ctx.write(f"{name}.csv", example.tables[name])
    for check in example.checks:
        ctx.report.checks.append(dict(check, name=f"example.{check['name']}"))
    ctx.report.residual_path = example.residual_path
    ctx.report.transversality_table = example.transversality_table
    ctx.report.concavity_violations = example.concavity_violations
    ctx.manifest.warnings.extend(example.warnings + example.notes)


def _run_lambda(ctx):
    lam = ctx.solution.lam.mean
    times = ctx.grid.main_times
    closed = np.full(times.shape, np.nan)
    if ctx.config.model == 'recursive_utility':
        closed = ctx.config.consumption().closed_form_lambda(times)
    error = np.abs(lam - closed)
    ctx.write('lambda.csv', pd.DataFrame({'t': times, 'lambda': lam, 'closed_form': closed, 'abs_err': error}))
    if np.all(np.isfinite(closed)):
        settings = get_config()
        threshold = settings.LAMBDA_TOLERANCE * ctx.config.dt / settings.LAMBDA_REFERENCE_DT
        ctx.report.record('lambda', float(error.max()), threshold)
    else:
        ctx.report.record('lambda', 0.0, 0.0, passed=bool(np.all(np.isfinite(lam))), detail='no closed form; finiteness only')


def _run_residual(ctx):
    config = ctx.config
    residual = necessary_residual(ctx.model, ctx.control, ctx.solution.adjoint, config.flow(),
                                  ctx.solution.ens, config.basis())
    ctx.report.residual_path = residual
    ctx.write('residual.csv', pd.DataFrame({'t': residual.times, 'residual': residual.residual, 'stderr': residual.stderr}))
    threshold = residual.threshold(config.tolerance('residual_sigmas'), config.tolerance('residual_slack'))
    if config.information == 'full':
        ctx.report.record('residual', residual.sup, threshold)
    else:
        ctx.manifest.warnings.append(f"delayed information: residual sup {residual.sup:.4g} reported without a verdict")


def _random_bumps(grid, count, rng):
    """Bumps alpha*1[t0, t0+h) with grid-aligned t0 and h."""
    bumps = []
    for _ in range(count):
        width = int(rng.integers(max(1, grid.n_steps // 10), max(2, grid.n_steps // 3)))
        start = int(rng.integers(0, max(1, grid.n_steps - width)))
        bumps.append(Perturbation.bump(grid, start * grid.dt, width * grid.dt, 1.0))
    return bumps


def _run_gradient(ctx):
    config = ctx.config
    rng = np.random.default_rng(config.seed)
    slack = config.tolerance('gradient_slack')
    rows, passed = [], True
    for i, eta in enumerate(_random_bumps(ctx.grid, config.gradient_bumps, rng)):
        pair = gradient_identity_check(ctx.model, ctx.control, eta, config.fd_step, [config.seed],
                                       config.n_particles, config.basis())
        ctx.report.gradient_pairs.append(pair)
        rows.append({'eta_id': i, 'lhs': pair.lhs, 'rhs': pair.rhs, 'ci': pair.ci})
        passed &= pair.agrees(slack)
    ctx.write('gradcheck.csv', pd.DataFrame(rows, columns=['eta_id', 'lhs', 'rhs', 'ci']))
    worst = max(abs(row['lhs'] - row['rhs']) - row['ci'] for row in rows)
    ctx.report.record('gradient', worst, slack, passed=passed)


def _run_transversality(ctx):
    config = ctx.config
    consumption = config.consumption()
    example = ExampleReport(consumption)
    example.warnings.extend(consumption.check_conditions())
    add_transversality(example, consumption, config.dt, config.transversality_T,
                       config.transversality_particles, config.seed, config.basis())
    ctx.write('transversality.csv', example.tables['transversality'])
    ctx.report.checks.extend(example.checks)
    ctx.report.transversality_table = example.transversality_table
    ctx.manifest.warnings.extend(example.warnings)


def _run_fubini(ctx):
    """Change-of-variable identity on a FUBINI_STEPS grid for the standard measures."""
    settings = get_config()
    config = ctx.config
    dt = config.dt
    delta = max(config.delta, 10 * dt)
    grid = make_grid(settings.FUBINI_STEPS * dt, dt, delta)
    rng = np.random.default_rng(config.seed)
    phi = rng.normal(size=grid.n_main)
    X = rng.normal(size=grid.n_main)
    measures = [
        DelayMeasure.dirac_at_zero(grid.delay, dt),
        DelayMeasure.dirac_at_minus_delta(grid.delay, dt),
        DelayMeasure.exponential(1.0, grid.delay, dt),
    ]
    rows = [{'measure': mu.label(), 'gap': fubini_identity_check(phi, X, mu, dt)} for mu in measures]
    ctx.write('fubini_gap.csv', pd.DataFrame(rows, columns=['measure', 'gap']))
    worst = max(row['gap'] for row in rows)
    ctx.report.fubini_gap = worst
    ctx.report.record('fubini', worst, config.tolerance('fubini'))


def _run_scaling(ctx):
    config = ctx.config
    eta = Perturbation(ctx.grid, np.ones(ctx.grid.n_main), 1.0)
    result = perturbation_scaling(ctx.model, ctx.control, eta, ctx.noise, config.scaling_alphas)
    ctx.report.scaling_slope = result.slope
    ctx.write('scaling.csv', pd.DataFrame({
        'alpha': result.alphas, 'sup_sq': result.values, 'stderr': result.stderr,
        'slope': np.full(result.alphas.shape, result.slope),
    }))
    lo, hi = get_config().SCALING_WINDOW
    ctx.report.record('scaling', abs(result.slope - 2.0), (hi - lo) / 2.0,
                      passed=bool(lo <= result.slope <= hi), detail=f"slope {result.slope:.3f}")


def _run_bsde(ctx):
    """Residual of Y(t) against its integrated form on ten nodes."""
    config = ctx.config
    basis = config.basis()
    grid = ctx.grid
    ens = simulate_forward(ctx.model, ctx.control, ctx.noise)
    triple = solve_backward(ctx.model, ens, ctx.control, basis)
    nodes = sorted(set(np.linspace(0, grid.n_steps, 11).round().astype(int)))
    times = [k * grid.dt for k in nodes]
    residuals = [bsde_consistency_check(triple, ctx.model, ens, ctx.control, t, grid.t_end, basis) for t in times]
    ctx.write('bsde.csv', pd.DataFrame({'t': times, 'residual': residuals}))
    measured = max(residuals)
    if ctx.config.model == 'brownian_bsde':
        # Y = a X and Z = a exactly; RMS over particles and steps
        a = ctx.model.a
        y_rms = np.sqrt(np.mean((triple.Y.main - a * ens.X.main) ** 2))
        z_rms = np.sqrt(np.mean((triple.Z - a) ** 2))
        measured = max(measured, float(y_rms), float(z_rms))
    ctx.report.record('bsde', measured, config.tolerance('bsde'))


def _run_sufficient(ctx):
    config = ctx.config
    lo, hi = ctx.model.control_bounds
    if not (np.isfinite(lo) and np.isfinite(hi)):
        lo, hi = ctx.control.values.min() - 1.0, ctx.control.values.max() + 1.0
    rng = np.random.default_rng(config.seed)
    alternatives = [
        ControlProcess.constant(ctx.grid, value, ctx.model.control_bounds)
        for value in rng.uniform(lo, hi, SUFFICIENT_ALTERNATIVES)
    ]
    probe = sufficient_conditions_probe(
        ctx.model, ctx.control, alternatives, n_probe=config.probe_points, basis=config.basis(),
        flow=config.flow(), seed=config.seed, solution=ctx.solution,
    )
    ctx.report.concavity_violations = probe.concavity_violations
    ctx.write('sufficient.csv', pd.DataFrame({
        'metric': ['concavity_violations', 'terminal_violations', 'n_probe', 'degenerate_max',
                   'max_attained_fraction', 'J_candidate', 'candidate_best'],
        'value': [probe.concavity_violations, probe.terminal_violations, probe.n_probe, float(probe.degenerate_max),
                  probe.max_attained_fraction, probe.J_candidate, float(probe.candidate_best)],
    }))
    ctx.report.record('sufficient.concavity', probe.concavity_violations + probe.terminal_violations, 0)
    ctx.report.record('sufficient.best', 0.0, 0.0, passed=probe.candidate_best,
                      detail=f"candidate J = {probe.J_candidate:.6g} against {len(alternatives)} constants")


HANDLERS = {
    'example': _run_example,
    'lambda': _run_lambda,
    'residual': _run_residual,
    'gradient': _run_gradient,
    'transversality': _run_transversality,
    'fubini': _run_fubini,
    'scaling': _run_scaling,
    'bsde': _run_bsde,
    'sufficient': _run_sufficient,
}


def write_report(path, config, report, manifest):
    """Human-readable summary with one line per check."""
    lines = [
        f"mfdelay {manifest.version}",
        f"model: {config.model}   seed: {config.seed}   particles: {config.n_particles}   dt: {config.dt:g}",
        f"config hash: {manifest.config_hash}",
        '',
    ]
    for check in report.checks:
        status = 'PASS' if check['passed'] else 'FAIL'
        line = f"[{status}] {check['name']}: measured {check['measured']:.6g} (threshold {check['threshold']:.6g})"
        if check['detail']:
            line += f"  {check['detail']}"
        lines.append(line)
    for warning in manifest.warnings:
        lines.append(f"[WARN] {warning}")
    if manifest.failed_at:
        lines.append(f"[ERROR] stopped in '{manifest.failed_at}': {manifest.error}")
    lines.append('')
    lines.append('all checks passed' if report.passed and not manifest.failed_at else 'some checks failed')
    Path(path).write_text('\n'.join(lines) + '\n', encoding='utf-8')


def run(config):
    """Execute the checks listed in config and write CSVs, report.txt and manifest.json.

    Returns:
        RunOutcome; exit_code 0 iff every recorded check passed
    """
    started = time.time()
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = VerificationReport()
    manifest = RunManifest(config.config_hash, __version__, config.seed, warnings=list(config.warnings))
    ctx = _Context(config, out_dir, report, manifest)
    init_executor(config.threads)

    exit_code = EXIT_OK
    try:
        for name in CHECK_ORDER:
            if name not in config.checks:
                continue
            manifest.failed_at = name
            logger.info(f"Running check '{name}'")
            before = len(report.checks)
            HANDLERS[name](ctx)
            recorded = report.checks[before:]
            manifest.checks[name] = 'passed' if all(c['passed'] for c in recorded) else 'failed'
        manifest.failed_at = None
        if not report.passed:
            exit_code = EXIT_CHECK_FAILED
    except MFDelayError as e:
        logger.error(f"Check '{manifest.failed_at}' failed: {e}")
        manifest.error = str(e)
        manifest.checks[manifest.failed_at] = 'error'
        exit_code = e.exit_code
    except (ArithmeticError, np.linalg.LinAlgError) as e:
        logger.error(f"Check '{manifest.failed_at}' failed: {e}")
        manifest.error = str(e)
        manifest.checks[manifest.failed_at] = 'error'
        exit_code = EXIT_NUMERICAL
    except Exception as e:
        logger.exception(f"Check '{manifest.failed_at}' crashed: {e}")
        manifest.error = f"{type(e).__name__}: {e}"
        manifest.checks[manifest.failed_at] = 'error'
        exit_code = EXIT_NUMERICAL
    finally:
        shutdown_executor()

    manifest.wall_clock = time.time() - started
    write_report(out_dir / 'report.txt', config, report, manifest)
    manifest.artifacts.append('report.txt')
    manifest.artifacts.append('manifest.json')
    (out_dir / 'manifest.json').write_text(json.dumps(manifest.to_dict(), indent=2) + '\n', encoding='utf-8')
    logger.info(f"Run finished with exit code {exit_code} in {manifest.wall_clock:.2f}s")
    return RunOutcome(exit_code, list(manifest.artifacts), manifest, report)
