"""Experiment files: TOML schema, validation and the resolved configuration."""
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomli as toml_reader
except ImportError:  # Python 3.11+
    import tomllib as toml_reader

from mfdelay.config import get_config
from mfdelay.errors import ConfigValidationError, GridError, MFDelayError
from mfdelay.forms.sections import SECTION_FORMS
from mfdelay.models.builtin import build_model, lq_open_loop_optimum, model_parameters
from mfdelay.models.coefficients import ControlProcess, HorizonMode
from mfdelay.models.delay import DelayMeasure, DelaySpec
from mfdelay.models.noise import JumpSpec
from mfdelay.models.paths import make_grid
from mfdelay.services.backward import RegressionBasis
from mfdelay.services.recursive_utility import ConsumptionModel, candidate_consumption
from mfdelay.services.verification import InformationFlow
from mfdelay.utils.expressions import build_expression_model

logger = logging.getLogger(__name__)

# Models for which the 'optimal' control has a known construction
OPTIMAL_CONTROL_MODELS = ('recursive_utility', 'linear_toy')

# Checks that only make sense on the consumption model
CONSUMPTION_CHECKS = ('example', 'transversality')

# Keys left out of the configuration hash
UNHASHED = ('threads', 'output_dir')

# Consumption parameters taken from the grid and jump sections instead
CONSUMPTION_SHARED = ('T', 'delta', 'marks', 'weights')


def _checks():
    return [name for name, _ in get_config().CHECKS]



@dataclass
class ExperimentConfig:
    """Validated experiment with every default filled in."""
    model: str = 'recursive_utility'
    params: dict = field(default_factory=dict)
    expressions: dict = field(default_factory=dict)
    a: float = 0.0
    x0: float = 1.0
    bounds: tuple = None
    horizon: str = 'finite'
    kappa: float = 0.0
    T: float = None
    dt: float = None
    delta: float = 0.0
    control_kind: str = 'constant'
    control_value: float = None
    control_scale: float = 1.0
    measures: list = field(default_factory=lambda: [{'kind': 'dirac_zero'}])
    marks: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    n_particles: int = None
    seed: int = None
    threads: int = 1
    basis_degree: int = None
    ridge: float = None
    information: str = 'full'
    information_lag: float = 0.0
    checks: list = None
    gradient_bumps: int = None
    fd_step: float = None
    transversality_T: list = None
    transversality_particles: int = None
    scaling_alphas: list = None
    probe_points: int = None
    tolerances: dict = field(default_factory=dict)
    output_dir: str = None
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        settings = get_config()
        self.T = float(self.T if self.T is not None else settings.T)
        self.dt = float(self.dt if self.dt is not None else settings.DT)
        self.control_value = float(self.control_value if self.control_value is not None else settings.CONTROL_VALUE)
        self.n_particles = int(self.n_particles or settings.N_PARTICLES)
        self.seed = int(self.seed if self.seed is not None else settings.SEED)
        self.basis_degree = int(self.basis_degree if self.basis_degree is not None else settings.BASIS_DEGREE)
        self.ridge = float(self.ridge if self.ridge is not None else settings.RIDGE)
        self.gradient_bumps = int(self.gradient_bumps or settings.GRADIENT_BUMPS)
        self.fd_step = float(self.fd_step or settings.FD_CONTROL_STEP)
        self.transversality_T = [float(T) for T in (self.transversality_T or settings.TRANSVERSALITY_T)]
        self.transversality_particles = int(self.transversality_particles or settings.TRANSVERSALITY_PARTICLES)
        self.scaling_alphas = [float(a) for a in (self.scaling_alphas or settings.SCALING_ALPHAS)]
        self.probe_points = int(self.probe_points or settings.N_PROBE)
        self.output_dir = self.output_dir or settings.OUTPUT_DIR
        if self.checks is None:
            self.checks = ['example'] if self.model == 'recursive_utility' else ['residual']
        if self.bounds is None:
            self.bounds = (-np.inf, np.inf)
        self.bounds = tuple(float(b) for b in self.bounds)

    def tolerance(self, name):
        settings = get_config()
        defaults = {
            'residual_sigmas': settings.RESIDUAL_SIGMAS,
            'residual_slack': settings.RESIDUAL_SLACK,
            'gradient_slack': settings.GRADIENT_SLACK,
            'slope_tolerance': settings.SLOPE_TOLERANCE,
            'fubini': settings.FUBINI_TOLERANCE,
            'bsde': settings.BSDE_TOLERANCE,
        }
        return float(self.tolerances.get(name, defaults[name]))

    @property
    def config_hash(self):
        """sha256 of the canonical configuration, worker count and output location excluded."""
        data = {k: v for k, v in asdict(self).items() if k not in UNHASHED and k != 'warnings'}
        text = json.dumps(data, sort_keys=True, default=str)
        return hashlib.sha256(text.encode('utf-8')).hexdigest()

    # --- Builders ---

    def grid(self, T=None):
        return make_grid(self.T if T is None else T, self.dt, self.delta)

    def delay_spec(self, grid):
        measures = []
        for spec in self.measures:
            kind = spec['kind']
            if kind == 'dirac_zero':
                measures.append(DelayMeasure.dirac_at_zero(grid.delay, grid.dt))
            elif kind == 'dirac_minus_delta':
                measures.append(DelayMeasure.dirac_at_minus_delta(grid.delay, grid.dt))
            elif kind == 'exponential':
                measures.append(DelayMeasure.exponential(float(spec.get('rate', 1.0)), grid.delay, grid.dt))
            else:
                measures.append(DelayMeasure.discrete(spec['offsets'], spec['masses'], grid.delay, grid.dt))
        return DelaySpec(grid.delay, tuple(measures))

    def jump_spec(self):
        if not self.marks:
            return JumpSpec.empty()
        return JumpSpec(np.asarray(self.marks, dtype=float), np.asarray(self.weights, dtype=float))

    def horizon_mode(self, grid):
        if self.horizon == 'infinite':
            return HorizonMode.infinite(grid.t_end, self.kappa)
        return HorizonMode.finite(grid.t_end)

    def consumption(self, T=None):
        params = dict(self.params)
        params.setdefault('delta', self.delta)
        if self.marks:
            params.setdefault('marks', tuple(self.marks))
            params.setdefault('weights', tuple(self.weights))
        return ConsumptionModel(T=self.T if T is None else T, **params)

    def build_model(self, grid):
        """CoefficientModel for this experiment on the given grid."""
        if self.model == 'recursive_utility':
            return self.consumption(grid.t_end).to_coefficient_model(grid)
        if self.model == 'expression':
            numeric = {k: v for k, v in self.params.items() if isinstance(v, (int, float))}
            return build_expression_model(
                self.expressions, grid, self.delay_spec(grid), self.jump_spec(),
                horizon=self.horizon_mode(grid), params=numeric, x0=self.x0, a=self.a,
                control_bounds=self.bounds,
            )
        params = dict(self.params)
        if self.model == 'jump_martingale' and self.marks:
            params.setdefault('marks', tuple(self.marks))
            params.setdefault('weights', tuple(self.weights))
        return build_model(self.model, grid, params)

    def flow(self):
        if self.information == 'delayed':
            return InformationFlow.delayed(self.information_lag)
        return InformationFlow.full()

    def basis(self):
        return RegressionBasis(self.basis_degree, self.ridge)

    def control(self, model, grid, noise=None):
        """Control of the experiment; 'optimal' needs noise for the consumption model."""
        if self.control_kind == 'optimal':
            if self.model == 'recursive_utility':
                base = candidate_consumption(model, noise, self.basis())
            else:
                base = ControlProcess(grid, lq_open_loop_optimum(grid, self.x0), model.control_bounds)
            return ControlProcess(grid, base.values * self.control_scale, model.control_bounds)
        return ControlProcess.constant(grid, self.control_value * self.control_scale, model.control_bounds)


# --- Parsing ---

def _flatten(data):
    """Map TOML sections onto ExperimentConfig keywords."""
    model = data.get('model', {})
    grid = data.get('grid', {})
    control = data.get('control', {})
    jumps = data.get('jumps', {})
    simulation = data.get('simulation', {})
    basis = data.get('basis', {})
    information = data.get('information', {})
    checks = data.get('checks', {})
    values = {
        'model': model.get('name', 'recursive_utility'),
        'params': model.get('params', {}),
        'expressions': model.get('expressions', {}),
        'a': model.get('a', 0.0),
        'x0': model.get('x0', 1.0),
        'bounds': model.get('bounds'),
        'horizon': model.get('horizon', 'finite'),
        'kappa': model.get('kappa', 0.0),
        'T': grid.get('T'),
        'dt': grid.get('dt'),
        'delta': grid.get('delta', 0.0),
        'control_kind': control.get('kind', 'constant'),
        'control_value': control.get('value'),
        'control_scale': control.get('scale', 1.0),
        'marks': jumps.get('marks', []),
        'weights': jumps.get('weights', []),
        'n_particles': simulation.get('n_particles'),
        'seed': simulation.get('seed'),
        'threads': simulation.get('threads', 1),
        'basis_degree': basis.get('degree'),
        'ridge': basis.get('ridge'),
        'information': information.get('mode', 'full'),
        'information_lag': information.get('lag', 0.0),
        'checks': checks.get('run'),
        'gradient_bumps': checks.get('gradient_bumps'),
        'fd_step': checks.get('fd_step'),
        'transversality_T': checks.get('transversality_T'),
        'transversality_particles': checks.get('transversality_particles'),
        'scaling_alphas': checks.get('scaling_alphas'),
        'probe_points': checks.get('probe_points'),
        'tolerances': data.get('tolerances', {}),
        'output_dir': data.get('output', {}).get('dir'),
    }
    if 'measures' in data.get('delay', {}):
        values['measures'] = data['delay']['measures']
    return values


def _apply_overrides(values, overrides):
    mapping = {'seed': 'seed', 'threads': 'threads', 'out': 'output_dir',
               'particles': 'n_particles', 'dt': 'dt', 'checks': 'checks'}
    for key, value in (overrides or {}).items():
        if value is None or (key == 'checks' and not value):
            continue
        if key not in mapping:
            raise ConfigValidationError([f"unknown override '{key}'"])
        values[mapping[key]] = list(value) if key == 'checks' else value
    return values




def _is_number(value):
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _allowed_params(model):
    """Parameter names a model accepts from model.params; None accepts any numeric name."""
    if model == 'expression':
        return None
    if model == 'recursive_utility':
        return set(ConsumptionModel.__dataclass_fields__) - set(CONSUMPTION_SHARED)
    return set(model_parameters(model))


def _validate_params(values, errors):
    allowed = _allowed_params(values['model'])
    for key, value in values['params'].items():
        path = f"model.params.{key}"
        if allowed is not None and key not in allowed:
            errors.append(f"unknown key '{path}'")
        elif allowed is None and not _is_number(value):
            errors.append(f"{path}: expected a number, got {type(value).__name__}")
        elif not _is_number(value) and not (isinstance(value, list) and all(map(_is_number, value))):
            errors.append(f"{path}: expected a number or a list of numbers, got {type(value).__name__}")


def _cross_validate(values, errors):
    settings = get_config()
    if values['checks'] is not None:
        unknown = [name for name in values['checks'] if name not in _checks()]
        if unknown:
            errors.append(f"checks.run: unknown check(s) {', '.join(map(str, unknown))}")
        if values['model'] != 'recursive_utility':
            misplaced = [name for name in values['checks'] if name in CONSUMPTION_CHECKS]
            if misplaced:
                errors.append(f"checks.run: {', '.join(misplaced)} need model.name = 'recursive_utility'")

    T = values['T'] if values['T'] is not None else settings.T
    dt = values['dt'] if values['dt'] is not None else settings.DT
    if not (_is_number(dt) and dt > 0):
        errors.append(f"grid.dt: must be > 0, got {dt}")
    else:
        try:
            make_grid(T, dt, values['delta'])
        except GridError as e:
            errors.append(f"grid: {e}")

    if len(values['marks']) != len(values['weights']):
        errors.append(f"jumps: {len(values['marks'])} marks but {len(values['weights'])} weights")
    if values['model'] == 'expression' and 'b' not in values['expressions']:
        errors.append("model.expressions.b: an expression model needs a drift")
    for key, text in values['expressions'].items():
        if not isinstance(text, str):
            errors.append(f"model.expressions.{key}: expected str, got {type(text).__name__}")
    if values['control_kind'] == 'optimal' and values['model'] not in OPTIMAL_CONTROL_MODELS:
        errors.append(f"control.kind: 'optimal' is available for {', '.join(OPTIMAL_CONTROL_MODELS)} only")
    if values['bounds'] is not None and values['bounds'][0] > values['bounds'][1]:
        errors.append(f"model.bounds: lower bound {values['bounds'][0]} exceeds upper bound {values['bounds'][1]}")
    _validate_params(values, errors)


def _decay_warnings(config):
    """Warnings for consumption runs whose decay condition fails."""
    if config.model != 'recursive_utility':
        return []
    if not any(name in config.checks for name in CONSUMPTION_CHECKS):
        return []
    try:
        consumption = config.consumption()
    except (MFDelayError, TypeError):
        return []
    return consumption.check_conditions()


def load_config(data, overrides=None):
    """Validate a parsed experiment table and return an ExperimentConfig.

    Each section is bound to its form; every problem found is raised
    together in one ConfigValidationError.
    """
    errors = []
    if not isinstance(data, dict):
        raise ConfigValidationError(["experiment file must be a table"])
    for name, section in data.items():
        if name not in SECTION_FORMS:
            errors.append(f"unknown section '{name}'")
        elif not isinstance(section, dict):
            errors.append(f"{name}: expected a table")
        else:
            errors.extend(SECTION_FORMS[name](section, name).messages())
    if errors:
        raise ConfigValidationError(errors)

    values = _apply_overrides(_flatten(data), overrides)
    _cross_validate(values, errors)
    if errors:
        raise ConfigValidationError(errors)

    try:
        config = ExperimentConfig(**values)
    except (TypeError, ValueError) as e:
        raise ConfigValidationError([str(e)])
    config.warnings.extend(_decay_warnings(config))
    logger.info(f"Experiment: model={config.model}, checks={','.join(config.checks)}, seed={config.seed}")
    return config


def parse_config(path, overrides=None):
    """Read and validate an experiment file.

    Args:
        path: TOML file
        overrides: command-line values (seed, threads, out, checks, particles, dt)

    Returns:
        ExperimentConfig
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigValidationError([f"config file '{path}' does not exist"])
    try:
        with path.open('rb') as f:
            data = toml_reader.load(f)
    except toml_reader.TOMLDecodeError as e:
        raise ConfigValidationError([f"{path}: {e}"])
    return load_config(data, overrides)
