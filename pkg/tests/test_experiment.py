import numpy as np
import pytest

from mfdelay.config import get_config
from mfdelay.errors import ConfigValidationError
from mfdelay.forms import ExperimentConfig, load_config, parse_config
from mfdelay.models.builtin import lq_open_loop_optimum
from mfdelay.services.recursive_utility import DECAY_WARNING


def errors_of(data, overrides=None):
    with pytest.raises(ConfigValidationError) as excinfo:
        load_config(data, overrides)
    return excinfo.value.errors


def test_defaults_come_from_settings():
    settings = get_config()
    config = load_config({})
    assert config.model == 'recursive_utility'
    assert config.checks == ['example']
    assert config.T == settings.T
    assert config.dt == settings.DT
    assert config.seed == settings.SEED
    assert config.n_particles == settings.N_PARTICLES
    assert config.transversality_T == list(settings.TRANSVERSALITY_T)
    assert config.tolerance('fubini') == settings.FUBINI_TOLERANCE
    assert config.warnings == []


def test_non_consumption_models_default_to_residual_check():
    assert load_config({'model': {'name': 'linear_toy'}}).checks == ['residual']


def test_unknown_sections_and_keys_are_listed():
    errors = errors_of({'grid': {'T': 1.0, 'step': 0.1}, 'extra': {}})
    assert "unknown section 'extra'" in errors
    assert "unknown key 'grid.step'" in errors


def test_unknown_tolerance_and_measure_keys():
    assert "unknown key 'tolerances.loose'" in errors_of({'tolerances': {'loose': 1.0}})
    errors = errors_of({'delay': {'measures': [{'kind': 'exponential', 'scale': 1.0}]}})
    assert "unknown key 'delay.measures[0].scale'" in errors
    errors = errors_of({'delay': {'measures': [{'kind': 'gaussian'}]}})
    assert any(e.startswith('delay.measures[0].kind') for e in errors)


def test_measure_entries_are_checked_one_by_one():
    errors = errors_of({'delay': {'measures': [
        {'rate': 1.0},
        {'kind': 'discrete'},
        {'kind': 'discrete', 'offsets': [-0.1, 0.0], 'masses': [1.0]},
        'dirac_zero',
    ]}})
    assert errors == [
        'delay.measures[0].kind: This field is required.',
        'delay.measures[1].offsets: a discrete measure needs at least one atom',
        'delay.measures[2].masses: 1 masses for 2 offsets',
        'delay.measures[3]: expected a table, got str',
    ]


def test_delay_must_be_whole_steps():
    errors = errors_of({'grid': {'T': 0.9, 'dt': 0.3, 'delta': 0.5}})
    assert len(errors) == 1
    assert 'delta/dt = 0.5/0.3' in errors[0]


@pytest.mark.parametrize('data, expected', [
    ({'simulation': {'n_particles': 'many'}}, 'simulation.n_particles: expected int, got str'),
    ({'simulation': {'seed': True}}, 'simulation.seed: expected int, got bool'),
    ({'simulation': {'n_particles': 0}}, 'simulation.n_particles: Number must be at least 1.'),
    ({'basis': {'degree': 1.5}}, 'basis.degree: expected int, got float'),
    ({'grid': {'dt': -0.1}}, 'grid.dt: must be > 0, got -0.1'),
    ({'control': {'kind': 'greedy'}}, 'control.kind: Invalid value, must be one of: constant, optimal.'),
    ({'model': {'name': 'nope'}}, 'model.name: Invalid value, must be one of:'),
    ({'model': {'bounds': [0.0]}}, 'model.bounds: expected [lower, upper]'),
    ({'checks': {'transversality_T': [2.0]}}, 'checks.transversality_T: expected at least 2 entries'),
    ({'checks': {'scaling_alphas': [0.5, 'one']}}, 'checks.scaling_alphas[1]: expected float, got str'),
    ({'jumps': {'marks': [1.0], 'weights': [-1.0]}}, 'jumps.weights[0]: must be > 0, got -1.0'),
    ({'jumps': {'marks': 1.0}}, 'jumps.marks: expected a list, got float'),
    ({'output': {'dir': 3}}, 'output.dir: expected str, got int'),
])
def test_field_errors(data, expected):
    errors = errors_of(data)
    assert any(e.startswith(expected) for e in errors), errors


def test_cross_field_errors():
    errors = errors_of({'model': {'name': 'linear_toy'}, 'checks': {'run': ['example', 'bogus']}})
    assert any('unknown check(s) bogus' in e for e in errors)
    assert any("need model.name = 'recursive_utility'" in e for e in errors)
    assert any('2 marks but 1 weights' in e
               for e in errors_of({'jumps': {'marks': [0.5, 1.0], 'weights': [1.0]}}))
    assert any('exceeds upper bound' in e for e in errors_of({'model': {'bounds': [1.0, 0.0]}}))
    assert any("'optimal' is available" in e
               for e in errors_of({'model': {'name': 'quadratic_toy'}, 'control': {'kind': 'optimal'}}))
    assert any('needs a drift' in e for e in errors_of({'model': {'name': 'expression'}, 'checks': {'run': ['residual']}}))


def test_unknown_consumption_params():
    assert errors_of({'model': {'params': {'rate': 1.0}}}) == ["unknown key 'model.params.rate'"]


def test_params_are_checked_against_the_builtin_factory():
    data = {'model': {'name': 'linear_toy', 'params': {'foo': 1.0}}, 'grid': {'T': 1.0, 'dt': 0.1}}
    assert errors_of(data) == ["unknown key 'model.params.foo'"]
    data['model']['params'] = {'c1': True}
    assert errors_of(data) == ['model.params.c1: expected a number or a list of numbers, got bool']

    data['model']['params'] = {'c1': 0.5, 'bounds': [-1.0, 1.0]}
    config = load_config(data)
    model = config.build_model(config.grid())
    assert model.control_bounds == (-1.0, 1.0)

    expression = {'model': {'name': 'expression', 'expressions': {'b': 'k * x1'},
                            'params': {'k': 'fast'}}, 'checks': {'run': ['residual']}}
    assert errors_of(expression) == ['model.params.k: expected a number, got str']


def test_decay_warning_is_attached():
    config = load_config({'model': {'params': {'c': 0.5}}})
    assert DECAY_WARNING in config.warnings
    quiet = load_config({'model': {'params': {'c': 0.5}}, 'checks': {'run': ['lambda']}})
    assert quiet.warnings == []


def test_overrides():
    config = load_config({}, {'seed': 7, 'particles': 100, 'checks': ('lambda',), 'threads': 4, 'out': 'runs', 'dt': None})
    assert config.seed == 7
    assert config.n_particles == 100
    assert config.checks == ['lambda']
    assert config.threads == 4
    assert config.output_dir == 'runs'
    assert config.dt == get_config().DT
    assert errors_of({}, {'colour': 'red'}) == ["unknown override 'colour'"]


def test_config_hash_ignores_threads_and_output():
    base = load_config({})
    assert load_config({}, {'threads': 4, 'out': 'elsewhere'}).config_hash == base.config_hash
    assert load_config({}, {'seed': 1}).config_hash != base.config_hash
    assert len(base.config_hash) == 64


def test_builders_for_delayed_expression_model():
    config = load_config({
        'model': {'name': 'expression', 'expressions': {'b': 'x1 - x2 + u', 'g': '-(u^2)'}, 'a': 1.0},
        'grid': {'T': 1.0, 'dt': 0.1, 'delta': 0.3},
        'delay': {'measures': [{'kind': 'dirac_zero'}, {'kind': 'exponential', 'rate': 2.0}]},
        'checks': {'run': ['residual']},
    })
    grid = config.grid()
    assert grid.n_pre == 4
    model = config.build_model(grid)
    assert model.n_lift == 2
    assert model.a == 1.0
    assert config.flow().mode == 'full'
    control = config.control(model, grid)
    np.testing.assert_allclose(control.values, get_config().CONTROL_VALUE)


def test_optimal_control_for_linear_toy():
    config = load_config({'model': {'name': 'linear_toy'}, 'grid': {'T': 1.0, 'dt': 0.1},
                          'control': {'kind': 'optimal', 'scale': 1.5}})
    grid = config.grid()
    control = config.control(config.build_model(grid), grid)
    np.testing.assert_allclose(control.values, 1.5 * lq_open_loop_optimum(grid, config.x0))


def test_parse_config_from_file(tmp_path):
    path = tmp_path / 'run.toml'
    path.write_text(
        '[model]\nname = "ornstein_uhlenbeck"\n\n'
        '[grid]\nT = 1\ndt = 0.05\n\n'
        '[simulation]\nn_particles = 50\nseed = 3\n\n'
        '[information]\nmode = "delayed"\nlag = 0.1\n'
    )
    config = parse_config(path)
    assert isinstance(config, ExperimentConfig)
    assert config.T == 1.0
    assert config.n_particles == 50
    assert config.flow().lag == 0.1

    with pytest.raises(ConfigValidationError, match='does not exist'):
        parse_config(tmp_path / 'missing.toml')
    broken = tmp_path / 'broken.toml'
    broken.write_text('[grid\nT = 1\n')
    with pytest.raises(ConfigValidationError):
        parse_config(broken)
