import numpy as np
import pytest
import sympy

from mfdelay.errors import ExpressionError, ModelError
from mfdelay.models.coefficients import HamiltonianPoint
from mfdelay.models.delay import DelaySpec
from mfdelay.models.noise import JumpSpec
from mfdelay.utils.expressions import VariableLayout, build_expression_model, parse_expression

X = sympy.Symbol('x', real=True)
SYMBOLS = {'x': X}


def evaluate(text, params=None):
    return float(parse_expression(text, SYMBOLS, params))


def test_precedence():
    assert evaluate('-2^2') == -4
    assert evaluate('2^3^2') == 512
    assert evaluate('2**3') == 8
    assert evaluate('1 + 2 * 3') == 7
    assert evaluate('(1 + 2) * 3') == 9
    assert evaluate('8 / 2 / 2') == 2
    assert evaluate('2 ^ -1') == 0.5


def test_functions_and_params():
    assert evaluate('exp(0) + log(1)') == 1
    assert evaluate('min(2, 3) + max(2, 3)') == 5
    assert evaluate('c * 2', {'c': 0.25}) == 0.5
    assert evaluate('1.5e1 + .5') == 15.5
    expr = parse_expression('x^2 + 3 * x', SYMBOLS)
    assert sympy.simplify(sympy.diff(expr, X) - (2 * X + 3)) == 0


def test_unknown_name_reports_position():
    with pytest.raises(ExpressionError) as excinfo:
        parse_expression('x + foo', SYMBOLS)
    assert excinfo.value.position == 4
    assert "unknown name 'foo'" in str(excinfo.value)
    assert "at position 4 in 'x + foo'" in str(excinfo.value)


@pytest.mark.parametrize('text', ['(x + 1', 'x + 1)', 'x +', '', '   ', 'x $ 2', 'x 2'])
def test_malformed_expressions(text):
    with pytest.raises(ExpressionError):
        parse_expression(text, SYMBOLS)


def test_function_arity_and_unknown_functions():
    with pytest.raises(ExpressionError, match='min takes 2'):
        parse_expression('min(x)', SYMBOLS)
    with pytest.raises(ExpressionError, match='exp takes 1'):
        parse_expression('exp(x, 1)', SYMBOLS)
    with pytest.raises(ExpressionError, match="unknown function 'sin'"):
        parse_expression('sin(x)', SYMBOLS)


def test_layout_names():
    layout = VariableLayout(2, 1, 1)
    assert [symbol.name for symbol in layout.ordered] == ['t', 'x1', 'x2', 'm1', 'y', 'n', 'z', 'u', 'k1', 'e']
    assert layout.symbols['x'] is layout.symbols['x1']
    assert [symbol.name for symbol in layout.groups()['x']] == ['x1', 'x2']


def test_expression_model_derivatives(grid):
    model = build_expression_model(
        {'b': 'a * x + m * u', 'sigma': '0.2 * x', 'g': '-(u^2) / 2 + y', 'phi': 'x', 'h2': 'x^2 + n'},
        grid, DelaySpec.no_delay(grid.dt), JumpSpec.empty(), params={'a': 0.5},
    )
    pt = HamiltonianPoint.build(0.0, [1.0, 2.0], [3.0], [0.5, -1.0], y=[0.1, 0.2])
    np.testing.assert_allclose(model.b(pt), [0.5 + 1.5, 1.0 - 3.0])
    np.testing.assert_allclose(model.partial('b', 'x', pt)[:, 0], [0.5, 0.5])
    np.testing.assert_allclose(model.partial('b', 'm', pt)[:, 0], [0.5, -1.0])
    np.testing.assert_allclose(model.partial('b', 'u', pt), [3.0, 3.0])
    np.testing.assert_allclose(model.partial('g', 'u', pt), [-0.5, 1.0])
    np.testing.assert_allclose(model.scalar_partial('h2', 'x', np.array([2.0]), np.array([1.0])), [4.0])


def test_mark_is_only_allowed_in_gamma(grid):
    jumps = JumpSpec((0.5,), (1.0,))
    with pytest.raises(ExpressionError, match="mark 'e'"):
        build_expression_model({'b': 'x * e'}, grid, DelaySpec.no_delay(grid.dt), jumps)
    model = build_expression_model({'b': '0', 'gamma': 'e * x'}, grid, DelaySpec.no_delay(grid.dt), jumps)
    pt = HamiltonianPoint.build(0.0, [2.0], [0.0], [0.0], n_marks=1)
    np.testing.assert_allclose(model.gamma(pt, 0.5), [1.0])


def test_expression_model_validation(grid):
    delay = DelaySpec.no_delay(grid.dt)
    with pytest.raises(ModelError, match="needs a drift 'b'"):
        build_expression_model({'g': 'u'}, grid, delay, JumpSpec.empty())
    with pytest.raises(ModelError, match='unknown coefficient'):
        build_expression_model({'b': 'x', 'drift': 'x'}, grid, delay, JumpSpec.empty())
    with pytest.raises(ExpressionError):
        build_expression_model({'b': 'x + w'}, grid, delay, JumpSpec.empty())
