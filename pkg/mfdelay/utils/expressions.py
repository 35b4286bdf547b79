"""Restricted arithmetic expressions for user-supplied coefficients.

Grammar: numbers, names, + - * / ^, parentheses and the functions
exp, log, min, max. Expressions become sympy trees so derivatives are
symbolic; anything sympy cannot turn into numpy code falls back to
central differences in the model.
"""
import logging
import re

import numpy as np
import sympy

from mfdelay.errors import ExpressionError, ModelError
from mfdelay.models.coefficients import (
    CoefficientModel, HorizonMode, identity, unit_initial, zero_coefficient, zero_terminal,
)

logger = logging.getLogger(__name__)

FUNCTIONS = {
    'exp': (1, sympy.exp),
    'log': (1, sympy.log),
    'min': (2, sympy.Min),
    'max': (2, sympy.Max),
}

TOKEN = re.compile(r"\s*(?:(\d+\.?\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)|([A-Za-z_][A-Za-z_0-9]*)|(\*\*|[-+*/^(),]))")

# Coefficients evaluated on a HamiltonianPoint, and the terminal/initial functions
POINT_COEFFICIENTS = ('b', 'sigma', 'gamma', 'g', 'f')
SCALAR_FUNCTIONS = {
    'h1': ('y',),
    'h2': ('x', 'n'),
    'phi': ('x',),
    'psi': ('x',),
}

# Expression results sympy leaves unevaluated cannot be compiled
UNSUPPORTED = (sympy.Derivative, sympy.DiracDelta, sympy.Subs)


def _tokenize(text):
    tokens = []
    position = 0
    text = text.rstrip()
    while position < len(text):
        match = TOKEN.match(text, position)
        if not match:
            rest = text[position:]
            raise ExpressionError("unexpected character", text, position + len(rest) - len(rest.lstrip()))
        number, name, operator = match.groups()
        start = match.end() - len(number or name or operator)
        if number:
            tokens.append(('number', number, start))
        elif name:
            tokens.append(('name', name, start))
        else:
            tokens.append(('op', '^' if operator == '**' else operator, start))
        position = match.end()
    tokens.append(('end', '', len(text)))
    return tokens


class _Parser:
    """Recursive descent over the token list."""

    def __init__(self, text, symbols, params):
        self.text = text
        self.tokens = _tokenize(text)
        self.index = 0
        self.symbols = symbols
        self.params = params

    def peek(self):
        return self.tokens[self.index]

    def take(self):
        token = self.tokens[self.index]
        self.index += 1
        return token

    def expect(self, op):
        kind, value, position = self.take()
        if kind != 'op' or value != op:
            raise ExpressionError(f"expected '{op}'", self.text, position)

    def parse(self):
        tree = self.expression()
        kind, value, position = self.peek()
        if kind != 'end':
            raise ExpressionError(f"unexpected '{value}'", self.text, position)
        return tree

    def expression(self):
        tree = self.term()
        while self.peek()[0] == 'op' and self.peek()[1] in '+-':
            op = self.take()[1]
            right = self.term()
            tree = tree + right if op == '+' else tree - right
        return tree

    def term(self):
        tree = self.unary()
        while self.peek()[0] == 'op' and self.peek()[1] in '*/':
            op = self.take()[1]
            right = self.unary()
            tree = tree * right if op == '*' else tree / right
        return tree

    def unary(self):
        kind, value, _ = self.peek()
        if kind == 'op' and value in '+-':
            self.take()
            operand = self.unary()
            return -operand if value == '-' else operand
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[0] == 'op' and self.peek()[1] == '^':
            self.take()
            return base ** self.unary()
        return base

    def atom(self):
        kind, value, position = self.take()
        if kind == 'number':
            return sympy.Float(value) if any(ch in value for ch in '.eE') else sympy.Integer(value)
        if kind == 'op' and value == '(':
            tree = self.expression()
            self.expect(')')
            return tree
        if kind == 'name':
            if self.peek()[0] == 'op' and self.peek()[1] == '(':
                return self.call(value, position)
            if value in self.symbols:
                return self.symbols[value]
            if value in self.params:
                return sympy.Float(self.params[value])
            allowed = ', '.join(sorted(list(self.symbols) + list(self.params)))
            raise ExpressionError(f"unknown name '{value}' (allowed: {allowed})", self.text, position)
        if kind == 'end':
            raise ExpressionError("unexpected end of expression", self.text, position)
        raise ExpressionError(f"unexpected '{value}'", self.text, position)

    def call(self, name, position):
        if name not in FUNCTIONS:
            raise ExpressionError(f"unknown function '{name}'", self.text, position)
        arity, fn = FUNCTIONS[name]
        self.expect('(')
        args = [self.expression()]
        while self.peek()[0] == 'op' and self.peek()[1] == ',':
            self.take()
            args.append(self.expression())
        self.expect(')')
        if len(args) != arity:
            raise ExpressionError(f"{name} takes {arity} argument(s), got {len(args)}", self.text, position)
        return fn(*args)


def parse_expression(text, symbols, params=None):
    """Parse text into a sympy expression over the given symbols.

    Args:
        text: expression source
        symbols: dict name -> sympy.Symbol of the allowed variables
        params: dict name -> number substituted as constants

    Returns:
        sympy.Expr
    """
    if not isinstance(text, str) or not text.strip():
        raise ExpressionError("expression must be a non-empty string", text, 0)
    return _Parser(text, symbols, params or {}).parse()


class VariableLayout:
    """Symbols of a point coefficient and how to read them from a HamiltonianPoint."""

    def __init__(self, n_lift, m_dim, n_marks):
        self.n_lift = n_lift
        self.m_dim = m_dim
        self.n_marks = n_marks
        names = ['t'] + [f"x{i + 1}" for i in range(n_lift)] + [f"m{i + 1}" for i in range(m_dim)]
        names += ['y', 'n', 'z', 'u'] + [f"k{j + 1}" for j in range(n_marks)] + ['e']
        self.ordered = [sympy.Symbol(name, real=True) for name in names]
        self.symbols = {symbol.name: symbol for symbol in self.ordered}
        self.symbols['x'] = self.symbols['x1']
        self.symbols['m'] = self.symbols['m1']

    def groups(self):
        """Point field -> symbols, in column order."""
        return {
            'x': [self.symbols[f"x{i + 1}"] for i in range(self.n_lift)],
            'm': [self.symbols[f"m{i + 1}"] for i in range(self.m_dim)],
            'y': [self.symbols['y']],
            'n': [self.symbols['n']],
            'z': [self.symbols['z']],
            'u': [self.symbols['u']],
            'k': [self.symbols[f"k{j + 1}"] for j in range(self.n_marks)],
        }

    def arguments(self, pt, mark=0.0):
        columns = [np.broadcast_to(np.asarray(pt.t, dtype=float), (pt.size,))]
        columns += [pt.x[:, i] for i in range(self.n_lift)]
        columns += [pt.m[:, i] for i in range(self.m_dim)]
        columns += [pt.y, pt.n, pt.z, pt.u]
        columns += [pt.k[:, j] for j in range(self.n_marks)]
        columns.append(np.full(pt.size, float(mark)))
        return columns


def _compile(expr, symbols):
    """numpy function of `symbols`, or None if sympy leaves something unevaluated."""
    if expr.has(*UNSUPPORTED):
        return None
    try:
        return sympy.lambdify(symbols, expr, modules='numpy')
    except (TypeError, NameError, SyntaxError) as e:
        logger.warning(f"Could not compile '{expr}': {e}")
        return None


def _point_function(compiled, layout, with_mark):
    def evaluate(pt, *mark):
        args = layout.arguments(pt, mark[0] if with_mark and mark else 0.0)
        return np.broadcast_to(np.asarray(compiled(*args), dtype=float), (pt.size,)).copy()
    return evaluate


def _point_derivative(columns, layout, field, with_mark):
    """Analytic derivative in a point field; None if any column could not be compiled."""
    if any(column is None for column in columns):
        return None

    def evaluate(pt, *mark):
        args = layout.arguments(pt, mark[0] if with_mark and mark else 0.0)
        values = [np.broadcast_to(np.asarray(column(*args), dtype=float), (pt.size,)) for column in columns]
        if field in ('x', 'm', 'k'):
            return np.column_stack(values) if values else np.zeros((pt.size, 0))
        return values[0].copy()
    return evaluate


def _scalar_function(compiled, count):
    def evaluate(*args):
        shape = np.shape(args[0])
        return np.broadcast_to(np.asarray(compiled(*args[:count]), dtype=float), shape).copy()
    return evaluate


def build_expression_model(expressions, grid, delay, jumps, horizon=None, params=None,
                           x0=1.0, a=0.0, control_bounds=(-np.inf, np.inf), name='expression'):
    """CoefficientModel whose coefficients are parsed expressions.

    Args:
        expressions: dict with keys among b, sigma, gamma, g, f, h1, h2, phi, psi;
            b is required. gamma may use the mark 'e'.
        grid: TimeGrid
        delay: DelaySpec (x1..xN are its lifts)
        jumps: JumpSpec (k1..kJ are the per-mark K values)
        horizon: HorizonMode (finite on the grid horizon by default)
        params: constants usable by name inside the expressions
        x0: constant prehistory value

    Returns:
        CoefficientModel with symbolic derivatives, checked against central differences
    """
    horizon = horizon or HorizonMode.finite(grid.t_end)
    unknown = sorted(set(expressions) - set(POINT_COEFFICIENTS) - set(SCALAR_FUNCTIONS))
    if unknown:
        raise ModelError(f"unknown coefficient(s): {', '.join(unknown)}")
    if 'b' not in expressions:
        raise ModelError("an expression model needs a drift 'b'")

    m_dim = 1 if horizon.is_finite else delay.n
    layout = VariableLayout(delay.n, m_dim, jumps.n_marks)
    coefficients = {}
    derivatives = {}

    for key in POINT_COEFFICIENTS:
        text = expressions.get(key)
        if text is None:
            continue
        expr = parse_expression(str(text), layout.symbols, params)
        with_mark = key == 'gamma'
        if not with_mark and expr.has(layout.symbols['e']):
            raise ExpressionError(f"mark 'e' is only available in gamma, found in {key}", str(text), 0)
        compiled = _compile(expr, layout.ordered)
        if compiled is None:
            raise ModelError(f"coefficient {key} = '{text}' cannot be evaluated numerically")
        coefficients[key] = _point_function(compiled, layout, with_mark)
        for field, symbols in layout.groups().items():
            if not symbols:
                continue
            columns = [_compile(sympy.diff(expr, symbol), layout.ordered) for symbol in symbols]
            derivative = _point_derivative(columns, layout, field, with_mark)
            if derivative is not None:
                derivatives[f"{key}:{field}"] = derivative
            else:
                logger.debug(f"Expression model: {key}:{field} uses finite differences")

    for key, variables in SCALAR_FUNCTIONS.items():
        text = expressions.get(key)
        if text is None:
            continue
        symbols = {name: sympy.Symbol(name, real=True) for name in variables}
        expr = parse_expression(str(text), symbols, params)
        ordered = [symbols[name] for name in variables]
        compiled = _compile(expr, ordered)
        if compiled is None:
            raise ModelError(f"{key} = '{text}' cannot be evaluated numerically")
        coefficients[key] = _scalar_function(compiled, len(ordered))
        for name in variables:
            column = _compile(sympy.diff(expr, symbols[name]), ordered)
            if column is not None:
                derivatives[f"{key}:{name}"] = _scalar_function(column, len(ordered))

    value = float(x0)
    model = CoefficientModel(
        name=name,
        b=coefficients['b'],
        sigma=coefficients.get('sigma', zero_coefficient),
        gamma=coefficients.get('gamma', zero_coefficient),
        g=coefficients.get('g', zero_coefficient),
        f=coefficients.get('f', zero_coefficient),
        h1=coefficients.get('h1', identity),
        h2=coefficients.get('h2', zero_terminal),
        phi=coefficients.get('phi', identity),
        psi=coefficients.get('psi', identity),
        x0=(lambda times: np.full(np.shape(times), value)) if x0 != 1.0 else unit_initial,
        a=float(a),
        control_bounds=tuple(control_bounds),
        delay=delay,
        jumps=jumps,
        horizon=horizon,
        derivatives=derivatives,
    )
    logger.info(f"Expression model '{name}': {len(coefficients)} coefficients, {len(derivatives)} symbolic derivatives")
    return model
