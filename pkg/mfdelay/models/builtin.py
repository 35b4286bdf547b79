"""Built-in coefficient models."""
import inspect

import numpy as np

from mfdelay.errors import ModelError
from mfdelay.models.coefficients import CoefficientModel, HorizonMode
from mfdelay.models.delay import DelaySpec
from mfdelay.models.noise import JumpSpec


def _constant(value):
    return lambda times: np.full(np.shape(times), float(value))


def _column(values):
    return np.asarray(values, dtype=float)[:, None]


def linear_toy(grid, c1=1.0, c2=1.0, sigma=0.0, qx=1.0, ru=1.0, x0=1.0, bounds=(-2.0, 2.0)):
    """Linear drift with concave quadratic running reward.

    b = c1*x + c2*u, f = -(qx*x^2 + ru*u^2)/2, J = E[integral of f].
    """
    return CoefficientModel(
        name='linear_toy',
        b=lambda pt: c1 * pt.x[:, 0] + c2 * pt.u,
        sigma=lambda pt: np.full(pt.size, float(sigma)),
        f=lambda pt: -0.5 * (qx * pt.x[:, 0] ** 2 + ru * pt.u ** 2),
        x0=_constant(x0),
        control_bounds=tuple(bounds),
        delay=DelaySpec.no_delay(grid.dt),
        horizon=HorizonMode.finite(grid.t_end),
        derivatives={
            'b:x': lambda pt: np.full((pt.size, 1), float(c1)),
            'b:m': lambda pt: np.zeros((pt.size, 1)),
            'b:u': lambda pt: np.full(pt.size, float(c2)),
            'sigma:x': lambda pt: np.zeros((pt.size, 1)),
            'sigma:m': lambda pt: np.zeros((pt.size, 1)),
            'sigma:u': lambda pt: np.zeros(pt.size),
            'f:x': lambda pt: _column(-qx * pt.x[:, 0]),
            'f:u': lambda pt: -ru * pt.u,
        },
    )


def lq_open_loop_optimum(grid, x0=1.0):
    """Optimal control of the noiseless linear toy with c1=0, c2=qx=ru=1."""
    T = grid.t_end
    return -x0 * np.sinh(T - grid.main_times) / np.cosh(T)


def quadratic_toy(grid, sigma=0.2, x0=1.0, bounds=(-5.0, 5.0)):
    """b = u - x^2/2 with additive noise."""
    return CoefficientModel(
        name='quadratic_toy',
        b=lambda pt: pt.u - 0.5 * pt.x[:, 0] ** 2,
        sigma=lambda pt: np.full(pt.size, float(sigma)),
        f=lambda pt: -0.5 * pt.u ** 2,
        x0=_constant(x0),
        control_bounds=tuple(bounds),
        delay=DelaySpec.no_delay(grid.dt),
        horizon=HorizonMode.finite(grid.t_end),
        derivatives={
            'b:x': lambda pt: _column(-pt.x[:, 0]),
            'b:u': lambda pt: np.ones(pt.size),
            'f:u': lambda pt: -pt.u,
        },
    )


def jump_martingale(grid, marks=(1.0,), weights=(2.0,), scale=1.0, x0=1.0):
    """Pure compensated jumps: b = sigma = 0, gamma(e) = scale*e."""
    return CoefficientModel(
        name='jump_martingale',
        b=lambda pt: np.zeros(pt.size),
        gamma=lambda pt, e: np.full(pt.size, scale * e),
        x0=_constant(x0),
        jumps=JumpSpec(np.asarray(marks, dtype=float), np.asarray(weights, dtype=float)),
        delay=DelaySpec.no_delay(grid.dt),
        horizon=HorizonMode.finite(grid.t_end),
        derivatives={
            'b:x': lambda pt: np.zeros((pt.size, 1)),
            'b:u': lambda pt: np.zeros(pt.size),
            'gamma:x': lambda pt, e: np.zeros((pt.size, 1)),
            'gamma:u': lambda pt, e: np.zeros(pt.size),
        },
    )


def brownian_bsde(grid, a=1.0, x0=0.0):
    """X is a Brownian motion and Y(T) = a*X(T) with a zero driver."""
    return CoefficientModel(
        name='brownian_bsde',
        b=lambda pt: np.zeros(pt.size),
        sigma=lambda pt: np.ones(pt.size),
        a=float(a),
        x0=_constant(x0),
        delay=DelaySpec.no_delay(grid.dt),
        horizon=HorizonMode.finite(grid.t_end),
        derivatives={
            'b:x': lambda pt: np.zeros((pt.size, 1)),
            'sigma:x': lambda pt: np.zeros((pt.size, 1)),
        },
    )


def ornstein_uhlenbeck(grid, theta=1.0, sigma=1.0, x0=1.0):
    return CoefficientModel(
        name='ornstein_uhlenbeck',
        b=lambda pt: -theta * pt.x[:, 0],
        sigma=lambda pt: np.full(pt.size, float(sigma)),
        x0=_constant(x0),
        delay=DelaySpec.no_delay(grid.dt),
        horizon=HorizonMode.finite(grid.t_end),
        derivatives={'b:x': lambda pt: np.full((pt.size, 1), -float(theta))},
    )


def recursive_utility(grid, **params):
    # services import this package at module load
    from mfdelay.services.recursive_utility import ConsumptionModel

    params.setdefault('T', grid.t_end)
    params.setdefault('delta', grid.delay)
    return ConsumptionModel(**params).to_coefficient_model(grid)


BUILTIN_MODELS = {
    'recursive_utility': recursive_utility,
    'linear_toy': linear_toy,
    'quadratic_toy': quadratic_toy,
    'jump_martingale': jump_martingale,
    'brownian_bsde': brownian_bsde,
    'ornstein_uhlenbeck': ornstein_uhlenbeck,
}


def model_parameters(name):
    """Keyword parameters accepted by a built-in factory; None if it takes any."""
    factory = BUILTIN_MODELS.get(name)
    if factory is None:
        raise ModelError(f"unknown model '{name}'")
    parameters = list(inspect.signature(factory).parameters.values())[1:]
    if any(p.kind is inspect.Parameter.VAR_KEYWORD for p in parameters):
        return None
    return [p.name for p in parameters]


def build_model(name, grid, params=None):
    """Instantiate a built-in model by name."""
    params = dict(params or {})
    allowed = model_parameters(name)
    unknown = sorted(set(params) - set(allowed)) if allowed is not None else []
    if unknown:
        raise ModelError(f"model '{name}' has no parameter(s) {', '.join(unknown)}")
    return BUILTIN_MODELS[name](grid, **params)
