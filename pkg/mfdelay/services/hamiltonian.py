"""Hamiltonian and its partial derivatives."""
import numpy as np

from mfdelay.errors import PreconditionError
from mfdelay.models.coefficients import HamiltonianPoint

HAMILTONIAN_VARIABLES = ('x', 'm', 'y', 'n', 'z', 'k', 'u', 'p', 'q', 'r', 'lam')

# Coefficients that take the forward-state arguments only
FORWARD_COEFFICIENTS = ('b', 'sigma', 'gamma')

__all__ = ['HamiltonianPoint', 'eval_H', 'grad_H', 'solution_point', 'HAMILTONIAN_VARIABLES']


def _check_mode(model, mode):
    mode = mode or model.mode
    if mode not in ('finite', 'infinite'):
        raise PreconditionError(f"unknown mode '{mode}'")
    return mode


def eval_H(model, pt, mode=None):
    """H = f + b p + sigma q + sum_j gamma(e_j) r_j w_j + g lam, one value per row.

    Both modes share this algebra; they differ in what the mean-field
    arguments m and n stand for.
    """
    _check_mode(model, mode)
    value = model.f(pt) + model.b(pt) * pt.p + model.sigma(pt) * pt.q + model.g(pt) * pt.lam
    if model.n_marks:
        value = value + model.jumps.integrate(model.gamma_matrix(pt) * pt.r)
    return value


def _jump_partial(model, var, pt):
    total = 0.0
    for j, e in enumerate(model.jumps.marks):
        weight = pt.r[:, j] * model.jumps.weights[j]
        d = model.partial('gamma', var, pt, mark=e)
        total = total + (d * weight[:, None] if d.ndim == 2 else d * weight)
    return total


def grad_H(model, pt, wrt, mode=None):
    """Partial derivative of H.

    'x' and 'm' give (size, dim) arrays. 'k' and 'r' give per-mark densities
    with respect to nu, i.e. the partial in k_j (or r_j) divided by w_j.
    """
    _check_mode(model, mode)
    if wrt not in HAMILTONIAN_VARIABLES:
        raise PreconditionError(f"unknown variable '{wrt}'")

    if wrt == 'p':
        return model.b(pt)
    if wrt == 'q':
        return model.sigma(pt)
    if wrt == 'lam':
        return model.g(pt)
    if wrt == 'r':
        return model.gamma_matrix(pt)

    lam = pt.lam[:, None] if wrt in ('x', 'm', 'k') else pt.lam
    total = model.partial('f', wrt, pt) + model.partial('g', wrt, pt) * lam
    if wrt == 'k':
        if model.n_marks == 0:
            return np.zeros((pt.size, 0))
        return total / model.jumps.weights
    if wrt in ('y', 'n', 'z'):
        return total

    if wrt in ('x', 'm'):
        total = total + model.partial('b', wrt, pt) * pt.p[:, None]
        total = total + model.partial('sigma', wrt, pt) * pt.q[:, None]
    else:
        total = total + model.partial('b', wrt, pt) * pt.p
        total = total + model.partial('sigma', wrt, pt) * pt.q
    if model.n_marks:
        total = total + _jump_partial(model, wrt, pt)
    return total


def solution_point(ens, triple, k, p=None, q=None, r=None, lam=None):
    """Point at step k along a forward-backward solution, with optional adjoints."""
    arguments = triple.point_arguments(k) if triple is not None else {}
    return ens.point(k, p=p, q=q, r=r, lam=lam, **arguments)
