"""Cross-sectional least squares used as the conditional expectation."""
import logging
from itertools import combinations_with_replacement

import numpy as np

from mfdelay.errors import SolverError

logger = logging.getLogger(__name__)

# Columns whose spread is below this (relative to their level) count as constant
CONSTANT_COLUMN_TOL = 1e-12


def polynomial_features(variables, degree):
    """All monomials of total degree 1..degree in the columns of `variables`.

    Args:
        variables: array (n, d)
        degree: maximum total degree

    Returns:
        array (n, n_monomials); no intercept column
    """
    variables = np.asarray(variables, dtype=float)
    if variables.ndim == 1:
        variables = variables[:, None]
    n, d = variables.shape
    columns = []
    for power in range(1, degree + 1):
        for combo in combinations_with_replacement(range(d), power):
            columns.append(np.prod(variables[:, combo], axis=1))
    if not columns:
        return np.zeros((n, 0))
    return np.column_stack(columns)


def project(features, targets, ridge=1e-8):
    """Least-squares fit of targets on span{1, features}, evaluated in sample.

    Features are centred and scaled first; the intercept is not penalised.
    Targets may be (n,) or (n, q).

    Returns:
        fitted values with the shape of targets
    """
    targets = np.asarray(targets, dtype=float)
    flat = targets.ndim == 1
    if flat:
        targets = targets[:, None]
    target_mean = targets.mean(axis=0)

    features = np.asarray(features, dtype=float)
    if features.size == 0:
        fitted = np.broadcast_to(target_mean, targets.shape).copy()
        return fitted[:, 0] if flat else fitted

    level = features.mean(axis=0)
    spread = features.std(axis=0)
    keep = spread > CONSTANT_COLUMN_TOL * np.maximum(1.0, np.abs(level))
    if not np.any(keep):
        fitted = np.broadcast_to(target_mean, targets.shape).copy()
        return fitted[:, 0] if flat else fitted

    n = targets.shape[0]
    design = (features[:, keep] - level[keep]) / spread[keep]
    gram = design.T @ design / n + ridge * np.eye(design.shape[1])
    if ridge == 0 and np.linalg.matrix_rank(gram) < design.shape[1]:
        raise SolverError(
            f"regression features are collinear ({design.shape[1]} columns, "
            f"rank {np.linalg.matrix_rank(gram)}); use a larger ridge"
        )
    try:
        coef = np.linalg.solve(gram, design.T @ (targets - target_mean) / n)
    except np.linalg.LinAlgError as e:
        raise SolverError(f"regression matrix is singular ({e}); use a larger ridge than {ridge}")
    fitted = target_mean + design @ coef
    return fitted[:, 0] if flat else fitted


def standard_error(samples):
    """Standard error of the sample mean."""
    samples = np.asarray(samples, dtype=float)
    if samples.shape[0] < 2:
        return np.zeros(samples.shape[1:]) if samples.ndim > 1 else 0.0
    return samples.std(axis=0, ddof=1) / np.sqrt(samples.shape[0])


def log_slope(x, y):
    """Slope of a least-squares line through (x, log|y|); NaN if any y is 0."""
    y = np.abs(np.asarray(y, dtype=float))
    if np.any(y == 0) or not np.all(np.isfinite(y)):
        return float('nan')
    return float(np.polyfit(np.asarray(x, dtype=float), np.log(y), 1)[0])
