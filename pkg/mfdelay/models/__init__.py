"""Domain types: grids, noise, delay measures and coefficient models."""
from mfdelay.models.paths import TimeGrid, Trajectory, make_grid, set_prehistory
from mfdelay.models.noise import JumpSpec, NoiseEnsemble, sample_noise
from mfdelay.models.delay import DelayMeasure, DelaySpec
from mfdelay.models.coefficients import (
    CoefficientModel, ControlProcess, HamiltonianPoint, HorizonMode,
)

__all__ = [
    'TimeGrid', 'Trajectory', 'make_grid', 'set_prehistory',
    'JumpSpec', 'NoiseEnsemble', 'sample_noise',
    'DelayMeasure', 'DelaySpec',
    'CoefficientModel', 'ControlProcess', 'HamiltonianPoint', 'HorizonMode',
]
