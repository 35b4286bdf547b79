"""Toolkit configuration."""
import os
from dotenv import load_dotenv

load_dotenv()


class Config:
    """Base configuration."""
    LOG_LEVEL = os.environ.get('MFDELAY_LOG', 'info')
    OUTPUT_DIR = os.environ.get('MFDELAY_OUTPUT', 'results')
    THREADS = int(os.environ.get('MFDELAY_THREADS', 1))

    # Simulation defaults
    N_PARTICLES = 10_000
    DT = 1e-2
    T = 2.0
    SEED = 42
    CONTROL_VALUE = 1.0

    # Regression
    BASIS_DEGREE = 2
    RIDGE = 1e-8

    # Coefficient derivatives
    FD_STEP = 1e-6
    DERIVATIVE_PROBES = 100
    DERIVATIVE_TOLERANCE = 1e-5

    # Statistical thresholds
    STAT_SIGMAS = 3.0
    RESIDUAL_SIGMAS = 5.0
    RESIDUAL_SLACK = 0.05
    GRADIENT_SLACK = 0.02
    SLOPE_TOLERANCE = 0.15
    FUBINI_TOLERANCE = 1e-12
    SCALING_WINDOW = (1.8, 2.2)
    CONCAVITY_TOLERANCE = 1e-9
    # Lambda closed-form tolerance at the reference step, scaled linearly in dt
    LAMBDA_TOLERANCE = 1e-4
    LAMBDA_REFERENCE_DT = 1e-3
    BSDE_TOLERANCE = 0.05

    # Verification defaults
    V_GRID_POINTS = 101
    N_PROBE = 1000
    GRADIENT_BUMPS = 5
    FD_CONTROL_STEP = 1e-2
    SCALING_ALPHAS = (0.1, 0.05, 0.025, 0.0125)
    TRANSVERSALITY_T = (2.0, 4.0, 6.0, 8.0, 10.0)
    TRANSVERSALITY_PARTICLES = 1000
    FUBINI_STEPS = 1000

    BUILTIN_MODELS = [
        ('recursive_utility', 'Recursive-utility consumption'),
        ('linear_toy', 'Linear-quadratic toy'),
        ('quadratic_toy', 'Quadratic-drift toy'),
        ('jump_martingale', 'Pure compensated jumps'),
        ('brownian_bsde', 'Brownian terminal martingale'),
        ('ornstein_uhlenbeck', 'Mean-reverting diffusion'),
        ('expression', 'Coefficients from expressions'),
    ]

    CHECKS = [
        ('example', 'Recursive-utility example end to end'),
        ('lambda', 'Forward adjoint lambda'),
        ('residual', 'Necessary-principle residual'),
        ('gradient', 'Gradient identity on bump directions'),
        ('transversality', 'Transversality decay'),
        ('fubini', 'Discrete change-of-variable identity'),
        ('scaling', 'Derivative-process scaling'),
        ('bsde', 'Backward martingale consistency'),
        ('sufficient', 'Sufficient-principle probes'),
    ]

    MEASURE_KINDS = [
        ('dirac_zero', 'Dirac at 0'),
        ('dirac_minus_delta', 'Dirac at -delta'),
        ('exponential', 'Exponential density'),
        ('discrete', 'Discrete atoms'),
    ]


class DevelopmentConfig(Config):
    """Development configuration."""
    DEBUG = True


class TestingConfig(Config):
    """Testing configuration."""
    TESTING = True
    N_PARTICLES = 2000
    TRANSVERSALITY_PARTICLES = 200
    N_PROBE = 200


config = {
    'development': DevelopmentConfig,
    'testing': TestingConfig,
    'default': Config,
}


def get_config(name=None):
    """Resolve a configuration class by name or from MFDELAY_ENV."""
    if name is None:
        name = os.environ.get('MFDELAY_ENV', 'default')
    return config.get(name, Config)
