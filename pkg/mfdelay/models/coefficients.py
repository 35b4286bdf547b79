"""Coefficient models, evaluation points and admissible controls."""
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from mfdelay.config import get_config
from mfdelay.errors import GridError, ModelError
from mfdelay.models.delay import DelaySpec
from mfdelay.models.noise import JumpSpec
from mfdelay.models.paths import Trajectory

logger = logging.getLogger(__name__)

# Point fields a coefficient may depend on, with their layout
VECTOR_FIELDS = ('x', 'm')
MARK_FIELDS = ('k', 'r')
SCALAR_FIELDS = ('y', 'n', 'z', 'u', 'p', 'q', 'lam')

# Smallest usable finite-difference step
MIN_FD_STEP = 1e-300


@dataclass(frozen=True, eq=False)
class HamiltonianPoint:
    """Arguments of the coefficients and of H, one row per particle.

    x: lifted states (size, N); m: mean-field arguments (size, M);
    k and r: per-mark values (size, J); the rest are (size,) arrays.
    """
    t: object
    x: np.ndarray
    m: np.ndarray
    u: np.ndarray
    y: np.ndarray
    n: np.ndarray
    z: np.ndarray
    k: np.ndarray
    p: np.ndarray
    q: np.ndarray
    r: np.ndarray
    lam: np.ndarray

    @classmethod
    def build(cls, t, x, m, u, n_marks=0, y=None, n=None, z=None, k=None,
              p=None, q=None, r=None, lam=None):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        size = x.shape[0]
        m = np.asarray(m, dtype=float)
        m = np.broadcast_to(m, (size, m.shape[-1] if m.ndim else 1)).astype(float)

        def scalar(value):
            if value is None:
                return np.zeros(size)
            return np.broadcast_to(np.asarray(value, dtype=float), (size,)).astype(float)

        def per_mark(value):
            if value is None:
                return np.zeros((size, n_marks))
            return np.broadcast_to(np.asarray(value, dtype=float), (size, n_marks)).astype(float)

        return cls(
            t=t, x=x, m=m, u=scalar(u), y=scalar(y), n=scalar(n), z=scalar(z),
            k=per_mark(k), p=scalar(p), q=scalar(q), r=per_mark(r), lam=scalar(lam),
        )

    @property
    def size(self):
        return self.x.shape[0]

    def with_values(self, **changes):
        return replace(self, **changes)

    def take(self, rows):
        """Sub-point made of the given particle rows."""
        t = self.t[rows] if np.ndim(self.t) else self.t
        return replace(
            self, t=t, **{
                name: getattr(self, name)[rows]
                for name in VECTOR_FIELDS + MARK_FIELDS + SCALAR_FIELDS
            }
        )


@dataclass(frozen=True)
class HorizonMode:
    kind: str
    T: float
    kappa: float = 0.0

    def __post_init__(self):
        if self.kind not in ('finite', 'infinite'):
            raise ModelError(f"horizon mode must be 'finite' or 'infinite', got '{self.kind}'")
        if not self.T > 0:
            raise ModelError(f"horizon must be positive, got {self.T}")

    @classmethod
    def finite(cls, T):
        return cls('finite', float(T))

    @classmethod
    def infinite(cls, T_max, kappa=0.0):
        return cls('infinite', float(T_max), float(kappa))

    @property
    def is_finite(self):
        return self.kind == 'finite'


def zero_coefficient(pt, *args):
    return np.zeros(pt.size)


zero_coefficient.is_zero = True


def zero_terminal(*args):
    return np.zeros(np.shape(args[0]))


zero_terminal.is_zero = True


def identity(value, *args):
    return np.asarray(value, dtype=float)


def unit_initial(times):
    return np.ones_like(times)


def _as_shape(value, shape):
    """Broadcast a derivative to the layout of the field it belongs to."""
    value = np.asarray(value, dtype=float)
    if len(shape) == 2 and value.ndim == 1 and shape[1] == 1 and value.shape[0] == shape[0]:
        value = value[:, None]
    return np.broadcast_to(value, shape)


def _default_derivatives():
    return {
        'h1:y': lambda y: np.ones(np.shape(y)),
        'phi:x': lambda x: np.ones(np.shape(x)),
        'psi:x': lambda x: np.ones(np.shape(x)),
    }


@dataclass(eq=False)
class CoefficientModel:
    """The coefficients of a controlled forward-backward system.

    b, sigma, g and f take a HamiltonianPoint; gamma also takes the mark e.
    h1 (the initial utility, h in infinite mode) takes y, h2 takes (x, n),
    phi and psi take x. Analytic derivatives live in `derivatives` under keys
    like 'b:x' or 'h2:n' and are checked against central differences on
    construction; everything else is differentiated numerically.
    """
    name: str
    b: object
    sigma: object = zero_coefficient
    gamma: object = zero_coefficient
    g: object = zero_coefficient
    f: object = zero_coefficient
    h1: object = identity
    h2: object = zero_terminal
    phi: object = identity
    psi: object = identity
    x0: object = unit_initial
    a: float = 0.0
    control_bounds: tuple = (-np.inf, np.inf)
    delay: DelaySpec = field(default_factory=DelaySpec.no_delay)
    jumps: JumpSpec = field(default_factory=JumpSpec.empty)
    horizon: HorizonMode = field(default_factory=lambda: HorizonMode.finite(1.0))
    derivatives: dict = field(default_factory=dict)
    fd_step: float = field(default_factory=lambda: get_config().FD_STEP)

    def __post_init__(self):
        lo, hi = self.control_bounds
        if not lo <= hi:
            raise ModelError(f"control bounds must satisfy lo <= hi, got {self.control_bounds}")
        merged = _default_derivatives()
        if self.h1 is not identity:
            merged.pop('h1:y')
        if self.phi is not identity:
            merged.pop('phi:x')
        if self.psi is not identity:
            merged.pop('psi:x')
        merged.update(self.derivatives)
        self.derivatives = merged
        self.check_derivatives()

    @property
    def mode(self):
        return self.horizon.kind

    @property
    def n_lift(self):
        return self.delay.n

    @property
    def m_dim(self):
        """Length of the mean-field argument: E[Phi(X)] or E[lifted state]."""
        return 1 if self.horizon.is_finite else self.delay.n

    @property
    def n_marks(self):
        return self.jumps.n_marks

    def gamma_matrix(self, pt):
        """gamma at every mark, shaped (size, n_marks)."""
        if self.n_marks == 0:
            return np.zeros((pt.size, 0))
        return np.stack([self.gamma(pt, e) for e in self.jumps.marks], axis=-1)

    def partial(self, name, var, pt, mark=None):
        """Partial derivative of coefficient `name` in point field `var`."""
        fn = getattr(self, name)
        shape = getattr(pt, var).shape
        if getattr(fn, 'is_zero', False):
            return np.zeros(shape)
        extra = () if mark is None else (mark,)
        analytic = self.derivatives.get(f"{name}:{var}")
        if analytic is not None:
            return _as_shape(analytic(pt, *extra), shape)
        return self._fd_point(fn, var, pt, extra)

    def scalar_partial(self, name, var, *args):
        """Derivative of h1 (y), h2 (x, n), phi or psi (x)."""
        fn = getattr(self, name)
        shape = np.shape(args[0])
        if getattr(fn, 'is_zero', False):
            return np.zeros(shape)
        analytic = self.derivatives.get(f"{name}:{var}")
        if analytic is not None:
            return np.broadcast_to(np.asarray(analytic(*args), dtype=float), shape)
        position = 1 if (name == 'h2' and var == 'n') else 0
        base = np.asarray(args[position], dtype=float)
        step = self._fd_steps(base, f"{name}:{var}")
        plus = list(args)
        minus = list(args)
        plus[position] = base + step
        minus[position] = base - step
        return (fn(*plus) - fn(*minus)) / (2.0 * step)

    def _fd_steps(self, base, label):
        step = self.fd_step * np.maximum(1.0, np.abs(base))
        if not np.all(np.isfinite(step)) or np.any(step < MIN_FD_STEP) or self.fd_step <= 0:
            raise ModelError(f"finite-difference step underflow for {label}")
        return step

    def _fd_point(self, fn, var, pt, extra):
        base = getattr(pt, var)
        step = self._fd_steps(base, f"{fn.__name__ if hasattr(fn, '__name__') else 'fn'}:{var}")
        if base.ndim == 1:
            plus = fn(pt.with_values(**{var: base + step}), *extra)
            minus = fn(pt.with_values(**{var: base - step}), *extra)
            return (plus - minus) / (2.0 * step)
        out = np.empty(base.shape)
        for col in range(base.shape[1]):
            bumped = base.copy()
            bumped[:, col] += step[:, col]
            plus = fn(pt.with_values(**{var: bumped}), *extra)
            bumped[:, col] -= 2.0 * step[:, col]
            minus = fn(pt.with_values(**{var: bumped}), *extra)
            out[:, col] = (plus - minus) / (2.0 * step[:, col])
        return out

    def random_point(self, size, rng):
        """Random evaluation point inside the admissible region."""
        lo, hi = self.control_bounds
        if np.isfinite(lo) and np.isfinite(hi) and hi > lo:
            width = hi - lo
            u = rng.uniform(lo + 0.1 * width, hi - 0.1 * width, size)
        elif np.isfinite(lo):
            u = lo + 0.1 + rng.exponential(1.0, size)
        elif np.isfinite(hi):
            u = hi - 0.1 - rng.exponential(1.0, size)
        else:
            u = rng.normal(size=size)
        J = self.n_marks
        return HamiltonianPoint.build(
            t=rng.uniform(0.0, self.horizon.T, size),
            x=rng.normal(size=(size, self.n_lift)),
            m=rng.normal(size=(size, self.m_dim)),
            u=u,
            n_marks=J,
            y=rng.normal(size=size),
            n=rng.normal(size=size),
            z=rng.normal(size=size),
            k=rng.normal(size=(size, J)),
            p=rng.normal(size=size),
            q=rng.normal(size=size),
            r=rng.normal(size=(size, J)),
            lam=rng.uniform(0.5, 1.5, size),
        )

    def check_derivatives(self, n_points=None, seed=0, tolerance=None):
        """Compare every registered derivative with central differences.

        Raises ModelError listing the keys that disagree; returns the model.
        """
        settings = get_config()
        n_points = n_points or settings.DERIVATIVE_PROBES
        tolerance = tolerance or settings.DERIVATIVE_TOLERANCE
        rng = np.random.default_rng(seed)
        pt = self.random_point(n_points, rng)
        scalar_args = {
            'h1': (pt.y,),
            'h2': (pt.x[:, 0], pt.n),
            'phi': (pt.x[:, 0],),
            'psi': (pt.x[:, 0],),
        }
        mismatched = []
        for key, analytic in self.derivatives.items():
            name, var = key.split(':')
            fn = getattr(self, name)
            if name in scalar_args:
                args = scalar_args[name]
                position = 1 if (name == 'h2' and var == 'n') else 0
                exact = np.broadcast_to(np.asarray(analytic(*args), dtype=float), np.shape(args[0]))
                step = self._fd_steps(args[position], key)
                plus, minus = list(args), list(args)
                plus[position] = args[position] + step
                minus[position] = args[position] - step
                numeric = (fn(*plus) - fn(*minus)) / (2.0 * step)
                pairs = [(exact, numeric)]
            elif name == 'gamma':
                pairs = [
                    (_as_shape(analytic(pt, e), getattr(pt, var).shape),
                     self._fd_point(fn, var, pt, (e,)))
                    for e in self.jumps.marks
                ]
            else:
                exact = _as_shape(analytic(pt), getattr(pt, var).shape)
                pairs = [(exact, self._fd_point(fn, var, pt, ()))]
            for exact, numeric in pairs:
                scale = np.maximum(1.0, np.abs(exact))
                if not np.all(np.abs(exact - numeric) <= tolerance * scale):
                    mismatched.append(key)
                    break
        if mismatched:
            raise ModelError(
                f"model '{self.name}': analytic derivatives disagree with finite differences: "
                f"{', '.join(sorted(mismatched))}"
            )
        logger.debug(f"Model '{self.name}': {len(self.derivatives)} derivatives checked")
        return self


@dataclass(frozen=True, eq=False)
class ControlProcess:
    """Control values on the main grid, clamped to the admissible interval."""
    grid: object
    values: np.ndarray
    bounds: tuple = (-np.inf, np.inf)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape[-1] != self.grid.n_main or values.ndim not in (1, 2):
            raise GridError(
                f"control needs {self.grid.n_main} main-grid values, got shape {values.shape}"
            )
        if np.any(np.isnan(values)):
            raise ModelError("control values must not be NaN")
        lo, hi = self.bounds
        object.__setattr__(self, 'values', np.clip(values, lo, hi))

    @classmethod
    def constant(cls, grid, value, bounds=(-np.inf, np.inf)):
        return cls(grid, np.full(grid.n_main, float(value)), bounds)

    @classmethod
    def from_function(cls, grid, fn, bounds=(-np.inf, np.inf)):
        return cls(grid, np.asarray(fn(grid.main_times), dtype=float), bounds)

    @property
    def trajectory(self):
        return Trajectory(self.grid, self.values, main_only=True)

    def at_step(self, k):
        return self.values[..., k]

    def shifted(self, eta_values, s):
        """Control + s * eta (still clamped to the bounds)."""
        return ControlProcess(self.grid, self.values + s * np.asarray(eta_values, dtype=float), self.bounds)
