"""Two-level nuclear-spin dynamics and the temporal Bell functional.

Conventions
-----------
The density matrix is written in the ordered basis ``(|1>, |0>)`` so that
the initial state ``|1><1|`` sits on the +z pole of the Bloch sphere::

    rho = (I + x*sx + y*sy + z*sz) / 2,   Q11(0, t) = (1 + z(t)) / 2

Resonant RF driving is a rotation about x at angular frequency ``omega``.
Noise acts in the driven frame:

* ``gamma_phi`` -- Markovian fluctuation of the rotation angle (Lindblad
  operator ``sqrt(gamma_phi / 2) * sx``); damps y and z at ``gamma_phi``.
* ``gamma_1`` -- relaxation toward the infinite-temperature state ``I/2``
  (isotropic depolarisation); damps every Bloch component at ``gamma_1 / 2``.

With this generator the y-z plane is damped uniformly at
``gamma_eff = gamma_phi + gamma_1 / 2`` and the survival probability is
exactly ``(1 + exp(-gamma_eff t) cos(omega t)) / 2``, which the RK4
integrator reproduces to its truncation error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import DomainError, SearchError, ValidationError

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)

_TOL = 1e-12


@dataclass(frozen=True)
class RabiParams:
    """Drive and noise rates, all in SI units (rad/s and 1/s)."""

    omega: float
    gamma_phi: float = 0.0
    gamma_1: float = 0.0

    def __post_init__(self):
        for name in ("omega", "gamma_phi", "gamma_1"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise DomainError(f"{name} must be finite, got {v}")
        if self.omega <= 0:
            raise DomainError(f"omega must be > 0, got {self.omega}")
        if self.gamma_phi < 0 or self.gamma_1 < 0:
            raise DomainError("noise rates must be non-negative")

    @property
    def gamma_eff(self) -> float:
        """Envelope decay rate of the Rabi oscillation."""
        return self.gamma_phi + 0.5 * self.gamma_1


@dataclass(frozen=True)
class DensityMatrix:
    elements: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.elements, dtype=complex)
        if m.shape != (2, 2):
            raise ValidationError(f"density matrix must be 2x2, got {m.shape}")
        if abs(np.trace(m) - 1) > _TOL:
            raise ValidationError(f"trace {np.trace(m)} != 1")
        if np.max(np.abs(m - m.conj().T)) > _TOL:
            raise ValidationError("density matrix is not Hermitian")
        if np.linalg.eigvalsh(0.5 * (m + m.conj().T)).min() < -_TOL:
            raise ValidationError("density matrix has a negative eigenvalue")
        object.__setattr__(self, "elements", m)

    @classmethod
    def pure(cls, state: int = 1) -> "DensityMatrix":
        """Projector onto ``|1>`` (``state=1``) or ``|0>`` (``state=0``)."""
        if state not in (0, 1):
            raise DomainError("state must be 0 or 1")
        m = np.zeros((2, 2), dtype=complex)
        m[1 - state, 1 - state] = 1.0
        return cls(m)

    @classmethod
    def maximally_mixed(cls) -> "DensityMatrix":
        return cls(np.eye(2, dtype=complex) / 2)

    @classmethod
    def from_bloch(cls, r) -> "DensityMatrix":
        x, y, z = (float(c) for c in r)
        return cls(0.5 * (np.eye(2) + x * SIGMA_X + y * SIGMA_Y + z * SIGMA_Z))

    def bloch(self) -> np.ndarray:
        m = self.elements
        return np.array([
            np.real(np.trace(m @ SIGMA_X)),
            np.real(np.trace(m @ SIGMA_Y)),
            np.real(np.trace(m @ SIGMA_Z)),
        ])

    def population(self, state: int = 1) -> float:
        """``<state|rho|state>``."""
        return float(np.real(self.elements[1 - state, 1 - state]))


@dataclass(frozen=True)
class ConditionalProbability:
    value: float
    t_start: float
    t_end: float

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise DomainError(f"probability {self.value} outside [0, 1]")


def survival_probability(params: RabiParams, t):
    """Probability Q11(0, t) of finding state 1 after driving for ``t``.

    Accepts a scalar or an array of durations; returns the same shape.
    """
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0) or np.any(~np.isfinite(t_arr)):
        raise DomainError("durations must be finite and non-negative")
    q = 0.5 * (1.0 + np.exp(-params.gamma_eff * t_arr) * np.cos(params.omega * t_arr))
    return float(q) if q.ndim == 0 else q


# -- master-equation integrator ------------------------------------------------

def _generator(params: RabiParams) -> np.ndarray:
    """Linear Bloch-equation matrix A with dr/dt = A r."""
    g_perp = params.gamma_eff
    g_x = 0.5 * params.gamma_1
    w = params.omega
    return np.array([
        [-g_x, 0.0, 0.0],
        [0.0, -g_perp, -w],
        [0.0, w, -g_perp],
    ])


def _rk4_step(a, r, h):
    k1 = a @ r
    k2 = a @ (r + 0.5 * h * k1)
    k3 = a @ (r + 0.5 * h * k2)
    k4 = a @ (r + h * k3)
    return r + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def _integrate(r, params, t0, t1, dt):
    """Classical RK4 from ``t0`` to ``t1`` on a step grid anchored at absolute
    time zero (nodes at multiples of ``dt``), with partial end steps.

    Global error is O(dt**4).
    """
    a = _generator(params)
    r = np.array(r, dtype=float)
    t = t0
    k = math.floor(t0 / dt) + 1
    while t < t1:
        nxt = min(k * dt, t1)
        h = nxt - t
        if h > 0:
            r = _rk4_step(a, r, h)
        t = nxt
        k += 1
    return r


def evolve_master_equation(rho: DensityMatrix, params: RabiParams, t: float,
                           dt: float) -> DensityMatrix:
    """Integrate the Lindblad equation for a duration ``t`` with step ``dt``.

    Uses fixed-step fourth-order Runge-Kutta on the Bloch vector (global error
    O(dt^4), local O(dt^5)). ``dt`` should be well below ``1/omega``.
    """
    if not isinstance(rho, DensityMatrix):
        rho = DensityMatrix(rho)
    if dt <= 0 or not math.isfinite(dt):
        raise DomainError(f"dt must be positive, got {dt}")
    if t < 0:
        raise DomainError(f"t must be non-negative, got {t}")
    n = max(1, math.ceil(t / dt - 1e-12))
    h = t / n
    a = _generator(params)
    r = rho.bloch()
    for _ in range(n):
        r = _rk4_step(a, r, h)
    return DensityMatrix.from_bloch(r)


# -- Bell functional -----------------------------------------------------------

def _check_prob(p, name):
    arr = np.asarray(p, dtype=float)
    if np.any(~(arr >= 0.0)) or np.any(~(arr <= 1.0)):
        raise DomainError(f"{name} must lie in [0, 1]")
    return arr


def bell_functional(q_t, q_2t):
    """``q_2t - q_t**2``; a negative value violates the classical bound."""
    a = _check_prob(q_t, "q_t")
    b = _check_prob(q_2t, "q_2t")
    out = b - a * a
    return float(out) if np.ndim(out) == 0 else out


def bell_curve(params: RabiParams, t_grid: Sequence[float]) -> np.ndarray:
    """Return an ``(n, 2)`` array of ``(t, B(t))`` rows."""
    t = np.asarray(t_grid, dtype=float).ravel()
    if t.size == 0:
        raise DomainError("time grid is empty")
    if np.any(t < 0):
        raise DomainError("time grid must be non-negative")
    if np.any(np.diff(t) < 0):
        raise DomainError("time grid must be sorted")
    b = bell_functional(survival_probability(params, t),
                        survival_probability(params, 2 * t))
    return np.column_stack([t, b])


def _bell_stable(params, t):
    """B(t) rewritten with expm1 so that small-t values keep full precision."""
    g, w = params.gamma_eff, params.omega
    a = np.expm1(-g * t) * np.cos(w * t) - 2 * np.sin(0.5 * w * t) ** 2
    b = np.expm1(-2 * g * t) * np.cos(2 * w * t) - 2 * np.sin(w * t) ** 2
    return (2 * b - 4 * a - a * a) / 4


def _time_grid(omega, n_lin=20000, n_log=400, span=4 * math.pi):
    x = np.concatenate([np.logspace(-6, -1, n_log, endpoint=False),
                        np.linspace(0.1, span, n_lin)])
    return x / omega


def min_bell(params: RabiParams, span: float = 4 * math.pi):
    """Minimum of B(t) over omega*t in (0, span]: grid search then a bounded
    scalar refinement around the best node. Returns ``(t_min, B_min)``."""
    t = _time_grid(params.omega, span=span)
    b = _bell_stable(params, t)
    i = int(np.argmin(b))
    lo = t[max(i - 1, 0)] if i > 0 else 0.5 * t[0]
    hi = t[min(i + 1, t.size - 1)]
    res = minimize_scalar(lambda s: _bell_stable(params, s), bounds=(lo, hi),
                          method="bounded", options={"xatol": 1e-12 / params.omega})
    if res.success and res.fun < b[i]:
        return float(res.x), float(res.fun)
    return float(t[i]), float(b[i])


def _min_scaled_bell(params, span=4 * math.pi):
    """min over t of B(t) / (omega t)^2 including the t -> 0 limit.

    Same sign as ``min_bell`` but O(1) near the crossover, where the deepest
    violation shrinks toward t = 0.
    """
    t = _time_grid(params.omega, span=span)
    scaled = _bell_stable(params, t) / (params.omega * t) ** 2
    limit = 0.25 * (params.gamma_eff / params.omega) ** 2 - 0.5
    return min(float(scaled.min()), limit)


@dataclass
class CriticalNoise:
    gamma_star: float
    t_at_min: float
    min_bell: float
    bracket: tuple
    iterations: int
    samples: list = field(default_factory=list, repr=False)


def critical_noise(omega: float, tol: float = 1e-6, max_expand: int = 20) -> CriticalNoise:
    """Smallest effective noise rate at which the Bell functional no longer
    goes negative for any t.

    Bisection on ``gamma`` (bracket starts at ``[0, 2*omega]`` and grows
    geometrically), with grid + bounded minimisation over ``t`` inside. The
    minimum over ``t`` must be monotone in ``gamma`` across all sampled points;
    otherwise a :class:`SearchError` is raised.
    """
    if not omega > 0 or not tol > 0:
        raise DomainError("omega and tol must be positive")

    samples = []

    def f(gamma):
        v = _min_scaled_bell(RabiParams(omega, gamma_phi=gamma))
        samples.append((gamma, v))
        return v

    lo, hi = 0.0, 2.0 * omega
    f_lo, f_hi = f(lo), f(hi)
    expand = 0
    while f_hi < 0:
        if expand >= max_expand:
            raise SearchError("no sign change in the Bell minimum",
                              {"bracket": (lo, hi), "f_lo": f_lo, "f_hi": f_hi})
        lo, f_lo = hi, f_hi
        hi *= 2.0
        f_hi = f(hi)
        expand += 1
    if f_lo >= 0:
        raise SearchError("Bell minimum is non-negative at the lower bracket",
                          {"bracket": (lo, hi), "f_lo": f_lo, "f_hi": f_hi})

    it = 0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if f(mid) < 0:
            lo = mid
        else:
            hi = mid
        it += 1

    ordered = sorted(samples)
    vals = np.array([v for _, v in ordered])
    if np.any(np.diff(vals) < -1e-12):
        raise SearchError("min_t B is not monotone in gamma over the bracket",
                          {"samples": ordered})

    gamma_star = 0.5 * (lo + hi)
    t_min, b_min = min_bell(RabiParams(omega, gamma_phi=lo))
    return CriticalNoise(gamma_star=gamma_star, t_at_min=t_min, min_bell=b_min,
                         bracket=(lo, hi), iterations=it, samples=ordered)


def stationarity_check(params: RabiParams, delta: float, t_starts: Sequence[float],
                       dt: float | None = None) -> float:
    """Max spread of Q(t_s, t_s + delta) over preparation times ``t_starts``.

    Each preparation is a fresh ``|1>`` at absolute time ``t_s``; the RK4 grid
    is anchored at absolute zero, so different starts see different step
    partitions and the spread measures time-homogeneity to integrator accuracy.
    """
    starts = [float(s) for s in t_starts]
    if not starts:
        raise DomainError("t_starts must be non-empty")
    if delta < 0 or any(s < 0 for s in starts):
        raise DomainError("times must be non-negative")
    if dt is None:
        dt = 1e-3 / params.omega
    r0 = DensityMatrix.pure(1).bloch()
    qs = []
    for s in starts:
        r = _integrate(r0, params, s, s + delta, dt)
        qs.append(ConditionalProbability(float(np.clip(0.5 * (1 + r[2]), 0, 1)), s, s + delta))
    vals = np.array([q.value for q in qs])
    return float(vals.max() - vals.min())
