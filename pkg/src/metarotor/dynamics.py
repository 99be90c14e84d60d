"""Planar rotorcraft dynamics, quadratic wind drag, and wind sampling.

Two vehicles share the degrees of freedom q = (x, y, phi): the fully-actuated
variant commands body-frame forces and torque directly (3 inputs), while the
underactuated variant commands only thrust along the body y-axis and torque
(2 inputs).  All forces are mass-normalized.  States are 6-vectors
(x, y, phi, xdot, ydot, phidot), either plain arrays or tape variables.
"""

from dataclasses import dataclass

import numpy as np

from . import rng
from .autodiff import Var, absval, cos, sin, stack

GRAVITY = 9.81
F_GRAV = np.array([0.0, -GRAVITY, 0.0])

PFAR = "pfar"
PVTOL = "pvtol"


def control_dim(system):
    if system == PFAR:
        return 3
    if system == PVTOL:
        return 2
    raise ValueError(f"unknown system {system!r}")


def unpack6(state):
    if type(state) is Var or isinstance(state, np.ndarray):
        return state[0], state[1], state[2], state[3], state[4], state[5]
    return tuple(state)


@dataclass(frozen=True)
class PlanarState:
    """Generalized coordinates (x, y, phi) and their rates.

    phi is kept unwrapped (not reduced mod 2*pi): the controllers assume a
    continuous roll angle.
    """

    x: float
    y: float
    phi: float
    xdot: float
    ydot: float
    phidot: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.array)):
            raise ValueError("state components must be finite")

    @property
    def array(self):
        return np.array([self.x, self.y, self.phi, self.xdot, self.ydot, self.phidot])

    @classmethod
    def from_array(cls, arr):
        return cls(*(float(v) for v in arr))


@dataclass(frozen=True)
class DragCoeffs:
    """Aggregate quadratic drag coefficients (surge, sway, rotor arms)."""

    b1: float = 0.01
    b2: float = 1.0
    b3: float = 1.0

    def __post_init__(self):
        if min(self.b1, self.b2, self.b3) < 0:
            raise ValueError("drag coefficients must be non-negative")


@dataclass(frozen=True)
class WindDistribution:
    """Beta distribution scaled to [lower, upper] m/s."""

    lower: float
    upper: float
    alpha: float
    beta: float

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError("require lower < upper")
        if min(self.alpha, self.beta) <= 0:
            raise ValueError("shape parameters must be positive")

    @property
    def mean(self):
        return self.lower + (self.upper - self.lower) * self.alpha / (self.alpha + self.beta)

    def sample(self, key, size=None):
        return rng.beta_scaled(key, self.lower, self.upper, self.alpha, self.beta, size)


TRAIN_WIND = WindDistribution(0.0, 6.0, 5.0, 9.0)
TEST_WIND = WindDistribution(0.0, 9.0, 5.0, 7.0)


def sample_wind(dist, key):
    """Single wind speed draw; deterministic given the key."""
    return float(dist.sample(key))


@dataclass(frozen=True)
class WindProfile:
    """Time-varying wind speed w(t).

    kinds: "constant" holds w_max; "ramp_hold" rises smoothly from 0 to w_max
    over t_rise then holds; "sinusoidal" is w_max * sin^2(pi t / period).
    """

    kind: str = "constant"
    w_max: float = 0.0
    t_rise: float = 1.0
    period: float = 1.0

    def __call__(self, t):
        return eval_wind_profile(self, t)


def eval_wind_profile(profile, t):
    if t < 0:
        raise ValueError("t must be non-negative")
    if profile.kind == "constant":
        return profile.w_max
    if profile.kind == "ramp_hold":
        s = min(max(t / profile.t_rise, 0.0), 1.0)
        return profile.w_max * (3.0 * s * s - 2.0 * s * s * s)
    if profile.kind == "sinusoidal":
        return profile.w_max * np.sin(np.pi * t / profile.period) ** 2
    raise ValueError(f"unknown wind profile kind {profile.kind!r}")


def drag_force(state, w, coeffs):
    """Mass-normalized generalized drag force from wind speed w along inertial x.

    Body-frame relative air speeds set quadratic (v|v|) drag components, which
    are mapped back through the transposed rotation.
    """
    _, _, phi, dx, dy, dphi = unpack6(state)
    c, s = cos(phi), sin(phi)
    rx = dx - w
    v1 = rx * c + dy * s
    v2 = -rx * s + dy * c
    vl = -dphi - v2
    vr = dphi - v2
    d1 = coeffs.b1 * (v1 * absval(v1))
    d2 = coeffs.b2 * (v2 * absval(v2))
    d3 = coeffs.b3 * (vr * absval(vr) - vl * absval(vl))
    return stack([-(c * d1 + s * d2), -(-s * d1 + c * d2), -d3])


def pfar_dynamics(state, u, f_ext):
    """State derivative of the fully-actuated vehicle: qddot = f_g + R(phi) u + f_ext."""
    _, _, phi, dx, dy, dphi = unpack6(state)
    c, s = cos(phi), sin(phi)
    ax = c * u[0] - s * u[1] + f_ext[0]
    ay = s * u[0] + c * u[1] - GRAVITY + f_ext[1]
    aphi = u[2] + f_ext[2]
    return stack([dx, dy, dphi, ax, ay, aphi])


def pvtol_dynamics(state, u, f_ext):
    """State derivative of the underactuated vehicle: qddot = f_g + B(phi) u + f_ext."""
    _, _, phi, dx, dy, dphi = unpack6(state)
    c, s = cos(phi), sin(phi)
    ax = -s * u[0] + f_ext[0]
    ay = c * u[0] - GRAVITY + f_ext[1]
    aphi = u[1] + f_ext[2]
    return stack([dx, dy, dphi, ax, ay, aphi])


def pvtol_input_matrix(phi):
    """B(phi) mapping the 2 inputs to generalized accelerations (3x2, plain)."""
    c, s = np.cos(phi), np.sin(phi)
    return np.array([[-s, 0.0], [c, 0.0], [0.0, 1.0]])


def input_channel(system, state6):
    """State-space channel (6 x d) through which the adapted force acts.

    Columns are orthonormal for both systems, which the ridge regression
    solver relies on.
    """
    if system == PFAR:
        out = np.zeros((6, 3))
        out[3:, :] = np.eye(3)
        return out
    out = np.zeros((6, 2))
    out[3:, :] = pvtol_input_matrix(float(state6[2]))
    return out


def nominal_xdot(system, state6, u):
    """Plain nominal (zero-disturbance) state derivative for recorded data."""
    phi = float(state6[2])
    c, s = np.cos(phi), np.sin(phi)
    out = np.empty(6)
    out[:3] = state6[3:]
    if system == PFAR:
        out[3] = c * u[0] - s * u[1]
        out[4] = s * u[0] + c * u[1] - GRAVITY
        out[5] = u[2]
    else:
        out[3] = -s * u[0]
        out[4] = c * u[0] - GRAVITY
        out[5] = u[1]
    return out


def dynamics_fn(system):
    return pfar_dynamics if system == PFAR else pvtol_dynamics
