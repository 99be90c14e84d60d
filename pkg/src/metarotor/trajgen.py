"""Waypoint generation, smoothing-spline fitting, and flat-output maps.

Targets are piecewise-polynomial splines through a uniform random walk of
waypoints: degree 7 per segment for dimensions smoothed in the 4th derivative
and degree 3 for dimensions smoothed in acceleration.  For the underactuated
vehicle, a flatness map converts (x, y) output derivatives into a full
state/input reference.
"""

import json
from dataclasses import dataclass
from math import factorial

import numpy as np

from . import rng
from .dynamics import GRAVITY, PFAR

SNAP = "snap"
ACCEL = "acceleration"

_ORDER = {SNAP: 4, ACCEL: 2}
_DEGREE = {SNAP: 7, ACCEL: 3}
_CONTINUITY = {SNAP: 4, ACCEL: 2}

U1_MIN = 1e-3 * GRAVITY


class SplineFitError(np.linalg.LinAlgError):
    """Singular or inconsistent constraint system during spline fitting."""


class SplineDomainError(ValueError):
    """Evaluation time outside the spline's domain."""


class FlatnessSingularityError(ArithmeticError):
    """Reference thrust too close to free fall for the flatness map."""


def random_walk(key, num_points, step_bounds):
    """Uniform random walk of waypoints starting at the origin.

    step_bounds is (dims, 2) with per-dimension [low, high] increments.
    """
    if num_points < 2:
        raise ValueError("need at least two waypoints")
    bounds = np.atleast_2d(np.asarray(step_bounds, dtype=float))
    dims = bounds.shape[0]
    gen = rng.generator(key)
    steps = gen.uniform(bounds[:, 0], bounds[:, 1], size=(num_points - 1, dims))
    pts = np.vstack([np.zeros(dims), np.cumsum(steps, axis=0)])
    return pts


@dataclass
class PolynomialSpline:
    """Piecewise polynomials per dimension over shared knot times.

    coeffs[d] has shape (segments, degree_d + 1) in powers of (t - knot[s]).
    """

    knot_times: np.ndarray
    coeffs: list

    @property
    def dims(self):
        return len(self.coeffs)

    @property
    def duration(self):
        return float(self.knot_times[-1])

    def degree(self, dim):
        return self.coeffs[dim].shape[1] - 1

    def _segment(self, t):
        if t < self.knot_times[0] or t > self.knot_times[-1]:
            raise SplineDomainError(
                f"t={t} outside [{self.knot_times[0]}, {self.knot_times[-1]}]")
        s = int(np.searchsorted(self.knot_times, t, side="right")) - 1
        return min(max(s, 0), len(self.knot_times) - 2)

    def eval(self, t, order=0):
        """Exact value of the order-th derivative at time t, all dimensions."""
        s = self._segment(t)
        tau = t - self.knot_times[s]
        return np.array([self._eval_seg(d, s, tau, order) for d in range(self.dims)])

    def eval_dim(self, dim, t, order=0):
        s = self._segment(t)
        return self._eval_seg(dim, s, t - self.knot_times[s], order)

    def _eval_seg(self, dim, seg, tau, order):
        c = self.coeffs[dim][seg]
        deg = len(c) - 1
        if order > deg:
            return 0.0
        total = 0.0
        power = 1.0
        for i in range(order, deg + 1):
            total += c[i] * (factorial(i) / factorial(i - order)) * power
            power *= tau
        return total

    def sample(self, times, order=0):
        return np.array([self.eval(t, order) for t in times])

    def to_dict(self):
        return {
            "dims": self.dims,
            "knot_times": self.knot_times.tolist(),
            "coeffs": [
                [self.coeffs[d][s].tolist() for d in range(self.dims)]
                for s in range(len(self.knot_times) - 1)
            ],
        }

    @classmethod
    def from_dict(cls, data):
        knots = np.asarray(data["knot_times"], dtype=float)
        dims = data["dims"]
        coeffs = [
            np.array([data["coeffs"][s][d] for s in range(len(knots) - 1)])
            for d in range(dims)
        ]
        return cls(knots, coeffs)

    def to_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def from_json(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


def _deriv_row(n_coef, order, tau):
    row = np.zeros(n_coef)
    for i in range(order, n_coef):
        row[i] = factorial(i) / factorial(i - order) * tau ** (i - order)
    return row


def _gram_matrix(n_coef, order, h):
    """Integral over one segment of products of order-th derivatives."""
    gram = np.zeros((n_coef, n_coef))
    for i in range(order, n_coef):
        for j in range(order, n_coef):
            ci = factorial(i) / factorial(i - order)
            cj = factorial(j) / factorial(j - order)
            power = i + j - 2 * order
            gram[i, j] = ci * cj * h ** (power + 1) / (power + 1)
    return gram


def _fit_dim(waypoints, knots, objective):
    order = _ORDER[objective]
    cont = _CONTINUITY[objective]
    n_coef = _DEGREE[objective] + 1
    nseg = len(knots) - 1
    nvar = nseg * n_coef
    h = np.diff(knots)

    rows, rhs = [], []

    def constraint(seg, deriv, tau, value):
        row = np.zeros(nvar)
        row[seg * n_coef:(seg + 1) * n_coef] = _deriv_row(n_coef, deriv, tau)
        rows.append(row)
        rhs.append(value)

    for s in range(nseg):
        constraint(s, 0, 0.0, waypoints[s])
        constraint(s, 0, h[s], waypoints[s + 1])
    for s in range(nseg - 1):
        for r in range(1, cont + 1):
            row = np.zeros(nvar)
            row[s * n_coef:(s + 1) * n_coef] = _deriv_row(n_coef, r, h[s])
            row[(s + 1) * n_coef:(s + 2) * n_coef] = -_deriv_row(n_coef, r, 0.0)
            rows.append(row)
            rhs.append(0.0)
    for r in range(1, order):
        constraint(0, r, 0.0, 0.0)
        constraint(nseg - 1, r, h[-1], 0.0)

    a_mat = np.asarray(rows)
    b_vec = np.asarray(rhs)
    q_mat = np.zeros((nvar, nvar))
    for s in range(nseg):
        sl = slice(s * n_coef, (s + 1) * n_coef)
        q_mat[sl, sl] = _gram_matrix(n_coef, order, h[s])

    ncon = a_mat.shape[0]
    kkt = np.zeros((nvar + ncon, nvar + ncon))
    kkt[:nvar, :nvar] = 2.0 * q_mat
    kkt[:nvar, nvar:] = a_mat.T
    kkt[nvar:, :nvar] = a_mat
    full = np.concatenate([np.zeros(nvar), b_vec])
    try:
        sol = np.linalg.solve(kkt, full)
    except np.linalg.LinAlgError:
        sol, residual, rank, _ = np.linalg.lstsq(kkt, full, rcond=None)
        check = a_mat @ sol[:nvar] - b_vec
        if np.max(np.abs(check)) > 1e-6:
            raise SplineFitError("constraint system is singular") from None
    return sol[:nvar].reshape(nseg, n_coef)


def fit_spline(waypoints, duration, objectives):
    """Interpolating spline through waypoints at uniform knot times.

    Each dimension minimizes the integrated squared derivative named by its
    objective ("snap" or "acceleration") subject to waypoint interpolation,
    junction continuity, and rest boundary conditions, solved as an
    equality-constrained quadratic program.
    """
    waypoints = np.atleast_2d(np.asarray(waypoints, dtype=float))
    if waypoints.shape[0] < 2:
        raise ValueError("need at least two waypoints")
    if duration <= 0:
        raise ValueError("duration must be positive")
    if len(objectives) != waypoints.shape[1]:
        raise ValueError("one objective per dimension required")
    knots = np.linspace(0.0, duration, waypoints.shape[0])
    coeffs = [_fit_dim(waypoints[:, d], knots, objectives[d])
              for d in range(waypoints.shape[1])]
    return PolynomialSpline(knots, coeffs)


def spline_objective_cost(spline, dim, objective):
    """Integrated squared derivative of the given order along one dimension."""
    order = _ORDER[objective]
    n_coef = spline.coeffs[dim].shape[1]
    h = np.diff(spline.knot_times)
    total = 0.0
    for s in range(len(h)):
        gram = _gram_matrix(n_coef, order, h[s])
        c = spline.coeffs[dim][s]
        total += c @ gram @ c
    return float(total)


def eval_spline(spline, t, order=0):
    """Module-level alias of PolynomialSpline.eval."""
    return spline.eval(t, order)


def flat_to_state_input(d0, d1, d2, d3, d4):
    """Map flat-output derivative series to state and input references.

    Arguments are (N, 2) arrays of the (x, y) outputs and their first four
    derivatives sampled along a trajectory.  Returns states (N, 6) and inputs
    (N, 2); the reference roll is the two-argument arctangent, unwrapped over
    the sample sequence.
    """
    d0, d1, d2, d3, d4 = (np.atleast_2d(a) for a in (d0, d1, d2, d3, d4))
    ax, ay = d2[:, 0], d2[:, 1] + GRAVITY
    u1_sq = ax ** 2 + ay ** 2
    u1 = np.sqrt(u1_sq)
    if np.min(u1) < U1_MIN:
        raise FlatnessSingularityError(
            f"reference thrust {np.min(u1):.3g} below threshold {U1_MIN:.3g}")
    phi = np.unwrap(np.arctan2(-ax, ay))
    dphi = (ax * d3[:, 1] - d3[:, 0] * ay) / u1_sq
    u2 = (ax * d4[:, 1] - d4[:, 0] * ay
          - 2.0 * dphi * (ax * d3[:, 0] + ay * d3[:, 1])) / u1_sq
    states = np.column_stack([d0[:, 0], d0[:, 1], phi, d1[:, 0], d1[:, 1], dphi])
    inputs = np.column_stack([u1, u2])
    return states, inputs


@dataclass
class TargetTrajectory:
    """A spline target with enough derivatives for its vehicle's controller."""

    system: str
    spline: PolynomialSpline

    @property
    def duration(self):
        return self.spline.duration

    def pfar_reference(self, t):
        """(q*, qdot*, qddot*) at time t."""
        return (self.spline.eval(t, 0), self.spline.eval(t, 1), self.spline.eval(t, 2))

    def flat_derivatives(self, times):
        """Stacked flat-output derivatives d^k(x, y)/dt^k, k = 0..4, (5, N, 2)."""
        times = np.atleast_1d(times)
        return np.stack([self.spline.sample(times, order=k) for k in range(5)])

    def reference_states(self, times):
        """Reference states (N, 6) at sample times."""
        times = np.atleast_1d(times)
        if self.system == PFAR:
            return np.column_stack([self.spline.sample(times, 0),
                                    self.spline.sample(times, 1)])
        d = self.flat_derivatives(times)
        states, _ = flat_to_state_input(d[0], d[1], d[2], d[3], d[4])
        return states

    def reference_inputs(self, times):
        """Open-loop feasible inputs (N, m) along the reference."""
        times = np.atleast_1d(times)
        if self.system == PFAR:
            acc = self.spline.sample(times, 2)
            pos = self.spline.sample(times, 0)
            out = np.empty((len(times), 3))
            for k, t in enumerate(times):
                phi = pos[k, 2]
                c, s = np.cos(phi), np.sin(phi)
                fx, fy = acc[k, 0], acc[k, 1] + GRAVITY
                out[k] = [c * fx + s * fy, -s * fx + c * fy, acc[k, 2]]
            return out
        d = self.flat_derivatives(times)
        _, inputs = flat_to_state_input(d[0], d[1], d[2], d[3], d[4])
        return inputs

    def initial_state(self):
        if self.system == PFAR:
            q = self.spline.eval(0.0, 0)
            dq = self.spline.eval(0.0, 1)
            return np.concatenate([q, dq])
        return self.reference_states(np.array([0.0]))[0]


DEFAULT_STEP_XY = 2.0
DEFAULT_STEP_PHI = np.pi / 6.0


def default_step_bounds(system):
    if system == PFAR:
        return np.array([[-DEFAULT_STEP_XY, DEFAULT_STEP_XY],
                         [-DEFAULT_STEP_XY, DEFAULT_STEP_XY],
                         [-DEFAULT_STEP_PHI, DEFAULT_STEP_PHI]])
    return np.array([[-DEFAULT_STEP_XY, DEFAULT_STEP_XY],
                     [-DEFAULT_STEP_XY, DEFAULT_STEP_XY]])


def random_target(system, key, duration=30.0, num_waypoints=6, step_bounds=None):
    """Random-walk waypoints smoothed into a target trajectory."""
    if step_bounds is None:
        step_bounds = default_step_bounds(system)
    pts = random_walk(key, num_waypoints, step_bounds)
    if system == PFAR:
        objectives = [SNAP, SNAP, ACCEL]
    else:
        objectives = [SNAP, SNAP]
    spline = fit_spline(pts, duration, objectives)
    return TargetTrajectory(system, spline)


def loop_target(system, radius=2.0, period=10.0, loops=1):
    """Loop-the-loop target: waypoints around a vertical circle."""
    pts_per_loop = 8
    angles = [-np.pi / 2 + 2 * np.pi * k / pts_per_loop
              for k in range(pts_per_loop * loops + 1)]
    xy = np.array([[radius * np.cos(a), radius + radius * np.sin(a)] for a in angles])
    xy -= xy[0]
    if system == PFAR:
        pts = np.column_stack([xy, np.zeros(len(xy))])
        objectives = [SNAP, SNAP, ACCEL]
    else:
        pts = xy
        objectives = [SNAP, SNAP]
    spline = fit_spline(pts, period * loops, objectives)
    return TargetTrajectory(system, spline)
