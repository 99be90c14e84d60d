"""Fixed-step closed-loop integration and differentiable tracking losses.

The plant state and any controller-owned quantities (adapted output layer,
integral error, running cost) integrate jointly under classical RK4 with the
control law evaluated at every stage.  Run on plain arrays this produces
simulation traces; run on tape variables it records the whole rollout for
reverse-mode differentiation with respect to the trained parameters.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import controllers as ctrl
from . import dynamics as dyn
from .autodiff import Tape, value_of

DIVERGENCE_LIMIT = 1e6
DIVERGED_LOSS = 1e6


class DivergenceError(ArithmeticError):
    """Non-finite or runaway values during integration."""


class RolloutDiverged(RuntimeError):
    """Aborted rollout; carries the partial trace recorded so far."""

    def __init__(self, step, partial):
        super().__init__(f"rollout diverged at step {step}")
        self.step = step
        self.partial = partial


def _as_tuple(state):
    return state if isinstance(state, tuple) else (state,)


def _stage_finite(ks):
    total = 0.0
    for k in ks:
        total += float(np.sum(value_of(k)))
    return np.isfinite(total)


def rk4_step(vector_field, state, t, dt, check=True):
    """One classical RK4 update of `state` (a value or tuple of values)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    single = not isinstance(state, tuple)
    s0 = _as_tuple(state)
    half = 0.5 * dt
    k1 = _as_tuple(vector_field(t, state if not single else s0[0]))
    if check and not _stage_finite(k1):
        raise DivergenceError(f"non-finite stage value at t={t}")
    s1 = tuple(x + half * k for x, k in zip(s0, k1))
    k2 = _as_tuple(vector_field(t + half, s1 if not single else s1[0]))
    s2 = tuple(x + half * k for x, k in zip(s0, k2))
    k3 = _as_tuple(vector_field(t + half, s2 if not single else s2[0]))
    s3 = tuple(x + dt * k for x, k in zip(s0, k3))
    k4 = _as_tuple(vector_field(t + dt, s3 if not single else s3[0]))
    if check and not (_stage_finite(k2) and _stage_finite(k3) and _stage_finite(k4)):
        raise DivergenceError(f"non-finite stage value at t={t}")
    sixth = dt / 6.0
    out = tuple(x + sixth * (a + 2.0 * b + 2.0 * c + d)
                for x, a, b, c, d in zip(s0, k1, k2, k3, k4))
    return out[0] if single else out


# ---------------------------------------------------------------------------
# plants


class TruePlant:
    """Ground-truth dynamics with quadratic wind drag."""

    def __init__(self, system, coeffs=None, wind=0.0):
        self.system = system
        self.coeffs = coeffs if coeffs is not None else dyn.DragCoeffs()
        self.wind = wind
        self._dyn = dyn.dynamics_fn(system)

    def bind(self, times):
        if callable(self.wind):
            winds = np.array([self.wind(t) for t in times])
        else:
            winds = np.full(len(times), float(self.wind))
        coeffs, dynamics = self.coeffs, self._dyn

        def xdot(j, x, u):
            return dynamics(x, u, dyn.drag_force(x, winds[j], coeffs))

        return xdot


class NominalPlant:
    """Disturbance-free dynamics."""

    _ZERO3 = np.zeros(3)

    def __init__(self, system):
        self.system = system
        self._dyn = dyn.dynamics_fn(system)

    def bind(self, times):
        dynamics, zero = self._dyn, self._ZERO3

        def xdot(j, x, u):
            return dynamics(x, u, zero)

        return xdot


class ModelPlant:
    """A learned dynamics model standing in for the true plant.

    The sentinel parameter value "nominal" selects the exact disturbance-free
    dynamics instead of a network (useful for sanity checks).
    """

    def __init__(self, system, params):
        self.system = system
        self.params = params

    def bind(self, times):
        params = self.params
        if isinstance(params, str):
            if params != "nominal":
                raise ValueError(f"unknown model sentinel {params!r}")
            dynamics = dyn.dynamics_fn(self.system)
            zero = np.zeros(3)
            return lambda j, x, u: dynamics(x, u, zero)

        def xdot(j, x, u):
            return ctrl.mlp_dynamics_forward(params, x, u)

        return xdot


class SyntheticPlant:
    """Nominal dynamics plus a caller-supplied generalized force f_ext(x)."""

    def __init__(self, system, f_ext_fn):
        self.system = system
        self.f_ext_fn = f_ext_fn
        self._dyn = dyn.dynamics_fn(system)

    def bind(self, times):
        dynamics, f_ext_fn = self._dyn, self.f_ext_fn

        def xdot(j, x, u):
            return dynamics(x, u, f_ext_fn(x))

        return xdot


# ---------------------------------------------------------------------------
# controller adapters (bind a law to a target trajectory)


class PdPfar:
    aux_shape = None

    def __init__(self, k_p, k_d):
        self.k_p, self.k_d = k_p, k_d

    def bind(self, target, times):
        refs = [target.pfar_reference(t) for t in times]
        k_p, k_d = self.k_p, self.k_d

        def control(j, x, aux):
            return ctrl.pd_control(x, refs[j], k_p, k_d), None

        return control


class PidPfar:
    aux_shape = (3,)

    def __init__(self, k_p, k_i, k_d):
        self.k_p, self.k_i, self.k_d = k_p, k_i, k_d

    def bind(self, target, times):
        refs = [target.pfar_reference(t) for t in times]
        k_p, k_i, k_d = self.k_p, self.k_i, self.k_d

        def control(j, x, aux):
            return ctrl.pid_control(x, refs[j], aux, k_p, k_i, k_d)

        return control


class SlotineLiPfar:
    def __init__(self, lam, kmat, gamma, features, fparams):
        self.lam, self.kmat, self.gamma = lam, kmat, gamma
        self.features, self.fparams = features, fparams
        self.aux_shape = (3, features.dim)

    def bind(self, target, times):
        refs = [target.pfar_reference(t) for t in times]
        lam, kmat, gamma = self.lam, self.kmat, self.gamma
        features, fparams = self.features, self.fparams

        def control(j, x, aux):
            return ctrl.slotine_li_adaptive(x, refs[j], aux, lam, kmat, gamma,
                                            features, fparams)

        return control


class _PvtolBase:
    @staticmethod
    def _flat_refs(target, times):
        d = target.flat_derivatives(np.asarray(times))
        return [ctrl.FlatTarget.from_rows(d, k) for k in range(len(times))]


class PvtolNominal(_PvtolBase):
    aux_shape = None

    def __init__(self, gains):
        self.gains = gains

    def bind(self, target, times):
        refs = self._flat_refs(target, times)
        gains = ctrl.PvtolGainScalars.from_gains(self.gains)

        def control(j, x, aux):
            info = ctrl.pvtol_nominal_control(x, refs[j], gains)
            return info.u, None

        return control

    def certificate(self, target, times):
        refs = self._flat_refs(target, times)
        gains = self.gains
        return lambda j, x: ctrl.pvtol_certificate(x, refs[j], gains)[0]


class PvtolAdaptive(_PvtolBase):
    def __init__(self, gains, features, fparams):
        self.gains = gains
        self.features, self.fparams = features, fparams
        self.aux_shape = (2, features.dim)

    def bind(self, target, times):
        refs = self._flat_refs(target, times)
        gains = ctrl.PvtolGainScalars.from_gains(self.gains)
        features, fparams = self.features, self.fparams

        def control(j, x, aux):
            return ctrl.certificate_adaptive(x, refs[j], None, aux, gains,
                                             features, fparams)

        return control

    def certificate(self, target, times):
        refs = self._flat_refs(target, times)
        gains = self.gains
        return lambda j, x: ctrl.pvtol_certificate(x, refs[j], gains)[0]


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class RolloutResult:
    """Uniform-grid trace of a closed-loop simulation."""

    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    adapted: np.ndarray = None
    vbar: np.ndarray = None
    loss: float = None
    diverged: bool = False

    def to_csv(self, path, target=None):
        """One row per grid point: t, state, control, optional target and Vbar."""
        m = self.controls.shape[1]
        header = (["t"] + [f"x{i}" for i in range(6)] + [f"u{i}" for i in range(m)])
        ref = None
        if target is not None:
            ref = target.reference_states(self.times)
            header += [f"xref{i}" for i in range(6)]
        if self.vbar is not None:
            header += ["vbar"]
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            for k in range(len(self.times)):
                row = [self.times[k], *self.states[k], *self.controls[k]]
                if ref is not None:
                    row += list(ref[k])
                if self.vbar is not None:
                    row += [self.vbar[k]]
                writer.writerow(row)


def _half_times(n_steps, dt):
    return np.arange(2 * n_steps + 1) * (0.5 * dt)


def rollout(plant, controller, target, horizon, dt=0.01, x0=None,
            record_adapted=False, record_vbar=False, compute_loss=False,
            mu_ctrl=1e-3):
    """Simulate the closed loop from an on-target start; returns the trace.

    Raises RolloutDiverged (carrying the partial trace) if any state component
    leaves [-1e6, 1e6] or turns non-finite.
    """
    n_steps = int(round(horizon / dt))
    times = _half_times(n_steps, dt)
    control = controller.bind(target, times)
    xdot = plant.bind(times)
    x = np.asarray(target.initial_state() if x0 is None else x0, dtype=float)
    aux = None if controller.aux_shape is None else np.zeros(controller.aux_shape)
    cert = None
    if record_vbar and hasattr(controller, "certificate"):
        cert = controller.certificate(target, times)
    refs = target.reference_states(times) if compute_loss else None

    grid = np.arange(n_steps + 1) * dt
    states = np.empty((n_steps + 1, 6))
    adapted = (np.empty((n_steps + 1,) + controller.aux_shape)
               if record_adapted and aux is not None else None)
    vbar = np.empty(n_steps + 1) if cert is not None else None

    controls = None
    cost = 0.0

    def record(k, x, aux):
        nonlocal controls
        u, _ = control(2 * k, x, aux)
        u = np.atleast_1d(np.asarray(value_of(u), dtype=float))
        if controls is None:
            controls = np.empty((n_steps + 1, len(u)))
        controls[k] = u
        states[k] = x
        if adapted is not None:
            adapted[k] = aux
        if vbar is not None:
            vbar[k] = cert(2 * k, x)

    def make_result(upto, diverged=False, loss=None):
        sl = slice(0, upto + 1)
        return RolloutResult(grid[sl], states[sl],
                             controls[sl] if controls is not None else None,
                             adapted[sl] if adapted is not None else None,
                             vbar[sl] if vbar is not None else None,
                             loss, diverged)

    has_aux = aux is not None

    def field(t, full):
        j = int(round(t / (0.5 * dt)))
        if not has_aux and not compute_loss:
            u, _ = control(j, full, None)
            return xdot(j, full, u)
        xs = full[0]
        auxs = full[1] if has_aux else None
        u, aux_dot = control(j, xs, auxs)
        ks = [xdot(j, xs, u)]
        if has_aux:
            ks.append(aux_dot)
        if compute_loss:
            cdot = ad.reduce_sum(ad.square(xs - refs[j]))
            if mu_ctrl:
                cdot = cdot + mu_ctrl * ad.reduce_sum(ad.square(u))
            ks.append(cdot)
        return tuple(ks)

    state = (x,)
    if has_aux:
        state += (aux,)
    if compute_loss:
        state += (cost,)
    simple = not has_aux and not compute_loss

    for k in range(n_steps):
        record(k, state[0], state[1] if has_aux else None)
        try:
            new = rk4_step(field, state[0] if simple else state, k * dt, dt)
        except (DivergenceError, ctrl.ThrustSingularityError) as err:
            raise RolloutDiverged(k, make_result(k, diverged=True)) from err
        state = (new,) if simple else new
        xs = state[0]
        if not np.all(np.isfinite(xs)) or np.max(np.abs(xs)) > DIVERGENCE_LIMIT:
            raise RolloutDiverged(k + 1, make_result(k, diverged=True))

    record(n_steps, state[0], state[1] if has_aux else None)
    loss = float(state[-1]) * (1.0 / horizon) if compute_loss else None
    return make_result(n_steps, loss=loss)


def tracking_loss(result, target, mu_ctrl=1e-3):
    """Time-averaged squared tracking error plus weighted control effort.

    Left-endpoint quadrature over the recorded grid; the integrated-cost
    variant lives inside `rollout`/`differentiable_rollout_loss`.
    """
    if mu_ctrl < 0:
        raise ValueError("mu_ctrl must be non-negative")
    refs = target.reference_states(result.times)
    err = result.states[:-1] - refs[:-1]
    total = float(np.sum(err ** 2))
    if mu_ctrl:
        total += mu_ctrl * float(np.sum(result.controls[:-1] ** 2))
    return total / (len(result.times) - 1)


# ---------------------------------------------------------------------------
# differentiable meta-task loss


@dataclass
class Task:
    """One meta-learning task: track `target` on the plant proxy `model`."""

    target: object
    model_params: list
    system: str


@dataclass
class RolloutHyper:
    horizon: float = 10.0
    dt: float = 0.01
    mu_ctrl: float = 1e-3


def build_controller(theta, features=None, fparams=None):
    """Adaptive controller adapter from meta-parameters (arrays or tape vars)."""
    decoded = (theta.decoded_gains() if hasattr(theta, "decoded_gains") else theta)
    if features is None:
        features = ctrl.NeuralFeatures(*theta.features)
        fparams = theta.features
    if theta.system == dyn.PFAR:
        return SlotineLiPfar(decoded["lam"], decoded["kmat"], decoded["gamma"],
                             features, fparams)
    return PvtolAdaptive(decoded, features, fparams)


def differentiable_rollout_loss(theta, task, hyper=None):
    """Tracking loss of a taped closed-loop rollout on the task's model plant.

    Returns (loss, tape); the tape's inputs are the meta-parameter pieces in
    `theta`'s flattening order.  A diverged rollout yields a large constant
    loss (no gradient) so descent stays defined on unstable parameters.
    """
    hyper = hyper or RolloutHyper()
    tape = Tape()
    leaves = theta.leaves(tape)
    controller = build_controller(leaves)
    plant = ModelPlant(task.system, task.model_params)

    n_steps = int(round(hyper.horizon / hyper.dt))
    times = _half_times(n_steps, hyper.dt)
    control = controller.bind(task.target, times)
    xdot = plant.bind(times)
    refs = task.target.reference_states(times)
    dt = hyper.dt
    mu_ctrl = hyper.mu_ctrl

    def field(t, full):
        j = int(round(t / (0.5 * dt)))
        xs, auxs, _ = full
        u, aux_dot = control(j, xs, auxs)
        cdot = ad.reduce_sum(ad.square(xs - refs[j]))
        if mu_ctrl:
            cdot = cdot + mu_ctrl * ad.reduce_sum(ad.square(u))
        return (xdot(j, xs, u), aux_dot, cdot)

    x0 = np.asarray(task.target.initial_state(), dtype=float)
    state = (x0, np.zeros(controller.aux_shape), 0.0)
    try:
        for k in range(n_steps):
            state = rk4_step(field, state, k * dt, dt)
            xv = value_of(state[0])
            if not np.all(np.isfinite(xv)) or np.max(np.abs(xv)) > DIVERGENCE_LIMIT:
                tape.output = None
                return DIVERGED_LOSS, tape
    except (DivergenceError, ctrl.ThrustSingularityError):
        tape.output = None
        return DIVERGED_LOSS, tape
    loss = state[2] * (1.0 / hyper.horizon)
    tape.output = loss
    return loss, tape
