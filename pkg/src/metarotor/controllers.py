"""Feedback and adaptation laws for both vehicles.

Includes the log-Cholesky parameterization of positive-definite gains, neural
feature maps whose output layer is adapted online, PD/PID tracking control with
feed-forward for the fully-actuated vehicle, the composite-variable adaptive
controller, and the flatness-based feedback, certificate function, and
certificate-driven adaptive controller for the underactuated vehicle.

All laws are pure functions of (state, target, parameters); they work on plain
arrays or on tape variables so the same code serves plant simulation and
gradient-based training.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import (Tape, Var, atan2, cos, cosh, exp, log, matmul, outer,
                       reciprocal, sin, sqrt, square, stack, tanh, value_of)
from .dynamics import GRAVITY
from . import rng as rng_mod


# ---------------------------------------------------------------------------
# log-Cholesky parameterization of positive-definite matrices


def logchol_dim(n):
    return n * (n + 1) // 2


def matrix_dim(k):
    n = int((np.sqrt(8 * k + 1) - 1) / 2)
    if logchol_dim(n) != k:
        raise ValueError(f"{k} is not a triangular number")
    return n


def logchol_decode(theta, n=None):
    """Positive-definite Q = L L^T from unconstrained parameters.

    L is lower-triangular with exp(theta[:n]) on the diagonal and the
    remaining entries filling the strict lower triangle in row-major order.
    """
    if n is None:
        n = matrix_dim(np.shape(value_of(theta))[0])
    ell = ad.lower_tri_exp(theta, n)
    return matmul(ell, ad.transpose(ell))


def logchol_encode(q_mat):
    """Inverse of logchol_decode; raises on non-symmetric-positive-definite input."""
    q_mat = np.asarray(q_mat, dtype=float)
    if not np.allclose(q_mat, q_mat.T, atol=1e-10):
        raise np.linalg.LinAlgError("matrix is not symmetric")
    ell = np.linalg.cholesky(q_mat)
    n = q_mat.shape[0]
    theta = np.empty(logchol_dim(n))
    theta[:n] = np.log(np.diag(ell))
    if n > 1:
        theta[n:] = ell[np.tril_indices(n, k=-1)]
    return theta


# ---------------------------------------------------------------------------
# feature maps


def mlp_init(key, sizes):
    """Fan-in-scaled uniform initialization; returns [w1, b1, w2, b2, ...]."""
    params = []
    keys = rng_mod.split(key, len(sizes) - 1)
    for k, (n_in, n_out) in zip(keys, zip(sizes[:-1], sizes[1:])):
        gen = rng_mod.generator(k)
        bound = 1.0 / np.sqrt(n_in)
        params.append(gen.uniform(-bound, bound, size=(n_out, n_in)))
        params.append(gen.uniform(-bound, bound, size=n_out))
    return params


def feature_forward(params, x):
    """Feature vector y = tanh(w2 @ tanh(w1 @ x + b1) + b2)."""
    w1, b1, w2, b2 = params
    return tanh(ad.affine(tanh(ad.affine(x, w1, b1)), w2, b2))


class NeuralFeatures:
    """Two hidden tanh layers; the second hidden layer is the feature output."""

    def __init__(self, w1, b1, w2, b2):
        self.w1, self.b1, self.w2, self.b2 = w1, b1, w2, b2

    @classmethod
    def init(cls, key, input_dim=6, width=32):
        return cls(*mlp_init(key, [input_dim, width, width]))

    @property
    def dim(self):
        return self.w2.shape[0]

    @property
    def input_dim(self):
        return self.w1.shape[1]

    def params(self):
        return (self.w1, self.b1, self.w2, self.b2)

    forward = staticmethod(feature_forward)


_ONE = np.ones(1)


class ConstantFeatures:
    """y(x) = 1; turns the adaptive laws into their integral-action equivalents."""

    dim = 1

    @staticmethod
    def params():
        return ()

    @staticmethod
    def forward(params, x):
        return _ONE


def mlp_dynamics_forward(params, x, u):
    """Learned state derivative: two hidden tanh layers, linear output."""
    w1, b1, w2, b2, w3, b3 = params
    axis = 1 if np.ndim(value_of(x)) == 2 else 0
    h = tanh(ad.affine(ad.concat([x, u], axis=axis), w1, b1))
    h = tanh(ad.affine(h, w2, b2))
    return ad.affine(h, w3, b3)


# ---------------------------------------------------------------------------
# gain containers


@dataclass
class PfarGains:
    """Unconstrained encodings of the composite-variable controller gains."""

    lam: np.ndarray
    kmat: np.ndarray
    gamma: np.ndarray

    @classmethod
    def from_matrices(cls, lam, kmat, gamma):
        return cls(logchol_encode(lam), logchol_encode(kmat), logchol_encode(gamma))

    @classmethod
    def nominal(cls):
        return cls.from_matrices(np.eye(3), 10.0 * np.eye(3), np.eye(3))

    def encodings(self):
        return {"lam": self.lam, "kmat": self.kmat, "gamma": self.gamma}


def decode_pfar_gains(enc):
    """(Lambda, K, Gamma) matrices from encodings (arrays or tape variables)."""
    return (logchol_decode(enc["lam"], 3),
            logchol_decode(enc["kmat"], 3),
            logchol_decode(enc["gamma"], 3))


@dataclass
class PvtolGains:
    """Log-encoded positive gain pairs plus the adaptation gain encoding."""

    cx: np.ndarray
    cy: np.ndarray
    kx: np.ndarray
    ky: np.ndarray
    kphi: np.ndarray
    gamma: np.ndarray

    @classmethod
    def from_values(cls, cx, cy, kx, ky, kphi, gamma):
        return cls(np.log(np.asarray(cx, dtype=float)),
                   np.log(np.asarray(cy, dtype=float)),
                   np.log(np.asarray(kx, dtype=float)),
                   np.log(np.asarray(ky, dtype=float)),
                   np.log(np.asarray(kphi, dtype=float)),
                   logchol_encode(gamma))

    @classmethod
    def nominal(cls, gamma_scale=0.1):
        ones = np.ones(2)
        return cls.from_values(ones, ones, ones, ones, ones, gamma_scale * np.eye(2))

    def encodings(self):
        return {"cx": self.cx, "cy": self.cy, "kx": self.kx, "ky": self.ky,
                "kphi": self.kphi, "gamma": self.gamma}


def decode_pvtol_gains(enc):
    """Positive gain pairs and the 2x2 adaptation gain from encodings."""
    out = {name: exp(enc[name]) for name in ("cx", "cy", "kx", "ky", "kphi")}
    out["gamma"] = logchol_decode(enc["gamma"], 2)
    return out


# ---------------------------------------------------------------------------
# fully-actuated vehicle


def _rotate_to_body(phi, v0, v1, v2):
    c, s = cos(phi), sin(phi)
    return stack([c * v0 + s * v1, -s * v0 + c * v1, v2])


def pd_control(state, target, k_p, k_d):
    """Feedback-linearizing PD law with gravity and acceleration feed-forward."""
    q_ref, dq_ref, ddq_ref = target
    q_err = state[0:3] - q_ref
    dq_err = state[3:6] - dq_ref
    vec = (ddq_ref - F_GRAV_CONST) - matmul(k_p, q_err) - matmul(k_d, dq_err)
    return _rotate_to_body(state[2], vec[0], vec[1], vec[2])


F_GRAV_CONST = np.array([0.0, -GRAVITY, 0.0])


def pid_control(state, target, integral_state, k_p, k_i, k_d):
    """PD law plus integral action; returns (u, integral_rate)."""
    q_ref, dq_ref, ddq_ref = target
    q_err = state[0:3] - q_ref
    dq_err = state[3:6] - dq_ref
    vec = ((ddq_ref - F_GRAV_CONST) - matmul(k_p, q_err)
           - matmul(k_i, integral_state) - matmul(k_d, dq_err))
    u = _rotate_to_body(state[2], vec[0], vec[1], vec[2])
    return u, q_err


def pid_gains_from_adaptive(lam, kmat, gamma):
    """(K_P, K_I, K_D) that replicate the adaptive law with constant features."""
    return kmat @ lam + gamma, gamma @ lam, kmat + lam


def slotine_li_adaptive(state, target, ahat, lam, kmat, gamma, features, fparams):
    """Composite-variable adaptive tracking law; returns (u, ahat_dot).

    The composite error s = dq_err + lam @ q_err drives both the feedback term
    and the output-layer adaptation ahat_dot = gamma @ s @ y^T.
    """
    q_ref, dq_ref, ddq_ref = target
    q_err = state[0:3] - q_ref
    dq_err = state[3:6] - dq_ref
    s_var = dq_err + matmul(lam, q_err)
    vdot = ddq_ref - matmul(lam, dq_err)
    y = features.forward(fparams, state)
    tau_bar = (vdot - F_GRAV_CONST) - matmul(kmat, s_var)
    vec = tau_bar - matmul(ahat, y)
    u = _rotate_to_body(state[2], vec[0], vec[1], vec[2])
    ahat_dot = outer(matmul(gamma, s_var), y)
    return u, ahat_dot


def slotine_li_lyapunov(state, target, ahat, a_true, gamma):
    """V = s^T s / 2 + ||ahat - a_true||^2_{gamma^-1} / 2 along a rollout (plain)."""
    q_ref, dq_ref, _ = target
    q_err = np.asarray(state[0:3]) - q_ref
    dq_err = np.asarray(state[3:6]) - dq_ref
    lam = np.eye(3)
    s_var = dq_err + lam @ q_err
    err = ahat - a_true
    return 0.5 * float(s_var @ s_var) + 0.5 * weighted_trace_norm_sq(err, gamma)


def weighted_trace_norm_sq(mat, gamma):
    """tr(M^T gamma^-1 M), the squared weighted trace norm of M."""
    return float(np.trace(mat.T @ np.linalg.solve(gamma, mat)))


# ---------------------------------------------------------------------------
# underactuated vehicle


@dataclass
class FlatTarget:
    """Flat-output derivatives of the target at one time instant."""

    x: float
    y: float
    dx: float
    dy: float
    ddx: float
    ddy: float
    d3x: float
    d3y: float
    d4x: float
    d4y: float

    @classmethod
    def from_rows(cls, d, k):
        return cls(d[0][k, 0], d[0][k, 1], d[1][k, 0], d[1][k, 1],
                   d[2][k, 0], d[2][k, 1], d[3][k, 0], d[3][k, 1],
                   d[4][k, 0], d[4][k, 1])


@dataclass
class PvtolControlInfo:
    """Nominal feedback terms, kept for reuse by the certificate."""

    u1: object
    u2: object
    v_phi: object
    dv_phi: object
    ddv_phi: object
    x_err: object
    dx_err: object
    y_err: object
    dy_err: object
    wx1: object
    wx2: object
    wy1: object
    wy2: object

    @property
    def u(self):
        return stack([self.u1, self.u2])


class ThrustSingularityError(ArithmeticError):
    """Commanded thrust too close to free fall for the roll reference."""


U1_CONTROL_MIN = 1e-3 * GRAVITY


def _sech2(w):
    return square(reciprocal(cosh(w)))


@dataclass
class PvtolGainScalars:
    """Gain entries pre-extracted as scalars (hoisted out of the control loop).

    Re-indexing the gain vectors at every integration stage dominates the tape
    for differentiable rollouts; extracting once per rollout removes that.
    """

    cx0: object
    cx1: object
    cy0: object
    cy1: object
    kx0: object
    kx1: object
    ky0: object
    ky1: object
    kp0: object
    kp1: object
    q11: object
    q12: object
    q22: object
    gamma: object

    @classmethod
    def from_gains(cls, gains):
        cx, cy, kx, ky, kphi = (gains[n] for n in ("cx", "cy", "kx", "ky", "kphi"))
        kp0, kp1 = kphi[0], kphi[1]
        return cls(cx[0], cx[1], cy[0], cy[1], kx[0], kx[1], ky[0], ky[1],
                   kp0, kp1, kp0 * (kp0 + 1.0) + square(kp1), kp1, kp0 + 1.0,
                   gains["gamma"])


def _as_scalars(gains):
    if type(gains) is PvtolGainScalars:
        return gains
    return PvtolGainScalars.from_gains(gains)


def pvtol_nominal_control(state, target, gains):
    """Flatness-based tracking feedback for the underactuated vehicle.

    Saturated virtual accelerations define a thrust and a roll reference;
    an outer PD loop regulates roll towards it.  The roll reference rates
    are propagated analytically using the nominal (disturbance-free) model
    accelerations, since the true disturbance is unknown to the controller.
    """
    phi, dphi = state[2], state[5]
    g = _as_scalars(gains)
    x_err = state[0] - target.x
    dx_err = state[3] - target.dx
    y_err = state[1] - target.y
    dy_err = state[4] - target.dy

    wx1 = g.kx0 * x_err + g.kx1 * dx_err
    wx2 = g.kx1 * dx_err
    wy1 = g.ky0 * y_err + g.ky1 * dy_err
    wy2 = g.ky1 * dy_err
    v_x = target.ddx - g.cx0 * tanh(wx1) - g.cx1 * tanh(wx2)
    v_y = target.ddy - g.cy0 * tanh(wy1) - g.cy1 * tanh(wy2)
    den = v_y + GRAVITY
    u1 = sqrt(square(v_x) + square(den))
    if float(value_of(u1)) < U1_CONTROL_MIN:
        raise ThrustSingularityError(f"u1={float(value_of(u1)):.3g} below threshold")
    v_phi = atan2(-v_x, den)

    c, s = cos(phi), sin(phi)
    ddx_nom = -u1 * s
    ddy_nom = u1 * c - GRAVITY

    dwx1 = g.kx0 * dx_err + g.kx1 * (ddx_nom - target.ddx)
    dwx2 = g.kx1 * (ddx_nom - target.ddx)
    dwy1 = g.ky0 * dy_err + g.ky1 * (ddy_nom - target.ddy)
    dwy2 = g.ky1 * (ddy_nom - target.ddy)
    sx1, sx2 = _sech2(wx1), _sech2(wx2)
    sy1, sy2 = _sech2(wy1), _sech2(wy2)
    dv_x = target.d3x - g.cx0 * sx1 * dwx1 - g.cx1 * sx2 * dwx2
    dv_y = target.d3y - g.cy0 * sy1 * dwy1 - g.cy1 * sy2 * dwy2

    u1_sq = square(u1)
    du1 = (v_x * dv_x + den * dv_y) / u1
    dv_phi = (v_x * dv_y - dv_x * den) / u1_sq

    d3x_nom = -du1 * s - u1 * dphi * c
    d3y_nom = du1 * c - u1 * dphi * s

    ddwx1 = g.kx0 * (ddx_nom - target.ddx) + g.kx1 * (d3x_nom - target.d3x)
    ddwx2 = g.kx1 * (d3x_nom - target.d3x)
    ddwy1 = g.ky0 * (ddy_nom - target.ddy) + g.ky1 * (d3y_nom - target.d3y)
    ddwy2 = g.ky1 * (d3y_nom - target.d3y)
    ddv_x = (target.d4x
             - g.cx0 * (-2.0 * tanh(wx1) * sx1 * square(dwx1) + sx1 * ddwx1)
             - g.cx1 * (-2.0 * tanh(wx2) * sx2 * square(dwx2) + sx2 * ddwx2))
    ddv_y = (target.d4y
             - g.cy0 * (-2.0 * tanh(wy1) * sy1 * square(dwy1) + sy1 * ddwy1)
             - g.cy1 * (-2.0 * tanh(wy2) * sy2 * square(dwy2) + sy2 * ddwy2))

    ddv_phi = (v_x * ddv_y - ddv_x * den
               - 2.0 * dv_phi * (v_x * dv_x + den * dv_y)) / u1_sq
    u2 = ddv_phi - g.kp0 * (phi - v_phi) - g.kp1 * (dphi - dv_phi)

    return PvtolControlInfo(u1, u2, v_phi, dv_phi, ddv_phi,
                            x_err, dx_err, y_err, dy_err, wx1, wx2, wy1, wy2)


def certificate_phi_matrix(kphi):
    """Quadratic-form matrix of the roll-error certificate component (plain)."""
    k1, k2 = float(kphi[0]), float(kphi[1])
    return np.array([[k1 * (k1 + 1.0) + k2 * k2, k2], [k2, k1 + 1.0]])


def _certificate_from_info(state, info, gains):
    g = _as_scalars(gains)
    v_x_part = (g.cx0 * log(cosh(info.wx1)) + g.cx1 * log(cosh(info.wx2))
                + 0.5 * g.kx0 * square(info.dx_err))
    v_y_part = (g.cy0 * log(cosh(info.wy1)) + g.cy1 * log(cosh(info.wy2))
                + 0.5 * g.ky0 * square(info.dy_err))
    phi_err = state[2] - info.v_phi
    dphi_err = state[5] - info.dv_phi
    v_phi_part = 0.5 * (g.q11 * square(phi_err)
                        + 2.0 * g.q12 * phi_err * dphi_err
                        + g.q22 * square(dphi_err))
    return v_x_part + v_y_part + v_phi_part


def pvtol_certificate(state, target, gains):
    """Certificate value and its gradient with respect to the full state.

    The certificate sums saturated-error terms for the translational
    subsystems and a quadratic form on the roll error relative to the roll
    reference; the gradient (computed by reverse-mode differentiation) flows
    through the roll reference's state dependence.
    """
    if type(state) is Var:
        info = pvtol_nominal_control(state, target, gains)
        vbar = _certificate_from_info(state, info, gains)
        (grad_x,) = ad.grad(vbar, [state])
        return vbar, grad_x
    tape = Tape()
    sv = tape.input(np.asarray(state, dtype=float))
    info = pvtol_nominal_control(sv, target, gains)
    vbar = _certificate_from_info(sv, info, gains)
    (grad_x,) = ad.grad(vbar, [sv])
    return float(value_of(vbar)), np.asarray(value_of(grad_x))


GAIN_ORDER = {"pfar": ("lam", "kmat", "gamma"),
              "pvtol": ("cx", "cy", "kx", "ky", "kphi", "gamma")}


@dataclass
class MetaParams:
    """Everything trained offline: feature weights plus all gain encodings."""

    system: str
    features: list
    gains: dict

    @classmethod
    def init(cls, system, key, width=32):
        """Random features; gains initialized to the data-collection values."""
        feats = mlp_init(key, [6, width, width])
        if system == "pfar":
            gains = PfarGains.nominal().encodings()
        else:
            gains = PvtolGains.nominal().encodings()
        return cls(system, feats, gains)

    def _pieces(self):
        return list(self.features) + [self.gains[n] for n in GAIN_ORDER[self.system]]

    def _piece_names(self):
        return ["w1", "b1", "w2", "b2"] + list(GAIN_ORDER[self.system])

    def layout(self):
        """Name -> index range of each piece in the flattened vector."""
        out = {}
        offset = 0
        for name, piece in zip(self._piece_names(), self._pieces()):
            size = int(np.size(piece))
            out[name] = (offset, offset + size)
            offset += size
        return out

    def to_vector(self):
        return np.concatenate([np.ravel(p) for p in self._pieces()])

    def from_vector(self, vec):
        """New MetaParams with this one's shapes and the vector's values."""
        pieces = []
        offset = 0
        for piece in self._pieces():
            size = int(np.size(piece))
            pieces.append(np.reshape(vec[offset:offset + size], np.shape(piece)))
            offset += size
        feats = pieces[:4]
        gains = dict(zip(GAIN_ORDER[self.system], pieces[4:]))
        return MetaParams(self.system, feats, gains)

    def leaves(self, tape):
        """Register every piece as a tape input; returns a Var-backed copy."""
        feats = [tape.input(p.copy()) for p in self.features]
        gains = {n: tape.input(self.gains[n].copy()) for n in GAIN_ORDER[self.system]}
        return MetaParams(self.system, feats, gains)

    def decoded_gains(self):
        if self.system == "pfar":
            lam, kmat, gamma = decode_pfar_gains(self.gains)
            return {"lam": lam, "kmat": kmat, "gamma": gamma}
        return decode_pvtol_gains(self.gains)

    def neural_features(self):
        return NeuralFeatures(*self.features)

    def to_dict(self, metadata=None):
        return {
            "system": self.system,
            "feature_weights": [p.tolist() for p in self.features],
            "gain_encodings": {n: self.gains[n].tolist() for n in GAIN_ORDER[self.system]},
            "metadata": metadata or {},
        }

    @classmethod
    def from_dict(cls, data):
        feats = [np.asarray(p, dtype=float) for p in data["feature_weights"]]
        gains = {n: np.asarray(v, dtype=float)
                 for n, v in data["gain_encodings"].items()}
        return cls(data["system"], feats, gains)


def certificate_adaptive(state, target, u_star, ahat, gains, features, fparams):
    """Certificate-driven adaptive controller; returns (u, ahat_dot).

    u subtracts the adapted matched-force estimate from the nominal feedback;
    the output layer adapts along gamma @ B(phi)^T grad_x(Vbar) y^T.
    """
    del u_star  # the nominal law already consumes the target derivatives
    taped = type(state) is Var
    if taped:
        sv = state
    else:
        # an active tape may still arrive through the parameters (first stage
        # of a taped rollout starts from a plain initial state)
        gamma = (gains.gamma if type(gains) is PvtolGainScalars
                 else gains["gamma"])
        tape = None
        for cand in (gamma, *fparams):
            if type(cand) is Var:
                tape = cand.tape
                break
        taped = tape is not None
        if tape is None:
            tape = Tape()
        sv = tape.leaf(np.asarray(state, dtype=float))
    scalars = _as_scalars(gains)
    info = pvtol_nominal_control(sv, target, scalars)
    vbar = _certificate_from_info(sv, info, scalars)
    (grad_x,) = ad.grad(vbar, [sv])
    y = features.forward(fparams, sv)
    correction = matmul(ahat, y)
    u = stack([info.u1 - correction[0], info.u2 - correction[1]])
    c, s = cos(sv[2]), sin(sv[2])
    bt_grad = stack([-s * grad_x[3] + c * grad_x[4], grad_x[5]])
    ahat_dot = outer(matmul(scalars.gamma, bt_grad), y)
    if taped:
        return u, ahat_dot
    return np.asarray(value_of(u)), np.asarray(value_of(ahat_dot))
