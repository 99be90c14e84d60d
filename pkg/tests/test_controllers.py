"""Feedback laws, adaptation laws, gain parameterizations, certificates."""

import numpy as np
import pytest

from metarotor import autodiff as ad
from metarotor import controllers as ctrl
from metarotor import dynamics as dyn
from metarotor import rng
from metarotor import simulate as sim
from metarotor import trajgen as tg
from metarotor.autodiff import Tape, value_of

GRAV = 9.81


class TestLogCholesky:
    def test_zero_gives_identity(self):
        assert np.allclose(ctrl.logchol_decode(np.zeros(6), 3), np.eye(3))

    def test_scalar_case(self):
        q = ctrl.logchol_decode(np.array([np.log(3.0)]), 1)
        assert np.isclose(q[0, 0], 9.0)

    def test_encode_identity_is_zero(self):
        assert np.allclose(ctrl.logchol_encode(np.eye(3)), 0.0)

    def test_encode_scaled_identity(self):
        theta = ctrl.logchol_encode(10.0 * np.eye(3))
        assert np.allclose(theta[:3], np.log(np.sqrt(10.0)))
        assert np.allclose(theta[3:], 0.0)

    def test_roundtrip_random(self):
        gen = rng.generator(rng.root_key(0))
        for _ in range(50):
            m = gen.normal(size=(3, 3))
            q = m @ m.T + 0.5 * np.eye(3)
            theta = ctrl.logchol_encode(q)
            assert np.max(np.abs(ctrl.logchol_decode(theta, 3) - q)) < 1e-10
            theta2 = ctrl.logchol_encode(ctrl.logchol_decode(theta, 3))
            assert np.max(np.abs(theta2 - theta)) < 1e-10

    def test_decode_always_positive_definite_and_symmetric(self):
        gen = rng.generator(rng.root_key(1))
        for _ in range(1000):
            theta = gen.uniform(-5, 5, size=6)
            q = ctrl.logchol_decode(theta, 3)
            assert np.max(np.abs(q - q.T)) < 1e-14 * max(1, np.max(np.abs(q)))
            assert np.min(np.linalg.eigvalsh(q)) > 0

    def test_encode_rejects_non_pd(self):
        with pytest.raises(np.linalg.LinAlgError):
            ctrl.logchol_encode(np.diag([1.0, -1.0]))
        with pytest.raises(np.linalg.LinAlgError):
            ctrl.logchol_encode(np.array([[1.0, 2.0], [0.0, 1.0]]))


class TestFeatureNet:
    def test_zero_weights_gives_tanh_bias(self):
        b2 = np.linspace(-1, 1, 32)
        params = (np.zeros((32, 6)), np.zeros(32), np.zeros((32, 32)), b2)
        y = ctrl.feature_forward(params, np.ones(6))
        assert np.allclose(y, np.tanh(b2))

    def test_output_bounded(self):
        feat = ctrl.NeuralFeatures.init(rng.root_key(2))
        gen = rng.generator(rng.root_key(3))
        for _ in range(20):
            y = ctrl.feature_forward(feat.params(), gen.normal(size=6) * 10)
            assert np.max(np.abs(y)) <= 1.0

    def test_input_gradient_matches_fd(self):
        feat = ctrl.NeuralFeatures.init(rng.root_key(4))
        w = rng.generator(rng.root_key(5)).normal(size=32)

        def program(x):
            return ad.dot(w, ctrl.feature_forward(feat.params(), x))

        assert ad.grad_check(program, np.array([0.1, -0.4, 0.2, 1.0, -0.3, 0.5])) < 1e-6

    def test_feature_dim_fixed(self):
        feat = ctrl.NeuralFeatures.init(rng.root_key(6))
        assert feat.dim == 32


class TestPdPid:
    def test_on_target_hover_feedforward(self):
        target = (np.zeros(3), np.zeros(3), np.zeros(3))
        u = ctrl.pd_control(np.zeros(6), target, 10 * np.eye(3), 0.1 * np.eye(3))
        assert np.allclose(u, [0.0, GRAV, 0.0])

    def test_closed_loop_error_dynamics(self):
        # substituting the law into the dynamics must leave exactly
        # qddot_err = -Kp q_err - Kd dq_err
        gen = rng.generator(rng.root_key(7))
        k_p, k_d = 10 * np.eye(3), 0.1 * np.eye(3)
        for _ in range(10):
            x = gen.normal(size=6)
            q_ref, dq_ref, ddq_ref = gen.normal(size=(3, 3))
            u = ctrl.pd_control(x, (q_ref, dq_ref, ddq_ref), k_p, k_d)
            sd = dyn.pfar_dynamics(x, u, np.zeros(3))
            want = ddq_ref - k_p @ (x[:3] - q_ref) - k_d @ (x[3:] - dq_ref)
            assert np.max(np.abs(sd[3:] - want)) < 1e-10

    def test_pid_reduces_to_pd_when_ki_zero(self):
        gen = rng.generator(rng.root_key(8))
        x = gen.normal(size=6)
        target = tuple(gen.normal(size=(3, 3)))
        u_pd = ctrl.pd_control(x, target, 10 * np.eye(3), 0.1 * np.eye(3))
        u_pid, rate = ctrl.pid_control(x, target, gen.normal(size=3),
                                       10 * np.eye(3), np.zeros((3, 3)),
                                       0.1 * np.eye(3))
        assert np.allclose(u_pid, u_pd)
        assert np.allclose(rate, x[:3] - target[0])

    def test_pid_rejects_constant_disturbance(self):
        # step target under a constant force: integral action drives the
        # position error to zero (poles placed at -1, -2, -3 per axis)
        d = np.array([0.5, -0.8, 0.2])
        plant = sim.SyntheticPlant(dyn.PFAR, lambda x: d)
        goal = np.array([1.0, -1.0, 0.3])
        hold = tg.TargetTrajectory(dyn.PFAR, tg.fit_spline(
            np.vstack([goal, goal]), 20.0, [tg.SNAP, tg.SNAP, tg.ACCEL]))
        controller = sim.PidPfar(11 * np.eye(3), 6 * np.eye(3), 6 * np.eye(3))
        res = sim.rollout(plant, controller, hold, 20.0, x0=np.zeros(6))
        assert np.linalg.norm(res.states[-1][:3] - goal) < 1e-3


class TestSlotineLi:
    def test_on_target_reduces_to_feedforward(self):
        # at zero error with zero adapted parameters and zero features the law
        # collapses to u = R^T (qddot_ref - f_g)
        gen = rng.generator(rng.root_key(9))
        feat = ctrl.NeuralFeatures.init(rng.root_key(10))
        for _ in range(10):
            q_ref = gen.normal(size=3)
            dq_ref = gen.normal(size=3)
            ddq_ref = gen.normal(size=3)
            x = np.concatenate([q_ref, dq_ref])
            u, _ = ctrl.slotine_li_adaptive(
                x, (q_ref, dq_ref, ddq_ref), np.zeros((3, 32)),
                np.eye(3), 5 * np.eye(3), np.eye(3), feat, feat.params())
            c, s = np.cos(x[2]), np.sin(x[2])
            vec = ddq_ref - np.array([0, -GRAV, 0])
            want = np.array([c * vec[0] + s * vec[1],
                             -s * vec[0] + c * vec[1], vec[2]])
            assert np.max(np.abs(u - want)) < 1e-12

    def test_adaptation_rate_outer_product(self):
        gen = rng.generator(rng.root_key(11))
        feat = ctrl.NeuralFeatures.init(rng.root_key(12))
        x = gen.normal(size=6)
        target = tuple(gen.normal(size=(3, 3)))
        lam, kmat, gamma = np.eye(3), np.eye(3), 2.0 * np.eye(3)
        _, ahat_dot = ctrl.slotine_li_adaptive(x, target, np.zeros((3, 32)),
                                               lam, kmat, gamma, feat,
                                               feat.params())
        s_var = (x[3:] - target[1]) + lam @ (x[:3] - target[0])
        y = ctrl.feature_forward(feat.params(), x)
        assert np.allclose(ahat_dot, np.outer(gamma @ s_var, y))

    def test_frozen_adaptation_is_fixed_gain_law(self):
        # gamma -> 0 freezes ahat, leaving a fixed-gain PD + feed-forward law
        gen = rng.generator(rng.root_key(13))
        feat = ctrl.ConstantFeatures()
        x = gen.normal(size=6)
        target = tuple(gen.normal(size=(3, 3)))
        u1, rate = ctrl.slotine_li_adaptive(x, target, np.zeros((3, 1)),
                                            np.eye(3), 4 * np.eye(3),
                                            np.zeros((3, 3)), feat, ())
        assert np.allclose(rate, 0.0)
        k_p, _, k_d = ctrl.pid_gains_from_adaptive(np.eye(3), 4 * np.eye(3),
                                                   np.zeros((3, 3)))
        u2 = ctrl.pd_control(x, target, k_p, k_d)
        assert np.max(np.abs(u1 - u2)) < 1e-12

    def test_lyapunov_nonincreasing_under_matched_uncertainty(self):
        feat = ctrl.NeuralFeatures.init(rng.root_key(14))
        gen = rng.generator(rng.root_key(15))
        a_true = gen.normal(size=(3, 32))
        a_true *= 0.5 / np.linalg.norm(a_true, 2)
        plant = sim.SyntheticPlant(dyn.PFAR, lambda x: a_true @ ctrl.feature_forward(
            feat.params(), x))
        gamma = np.eye(3)
        controller = sim.SlotineLiPfar(np.eye(3), np.eye(3), gamma, feat,
                                       feat.params())
        target = tg.random_target(dyn.PFAR, rng.root_key(16), duration=5.0,
                                  num_waypoints=3)
        res = sim.rollout(plant, controller, target, 5.0, record_adapted=True)
        refs = [target.pfar_reference(t) for t in res.times]
        vals = np.array([
            ctrl.slotine_li_lyapunov(res.states[k], refs[k], res.adapted[k],
                                     a_true, gamma)
            for k in range(len(res.times))])
        assert np.all(np.diff(vals) < 1e-6)


class TestPidEquivalence:
    def test_stepwise_match_over_shared_rollout(self):
        # constant features, zero initial error, mapped gains: the adaptive law
        # and the PID law command identical inputs along one shared rollout
        lam = np.diag([1.0, 1.5, 0.8])
        kmat = np.diag([4.0, 3.0, 5.0])
        gamma = np.diag([2.0, 1.0, 0.5])
        k_p, k_i, k_d = ctrl.pid_gains_from_adaptive(lam, kmat, gamma)
        feat = ctrl.ConstantFeatures()
        target = tg.random_target(dyn.PFAR, rng.root_key(17), duration=2.0,
                                  num_waypoints=3)
        plant = sim.TruePlant(dyn.PFAR, dyn.DragCoeffs(), wind=3.0)
        times = np.arange(2 * 200 + 1) * 0.005
        refs = [target.pfar_reference(t) for t in times]
        xdot = plant.bind(times)

        def field(t, full):
            j = int(round(t / 0.005))
            x, ahat, integ = full
            u_sl, ahat_dot = ctrl.slotine_li_adaptive(
                x, refs[j], ahat, lam, kmat, gamma, feat, ())
            return (xdot(j, x, u_sl), ahat_dot, x[:3] - refs[j][0])

        state = (target.initial_state(), np.zeros((3, 1)), np.zeros(3))
        worst = 0.0
        for k in range(200):
            x, ahat, integ = state
            u_sl, _ = ctrl.slotine_li_adaptive(x, refs[2 * k], ahat, lam, kmat,
                                               gamma, feat, ())
            u_pid, _ = ctrl.pid_control(x, refs[2 * k], integ, k_p, k_i, k_d)
            worst = max(worst, float(np.max(np.abs(u_sl - u_pid))))
            state = sim.rk4_step(field, state, k * 0.01, 0.01)
        assert worst < 1e-8


def _pvtol_gains():
    return ctrl.decode_pvtol_gains(ctrl.PvtolGains.nominal().encodings())


def _flat_target_at(target, t):
    d = target.flat_derivatives(np.array([t]))
    return ctrl.FlatTarget.from_rows(d, 0)


class TestPvtolNominal:
    def test_on_target_hover(self):
        info = ctrl.pvtol_nominal_control(np.zeros(6),
                                          ctrl.FlatTarget(*[0.0] * 10),
                                          _pvtol_gains())
        assert np.isclose(value_of(info.u1), GRAV)
        assert np.isclose(value_of(info.u2), 0.0)

    def test_roll_reference_rate_matches_numeric_derivative(self):
        # along a disturbance-free closed-loop rollout the chain-rule rate of
        # the roll reference matches its numerical derivative
        gains = _pvtol_gains()
        target = tg.random_target(dyn.PVTOL, rng.root_key(18), duration=4.0,
                                  num_waypoints=3)
        controller = sim.PvtolNominal(gains)
        res = sim.rollout(sim.NominalPlant(dyn.PVTOL), controller, target, 4.0,
                          x0=target.initial_state() + 0.05)
        vphi, dvphi = [], []
        for k, t in enumerate(res.times):
            info = ctrl.pvtol_nominal_control(res.states[k],
                                              _flat_target_at(target, t), gains)
            vphi.append(value_of(info.v_phi))
            dvphi.append(value_of(info.dv_phi))
        vphi, dvphi = np.array(vphi), np.array(dvphi)
        fd = (vphi[2:] - vphi[:-2]) / 0.02
        assert np.max(np.abs(fd - dvphi[1:-1])) < 1e-3

    def test_singularity_error(self):
        gains = _pvtol_gains()
        # command demands that exactly cancel gravity: free-fall reference
        bad = ctrl.FlatTarget(0, 0, 0, 0, 0.0, -GRAV, 0, 0, 0, 0)
        with pytest.raises(ctrl.ThrustSingularityError):
            ctrl.pvtol_nominal_control(np.zeros(6), bad, gains)


class TestPvtolCertificate:
    def test_zero_error_zero_value_and_gradient(self):
        vbar, grad = ctrl.pvtol_certificate(np.zeros(6),
                                            ctrl.FlatTarget(*[0.0] * 10),
                                            _pvtol_gains())
        assert vbar == 0.0
        assert np.allclose(grad, 0.0)

    def test_nonnegative_everywhere(self):
        gains = _pvtol_gains()
        gen = rng.generator(rng.root_key(19))
        tgt = ctrl.FlatTarget(*[0.0] * 10)
        for _ in range(50):
            vbar, _ = ctrl.pvtol_certificate(gen.normal(size=6) * 2, tgt, gains)
            assert vbar >= 0.0

    def test_roll_quadratic_form_eigenvalues(self):
        q = ctrl.certificate_phi_matrix(np.array([1.0, 1.0]))
        assert np.allclose(q, [[3.0, 1.0], [1.0, 2.0]])
        eig = np.sort(np.linalg.eigvalsh(q))
        want = np.sort([(5 - np.sqrt(5)) / 2, (5 + np.sqrt(5)) / 2])
        assert np.allclose(eig, want)
        assert np.all(eig > 0)

    def test_gradient_matches_finite_difference(self):
        gains = _pvtol_gains()
        target = tg.random_target(dyn.PVTOL, rng.root_key(20), duration=4.0,
                                  num_waypoints=3)
        ft = _flat_target_at(target, 1.7)
        gen = rng.generator(rng.root_key(21))
        x = target.initial_state() + 0.1 * gen.normal(size=6)
        _, grad = ctrl.pvtol_certificate(x, ft, gains)
        eps = 1e-6
        for i in range(6):
            dx = np.zeros(6)
            dx[i] = eps
            hi, _ = ctrl.pvtol_certificate(x + dx, ft, gains)
            lo, _ = ctrl.pvtol_certificate(x - dx, ft, gains)
            fd = (hi - lo) / (2 * eps)
            assert abs(fd - grad[i]) < 1e-5 * max(1.0, abs(fd))


class TestCertificateAdaptive:
    def test_reduces_to_nominal_when_frozen(self):
        gains = dict(_pvtol_gains())
        gains["gamma"] = np.zeros((2, 2))
        feat = ctrl.NeuralFeatures.init(rng.root_key(22))
        gen = rng.generator(rng.root_key(23))
        x = gen.normal(size=6) * 0.3
        ft = ctrl.FlatTarget(*gen.normal(size=10) * 0.2)
        u, ahat_dot = ctrl.certificate_adaptive(x, ft, None, np.zeros((2, 32)),
                                                gains, feat, feat.params())
        info = ctrl.pvtol_nominal_control(x, ft, gains)
        assert np.allclose(u, [value_of(info.u1), value_of(info.u2)])
        assert np.allclose(ahat_dot, 0.0)

    def test_weighted_trace_norm_identity_gamma_is_frobenius(self):
        gen = rng.generator(rng.root_key(24))
        m = gen.normal(size=(2, 32))
        assert np.isclose(ctrl.weighted_trace_norm_sq(m, np.eye(2)),
                          np.sum(m ** 2))

    def test_adaptation_rate_structure(self):
        gains = _pvtol_gains()
        feat = ctrl.NeuralFeatures.init(rng.root_key(25))
        gen = rng.generator(rng.root_key(26))
        x = gen.normal(size=6) * 0.3
        ft = ctrl.FlatTarget(*gen.normal(size=10) * 0.2)
        _, ahat_dot = ctrl.certificate_adaptive(x, ft, None, np.zeros((2, 32)),
                                                gains, feat, feat.params())
        _, grad = ctrl.pvtol_certificate(x, ft, gains)
        b = dyn.pvtol_input_matrix(x[2])
        y = ctrl.feature_forward(feat.params(), x)
        want = np.outer(gains["gamma"] @ (b.T @ grad[3:]), y)
        assert np.max(np.abs(ahat_dot - want)) < 1e-12


def _certificate_rhs(state, target, gains, t):
    """Motion of the certificate along nominal control and target flows."""
    names = ["x", "y", "dx", "dy", "ddx", "ddy", "d3x", "d3y"]
    d = target.flat_derivatives(np.array([t]))
    vals = dict(x=d[0][0, 0], y=d[0][0, 1], dx=d[1][0, 0], dy=d[1][0, 1],
                ddx=d[2][0, 0], ddy=d[2][0, 1], d3x=d[3][0, 0], d3y=d[3][0, 1])
    rates = dict(x=d[1][0, 0], y=d[1][0, 1], dx=d[2][0, 0], dy=d[2][0, 1],
                 ddx=d[3][0, 0], ddy=d[3][0, 1], d3x=d[4][0, 0], d3y=d[4][0, 1])
    tape = Tape()
    sv = tape.input(np.asarray(state, dtype=float))
    leaves = {n: tape.input(float(vals[n])) for n in names}
    ft = ctrl.FlatTarget(leaves["x"], leaves["y"], leaves["dx"], leaves["dy"],
                         leaves["ddx"], leaves["ddy"], leaves["d3x"],
                         leaves["d3y"], d[4][0, 0], d[4][0, 1])
    info = ctrl.pvtol_nominal_control(sv, ft, gains)
    vbar = ctrl._certificate_from_info(sv, info, gains)
    grads = ad.backward(tape, output=vbar)
    ubar = np.array([value_of(info.u1), value_of(info.u2)])
    term_state = grads[0] @ dyn.nominal_xdot(dyn.PVTOL, state, ubar)
    term_target = sum(float(grads[1 + i]) * rates[n] for i, n in enumerate(names))
    return term_state + term_target, ubar


class TestProposition1:
    def _run(self, controller_mode, seed=27, dt=0.01, horizon=3.0):
        gains = _pvtol_gains()
        feat = ctrl.NeuralFeatures.init(rng.root_key(seed))
        gen = rng.generator(rng.root_key(seed + 1))
        a_true = gen.normal(size=(2, 32))
        a_true /= np.linalg.norm(a_true, 2)
        target = tg.random_target(dyn.PVTOL, rng.root_key(seed + 2),
                                  duration=3.0, num_waypoints=3)

        def f_ext(x):
            y = ctrl.feature_forward(feat.params(), x)
            return dyn.pvtol_input_matrix(float(x[2])) @ (a_true @ y)

        plant = sim.SyntheticPlant(dyn.PVTOL, f_ext)
        n_steps = int(round(horizon / dt))
        times = np.arange(2 * n_steps + 1) * (0.5 * dt)
        d = target.flat_derivatives(times)
        refs = [ctrl.FlatTarget.from_rows(d, k) for k in range(len(times))]
        xdot = plant.bind(times)
        gen2 = rng.generator(rng.root_key(seed + 3))
        freq = gen2.uniform(0.5, 2.0, size=2)
        amp = gen2.uniform(-2.0, 2.0, size=2)

        def ubar_open(t):
            return np.array([GRAV + amp[0] * np.sin(freq[0] * t),
                             amp[1] * np.sin(freq[1] * t)])

        def field(t, full):
            j = int(round(t / (0.5 * dt)))
            x, ahat = full
            if controller_mode == "closed":
                u, ahat_dot = ctrl.certificate_adaptive(
                    x, refs[j], None, ahat, gains, feat, feat.params())
            else:
                # arbitrary open-loop nominal signal, adaptation still active
                _, grad = ctrl.pvtol_certificate(x, refs[j], gains)
                b = dyn.pvtol_input_matrix(x[2])
                y = ctrl.feature_forward(feat.params(), x)
                ahat_dot = np.outer(gains["gamma"] @ (b.T @ grad[3:]), y)
                u = ubar_open(t) - ahat @ y
            return (xdot(j, x, u), ahat_dot)

        state = (target.initial_state(), np.zeros((2, 32)))
        xs = [state[0]]
        ahats = [state[1]]
        for k in range(n_steps):
            state = sim.rk4_step(field, state, k * dt, dt)
            xs.append(state[0])
            ahats.append(state[1])
        xs, ahats = np.array(xs), np.array(ahats)

        vvals = np.empty(n_steps + 1)
        for k in range(n_steps + 1):
            vbar, _ = ctrl.pvtol_certificate(xs[k], refs[2 * k], gains)
            vvals[k] = vbar + 0.5 * ctrl.weighted_trace_norm_sq(
                ahats[k] - a_true, gains["gamma"])

        worst = 0.0
        for k in range(2, n_steps - 1, 3):
            dv = (-vvals[k + 2] + 8 * vvals[k + 1] - 8 * vvals[k - 1]
                  + vvals[k - 2]) / (12 * dt)
            rhs, ubar = _certificate_rhs(xs[k], target, gains, k * dt)
            if controller_mode == "open":
                _, grad = ctrl.pvtol_certificate(xs[k], refs[2 * k], gains)
                rhs += grad @ dyn.nominal_xdot(dyn.PVTOL, xs[k], ubar_open(k * dt))
                rhs -= grad @ dyn.nominal_xdot(dyn.PVTOL, xs[k], ubar)
            worst = max(worst, abs(dv - rhs))
        return worst

    def test_identity_closed_loop(self):
        assert self._run("closed") < 1e-5

    def test_identity_arbitrary_open_loop_input(self):
        # wilder trajectory: larger smoothness constants, so a finer step is
        # needed for the 4th-order differencing to resolve the identity
        assert self._run("open", dt=0.0025, horizon=1.5) < 1e-5


class TestGainSmoothness:
    def test_control_gradient_wrt_encodings_matches_fd(self):
        # controller outputs are smooth in the unconstrained gain encodings
        gen = rng.generator(rng.root_key(30))
        x = gen.normal(size=6) * 0.5
        target = tuple(gen.normal(size=(3, 3)) * 0.5)
        feat = ctrl.NeuralFeatures.init(rng.root_key(31))
        ahat = 0.1 * gen.normal(size=(3, 32))
        w = gen.normal(size=3)

        def program(theta):
            lam = ctrl.logchol_decode(theta[0:6], 3)
            kmat = ctrl.logchol_decode(theta[6:12], 3)
            gamma = ctrl.logchol_decode(theta[12:18], 3)
            u, _ = ctrl.slotine_li_adaptive(x, target, ahat, lam, kmat, gamma,
                                            feat, feat.params())
            return ad.dot(w, u)

        theta0 = np.concatenate([ctrl.PfarGains.nominal().lam,
                                 ctrl.PfarGains.nominal().kmat,
                                 ctrl.PfarGains.nominal().gamma])
        assert ad.grad_check(program, theta0) < 1e-4


class TestMetaParams:
    def test_vector_roundtrip(self):
        for system in (dyn.PFAR, dyn.PVTOL):
            theta = ctrl.MetaParams.init(system, rng.root_key(32))
            vec = theta.to_vector()
            theta2 = theta.from_vector(vec)
            assert np.array_equal(theta2.to_vector(), vec)

    def test_checkpoint_roundtrip(self, tmp_path):
        from metarotor import learning as lr
        theta = ctrl.MetaParams.init(dyn.PVTOL, rng.root_key(33))
        path = tmp_path / "theta.json"
        lr.save_checkpoint(theta, str(path), {"seed": 1, "step": 7,
                                              "valid_loss": 0.25})
        theta2 = lr.load_checkpoint(str(path))
        assert np.array_equal(theta.to_vector(), theta2.to_vector())
        assert theta2.system == dyn.PVTOL

    def test_init_gains_match_data_collection_values(self):
        theta = ctrl.MetaParams.init(dyn.PFAR, rng.root_key(34))
        gains = theta.decoded_gains()
        assert np.allclose(gains["lam"], np.eye(3), atol=1e-12)
        assert np.allclose(gains["kmat"], 10 * np.eye(3), atol=1e-10)
        assert np.allclose(gains["gamma"], np.eye(3), atol=1e-12)
        theta = ctrl.MetaParams.init(dyn.PVTOL, rng.root_key(35))
        gains = theta.decoded_gains()
        for name in ("cx", "cy", "kx", "ky", "kphi"):
            assert np.allclose(gains[name], np.ones(2))
        assert np.allclose(gains["gamma"], 0.1 * np.eye(2), atol=1e-12)
