"""Closed-loop integration, rollouts, and differentiable tracking losses."""

import numpy as np
import pytest

from metarotor import autodiff as ad
from metarotor import controllers as ctrl
from metarotor import dynamics as dyn
from metarotor import learning as lr
from metarotor import rng
from metarotor import simulate as sim
from metarotor import trajgen as tg
from metarotor.autodiff import value_of


class TestRk4Step:
    def test_zero_field_fixed_point(self):
        out = sim.rk4_step(lambda t, x: np.zeros(3), np.ones(3), 0.0, 0.01)
        assert np.array_equal(out, np.ones(3))

    def test_scalar_decay_matches_rk4_polynomial(self):
        out = sim.rk4_step(lambda t, x: -x, 1.0, 0.0, 0.01)
        # 1 - h + h^2/2 - h^3/6 + h^4/24 at h = 0.01
        assert np.isclose(out, 0.99004983375, atol=1e-11)
        assert abs(out - np.exp(-0.01)) < 1e-11

    def test_linear_system_fourth_order_convergence(self):
        gen = rng.generator(rng.root_key(0))
        a_mat = gen.normal(size=(4, 4))
        x0 = gen.normal(size=4)
        from scipy.linalg import expm
        exact = expm(0.2 * a_mat) @ x0

        def integrate(dt):
            x = x0.copy()
            for k in range(int(round(0.2 / dt))):
                x = sim.rk4_step(lambda t, v: a_mat @ v, x, k * dt, dt)
            return np.max(np.abs(x - exact))

        e1, e2 = integrate(0.02), integrate(0.01)
        assert 12.0 <= e1 / e2 <= 20.0

    def test_nonfinite_stage_raises(self):
        with pytest.raises(sim.DivergenceError):
            sim.rk4_step(lambda t, x: x * np.inf, np.ones(2), 0.0, 0.01)

    def test_rejects_nonpositive_dt(self):
        with pytest.raises(ValueError):
            sim.rk4_step(lambda t, x: x, 1.0, 0.0, 0.0)

    def test_tuple_state_joint_integration(self):
        # plant and auxiliary state integrate jointly through shared stages
        def field(t, full):
            x, a = full
            return (-x + a, -a)

        state = (1.0, 1.0)
        for k in range(100):
            state = sim.rk4_step(field, state, k * 0.01, 0.01)
        # analytic: a = e^-t, x = (1 + t) e^-t
        assert abs(state[1] - np.exp(-1.0)) < 1e-10
        assert abs(state[0] - 2 * np.exp(-1.0)) < 1e-9


class TestRollout:
    def test_pd_tracks_exactly_without_disturbance(self):
        target = tg.random_target(dyn.PFAR, rng.root_key(1), duration=5.0,
                                  num_waypoints=4)
        controller = sim.PdPfar(10 * np.eye(3), 0.1 * np.eye(3))
        res = sim.rollout(sim.NominalPlant(dyn.PFAR), controller, target, 5.0)
        refs = target.reference_states(res.times)
        assert np.max(np.linalg.norm(res.states - refs, axis=1)) < 1e-6

    def test_open_loop_flatness_tracks(self):
        target = tg.random_target(dyn.PVTOL, rng.root_key(2), duration=5.0,
                                  num_waypoints=4)

        class OpenLoop:
            aux_shape = None

            def bind(self, tgt, times):
                us = tgt.reference_inputs(np.asarray(times))
                return lambda j, x, aux: (us[j], None)

        res = sim.rollout(sim.NominalPlant(dyn.PVTOL), OpenLoop(), target, 5.0)
        refs = target.reference_states(res.times)
        assert np.max(np.linalg.norm(res.states - refs, axis=1)) < 1e-3

    def test_deterministic(self):
        target = tg.random_target(dyn.PFAR, rng.root_key(3), duration=2.0,
                                  num_waypoints=3)
        plant = sim.TruePlant(dyn.PFAR, wind=2.5)
        controller = sim.PdPfar(10 * np.eye(3), 0.1 * np.eye(3))
        r1 = sim.rollout(plant, controller, target, 2.0)
        r2 = sim.rollout(plant, controller, target, 2.0)
        assert np.array_equal(r1.states, r2.states)
        assert np.array_equal(r1.controls, r2.controls)

    def test_divergence_carries_partial_trace(self):
        target = tg.random_target(dyn.PFAR, rng.root_key(4), duration=2.0,
                                  num_waypoints=3)
        # destabilizing gains: positive feedback
        controller = sim.PdPfar(-60 * np.eye(3), -20 * np.eye(3))
        plant = sim.TruePlant(dyn.PFAR, wind=4.0)
        with pytest.raises(sim.RolloutDiverged) as excinfo:
            sim.rollout(plant, controller, target, 2.0)
        partial = excinfo.value.partial
        assert partial.diverged
        assert len(partial.times) >= 1

    def test_grid_is_uniform(self):
        target = tg.random_target(dyn.PFAR, rng.root_key(5), duration=1.0,
                                  num_waypoints=3)
        controller = sim.PdPfar(10 * np.eye(3), 0.1 * np.eye(3))
        res = sim.rollout(sim.NominalPlant(dyn.PFAR), controller, target, 1.0)
        assert np.allclose(np.diff(res.times), 0.01)
        assert len(res.times) == 101

    def test_csv_trace(self, tmp_path):
        target = tg.random_target(dyn.PVTOL, rng.root_key(6), duration=1.0,
                                  num_waypoints=3)
        gains = ctrl.decode_pvtol_gains(ctrl.PvtolGains.nominal().encodings())
        controller = sim.PvtolNominal(gains)
        res = sim.rollout(sim.NominalPlant(dyn.PVTOL), controller, target, 1.0,
                          record_vbar=True)
        assert res.vbar is not None and np.all(np.isfinite(res.vbar))
        path = tmp_path / "trace.csv"
        res.to_csv(path, target)
        header = open(path).readline().strip().split(",")
        assert header[0] == "t" and "vbar" in header


class TestTrackingLoss:
    def _result(self, err, u, n=100):
        times = np.arange(n + 1) * 0.01
        states = np.tile(err, (n + 1, 1))
        controls = np.tile(u, (n + 1, 1))
        return sim.RolloutResult(times, states, controls)

    def test_perfect_tracking_zero(self):
        target = tg.TargetTrajectory(dyn.PFAR, tg.fit_spline(
            np.zeros((2, 3)), 1.0, [tg.SNAP, tg.SNAP, tg.ACCEL]))
        res = self._result(np.zeros(6), np.zeros(3))
        assert sim.tracking_loss(res, target, mu_ctrl=0.0) == 0.0

    def test_constant_error_gives_squared_norm(self):
        target = tg.TargetTrajectory(dyn.PFAR, tg.fit_spline(
            np.zeros((2, 3)), 1.0, [tg.SNAP, tg.SNAP, tg.ACCEL]))
        err = np.array([1.0, 2.0, 0.0, 0.0, 0.0, 2.0])
        res = self._result(err, np.zeros(3))
        assert np.isclose(sim.tracking_loss(res, target, 0.0), 9.0)

    def test_control_effort_weighting(self):
        target = tg.TargetTrajectory(dyn.PFAR, tg.fit_spline(
            np.zeros((2, 3)), 1.0, [tg.SNAP, tg.SNAP, tg.ACCEL]))
        res = self._result(np.zeros(6), np.array([2.0, 0.0, 0.0]))
        assert np.isclose(sim.tracking_loss(res, target, 1e-3), 1e-3 * 4.0)

    def test_rejects_negative_weight(self):
        target = tg.TargetTrajectory(dyn.PFAR, tg.fit_spline(
            np.zeros((2, 3)), 1.0, [tg.SNAP, tg.SNAP, tg.ACCEL]))
        with pytest.raises(ValueError):
            sim.tracking_loss(self._result(np.zeros(6), np.zeros(3)), target, -1.0)


def _pfar_task(seed=7, epochs=25):
    target = tg.random_target(dyn.PFAR, rng.root_key(seed), duration=4.0,
                              num_waypoints=3)
    ds = lr.collect_trajectory(dyn.PFAR, target, wind=2.0)
    params, _ = lr.train_ensemble_member(ds, rng.root_key(seed + 1),
                                         lr.EnsembleHyper(epochs=epochs))
    return sim.Task(target, params, dyn.PFAR)


class TestDifferentiableRolloutLoss:
    def test_matches_untaped_rollout_to_zero_ulps(self):
        task = _pfar_task()
        theta = ctrl.MetaParams.init(dyn.PFAR, rng.root_key(9))
        hyper = sim.RolloutHyper(horizon=1.0)
        loss, tape = sim.differentiable_rollout_loss(theta, task, hyper)
        res = sim.rollout(sim.ModelPlant(dyn.PFAR, task.model_params),
                          sim.build_controller(theta), task.target, 1.0,
                          compute_loss=True, mu_ctrl=hyper.mu_ctrl)
        assert res.loss == value_of(loss)

    def test_gradient_matches_finite_differences(self):
        task = _pfar_task(seed=10)
        theta = ctrl.MetaParams.init(dyn.PFAR, rng.root_key(12))
        hyper = sim.RolloutHyper(horizon=0.5)
        loss, tape = sim.differentiable_rollout_loss(theta, task, hyper)
        grads = ad.backward(tape, output=loss)
        gvec = np.concatenate([np.ravel(g) for g in grads])
        vec0 = theta.to_vector()
        gen = rng.generator(rng.root_key(13))
        eps = 1e-5
        for name, (a, b) in theta.layout().items():
            for k in gen.integers(a, b, size=2):
                vp, vm = vec0.copy(), vec0.copy()
                vp[k] += eps
                vm[k] -= eps
                lp, _ = sim.differentiable_rollout_loss(
                    theta.from_vector(vp), task, hyper)
                lm, _ = sim.differentiable_rollout_loss(
                    theta.from_vector(vm), task, hyper)
                fd = (value_of(lp) - value_of(lm)) / (2 * eps)
                assert abs(gvec[k] - fd) / max(1.0, abs(gvec[k])) < 1e-4

    def test_gradient_reaches_every_parameter_block(self):
        task = _pfar_task(seed=14)
        theta = ctrl.MetaParams.init(dyn.PFAR, rng.root_key(16))
        loss, tape = sim.differentiable_rollout_loss(theta, task,
                                                     sim.RolloutHyper(horizon=1.0))
        grads = ad.backward(tape, output=loss)
        gvec = np.concatenate([np.ravel(g) for g in grads])
        for name, (a, b) in theta.layout().items():
            assert np.linalg.norm(gvec[a:b]) > 0, name

    def test_diverged_rollout_returns_large_finite_loss(self):
        task = _pfar_task(seed=17)
        theta = ctrl.MetaParams.init(dyn.PFAR, rng.root_key(18))
        # gain encoding overflow produces non-finite stage values immediately
        theta.gains["kmat"] = np.array([800.0, 800.0, 800.0, 0.0, 0.0, 0.0])
        with np.errstate(over="ignore", invalid="ignore"):
            loss, tape = sim.differentiable_rollout_loss(
                theta, task, sim.RolloutHyper(horizon=2.0))
        assert value_of(loss) == sim.DIVERGED_LOSS
        assert tape.output is None

    def test_step_halving_fourth_order_loss_change(self):
        task = _pfar_task(seed=19)
        theta = ctrl.MetaParams.init(dyn.PFAR, rng.root_key(20))

        def loss_at(dt):
            res = sim.rollout(sim.ModelPlant(dyn.PFAR, task.model_params),
                              sim.build_controller(theta), task.target, 1.0,
                              dt=dt, compute_loss=True)
            return res.loss

        l1, l2, l3 = loss_at(0.02), loss_at(0.01), loss_at(0.005)
        # successive differences shrink ~16x per halving
        assert abs(l2 - l3) < abs(l1 - l2) / 8

    def _split_rollout(self, plant, controller, target, n_steps):
        # operator splitting: step x with ahat frozen, then advance ahat with
        # the adaptation rate held at the step's initial state and time
        times = np.arange(2 * n_steps + 1) * 0.005
        control = controller.bind(target, times)
        xdot = plant.bind(times)
        x = target.initial_state()
        ahat = np.zeros(controller.aux_shape)
        for k in range(n_steps):
            def fx(t, xs):
                j = int(round(t / 0.005))
                u, _ = control(j, xs, ahat)
                return xdot(j, xs, u)

            _, adot = control(2 * k, x, ahat)
            x = sim.rk4_step(fx, x, k * 0.01, 0.01)
            ahat = ahat + 0.01 * adot
        return x, ahat

    def test_joint_vs_split_adaptation_nominal(self):
        # on a nominal (disturbance-free) rollout the adaptation is quiescent
        # and any joint-vs-split gap would expose a structural splitting bug
        target = tg.random_target(dyn.PFAR, rng.root_key(21), duration=4.0,
                                  num_waypoints=3)
        theta = ctrl.MetaParams.init(dyn.PFAR, rng.root_key(22))
        controller = sim.build_controller(theta)
        plant = sim.NominalPlant(dyn.PFAR)
        res = sim.rollout(plant, controller, target, 1.0, record_adapted=True)
        x, ahat = self._split_rollout(plant, controller, target, 100)
        assert np.max(np.abs(x - res.states[-1])) < 1e-6
        assert np.max(np.abs(ahat - res.adapted[-1])) < 1e-6

    def test_joint_vs_split_adaptation_active(self):
        # with an active disturbance the two integrations agree to the
        # splitting-method error scale, not machine precision
        task = _pfar_task(seed=21)
        theta = ctrl.MetaParams.init(dyn.PFAR, rng.root_key(22))
        controller = sim.build_controller(theta)
        plant = sim.ModelPlant(dyn.PFAR, task.model_params)
        res = sim.rollout(plant, controller, task.target, 1.0)
        x, _ = self._split_rollout(plant, controller, task.target, 100)
        assert np.max(np.abs(x - res.states[-1])) < 1e-2