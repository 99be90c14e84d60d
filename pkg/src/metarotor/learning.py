"""Offline learning: data collection, model ensembles, and meta-training.

Data is collected by tracking random spline targets with the hand-tuned
nominal controllers while the true (wind-disturbed) dynamics run underneath.
A per-trajectory model ensemble trained on one-step prediction then stands in
for the unknown dynamics, and the adaptive controller's parameters are trained
by descending the average closed-loop tracking loss across a grid of
(target, model) tasks.  The regression-oriented baseline instead trains
features so a closed-form ridge fit of the output layer predicts one-step
transitions.
"""

import json
import multiprocessing as mp
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import controllers as ctrl
from . import dynamics as dyn
from . import rng
from . import simulate as sim
from . import trajgen as tg
from .autodiff import Tape, value_of


class SplitError(ValueError):
    """Not enough items to split."""


class TrainingError(ArithmeticError):
    """Non-finite loss during training."""


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class TransitionTuple:
    """One recorded transition (t_k, x_k, u_k, t_{k+1}, x_{k+1})."""

    t: float
    x: np.ndarray
    u: np.ndarray
    t_next: float
    x_next: np.ndarray

    def __post_init__(self):
        if not self.t_next > self.t:
            raise ValueError("t_next must exceed t")


@dataclass
class TrajectoryDataset:
    """A tracked trajectory sampled at a fixed rate.

    `wind` is the constant wind speed present during collection; it is stored
    for analysis only and never shown to any learner.
    """

    system: str
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    wind: float = 0.0
    seed: int = None

    def __len__(self):
        return len(self.times) - 1

    @property
    def tuples(self):
        return [TransitionTuple(self.times[k], self.states[k], self.controls[k],
                                self.times[k + 1], self.states[k + 1])
                for k in range(len(self))]

    def arrays(self):
        """(t, x, u, t_next, x_next) array views over all transitions."""
        return (self.times[:-1], self.states[:-1], self.controls[:-1],
                self.times[1:], self.states[1:])

    def save(self, path):
        with open(path, "w") as f:
            header = {"system": self.system, "wind": self.wind, "seed": self.seed}
            f.write(json.dumps(header) + "\n")
            for k in range(len(self)):
                rec = {"t": self.times[k], "x": self.states[k].tolist(),
                       "u": self.controls[k].tolist(),
                       "t_next": self.times[k + 1],
                       "x_next": self.states[k + 1].tolist()}
                f.write(json.dumps(rec) + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as f:
            header = json.loads(f.readline())
            times, states, controls = [], [], []
            last = None
            for line in f:
                rec = json.loads(line)
                times.append(rec["t"])
                states.append(rec["x"])
                controls.append(rec["u"])
                last = rec
        times.append(last["t_next"])
        states.append(last["x_next"])
        controls.append(controls[-1])
        return cls(header["system"], np.asarray(times), np.asarray(states),
                   np.asarray(controls), header["wind"], header.get("seed"))


def nominal_controller(system):
    """The hand-tuned controller used to collect data."""
    if system == dyn.PFAR:
        return sim.PdPfar(10.0 * np.eye(3), 0.1 * np.eye(3))
    gains = ctrl.decode_pvtol_gains(ctrl.PvtolGains.nominal().encodings())
    return sim.PvtolNominal(gains)


def collect_trajectory(system, target, wind, coeffs=None, dt=0.01):
    """Track `target` with the nominal controller on the true plant at 100 Hz."""
    plant = sim.TruePlant(system, coeffs, wind)
    controller = nominal_controller(system)
    result = sim.rollout(plant, controller, target, target.duration, dt)
    return TrajectoryDataset(system, result.times, result.states,
                             result.controls, wind=float(wind))


def split_train_valid(items, fraction, key):
    """Disjoint, exhaustive (train, valid) split with |train| = floor(f * n)."""
    n = len(items)
    if n < 2:
        raise SplitError("need at least two items to split")
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be in (0, 1)")
    perm = rng.generator(key).permutation(n)
    k = int(np.floor(fraction * n))
    pick = lambda idx: [items[i] for i in idx]  # noqa: E731
    if isinstance(items, np.ndarray):
        return items[perm[:k]], items[perm[k:]]
    return pick(perm[:k]), pick(perm[k:])


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """First/second moment accumulators and step count."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, n, lr=1e-2):
        return cls(np.zeros(n), np.zeros(n), 0, lr)


def adam_step(params, grads, state):
    """One bias-corrected Adam update; returns (new_params, new_state)."""
    if np.shape(params) != np.shape(grads):
        raise ValueError("parameter/gradient shape mismatch")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    mhat = m / (1.0 - state.beta1 ** t)
    vhat = v / (1.0 - state.beta2 ** t)
    new = params - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return new, replace(state, m=m, v=v, t=t)


# ---------------------------------------------------------------------------
# model-ensemble training


@dataclass
class EnsembleHyper:
    epochs: int = 1000
    lr: float = 1e-2
    batch_frac: float = 0.25
    mu_ensem: float = 1e-4
    split: float = 0.75
    width: int = 32


def _model_shapes(system, width):
    n_in = 6 + dyn.control_dim(system)
    return [(width, n_in), (width,), (width, width), (width,), (6, width), (6,)]


def _flatten(params):
    return np.concatenate([np.ravel(p) for p in params])


def _unflatten(vec, shapes):
    out, k = [], 0
    for shape in shapes:
        size = int(np.prod(shape))
        out.append(vec[k:k + size].reshape(shape))
        k += size
    return out


def _one_step_pred(params, x, u, dt_col):
    """Single RK4 step of the learned model with the control held constant."""
    k1 = ctrl.mlp_dynamics_forward(params, x, u)
    k2 = ctrl.mlp_dynamics_forward(params, x + (0.5 * dt_col) * k1, u)
    k3 = ctrl.mlp_dynamics_forward(params, x + (0.5 * dt_col) * k2, u)
    k4 = ctrl.mlp_dynamics_forward(params, x + dt_col * k3, u)
    return x + (dt_col / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _prediction_mse(params, x, u, dt_col, x_next):
    pred = _one_step_pred(params, x, u, dt_col)
    return ad.reduce_sum(ad.square(pred - x_next)) * (1.0 / x.shape[0])


def train_ensemble_member(dataset, key, hyper=None):
    """Fit one dynamics model to one trajectory by one-step prediction.

    Batched Adam on the regularized one-step objective; returns the weights
    with the lowest recorded validation loss and the (train, valid) curve.
    """
    hyper = hyper or EnsembleHyper()
    t, x, u, tn, xn = dataset.arrays()
    n = len(t)
    key_split, key_init, key_batch = rng.split(key, 3)
    train_idx, valid_idx = split_train_valid(np.arange(n), hyper.split, key_split)
    params = ctrl.mlp_init(key_init, [6 + dyn.control_dim(dataset.system),
                                      hyper.width, hyper.width, 6])
    shapes = [np.shape(p) for p in params]
    vec = _flatten(params)
    adam = AdamState.init(vec.size, hyper.lr)
    n_train = len(train_idx)
    batch = max(1, int(np.floor(hyper.batch_frac * n_train)))
    dt_all = (tn - t)[:, None]

    def valid_loss(pvec):
        p = _unflatten(pvec, shapes)
        return _prediction_mse(p, x[valid_idx], u[valid_idx],
                               dt_all[valid_idx], xn[valid_idx])

    gen = rng.generator(key_batch)
    best = (valid_loss(vec), vec.copy())
    curve = []
    for epoch in range(hyper.epochs):
        perm = train_idx[gen.permutation(n_train)]
        epoch_loss = 0.0
        for start in range(0, n_train, batch):
            idx = perm[start:start + batch]
            tape = Tape()
            leaves = [tape.input(p.copy()) for p in _unflatten(vec, shapes)]
            loss = _prediction_mse(leaves, x[idx], u[idx], dt_all[idx], xn[idx])
            reg = sum(ad.reduce_sum(ad.square(w)) for w in leaves)
            loss = loss + (hyper.mu_ensem / n_train) * reg
            if not np.isfinite(value_of(loss)):
                raise TrainingError("non-finite ensemble training loss")
            grads = ad.backward(tape, output=loss)
            vec, adam = adam_step(vec, _flatten(grads), adam)
            epoch_loss += float(value_of(loss))
        vl = valid_loss(vec)
        curve.append((epoch, epoch_loss, vl))
        if vl < best[0]:
            best = (vl, vec.copy())
    return _unflatten(best[1], shapes), curve


def _ensemble_worker(args):
    dataset, key, hyper = args
    params, _ = train_ensemble_member(dataset, key, hyper)
    return params


def train_ensemble(datasets, key, hyper=None, threads=1):
    """One model per trajectory, independently trained."""
    keys = rng.split(key, len(datasets))
    jobs = [(ds, k, hyper) for ds, k in zip(datasets, keys)]
    if threads > 1 and len(jobs) > 1:
        with mp.Pool(min(threads, len(jobs))) as pool:
            return pool.map(_ensemble_worker, jobs)
    return [_ensemble_worker(j) for j in jobs]


# ---------------------------------------------------------------------------
# ridge-regression baseline


@dataclass
class MrrHyper:
    steps: int = 5000
    lr: float = 1e-2
    subset_frac: float = 0.25
    mu_ridge: float = 1e-6
    mu_meta: float = 1e-4
    split: float = 0.75
    width: int = 32


@dataclass
class MrrData:
    """Constant per-transition quantities for the ridge baseline."""

    x: np.ndarray          # (n, 6) states
    dt: np.ndarray         # (n,)
    bstack: np.ndarray     # (n, 6, d) adapted-force channels
    resid: np.ndarray      # (n, 6) x_next - x - dt * nominal_xdot
    bt_resid: np.ndarray   # (n, d) dt * B^T resid


def mrr_precompute(dataset):
    t, x, u, tn, xn = dataset.arrays()
    n = len(t)
    dt = tn - t
    d = dyn.control_dim(dataset.system)
    bstack = np.empty((n, 6, d))
    resid = np.empty((n, 6))
    for k in range(n):
        bstack[k] = dyn.input_channel(dataset.system, x[k])
        resid[k] = xn[k] - x[k] - dt[k] * dyn.nominal_xdot(dataset.system, x[k], u[k])
    bt_resid = np.einsum("kij,ki->kj", bstack, resid) * dt[:, None]
    return MrrData(x, dt, bstack, resid, bt_resid)


def _ridge_from_data(fparams, data, idx, mu_ridge):
    """Closed-form ridge fit of the output layer on the indexed transitions.

    The adapted-force channels have orthonormal columns, which collapses the
    normal equations to a single p x p solve.
    """
    y = ctrl.feature_forward(fparams, data.x[idx])
    yw = ad.mul(y, data.dt[idx][:, None])
    gram = ad.matmul(ad.transpose(yw), yw) + mu_ridge * np.eye(np.shape(value_of(y))[1])
    cmat = ad.matmul(np.transpose(data.bt_resid[idx]), y)
    return ad.transpose(ad.solve(gram, ad.transpose(cmat)))


def mrr_ridge_solve(fparams, dataset_or_tuples, mu_ridge, system=None, idx=None):
    """Ridge fit of the output layer to transition tuples (public form)."""
    if mu_ridge <= 0:
        raise ValueError("mu_ridge must be positive")
    if isinstance(dataset_or_tuples, MrrData):
        data = dataset_or_tuples
    elif isinstance(dataset_or_tuples, TrajectoryDataset):
        data = mrr_precompute(dataset_or_tuples)
    else:
        data = mrr_precompute(_tuples_to_dataset(dataset_or_tuples, system))
    if idx is None:
        idx = np.arange(len(data.dt))
    return _ridge_from_data(fparams, data, idx, mu_ridge)


def _tuples_to_dataset(tuples, system):
    times = np.array([tp.t for tp in tuples] + [tuples[-1].t_next])
    states = np.vstack([[tp.x for tp in tuples], [tuples[-1].x_next]])
    controls = np.vstack([[tp.u for tp in tuples], [tuples[-1].u]])
    return TrajectoryDataset(system, times, states, controls)


def mrr_prediction_loss(fparams, data, ahat, idx):
    """Mean squared one-step prediction error of the Euler model with `ahat`."""
    y = ctrl.feature_forward(fparams, data.x[idx])
    q = ad.matmul(y, ad.transpose(ahat))
    contrib = ad.batch_apply(data.bstack[idx] * data.dt[idx][:, None, None], q)
    err = contrib - data.resid[idx]
    return ad.reduce_sum(ad.square(err)) * (1.0 / len(idx))


def meta_train_mrr(datasets, key, hyper=None):
    """Train feature weights so ridge-fit output layers predict transitions.

    Each step samples a fresh tuple subset per trajectory for the closed-form
    fit, evaluates the prediction loss on that trajectory's full meta-train
    tuples, and descends the regularized average.  Returns the weights at the
    lowest recorded meta-validation loss and the loss curve.
    """
    hyper = hyper or MrrHyper()
    system = datasets[0].system
    m_count = len(datasets)
    pres = [mrr_precompute(ds) for ds in datasets]
    key_split, key_init, key_steps = rng.split(key, 3)
    split_keys = rng.split(key_split, m_count)
    splits = [split_train_valid(np.arange(len(p.dt)), hyper.split, k)
              for p, k in zip(pres, split_keys)]
    phi = ctrl.mlp_init(key_init, [6, hyper.width, hyper.width])
    shapes = [np.shape(p) for p in phi]
    vec = _flatten(phi)
    adam = AdamState.init(vec.size, hyper.lr)
    step_keys = rng.split(key_steps, hyper.steps)
    best = (np.inf, vec.copy(), -1)
    curve = []
    for step in range(hyper.steps):
        sub_keys = rng.split(step_keys[step], m_count)
        tape = Tape()
        leaves = [tape.input(p.copy()) for p in _unflatten(vec, shapes)]
        loss = 0.0
        valid = 0.0
        for j in range(m_count):
            train_idx, valid_idx = splits[j]
            gen = rng.generator(sub_keys[j])
            size = max(1, int(np.floor(hyper.subset_frac * len(train_idx))))
            subset = train_idx[gen.integers(0, len(train_idx), size=size)]
            ahat = _ridge_from_data(leaves, pres[j], subset, hyper.mu_ridge)
            loss = loss + mrr_prediction_loss(leaves, pres[j], ahat, train_idx)
            valid += float(value_of(mrr_prediction_loss(
                [value_of(p) for p in leaves], pres[j], value_of(ahat), valid_idx)))
        reg = sum(ad.reduce_sum(ad.square(w)) for w in leaves)
        loss = (loss + hyper.mu_meta * reg) * (1.0 / m_count)
        valid /= m_count
        if not np.isfinite(value_of(loss)):
            raise TrainingError("non-finite regression meta-loss")
        curve.append((step, float(value_of(loss)), valid))
        if valid < best[0]:
            best = (valid, vec.copy(), step)
        grads = ad.backward(tape, output=loss)
        vec, adam = adam_step(vec, _flatten(grads), adam)
    return _unflatten(best[1], shapes), curve


# ---------------------------------------------------------------------------
# control-oriented meta-training


@dataclass
class MetaHyper:
    n_targets: int = 10
    target_duration: float = 30.0
    target_waypoints: int = 6
    horizon: float = None          # defaults to target_duration
    steps: int = 500
    lr: float = 1e-2
    mu_ctrl: float = 1e-3
    mu_meta: float = 1e-4
    split: float = 0.75
    dt: float = 0.01

    def rollout_hyper(self):
        h = self.horizon if self.horizon is not None else self.target_duration
        return sim.RolloutHyper(h, self.dt, self.mu_ctrl)


_POOL_CTX = {}


def _init_task_pool(tasks, hyper, template):
    _POOL_CTX["tasks"] = tasks
    _POOL_CTX["hyper"] = hyper
    _POOL_CTX["template"] = template


def _train_task_worker(args):
    idx, vec = args
    theta = _POOL_CTX["template"].from_vector(vec)
    return task_loss_and_grad(theta, _POOL_CTX["tasks"][idx], _POOL_CTX["hyper"])


def _valid_task_worker(args):
    idx, vec = args
    theta = _POOL_CTX["template"].from_vector(vec)
    return task_loss_plain(theta, _POOL_CTX["tasks"][idx], _POOL_CTX["hyper"])


def task_loss_and_grad(theta, task, hyper):
    """(loss, flattened gradient) of one taped task rollout."""
    loss, tape = sim.differentiable_rollout_loss(theta, task, hyper)
    if tape.output is None:
        return float(value_of(loss)), np.zeros(theta.to_vector().size)
    grads = ad.backward(tape, output=loss)
    return float(value_of(loss)), _flatten(grads)


def task_loss_plain(theta, task, hyper):
    """Untaped tracking loss of one task rollout (for validation)."""
    controller = sim.build_controller(theta)
    plant = sim.ModelPlant(task.system, task.model_params)
    try:
        result = sim.rollout(plant, controller, task.target, hyper.horizon,
                             hyper.dt, compute_loss=True, mu_ctrl=hyper.mu_ctrl)
    except (sim.RolloutDiverged, ctrl.ThrustSingularityError):
        return sim.DIVERGED_LOSS
    return result.loss


@dataclass
class MetaResult:
    theta: ctrl.MetaParams
    curve: list
    best_step: int
    best_valid: float
    theta_init: ctrl.MetaParams


def meta_train_ours(ensemble, system, key, hyper=None, threads=1):
    """Meta-train features, control gains, and adaptation gain end to end.

    Each step back-propagates the average tracking loss through taped
    closed-loop rollouts over the meta-train (target, model) grid; the
    meta-validation grid is scored untaped.  Returns the parameters with the
    lowest recorded validation loss.
    """
    hyper = hyper or MetaHyper()
    n = hyper.n_targets
    key_tgt, key_tsplit, key_msplit, key_init = rng.split(key, 4)
    targets = [tg.random_target(system, k, hyper.target_duration,
                                hyper.target_waypoints)
               for k in rng.split(key_tgt, n)]
    n_train = max(1, int(np.floor(hyper.split * n)))
    tgt_train, tgt_valid = split_train_valid(targets, hyper.split, key_tsplit) \
        if n_train < n else (targets, targets)
    m_count = len(ensemble)
    m_train = max(1, int(np.floor(hyper.split * m_count)))
    if m_train < m_count:
        mdl_train, mdl_valid = split_train_valid(ensemble, hyper.split, key_msplit)
    else:
        mdl_train, mdl_valid = ensemble, ensemble

    theta = ctrl.MetaParams.init(system, key_init)
    theta_init = theta
    rhyper = hyper.rollout_hyper()
    train_tasks = [sim.Task(t, m, system) for t in tgt_train for m in mdl_train]
    valid_tasks = [sim.Task(t, m, system) for t in tgt_valid for m in mdl_valid]

    vec = theta.to_vector()
    adam = AdamState.init(vec.size, hyper.lr)
    reg_scale = 2.0 * hyper.mu_meta / (len(tgt_train) * len(mdl_train) * rhyper.horizon)

    pool = None
    if threads > 1:
        pool = mp.Pool(threads, initializer=_init_task_pool,
                       initargs=(train_tasks + valid_tasks, rhyper, theta))
    n_tr = len(train_tasks)
    try:
        best = (np.inf, vec.copy(), -1)
        curve = []
        for step in range(hyper.steps):
            theta_step = theta.from_vector(vec)
            train_args = [(i, vec) for i in range(n_tr)]
            valid_args = [(n_tr + i, vec) for i in range(len(valid_tasks))]
            if pool is not None:
                outs = pool.map(_train_task_worker, train_args, chunksize=1)
                valids = pool.map(_valid_task_worker, valid_args, chunksize=1)
            else:
                outs = [task_loss_and_grad(theta_step, t, rhyper) for t in train_tasks]
                valids = [task_loss_plain(theta_step, t, rhyper) for t in valid_tasks]
            losses = np.array([o[0] for o in outs])
            gsum = np.zeros_like(vec)
            for _, g in outs:
                gsum += g
            gvec = gsum / n_tr + reg_scale * vec
            train_loss = float(np.mean(losses))
            valid_loss = float(np.mean(valids))
            curve.append((step, train_loss, valid_loss))
            if valid_loss < best[0]:
                best = (valid_loss, vec.copy(), step)
            vec, adam = adam_step(vec, gvec, adam)
    finally:
        if pool is not None:
            pool.close()
            pool.join()
    return MetaResult(theta.from_vector(best[1]), curve, best[2], best[0], theta_init)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(theta, path, metadata=None):
    with open(path, "w") as f:
        json.dump(theta.to_dict(metadata), f)


def load_checkpoint(path):
    with open(path) as f:
        return ctrl.MetaParams.from_dict(json.load(f))


def save_features(phi, path, metadata=None):
    with open(path, "w") as f:
        json.dump({"feature_weights": [np.asarray(p).tolist() for p in phi],
                   "metadata": metadata or {}}, f)


def load_features(path):
    with open(path) as f:
        data = json.load(f)
    return [np.asarray(p, dtype=float) for p in data["feature_weights"]]
