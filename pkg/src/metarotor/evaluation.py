"""Test-time evaluation under wind-distribution shift.

Every configuration (feature source x gain source x adaptation flag) is rolled
out on a shared per-seed test set of random targets with winds drawn from the
test distribution, which has a higher mode and wider support than the training
one.  Per-trajectory RMS tracking error and control effort are averaged into
a report; diverged rollouts are capped and flagged rather than dropped.
"""

import csv
import multiprocessing as mp
from dataclasses import dataclass, field

import numpy as np

from . import controllers as ctrl
from . import dynamics as dyn
from . import learning as lr
from . import rng
from . import simulate as sim
from . import trajgen as tg

DIVERGED_RMS_CAP = 1e3


def rms(signal):
    """Root-mean-square norm over samples: sqrt(mean_k ||h(t_k)||^2)."""
    signal = np.asarray(signal, dtype=float)
    if signal.size == 0:
        raise ValueError("empty signal")
    if signal.ndim == 1:
        return float(np.sqrt(np.mean(signal ** 2)))
    return float(np.sqrt(np.mean(np.sum(signal ** 2, axis=1))))


@dataclass
class EvalEntry:
    index: int
    wind: float
    rms_error: float
    rms_control: float
    diverged: bool = False


@dataclass
class EvalReport:
    """Per-trajectory metrics and their averages for one configuration."""

    config_name: str
    system: str
    m_value: int
    seed: int
    entries: list = field(default_factory=list)
    gain_source: str = ""
    feature_source: str = ""

    @property
    def mean_rms_error(self):
        return float(np.mean([e.rms_error for e in self.entries]))

    @property
    def mean_rms_control(self):
        return float(np.mean([e.rms_control for e in self.entries]))

    @property
    def n_diverged(self):
        return sum(e.diverged for e in self.entries)


DEFAULT_CELLS = {
    dyn.PFAR: [
        {"name": "ours", "features": "ours", "gains": "ours", "adaptation": True},
        {"name": "mrr_ours_gains", "features": "mrr", "gains": "ours",
         "adaptation": True},
        {"name": "pid", "features": "none", "gains": "init", "adaptation": False},
    ],
    dyn.PVTOL: [
        {"name": "ours", "features": "ours", "gains": "ours", "adaptation": True},
        {"name": "nominal_init", "features": "none", "gains": "init",
         "adaptation": False},
        {"name": "nominal_ours_gains", "features": "none", "gains": "ours",
         "adaptation": False},
        {"name": "mrr_init_gains", "features": "mrr", "gains": "init",
         "adaptation": True},
        {"name": "mrr_ours_gains", "features": "mrr", "gains": "ours",
         "adaptation": True},
    ],
}


def cell_needs(cell):
    """Artifact names a configuration requires ("theta_ours", "phi_mrr")."""
    needs = set()
    if cell.get("gains") == "ours" or cell.get("features") == "ours":
        needs.add("theta_ours")
    if cell.get("features") == "mrr":
        needs.add("phi_mrr")
    return needs


def _gain_encodings(cell, system, artifacts):
    source = cell.get("gains", "init")
    if source == "ours":
        return artifacts["theta_ours"].gains
    if source == "manual":
        manual = cell["manual_gains"]
        if system == dyn.PFAR:
            return ctrl.PfarGains.from_matrices(
                np.asarray(manual["lam"]), np.asarray(manual["kmat"]),
                np.asarray(manual["gamma"])).encodings()
        return ctrl.PvtolGains.from_values(
            manual["cx"], manual["cy"], manual["kx"], manual["ky"],
            manual["kphi"], np.asarray(manual["gamma"])).encodings()
    if source != "init":
        raise ValueError(f"unknown gain source {source!r}")
    if system == dyn.PFAR:
        return ctrl.PfarGains.nominal().encodings()
    return ctrl.PvtolGains.nominal().encodings()


def _features(cell, artifacts):
    source = cell.get("features", "none")
    if source == "ours":
        return ctrl.NeuralFeatures(*artifacts["theta_ours"].features)
    if source == "mrr":
        return ctrl.NeuralFeatures(*artifacts["phi_mrr"])
    if source == "constant":
        return ctrl.ConstantFeatures()
    if source == "none":
        return None
    raise ValueError(f"unknown feature source {source!r}")


def build_cell_controller(cell, system, artifacts):
    """Controller adapter for one configuration."""
    enc = _gain_encodings(cell, system, artifacts)
    adaptive = cell.get("adaptation", False)
    features = _features(cell, artifacts)
    if system == dyn.PFAR:
        lam, kmat, gamma = ctrl.decode_pfar_gains(enc)
        if not adaptive:
            k_p, k_i, k_d = ctrl.pid_gains_from_adaptive(lam, kmat, gamma)
            return sim.PidPfar(k_p, k_i, k_d)
        if features is None:
            raise ValueError(f"cell {cell.get('name')}: adaptation needs features")
        return sim.SlotineLiPfar(lam, kmat, gamma, features, features.params())
    gains = ctrl.decode_pvtol_gains(enc)
    if not adaptive:
        return sim.PvtolNominal(gains)
    if features is None:
        raise ValueError(f"cell {cell.get('name')}: adaptation needs features")
    return sim.PvtolAdaptive(gains, features, features.params())


def make_test_set(system, key, n_test, duration, waypoints,
                  dist=dyn.TEST_WIND):
    """Shared test set: (target, wind) pairs with winds from the test distribution."""
    key_t, key_w = rng.split(key, 2)
    targets = [tg.random_target(system, k, duration, waypoints)
               for k in rng.split(key_t, n_test)]
    winds = [dyn.sample_wind(dist, k) for k in rng.split(key_w, n_test)]
    return list(zip(targets, winds))


def test_set_fingerprint(test_set):
    """Hashable digest for asserting test sets are shared across configurations."""
    parts = []
    for target, wind in test_set:
        parts.append(round(wind, 12))
        parts.append(tuple(np.round(target.spline.knot_times, 12)))
        parts.append(tuple(np.round(target.spline.coeffs[0][0], 12)))
    return hash(tuple(map(str, parts)))


def _eval_one(args):
    controller, target, wind, system, coeffs, duration, dt, index = args
    plant = sim.TruePlant(system, coeffs, wind)
    try:
        result = sim.rollout(plant, controller, target, duration, dt)
    except (sim.RolloutDiverged, ctrl.ThrustSingularityError):
        return EvalEntry(index, wind, DIVERGED_RMS_CAP, DIVERGED_RMS_CAP, True)
    refs = target.reference_states(result.times)
    return EvalEntry(index, wind, rms(result.states - refs),
                     rms(result.controls), False)


def evaluate_configuration(cell, test_set, system, artifacts, duration,
                           dt=0.01, coeffs=None, seed=0, m_value=0, threads=1):
    """Roll out one configuration over the test set; returns its report."""
    controller = build_cell_controller(cell, system, artifacts)
    coeffs = coeffs if coeffs is not None else dyn.DragCoeffs()
    jobs = [(controller, target, wind, system, coeffs, duration, dt, k)
            for k, (target, wind) in enumerate(test_set)]
    if threads > 1:
        with mp.Pool(threads) as pool:
            entries = pool.map(_eval_one, jobs)
    else:
        entries = [_eval_one(j) for j in jobs]
    return EvalReport(cell["name"], system, m_value, seed, entries,
                      gain_source=cell.get("gains", "init"),
                      feature_source=cell.get("features", "none"))


# ---------------------------------------------------------------------------
# full experiment pipeline


@dataclass
class CellFailure:
    config_name: str
    m_value: int
    seed: int
    reason: str


def build_pool(config, seed_key, n, system):
    """Collect `n` training trajectories, retrying divergent ones."""
    coeffs = dyn.DragCoeffs(*config.drag)
    train_dist = dyn.WindDistribution(**config.train_wind)
    datasets, skipped = [], []
    for i, key in enumerate(rng.split(seed_key, n)):
        key_w, *key_tries = rng.split(key, 4)
        wind = dyn.sample_wind(train_dist, key_w)
        done = False
        for key_t in key_tries:
            target = tg.random_target(system, key_t, config.pool_duration,
                                      config.pool_waypoints)
            try:
                ds = lr.collect_trajectory(system, target, wind, coeffs, config.dt)
            except (sim.RolloutDiverged, ctrl.ThrustSingularityError):
                continue
            datasets.append(ds)
            done = True
            break
        if not done:
            skipped.append(i)
    return datasets, skipped


def run_experiment(config, out_dir=None, progress=None):
    """Full per-seed pipeline and cross-seed aggregation.

    pool -> sample M -> ensemble -> meta-train (ours) -> meta-train (baseline)
    -> shared-test-set evaluation of every configuration.  Failed cells are
    recorded with their reason and the experiment continues.
    """
    system = config.system
    cells = config.cells if config.cells else DEFAULT_CELLS[system]
    reports, failures = [], []
    say = progress or (lambda msg: None)
    for seed in config.seeds:
        root = rng.root_key(seed)
        key_pool, key_test, key_m, key_train = rng.split(root, 4)
        say(f"seed {seed}: building pool ({config.pool_size} trajectories)")
        pool, skipped = build_pool(config, key_pool, config.pool_size, system)
        test_set = make_test_set(system, key_test, config.eval_n_test,
                                 config.eval_duration, config.eval_waypoints,
                                 dyn.WindDistribution(**config.test_wind))
        m_keys = rng.split(key_m, len(config.m_values))
        train_keys = rng.split(key_train, len(config.m_values))
        for m_value, key_sample, key_tr in zip(config.m_values, m_keys, train_keys):
            say(f"seed {seed} M={m_value}: training")
            artifacts, fail = _train_cell_artifacts(
                config, system, pool, m_value, key_sample, key_tr, cells, say)
            if fail is not None:
                failures.append(CellFailure("*", m_value, seed, fail))
                continue
            for cell in cells:
                missing = cell_needs(cell) - set(artifacts)
                if missing:
                    failures.append(CellFailure(cell["name"], m_value, seed,
                                                f"missing artifacts {missing}"))
                    continue
                try:
                    report = evaluate_configuration(
                        cell, test_set, system, artifacts, config.eval_duration,
                        config.dt, dyn.DragCoeffs(*config.drag), seed, m_value,
                        config.threads)
                except Exception as err:  # noqa: BLE001 - cell isolation
                    failures.append(CellFailure(cell["name"], m_value, seed,
                                                repr(err)))
                    continue
                reports.append(report)
        say(f"seed {seed}: done ({len(skipped)} pool trajectories skipped)")
    if out_dir is not None:
        write_report_files(reports, failures, out_dir)
    return reports, failures


def _train_cell_artifacts(config, system, pool, m_value, key_sample, key_tr, cells,
                          say):
    if m_value > len(pool):
        return {}, f"pool smaller than M={m_value}"
    idx = rng.generator(key_sample).choice(len(pool), size=m_value, replace=False)
    datasets = [pool[i] for i in idx]
    key_ens, key_ours, key_mrr = rng.split(key_tr, 3)
    needed = set()
    for cell in cells:
        needed |= cell_needs(cell)
    artifacts = {}
    try:
        if "theta_ours" in needed:
            ensemble = lr.train_ensemble(datasets, key_ens, config.ensemble_hyper(),
                                         config.threads)
            say("  meta-training (control-oriented)")
            result = lr.meta_train_ours(ensemble, system, key_ours,
                                        config.meta_hyper(), config.threads)
            artifacts["theta_ours"] = result.theta
            artifacts["theta_init"] = result.theta_init
            artifacts["curve_ours"] = result.curve
        if "phi_mrr" in needed:
            say("  meta-training (ridge baseline)")
            phi, curve = lr.meta_train_mrr(datasets, key_mrr, config.mrr_hyper())
            artifacts["phi_mrr"] = phi
            artifacts["curve_mrr"] = curve
    except (lr.TrainingError, ArithmeticError) as err:
        return {}, repr(err)
    return artifacts, None


def write_report_files(reports, failures, out_dir):
    """CSV outputs: per-cell rows, across-seed line-plot data, failure log."""
    import os
    os.makedirs(out_dir, exist_ok=True)
    res_path = os.path.join(out_dir, "results.csv")
    with open(res_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["config", "M", "seed", "mean_rms_error",
                         "mean_rms_control", "n_diverged"])
        for r in reports:
            writer.writerow([r.config_name, r.m_value, r.seed, r.mean_rms_error,
                             r.mean_rms_control, r.n_diverged])
    line_path = os.path.join(out_dir, "lineplot.csv")
    cells = sorted({r.config_name for r in reports})
    ms = sorted({r.m_value for r in reports})
    with open(line_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["config", "M", "mean_rms_error", "std_rms_error",
                         "mean_rms_control", "std_rms_control", "n_seeds"])
        for name in cells:
            for m in ms:
                vals = [r for r in reports if r.config_name == name and r.m_value == m]
                if not vals:
                    continue
                errs = [r.mean_rms_error for r in vals]
                ctls = [r.mean_rms_control for r in vals]
                writer.writerow([name, m, np.mean(errs), np.std(errs),
                                 np.mean(ctls), np.std(ctls), len(vals)])
    if failures:
        fail_path = os.path.join(out_dir, "failures.csv")
        with open(fail_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["config", "M", "seed", "reason"])
            for x in failures:
                writer.writerow([x.config_name, x.m_value, x.seed, x.reason])
    return res_path
