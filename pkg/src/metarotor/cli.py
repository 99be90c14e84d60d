"""Command-line pipeline: data generation, training, evaluation, traces.

Every command takes a single root seed and splits keys explicitly from it, so
reruns are byte-identical.  Outputs are written atomically (temp file plus
rename).  Exit codes: 0 success, 1 configuration error, 2 numeric/divergence
failure, 3 I/O failure.
"""

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import controllers as ctrl
from . import dynamics as dyn
from . import evaluation as ev
from . import learning as lr
from . import rng
from . import simulate as sim
from . import trajgen as tg
from .autodiff import NumericError
from .config import ConfigError, ExperimentConfig, desk_config


def _atomic_write(path, writer_fn):
    tmp = path + ".tmp"
    writer_fn(tmp)
    os.replace(tmp, path)


def _write_json(path, obj):
    _atomic_write(path, lambda p: json.dump(obj, open(p, "w"), indent=2))


def _write_curve(path, curve, columns):
    def write(p):
        with open(p, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(columns)
            for row in curve:
                w.writerow(row)
    _atomic_write(path, write)


def _load_config(args):
    if args.config:
        config = ExperimentConfig.load(args.config)
    elif getattr(args, "desk", False):
        config = desk_config(args.system or "pfar")
    else:
        config = ExperimentConfig()
    if args.system:
        config.system = args.system
        config.__post_init__()
    if args.threads:
        config.threads = args.threads
    if args.out:
        config.out_dir = args.out
    return config


def _pool_dir(config, seed):
    return os.path.join(config.out_dir, f"seed{seed}", "pool")


def _train_dir(config, seed, m_value):
    return os.path.join(config.out_dir, f"seed{seed}", f"M{m_value}")


def cmd_generate_pool(config, seed):
    """Write the training-trajectory pool and its manifest."""
    out = _pool_dir(config, seed)
    os.makedirs(out, exist_ok=True)
    root = rng.root_key(seed)
    key_pool, _, _, _ = rng.split(root, 4)
    datasets, skipped = ev.build_pool(config, key_pool, config.pool_size,
                                      config.system)
    winds = []
    for i, ds in enumerate(datasets):
        _atomic_write(os.path.join(out, f"traj_{i:04d}.jsonl"),
                      lambda p, ds=ds: ds.save(p))
        winds.append(ds.wind)
    _write_json(os.path.join(out, "manifest.json"),
                {"system": config.system, "seed": seed, "count": len(datasets),
                 "winds": winds, "skipped": skipped})
    print(f"wrote {len(datasets)} trajectories to {out} ({len(skipped)} skipped)")
    return 0


def _load_pool(config, seed):
    out = _pool_dir(config, seed)
    manifest_path = os.path.join(out, "manifest.json")
    if not os.path.exists(manifest_path):
        raise ConfigError(f"no pool at {out}; run generate-pool first")
    with open(manifest_path) as f:
        manifest = json.load(f)
    return [lr.TrajectoryDataset.load(os.path.join(out, f"traj_{i:04d}.jsonl"))
            for i in range(manifest["count"])]


def cmd_train(config, seed, method):
    """Train checkpoints for every configured M from the stored pool."""
    pool = _load_pool(config, seed)
    root = rng.root_key(seed)
    _, _, key_m, key_train = rng.split(root, 4)
    m_keys = rng.split(key_m, len(config.m_values))
    train_keys = rng.split(key_train, len(config.m_values))
    for m_value, key_sample, key_tr in zip(config.m_values, m_keys, train_keys):
        if m_value > len(pool):
            raise ConfigError(f"pool of {len(pool)} smaller than M={m_value}")
        out = _train_dir(config, seed, m_value)
        os.makedirs(out, exist_ok=True)
        idx = rng.generator(key_sample).choice(len(pool), size=m_value,
                                               replace=False)
        datasets = [pool[i] for i in idx]
        key_ens, key_ours, key_mrr = rng.split(key_tr, 3)
        if method in ("ours", "ensemble-only"):
            ensemble = lr.train_ensemble(datasets, key_ens,
                                         config.ensemble_hyper(), config.threads)
            for j, params in enumerate(ensemble):
                lr.save_features(params, os.path.join(out, f"member_{j:03d}.json"),
                                 {"seed": seed, "M": m_value, "index": j})
        if method == "ours":
            result = lr.meta_train_ours(ensemble, config.system, key_ours,
                                        config.meta_hyper(), config.threads)
            meta = {"seed": seed, "step": result.best_step,
                    "valid_loss": result.best_valid}
            _write_json(os.path.join(out, "theta_ours.json"),
                        result.theta.to_dict(meta))
            _write_curve(os.path.join(out, "curve_ours.csv"), result.curve,
                         ["step", "train_loss", "valid_loss"])
        if method == "mrr":
            phi, curve = lr.meta_train_mrr(datasets, key_mrr, config.mrr_hyper())
            best = min(curve, key=lambda row: row[2])
            lr.save_features(phi, os.path.join(out, "phi_mrr.json"),
                             {"seed": seed, "step": best[0], "valid_loss": best[2]})
            _write_curve(os.path.join(out, "curve_mrr.csv"), curve,
                         ["step", "train_loss", "valid_loss"])
        print(f"seed {seed} M={m_value}: {method} checkpoints in {out}")
    return 0


def cmd_evaluate(config, seed):
    """Evaluate every configured cell from stored checkpoints."""
    cells = config.cells if config.cells else ev.DEFAULT_CELLS[config.system]
    root = rng.root_key(seed)
    _, key_test, _, _ = rng.split(root, 4)
    test_set = ev.make_test_set(config.system, key_test, config.eval_n_test,
                                config.eval_duration, config.eval_waypoints,
                                dyn.WindDistribution(**config.test_wind))
    reports, missing = [], []
    for m_value in config.m_values:
        out = _train_dir(config, seed, m_value)
        artifacts = {}
        theta_path = os.path.join(out, "theta_ours.json")
        if os.path.exists(theta_path):
            artifacts["theta_ours"] = lr.load_checkpoint(theta_path)
        phi_path = os.path.join(out, "phi_mrr.json")
        if os.path.exists(phi_path):
            artifacts["phi_mrr"] = lr.load_features(phi_path)
        for cell in cells:
            lacking = ev.cell_needs(cell) - set(artifacts)
            if lacking:
                missing.append((cell["name"], m_value, sorted(lacking)))
                continue
            reports.append(ev.evaluate_configuration(
                cell, test_set, config.system, artifacts, config.eval_duration,
                config.dt, dyn.DragCoeffs(*config.drag), seed, m_value,
                config.threads))
    if missing:
        for name, m_value, lacking in missing:
            print(f"missing checkpoint for cell {name!r} at M={m_value}: "
                  f"{lacking}", file=sys.stderr)
        raise ConfigError("missing checkpoints; run train first")
    os.makedirs(config.out_dir, exist_ok=True)
    ev.write_report_files(reports, [], os.path.join(config.out_dir,
                                                    f"seed{seed}"))
    print(f"wrote evaluation reports for seed {seed}")
    return 0


def cmd_trace(config, seed, checkpoint, scenario, wind_kind, wind_peak):
    """Single-rollout trace CSV on a named scenario."""
    system = config.system
    if scenario == "loop":
        target = tg.loop_target(system, radius=2.0, period=10.0)
    elif scenario == "double-loop":
        target = tg.loop_target(system, radius=2.0, period=10.0, loops=2)
    else:
        raise ConfigError(f"unknown scenario {scenario!r}")
    if wind_kind == "constant":
        wind = wind_peak
    else:
        wind = dyn.WindProfile("ramp_hold", wind_peak,
                               t_rise=0.5 * target.duration)
    if checkpoint:
        theta = lr.load_checkpoint(checkpoint)
        if theta.system != system:
            raise ConfigError(f"checkpoint is for {theta.system}, not {system}")
        controller = sim.build_controller(theta)
    else:
        controller = lr.nominal_controller(system)
    plant = sim.TruePlant(system, dyn.DragCoeffs(*config.drag), wind)
    result = sim.rollout(plant, controller, target, target.duration, config.dt,
                         record_vbar=(system == dyn.PVTOL))
    os.makedirs(config.out_dir, exist_ok=True)
    path = os.path.join(config.out_dir, f"trace_{system}_{scenario}.csv")
    _atomic_write(path, lambda p: result.to_csv(p, target))
    print(f"wrote {path}")
    return 0


def cmd_full_experiment(config):
    reports, failures = ev.run_experiment(config, config.out_dir,
                                          progress=lambda m: print(m, flush=True))
    print(f"{len(reports)} cells evaluated, {len(failures)} failures; "
          f"reports in {config.out_dir}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="metarotor",
        description="Meta-learned adaptive control for planar rotorcraft")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--system", choices=[dyn.PFAR, dyn.PVTOL])
        p.add_argument("--out", help="output directory")
        p.add_argument("--threads", type=int)
        p.add_argument("--desk", action="store_true",
                       help="use the reduced desk-scale defaults")

    p = sub.add_parser("generate-pool", help="collect the trajectory pool")
    common(p)
    p = sub.add_parser("train", help="train checkpoints from the pool")
    common(p)
    p.add_argument("--method", choices=["ours", "mrr", "ensemble-only"],
                   default="ours")
    p = sub.add_parser("evaluate", help="evaluate configured cells")
    common(p)
    p = sub.add_parser("trace", help="trace one rollout to CSV")
    common(p)
    p.add_argument("--checkpoint", help="meta-parameter checkpoint JSON")
    p.add_argument("--scenario", choices=["loop", "double-loop"], default="loop")
    p.add_argument("--wind", choices=["constant", "ramp"], default="constant")
    p.add_argument("--wind-peak", type=float, default=6.5)
    p = sub.add_parser("full-experiment", help="run the whole pipeline")
    common(p)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        config = _load_config(args)
        if args.command == "generate-pool":
            return cmd_generate_pool(config, args.seed)
        if args.command == "train":
            return cmd_train(config, args.seed, args.method)
        if args.command == "evaluate":
            return cmd_evaluate(config, args.seed)
        if args.command == "trace":
            return cmd_trace(config, args.seed, args.checkpoint, args.scenario,
                             args.wind, args.wind_peak)
        if args.command == "full-experiment":
            return cmd_full_experiment(config)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except (sim.RolloutDiverged, ctrl.ThrustSingularityError, NumericError,
            lr.TrainingError, np.linalg.LinAlgError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"io failure: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
