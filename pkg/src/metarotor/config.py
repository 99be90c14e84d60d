"""Experiment configuration: JSON-backed, strict, fully defaulted.

Defaults encode the reference settings (gravity 9.81, drag (0.01, 1, 1),
dt 0.01 s, regularizers 1e-4/1e-3/1e-4, step counts 1000/500/5000, step size
1e-2, 10 meta-targets, 75/25 splits).  Unknown keys are rejected so typos fail
fast.  `desk_config` scales the pipeline down to something a workstation
finishes in minutes-to-hours while keeping every stage intact.
"""

import dataclasses
import json
from dataclasses import dataclass, field

from . import dynamics as dyn
from . import learning as lr


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


@dataclass
class ExperimentConfig:
    system: str = "pfar"
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    m_values: list = field(default_factory=lambda: [2, 5, 10, 20, 30, 40, 50])
    gravity: float = 9.81
    dt: float = 0.01
    drag: list = field(default_factory=lambda: [0.01, 1.0, 1.0])
    train_wind: dict = field(default_factory=lambda: {
        "lower": 0.0, "upper": 6.0, "alpha": 5.0, "beta": 9.0})
    test_wind: dict = field(default_factory=lambda: {
        "lower": 0.0, "upper": 9.0, "alpha": 5.0, "beta": 7.0})

    pool_size: int = 500
    pool_duration: float = 30.0
    pool_waypoints: int = 6

    ensemble_epochs: int = 1000
    ensemble_lr: float = 1e-2
    ensemble_batch_frac: float = 0.25
    mu_ensem: float = 1e-4
    ensemble_split: float = 0.75

    meta_targets: int = 10
    meta_target_duration: float = 30.0
    meta_target_waypoints: int = 6
    meta_horizon: float = None
    meta_steps: int = 500
    meta_lr: float = 1e-2
    mu_ctrl: float = 1e-3
    mu_meta: float = 1e-4
    meta_split: float = 0.75

    mrr_steps: int = 5000
    mrr_lr: float = 1e-2
    mrr_subset_frac: float = 0.25
    mu_ridge: float = 1e-6
    mrr_split: float = 0.75

    eval_n_test: int = 200
    eval_duration: float = 10.0
    eval_waypoints: int = 4

    cells: list = None
    threads: int = 1
    out_dir: str = "results"

    def __post_init__(self):
        if self.system not in (dyn.PFAR, dyn.PVTOL):
            raise ConfigError(f"unknown system {self.system!r}")
        if self.gravity != 9.81:
            raise ConfigError("gravity is a physical constant of this model (9.81)")
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        if len(self.drag) != 3 or min(self.drag) < 0:
            raise ConfigError("drag must be three non-negative coefficients")
        for name in ("train_wind", "test_wind"):
            try:
                dyn.WindDistribution(**getattr(self, name))
            except (TypeError, ValueError) as err:
                raise ConfigError(f"bad {name}: {err}") from err

    def ensemble_hyper(self):
        return lr.EnsembleHyper(self.ensemble_epochs, self.ensemble_lr,
                                self.ensemble_batch_frac, self.mu_ensem,
                                self.ensemble_split)

    def meta_hyper(self):
        return lr.MetaHyper(self.meta_targets, self.meta_target_duration,
                            self.meta_target_waypoints, self.meta_horizon,
                            self.meta_steps, self.meta_lr, self.mu_ctrl,
                            self.mu_meta, self.meta_split, self.dt)

    def mrr_hyper(self):
        return lr.MrrHyper(self.mrr_steps, self.mrr_lr, self.mrr_subset_frac,
                           self.mu_ridge, self.mu_meta, self.mrr_split)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as err:
            raise ConfigError(str(err)) from err

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


def default_config(system="pfar"):
    return ExperimentConfig(system=system)


def desk_config(system="pfar"):
    """Reduced-scale configuration for workstation runs of the full pipeline."""
    common = dict(
        system=system,
        seeds=[0, 1, 2],
        pool_size=8,
        eval_n_test=20,
        eval_duration=10.0,
        eval_waypoints=4,
        meta_targets=10,
        meta_target_duration=10.0,
        meta_target_waypoints=4,
        mrr_steps=5000,
    )
    if system == dyn.PFAR:
        return ExperimentConfig(m_values=[2, 5], meta_horizon=5.0,
                                meta_steps=75, **common)
    return ExperimentConfig(m_values=[5], meta_horizon=2.5,
                            meta_steps=50, **common)
