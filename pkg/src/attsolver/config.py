"""Run configuration: benchmark presets, YAML loading and dotted overrides.

Every field has a default and unknown keys are rejected. A config file may
name a ``benchmark`` preset; its values are applied first, then the rest of
the file, then ``--set key.path=value`` overrides.
"""

from __future__ import annotations

import copy
import dataclasses
import os
import re
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import yaml

from .data import TrajectoryDataset, default_sampler, generate_dataset, read_dataset
from .errors import ConfigurationError
from .solvers import as_mode, as_scheme
from .systems import OdeSystem, make_system
from .training import ModelConfig, TrainConfig


@dataclass
class SystemConfig:
    name: str = "spring_mass"
    params: dict = field(default_factory=dict)


@dataclass
class DataConfig:
    dt_coarse: float = 0.2
    dt_fine: float = 1e-3
    dt_fine_eval: float = 1e-5
    T: float = 20.0
    n_train: int = 500
    n_val: int = 50
    n_test: int = 100
    seed: int = 0
    dir: str | None = None


@dataclass
class ExperimentConfig:
    fractions: list = field(default_factory=lambda: [0.5, 0.25, 0.1])
    depths: list = field(default_factory=lambda: [2, 3, 4])
    widths: list = field(default_factory=lambda: [512, 1024, 2048])
    sigma: float = 1e-5
    attack_modes: list = field(default_factory=lambda: ["additive", "neurvec"])
    attack_fractions: list = field(default_factory=lambda: [0.5, 0.25, 0.1])
    epsilon0: float = 1e-8
    probe_steps: int | None = None
    bench_steps: int = 1000
    bench_repeats: int = 5
    checkpoint: str | None = None


@dataclass
class RunConfig:
    benchmark: str = "spring_mass"
    system: SystemConfig = field(default_factory=SystemConfig)
    data: DataConfig = field(default_factory=DataConfig)
    scheme: str = "euler"
    lr_by_scheme: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    out: str = "runs"
    jobs: int = 1

    def make_system(self) -> OdeSystem:
        return make_system(self.system.name, dict(self.system.params))

    def train_config(self, scheme=None, **overrides) -> TrainConfig:
        """Training config with the per-scheme learning rate applied."""
        scheme = as_scheme(scheme or self.scheme)
        values = asdict(self.train)
        if scheme.value in self.lr_by_scheme:
            values["lr"] = float(self.lr_by_scheme[scheme.value])
        values.update(overrides)
        return TrainConfig(**values)

    def to_dict(self) -> dict:
        return asdict(self)


# Learning rates scale with the size of the residual each scheme leaves behind.
SPRING_MASS_LR = {"euler": 1e-3, "improved_euler": 3e-4, "rk3": 3e-5, "rk4": 1e-5}

PRESETS = {
    "spring_mass": {
        "system": {"name": "spring_mass", "params": {"n_masses": 2}},
        "data": {"dt_coarse": 0.2, "dt_fine": 1e-3, "dt_fine_eval": 1e-5, "T": 20.0,
                 "n_train": 500, "n_val": 50, "n_test": 100},
        "scheme": "euler",
        "lr_by_scheme": SPRING_MASS_LR,
    },
    "elastic_pendulum": {
        "system": {"name": "elastic_pendulum", "params": {}},
        "data": {"dt_coarse": 0.1, "dt_fine": 1e-3, "dt_fine_eval": 1e-5, "T": 50.0,
                 "n_train": 1000, "n_val": 50, "n_test": 100},
        "scheme": "rk4",
        "lr_by_scheme": {"euler": 1e-4, "improved_euler": 1e-5, "rk3": 1e-5, "rk4": 1e-5},
    },
    "klink": {
        "system": {"name": "klink", "params": {"K": 2}},
        "data": {"dt_coarse": 0.1, "dt_fine": 1e-3, "dt_fine_eval": 1e-5, "T": 10.0,
                 "n_train": 1000, "n_val": 50, "n_test": 100},
        "scheme": "rk4",
        "lr_by_scheme": {"euler": 1e-4, "improved_euler": 1e-5, "rk3": 1e-5, "rk4": 1e-5},
    },
}


def _build(cls, values: dict, where: str):
    """Instantiate a (nested) dataclass from a mapping, rejecting unknown keys."""
    if not isinstance(values, dict):
        raise ConfigurationError(f"{where or 'config'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        prefix = f"{where}." if where else ""
        raise ConfigurationError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for name, value in values.items():
        default = known[name].default_factory() if known[name].default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}" if where else name)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(f"bad value in {where or 'config'}: {exc}") from exc


def _merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict) and key not in ("params", "lr_by_scheme"):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e-4`` (no dot) as a float."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
    |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
    |\.[0-9_]+(?:[eE][-+][0-9]+)?
    |[-+]?\.(?:inf|Inf|INF)
    |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."),
)


def _parse_scalar(text: str):
    return yaml.load(text, Loader=_Loader)


def apply_override(values: dict, assignment: str) -> dict:
    """Apply one ``dotted.key=value`` override to a raw config mapping."""
    if "=" not in assignment:
        raise ConfigurationError(f"override {assignment!r} is not of the form key=value")
    path, raw = assignment.split("=", 1)
    keys = path.strip().split(".")
    node = values
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigurationError(f"override {path!r} descends into a non-mapping")
    node[keys[-1]] = _parse_scalar(raw)
    return values


def build_config(values: dict | None = None, overrides=()) -> RunConfig:
    """Preset, then ``values``, then overrides; validated into a :class:`RunConfig`."""
    values = copy.deepcopy(values or {})
    for assignment in overrides:
        apply_override(values, assignment)
    name = values.get("benchmark", RunConfig.benchmark)
    if name not in PRESETS:
        raise ConfigurationError(f"unknown benchmark {name!r}; choose from {', '.join(PRESETS)}")
    merged = _merge(PRESETS[name], values)
    merged["benchmark"] = name
    # an explicit learning rate wins over the preset's per-scheme table
    if "lr" in values.get("train", {}) and "lr_by_scheme" not in values:
        merged["lr_by_scheme"] = {}
    cfg = _build(RunConfig, merged, "")
    validate(cfg)
    return cfg


def load_config(path=None, overrides=()) -> RunConfig:
    values = {}
    if path is not None:
        with open(path) as fh:
            values = yaml.load(fh, Loader=_Loader) or {}
    return build_config(values, overrides)


def dump_config(cfg: RunConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)


def validate(cfg: RunConfig) -> None:
    try:
        as_scheme(cfg.scheme)
        as_mode(cfg.train.mode)
        for scheme in cfg.lr_by_scheme:
            as_scheme(scheme)
        cfg.make_system()
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from exc
    if not cfg.seeds:
        raise ConfigurationError("seeds must list at least one seed")
    if cfg.jobs < 1:
        raise ConfigurationError("jobs must be at least 1")
    if cfg.model.input_form not in ("s", "s_dt"):
        raise ConfigurationError("model.input_form must be 's' or 's_dt'")


# ---------------------------------------------------------------------------
# datasets for a config
# ---------------------------------------------------------------------------

_SPLIT_OFFSET = {"train": 0, "val": 1, "test": 2}
_CACHE: dict = {}


def split_spec(cfg: RunConfig, split: str) -> dict:
    d = cfg.data
    return {
        "system": cfg.system.name,
        "params": cfg.system.params,
        "n": {"train": d.n_train, "val": d.n_val, "test": d.n_test}[split],
        "dt_fine": d.dt_fine if split == "train" else d.dt_fine_eval,
        "dt_coarse": d.dt_coarse,
        "T": d.T,
        "seed": 3 * d.seed + _SPLIT_OFFSET[split],
        "split": split,
    }


def dataset_path(directory, split: str) -> str:
    return os.path.join(directory, f"{split}.atts")


def make_split(cfg: RunConfig, split: str) -> TrajectoryDataset:
    """Generate one split from scratch (deterministic in the config)."""
    spec = split_spec(cfg, split)
    system = cfg.make_system()
    sampler = default_sampler(system, spec["seed"])
    return generate_dataset(system, sampler, spec["n"], spec["dt_fine"], spec["dt_coarse"], spec["T"], split)


def get_split(cfg: RunConfig, split: str) -> TrajectoryDataset:
    """Read ``<data.dir>/<split>.atts`` when a data directory is set, else generate (memoised)."""
    if cfg.data.dir:
        path = dataset_path(cfg.data.dir, split)
        if not os.path.exists(path):
            raise ConfigurationError(f"dataset file {path} does not exist (key: data.dir)")
        return read_dataset(path)
    key = repr(sorted(split_spec(cfg, split).items()))
    if key not in _CACHE:
        _CACHE[key] = make_split(cfg, split)
    ds = _CACHE[key]
    return ds.subset(np.arange(ds.n_traj))
