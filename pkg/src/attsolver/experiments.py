"""Experiment drivers: evaluation, sweeps, ablations, robustness probes and timing.

Every driver takes a :class:`~attsolver.config.RunConfig` and returns an
:class:`ExperimentReport`. Aggregates are medians over seeds with min/max and
the sample count. Wall-clock fields are kept apart from the deterministic
metrics so result files can be compared byte for byte.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig, get_split
from .data import TrajectoryDataset, prefix_indices
from .errors import ContractViolation
from .nn import AttentionModule, init_module
from .solvers import (
    StepMode,
    as_mode,
    as_scheme,
    combine,
    integration_term,
    rollout_batch,
    step,
)
from .systems import OdeSystem
from .training import build_module, compute_loss, fit, unroll

TIMING_KEYS = ("seconds", "steps_per_second", "relative_speed", "speedup", "wall_ratio")


@dataclass
class ExperimentReport:
    experiment: str
    seeds: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    runs: list = field(default_factory=list)
    timing: list = field(default_factory=list)
    series: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def add(self, **row) -> None:
        """Record a run; wall-clock keys go to the separate timing table."""
        timing = {k: row.pop(k) for k in list(row) if k in TIMING_KEYS}
        self.runs.append(row)
        if timing:
            ident = {k: v for k, v in row.items() if isinstance(v, (str, int)) and not isinstance(v, bool)}
            self.timing.append({**ident, **timing})

    def values(self, metric: str, **where) -> list:
        return [r[metric] for r in self.runs if all(r.get(k) == v for k, v in where.items())]

    def aggregate(self, metric: str, by: str) -> dict:
        """Median, min, max, count and seed list of ``metric`` per value of ``by``."""
        out = {}
        for key in dict.fromkeys(r[by] for r in self.runs):
            rows = [r for r in self.runs if r[by] == key]
            vals = np.array([r[metric] for r in rows], dtype=np.float64)
            out[key] = {
                "median": float(np.median(vals)),
                "min": float(np.min(vals)),
                "max": float(np.max(vals)),
                "n": int(vals.size),
                "seeds": [r.get("seed") for r in rows],
            }
        return out

    def median(self, metric: str, **where) -> float:
        return float(np.median(self.values(metric, **where)))

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "seeds": self.seeds,
            "config": self.config,
            "runs": self.runs,
            "series": self.series,
            "notes": self.notes,
        }

    def write(self, out_dir) -> list:
        """Write ``report.json``, ``runs.csv`` and (if any) ``timing.csv``; returns the paths."""
        os.makedirs(out_dir, exist_ok=True)
        paths = [os.path.join(out_dir, "report.json"), os.path.join(out_dir, "runs.csv")]
        with open(paths[0], "w") as fh:
            json.dump(_jsonable(self.to_dict()), fh, indent=2, sort_keys=True)
            fh.write("\n")
        _write_csv(paths[1], self.runs)
        if self.timing:
            paths.append(os.path.join(out_dir, "timing.csv"))
            _write_csv(paths[2], self.timing)
        return paths


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _write_csv(path, rows) -> None:
    header = list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=header)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _map(fn, tasks, jobs: int = 1) -> list:
    """Run independent tasks, in order; a process pool is used when ``jobs > 1``."""
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, *zip(*tasks)))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class Evaluation:
    mse: float
    explosion_rate: float
    n_exploded: int
    n_nonfinite: int
    n: int


def _truncate(ds: TrajectoryDataset, T: float | None) -> np.ndarray:
    if T is None:
        return ds.trajectories
    n = int(round(T / ds.dt_coarse))
    if n < 1 or n > ds.n_steps or not math.isclose(n * ds.dt_coarse, T, rel_tol=1e-9):
        raise ContractViolation(f"test trajectories do not reach T={T} on the coarse grid")
    return ds.trajectories[:, : n + 1]


def evaluate(module, scheme, mode, test_set: TrajectoryDataset, T: float | None = None) -> Evaluation:
    """Full-rollout test metrics; exploded rollouts contribute their frozen states."""
    truth = _truncate(test_set, T)
    mode = as_mode(mode)
    states, exploded, _ = rollout_batch(
        truth[:, 0], scheme, test_set.make_system(), test_set.dt_coarse, truth.shape[1] - 1,
        mode, module if mode.learned else None,
    )
    mse = compute_loss(states, truth, 1.0)
    return Evaluation(mse, float(np.mean(exploded)), int(np.sum(exploded)),
                      int(np.sum(~np.isfinite(states))), truth.shape[0])


def evaluate_mse(module, scheme, mode, test_set: TrajectoryDataset, T: float | None = None) -> float:
    """Mean over test trajectories of ``(1/N) sum_t ||u^_t - u_t||^2``."""
    return evaluate(module, scheme, mode, test_set, T).mse


def baseline_mse(scheme, test_set: TrajectoryDataset, T: float | None = None) -> float:
    return evaluate_mse(None, scheme, StepMode.CLASSIC, test_set, T)


def mean_attention(module: AttentionModule, dataset: TrajectoryDataset, scheme, mode) -> float:
    """Mean of the module output over teacher-forced inputs from ``dataset``."""
    res = unroll(module, dataset.trajectories, scheme, dataset.make_system(), dataset.dt_coarse,
                 mode, need_grad=False)
    return res.mean_correction


# ---------------------------------------------------------------------------
# training arms
# ---------------------------------------------------------------------------

def _train_and_eval(cfg: RunConfig, scheme, mode, seed: int, train_idx=None, model=None,
                    sigma: float | None = None):
    train = get_split(cfg, "train")
    if train_idx is not None:
        train = train.subset(train_idx)
    val = get_split(cfg, "val")
    test = get_split(cfg, "test")
    overrides = {"seed": seed, "mode": as_mode(mode).value}
    if sigma is not None:
        overrides["noise_sigma"] = sigma
    tc = cfg.train_config(scheme, **overrides)
    model = cfg.model if model is None else model
    report = fit(train, val, scheme, tc, model)
    ev = evaluate(report.module, scheme, mode, test)
    return report, ev


def data_reduction_sweep(cfg: RunConfig, scheme=None, fractions=None, seeds=None) -> ExperimentReport:
    """Train one module per (fraction, seed) on nested prefix subsets; report test MSE."""
    scheme = as_scheme(scheme or cfg.scheme)
    fractions = list(cfg.experiment.fractions if fractions is None else fractions)
    seeds = list(cfg.seeds if seeds is None else seeds)
    n = get_split(cfg, "train").n_traj
    subsets = {f: prefix_indices(n, f, cfg.data.seed) for f in fractions}
    ordered = sorted(fractions, reverse=True)
    for big, small in zip(ordered, ordered[1:]):
        if not set(subsets[small]) <= set(subsets[big]):
            raise ContractViolation(f"subset for fraction {small} is not nested in {big}")
    report = ExperimentReport("data_reduction", seeds, cfg.to_dict())
    report.notes.append("subsets are prefixes of one fixed shuffle; nesting verified before training")
    base = baseline_mse(scheme, get_split(cfg, "test"))
    tasks = [(cfg, scheme, cfg.train.mode, s, subsets[f]) for f in fractions for s in seeds]
    results = _map(_train_and_eval, tasks, cfg.jobs)
    for (f, s), (tr, ev) in zip([(f, s) for f in fractions for s in seeds], results):
        report.add(fraction=f, seed=s, n_train=int(subsets[f].size), scheme=scheme.value, mse=ev.mse,
                   baseline_mse=base, explosion_rate=ev.explosion_rate, best_epoch=tr.best_epoch,
                   seconds=float(sum(tr.seconds)))
    report.series["mse_by_fraction"] = report.aggregate("mse", "fraction")
    return report


def ablation_arms(cfg: RunConfig) -> list:
    """Depth arms, width arms and the skip x input-form factorial, deduplicated."""
    base = cfg.model
    arms = []

    def add(name, **kw):
        values = {"d1": base.d1, "h": base.h, "skip": base.skip, "input_form": base.input_form,
                  "learnable_activation": base.learnable_activation}
        values.update(kw)
        key = (values["d1"], values["h"], values["skip"], values["input_form"])
        if key not in [a[1] for a in arms]:
            arms.append((name, key, values))

    add("default")
    for h in cfg.experiment.depths:
        add(f"h={h}", h=int(h))
    for w in cfg.experiment.widths:
        add(f"d1={w}", d1=int(w))
    for skip in (False, True):
        for form in ("s", "s_dt"):
            add(f"skip={int(skip)},input={form}", skip=skip, input_form=form)
    return [(name, values) for name, _, values in arms]


def ablation_suite(cfg: RunConfig, scheme=None, seeds=None) -> ExperimentReport:
    from .training import ModelConfig

    scheme = as_scheme(scheme or cfg.scheme)
    seeds = list(cfg.seeds if seeds is None else seeds)
    arms = ablation_arms(cfg)
    report = ExperimentReport("ablation", seeds, cfg.to_dict())
    tasks = [(cfg, scheme, cfg.train.mode, s, None, ModelConfig(**values)) for _, values in arms for s in seeds]
    results = _map(_train_and_eval, tasks, cfg.jobs)
    system = cfg.make_system()
    test = get_split(cfg, "test")
    speeds = {}
    for name, values in arms:
        module = build_module(system.dim, ModelConfig(**values), cfg.train.mode, 0)
        speeds[name] = module_throughput(module, scheme, system, cfg.data.dt_coarse, test.trajectories[:, 0],
                                         cfg.experiment.bench_steps // 10 or 10, cfg.experiment.bench_repeats)
    labels = [(name, s) for name, _ in arms for s in seeds]
    for (name, s), (tr, ev) in zip(labels, results):
        values = dict(arms)[name]
        report.add(arm=name, seed=s, d1=values["d1"], h=values["h"], skip=int(values["skip"]),
                   input_form=values["input_form"], mse=ev.mse, explosion_rate=ev.explosion_rate,
                   steps_per_second=speeds[name], relative_speed=speeds[name] / speeds["default"])
    report.series["mse_by_arm"] = report.aggregate("mse", "arm")
    return report


MULTIPLICATIVE_ARMS = ("multiplicative", "normalized_multiplicative", "additive")


def multiplicative_study(cfg: RunConfig, scheme=None, seeds=None, modes=MULTIPLICATIVE_ARMS) -> ExperimentReport:
    """Multiplicative, normalised multiplicative and additive arms side by side."""
    scheme = as_scheme(scheme or cfg.scheme)
    seeds = list(cfg.seeds if seeds is None else seeds)
    modes = [as_mode(m) for m in modes]
    report = ExperimentReport("multiplicative", seeds, cfg.to_dict())
    tasks = [(cfg, scheme, m, s) for m in modes for s in seeds]
    results = _map(_train_and_eval, tasks, cfg.jobs)
    train = get_split(cfg, "train")
    for (m, s), (tr, ev) in zip([(m, s) for m in modes for s in seeds], results):
        att = mean_attention(tr.module, train, scheme, m)
        report.add(mode=m.value, seed=s, mse=ev.mse, final_train_loss=tr.train_loss[-1],
                   best_val_loss=tr.best_val_loss, mean_attention=att, explosion_rate=ev.explosion_rate)
        if m is StepMode.MULTIPLICATIVE:
            report.series[f"mean_attention_seed{s}"] = tr.mean_attention
    system = cfg.make_system()
    report.series["normalized_identity_error"] = normalized_identity_error(
        system, scheme, cfg.data.dt_coarse, train.trajectories[:, 0], seed=seeds[0])
    return report


def normalized_identity_error(system: OdeSystem, scheme, dt: float, states, module=None, seed: int = 0) -> float:
    """Max deviation between a normalised-multiplicative step and the additive step
    whose compensation is ``(S dt) * Q~``."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if module is None:
        module = init_module(system.dim, 16, 2, seed)
        rng = np.random.default_rng(seed)
        module.weights[-1][...] = rng.normal(0.0, 0.1, module.weights[-1].shape)
    s_hat = integration_term(scheme, system, states, dt)
    q = module(s_hat)
    normalized = step(states, scheme, system, dt, StepMode.NORMALIZED, module)
    additive = combine(StepMode.ADDITIVE, states, s_hat, dt, (s_hat * dt) * q)
    return float(np.max(np.abs(normalized - additive)))


def noise_attack(cfg: RunConfig, sigma: float | None = None, modes=None, fractions=None, seeds=None,
                 scheme=None) -> ExperimentReport:
    """Train with a per-step noise offset and report test MSE and explosion rate."""
    sigma = cfg.experiment.sigma if sigma is None else sigma
    if sigma < 0:
        raise ContractViolation("sigma must be non-negative")
    scheme = as_scheme(scheme or cfg.scheme)
    modes = [as_mode(m) for m in (cfg.experiment.attack_modes if modes is None else modes)]
    fractions = list(cfg.experiment.attack_fractions if fractions is None else fractions)
    seeds = list(cfg.seeds if seeds is None else seeds)
    n = get_split(cfg, "train").n_traj
    labels = [(m, f, s) for m in modes for f in fractions for s in seeds]
    tasks = [(cfg, scheme, m, s, prefix_indices(n, f, cfg.data.seed), None, sigma) for m, f, s in labels]
    results = _map(_train_and_eval, tasks, cfg.jobs)
    report = ExperimentReport("noise_attack", seeds, cfg.to_dict())
    report.notes.append(f"constant offset sigma={sigma!r} added to every state component at every training step")
    for (m, f, s), (tr, ev) in zip(labels, results):
        report.add(mode=m.value, fraction=f, seed=s, sigma=sigma, mse=ev.mse, explosion_rate=ev.explosion_rate,
                   n_exploded=ev.n_exploded, n_nonfinite=ev.n_nonfinite, final_train_loss=tr.train_loss[-1])
        report.series[f"train_loss_{m.value}_f{f}_seed{s}"] = tr.train_loss
    return report


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------

@dataclass
class PerturbationProbe:
    epsilon0: float
    epsilons: np.ndarray
    factors: np.ndarray
    exploded: bool = False

    @property
    def max_factor(self) -> float:
        return float(np.max(self.factors)) if self.factors.size else 0.0


def perturbation_probe(module, system: OdeSystem, u0, dt: float, n_steps: int, scheme="euler",
                       mode="classic", epsilon0: float = 1e-8, seed: int = 0) -> PerturbationProbe:
    """Roll out ``u0`` and ``u0 + epsilon0 * v`` (``v`` a random unit vector) side by side.

    ``epsilons[t]`` is the distance after ``t`` steps and ``factors[t]`` the ratio
    ``epsilons[t+1] / epsilons[t]`` (0 where the distance is already 0).
    """
    if epsilon0 < 0:
        raise ContractViolation("epsilon0 must be non-negative")
    u0 = np.asarray(u0, dtype=np.float64)
    v = np.random.default_rng(seed).normal(size=u0.shape)
    v /= np.linalg.norm(v)
    pair = np.stack([u0, u0 + epsilon0 * v])
    mode = as_mode(mode)
    states, exploded, _ = rollout_batch(pair, scheme, system, dt, n_steps, mode,
                                        module if mode.learned else None)
    eps = np.linalg.norm(states[1] - states[0], axis=-1)
    eps[0] = epsilon0
    factors = np.divide(eps[1:], eps[:-1], out=np.zeros(n_steps), where=eps[:-1] > 0)
    return PerturbationProbe(float(epsilon0), eps, factors, bool(np.any(exploded)))


def euler_operator_norm(matrix, dt: float) -> float:
    """``||I + dt A||_2`` for a linear system matrix ``A``."""
    a = np.asarray(matrix, dtype=np.float64)
    return float(np.linalg.norm(np.eye(a.shape[0]) + dt * a, 2))


def convergence_probe(module, test_set: TrajectoryDataset, scheme="euler", mode="additive",
                      delta: float | None = None) -> ExperimentReport:
    """End-time error at ``dt_c`` and ``dt_c / 2`` for the corrected and Classic solvers.

    Only the shape of the bound is examined (error falls with the step size
    and with the training loss); its constants are not computed.
    """
    mode = as_mode(mode)
    system = test_set.make_system()
    truth_end = test_set.trajectories[:, -1]
    report = ExperimentReport("convergence", [], {"scheme": as_scheme(scheme).value, "mode": mode.value,
                                                 "dt_coarse": test_set.dt_coarse, "T": test_set.T})
    report.notes.append("constants of the error bound need Lipschitz and curvature bounds; only its shape is checked")
    for divisor in (1, 2):
        dt = test_set.dt_coarse / divisor
        n = test_set.n_steps * divisor
        for label, m, mod in (("classic", StepMode.CLASSIC, None), (mode.value, mode, module)):
            if m.learned and mod is None:
                continue
            states, exploded, _ = rollout_batch(test_set.trajectories[:, 0], scheme, system, dt, n, m, mod)
            err = float(np.mean(np.linalg.norm(states[:, -1] - truth_end, axis=-1)))
            report.add(mode=label, dt=dt, error=err, explosion_rate=float(np.mean(exploded)))
    report.series["delta"] = delta
    return report


# ---------------------------------------------------------------------------
# timing
# ---------------------------------------------------------------------------

def _time(fn, repeats: int) -> float:
    fn()
    times = []
    for _ in range(max(1, repeats)):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return float(np.median(times))


def module_throughput(module, scheme, system: OdeSystem, dt: float, u0, n_steps: int = 100,
                      repeats: int = 3, mode="additive") -> float:
    """Coarse steps per second for a batch of initial conditions."""
    u0 = np.atleast_2d(u0)
    seconds = _time(lambda: rollout_batch(u0, scheme, system, dt, n_steps, mode, module), repeats)
    return n_steps / seconds


def speed_benchmark(cfg: RunConfig, scheme=None, mode=None, module=None, n_steps: int | None = None,
                    repeats: int | None = None) -> ExperimentReport:
    """Steps per second of Classic (fine and coarse) and the corrected solver over one horizon."""
    scheme = as_scheme(scheme or cfg.scheme)
    mode = as_mode(mode or cfg.train.mode)
    n_steps = cfg.experiment.bench_steps if n_steps is None else n_steps
    repeats = cfg.experiment.bench_repeats if repeats is None else repeats
    system = cfg.make_system()
    dt_c, dt_f = cfg.data.dt_coarse, cfg.data.dt_fine
    k = int(round(dt_c / dt_f))
    if module is None:
        module = build_module(system.dim, cfg.model, mode, 0)
    u0 = _probe_state(cfg)
    runs = [
        ("classic_fine", StepMode.CLASSIC, None, dt_f, n_steps * k),
        ("classic_coarse", StepMode.CLASSIC, None, dt_c, n_steps),
        (f"{mode.value}_coarse", mode, module, dt_c, n_steps),
    ]
    report = ExperimentReport("speed", [], cfg.to_dict())
    seconds = {}
    for label, m, mod, dt, steps in runs:
        sec = _time(lambda: rollout_batch(u0, scheme, system, dt, steps, m, mod), repeats)
        seconds[label] = sec
        report.add(run=label, dt=dt, steps=steps, horizon=dt * steps, seconds=sec, steps_per_second=steps / sec)
    report.series["stride"] = k
    report.timing.append({"run": "summary", "wall_ratio": seconds["classic_fine"] / seconds["classic_coarse"],
                          "speedup": seconds["classic_fine"] / seconds[f"{mode.value}_coarse"]})
    return report


def _probe_state(cfg: RunConfig) -> np.ndarray:
    from .data import default_sampler

    return default_sampler(cfg.make_system(), cfg.data.seed).draw(0)[None, :]
