"""Trajectory loss, unrolled gradients and the training loop.

For one trajectory the coarse solver is unrolled for ``N`` steps,

    u^_{t+1} = u^_t + S_t dt + Q[S_t]            (additive mode)

and the loss is ``c_n / N * sum_{t=1..N} ||u^_t - u_t||^2``. Because every
correction enters all later states with an identity Jacobian, the gradient with
respect to the correction at step ``t`` is the reverse cumulative sum of the
state residual gradients. With teacher forcing (the default) ``S_t`` is computed
from the ground-truth state ``u_t``; otherwise it is computed from ``u^_t`` and
treated as a constant (no differentiation through ``f``).
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import TrajectoryDataset, inject_noise
from .errors import ConfigurationError, ContractViolation
from .nn import AttentionModule, GradientSet, init_module, load_module, save_module
from .solvers import (
    StepMode,
    Trajectory,
    as_mode,
    as_scheme,
    combine,
    integration_term,
    module_input,
    rollout_batch,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 400
    batch_size: int = 32
    loss_scale: float | None = None
    teacher_forcing: bool = True
    noise_sigma: float = 0.0
    noise_kind: str = "constant"
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: str = "constant"
    seed: int = 0
    mode: str = "additive"

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigurationError("train.lr must be non-negative")
        if self.epochs < 1:
            raise ConfigurationError("train.epochs must be at least 1")
        if self.batch_size < 1:
            raise ConfigurationError("train.batch_size must be at least 1")
        if self.loss_scale is not None and not self.loss_scale > 0:
            raise ConfigurationError("train.loss_scale must be positive")
        if self.noise_sigma < 0:
            raise ConfigurationError("train.noise_sigma must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError("train.optimizer must be 'adam' or 'sgd'")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigurationError("train.schedule must be 'constant' or 'cosine'")
        if as_mode(self.mode) is StepMode.CLASSIC:
            raise ConfigurationError("train.mode must be a learned step mode")

    def learning_rate(self, epoch: int) -> float:
        if self.schedule == "cosine":
            return self.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / self.epochs))
        return self.lr


@dataclass
class ModelConfig:
    d1: int = 1024
    h: int = 2
    learnable_activation: bool = True
    skip: bool = False
    input_form: str = "s"


def build_module(d: int, model: ModelConfig, mode, seed: int) -> AttentionModule:
    """Fresh module for a step mode; the multiplicative variant starts at Q = 1."""
    multiplicative = as_mode(mode) is StepMode.MULTIPLICATIVE
    return init_module(
        d, model.d1, model.h, seed,
        offset=1.0 if multiplicative else 0.0,
        offset_learnable=multiplicative,
        learnable_activation=model.learnable_activation,
        skip=model.skip,
        input_form=model.input_form,
    )


def compute_loss(u_hat, u, c_n: float = 1.0) -> float:
    """``c_n / N * sum_{t=1..N} ||u_hat_t - u_t||^2`` (row 0 is excluded).

    Accepts :class:`Trajectory` objects or arrays of shape ``(N+1, d)``; for a
    stack ``(M, N+1, d)`` the mean over trajectories is returned.
    """
    a = u_hat.states if isinstance(u_hat, Trajectory) else np.asarray(u_hat, dtype=np.float64)
    b = u.states if isinstance(u, Trajectory) else np.asarray(u, dtype=np.float64)
    if a.shape != b.shape or a.ndim < 2 or a.shape[-2] < 2:
        raise ContractViolation(f"trajectory shapes differ or are too short: {a.shape} vs {b.shape}")
    n = a.shape[-2] - 1
    diff = a[..., 1:, :] - b[..., 1:, :]
    with np.errstate(over="ignore"):
        per_traj = c_n * np.sum(diff * diff, axis=(-2, -1)) / n
    return float(np.mean(per_traj))


def default_loss_scale(ds: TrajectoryDataset) -> float:
    """``1 / mean(u^2)`` over the training states, clamped to ``[1, 1e6]``."""
    if ds.n_traj == 0:
        return 1.0
    mean_sq = float(np.mean(ds.trajectories**2))
    return float(np.clip(1.0 / mean_sq, 1.0, 1e6)) if mean_sq > 0 else 1e6


# ---------------------------------------------------------------------------
# unrolled loss and gradient
# ---------------------------------------------------------------------------

@dataclass
class UnrollResult:
    loss: float
    grads: GradientSet | None
    u_hat: np.ndarray
    mean_correction: float
    s_hat: np.ndarray
    inputs: np.ndarray


def unroll(module: AttentionModule, batch, scheme, system, dt: float, mode="additive", c_n: float = 1.0,
           teacher_forcing: bool = True, sigma: float = 0.0, noise_kind: str = "constant", rng=None,
           need_grad: bool = True) -> UnrollResult:
    """Unroll the corrected solver over a batch ``(B, N+1, d)`` of ground-truth trajectories."""
    mode = as_mode(mode)
    scheme = as_scheme(scheme)
    u = np.asarray(batch, dtype=np.float64)
    b, rows, d = u.shape
    n = rows - 1
    u_hat = np.empty_like(u)
    u_hat[:, 0] = u[:, 0]

    with np.errstate(over="ignore", invalid="ignore"):
        if teacher_forcing:
            s_hat = integration_term(scheme, system, u[:, :-1], dt, singular="nan")
            inputs = module_input(mode, module, u[:, :-1], s_hat, dt)
            q, cache = module.forward(inputs.reshape(-1, d), keep_cache=need_grad)
            q = q.reshape(b, n, d)
            for t in range(n):
                cur = inject_noise(u_hat[:, t], sigma, noise_kind, rng)
                u_hat[:, t + 1] = combine(mode, cur, s_hat[:, t], dt, q[:, t])
        else:
            s_hat = np.empty((b, n, d))
            inputs = np.empty((b, n, d))
            q = np.empty((b, n, d))
            for t in range(n):
                cur = inject_noise(u_hat[:, t], sigma, noise_kind, rng)
                s_hat[:, t] = integration_term(scheme, system, cur, dt, singular="nan")
                inputs[:, t] = module_input(mode, module, cur, s_hat[:, t], dt)
                q[:, t] = module(inputs[:, t])
                u_hat[:, t + 1] = combine(mode, cur, s_hat[:, t], dt, q[:, t])
            cache = module.forward(inputs.reshape(-1, d))[1] if need_grad else None

        resid = u_hat[:, 1:] - u[:, 1:]
        loss = float(np.mean(c_n * np.sum(resid * resid, axis=(1, 2)) / n))
        grads = None
        if need_grad:
            d_state = (2.0 * c_n / (n * b)) * resid
            # dL/d(increment_t) = sum of state gradients at t+1..N
            g_inc = np.cumsum(d_state[:, ::-1], axis=1)[:, ::-1]
            if mode in (StepMode.MULTIPLICATIVE, StepMode.NORMALIZED):
                g_inc = g_inc * (s_hat * dt)
            grads = module.backward(g_inc.reshape(-1, d), cache)
    return UnrollResult(loss, grads, u_hat, float(np.mean(q)), s_hat, inputs)


def frozen_loss(module: AttentionModule, batch, frozen: UnrollResult, dt: float, mode="additive",
                c_n: float = 1.0, sigma: float = 0.0, noise_kind: str = "constant", rng=None) -> float:
    """Loss with the integration terms and module inputs of ``frozen`` held fixed.

    Its exact gradient is the truncated gradient :func:`unroll` returns without
    teacher forcing, which makes it the finite-difference reference there.
    """
    mode = as_mode(mode)
    u = np.asarray(batch, dtype=np.float64)
    b, rows, d = u.shape
    q = module(frozen.inputs.reshape(-1, d)).reshape(b, rows - 1, d)
    u_hat = u[:, 0].copy()
    total = np.zeros(b)
    for t in range(rows - 1):
        cur = inject_noise(u_hat, sigma, noise_kind, rng)
        u_hat = combine(mode, cur, frozen.s_hat[:, t], dt, q[:, t])
        total += np.sum((u_hat - u[:, t + 1]) ** 2, axis=-1)
    return float(np.mean(c_n * total / (rows - 1)))


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

class SGD:
    def __init__(self, lr: float):
        self.lr = lr
        self.t = 0

    def step(self, params, grads) -> None:
        self.t += 1
        for p, g in zip(params, grads):
            p -= self.lr * g

    def state_dict(self) -> dict:
        return {"t": np.array(self.t)}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params, grads) -> None:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        state = {"t": np.array(self.t)}
        for i, (m, v) in enumerate(zip(self.m or [], self.v or [])):
            state[f"m{i}"] = m
            state[f"v{i}"] = v
        return state

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        count = sum(1 for key in state if key.startswith("m"))
        if count:
            self.m = [np.array(state[f"m{i}"]) for i in range(count)]
            self.v = [np.array(state[f"v{i}"]) for i in range(count)]


def make_optimizer(config: TrainConfig):
    if config.optimizer == "sgd":
        return SGD(config.lr)
    return Adam(config.lr, config.beta1, config.beta2, config.eps)


def update_parameters(module: AttentionModule, grads: GradientSet, optimizer) -> bool:
    """Apply one optimizer step in place; non-finite gradients skip the update.

    Returns ``True`` when the parameters were updated.
    """
    if not grads.is_finite():
        log.warning("non-finite gradient at optimizer step %d; update skipped", optimizer.t + 1)
        return False
    optimizer.step(module.parameters(), grads.arrays(module))
    return True


# ---------------------------------------------------------------------------
# epochs
# ---------------------------------------------------------------------------

@dataclass
class EpochStats:
    loss: float
    mean_correction: float
    skipped_updates: int


def run_epoch(module: AttentionModule, dataset: TrajectoryDataset, scheme, config: TrainConfig,
              optimizer, epoch: int = 0, c_n: float | None = None) -> EpochStats:
    if dataset.n_traj == 0:
        raise ConfigurationError("training set is empty")
    if dataset.split != "train":
        raise ConfigurationError(f"expected the train split, got {dataset.split!r}")
    c_n = default_loss_scale(dataset) if c_n is None else c_n
    system = dataset.make_system()
    rng = np.random.default_rng([config.seed, epoch])
    order = rng.permutation(dataset.n_traj)
    optimizer.lr = config.learning_rate(epoch)
    total = 0.0
    corr = 0.0
    skipped = 0
    for start in range(0, dataset.n_traj, config.batch_size):
        idx = order[start : start + config.batch_size]
        res = unroll(
            module, dataset.trajectories[idx], scheme, system, dataset.dt_coarse, config.mode, c_n,
            config.teacher_forcing, config.noise_sigma, config.noise_kind, rng,
        )
        total += res.loss * idx.size
        corr += res.mean_correction * idx.size
        if not update_parameters(module, res.grads, optimizer):
            skipped += 1
    return EpochStats(total / dataset.n_traj, corr / dataset.n_traj, skipped)


def train_epoch(module: AttentionModule, dataset: TrajectoryDataset, scheme, config: TrainConfig,
                optimizer=None, epoch: int = 0, c_n: float | None = None):
    """One pass over the training set; returns ``(module, mean batch loss)``."""
    optimizer = make_optimizer(config) if optimizer is None else optimizer
    stats = run_epoch(module, dataset, scheme, config, optimizer, epoch, c_n)
    return module, stats.loss


def rollout_dataset(module, dataset: TrajectoryDataset, scheme, mode, dt: float | None = None):
    """Full (never teacher-forced) rollouts from every initial condition of ``dataset``."""
    system = dataset.make_system()
    mode = as_mode(mode)
    dt = dataset.dt_coarse if dt is None else dt
    n = int(round(dataset.T / dt))
    return rollout_batch(dataset.trajectories[:, 0], scheme, system, dt, n, mode,
                         module if mode.learned else None)


def rollout_loss(module, dataset: TrajectoryDataset, scheme, mode, c_n: float = 1.0) -> float:
    states, _, _ = rollout_dataset(module, dataset, scheme, mode)
    return compute_loss(states, dataset.trajectories, c_n)


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    mean_attention: list = field(default_factory=list)
    skipped_updates: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    baseline_val_loss: float = math.nan
    loss_scale: float = 1.0
    module: AttentionModule | None = None
    final_module: AttentionModule | None = None
    checkpoint: str | None = None

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    def curves(self) -> list:
        return [
            {"epoch": i, "train_loss": tr, "val_loss": va, "seconds": s}
            for i, (tr, va, s) in enumerate(zip(self.train_loss, self.val_loss, self.seconds))
        ]


CURVE_FIELDS = ("epoch", "train_loss", "val_loss", "seconds")


def write_curves(report: TrainReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CURVE_FIELDS)
        writer.writeheader()
        for row in report.curves():
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def _save_state(out_dir, report: TrainReport, module, optimizer, config, model) -> None:
    save_module(os.path.join(out_dir, "last.attw"), module)
    np.savez(os.path.join(out_dir, "optimizer.npz"), **optimizer.state_dict())
    state = {
        "epochs_done": report.epochs,
        "best_epoch": report.best_epoch,
        "best_val_loss": report.best_val_loss,
        "baseline_val_loss": report.baseline_val_loss,
        "loss_scale": report.loss_scale,
        "train_loss": report.train_loss,
        "val_loss": report.val_loss,
        "seconds": report.seconds,
        "mean_attention": report.mean_attention,
        "skipped_updates": report.skipped_updates,
        "train_config": asdict(config),
        "model_config": asdict(model),
    }
    tmp = os.path.join(out_dir, "train_state.json.tmp")
    with open(tmp, "w") as fh:
        json.dump(state, fh, indent=2)
    os.replace(tmp, os.path.join(out_dir, "train_state.json"))


def fit(train_ds: TrajectoryDataset, val_ds: TrajectoryDataset, scheme, config: TrainConfig,
        model: ModelConfig | None = None, out_dir=None, module: AttentionModule | None = None,
        resume: bool = False, epochs: int | None = None) -> TrainReport:
    """Train for ``config.epochs`` epochs, keeping the best-validation module.

    Validation always uses full rollouts. With ``out_dir`` the best module goes
    to ``best.attw``, the latest to ``last.attw`` and the curves to
    ``curves.csv``; ``resume=True`` restarts from the saved state and continues
    the epoch counter up to ``epochs`` (default ``config.epochs``).
    """
    model = ModelConfig() if model is None else model
    scheme = as_scheme(scheme)
    mode = as_mode(config.mode)
    if val_ds.n_traj == 0:
        raise ConfigurationError("validation set is empty")
    target_epochs = config.epochs if epochs is None else epochs
    c_n = config.loss_scale if config.loss_scale is not None else default_loss_scale(train_ds)
    report = TrainReport(loss_scale=c_n)
    optimizer = make_optimizer(config)

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    state_file = os.path.join(out_dir, "train_state.json") if out_dir else None
    if resume and state_file and os.path.exists(state_file):
        with open(state_file) as fh:
            state = json.load(fh)
        module = load_module(os.path.join(out_dir, "last.attw"))
        with np.load(os.path.join(out_dir, "optimizer.npz")) as opt_state:
            optimizer.load_state_dict(dict(opt_state))
        for key in ("train_loss", "val_loss", "seconds", "mean_attention", "skipped_updates"):
            setattr(report, key, list(state[key]))
        report.best_epoch = state["best_epoch"]
        report.best_val_loss = state["best_val_loss"]
        report.baseline_val_loss = state["baseline_val_loss"]
        report.loss_scale = c_n = state["loss_scale"]
        report.module = load_module(os.path.join(out_dir, "best.attw"))
    else:
        if module is None:
            module = build_module(train_ds.dim, model, mode, config.seed)
        report.baseline_val_loss = rollout_loss(None, val_ds, scheme, StepMode.CLASSIC, c_n)

    for epoch in range(report.epochs, target_epochs):
        start = time.perf_counter()
        stats = run_epoch(module, train_ds, scheme, config, optimizer, epoch, c_n)
        val = rollout_loss(module, val_ds, scheme, mode, c_n)
        report.train_loss.append(stats.loss)
        report.val_loss.append(val)
        report.mean_attention.append(stats.mean_correction)
        report.skipped_updates.append(stats.skipped_updates)
        report.seconds.append(time.perf_counter() - start)
        if val < report.best_val_loss or report.module is None:
            report.best_val_loss = val
            report.best_epoch = epoch
            report.module = module.copy()
            if out_dir:
                save_module(os.path.join(out_dir, "best.attw"), report.module)
        if out_dir:
            _save_state(out_dir, report, module, optimizer, config, model)
        log.info("epoch %d train %.4e val %.4e", epoch, stats.loss, val)

    report.final_module = module
    if out_dir:
        report.checkpoint = os.path.join(out_dir, "best.attw")
        write_curves(report, os.path.join(out_dir, "curves.csv"))
    return report
