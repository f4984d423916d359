"""Ground-truth trajectory generation, initial-condition sampling and dataset files.

Datasets are stored on the coarse grid: each trajectory is integrated with
classic RK4 at the fine step and every ``k = dt_coarse / dt_fine``-th state is
kept.

Binary layout (little endian)::

    b"ATTS" | u32 version | u32 d | u32 N+1 | u32 M | f64 dt_coarse | f64 dt_fine
    | u64 seed | u32 len + UTF-8 system id | M * (N+1) * d f64, row-major

A JSON sidecar (``<file>.json``) carries the split tag, system parameters and
generation metadata.
"""

from __future__ import annotations

import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagicError,
    ConfigurationError,
    ContractViolation,
    TruncatedFileError,
    VersionMismatchError,
)
from .solvers import Scheme, integration_term
from .systems import OdeSystem, check_state, make_system

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


@dataclass
class InitSampler:
    """Per-variable initial-condition distribution.

    ``specs`` holds one entry per state component: ``("uniform", lo, hi)`` or
    ``("constant", value)``.
    """

    specs: list
    seed: int = 0

    @property
    def dim(self) -> int:
        return len(self.specs)

    def draw(self, index: int, attempt: int = 0) -> np.ndarray:
        """Sample for trajectory ``index``; the stream depends only on (seed, index, attempt)."""
        rng = np.random.default_rng([self.seed, index, attempt])
        out = np.empty(self.dim)
        for i, spec in enumerate(self.specs):
            if spec[0] == "uniform":
                out[i] = rng.uniform(spec[1], spec[2])
            elif spec[0] == "constant":
                out[i] = spec[1]
            else:
                raise ConfigurationError(f"unknown sampler kind {spec[0]!r}")
        return out


def default_sampler(system: OdeSystem, seed: int = 0) -> InitSampler:
    """Initial-condition ranges used by the benchmark protocol."""
    if system.name == "spring_mass":
        return InitSampler([("uniform", -2.5, 2.5)] * system.dim, seed)
    if system.name == "elastic_pendulum":
        specs = [("uniform", 0.0, math.pi / 8), ("constant", 10.0), ("constant", 0.0), ("constant", 0.0)]
        return InitSampler(specs, seed)
    if system.name == "klink":
        n = system.dim // 2
        return InitSampler([("uniform", 0.0, math.pi / 8)] * n + [("constant", 0.0)] * n, seed)
    if system.name == "harmonic":
        return InitSampler([("uniform", -1.0, 1.0)] * 2, seed)
    raise ConfigurationError(f"no default sampler for system {system.name!r}")


def sample_initial_conditions(sampler: InitSampler, n: int, start: int = 0) -> np.ndarray:
    if n < 1:
        raise ContractViolation("need at least one sample")
    return np.stack([sampler.draw(start + i) for i in range(n)])


def inject_noise(state, sigma: float, kind: str = "constant", rng=None) -> np.ndarray:
    """Perturb a state by ``sigma``.

    ``kind="constant"`` adds the same offset ``sigma`` to every component;
    ``kind="gaussian"`` adds i.i.d. ``N(0, sigma^2)`` noise drawn from ``rng``.
    """
    if sigma < 0:
        raise ContractViolation("noise level must be non-negative")
    state = np.asarray(state, dtype=np.float64)
    if sigma == 0:
        return state
    if kind == "constant":
        return state + sigma
    if kind == "gaussian":
        rng = np.random.default_rng() if rng is None else rng
        return state + rng.normal(0.0, sigma, size=state.shape)
    raise ConfigurationError(f"unknown noise kind {kind!r}")


def step_ratio(dt_coarse: float, dt_fine: float) -> int:
    """Integer stride ``dt_coarse / dt_fine``; raises if it is not integral."""
    if not (dt_fine > 0 and dt_coarse > 0):
        raise ConfigurationError("step sizes must be positive (keys: dt_fine, dt_coarse)")
    k = round(dt_coarse / dt_fine)
    if k < 1 or abs(k * dt_fine - dt_coarse) > 1e-9 * dt_coarse:
        raise ConfigurationError(
            f"dt_coarse / dt_fine = {dt_coarse} / {dt_fine} is not a positive integer (keys: dt_coarse, dt_fine)"
        )
    return int(k)


def n_coarse_steps(T: float, dt_coarse: float) -> int:
    n = round(T / dt_coarse)
    if n < 1 or abs(n * dt_coarse - T) > 1e-9 * T:
        raise ConfigurationError(f"T / dt_coarse = {T} / {dt_coarse} is not a positive integer (keys: T, dt_coarse)")
    return int(n)


def fine_rk4(u, system: OdeSystem, dt_fine: float, k: int) -> np.ndarray:
    """Advance (a batch of) states by ``k`` classic RK4 steps of size ``dt_fine``."""
    u = np.array(u, dtype=np.float64)
    for _ in range(k):
        u = u + integration_term(Scheme.RK4, system, u, dt_fine, singular="nan") * dt_fine
    return u


@dataclass(eq=False)
class TrajectoryDataset:
    trajectories: np.ndarray
    dt_coarse: float
    dt_fine: float
    system: str
    params: dict = field(default_factory=dict)
    split: str = "train"
    seed: int = 0
    rejected: int = 0

    @property
    def n_traj(self) -> int:
        return self.trajectories.shape[0]

    @property
    def n_steps(self) -> int:
        return self.trajectories.shape[1] - 1

    @property
    def dim(self) -> int:
        return self.trajectories.shape[2]

    @property
    def stride(self) -> int:
        return step_ratio(self.dt_coarse, self.dt_fine)

    @property
    def T(self) -> float:
        return self.n_steps * self.dt_coarse

    def make_system(self) -> OdeSystem:
        return make_system(self.system, self.params)

    def subset(self, index) -> "TrajectoryDataset":
        return TrajectoryDataset(
            self.trajectories[index], self.dt_coarse, self.dt_fine, self.system,
            dict(self.params), self.split, self.seed, self.rejected,
        )

    def metadata(self) -> dict:
        return {
            "system": self.system,
            "params": self.params,
            "split": self.split,
            "seed": self.seed,
            "n_traj": self.n_traj,
            "n_steps": self.n_steps,
            "dim": self.dim,
            "dt_coarse": self.dt_coarse,
            "dt_fine": self.dt_fine,
            "stride": self.stride,
            "rejected": self.rejected,
        }

    def __eq__(self, other):
        if not isinstance(other, TrajectoryDataset):
            return NotImplemented
        return (
            self.trajectories.shape == other.trajectories.shape
            and self.trajectories.tobytes() == other.trajectories.tobytes()
            and (self.dt_coarse, self.dt_fine, self.system, self.split, self.seed, self.rejected)
            == (other.dt_coarse, other.dt_fine, other.system, other.split, other.seed, other.rejected)
            and json.dumps(self.params, sort_keys=True) == json.dumps(other.params, sort_keys=True)
        )


def generate_dataset(system: OdeSystem, sampler: InitSampler, n_traj: int, dt_fine: float,
                     dt_coarse: float, T: float, split: str = "train", max_attempts: int = 100) -> TrajectoryDataset:
    """Integrate ``n_traj`` ground-truth trajectories and keep the coarse-grid states.

    Trajectories that become non-finite are re-drawn from the next sample of the
    same per-trajectory stream; the number of rejections is recorded.
    """
    k = step_ratio(dt_coarse, dt_fine)
    n = n_coarse_steps(T, dt_coarse)
    if sampler.dim != system.dim:
        raise ConfigurationError(f"sampler has {sampler.dim} variables, system needs {system.dim}")
    out = np.empty((n_traj, n + 1, system.dim))
    attempts = np.zeros(n_traj, dtype=np.int64)
    todo = np.arange(n_traj)
    rejected = 0
    while todo.size:
        u = np.stack([sampler.draw(int(i), int(attempts[i])) for i in todo])
        u = check_state(u, system.dim)
        out[todo, 0] = u
        for j in range(n):
            u = fine_rk4(u, system, dt_fine, k)
            out[todo, j + 1] = u
        ok = np.all(np.isfinite(out[todo]), axis=(1, 2))
        rejected += int(np.sum(~ok))
        todo = todo[~ok]
        attempts[todo] += 1
        if todo.size and attempts[todo].max() >= max_attempts:
            raise ConfigurationError(f"{todo.size} trajectories kept exploding after {max_attempts} attempts")
    if rejected:
        log.info("rejected %d exploded trajectories while generating %s split", rejected, split)
    return TrajectoryDataset(out, float(dt_coarse), float(dt_fine), system.name,
                             system.to_dict()["params"], split, int(sampler.seed), rejected)


def prefix_indices(n: int, fraction: float, shuffle_seed: int = 0) -> np.ndarray:
    """Sorted indices of the first ``round(fraction * n)`` entries of a fixed shuffle.

    Index sets for decreasing fractions are therefore nested.
    """
    if not 0 < fraction <= 1:
        raise ContractViolation("fraction must lie in (0, 1]")
    order = np.random.default_rng(shuffle_seed).permutation(n)
    keep = max(1, int(round(fraction * n))) if n else 0
    return np.sort(order[:keep])


def prefix_subset(ds: TrajectoryDataset, fraction: float, shuffle_seed: int = 0) -> TrajectoryDataset:
    """Subset holding the trajectories picked by :func:`prefix_indices`."""
    return ds.subset(prefix_indices(ds.n_traj, fraction, shuffle_seed))


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

DATASET_MAGIC = b"ATTS"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4I2dQ")


def encode_dataset(ds: TrajectoryDataset) -> bytes:
    name = ds.system.encode("utf-8")
    m, rows, d = ds.trajectories.shape
    head = DATASET_MAGIC + _HEADER.pack(DATASET_VERSION, d, rows, m, ds.dt_coarse, ds.dt_fine, ds.seed)
    head += struct.pack("<I", len(name)) + name
    return head + np.ascontiguousarray(ds.trajectories, dtype="<f8").tobytes()


def decode_dataset(blob: bytes, meta: dict | None = None) -> TrajectoryDataset:
    if len(blob) < 4 or blob[:4] != DATASET_MAGIC:
        raise BadMagicError("not an ATTS dataset")
    if len(blob) < 4 + _HEADER.size + 4:
        raise TruncatedFileError("dataset header is truncated")
    version, d, rows, m, dt_coarse, dt_fine, seed = _HEADER.unpack_from(blob, 4)
    if version != DATASET_VERSION:
        raise VersionMismatchError(f"dataset version {version}, expected {DATASET_VERSION}")
    pos = 4 + _HEADER.size
    (name_len,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    if len(blob) < pos + name_len:
        raise TruncatedFileError("system id is truncated")
    name = blob[pos : pos + name_len].decode("utf-8")
    pos += name_len
    count = m * rows * d
    if len(blob) - pos < 8 * count:
        raise TruncatedFileError(f"header declares {count} values but payload holds {(len(blob) - pos) // 8}")
    data = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(m, rows, d)
    meta = meta or {}
    return TrajectoryDataset(
        data, dt_coarse, dt_fine, name, meta.get("params", {}), meta.get("split", "train"),
        int(seed), int(meta.get("rejected", 0)),
    )


def sidecar_path(path) -> str:
    return os.fspath(path) + ".json"


def write_dataset(ds: TrajectoryDataset, path) -> None:
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode_dataset(ds))
    os.replace(tmp, path)
    with open(sidecar_path(path), "w") as fh:
        json.dump(ds.metadata(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_dataset(path) -> TrajectoryDataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    meta = None
    if os.path.exists(sidecar_path(path)):
        with open(sidecar_path(path)) as fh:
            meta = json.load(fh)
    return decode_dataset(blob, meta)
