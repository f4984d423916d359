"""Benchmark ODE systems.

Three benchmarks are provided together with a harmonic oscillator that has a
closed-form solution and is used by the verification probes:

* spring-mass chain: ``n`` masses and ``n + 1`` springs between two walls,
  state layout ``(q_1..q_n, p_1..p_n)``;
* elastic pendulum: state ``(theta, r, theta_dot, r_dot)``;
* K-link pendulum with unit rods and unit masses: state
  ``(theta_1..theta_K, theta_dot_1..theta_dot_K)``.

Every right-hand side accepts an array of shape ``(..., d)`` so that a batch of
states can be advanced at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import ContractViolation, SingularMatrixError, SingularStateError

RhsFn = Callable[[np.ndarray, Mapping], np.ndarray]


@dataclass(frozen=True)
class OdeSystem:
    """Autonomous ODE ``du/dt = f(u)`` with named physical parameters.

    ``fn`` is only set for ad-hoc systems built with :meth:`from_function`;
    the named benchmarks dispatch through :data:`RHS_REGISTRY`.
    """

    name: str
    dim: int
    params: Mapping = field(default_factory=dict)
    fn: RhsFn | None = field(default=None, compare=False, repr=False)

    def rhs(self, u, singular: str = "raise") -> np.ndarray:
        u = check_state(u, self.dim)
        fn = self.fn if self.fn is not None else RHS_REGISTRY[self.name]
        if self.fn is not None:
            return np.asarray(fn(u, self.params), dtype=np.float64)
        return fn(u, self.params, singular=singular)

    @classmethod
    def from_function(cls, name: str, dim: int, fn: Callable[[np.ndarray], np.ndarray]):
        return cls(name, dim, {}, lambda u, _params: fn(u))

    def to_dict(self) -> dict:
        return {"name": self.name, "dim": self.dim, "params": _plain(self.params)}


def _plain(params: Mapping) -> dict:
    out = {}
    for key, value in params.items():
        if isinstance(value, (tuple, list, np.ndarray)):
            out[key] = [float(v) for v in value]
        elif isinstance(value, (int, np.integer)) and not isinstance(value, bool):
            out[key] = int(value)
        else:
            out[key] = float(value)
    return out


def check_state(u, dim: int) -> np.ndarray:
    """Return ``u`` as a float64 array whose last axis has length ``dim``."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim == 0 or u.shape[-1] != dim:
        raise ContractViolation(f"state has shape {u.shape}, expected trailing dimension {dim}")
    return u


# ---------------------------------------------------------------------------
# spring-mass chain
# ---------------------------------------------------------------------------

def spring_mass(n_masses: int = 2, masses=None, springs=None) -> OdeSystem:
    """Chain of ``n_masses`` masses; ``springs`` has ``n_masses + 1`` entries."""
    if n_masses < 1:
        raise ContractViolation("spring-mass needs at least one mass")
    masses = np.ones(n_masses) if masses is None else np.asarray(masses, dtype=np.float64)
    springs = np.ones(n_masses + 1) if springs is None else np.asarray(springs, dtype=np.float64)
    if masses.shape != (n_masses,) or springs.shape != (n_masses + 1,):
        raise ContractViolation("need one mass per body and n_masses + 1 springs")
    if np.any(masses <= 0) or np.any(springs <= 0):
        raise ContractViolation("masses and spring constants must be positive")
    params = {"masses": tuple(masses.tolist()), "springs": tuple(springs.tolist())}
    return OdeSystem("spring_mass", 2 * n_masses, params)


def rhs_spring_mass(u, params, singular="raise"):
    m = np.asarray(params["masses"], dtype=np.float64)
    k = np.asarray(params["springs"], dtype=np.float64)
    n = m.shape[0]
    u = np.asarray(u, dtype=np.float64)
    if u.shape[-1] != 2 * n:
        raise ContractViolation(f"spring-mass with {n} masses needs state length {2 * n}")
    q, p = u[..., :n], u[..., n:]
    pad = np.zeros(q.shape[:-1] + (1,))
    qq = np.concatenate([pad, q, pad], axis=-1)
    dq = p / m
    dp = k[:-1] * (qq[..., :-2] - q) + k[1:] * (qq[..., 2:] - q)
    return np.concatenate([dq, dp], axis=-1)


def spring_mass_matrix(system: OdeSystem) -> np.ndarray:
    """Exact matrix ``A`` with ``f(u) = A u`` for the (linear) spring-mass chain."""
    m = np.asarray(system.params["masses"])
    k = np.asarray(system.params["springs"])
    n = m.shape[0]
    stiffness = np.diag(k[:-1] + k[1:]) - np.diag(k[1:-1], 1) - np.diag(k[1:-1], -1)
    a = np.zeros((2 * n, 2 * n))
    a[:n, n:] = np.diag(1.0 / m)
    a[n:, :n] = -stiffness
    return a


def spring_mass_energy(u, system: OdeSystem) -> np.ndarray:
    m = np.asarray(system.params["masses"])
    k = np.asarray(system.params["springs"])
    n = m.shape[0]
    u = check_state(u, 2 * n)
    q, p = u[..., :n], u[..., n:]
    pad = np.zeros(q.shape[:-1] + (1,))
    stretch = np.diff(np.concatenate([pad, q, pad], axis=-1), axis=-1)
    return 0.5 * np.sum(p**2 / m, axis=-1) + 0.5 * np.sum(k * stretch**2, axis=-1)


# ---------------------------------------------------------------------------
# elastic pendulum
# ---------------------------------------------------------------------------

def elastic_pendulum(k: float = 40.0, m: float = 1.0, l0: float = 10.0, g: float = 9.8) -> OdeSystem:
    if min(k, m, l0, g) <= 0:
        raise ContractViolation("elastic pendulum constants must be positive")
    return OdeSystem("elastic_pendulum", 4, {"k": float(k), "m": float(m), "l0": float(l0), "g": float(g)})


def rhs_elastic_pendulum(u, params, singular="raise"):
    u = np.asarray(u, dtype=np.float64)
    if u.shape[-1] != 4:
        raise ContractViolation("elastic pendulum state is (theta, r, theta_dot, r_dot)")
    theta, r, w, v = u[..., 0], u[..., 1], u[..., 2], u[..., 3]
    bad = ~(r > 0)
    if np.any(bad):
        if singular == "raise":
            raise SingularStateError("elastic pendulum needs r > 0")
        r = np.where(bad, np.nan, r)
    g, k, m, l0 = params["g"], params["k"], params["m"], params["l0"]
    with np.errstate(over="ignore", invalid="ignore"):
        dw = (-g * np.sin(theta) - w * v) / r
        dv = r * w**2 - (k / m) * (r - l0) + g * np.cos(theta)
    return np.stack([w, v, dw, dv], axis=-1)


# ---------------------------------------------------------------------------
# K-link pendulum
# ---------------------------------------------------------------------------

@dataclass
class LinearSystem:
    """``A x = b``; ``A`` may carry leading batch axes ``(..., K, K)``."""

    matrix: np.ndarray
    rhs: np.ndarray


def klink(n_links: int = 2, g: float = 9.8) -> OdeSystem:
    if n_links < 1 or g <= 0:
        raise ContractViolation("K-link pendulum needs K >= 1 and g > 0")
    return OdeSystem("klink", 2 * n_links, {"K": int(n_links), "g": float(g)})


def _klink_weights(n_links: int) -> np.ndarray:
    idx = np.arange(1, n_links + 1)
    return (n_links - np.maximum.outer(idx, idx) + 1).astype(np.float64)


def assemble_klink(u, params) -> LinearSystem:
    """Mass matrix and generalized force of the K-link pendulum.

    ``A[i, j] = c(i, j) cos(theta_i - theta_j)`` and
    ``b[i] = -sum_j c(i, j) theta_dot_j**2 sin(theta_i - theta_j) - (K - i + 1) g sin(theta_i)``
    with ``c(i, j) = K - max(i, j) + 1`` (1-based indices).
    """
    n = int(params["K"])
    u = np.asarray(u, dtype=np.float64)
    if u.shape[-1] != 2 * n:
        raise ContractViolation(f"{n}-link pendulum needs state length {2 * n}")
    theta, omega = u[..., :n], u[..., n:]
    c = _klink_weights(n)
    delta = theta[..., :, None] - theta[..., None, :]
    a = c * np.cos(delta)
    b = -np.sum(c * omega[..., None, :] ** 2 * np.sin(delta), axis=-1)
    b = b - (n - np.arange(n)) * params["g"] * np.sin(theta)
    return LinearSystem(a, b)


def solve_linear(system: LinearSystem, singular: str = "raise") -> np.ndarray:
    """Solve ``A x = b`` by LU factorisation with partial pivoting.

    Leading batch axes are supported. A pivot smaller than ``1e-14 * ||A||_inf``
    marks the matrix as singular; with ``singular="nan"`` the affected solutions
    are NaN instead of raising :class:`SingularMatrixError`.
    """
    a = np.array(system.matrix, dtype=np.float64)
    b = np.array(system.rhs, dtype=np.float64)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2] or b.shape != a.shape[:-1]:
        raise ContractViolation(f"incompatible shapes {a.shape} and {b.shape}")
    batch = a.shape[:-2]
    n = a.shape[-1]
    a = a.reshape((-1, n, n))
    b = b.reshape((-1, n))
    rows = np.arange(a.shape[0])
    scale = np.max(np.sum(np.abs(a), axis=-1), axis=-1) if n else np.zeros(a.shape[0])
    bad = ~np.isfinite(scale) | (scale == 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        for col in range(n):
            piv = col + np.argmax(np.abs(a[:, col:, col]), axis=-1)
            top = a[rows, col, :].copy()
            a[rows, col, :] = a[rows, piv, :]
            a[rows, piv, :] = top
            top_b = b[rows, col].copy()
            b[rows, col] = b[rows, piv]
            b[rows, piv] = top_b
            pivot = a[:, col, col]
            bad |= np.abs(pivot) < 1e-14 * scale
            factors = a[:, col + 1 :, col] / pivot[:, None]
            a[:, col + 1 :, :] -= factors[:, :, None] * a[:, None, col, :]
            b[:, col + 1 :] -= factors * b[:, col, None]
        x = np.empty_like(b)
        for col in range(n - 1, -1, -1):
            acc = b[:, col] - np.sum(a[:, col, col + 1 :] * x[:, col + 1 :], axis=-1)
            x[:, col] = acc / a[:, col, col]
    if np.any(bad):
        if singular == "raise":
            raise SingularMatrixError("matrix is numerically singular")
        x[bad] = np.nan
    return x.reshape(batch + (n,))


def rhs_klink(u, params, singular="raise"):
    n = int(params["K"])
    u = np.asarray(u, dtype=np.float64)
    lin = assemble_klink(u, params)
    acc = solve_linear(lin, singular=singular)
    return np.concatenate([u[..., n:], acc], axis=-1)


def klink_energy(u, system: OdeSystem) -> np.ndarray:
    n = int(system.params["K"])
    u = check_state(u, 2 * n)
    theta, omega = u[..., :n], u[..., n:]
    c = _klink_weights(n)
    mass = c * np.cos(theta[..., :, None] - theta[..., None, :])
    kinetic = 0.5 * np.einsum("...i,...ij,...j->...", omega, mass, omega)
    potential = -system.params["g"] * np.sum((n - np.arange(n)) * np.cos(theta), axis=-1)
    return kinetic + potential


# ---------------------------------------------------------------------------
# harmonic oscillator (closed-form reference)
# ---------------------------------------------------------------------------

def harmonic_oscillator(omega: float = 1.0) -> OdeSystem:
    return OdeSystem("harmonic", 2, {"omega": float(omega)})


def rhs_harmonic(u, params, singular="raise"):
    u = np.asarray(u, dtype=np.float64)
    w = params["omega"]
    return np.stack([u[..., 1], -(w**2) * u[..., 0]], axis=-1)


def harmonic_solution(u0, t, omega: float = 1.0) -> np.ndarray:
    """Exact state at time(s) ``t`` for ``q' = p, p' = -omega**2 q``."""
    q0, p0 = np.asarray(u0, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    c, s = np.cos(omega * t), np.sin(omega * t)
    return np.stack([q0 * c + p0 * s / omega, -q0 * omega * s + p0 * c], axis=-1)


RHS_REGISTRY = {
    "spring_mass": rhs_spring_mass,
    "elastic_pendulum": rhs_elastic_pendulum,
    "klink": rhs_klink,
    "harmonic": rhs_harmonic,
}


def make_system(name: str, params: Mapping | None = None) -> OdeSystem:
    """Build a named system from a plain parameter mapping (config / file sidecar)."""
    params = dict(params or {})
    if name == "spring_mass":
        n = int(params.pop("n_masses", 0)) or len(params.get("masses") or ()) or 2
        return spring_mass(n, params.get("masses"), params.get("springs"))
    if name == "elastic_pendulum":
        return elastic_pendulum(**params)
    if name == "klink":
        return klink(int(params.get("K", params.get("n_links", 2))), params.get("g", 9.8))
    if name == "harmonic":
        return harmonic_oscillator(params.get("omega", 1.0))
    raise ContractViolation(f"unknown system {name!r}; choose from {sorted(RHS_REGISTRY)}")
