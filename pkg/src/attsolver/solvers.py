"""Explicit fixed-step integrators and the learned-correction step variants.

A scheme supplies the integration term ``S(f, u, dt)``; the update is
``u + S * dt`` plus, depending on :class:`StepMode`, a learned correction:

=========================  ==============================================
Classic                    ``u + S dt``
Additive (AttSolver)       ``u + S dt + Q[S]``
Multiplicative             ``u + (S dt) * Q[S]``
NormalizedMultiplicative   ``u + (S dt) * (1 + Q~[S])``
NeurVec                    ``u + S dt + Net(u)``
=========================  ==============================================
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractViolation
from .systems import OdeSystem, check_state, harmonic_oscillator, harmonic_solution


class Scheme(enum.Enum):
    EULER = "euler"
    IMPROVED_EULER = "improved_euler"
    RK3 = "rk3"
    RK4 = "rk4"

    @property
    def order(self) -> int:
        return _ORDERS[self]

    @property
    def stages(self) -> int:
        return _ORDERS[self]


_ORDERS = {Scheme.EULER: 1, Scheme.IMPROVED_EULER: 2, Scheme.RK3: 3, Scheme.RK4: 4}


class StepMode(enum.Enum):
    CLASSIC = "classic"
    ADDITIVE = "additive"
    MULTIPLICATIVE = "multiplicative"
    NORMALIZED = "normalized_multiplicative"
    NEURVEC = "neurvec"

    @property
    def learned(self) -> bool:
        return self is not StepMode.CLASSIC


def as_scheme(value) -> Scheme:
    return value if isinstance(value, Scheme) else Scheme(str(value).lower())


def as_mode(value) -> StepMode:
    return value if isinstance(value, StepMode) else StepMode(str(value).lower())


def integration_term(scheme, system: OdeSystem, u, dt: float, singular: str = "raise") -> np.ndarray:
    """Return ``S(f, u, dt)``, the increment slope (not multiplied by ``dt``)."""
    if not dt > 0:
        raise ContractViolation(f"step size must be positive, got {dt}")
    scheme = as_scheme(scheme)
    u = check_state(u, system.dim)

    def f(x):
        return system.rhs(x, singular=singular)

    with np.errstate(over="ignore", invalid="ignore"):
        if scheme is Scheme.EULER:
            return f(u)
        if scheme is Scheme.IMPROVED_EULER:
            k1 = f(u)
            return 0.5 * (k1 + f(u + dt * k1))
        if scheme is Scheme.RK3:
            k1 = f(u)
            k2 = f(u + 0.5 * dt * k1)
            k3 = f(u - dt * k1 + 2.0 * dt * k2)
            return k1 / 6.0 + (2.0 / 3.0) * k2 + k3 / 6.0
        j1 = f(u)
        j2 = f(u + 0.5 * dt * j1)
        j3 = f(u + 0.5 * dt * j2)
        j4 = f(u + dt * j3)
        return j1 / 6.0 + j2 / 3.0 + j3 / 3.0 + j4 / 6.0


def module_input(mode: StepMode, module, u: np.ndarray, s_hat: np.ndarray, dt: float) -> np.ndarray:
    """What the learned network consumes for a given step mode."""
    if mode is StepMode.NEURVEC:
        return u
    if getattr(module, "input_form", "s") == "s_dt":
        return s_hat * dt
    return s_hat


def combine(mode: StepMode, u, s_hat, dt, correction=None) -> np.ndarray:
    """Assemble the next state from the integration term and the network output."""
    increment = s_hat * dt
    if mode is StepMode.CLASSIC:
        return u + increment
    if mode in (StepMode.ADDITIVE, StepMode.NEURVEC):
        return u + increment + correction
    if mode is StepMode.MULTIPLICATIVE:
        return u + increment * correction
    return u + increment * (1.0 + correction)


def step(u, scheme, system: OdeSystem, dt: float, mode=StepMode.CLASSIC, module=None,
         singular: str = "raise") -> np.ndarray:
    """Advance one (batch of) state(s) by a single coarse step."""
    mode = as_mode(mode)
    if mode.learned and module is None:
        raise ConfigurationError(f"step mode {mode.value!r} needs a learned module")
    u = check_state(u, system.dim)
    s_hat = integration_term(scheme, system, u, dt, singular=singular)
    if not mode.learned:
        return combine(mode, u, s_hat, dt)
    with np.errstate(over="ignore", invalid="ignore"):
        x = module_input(mode, module, u, s_hat, dt)
        q = module(x)
        return combine(mode, u, s_hat, dt, q)


@dataclass
class Trajectory:
    """States on a uniform grid; row 0 is the initial condition."""

    states: np.ndarray
    dt: float
    t0: float = 0.0
    exploded: bool = False
    explosion_step: int | None = None

    @property
    def n_steps(self) -> int:
        return self.states.shape[0] - 1

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.states.shape[0])


def rollout_batch(u0, scheme, system: OdeSystem, dt: float, n_steps: int, mode=StepMode.CLASSIC,
                  module=None):
    """Roll out ``M`` initial conditions together.

    Returns ``(states, exploded, explosion_step)`` with ``states`` of shape
    ``(M, n_steps + 1, d)``. Once a trajectory produces a non-finite state it is
    frozen at its last finite state; ``explosion_step`` holds the index of the
    first non-finite row (``-1`` when the trajectory stayed finite).
    """
    if n_steps < 1:
        raise ContractViolation("rollout needs at least one step")
    mode = as_mode(mode)
    if mode.learned and module is None:
        raise ConfigurationError(f"step mode {mode.value!r} needs a learned module")
    u0 = check_state(np.atleast_2d(u0), system.dim)
    m = u0.shape[0]
    states = np.empty((m, n_steps + 1, system.dim))
    states[:, 0] = u0
    explosion = np.full(m, -1, dtype=np.int64)
    alive = np.all(np.isfinite(u0), axis=-1)
    explosion[~alive] = 0
    current = u0.copy()
    for n in range(n_steps):
        idx = np.flatnonzero(alive)
        if idx.size:
            nxt = step(current[idx], scheme, system, dt, mode, module, singular="nan")
            ok = np.all(np.isfinite(nxt), axis=-1)
            current[idx[ok]] = nxt[ok]
            explosion[idx[~ok]] = n + 1
            alive[idx[~ok]] = False
        states[:, n + 1] = current
    return states, explosion >= 0, explosion


def rollout(u0, scheme, system: OdeSystem, dt: float, n_steps: int, mode=StepMode.CLASSIC,
            module=None, t0: float = 0.0) -> Trajectory:
    u0 = check_state(u0, system.dim)
    if u0.ndim != 1:
        raise ContractViolation("rollout takes a single initial condition; use rollout_batch")
    states, exploded, explosion = rollout_batch(u0, scheme, system, dt, n_steps, mode, module)
    step_idx = int(explosion[0]) if exploded[0] else None
    return Trajectory(states[0], dt, t0, bool(exploded[0]), step_idx)


# Step sizes at which the global error of each scheme on the unit oscillator is
# well above round-off yet inside the asymptotic regime.
DEFAULT_ORDER_STEPS = {
    Scheme.EULER: 1e-3,
    Scheme.IMPROVED_EULER: 1e-3,
    Scheme.RK3: 1e-2,
    Scheme.RK4: 5e-2,
}


def global_error(scheme, dt: float, T: float = 1.0, u0=(1.0, 0.0), omega: float = 1.0) -> float:
    """Euclidean end-time error of a Classic rollout on the harmonic oscillator."""
    system = harmonic_oscillator(omega)
    n = int(round(T / dt))
    if not math.isclose(n * dt, T, rel_tol=1e-9):
        raise ContractViolation(f"T={T} is not a multiple of dt={dt}")
    traj = rollout(np.asarray(u0, dtype=np.float64), scheme, system, dt, n)
    exact = harmonic_solution(u0, T, omega)
    return float(np.linalg.norm(traj.states[-1] - exact))


def observed_order(scheme, T: float = 1.0, dt: float | None = None, omega: float = 1.0) -> float:
    """Richardson estimate ``log2(err(dt) / err(dt / 2))`` on the harmonic oscillator."""
    scheme = as_scheme(scheme)
    dt = DEFAULT_ORDER_STEPS[scheme] if dt is None else dt
    coarse = global_error(scheme, dt, T, omega=omega)
    fine = global_error(scheme, dt / 2.0, T, omega=omega)
    return math.log2(coarse / fine)
