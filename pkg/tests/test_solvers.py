import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attsolver.errors import ConfigurationError, ContractViolation
from attsolver.nn import init_module
from attsolver.solvers import (
    Scheme,
    StepMode,
    global_error,
    integration_term,
    observed_order,
    rollout,
    rollout_batch,
    step,
)
from attsolver.systems import OdeSystem, elastic_pendulum, harmonic_oscillator, klink, spring_mass

ALL_SCHEMES = list(Scheme)


def scalar(fn):
    return OdeSystem.from_function("scalar", 1, fn)


class TestIntegrationTerm:
    @pytest.mark.parametrize("scheme", ALL_SCHEMES)
    def test_zero_field(self, scheme):
        sys_ = scalar(lambda u: np.zeros_like(u))
        assert integration_term(scheme, sys_, [3.7], 0.5)[0] == 0.0

    def test_rk4_stages_on_exponential(self):
        s = integration_term(Scheme.RK4, scalar(lambda u: u), [1.0], 0.1)[0]
        stages = (1.0, 1.05, 1.0525, 1.10525)
        expected = stages[0] / 6 + stages[1] / 3 + stages[2] / 3 + stages[3] / 6
        assert abs(s - expected) < 1e-15
        assert abs(s - 1.0517083333333333) < 1e-12
        assert abs(1.0 + 0.1 * s - np.exp(0.1)) < 1e-7

    def test_rk3_stage_formula(self):
        # u' = u^2: K1 = 1, K2 = (1 + dt/2)^2, K3 = (1 - dt + 2 dt K2)^2
        dt = 0.1
        k2 = (1 + dt / 2) ** 2
        k3 = (1 - dt + 2 * dt * k2) ** 2
        s = integration_term(Scheme.RK3, scalar(lambda u: u * u), [1.0], dt)[0]
        assert abs(s - (1 / 6 + 2 * k2 / 3 + k3 / 6)) < 1e-15

    def test_improved_euler_formula(self):
        dt = 0.2
        s = integration_term(Scheme.IMPROVED_EULER, scalar(lambda u: u * u), [2.0], dt)[0]
        assert abs(s - 0.5 * (4.0 + (2.0 + dt * 4.0) ** 2)) < 1e-14

    def test_euler_is_rhs(self):
        s = integration_term(Scheme.EULER, harmonic_oscillator(), [1.0, 0.0], 0.1)
        np.testing.assert_array_equal(s, [0.0, -1.0])

    def test_nonpositive_step(self):
        with pytest.raises(ContractViolation):
            integration_term("euler", harmonic_oscillator(), [1.0, 0.0], 0.0)

    def test_scheme_orders(self):
        assert [s.order for s in ALL_SCHEMES] == [1, 2, 3, 4]


class TestStep:
    def test_classic_euler(self):
        out = step([1.0, 0.0], "euler", harmonic_oscillator(), 0.1)
        np.testing.assert_array_equal(out, [1.0, -0.1])

    @pytest.mark.parametrize("scheme", ALL_SCHEMES)
    def test_zero_module_is_classic(self, scheme, rng):
        sys_ = spring_mass(2)
        u = rng.normal(size=(5, 4))
        m = init_module(4, 16, 2, seed=3)
        classic = step(u, scheme, sys_, 0.2)
        additive = step(u, scheme, sys_, 0.2, StepMode.ADDITIVE, m)
        assert classic.tobytes() == additive.tobytes()

    def test_all_ones_multiplicative_is_classic(self, rng):
        sys_ = spring_mass(2)
        u = rng.normal(size=4)
        m = init_module(4, 8, 2, seed=0, offset=1.0, offset_learnable=True)
        classic = step(u, "rk4", sys_, 0.2)
        mult = step(u, "rk4", sys_, 0.2, StepMode.MULTIPLICATIVE, m)
        assert classic.tobytes() == mult.tobytes()

    def test_modes_formulae(self, rng):
        sys_ = spring_mass(2)
        u = rng.normal(size=4)
        m = init_module(4, 8, 2, seed=0)
        m.weights[-1][...] = rng.normal(size=m.weights[-1].shape)
        dt = 0.1
        s = integration_term("rk3", sys_, u, dt)
        q_s, q_u = m(s), m(u)
        np.testing.assert_allclose(step(u, "rk3", sys_, dt, "additive", m), u + s * dt + q_s, rtol=1e-15)
        np.testing.assert_allclose(step(u, "rk3", sys_, dt, "multiplicative", m), u + s * dt * q_s, rtol=1e-15)
        np.testing.assert_allclose(step(u, "rk3", sys_, dt, "normalized_multiplicative", m),
                                   u + s * dt * (1 + q_s), rtol=1e-15)
        np.testing.assert_allclose(step(u, "rk3", sys_, dt, "neurvec", m), u + s * dt + q_u, rtol=1e-15)

    def test_s_dt_input_form(self, rng):
        sys_ = spring_mass(2)
        u = rng.normal(size=4)
        m = init_module(4, 8, 2, seed=0, input_form="s_dt")
        m.weights[-1][...] = rng.normal(size=m.weights[-1].shape)
        s = integration_term("euler", sys_, u, 0.2)
        np.testing.assert_allclose(step(u, "euler", sys_, 0.2, "additive", m), u + 0.2 * s + m(0.2 * s))

    @pytest.mark.parametrize("mode", ["additive", "multiplicative", "normalized_multiplicative", "neurvec"])
    def test_learned_mode_needs_module(self, mode):
        with pytest.raises(ConfigurationError):
            step([1.0, 0.0], "euler", harmonic_oscillator(), 0.1, mode)

    def test_deterministic(self, rng):
        u = rng.normal(size=4)
        a = step(u, "rk4", klink(2), 0.05)
        b = step(u, "rk4", klink(2), 0.05)
        assert a.tobytes() == b.tobytes()


class TestRollout:
    def test_hand_iteration(self):
        traj = rollout([1.0, 0.0], "euler", harmonic_oscillator(), 0.1, 2)
        np.testing.assert_allclose(traj.states, [[1.0, 0.0], [1.0, -0.1], [0.99, -0.2]], atol=1e-15)
        assert not traj.exploded and traj.explosion_step is None
        np.testing.assert_allclose(traj.times, [0.0, 0.1, 0.2])

    @given(st.integers(1, 30), st.floats(-5, 5, allow_nan=False))
    @settings(max_examples=25, deadline=None)
    def test_constant_field(self, n, u0):
        traj = rollout([u0], "rk4", scalar(lambda u: np.zeros_like(u)), 0.3, n)
        assert traj.states.shape == (n + 1, 1)
        assert np.all(traj.states == u0)

    def test_explosion_is_flagged_and_frozen(self):
        traj = rollout([0.3, 10.0, 0.0, 0.0], "euler", elastic_pendulum(), 5.0, 40)
        assert traj.exploded
        assert traj.explosion_step is not None and traj.explosion_step >= 1
        assert np.all(np.isfinite(traj.states))
        frozen = traj.states[traj.explosion_step - 1]
        assert np.all(traj.states[traj.explosion_step:] == frozen)

    def test_batch_matches_single(self, rng):
        sys_ = spring_mass(2)
        u0 = rng.normal(size=(3, 4))
        states, exploded, where = rollout_batch(u0, "rk3", sys_, 0.2, 10)
        for i in range(3):
            single = rollout(u0[i], "rk3", sys_, 0.2, 10)
            np.testing.assert_array_equal(states[i], single.states)
        assert not exploded.any() and np.all(where == -1)

    @pytest.mark.parametrize("scheme", ALL_SCHEMES)
    @pytest.mark.parametrize("system", [spring_mass(2), elastic_pendulum(), klink(2)], ids=lambda s: s.name)
    def test_zero_module_rollout_bitwise(self, scheme, system, rng):
        u0 = np.array([0.2, 10.0, 0.0, 0.0]) if system.name == "elastic_pendulum" else rng.uniform(0, 0.4, 4)
        m = init_module(4, 16, 2, seed=1)
        a = rollout(u0, scheme, system, 0.1, 20)
        b = rollout(u0, scheme, system, 0.1, 20, StepMode.ADDITIVE, m)
        assert a.states.tobytes() == b.states.tobytes()

    def test_needs_a_step(self):
        with pytest.raises(ContractViolation):
            rollout([1.0, 0.0], "euler", harmonic_oscillator(), 0.1, 0)


class TestOrder:
    @pytest.mark.parametrize("scheme,order,tol", [("euler", 1.0, 0.1), ("improved_euler", 2.0, 0.15),
                                                  ("rk3", 3.0, 0.25), ("rk4", 4.0, 0.3)])
    def test_observed_order(self, scheme, order, tol):
        assert abs(observed_order(scheme) - order) < tol

    def test_euler_order_at_fine_step(self):
        assert abs(observed_order("euler", dt=1e-3) - 1.0) < 0.1

    def test_error_shrinks_with_step(self):
        for scheme in ALL_SCHEMES:
            assert global_error(scheme, 0.05) < global_error(scheme, 0.1)
