import logging

import numpy as np
import pytest

from attsolver.data import default_sampler, generate_dataset
from attsolver.errors import ConfigurationError, ContractViolation
from attsolver.nn import GradientSet, encode_module, init_module, load_module, modules_equal
from attsolver.solvers import integration_term, rollout_batch
from attsolver.systems import make_system
from attsolver.training import (
    SGD,
    Adam,
    ModelConfig,
    TrainConfig,
    compute_loss,
    default_loss_scale,
    fit,
    frozen_loss,
    rollout_loss,
    train_epoch,
    unroll,
    update_parameters,
)

from gradcheck import worst_relative_error


def perturbed(d, d1, h, rng, mode="additive"):
    m = init_module(d, d1, h, seed=0, offset=1.0 if mode == "multiplicative" else 0.0,
                    offset_learnable=mode == "multiplicative")
    for w in m.weights:
        w[...] = rng.normal(0.0, 0.5, w.shape)
    return m


class TestLoss:
    def test_identical(self, rng):
        u = rng.normal(size=(5, 3))
        assert compute_loss(u, u) == 0.0

    def test_hand_value(self):
        u = np.zeros((3, 1))
        u_hat = np.array([[0.0], [1.0], [2.0]])
        assert compute_loss(u_hat, u) == 2.5
        assert compute_loss(u_hat, u, 10.0) == 25.0

    def test_initial_row_excluded(self):
        u = np.zeros((3, 1))
        u_hat = np.array([[100.0], [1.0], [2.0]])
        assert compute_loss(u_hat, u) == 2.5

    def test_shape_mismatch(self):
        with pytest.raises(ContractViolation):
            compute_loss(np.zeros((3, 2)), np.zeros((4, 2)))

    def test_loss_scale_default(self, small_splits):
        c = default_loss_scale(small_splits["train"])
        assert 1.0 <= c <= 1e6


class TestUnrollGradient:
    @pytest.mark.parametrize("mode", ["additive", "multiplicative", "normalized_multiplicative", "neurvec"])
    def test_teacher_forced_full_loss(self, mode, rng):
        sys_ = make_system("spring_mass", {"n_masses": 1})
        batch = rng.normal(size=(2, 4, 2))
        m = perturbed(2, 4, 2, rng, mode)
        res = unroll(m, batch, "rk4", sys_, 0.1, mode, 3.0)

        def loss():
            return unroll(m, batch, "rk4", sys_, 0.1, mode, 3.0, need_grad=False).loss

        assert worst_relative_error(m, loss, res.grads, floor=1e-8) < 1e-4

    @pytest.mark.parametrize("mode", ["additive", "multiplicative", "normalized_multiplicative", "neurvec"])
    def test_truncated_gradient_without_teacher_forcing(self, mode, rng):
        sys_ = make_system("spring_mass", {"n_masses": 1})
        batch = rng.normal(size=(2, 4, 2))
        m = perturbed(2, 4, 2, rng, mode)
        res = unroll(m, batch, "euler", sys_, 0.1, mode, 2.0, teacher_forcing=False, sigma=1e-3)
        assert abs(frozen_loss(m, batch, res, 0.1, mode, 2.0, 1e-3) - res.loss) < 1e-12 * res.loss
        grad = worst_relative_error(m, lambda: frozen_loss(m, batch, res, 0.1, mode, 2.0, 1e-3), res.grads, floor=1e-8)
        assert grad < 1e-4

    def test_noise_enters_rollout(self, rng):
        sys_ = make_system("spring_mass", {"n_masses": 1})
        batch = rng.normal(size=(1, 3, 2))
        m = init_module(2, 4, 2)
        clean = unroll(m, batch, "euler", sys_, 0.1, need_grad=False)
        noisy = unroll(m, batch, "euler", sys_, 0.1, sigma=1e-5, need_grad=False)
        np.testing.assert_allclose(noisy.u_hat[:, 2] - clean.u_hat[:, 2], 2e-5, rtol=1e-6)

    def test_zero_module_teacher_forced_loss(self, small_splits):
        ds = small_splits["train"]
        sys_ = ds.make_system()
        m = init_module(4, 8, 2)
        res = unroll(m, ds.trajectories, "euler", sys_, ds.dt_coarse, need_grad=False)
        s = integration_term("euler", sys_, ds.trajectories[:, :-1], ds.dt_coarse)
        built = np.concatenate([ds.trajectories[:, :1], ds.trajectories[:, :1] + np.cumsum(s * ds.dt_coarse, axis=1)], axis=1)
        assert abs(res.loss - compute_loss(built, ds.trajectories)) < 1e-12 * max(1.0, res.loss)

    def test_zero_module_rollout_loss(self, small_splits):
        ds = small_splits["train"]
        m = init_module(4, 8, 2)
        res = unroll(m, ds.trajectories, "rk3", ds.make_system(), ds.dt_coarse, teacher_forcing=False, need_grad=False)
        states, _, _ = rollout_batch(ds.trajectories[:, 0], "rk3", ds.make_system(), ds.dt_coarse, ds.n_steps)
        assert res.loss == compute_loss(states, ds.trajectories)


class TestOptimizers:
    def scalar_module(self, value):
        m = init_module(1, 1, 1)
        m.weights[0][...] = value
        return m

    def grads_for(self, m, value):
        g = GradientSet.zeros_like(m)
        g.weights[0][...] = value
        return g

    def test_sgd_step(self):
        m = self.scalar_module(1.0)
        assert update_parameters(m, self.grads_for(m, 2.0), SGD(0.1))
        assert abs(m.weights[0][0, 0] - 0.8) < 1e-15

    def test_sgd_zero_gradient(self, rng):
        m = init_module(3, 5, 2)
        before = encode_module(m)
        update_parameters(m, GradientSet.zeros_like(m), SGD(0.1))
        assert encode_module(m) == before

    def test_adam_first_step(self):
        lr, b1, b2, eps, g = 1e-2, 0.9, 0.999, 1e-8, 0.3
        m = self.scalar_module(1.0)
        update_parameters(m, self.grads_for(m, g), Adam(lr, b1, b2, eps))
        m_hat = (1 - b1) * g / (1 - b1)
        v_hat = (1 - b2) * g * g / (1 - b2)
        expected = 1.0 - lr * m_hat / (np.sqrt(v_hat) + eps)
        assert abs(m.weights[0][0, 0] - expected) < 1e-15
        assert abs((1.0 - m.weights[0][0, 0]) - lr) < 1e-7

    def test_adam_second_step(self):
        lr, b1, b2, eps = 1e-2, 0.9, 0.999, 1e-8
        m = self.scalar_module(0.0)
        opt = Adam(lr, b1, b2, eps)
        mom = vel = 0.0
        p = 0.0
        for t, g in enumerate((0.5, -0.2), start=1):
            update_parameters(m, self.grads_for(m, g), opt)
            mom = b1 * mom + (1 - b1) * g
            vel = b2 * vel + (1 - b2) * g * g
            p -= lr * (mom / (1 - b1**t)) / (np.sqrt(vel / (1 - b2**t)) + eps)
        assert abs(m.weights[0][0, 0] - p) < 1e-15

    def test_non_finite_gradient_skipped(self, caplog):
        m = self.scalar_module(1.0)
        with caplog.at_level(logging.WARNING):
            applied = update_parameters(m, self.grads_for(m, np.nan), SGD(0.1))
        assert not applied
        assert m.weights[0][0, 0] == 1.0
        assert "non-finite" in caplog.text


class TestEpoch:
    def test_zero_rate_leaves_module(self, small_splits):
        ds = small_splits["train"]
        m = init_module(4, 8, 2)
        before = encode_module(m)
        cfg = TrainConfig(lr=0.0, epochs=1, batch_size=5, loss_scale=1.0, optimizer="sgd")
        _, loss = train_epoch(m, ds, "euler", cfg)
        assert encode_module(m) == before
        baseline = unroll(m, ds.trajectories, "euler", ds.make_system(), ds.dt_coarse, need_grad=False).loss
        assert abs(loss - baseline) < 1e-12 * baseline

    def test_empty_dataset(self, small_splits):
        with pytest.raises(ConfigurationError):
            train_epoch(init_module(4, 8, 2), small_splits["train"].subset(np.arange(0)), "euler", TrainConfig())

    def test_wrong_split(self, small_splits):
        with pytest.raises(ConfigurationError):
            train_epoch(init_module(4, 8, 2), small_splits["val"], "euler", TrainConfig())

    def test_loss_scale_invariance(self, small_splits):
        ds = small_splits["train"]
        runs = []
        for c, lr in ((1.5, 0.02), (6.0, 0.005)):
            m = init_module(4, 8, 2, seed=1)
            cfg = TrainConfig(lr=lr, loss_scale=c, optimizer="sgd", batch_size=4)
            opt = SGD(lr)
            snapshots = []
            for epoch in range(3):
                train_epoch(m, ds, "euler", cfg, opt, epoch, c)
                snapshots.append(encode_module(m))
            runs.append(snapshots)
        assert runs[0] == runs[1]

    def test_invalid_config(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(batch_size=0)
        with pytest.raises(ConfigurationError):
            TrainConfig(mode="classic")
        with pytest.raises(ConfigurationError):
            TrainConfig(optimizer="rmsprop")


class TestFit:
    def test_zero_rate_single_epoch(self, small_splits):
        cfg = TrainConfig(lr=0.0, epochs=1, batch_size=4)
        rep = fit(small_splits["train"], small_splits["val"], "euler", cfg, ModelConfig(d1=8))
        assert rep.val_loss[0] == rep.baseline_val_loss

    def test_deterministic(self, small_splits):
        cfg = TrainConfig(lr=1e-3, epochs=2, batch_size=4)
        a = fit(small_splits["train"], small_splits["val"], "rk4", cfg, ModelConfig(d1=8))
        b = fit(small_splits["train"], small_splits["val"], "rk4", cfg, ModelConfig(d1=8))
        assert a.train_loss == b.train_loss and a.val_loss == b.val_loss
        assert a.mean_attention == b.mean_attention and a.best_epoch == b.best_epoch
        assert modules_equal(a.module, b.module)

    def test_validation_uses_full_rollout(self, small_splits):
        cfg = TrainConfig(lr=1e-3, epochs=2, batch_size=4)
        rep = fit(small_splits["train"], small_splits["val"], "euler", cfg, ModelConfig(d1=8))
        again = rollout_loss(rep.final_module, small_splits["val"], "euler", "additive", rep.loss_scale)
        assert again == rep.val_loss[-1]
        assert rep.best_val_loss == min(rep.val_loss)

    def test_outputs_and_resume(self, small_splits, tmp_path):
        cfg = TrainConfig(lr=1e-3, epochs=3, batch_size=4)
        full = fit(small_splits["train"], small_splits["val"], "euler", cfg, ModelConfig(d1=8), out_dir=tmp_path / "a")
        lines = (tmp_path / "a" / "curves.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss,seconds" and len(lines) == 4
        assert modules_equal(load_module(tmp_path / "a" / "best.attw"), full.module)

        part = TrainConfig(lr=1e-3, epochs=2, batch_size=4)
        fit(small_splits["train"], small_splits["val"], "euler", part, ModelConfig(d1=8), out_dir=tmp_path / "b")
        resumed = fit(small_splits["train"], small_splits["val"], "euler", part, ModelConfig(d1=8),
                      out_dir=tmp_path / "b", resume=True, epochs=3)
        assert resumed.epochs == 3
        assert resumed.train_loss == full.train_loss
        assert modules_equal(resumed.final_module, full.final_module)

    def test_empty_validation(self, small_splits):
        with pytest.raises(ConfigurationError):
            fit(small_splits["train"], small_splits["val"].subset(np.arange(0)), "euler", TrainConfig(epochs=1))


@pytest.mark.slow
def test_desk_learning_win():
    """Short spring-mass run: median final validation loss well under the Euler baseline."""
    sys_ = make_system("spring_mass", {"n_masses": 2})
    train = generate_dataset(sys_, default_sampler(sys_, 0), 100, 1e-3, 0.2, 20.0, "train")
    val = generate_dataset(sys_, default_sampler(sys_, 1), 20, 1e-3, 0.2, 20.0, "val")
    finals = []
    for seed in range(3):
        rep = fit(train, val, "euler", TrainConfig(lr=1e-3, epochs=15, seed=seed), ModelConfig(d1=128))
        finals.append(rep.val_loss[-1])
    assert np.median(finals) < 0.2 * rep.baseline_val_loss
