"""Optimizer, schedule, and objective composition tests."""

import numpy as np
import pytest

from affinet import nn, rings
from affinet.model import Param, build_network, collect_filter_bank
from affinet.optim import (
    OptState, TrainConfig, lr_at, preset, sgd_step, total_loss_and_grads,
    weight_norm_half,
)


def make_param(value, decay=True):
    return Param("p", np.array([float(value)]), decay=decay)


class TestTrainConfig:
    def test_paper_preset_matches_protocol(self):
        cfg = preset("paper")
        assert cfg.iterations == 42000
        assert cfg.batch_size == 100
        assert cfg.lambda1 == 0.0005
        assert cfg.lambda2 == 150.0
        assert cfg.momentum == 0.9
        assert cfg.base_lr == 0.01
        assert cfg.lr_drops == ((20000, 0.1), (30000, 0.1))
        assert cfg.channels == (32, 64, 128, 256, 512)
        assert cfg.fc_dim == 1024

    def test_desk_preset_is_smaller(self):
        cfg = preset("desk")
        assert cfg.iterations == 5000
        assert cfg.channels == (16, 32, 32, 32, 32)
        assert cfg.batch_size == 50

    def test_invalid_values_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(base_lr=0)
        with pytest.raises(ValueError):
            TrainConfig(lambda1=-1)
        with pytest.raises(ValueError):
            TrainConfig(lr_drops=((30, 0.1), (20, 0.1)))
        with pytest.raises(ValueError):
            TrainConfig(augment="mixup")
        with pytest.raises(ValueError):
            preset("gpu-cluster")


class TestLrSchedule:
    def test_paper_schedule_points(self):
        cfg = preset("paper")
        assert lr_at(cfg, 0) == 0.01
        assert lr_at(cfg, 19999) == 0.01
        assert lr_at(cfg, 20000) == pytest.approx(0.001)
        assert lr_at(cfg, 29999) == pytest.approx(0.001)
        assert lr_at(cfg, 30000) == pytest.approx(0.0001)
        assert lr_at(cfg, 41999) == pytest.approx(0.0001)

    def test_out_of_range_rejected(self):
        cfg = preset("paper")
        with pytest.raises(ValueError):
            lr_at(cfg, -1)
        with pytest.raises(ValueError):
            lr_at(cfg, 42000)

    def test_non_increasing(self):
        cfg = TrainConfig(iterations=100, lr_drops=((10, 0.5), (20, 0.2)))
        rates = [lr_at(cfg, i) for i in range(100)]
        assert all(a >= b for a, b in zip(rates, rates[1:]))


class TestSgdStep:
    def test_pure_decay_step(self):
        p = make_param(1.0)
        cfg = TrainConfig(lambda1=0.0005, momentum=0.9)
        sgd_step([p], OptState.for_params([p]), 0.01, cfg)
        assert p.data[0] == pytest.approx(1 - 0.01 * 0.0005, abs=1e-15)

    def test_momentum_accumulation(self):
        p = make_param(0.0)
        cfg = TrainConfig(lambda1=0.0, momentum=0.9)
        state = OptState.for_params([p])
        p.grad[:] = 1.0
        sgd_step([p], state, 0.1, cfg)
        assert p.data[0] == pytest.approx(-0.1)
        p.grad[:] = 1.0
        sgd_step([p], state, 0.1, cfg)
        assert p.data[0] == pytest.approx(-0.1 - 0.19)

    def test_noop_without_decay_and_grads(self):
        p = make_param(2.5)
        cfg = TrainConfig(lambda1=0.0)
        sgd_step([p], OptState.for_params([p]), 0.1, cfg)
        assert p.data[0] == 2.5

    def test_decay_skips_flagged_params(self):
        p = make_param(1.0, decay=False)
        cfg = TrainConfig(lambda1=0.5)
        sgd_step([p], OptState.for_params([p]), 0.1, cfg)
        assert p.data[0] == 1.0

    def test_nonfinite_gradient_aborts(self):
        p = make_param(1.0)
        p.grad[:] = np.nan
        with pytest.raises(nn.NonFiniteError):
            sgd_step([p], OptState.for_params([p]), 0.1, TrainConfig())

    def test_gradient_step_shrinks_quadratic_norm(self):
        rng = np.random.default_rng(0)
        p = Param("p", rng.uniform(-1, 1, 32), decay=True)
        cfg = TrainConfig(lambda1=0.0005, momentum=0.0)
        before = np.linalg.norm(p.data)
        p.grad[:] = p.data  # gradient of 0.5*||p||^2
        sgd_step([p], OptState.for_params([p]), 0.5, cfg)
        assert np.linalg.norm(p.data) < before

    def test_two_runs_same_state_are_identical(self):
        cfg = TrainConfig(lambda1=0.0, momentum=0.0)
        results = []
        for _ in range(2):
            p = Param("p", np.linspace(-1, 1, 8), decay=True)
            state = OptState.for_params([p])
            for _ in range(2):
                p.grad[:] = np.sin(p.data)
                sgd_step([p], state, 0.05, cfg)
            results.append(p.data.copy())
        np.testing.assert_array_equal(results[0], results[1])


class TestTotalObjective:
    def _setup(self, lambda2):
        cfg = TrainConfig(iterations=10, batch_size=4, lambda2=lambda2,
                          channels=(2, 2, 2, 2, 2), fc_dim=8, lr_drops=())
        net = build_network(cfg.channels, 3, input_size=8, fc_dim=8, seed=21,
                            dtype=np.float64)
        rng = np.random.default_rng(9)
        x = rng.uniform(0, 1, (4, 1, 8, 8))
        y = rng.integers(0, 3, 4)
        return cfg, net, x, y

    def test_lambda2_zero_equals_plain_cross_entropy(self):
        cfg, net, x, y = self._setup(lambda2=0.0)
        comps, _ = total_loss_and_grads(net, x, y, cfg)
        grads_with_cfg = [p.grad.copy() for p in net.parameters()]
        net.zero_grad()
        logits = net.forward(x, "train")
        ce, grad_logits = nn.softmax_cross_entropy(logits, y)
        net.backward(grad_logits)
        assert comps["ce"] == pytest.approx(ce, abs=1e-12)
        for p, g in zip(net.parameters(), grads_with_cfg):
            np.testing.assert_array_equal(p.grad, g)

    def test_penalty_gradient_adds_linearly(self):
        cfg0, net, x, y = self._setup(lambda2=0.0)
        bank = collect_filter_bank(net)
        pattern = rings.build_hash_pattern("floor")
        total_loss_and_grads(net, x, y, cfg0, bank, pattern)
        base = {p.name: p.grad.copy() for p in net.parameters()}
        r2_grads = dict(zip(
            [lid for lid, _ in bank.entries], rings.r2_grad(bank, pattern)
        ))
        cfg3, *_ = self._setup(lambda2=3.0)
        total_loss_and_grads(net, x, y, cfg3, bank, pattern)
        for block in net.blocks:
            for conv in block.conv_layers():
                expected = base[conv.w.name] + 3.0 * r2_grads[conv.w.name.rsplit(".", 1)[0]]
                np.testing.assert_allclose(conv.w.grad, expected, rtol=1e-12, atol=1e-15)

    def test_components_nonnegative_and_finite(self):
        cfg, net, x, y = self._setup(lambda2=150.0)
        comps, _ = total_loss_and_grads(net, x, y, cfg)
        for key in ("ce", "r1", "r2"):
            assert np.isfinite(comps[key])
            assert comps[key] >= 0

    def test_r2_reported_even_without_penalty(self):
        cfg, net, x, y = self._setup(lambda2=0.0)
        comps, _ = total_loss_and_grads(net, x, y, cfg)
        assert comps["r2"] > 0

    def test_r1_is_half_squared_norm_of_decayed_params(self):
        _, net, _, _ = self._setup(lambda2=0.0)
        expected = 0.5 * sum(
            float(np.sum(p.data.astype(np.float64) ** 2))
            for p in net.parameters() if p.decay
        )
        assert weight_norm_half(net.parameters()) == pytest.approx(expected, rel=1e-9)


class TestOptState:
    def test_velocity_shapes_mirror_params(self):
        net = build_network((4, 4, 4, 4, 4), 10, seed=3)
        state = OptState.for_params(net.parameters())
        for p in net.parameters():
            assert state.velocity[p.name].shape == p.data.shape
            assert not state.velocity[p.name].any()
