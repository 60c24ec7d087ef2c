"""
优化器与学习率调度测试
"""
import numpy as np
import pytest

from exceptions import ConfigError, ValidationError
from optimizer import SGD, TrainerConfig, effective_learning_rate, sgd_step


class TestTrainerConfig:
    """训练配置"""

    @pytest.mark.parametrize("changes", [
        {"learning_rate": 0.0},
        {"momentum": 1.0},
        {"momentum": -0.1},
        {"weight_decay": -1e-4},
        {"lr_decay_factor": 0.0},
        {"lr_decay_factor": 1.5},
        {"batch_size": 0},
    ])
    def test_invalid_values(self, changes):
        with pytest.raises(ConfigError):
            TrainerConfig(**changes)

    def test_from_dict_unknown_key(self):
        with pytest.raises(ConfigError) as exc:
            TrainerConfig.from_dict({"learning_rate": 0.1, "nesterov": True})
        assert exc.value.config_key == "nesterov"

    def test_loader_seed_defaults_to_seed(self):
        assert TrainerConfig(seed=7).loader_seed == 7
        assert TrainerConfig(seed=7, shuffle_seed=3).loader_seed == 3

    def test_dict_round_trip(self):
        cfg = TrainerConfig(learning_rate=0.2, seed=4, augment=True)
        assert TrainerConfig.from_dict(cfg.to_dict()) == cfg


class TestLearningRate:
    """阶梯式衰减"""

    def test_step_decay(self):
        cfg = TrainerConfig(learning_rate=0.1, lr_decay_factor=0.1, lr_decay_period_epochs=60)
        assert effective_learning_rate(cfg, 0) == 0.1
        assert effective_learning_rate(cfg, 59) == 0.1
        assert effective_learning_rate(cfg, 60) == pytest.approx(0.01, rel=1e-12)
        assert effective_learning_rate(cfg, 120) == pytest.approx(0.001, rel=1e-12)

    def test_non_increasing(self):
        cfg = TrainerConfig(learning_rate=0.05, lr_decay_factor=0.5, lr_decay_period_epochs=3)
        rates = [effective_learning_rate(cfg, e) for e in range(30)]
        assert all(b <= a for a, b in zip(rates, rates[1:]))


class TestSGDStep:
    """SGD 更新"""

    def test_plain_gradient_step(self):
        cfg = TrainerConfig(learning_rate=0.1, momentum=0.0, weight_decay=0.0)
        w = np.array([1.0, -2.0])
        g = np.array([0.5, 0.25])
        params, _ = sgd_step({"w": w.copy()}, {"w": g}, {}, cfg, epoch=0)
        np.testing.assert_allclose(params["w"], w - 0.1 * g, rtol=0, atol=1e-15)

    def test_two_momentum_steps(self):
        cfg = TrainerConfig(learning_rate=0.1, momentum=0.9, weight_decay=0.0)
        params = {"w": np.array([1.0])}
        velocity = {}
        grads = {"w": np.array([0.5])}
        sgd_step(params, grads, velocity, cfg, epoch=0)
        sgd_step(params, grads, velocity, cfg, epoch=0)
        assert params["w"][0] == pytest.approx(1.0 - 0.1 * 0.5 * 2.9, abs=1e-14)

    def test_weight_decay_added_to_gradient(self):
        cfg = TrainerConfig(learning_rate=1.0, momentum=0.0, weight_decay=0.5)
        params = {"w": np.array([2.0])}
        sgd_step(params, {"w": np.array([0.0])}, {}, cfg, epoch=0)
        assert params["w"][0] == pytest.approx(1.0)

    def test_name_mismatch(self):
        cfg = TrainerConfig()
        with pytest.raises(ValidationError):
            sgd_step({"a": np.zeros(2)}, {"b": np.zeros(2)}, {}, cfg, epoch=0)

    def test_optimizer_keeps_velocity(self):
        opt = SGD(TrainerConfig(learning_rate=0.1, momentum=0.9, weight_decay=0.0))
        params = {"w": np.zeros(3)}
        opt.step(params, {"w": np.ones(3)}, epoch=0)
        np.testing.assert_array_equal(opt.velocity["w"], np.ones(3))
        assert opt.learning_rate(0) == 0.1
