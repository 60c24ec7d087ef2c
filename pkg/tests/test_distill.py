"""
知识蒸馏测试
"""
import math

import numpy as np
import pytest

from distill import (
    DistillConfig, kd_loss, kd_loss_and_grad, student_total_loss, student_total_loss_and_grad,
    teacher_average, temperature_softmax,
)
from exceptions import ConfigError, ValidationError
from gradient_check import relative_error
from nn_core import softmax


def random_rows(rng, n, k):
    return softmax(rng.standard_normal((n, k)))


class TestTemperatureSoftmax:
    """温度 softmax"""

    def test_high_temperature_is_uniform(self, rng):
        probs = temperature_softmax(rng.standard_normal((3, 5)) * 10, 1e6).probs
        np.testing.assert_allclose(probs, 0.2, atol=1e-4)

    def test_unit_temperature(self, rng):
        logits = rng.standard_normal((4, 3))
        np.testing.assert_array_equal(temperature_softmax(logits, 1.0).probs, softmax(logits))

    def test_worked_value(self):
        soft = temperature_softmax(np.array([[2.0, 0.0]]), 2.0)
        np.testing.assert_allclose(soft.probs, [[0.731059, 0.268941]], atol=1e-6)
        assert soft.temperature == 2.0

    def test_rows_normalized(self, rng):
        probs = temperature_softmax(rng.standard_normal((6, 4)) * 100, 0.5).probs
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
        assert probs.min() >= 0

    def test_non_positive_tau(self):
        with pytest.raises(ValidationError):
            temperature_softmax(np.zeros((1, 2)), 0.0)


class TestTeacherAverage:
    """多教师平均"""

    def test_single_teacher(self, rng):
        probs = random_rows(rng, 3, 4)
        np.testing.assert_array_equal(teacher_average([probs]), probs)

    def test_opposite_one_hots(self):
        avg = teacher_average([np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])])
        np.testing.assert_array_equal(avg, [[0.5, 0.5]])

    def test_matches_loop(self, rng):
        teachers = [random_rows(rng, 5, 4) for _ in range(3)]
        expected = np.zeros((5, 4))
        for probs in teachers:
            expected += probs
        expected /= 3
        avg = teacher_average(teachers)
        np.testing.assert_allclose(avg, expected, rtol=0, atol=1e-15)
        np.testing.assert_allclose(avg.sum(axis=1), 1.0, atol=1e-12)

    def test_accepts_soft_targets(self, rng):
        soft = temperature_softmax(rng.standard_normal((2, 3)), 2.0)
        np.testing.assert_array_equal(teacher_average([soft]), soft.probs)

    def test_empty(self):
        with pytest.raises(ValidationError):
            teacher_average([])

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            teacher_average([np.full((1, 2), 0.5), np.full((1, 3), 1 / 3)])


class TestKDLoss:
    """KD 损失"""

    def test_matching_one_hot(self):
        logits = np.array([[50.0, 0.0, 0.0]])
        assert kd_loss(logits, np.array([[1.0, 0.0, 0.0]]), 1.0) <= 1e-8

    def test_uniform_four_classes(self):
        loss = kd_loss(np.zeros((2, 4)), np.full((2, 4), 0.25), 1.0)
        assert loss == pytest.approx(math.log(4), abs=1e-12)

    def test_tau_squared_scaling(self, rng):
        logits = rng.standard_normal((3, 4))
        teacher = random_rows(rng, 3, 4)
        ratio = kd_loss(2.0 * logits, teacher, 2.0) / kd_loss(logits, teacher, 1.0)
        assert ratio == 4.0

    def test_minimized_at_teacher(self, rng):
        teacher_logits = rng.standard_normal((4, 5))
        tau = 2.0
        teacher = temperature_softmax(teacher_logits, tau).probs
        best = kd_loss(teacher_logits, teacher, tau)
        for _ in range(20):
            perturbed = teacher_logits + rng.standard_normal((4, 5)) * 0.5
            assert best <= kd_loss(perturbed, teacher, tau)

    def test_gradient_matches_finite_differences(self, rng):
        logits = rng.standard_normal((3, 4))
        teacher = random_rows(rng, 3, 4)
        _, grad = kd_loss_and_grad(logits, teacher, 2.0)
        eps = 1e-5
        for index in np.ndindex(logits.shape):
            plus = logits.copy()
            minus = logits.copy()
            plus[index] += eps
            minus[index] -= eps
            numeric = (kd_loss(plus, teacher, 2.0) - kd_loss(minus, teacher, 2.0)) / (2 * eps)
            assert relative_error(grad[index], numeric) < 1e-5

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            kd_loss(np.zeros((2, 3)), np.full((2, 4), 0.25), 1.0)


class TestStudentTotalLoss:
    """学生总损失"""

    def test_zero_kd_weight(self, rng):
        logits = rng.standard_normal((4, 3))
        labels = np.array([0, 1, 2, 1])
        total, ce, kd = student_total_loss(logits, labels, random_rows(rng, 4, 3), DistillConfig(kd_weight=0.0))
        assert total == ce
        assert kd > 0

    def test_no_teacher(self, rng):
        logits = rng.standard_normal((2, 3))
        total, ce, kd = student_total_loss(logits, np.array([0, 2]), None, DistillConfig())
        assert kd == 0.0 and total == ce

    def test_teacher_equals_own_distribution(self):
        tau = 2.0
        logits = np.array([[1.0, 0.0]])
        own = temperature_softmax(logits, tau).probs
        _, _, kd = student_total_loss(logits, np.array([0]), own, DistillConfig(temperature=tau))
        p = 1.0 / (1.0 + math.exp(-0.5))
        entropy = -(p * math.log(p) + (1 - p) * math.log(1 - p))
        assert kd == pytest.approx(tau * tau * entropy, abs=1e-12)

    def test_total_gradient_matches_finite_differences(self, rng):
        logits = rng.standard_normal((3, 4))
        labels = np.array([1, 0, 3])
        teacher = random_rows(rng, 3, 4)
        cfg = DistillConfig(temperature=2.0, kd_weight=0.7)
        _, _, _, grad = student_total_loss_and_grad(logits, labels, teacher, cfg)
        eps = 1e-5
        for index in np.ndindex(logits.shape):
            plus = logits.copy()
            minus = logits.copy()
            plus[index] += eps
            minus[index] -= eps
            numeric = (
                student_total_loss(plus, labels, teacher, cfg)[0]
                - student_total_loss(minus, labels, teacher, cfg)[0]
            ) / (2 * eps)
            assert relative_error(grad[index], numeric) < 1e-5

    def test_batch_permutation_equivariance(self, rng):
        logits = rng.standard_normal((5, 3))
        labels = rng.integers(0, 3, size=5)
        teacher = random_rows(rng, 5, 3)
        order = rng.permutation(5)
        cfg = DistillConfig()
        a = student_total_loss(logits, labels, teacher, cfg)[0]
        b = student_total_loss(logits[order], labels[order], teacher[order], cfg)[0]
        assert a == pytest.approx(b, abs=1e-12)


class TestDistillConfig:
    """蒸馏配置"""

    def test_invalid(self):
        with pytest.raises(ConfigError):
            DistillConfig(temperature=0.0)
        with pytest.raises(ConfigError):
            DistillConfig(kd_weight=-1.0)

    def test_dict_round_trip(self):
        cfg = DistillConfig(temperature=3.0, kd_weight=0.5)
        assert DistillConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            DistillConfig.from_dict({"temperature": 2.0, "alpha": 0.5})
