# -*- coding: utf-8 -*-
import numpy as np
import pytest

from cil_errors import ConfigurationError, InvariantViolation
from mc_mix import (ClassWeights, MixSchedule, class_weights, lambda_hat, mc_mix_batch, mean_function, mix_batch,
                    mix_labels, passthrough_batch, sample_cut_mask, sample_lambda, schedule_value)


def _batch(n=16, classes=6, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.uniform(size=(n, 8, 8, 3)).astype(np.float32)
    labels = rng.integers(0, classes, size=n)
    return images, labels


# --- schedule ---

def test_sigmoid_is_half_at_centre():
    schedule = MixSchedule(gamma=0.5, tau=0.6, total_epochs=240)
    assert schedule.centre == 144.0
    assert schedule_value(schedule, 144) == 0.5


def test_schedule_kinds_at_and_around_centre():
    linear = MixSchedule(kind="linear", gamma=0.5, tau=0.5, total_epochs=100)
    step = MixSchedule(kind="step", tau=0.5, total_epochs=100)
    assert schedule_value(linear, 50) == 0.5
    assert schedule_value(linear, 51) == pytest.approx(0.625)
    assert schedule_value(linear, 0) == 0.0 and schedule_value(linear, 100) == 1.0
    assert schedule_value(step, 49.9) == 0.0 and schedule_value(step, 50) == 1.0
    assert schedule_value(MixSchedule(kind="constant"), 0) == 1.0


def test_mean_function_transitions():
    schedule = MixSchedule(gamma=0.5, tau=0.6, total_epochs=240)
    assert mean_function(0.5, schedule, 0) == pytest.approx(0.5, abs=1e-12)
    assert mean_function(0.5, schedule, 144) == pytest.approx(0.625)
    assert mean_function(0.5, schedule, 240) == pytest.approx(0.75, abs=1e-12)
    assert mean_function(-0.5, schedule, 240) == pytest.approx(0.25, abs=1e-12)


@pytest.mark.parametrize("w", [-0.5, 0.0, 0.5])
def test_empirical_mean_of_lambda_hat(w):
    rng = np.random.default_rng(11)
    schedule = MixSchedule(gamma=0.5, tau=0.6, total_epochs=240)
    epoch = 150
    sigma = schedule_value(schedule, epoch)
    lams = rng.beta(1.0, 1.0, size=100_000)
    values = lambda_hat(lams, w, sigma)
    se = (w * sigma + 1.0) * np.sqrt(1.0 / 12.0) / np.sqrt(len(lams))
    assert abs(values.mean() - mean_function(w, schedule, epoch)) < 3 * se


# --- class weights ---

def test_class_weights_exact():
    weights = class_weights({0: 10, 1: 10, 2: 2})
    assert weights[0] == pytest.approx(3 * 0.1 / 0.7 - 1)
    assert weights[2] == pytest.approx(3 * 0.5 / 0.7 - 1)
    assert sum(weights.w.values()) == pytest.approx(0.0, abs=1e-12)
    assert weights[2] > 0 > weights[0]


def test_balanced_counts_give_zero_weights():
    weights = class_weights({c: 7 for c in range(5)})
    assert all(v == 0.0 for v in weights.w.values())


def test_class_weights_reject_empty_class():
    with pytest.raises(InvariantViolation):
        class_weights({0: 3, 1: 0})


# --- coefficients and masks ---

def test_sample_lambda_rejects_bad_alpha(rng):
    with pytest.raises(ConfigurationError):
        sample_lambda(0.0, rng)


def test_uniform_beta_mean_is_half(rng):
    draws = np.array([sample_lambda(1.0, rng) for _ in range(100_000)])
    assert abs(draws.mean() - 0.5) < 3 * np.sqrt(1.0 / 12.0 / len(draws))


def test_small_alpha_is_u_shaped(rng):
    draws = np.array([sample_lambda(0.2, rng) for _ in range(20_000)])
    edges = np.mean((draws < 0.1) | (draws > 0.9))
    middle = np.mean((draws > 0.4) & (draws < 0.6))
    assert edges > 0.5
    assert middle < 0.1
    assert edges > 5 * middle


def test_mask_fraction_is_exact(rng):
    for _ in range(10_000):
        mask, lam = sample_cut_mask(8, 12, rng.beta(1.0, 1.0), rng)
        assert lam == mask.sum() / 96
        assert set(np.unique(mask)) <= {0, 1}


def test_full_size_cut_covers_image(rng):
    mask, lam = sample_cut_mask(8, 8, 0.0, rng)
    assert lam == 0.0 and mask.sum() == 0


def test_batch_labels_use_realized_mask_fraction():
    images, labels = _batch()
    batch = mc_mix_batch(images, labels, 3, ClassWeights.zeros(range(6)), MixSchedule(), 1.0,
                         np.random.default_rng(2), num_classes=6)
    for i in range(len(labels)):
        assert batch.lambdas[i, 0] == batch.masks[i].sum() / 64
        assert batch.soft_labels[i].sum() == pytest.approx(1.0)
        expected = batch.masks[i][..., None] * images[i] + (1 - batch.masks[i][..., None]) * images[batch.pairing[i]]
        np.testing.assert_allclose(batch.images[i], expected)


def test_mix_labels_scales_each_side():
    schedule = MixSchedule(kind="constant")
    weights = ClassWeights({0: 0.5, 1: -0.5}, {0: 1, 1: 3})
    label = mix_labels(0, 1, 0.4, 0, weights, schedule, 3)
    np.testing.assert_allclose(label, [1.5 * 0.4, 0.5 * 0.6, 0.0])


def test_zero_weights_constant_schedule_reproduce_cutmix_bitwise():
    images, labels = _batch(n=32)
    batch = mc_mix_batch(images, labels, 7, ClassWeights.zeros(range(6)), MixSchedule(kind="constant"), 1.0,
                         np.random.default_rng(9), num_classes=6)
    for i in range(len(labels)):
        lam = batch.lambdas[i, 0]
        reference = np.zeros(6)
        reference[labels[i]] += lam
        reference[labels[batch.pairing[i]]] += 1.0 - lam
        assert np.array_equal(batch.soft_labels[i], reference)

    cutmix = mix_batch("cutmix", images, labels, 7, class_weights({c: 1 + c for c in range(6)}), MixSchedule(),
                       1.0, np.random.default_rng(9), 6, task_index=2)
    assert np.array_equal(cutmix.soft_labels, batch.soft_labels)
    assert np.array_equal(cutmix.images, batch.images)


def test_passthrough_for_first_task_and_single_sample():
    images, labels = _batch(n=4)
    for batch in (mc_mix_batch(images, labels, 0, ClassWeights.zeros(range(6)), MixSchedule(), 1.0,
                               np.random.default_rng(0), 6, task_index=1),
                  mc_mix_batch(images[:1], labels[:1], 0, ClassWeights.zeros(range(6)), MixSchedule(), 1.0,
                               np.random.default_rng(0), 6, task_index=2)):
        assert batch.masks is None
        np.testing.assert_array_equal(batch.soft_labels.argmax(axis=1), batch.labels_i)
        np.testing.assert_array_equal(batch.images, images[:len(batch.labels_i)])


def test_mixup_interpolates_whole_images():
    images, labels = _batch(n=8)
    batch = mix_batch("mixup", images, labels, 0, ClassWeights.zeros(range(6)), MixSchedule(), 1.0,
                      np.random.default_rng(4), 6, task_index=2)
    assert batch.masks is None
    i = 3
    lam = batch.lambdas[i, 0]
    np.testing.assert_allclose(batch.images[i], lam * images[i] + (1 - lam) * images[batch.pairing[i]], rtol=1e-6)


def test_none_method_is_passthrough():
    images, labels = _batch(n=8)
    batch = mix_batch("none", images, labels, 0, ClassWeights.zeros(range(6)), MixSchedule(), 1.0,
                      np.random.default_rng(4), 6, task_index=3)
    np.testing.assert_array_equal(batch.images, images)


def test_unknown_method():
    images, labels = _batch(n=4)
    with pytest.raises(ConfigurationError):
        mix_batch("patchmix", images, labels, 0, ClassWeights.zeros(range(6)), MixSchedule(), 1.0,
                  np.random.default_rng(0), 6, 2)


def test_dominant_labels_prefer_larger_lambda_hat():
    batch = passthrough_batch(np.zeros((3, 8, 8, 1)), np.array([0, 1, 2]), 3)
    batch.labels_j = np.array([5, 6, 7])
    batch.lambdas = np.array([[0.3, 0.3, 0.7], [0.5, 0.5, 0.5], [0.9, 0.9, 0.1]])
    np.testing.assert_array_equal(batch.dominant_labels(), [5, 1, 2])
