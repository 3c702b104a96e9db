import itertools

import numpy as np
import pytest

from encoders import gen_synthetic_task
from errors import ConfigError, DomainError, PairingError
from modules.augmentation.mixup import (
    build_training_batch,
    few_shot_sample,
    mixup_pair,
    sample_lambda,
)
from utils import make_rng


# ========== Mixing coefficient ==========

def test_lambda_draws_stay_in_range():
    rng = make_rng(1, 2)
    draws = np.array([sample_lambda(rng) for _ in range(10000)])
    assert draws.min() >= 0.4 and draws.max() <= 0.6
    assert abs(draws.mean() - 0.5) < 0.01


def test_lambda_stream_is_reproducible():
    a = [sample_lambda(make_rng(3, 2)) for _ in range(3)]
    b = [sample_lambda(make_rng(3, 2)) for _ in range(3)]
    assert a == b


def test_custom_range():
    rng = make_rng(1, 2)
    assert all(0.2 <= sample_lambda(rng, (0.2, 0.3)) <= 0.3 for _ in range(100))
    with pytest.raises(ConfigError):
        sample_lambda(rng, (0.7, 0.3))


# ========== Pair mixing ==========

def test_identical_features_mix_to_themselves():
    x = np.array([0.6, 0.8])
    x_new, _ = mixup_pair(x, x, [1.0, 0.0], [0.0, 1.0], 0.5)
    np.testing.assert_array_equal(x_new, x)


def test_mix_arithmetic():
    x_new, y_new = mixup_pair([1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0], 0.4)
    np.testing.assert_allclose(x_new, [0.4, 0.6], atol=1e-15)
    np.testing.assert_allclose(y_new, [0.4, 0.6], atol=1e-15)


@pytest.mark.parametrize("lam", [0.4, 0.45, 0.5, 0.55, 0.6])
def test_mixed_label_sums_to_one(lam):
    _, y_new = mixup_pair([1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0], lam)
    assert y_new.sum() == 1.0
    assert np.count_nonzero(y_new) == 2


def test_same_class_pair_is_rejected():
    with pytest.raises(PairingError):
        mixup_pair([1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 0.0], 0.5)


def test_lambda_outside_range_is_rejected():
    with pytest.raises(DomainError):
        mixup_pair([1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0], 0.7)


# ========== Batches ==========

def test_batch_counts(small_task):
    batch = build_training_batch(small_task, 4, 4, make_rng(1, 2))
    assert batch.size == 8
    assert batch.num_mixed == 4 and batch.num_original == 4
    assert list(batch.mixed) == [False] * 4 + [True] * 4
    assert batch.class_ids == small_task.base_class_ids
    assert batch.labels.shape == (8, len(small_task.base_class_ids))


def test_batch_rows_are_unit_norm_and_labels_simplex(small_task):
    batch = build_training_batch(small_task, 4, None, make_rng(2, 2))
    np.testing.assert_allclose(np.linalg.norm(batch.features, axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(batch.labels.sum(axis=1), 1.0, atol=1e-15)
    assert batch.num_mixed == 4
    for row in batch.labels[batch.mixed]:
        assert np.count_nonzero(row) == 2


def test_mixed_rows_are_renormalized_convex_combinations(small_task):
    batch = build_training_batch(small_task, 4, 3, make_rng(4, 2))
    for k, draw in enumerate(batch.draws):
        raw = draw.lam * batch.features[draw.index_a] + (1 - draw.lam) * batch.features[draw.index_b]
        np.testing.assert_allclose(batch.features[4 + k], raw / np.linalg.norm(raw), atol=1e-12)
        assert 0.4 <= draw.lam <= 0.6


def test_no_mixing_is_plain_sampling(small_task):
    batch = build_training_batch(small_task, 4, 0, make_rng(1, 2))
    assert batch.size == 4 and batch.num_mixed == 0 and batch.draws == []
    assert set(np.count_nonzero(batch.labels, axis=1)) == {1}


def test_originals_come_from_the_train_set(small_task):
    batch = build_training_batch(small_task, 4, 2, make_rng(7, 2))
    for row in batch.features[:4]:
        assert np.any(np.all(small_task.train_features == row, axis=1))


def test_batch_is_pure_in_rng_state(small_task):
    a = build_training_batch(small_task, 4, 4, make_rng(9, 2))
    b = build_training_batch(small_task, 4, 4, make_rng(9, 2))
    assert a.features.tobytes() == b.features.tobytes()
    assert a.draws == b.draws


def test_pair_coverage(wide_task):
    base = wide_task.base_class_ids
    seen = set()
    rng = make_rng(1, 2)
    for _ in range(2000):
        batch = build_training_batch(wide_task, 4, 4, rng)
        classes = [base[int(i)] for i in np.argmax(batch.labels[:4], axis=1)]
        for draw in batch.draws:
            assert classes[draw.index_a] != classes[draw.index_b]
            seen.add((classes[draw.index_a], classes[draw.index_b]))
    assert seen == set(itertools.permutations(base, 2))


def test_batch_never_mixes_new_classes(wide_task):
    batch = build_training_batch(wide_task, 6, 6, make_rng(3, 2))
    assert batch.labels.shape[1] == len(wide_task.base_class_ids)


def test_single_class_pool_cannot_mix(small_task):
    only = small_task.train_labels == small_task.base_class_ids[0]
    task = small_task.with_train(small_task.train_features[only], small_task.train_labels[only])
    with pytest.raises(PairingError):
        build_training_batch(task, 4, 4, make_rng(1, 2))
    assert build_training_batch(task, 4, 0, make_rng(1, 2)).size == 4


def test_batch_argument_checks(small_task):
    with pytest.raises(ConfigError):
        build_training_batch(small_task, 1, 0, make_rng(1, 2))
    with pytest.raises(ConfigError):
        build_training_batch(small_task, 4, -1, make_rng(1, 2))


def test_oversized_batch_draws_with_replacement(small_task):
    batch = build_training_batch(small_task, 3 * len(small_task.train_labels), 0, make_rng(1, 2))
    assert batch.size == 3 * len(small_task.train_labels)


# ========== Few-shot sampling ==========

@pytest.fixture
def pool_task(small_encoder):
    return gen_synthetic_task(num_classes=10, dim=8, shots=4, seed=3, encoder=small_encoder,
                              context_length=4, test_per_class=5)


def test_one_shot_per_base_class(pool_task):
    task = few_shot_sample(pool_task, 1, seed=1)
    assert len(task.train_labels) == 5
    assert sorted(task.train_labels) == list(pool_task.base_class_ids)


def test_subset_is_disjoint_from_test_split(pool_task):
    task = few_shot_sample(pool_task, 2, seed=1)
    for row in task.train_features:
        assert not np.any(np.all(task.test_features["base"] == row, axis=1))
    assert task.test_features["base"] is pool_task.test_features["base"]


def test_same_seed_same_subset(pool_task):
    a = few_shot_sample(pool_task, 2, seed=4)
    b = few_shot_sample(pool_task, 2, seed=4)
    assert a.train_features.tobytes() == b.train_features.tobytes()
    assert np.array_equal(a.train_labels, b.train_labels)


def test_too_many_shots(pool_task):
    with pytest.raises(ConfigError):
        few_shot_sample(pool_task, 5, seed=1)
    with pytest.raises(ConfigError):
        few_shot_sample(pool_task, 0, seed=1)
