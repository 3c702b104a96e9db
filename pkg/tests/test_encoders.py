import numpy as np
import pytest

import autodiff as ad
from autodiff import Tensor
from encoders import (
    SyntheticTextEncoder,
    encode_prompts,
    encoder_for_task,
    gen_synthetic_task,
    load_task,
    save_task,
    shift_task,
    synth_text_encode,
)
from errors import ConfigError, DomainError, ShapeError
from modules.evaluation.evaluator import evaluate_accuracy


def test_encoder_weights_are_reproducible():
    a = SyntheticTextEncoder.from_seed(7, 4, 8)
    b = SyntheticTextEncoder.from_seed(7, 4, 8)
    for name in ("w1", "b1", "w2", "b2"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    assert a.w1.shape == (8, 4) and a.w2.shape == (4, 8)


def test_encode_is_deterministic_and_unit_norm(rng):
    encoder = SyntheticTextEncoder.from_seed(3, 6, 10)
    tokens = [rng.standard_normal(6) for _ in range(3)]
    first = synth_text_encode(encoder, tokens).values
    second = synth_text_encode(encoder, tokens).values
    assert first.tobytes() == second.tobytes()
    assert abs(np.linalg.norm(first) - 1.0) < 1e-12


def test_encode_matches_straight_line_formula():
    encoder = SyntheticTextEncoder.from_seed(7, 4, 8)
    tokens = [np.array([1.0, 0.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0, 0.0])]
    pooled = np.array([0.5, 0.5, 0.0, 0.0])
    hidden = np.tanh(encoder.w1 @ pooled + encoder.b1)
    out = encoder.w2 @ hidden + encoder.b2
    expected = out / np.sqrt(np.sum(out ** 2))
    np.testing.assert_allclose(synth_text_encode(encoder, tokens).values, expected, atol=1e-12, rtol=0)


def test_encode_errors():
    encoder = SyntheticTextEncoder.from_seed(1, 4, 8)
    with pytest.raises(DomainError):
        synth_text_encode(encoder, [])
    with pytest.raises(ShapeError):
        synth_text_encode(encoder, [np.ones(3)])


def test_gradients_flow_to_tokens(rng):
    encoder = SyntheticTextEncoder.from_seed(2, 5, 7)
    tokens = Tensor.parameter(rng.standard_normal((3, 5)))
    weights = Tensor(rng.standard_normal(5))
    grads = ad.backward(ad.sum(ad.mul_elementwise(synth_text_encode(encoder, tokens), weights)))
    assert np.any(grads[tokens].values != 0)


def test_batched_prompts_match_single_encodes(rng):
    encoder = SyntheticTextEncoder.from_seed(4, 6, 9)
    context = rng.standard_normal((3, 6))
    class_tokens = rng.standard_normal((4, 6))
    batched = encode_prompts(encoder, Tensor(context), class_tokens).values
    for i, c in enumerate(class_tokens):
        single = synth_text_encode(encoder, np.vstack([context, c])).values
        np.testing.assert_allclose(batched[i], single, atol=1e-12)


def test_noise_free_task_is_perfectly_classified():
    task = gen_synthetic_task(num_classes=6, dim=16, shots=3, noise_sigma=0.0, prototype_perturb=0.0, seed=4)
    assert np.array_equal(task.train_features, task.handcrafted[task.train_labels])
    for split in ("base", "new"):
        features, labels = task.test_split(split)
        assert np.array_equal(features, task.handcrafted[labels])
        assert evaluate_accuracy(None, task, split, encoder_for_task(task)) == 1.0


def test_train_set_counts():
    task = gen_synthetic_task(num_classes=10, dim=16, shots=4, seed=1)
    assert len(task.train_labels) == 20
    assert set(task.train_labels) <= set(task.base_class_ids)
    assert all(np.sum(task.train_labels == c) == 4 for c in task.base_class_ids)
    assert task.shots == 4


def test_split_is_disjoint_and_covering():
    task = gen_synthetic_task(num_classes=10, dim=16, shots=2, seed=1)
    assert task.base_class_ids == (0, 1, 2, 3, 4)
    assert task.new_class_ids == (5, 6, 7, 8, 9)
    assert set(task.base_class_ids).isdisjoint(task.new_class_ids)
    assert set(task.base_class_ids) | set(task.new_class_ids) == set(range(10))
    assert set(task.test_labels["new"]) == set(task.new_class_ids)


def test_generation_is_pure(small_encoder):
    kwargs = dict(num_classes=4, dim=8, shots=2, noise_sigma=0.3, prototype_perturb=0.2, seed=9,
                  encoder=small_encoder, context_length=4, test_per_class=5)
    a, b = gen_synthetic_task(**kwargs), gen_synthetic_task(**kwargs)
    for name in ("class_tokens", "template_tokens", "handcrafted", "prototypes", "train_features"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    assert a.test_features["new"].tobytes() == b.test_features["new"].tobytes()


def test_all_features_unit_norm(small_task):
    rows = [small_task.handcrafted, small_task.prototypes, small_task.train_features,
            small_task.test_features["base"], small_task.test_features["new"]]
    for matrix in rows:
        np.testing.assert_allclose(np.linalg.norm(matrix, axis=1), 1.0, atol=1e-12)


@pytest.mark.parametrize("kwargs", [
    dict(num_classes=3), dict(num_classes=0), dict(dim=1), dict(shots=0),
    dict(noise_sigma=-0.1), dict(prototype_perturb=-1.0),
])
def test_invalid_sizes(kwargs):
    args = dict(num_classes=4, dim=8, shots=2, seed=1)
    args.update(kwargs)
    with pytest.raises(ConfigError):
        gen_synthetic_task(**args)


def test_zero_shot_accuracy_matches_brute_force_argmax():
    task = gen_synthetic_task(num_classes=10, dim=32, shots=16, noise_sigma=0.3, prototype_perturb=0.2, seed=1)
    features, labels = task.test_split("base")
    correct = 0
    for f, y in zip(features, labels):
        scores = [float(np.dot(task.handcrafted[c], f)) for c in task.base_class_ids]
        correct += task.base_class_ids[int(np.argmax(scores))] == y
    expected = correct / len(labels)
    assert evaluate_accuracy(None, task, "base", encoder_for_task(task)) == expected
    assert expected > 1.0 / len(task.base_class_ids)


@pytest.mark.parametrize("dim", [8, 64])
def test_sample_noise_norm_does_not_grow_with_dim(dim):
    task = gen_synthetic_task(num_classes=4, dim=dim, shots=200, noise_sigma=0.3, prototype_perturb=0.0, seed=3)
    cosines = np.sum(task.train_features * task.handcrafted[task.train_labels], axis=1)
    assert np.mean(cosines) == pytest.approx(1.0 / np.sqrt(1.0 + 0.3 ** 2), abs=0.02)


def test_zero_shot_base_accuracy_on_the_default_task_is_frozen():
    correct = total = 0
    for seed in (1, 2, 3):
        task = gen_synthetic_task(num_classes=10, dim=32, shots=16, noise_sigma=0.3, prototype_perturb=0.2,
                                  seed=seed)
        features, labels = task.test_split("base")
        scores = features @ task.handcrafted[list(task.base_class_ids)].T
        predicted = np.asarray(task.base_class_ids)[np.argmax(scores, axis=1)]
        correct += int(np.sum(predicted == labels))
        total += len(labels)
    assert (correct, total) == (670, 750)


def test_template_context_reproduces_handcrafted(small_task, small_encoder):
    learnable = encode_prompts(small_encoder, Tensor(small_task.template_tokens), small_task.class_tokens)
    assert learnable.values.tobytes() == small_task.handcrafted.tobytes()


def test_task_file_round_trip(tmp_path, small_task):
    loaded = load_task(save_task(small_task, tmp_path / "task.ptes"))
    assert loaded.base_class_ids == small_task.base_class_ids
    assert np.array_equal(loaded.train_labels, small_task.train_labels)
    assert np.array_equal(loaded.test_labels["new"], small_task.test_labels["new"])
    np.testing.assert_allclose(loaded.train_features, small_task.train_features, atol=1e-6)
    np.testing.assert_allclose(np.linalg.norm(loaded.train_features, axis=1), 1.0, atol=1e-12)
    assert loaded.encoder_seed == small_task.encoder_seed
    assert encoder_for_task(loaded).w1.tobytes() == encoder_for_task(small_task).w1.tobytes()


def test_shift_task_keeps_text_view(small_task):
    shifted = shift_task(small_task, 0.4, seed=3)
    assert shifted.handcrafted is small_task.handcrafted
    assert not np.array_equal(shifted.prototypes, small_task.prototypes)
    assert shifted.test_features["base"].shape == small_task.test_features["base"].shape
    unshifted = shift_task(small_task, 0.0, seed=3)
    assert np.array_equal(unshifted.prototypes, small_task.prototypes)
    with pytest.raises(ConfigError):
        shift_task(small_task, -0.1, seed=3)
