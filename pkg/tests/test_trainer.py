import math

import numpy as np
import pytest

import autodiff as ad
from autodiff import Tensor
from errors import ConfigError, DomainError, ShapeError, TrainingError
from modules.evaluation.evaluator import evaluate_accuracy
from modules.objectives.losses import kg_euclidean_loss, similarity_logits
from modules.objectives.mi_estimator import pre_activations
from modules.prompt.prompt_learner import encode_views
from modules.trainer import trainer as trainer_module
from modules.trainer.checkpoint import load_checkpoint, save_checkpoint, verify_config
from modules.trainer.trainer import (
    PromptTrainer,
    TrainConfig,
    lr_at,
    optimizer_step,
    prograd_project,
    train,
)
from utils import round_to_binary32


def _config(**overrides):
    values = dict(epochs=2, batch_size=4, M=4, mi_hidden=16, seed=1)
    values.update(overrides)
    return TrainConfig(**values)


# ========== Update rules ==========

def test_prograd_keeps_orthogonal_gradient():
    np.testing.assert_array_equal(prograd_project([1.0, 0.0], [0.0, 1.0]), [1.0, 0.0])


def test_prograd_removes_conflict():
    np.testing.assert_allclose(prograd_project([1.0, -1.0], [0.0, 1.0]), [1.0, 0.0], atol=1e-15)


def test_prograd_keeps_aligned_gradient(rng):
    g = rng.standard_normal(6)
    np.testing.assert_array_equal(prograd_project(g, 2.0 * g), g)


def test_prograd_result_never_opposes_general_direction(rng):
    for _ in range(1000):
        g_ce, g_general = rng.standard_normal(5), rng.standard_normal(5)
        assert prograd_project(g_ce, g_general) @ g_general >= -1e-10


def test_prograd_shape_mismatch():
    with pytest.raises(ShapeError):
        prograd_project(np.ones(3), np.ones(2))


def test_constant_schedule():
    assert all(lr_at("constant", s, 10, 0.05) == 0.05 for s in range(10))


def test_cosine_endpoints():
    assert lr_at("cosine", 0, 100, 0.01) == 0.01
    assert lr_at("cosine", 99, 100, 0.01) < 1e-5
    assert lr_at("cosine", 50, 100, 0.01) == pytest.approx(0.005)


def test_schedule_errors():
    with pytest.raises(ConfigError):
        lr_at("cosine", 10, 10, 0.01)
    with pytest.raises(ConfigError):
        lr_at("step", 0, 10, 0.01)


def test_gradient_step_on_quadratic():
    x = Tensor.parameter(1.0)
    loss = ad.scale_by_constant(ad.mul_elementwise(x, x), 0.5)
    (updated,) = optimizer_step([x], ad.backward(loss).for_params([x]), 0.1)
    assert updated.item() == pytest.approx(0.9, abs=1e-15)
    assert updated.requires_grad


def test_optimizer_shape_mismatch():
    x = Tensor.parameter([1.0, 2.0])
    with pytest.raises(ShapeError):
        optimizer_step([x], [np.ones(3)], 0.1)
    with pytest.raises(ShapeError):
        optimizer_step([x], [], 0.1)


# ========== Configuration ==========

@pytest.mark.parametrize("overrides", [
    dict(method="sgd"), dict(epochs=0), dict(batch_size=1), dict(learning_rate=0.0),
    dict(tau=-1.0), dict(schedule="step"), dict(lambda1=-1.0), dict(mix_count=-2),
])
def test_train_config_validation(overrides):
    with pytest.raises(ConfigError):
        _config(**overrides)


def test_mixup_defaults_per_method():
    assert _config(method="ours").effective_mix_count == 4
    assert _config(method="coop").effective_mix_count == 0
    assert _config(method="coop", use_mixup=True, mix_count=2).effective_mix_count == 2
    assert _config(method="ours", mix_count=0).effective_mix_count == 0


def test_from_run_config(small_config):
    config = TrainConfig.from_run_config(small_config, "kgcoop", seed=7, epochs=3)
    assert config.method == "kgcoop"
    assert config.seed == 7 and config.epochs == 3
    assert config.batch_size == small_config.batch and config.M == small_config.M
    assert config.kg_weight == small_config.kg_weight


# ========== Training ==========

def test_history_and_step_count(small_task, small_encoder):
    model = train(_config(method="coop", epochs=3), small_task, small_encoder)
    assert len(model.history) == 3
    assert model.steps == 3 * math.ceil(len(small_task.train_labels) / 4)
    assert [r.epoch for r in model.history] == [0, 1, 2]
    assert model.estimator is None


@pytest.mark.parametrize("method", ["ours", "coop", "kgcoop", "prograd"])
def test_every_method_trains(method, small_task, small_encoder):
    model = train(_config(method=method), small_task, small_encoder)
    assert all(math.isfinite(loss) for loss in model.losses)
    assert (model.estimator is not None) == (method == "ours")
    assert 0.0 <= model.history[-1].train_accuracy <= 1.0


def test_ours_without_mi_or_mixup_matches_coop(small_task, small_encoder):
    coop = train(_config(method="coop", epochs=3), small_task, small_encoder)
    ours = train(_config(method="ours", epochs=3, lambda1=0.0, lambda2=0.0, mix_count=0),
                 small_task, small_encoder)
    assert ours.losses == coop.losses
    assert ours.context.numpy().tobytes() == coop.context.numpy().tobytes()


def test_kg_term_is_zero_at_template_init(small_task, small_encoder):
    trainer = PromptTrainer(_config(method="kgcoop", ctx_init="template"), small_task, small_encoder)
    views = encode_views(trainer.context, small_task, small_encoder, class_ids=small_task.base_class_ids)
    assert kg_euclidean_loss(views.handcrafted, views.learnable).item() == 0.0


def test_context_starts_from_the_template(small_task, small_encoder):
    trainer = PromptTrainer(_config(method="coop"), small_task, small_encoder)
    assert trainer.context.numpy().tobytes() == small_task.template_tokens.tobytes()


def test_estimator_starts_at_cosine_scale(small_task, small_encoder):
    trainer = PromptTrainer(_config(method="ours"), small_task, small_encoder)
    base = small_task.handcrafted[list(small_task.base_class_ids)]
    views = similarity_logits(base, small_task.train_features, trainer.config.tau).values
    assert np.abs(views).max() > 50.0
    assert np.abs(pre_activations(trainer.estimator, views)).max() < 5.0


def test_training_is_deterministic(small_task, small_encoder):
    first = train(_config(method="ours"), small_task, small_encoder)
    second = train(_config(method="ours"), small_task, small_encoder)
    assert first.losses == second.losses
    assert first.context.numpy().tobytes() == second.context.numpy().tobytes()
    for a, b in zip(first.estimator.arrays(), second.estimator.arrays()):
        assert a.tobytes() == b.tobytes()


def test_final_parameters_are_binary32(small_task, small_encoder):
    model = train(_config(method="ours"), small_task, small_encoder)
    values = model.context.numpy()
    np.testing.assert_array_equal(values, round_to_binary32(values))
    for array in model.estimator.arrays():
        np.testing.assert_array_equal(array, round_to_binary32(array))


def test_divergence_reports_the_step(small_task, small_encoder, monkeypatch):
    original = trainer_module.cross_entropy_from_logits
    calls = {"n": 0}

    def failing(logits, labels):
        calls["n"] += 1
        if calls["n"] == 3:
            raise DomainError("log of a nonpositive value")
        return original(logits, labels)

    monkeypatch.setattr(trainer_module, "cross_entropy_from_logits", failing)
    with pytest.raises(TrainingError) as info:
        train(_config(method="coop"), small_task, small_encoder)
    assert info.value.step == 2


def test_gradient_audit_runs_once_per_epoch(small_task, small_encoder):
    model = train(_config(method="ours", audit_gradients=True, tau=0.1), small_task, small_encoder)
    errors = [record.audit_error for record in model.history]
    assert all(e is not None and e < 1e-3 for e in errors)
    coop = train(_config(method="coop", audit_gradients=True), small_task, small_encoder)
    assert all(record.audit_error is None for record in coop.history)


def test_trainer_rejects_mismatched_encoder(small_task):
    from encoders import SyntheticTextEncoder
    with pytest.raises(ShapeError):
        PromptTrainer(_config(), small_task, SyntheticTextEncoder.from_seed(0, 6, 8))


def test_trainer_needs_training_data(small_task, small_encoder):
    empty = small_task.with_train(np.zeros((0, 8)), np.zeros(0, dtype=np.int64))
    with pytest.raises(ConfigError):
        PromptTrainer(_config(), empty, small_encoder)


# ========== Checkpoints ==========

def test_checkpoint_round_trip_preserves_metrics(tmp_path, small_task, small_encoder):
    model = train(_config(method="ours"), small_task, small_encoder)
    loaded = load_checkpoint(save_checkpoint(model, tmp_path / "ours.ptes"))
    assert loaded.context.numpy().tobytes() == model.context.numpy().tobytes()
    for a, b in zip(loaded.estimator.arrays(), model.estimator.arrays()):
        assert a.tobytes() == b.tobytes()
    assert loaded.config_hash == model.config_hash
    assert loaded.steps == model.steps and loaded.losses == model.losses
    for split in ("base", "new"):
        assert (evaluate_accuracy(loaded, small_task, split, small_encoder)
                == evaluate_accuracy(model, small_task, split, small_encoder))


def test_coop_checkpoint_has_no_estimator(tmp_path, small_task, small_encoder):
    model = train(_config(method="coop"), small_task, small_encoder)
    loaded = load_checkpoint(save_checkpoint(model, tmp_path / "coop.ptes"))
    assert loaded.estimator is None
    assert 0.0 <= evaluate_accuracy(loaded, small_task, "new", small_encoder) <= 1.0


def test_config_hash_mismatch_is_recorded(tmp_path, small_task, small_encoder):
    model = train(_config(method="coop"), small_task, small_encoder)
    path = save_checkpoint(model, tmp_path / "coop.ptes")
    assert verify_config(load_checkpoint(path), model.config)
    other = dict(model.config, learning_rate=0.5)
    loaded = load_checkpoint(path, expected_config=other)
    assert len(loaded.meta["warnings"]) == 1
    assert "mismatch" in loaded.meta["warnings"][0]
