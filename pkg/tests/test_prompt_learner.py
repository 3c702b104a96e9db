import math

import numpy as np
import pytest

import autodiff as ad
from autodiff import Tensor
from encoders import SyntheticTextEncoder
from errors import ConfigError, ShapeError
from gradcheck import finite_difference_check
from modules.prompt.prompt_learner import (
    PromptContext,
    assemble_prompt,
    context_from_template,
    encode_views,
    init_context,
)


def test_init_is_seeded():
    a = init_context(4, 8, 0.02, seed=5)
    b = init_context(4, 8, 0.02, seed=5)
    assert a.numpy().tobytes() == b.numpy().tobytes()
    assert a.vectors.requires_grad


def test_init_shape():
    ctx = init_context(16, 64, 0.02, seed=1)
    assert ctx.vectors.shape == (16, 64)
    assert (ctx.M, ctx.dim) == (16, 64)


def test_init_mean_is_near_zero():
    values = init_context(16, 64, 0.02, seed=3).numpy()
    assert abs(values.mean()) < 3 * 0.02 / math.sqrt(values.size)


@pytest.mark.parametrize("args", [(0, 8, 0.02), (4, 0, 0.02), (4, 8, 0.0), (4, 8, -1.0)])
def test_init_rejects_bad_sizes(args):
    with pytest.raises(ConfigError):
        init_context(*args, seed=1)


def test_context_must_be_a_matrix():
    with pytest.raises(ShapeError):
        PromptContext(Tensor([1.0, 2.0]))


def test_update_replaces_the_leaf():
    ctx = init_context(2, 3, 0.02, seed=1)
    old = ctx.vectors
    ctx.update(np.ones((2, 3)))
    assert ctx.vectors is not old
    assert ctx.vectors.requires_grad
    np.testing.assert_array_equal(ctx.numpy(), np.ones((2, 3)))
    with pytest.raises(ShapeError):
        ctx.update(np.ones((3, 3)))


def test_assemble_single_context_token():
    ctx = PromptContext.from_values(np.array([[1.0, 0.0]]))
    prompt = assemble_prompt(ctx, [0.0, 1.0])
    np.testing.assert_array_equal(prompt.values, [[1.0, 0.0], [0.0, 1.0]])


@pytest.mark.parametrize("M", [1, 3, 16])
def test_assemble_length(M, rng):
    ctx = PromptContext.from_values(rng.standard_normal((M, 5)))
    assert assemble_prompt(ctx, rng.standard_normal(5)).shape == (M + 1, 5)


def test_assemble_dim_mismatch(rng):
    ctx = PromptContext.from_values(rng.standard_normal((2, 5)))
    with pytest.raises(ShapeError):
        assemble_prompt(ctx, np.ones(4))


def test_context_gradient_does_not_depend_on_class_token(rng):
    ctx = PromptContext.from_values(rng.standard_normal((3, 4)))
    weights = Tensor(rng.standard_normal((4, 4)))
    grads = []
    for token in (np.zeros(4), rng.standard_normal(4)):
        loss = ad.sum(ad.mul_elementwise(assemble_prompt(ctx, token), weights))
        grads.append(ad.backward(loss)[ctx.vectors].values)
        ctx.update(ctx.numpy())
    np.testing.assert_array_equal(grads[0], grads[1])


def test_learnable_rows_are_unit_norm(small_task, small_encoder):
    views = encode_views(init_context(4, 8, 0.02, seed=1), small_task, small_encoder, tau=0.01)
    np.testing.assert_allclose(np.linalg.norm(views.learnable.values, axis=1), 1.0, atol=1e-12)
    assert views.num_classes == small_task.num_classes


def test_handcrafted_rows_are_copied(small_task, small_encoder):
    views = encode_views(init_context(4, 8, 0.02, seed=1), small_task, small_encoder, 0.01, class_ids=(2, 0))
    np.testing.assert_array_equal(views.handcrafted.values, small_task.handcrafted[[2, 0]])
    assert not views.handcrafted.requires_grad
    assert views.class_ids == (2, 0)


def test_subset_rows_match_full_encoding(small_task, small_encoder):
    ctx = init_context(4, 8, 0.02, seed=2)
    full = encode_views(ctx, small_task, small_encoder).learnable.values
    base = encode_views(ctx, small_task, small_encoder, class_ids=small_task.base_class_ids).learnable.values
    assert base.tobytes() == full[list(small_task.base_class_ids)].tobytes()


def test_learnable_view_gradient(small_task, small_encoder):
    ctx = init_context(4, 8, 0.5, seed=4)

    def objective(params):
        views = encode_views(PromptContext(params[0]), small_task, small_encoder)
        return ad.sum(ad.mul_elementwise(views.learnable, Tensor(small_task.prototypes)))

    grads = ad.backward(objective([ctx.vectors]))
    assert np.any(grads[ctx.vectors].values != 0)
    assert finite_difference_check(objective, [Tensor(ctx.numpy())]) < 1e-5


def test_encode_views_is_deterministic(small_task, small_encoder):
    ctx = init_context(4, 8, 0.02, seed=1)
    first = encode_views(ctx, small_task, small_encoder).learnable.values
    second = encode_views(ctx, small_task, small_encoder).learnable.values
    assert first.tobytes() == second.tobytes()


def test_encode_views_errors(small_task, small_encoder):
    with pytest.raises(ShapeError):
        encode_views(init_context(4, 6, 0.02, seed=1), small_task, small_encoder)
    with pytest.raises(ShapeError):
        encode_views(init_context(4, 8, 0.02, seed=1), small_task, SyntheticTextEncoder.from_seed(0, 6, 4))
    with pytest.raises(ConfigError):
        encode_views(init_context(4, 8, 0.02, seed=1), small_task, small_encoder, tau=0.0)


def test_template_context(small_task, small_encoder):
    ctx = context_from_template(small_task)
    views = encode_views(ctx, small_task, small_encoder)
    assert views.learnable.values.tobytes() == views.handcrafted.values.tobytes()
    with pytest.raises(ConfigError):
        context_from_template(small_task, M=5)
