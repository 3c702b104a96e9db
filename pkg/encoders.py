"""
Frozen encoders and synthetic few-shot tasks.

A seeded two-layer text encoder stands in for the pretrained text tower, and
tasks are generated encoder-first: tokens -> hand-crafted embeddings ->
image prototypes -> sample features.
"""
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

import autodiff as ad
from autodiff import Tensor
from config import PROMPT_CONFIG, TASK_CONFIG
from embedding_store import (
    EMBEDDING,
    EmbeddingStore,
    load_embedding_store,
    save_embedding_store,
)
from errors import ConfigError, DomainError, FormatError, ShapeError
from utils import get_logger, make_rng

logger = get_logger("encoders")

SPLITS = ("base", "new", "all")

# rng streams of a task seed
_CLASS_TOKENS, _TEMPLATE, _PERTURB, _TRAIN_NOISE, _TEST_NOISE, _SHIFT = range(6)


@dataclass(frozen=True)
class SyntheticTextEncoder:
    """Seeded frozen text encoder: l2_normalize(W2·tanh(W1·meanpool(tokens) + b1) + b2)."""

    seed: int
    dim: int
    hidden: int
    w1: np.ndarray = field(repr=False)
    b1: np.ndarray = field(repr=False)
    w2: np.ndarray = field(repr=False)
    b2: np.ndarray = field(repr=False)

    @classmethod
    def from_seed(cls, seed: int, dim: int = TASK_CONFIG["dim"],
                  hidden: int = TASK_CONFIG["hidden"]) -> "SyntheticTextEncoder":
        """Weights are a pure function of (seed, dim, hidden)."""
        if dim < 1 or hidden < 1:
            raise ConfigError(f"encoder sizes must be positive, got dim={dim}, hidden={hidden}")
        rng = np.random.default_rng(seed)
        w1 = rng.standard_normal((hidden, dim))
        b1 = 0.1 * rng.standard_normal(hidden)
        w2 = rng.standard_normal((dim, hidden)) / math.sqrt(hidden)
        b2 = 0.01 * rng.standard_normal(dim)
        for arr in (w1, b1, w2, b2):
            arr.setflags(write=False)
        return cls(seed=seed, dim=dim, hidden=hidden, w1=w1, b1=b1, w2=w2, b2=b2)

    @cached_property
    def tensors(self) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
        """Frozen weights as constant tensors (no gradients)."""
        return Tensor(self.w1), Tensor(self.b1), Tensor(self.w2), Tensor(self.b2)


def synth_text_encode(encoder: SyntheticTextEncoder,
                      tokens: Union[Tensor, Sequence[Union[Tensor, np.ndarray]]]) -> Tensor:
    """
    Encode one token sequence into a unit-norm text embedding.

    Args:
        encoder: Frozen encoder
        tokens: (n, d) tensor or a sequence of d-vectors

    Returns:
        d-vector tensor, differentiable w.r.t. the tokens
    """
    if isinstance(tokens, Tensor):
        stacked = tokens if tokens.ndim == 2 else ad.concat_rows(tokens)
    else:
        if len(tokens) == 0:
            raise DomainError("cannot encode an empty token sequence")
        stacked = ad.concat_rows(*tokens)
    if stacked.shape[1] != encoder.dim:
        raise ShapeError(f"tokens have dimension {stacked.shape[1]}, encoder expects {encoder.dim}")
    w1, b1, w2, b2 = encoder.tensors
    pooled = ad.mean(stacked, axis=0)
    hidden = ad.tanh(ad.add(ad.matmul(w1, pooled), b1))
    return ad.l2_normalize_rows(ad.add(ad.matmul(w2, hidden), b2))


def encode_prompts(encoder: SyntheticTextEncoder, context: Tensor,
                   class_tokens: Union[Tensor, np.ndarray]) -> Tensor:
    """
    Batched encoding of the prompts {context, c_i} for every class token.

    Args:
        encoder: Frozen encoder
        context: (M, d) context vectors shared by all classes
        class_tokens: (C, d) class token vectors

    Returns:
        (C, d) unit-norm rows, differentiable w.r.t. the context
    """
    class_tokens = ad.as_tensor(class_tokens)
    if context.ndim != 2 or class_tokens.ndim != 2:
        raise ShapeError("context and class tokens must be matrices")
    if context.shape[1] != encoder.dim or class_tokens.shape[1] != encoder.dim:
        raise ShapeError(
            f"prompt dims {context.shape[1]}/{class_tokens.shape[1]} do not match encoder dim {encoder.dim}"
        )
    w1, b1, w2, b2 = encoder.tensors
    pooled = ad.scale_by_constant(ad.add(class_tokens, ad.sum(context, axis=0)),
                                  1.0 / (context.shape[0] + 1))
    hidden = ad.tanh(ad.add(ad.matmul(pooled, ad.transpose(w1)), b1))
    return ad.l2_normalize_rows(ad.add(ad.matmul(hidden, ad.transpose(w2)), b2))


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _jitter(base: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """l2_normalize(base + sigma·η) with η ~ N(0, I/d); sigma = 0 returns base unchanged."""
    eta = rng.standard_normal(base.shape) / math.sqrt(base.shape[-1])
    if sigma == 0:
        return base.copy()
    return _unit_rows(base + sigma * eta)


@dataclass(frozen=True)
class FewShotTask:
    """Synthetic (or file-loaded) few-shot classification task with a base/new class split."""

    class_tokens: np.ndarray
    template_tokens: np.ndarray
    handcrafted: np.ndarray
    prototypes: np.ndarray
    train_features: np.ndarray
    train_labels: np.ndarray
    test_features: Dict[str, np.ndarray]
    test_labels: Dict[str, np.ndarray]
    base_class_ids: Tuple[int, ...]
    new_class_ids: Tuple[int, ...]
    noise_sigma: float
    prototype_perturb: float
    seed: int
    encoder_seed: int = TASK_CONFIG["encoder_seed"]
    encoder_hidden: int = TASK_CONFIG["hidden"]
    class_names: Tuple[str, ...] = ()

    @property
    def num_classes(self) -> int:
        return self.class_tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.class_tokens.shape[1]

    @property
    def context_length(self) -> int:
        return self.template_tokens.shape[0]

    @property
    def shots(self) -> int:
        """Train samples per base class (0 if no training data)."""
        if self.train_labels.size == 0:
            return 0
        return int(np.bincount(self.train_labels).max())

    def class_ids(self, split: str) -> Tuple[int, ...]:
        if split == "base":
            return self.base_class_ids
        if split == "new":
            return self.new_class_ids
        if split == "all":
            return tuple(range(self.num_classes))
        raise ConfigError(f"unknown split {split!r}; expected one of {SPLITS}")

    def test_split(self, split: str) -> Tuple[np.ndarray, np.ndarray]:
        """Features and global labels of a test split."""
        if split == "all":
            return (np.vstack([self.test_features["base"], self.test_features["new"]]),
                    np.concatenate([self.test_labels["base"], self.test_labels["new"]]))
        self.class_ids(split)
        return self.test_features[split], self.test_labels[split]

    def with_train(self, features: np.ndarray, labels: np.ndarray) -> "FewShotTask":
        return replace(self, train_features=features, train_labels=labels)


def _check_task_args(num_classes: int, dim: int, shots: int, noise_sigma: float,
                     prototype_perturb: float, context_length: int, test_per_class: int) -> None:
    if num_classes < 2 or num_classes % 2:
        raise ConfigError(f"num_classes must be even and >= 2, got {num_classes}")
    if dim < 2:
        raise ConfigError(f"dim must be >= 2, got {dim}")
    if shots < 1:
        raise ConfigError(f"shots must be >= 1, got {shots}")
    if noise_sigma < 0 or prototype_perturb < 0:
        raise ConfigError("noise_sigma and prototype_perturb must be >= 0")
    if context_length < 1 or test_per_class < 1:
        raise ConfigError("context_length and test_per_class must be >= 1")


def _draw_samples(prototypes: np.ndarray, class_ids: Sequence[int], count: int,
                  sigma: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    features, labels = [], []
    for c in class_ids:
        base = np.repeat(prototypes[c:c + 1], count, axis=0)
        features.append(_jitter(base, sigma, rng))
        labels.append(np.full(count, c, dtype=np.int64))
    return np.vstack(features), np.concatenate(labels)


def gen_synthetic_task(num_classes: int = TASK_CONFIG["num_classes"], dim: int = TASK_CONFIG["dim"],
                       shots: int = 16, noise_sigma: float = TASK_CONFIG["noise_sigma"],
                       prototype_perturb: float = TASK_CONFIG["prototype_perturb"], seed: int = 1,
                       encoder: Optional[SyntheticTextEncoder] = None,
                       context_length: int = PROMPT_CONFIG["M"],
                       test_per_class: int = TASK_CONFIG["test_per_class"]) -> FewShotTask:
    """
    Generate a seeded few-shot task.

    Args:
        num_classes: C (even); the first C/2 classes are base, the rest new
        dim: Embedding dimension d
        shots: K train samples per base class
        noise_sigma: Sample noise around the image prototypes
        prototype_perturb: Offset of the image prototypes from the hand-crafted embeddings
        seed: Task seed (the encoder has its own seed)
        encoder: Frozen encoder; defaults to the configured encoder seed/width
        context_length: M, number of hand-crafted template tokens
        test_per_class: Test samples drawn for every class

    Returns:
        FewShotTask, a pure function of the arguments
    """
    _check_task_args(num_classes, dim, shots, noise_sigma, prototype_perturb,
                     context_length, test_per_class)
    if encoder is None:
        encoder = SyntheticTextEncoder.from_seed(TASK_CONFIG["encoder_seed"], dim, TASK_CONFIG["hidden"])
    if encoder.dim != dim:
        raise ConfigError(f"encoder dim {encoder.dim} does not match task dim {dim}")

    class_tokens = _unit_rows(make_rng(seed, _CLASS_TOKENS).standard_normal((num_classes, dim)))
    template = _unit_rows(make_rng(seed, _TEMPLATE).standard_normal((context_length, dim)))
    handcrafted = encode_prompts(encoder, Tensor(template), class_tokens).numpy()
    prototypes = _jitter(handcrafted, prototype_perturb, make_rng(seed, _PERTURB))

    n_base = math.ceil(num_classes / 2)
    base_ids = tuple(range(n_base))
    new_ids = tuple(range(n_base, num_classes))
    train_x, train_y = _draw_samples(prototypes, base_ids, shots, noise_sigma, make_rng(seed, _TRAIN_NOISE))
    test_rng = make_rng(seed, _TEST_NOISE)
    test_base = _draw_samples(prototypes, base_ids, test_per_class, noise_sigma, test_rng)
    test_new = _draw_samples(prototypes, new_ids, test_per_class, noise_sigma, test_rng)

    logger.debug(f"generated task seed={seed} C={num_classes} d={dim} K={shots}")
    return FewShotTask(
        class_tokens=class_tokens,
        template_tokens=template,
        handcrafted=handcrafted,
        prototypes=prototypes,
        train_features=train_x,
        train_labels=train_y,
        test_features={"base": test_base[0], "new": test_new[0]},
        test_labels={"base": test_base[1], "new": test_new[1]},
        base_class_ids=base_ids,
        new_class_ids=new_ids,
        noise_sigma=float(noise_sigma),
        prototype_perturb=float(prototype_perturb),
        seed=seed,
        encoder_seed=encoder.seed,
        encoder_hidden=encoder.hidden,
        class_names=tuple(f"class_{i:02d}" for i in range(num_classes)),
    )


def shift_task(task: FewShotTask, shift_sigma: float, seed: int) -> FewShotTask:
    """
    Domain-shifted copy of a task: same classes and hand-crafted view,
    drifted image prototypes, freshly drawn test features.
    """
    if shift_sigma < 0:
        raise ConfigError(f"shift_sigma must be >= 0, got {shift_sigma}")
    prototypes = _jitter(task.prototypes, shift_sigma, make_rng(seed, _SHIFT))
    rng = make_rng(seed, _SHIFT, 1)
    per_class = len(task.test_labels["base"]) // max(len(task.base_class_ids), 1)
    test_base = _draw_samples(prototypes, task.base_class_ids, per_class, task.noise_sigma, rng)
    test_new = _draw_samples(prototypes, task.new_class_ids, per_class, task.noise_sigma, rng)
    return replace(
        task,
        prototypes=prototypes,
        test_features={"base": test_base[0], "new": test_new[0]},
        test_labels={"base": test_base[1], "new": test_new[1]},
    )


def encoder_for_task(task: FewShotTask) -> SyntheticTextEncoder:
    """Rebuild the frozen encoder a task was generated with."""
    return SyntheticTextEncoder.from_seed(task.encoder_seed, task.dim, task.encoder_hidden)


# ========== Persistence ==========

_TASK_MATRICES = ("class_tokens", "template_tokens", "handcrafted_embeddings", "prototypes",
                  "train_features", "test_base_features", "test_new_features")


def task_to_store(task: FewShotTask) -> EmbeddingStore:
    """Pack a task into a PTES store."""
    onehot = np.zeros((len(task.train_labels), task.num_classes))
    onehot[np.arange(len(task.train_labels)), task.train_labels] = 1.0
    store = EmbeddingStore(
        dim=task.dim,
        class_names=list(task.class_names),
        matrices={
            "class_tokens": task.class_tokens,
            "template_tokens": task.template_tokens,
            "handcrafted_embeddings": task.handcrafted,
            "prototypes": task.prototypes,
            "train_features": task.train_features,
            "test_base_features": task.test_features["base"],
            "test_new_features": task.test_features["new"],
        },
        labels=onehot,
        meta={
            "kind": "few_shot_task",
            "seed": task.seed,
            "encoder_seed": task.encoder_seed,
            "encoder_hidden": task.encoder_hidden,
            "noise_sigma": task.noise_sigma,
            "prototype_perturb": task.prototype_perturb,
            "base_class_ids": list(task.base_class_ids),
            "new_class_ids": list(task.new_class_ids),
            "test_base_labels": task.test_labels["base"].tolist(),
            "test_new_labels": task.test_labels["new"].tolist(),
        },
    )
    for name in _TASK_MATRICES:
        store.kinds[name] = EMBEDDING
    return store


def task_from_store(store: EmbeddingStore) -> FewShotTask:
    """
    Unpack a task; binary32 features are widened and re-projected to unit norm.
    """
    meta = store.meta
    if meta.get("kind") != "few_shot_task" or store.labels is None:
        raise FormatError("store does not hold a few-shot task")
    missing = [name for name in _TASK_MATRICES if not store.has(name)]
    if missing:
        raise FormatError(f"task store lacks matrices: {', '.join(missing)}")
    return FewShotTask(
        class_tokens=store.matrix("class_tokens"),
        template_tokens=store.matrix("template_tokens"),
        handcrafted=_unit_rows(store.matrix("handcrafted_embeddings")),
        prototypes=_unit_rows(store.matrix("prototypes")),
        train_features=_unit_rows(store.matrix("train_features")),
        train_labels=np.argmax(store.labels, axis=1).astype(np.int64),
        test_features={"base": _unit_rows(store.matrix("test_base_features")),
                       "new": _unit_rows(store.matrix("test_new_features"))},
        test_labels={"base": np.asarray(meta["test_base_labels"], dtype=np.int64),
                     "new": np.asarray(meta["test_new_labels"], dtype=np.int64)},
        base_class_ids=tuple(meta["base_class_ids"]),
        new_class_ids=tuple(meta["new_class_ids"]),
        noise_sigma=float(meta["noise_sigma"]),
        prototype_perturb=float(meta["prototype_perturb"]),
        seed=int(meta["seed"]),
        encoder_seed=int(meta["encoder_seed"]),
        encoder_hidden=int(meta["encoder_hidden"]),
        class_names=tuple(store.class_names),
    )


def save_task(task: FewShotTask, path: Union[str, Path]) -> Path:
    return save_embedding_store(task_to_store(task), path)


def load_task(path: Union[str, Path]) -> FewShotTask:
    return task_from_store(load_embedding_store(path))


if __name__ == "__main__":
    task = gen_synthetic_task(num_classes=10, dim=32, shots=4, seed=1)
    print(f"Task: C={task.num_classes} d={task.dim} train={len(task.train_labels)} "
          f"base={task.base_class_ids} new={task.new_class_ids}")
