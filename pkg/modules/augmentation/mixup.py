"""
Augmentation Module - class-wise mixup and few-shot/batch sampling.
Mixed samples always pair two distinct base classes.
"""
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

import sys
from pathlib import Path
sys.path.append(str(Path(__file__).parent.parent.parent))

from config import OBJECTIVE_CONFIG
from encoders import FewShotTask
from errors import ConfigError, DomainError, PairingError
from utils import make_rng

FEW_SHOT_STREAM = 4
DEFAULT_RANGE: Tuple[float, float] = tuple(OBJECTIVE_CONFIG["mix_lambda_range"])


@dataclass(frozen=True)
class MixupDraw:
    """One mixing coefficient and the two (distinct-class) batch rows it combines."""

    lam: float
    index_a: int
    index_b: int


@dataclass
class TrainingBatch:
    """Originals followed by mixed rows; labels are over the active classes."""

    features: np.ndarray
    labels: np.ndarray
    mixed: np.ndarray
    class_ids: Tuple[int, ...]
    draws: List[MixupDraw] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def num_mixed(self) -> int:
        return int(self.mixed.sum())

    @property
    def num_original(self) -> int:
        return self.size - self.num_mixed


def _check_range(lam_range: Sequence[float]) -> Tuple[float, float]:
    low, high = float(lam_range[0]), float(lam_range[1])
    if not 0.0 < low <= high < 1.0:
        raise ConfigError(f"mixing range must satisfy 0 < low <= high < 1, got {lam_range}")
    return low, high


def sample_lambda(rng: np.random.Generator, lam_range: Sequence[float] = DEFAULT_RANGE) -> float:
    """Uniform draw from the mixing range."""
    low, high = _check_range(lam_range)
    return float(rng.uniform(low, high))


def mixup_pair(xa, xb, ya, yb, lam: float,
               lam_range: Sequence[float] = DEFAULT_RANGE) -> Tuple[np.ndarray, np.ndarray]:
    """
    Convex combination of two samples from distinct classes.

    Args:
        xa, xb: Feature vectors
        ya, yb: Label vectors with disjoint support
        lam: Mixing coefficient within the range

    Returns:
        (x_new, y_new) before any renormalization of x_new
    """
    low, high = _check_range(lam_range)
    if not low <= lam <= high:
        raise DomainError(f"lambda {lam} outside [{low}, {high}]")
    xa, xb = np.asarray(xa, dtype=np.float64), np.asarray(xb, dtype=np.float64)
    ya, yb = np.asarray(ya, dtype=np.float64), np.asarray(yb, dtype=np.float64)
    if np.any((ya > 0) & (yb > 0)):
        raise PairingError("mixup needs samples from two distinct classes")
    return lam * xa + (1.0 - lam) * xb, lam * ya + (1.0 - lam) * yb


def _draw_originals(labels: np.ndarray, batch_size: int, rng: np.random.Generator,
                    need_pairs: bool) -> np.ndarray:
    replace = batch_size > len(labels)
    while True:
        picks = rng.choice(len(labels), size=batch_size, replace=replace)
        if not need_pairs or len(np.unique(labels[picks])) >= 2:
            return picks


def build_training_batch(task: FewShotTask, batch_size: int, mix_count: Optional[int],
                         rng: np.random.Generator,
                         lam_range: Sequence[float] = DEFAULT_RANGE) -> TrainingBatch:
    """
    Sample B originals from the base-class train set and B_mix mixed rows.

    Args:
        task: Task with base-class training data
        batch_size: B (>= 2); drawn without replacement unless B exceeds the pool
        mix_count: B_mix; None means B
        rng: Batch stream
        lam_range: Mixing range

    Returns:
        TrainingBatch with unit-norm features and soft labels
    """
    if batch_size < 2:
        raise ConfigError(f"batch size must be >= 2, got {batch_size}")
    mix_count = batch_size if mix_count is None else mix_count
    if mix_count < 0:
        raise ConfigError(f"mix_count must be >= 0, got {mix_count}")
    class_ids = tuple(task.base_class_ids)
    labels = task.train_labels
    if labels.size == 0:
        raise ConfigError("task has no training samples")
    if mix_count > 0 and len(np.unique(labels)) < 2:
        raise PairingError("mixup needs at least two classes in the training set")

    local = {c: i for i, c in enumerate(class_ids)}
    eye = np.eye(len(class_ids))
    picks = _draw_originals(labels, batch_size, rng, need_pairs=mix_count > 0)
    features = [task.train_features[picks]]
    soft = [eye[[local[int(c)] for c in labels[picks]]]]

    draws: List[MixupDraw] = []
    if mix_count > 0:
        picked = labels[picks]
        pairs = [(a, b) for a in range(batch_size) for b in range(batch_size) if picked[a] != picked[b]]
        mixed_x, mixed_y = [], []
        for _ in range(mix_count):
            a, b = pairs[int(rng.integers(len(pairs)))]
            lam = sample_lambda(rng, lam_range)
            x_new, y_new = mixup_pair(features[0][a], features[0][b], soft[0][a], soft[0][b], lam, lam_range)
            norm = np.linalg.norm(x_new)
            if norm == 0:
                raise DomainError("mixed feature has zero norm")
            mixed_x.append(x_new / norm)
            mixed_y.append(y_new)
            draws.append(MixupDraw(lam=lam, index_a=a, index_b=b))
        features.append(np.vstack(mixed_x))
        soft.append(np.vstack(mixed_y))

    mixed = np.zeros(batch_size + mix_count, dtype=bool)
    mixed[batch_size:] = True
    return TrainingBatch(
        features=np.vstack(features),
        labels=np.vstack(soft),
        mixed=mixed,
        class_ids=class_ids,
        draws=draws,
    )


def few_shot_sample(task: FewShotTask, shots: int, seed: int) -> FewShotTask:
    """
    Keep exactly `shots` training samples per base class, seeded, without replacement.

    Args:
        task: Task whose training pool is subsampled
        shots: K
        seed: Selection seed

    Returns:
        Copy of the task with the reduced training set (test splits untouched)
    """
    if shots < 1:
        raise ConfigError(f"shots must be >= 1, got {shots}")
    rng = make_rng(seed, FEW_SHOT_STREAM)
    keep = []
    for c in task.base_class_ids:
        candidates = np.flatnonzero(task.train_labels == c)
        if len(candidates) < shots:
            raise ConfigError(f"class {c} has {len(candidates)} training samples, {shots} requested")
        keep.append(np.sort(rng.choice(candidates, size=shots, replace=False)))
    keep = np.concatenate(keep)
    return task.with_train(task.train_features[keep], task.train_labels[keep])
