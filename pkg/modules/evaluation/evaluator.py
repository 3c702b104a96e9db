"""
Evaluation Module - split-restricted accuracy, harmonic mean and the report types.
"""
import time
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

import sys
from pathlib import Path
sys.path.append(str(Path(__file__).parent.parent.parent))

from autodiff import Tensor
from config import PROMPT_CONFIG
from encoders import FewShotTask, SyntheticTextEncoder
from errors import ConfigError, DomainError
from modules.prompt.prompt_learner import PromptContext, encode_views

if TYPE_CHECKING:
    from modules.trainer.trainer import TrainedModel

ZERO_SHOT = "zeroshot"


def accuracy_from_embeddings(embeddings: np.ndarray, features: np.ndarray, labels: np.ndarray,
                             class_ids: Sequence[int]) -> float:
    """
    Fraction of samples whose most similar class row is the true class.

    Args:
        embeddings: Rows for `class_ids`, in that order
        features: N×d unit features
        labels: Global class labels
        class_ids: Classes the rows stand for
    """
    if len(labels) == 0:
        raise ConfigError("cannot evaluate an empty split")
    scores = np.asarray(features) @ np.asarray(embeddings).T
    predicted = np.asarray(class_ids)[np.argmax(scores, axis=1)]
    return float(np.mean(predicted == np.asarray(labels)))


def class_embeddings(model: Optional["TrainedModel"], task: FewShotTask, encoder: SyntheticTextEncoder,
                     class_ids: Sequence[int], tau: float = PROMPT_CONFIG["tau"]) -> np.ndarray:
    """Rows the model classifies with: hand-crafted for zero-shot, learnable otherwise."""
    if model is None:
        return task.handcrafted[list(class_ids)]
    context = PromptContext(Tensor(model.context.vectors.values))
    return encode_views(context, task, encoder, tau, class_ids).learnable.values


def evaluate_accuracy(model: Optional["TrainedModel"], task: FewShotTask, split: str,
                      encoder: SyntheticTextEncoder, tau: Optional[float] = None) -> float:
    """
    Test accuracy on one split, classifying among that split's classes only.

    Args:
        model: Trained model, or None for the hand-crafted zero-shot classifier
        task: Task with test splits
        split: "base", "new" or "all"
        encoder: Frozen text encoder
        tau: Temperature (argmax is unaffected; defaults to the model's)

    Returns:
        Accuracy in [0, 1]
    """
    class_ids = task.class_ids(split)
    if not class_ids:
        raise ConfigError(f"split {split!r} has no classes")
    if tau is None:
        tau = model.tau if model is not None else PROMPT_CONFIG["tau"]
    features, labels = task.test_split(split)
    rows = class_embeddings(model, task, encoder, class_ids, tau)
    return accuracy_from_embeddings(rows, features, labels, class_ids)


def harmonic_mean(a_base: float, a_new: float) -> float:
    """
    2·A_b·A_n / (A_b + A_n); 0 when both are 0.

    Accepts fractions or percentages (the formula is scale invariant).
    """
    for value in (a_base, a_new):
        if not 0.0 <= value <= 100.0:
            raise DomainError(f"accuracy {value} outside [0, 100]")
    if a_base + a_new == 0:
        return 0.0
    return 2.0 * a_base * a_new / (a_base + a_new)


# ========== Reports ==========

@dataclass(frozen=True)
class ReportRow:
    """One (method, K, seed) run."""

    method: str
    shots: int
    seed: int
    base_acc: float
    new_acc: float

    @property
    def hm(self) -> float:
        return harmonic_mean(self.base_acc, self.new_acc)


@dataclass(frozen=True)
class SummaryRow:
    """Seed-aggregated result of one (method, K)."""

    method: str
    shots: int
    base_mean: float
    new_mean: float
    mean_hm: float
    num_seeds: int

    @property
    def hm(self) -> float:
        """HM of the mean accuracies."""
        return harmonic_mean(self.base_mean, self.new_mean)


@dataclass(frozen=True)
class GeneralizationRow:
    """Accuracy of one trained method on one target (shifted domain or transfer task)."""

    method: str
    target: str
    seed: int
    accuracy: float


@dataclass
class EvalReport:
    """Rows of a protocol, ablation or generalization run plus run metadata."""

    title: str
    rows: List[ReportRow] = field(default_factory=list)
    generalization: List[GeneralizationRow] = field(default_factory=list)
    method_order: List[str] = field(default_factory=list)
    shots: List[int] = field(default_factory=list)
    seeds: List[int] = field(default_factory=list)
    config: Dict[str, Any] = field(default_factory=dict)
    timing_seconds: float = 0.0
    meta: Dict[str, Any] = field(default_factory=dict)

    def methods(self) -> List[str]:
        """Methods in display order (explicit order first, then by name)."""
        present = {row.method for row in self.rows} | {row.method for row in self.generalization}
        ordered = [m for m in self.method_order if m in present]
        return ordered + sorted(present - set(ordered))

    def sorted_rows(self) -> List[ReportRow]:
        return sorted(self.rows, key=lambda r: (r.method, r.shots, r.seed))

    def summarize(self) -> List[SummaryRow]:
        """Mean accuracies over seeds for every (method, K), in display order."""
        summaries = []
        for method in self.methods():
            for k in sorted({r.shots for r in self.rows if r.method == method}):
                group = [r for r in self.rows if r.method == method and r.shots == k]
                summaries.append(SummaryRow(
                    method=method,
                    shots=k,
                    base_mean=float(np.mean([r.base_acc for r in group])),
                    new_mean=float(np.mean([r.new_acc for r in group])),
                    mean_hm=float(np.mean([r.hm for r in group])),
                    num_seeds=len(group),
                ))
        return summaries

    def summary(self, method: str, shots: int) -> Optional[SummaryRow]:
        for row in self.summarize():
            if row.method == method and row.shots == shots:
                return row
        return None

    def generalization_means(self) -> Dict[Tuple[str, str], float]:
        """Mean accuracy over seeds per (method, target)."""
        groups: Dict[Tuple[str, str], List[float]] = {}
        for row in self.generalization:
            groups.setdefault((row.method, row.target), []).append(row.accuracy)
        return {key: float(np.mean(values)) for key, values in groups.items()}

    def targets(self) -> List[str]:
        seen: List[str] = []
        for row in self.generalization:
            if row.target not in seen:
                seen.append(row.target)
        return seen


class Stopwatch:
    """Wall-clock timing for report metadata."""

    def __enter__(self):
        self.start = time.perf_counter()
        self.elapsed = 0.0
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start
        return False
