"""
MI Estimator Module - the shared two-layer network and the joint probability matrix
built from the softmax outputs of two views.
"""
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np

import sys
from pathlib import Path
sys.path.append(str(Path(__file__).parent.parent.parent))

import autodiff as ad
from autodiff import Tensor
from config import OBJECTIVE_CONFIG
from errors import ConfigError, DomainError, ShapeError
from utils import make_rng

ESTIMATOR_STREAM = 1
PARAMETER_NAMES = ("mi_w1", "mi_b1", "mi_w2", "mi_b2")


@dataclass
class MIEstimator:
    """phi(x) = W2·relu(W1·x + b1) + b2, shared by both views."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def __post_init__(self):
        hidden, classes = self.w1.shape
        if (self.b1.shape != (hidden,) or self.w2.shape != (classes, hidden)
                or self.b2.shape != (classes,)):
            raise ShapeError(
                f"inconsistent estimator shapes {self.w1.shape}, {self.b1.shape}, "
                f"{self.w2.shape}, {self.b2.shape}"
            )

    @property
    def num_classes(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    def parameters(self) -> List[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def arrays(self) -> List[np.ndarray]:
        return [p.numpy() for p in self.parameters()]

    @classmethod
    def from_arrays(cls, w1, b1, w2, b2) -> "MIEstimator":
        return cls(*(Tensor.parameter(np.asarray(a, dtype=np.float64)) for a in (w1, b1, w2, b2)))

    @classmethod
    def from_parameters(cls, params: Sequence[Tensor]) -> "MIEstimator":
        return cls(*params)


def init_estimator(num_classes: int, hidden: int = OBJECTIVE_CONFIG["mi_hidden"], seed: int = 1,
                   init_scale: float = OBJECTIVE_CONFIG["mi_init_scale"], view_scale: float = 1.0) -> MIEstimator:
    """
    Seeded estimator: weights N(0, (init_scale/√fan_in)²), zero biases.

    Args:
        num_classes: C, the view length
        hidden: Hidden width
        seed: Run seed (uses its own rng stream)
        init_scale: Weight scale before fan-in normalization
        view_scale: Extra factor on the first layer; τ for views that are
            similarity logits, so pre-activations start at cosine scale
    """
    if num_classes < 1 or hidden < 1:
        raise ConfigError(f"estimator sizes must be positive, got C={num_classes}, hidden={hidden}")
    if not init_scale > 0:
        raise ConfigError(f"mi_init_scale must be > 0, got {init_scale}")
    if not view_scale > 0:
        raise ConfigError(f"view_scale must be > 0, got {view_scale}")
    rng = make_rng(seed, ESTIMATOR_STREAM)
    w1 = rng.standard_normal((hidden, num_classes)) * (init_scale / math.sqrt(num_classes)) * view_scale
    w2 = rng.standard_normal((num_classes, hidden)) * (init_scale / math.sqrt(hidden))
    return MIEstimator.from_arrays(w1, np.zeros(hidden), w2, np.zeros(num_classes))


def _check_view(est: MIEstimator, view: Tensor) -> None:
    if view.ndim not in (1, 2) or view.shape[-1] != est.num_classes:
        raise ShapeError(f"view has shape {view.shape}, estimator expects length {est.num_classes}")


def mi_estimator_forward(est: MIEstimator, view) -> Tensor:
    """
    Estimator logits for one view vector (C) or a batch of views (n×C).
    """
    view = ad.as_tensor(view)
    _check_view(est, view)
    if view.ndim == 1:
        hidden = ad.relu(ad.add(ad.matmul(est.w1, view), est.b1))
        return ad.add(ad.matmul(est.w2, hidden), est.b2)
    hidden = ad.relu(ad.add(ad.matmul(view, ad.transpose(est.w1)), est.b1))
    return ad.add(ad.matmul(hidden, ad.transpose(est.w2)), est.b2)


def pre_activations(est: MIEstimator, views: np.ndarray) -> np.ndarray:
    """Hidden pre-activations W1·x + b1 for a batch of views (numpy, no graph)."""
    views = np.atleast_2d(np.asarray(views, dtype=np.float64))
    return views @ est.w1.values.T + est.b1.values


@dataclass(frozen=True)
class JointProbabilityMatrix:
    """Symmetrized C×C joint distribution of the two views with its marginals."""

    matrix: Tensor
    row_marginal: Tensor
    col_marginal: Tensor

    @property
    def num_classes(self) -> int:
        return self.matrix.shape[0]

    @classmethod
    def from_matrix(cls, matrix: Union[Tensor, np.ndarray], atol: float = 1e-8) -> "JointProbabilityMatrix":
        """
        Wrap a C×C matrix, checking the joint-distribution invariants.

        Args:
            matrix: Nonnegative square matrix summing to 1
            atol: Tolerance on the total mass
        """
        matrix = ad.as_tensor(matrix)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ShapeError(f"joint matrix must be square, got shape {matrix.shape}")
        if np.any(matrix.values < 0):
            raise DomainError("joint matrix has negative entries")
        if abs(matrix.values.sum() - 1.0) > atol:
            raise DomainError(f"joint matrix sums to {matrix.values.sum()}, expected 1")
        return cls(matrix=matrix, row_marginal=ad.sum(matrix, axis=1), col_marginal=ad.sum(matrix, axis=0))

    def numpy(self) -> np.ndarray:
        return self.matrix.numpy()


def joint_from_softmax(s1, s2) -> JointProbabilityMatrix:
    """
    P = (1/n)·Σ s1_i s2_iᵀ, then P <- (P + Pᵀ)/2.

    Args:
        s1: n×C softmax outputs of the first view
        s2: n×C softmax outputs of the second view
    """
    s1, s2 = ad.as_tensor(s1), ad.as_tensor(s2)
    if s1.ndim != 2 or s1.shape != s2.shape:
        raise ShapeError(f"softmax batches must be equal n×C matrices, got {s1.shape} and {s2.shape}")
    n = s1.shape[0]
    joint = ad.scale_by_constant(ad.matmul(ad.transpose(s1), s2), 1.0 / n)
    symmetric = ad.scale_by_constant(ad.add(joint, ad.transpose(joint)), 0.5)
    return JointProbabilityMatrix(
        matrix=symmetric,
        row_marginal=ad.sum(symmetric, axis=1),
        col_marginal=ad.sum(symmetric, axis=0),
    )


def joint_from_views(est: MIEstimator, views1, views2) -> JointProbabilityMatrix:
    """Batched form of joint_probability: two n×C view matrices through one estimator."""
    s1 = ad.softmax_lastdim(mi_estimator_forward(est, views1))
    s2 = ad.softmax_lastdim(mi_estimator_forward(est, views2))
    return joint_from_softmax(s1, s2)


def joint_probability(est: MIEstimator, view_pairs: Sequence[Tuple[object, object]]) -> JointProbabilityMatrix:
    """
    Joint probability matrix from n pairs of C-vector views.

    Args:
        est: Shared estimator
        view_pairs: Sequence of (view¹, view²) pairs

    Returns:
        JointProbabilityMatrix (exactly symmetric)
    """
    if len(view_pairs) == 0:
        raise DomainError("joint probability needs at least one view pair")
    first = ad.concat_rows(*(pair[0] for pair in view_pairs))
    second = ad.concat_rows(*(pair[1] for pair in view_pairs))
    return joint_from_views(est, first, second)
