"""
Objectives Module - prediction probabilities and every training loss:
cross-entropy, the ProGrad KL term, the KgCoOp distance, entropies, the MI
objective, the distance constraint and the total loss.
"""
import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

import sys
from pathlib import Path
sys.path.append(str(Path(__file__).parent.parent.parent))

import autodiff as ad
from autodiff import Tensor
from config import OBJECTIVE_CONFIG
from errors import ConfigError, DomainError, ShapeError
from modules.objectives.mi_estimator import JointProbabilityMatrix

LOG_FLOOR = OBJECTIVE_CONFIG["log_floor"]
SIMPLEX_ATOL = 1e-6


# ========== Predictions ==========

def similarity_logits(embeddings, feature, tau: float) -> Tensor:
    """
    Cosine logits ⟨row_j, f⟩ / tau.

    Args:
        embeddings: C×d unit rows
        feature: d unit vector, or n×d batch of features
        tau: Temperature

    Returns:
        C-vector (or n×C matrix for a batch)
    """
    if not tau > 0:
        raise ConfigError(f"tau must be > 0, got {tau}")
    embeddings, feature = ad.as_tensor(embeddings), ad.as_tensor(feature)
    if embeddings.ndim != 2 or feature.shape[-1] != embeddings.shape[1]:
        raise ShapeError(f"cannot score features {feature.shape} against embeddings {embeddings.shape}")
    if feature.ndim == 1:
        scores = ad.matmul(embeddings, feature)
    else:
        scores = ad.matmul(feature, ad.transpose(embeddings))
    return ad.scale_by_constant(scores, 1.0 / tau)


def zero_shot_probs(handcrafted, feature, tau: float) -> Tensor:
    """Softmax over the hand-crafted rows."""
    return ad.softmax_lastdim(similarity_logits(handcrafted, feature, tau))


def prediction_probs(learnable, feature, tau: float) -> Tensor:
    """Softmax over the learnable rows; differentiable w.r.t. the context."""
    return ad.softmax_lastdim(similarity_logits(learnable, feature, tau))


# ========== Classification losses ==========

def _batch_mean(per_row: Tensor) -> Tensor:
    return per_row if per_row.ndim == 0 else ad.mean(per_row)


def _safe_log(p: Tensor) -> Tensor:
    return ad.log(ad.clamp_min(p, LOG_FLOOR))


def cross_entropy(probs, label) -> Tensor:
    """
    -Σ label_i·log probs_i, averaged over rows for a batch.

    Args:
        probs: C-simplex vector or n×C batch
        label: Matching one-hot or soft labels
    """
    probs, label = ad.as_tensor(probs), ad.as_tensor(label)
    if probs.shape != label.shape:
        raise ShapeError(f"probs {probs.shape} and labels {label.shape} differ")
    if np.any((label.values > 0) & (probs.values <= 0)):
        raise DomainError("cross_entropy: nonpositive probability under a positive label")
    per_row = ad.sum(ad.mul_elementwise(label, _safe_log(probs)), axis=probs.ndim - 1)
    return ad.scale_by_constant(_batch_mean(per_row), -1.0)


def cross_entropy_from_logits(logits, labels) -> Tensor:
    """Batch-mean soft-label cross-entropy computed through log-softmax."""
    logits, labels = ad.as_tensor(logits), ad.as_tensor(labels)
    if logits.shape != labels.shape:
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} differ")
    log_probs = ad.log_softmax_lastdim(logits)
    per_row = ad.sum(ad.mul_elementwise(labels, log_probs), axis=logits.ndim - 1)
    return ad.scale_by_constant(_batch_mean(per_row), -1.0)


def kl_general_loss(p_zs, p_pred) -> Tensor:
    """
    KL(p_zs ‖ p_pred) = -Σ p_zs·log(p_pred / p_zs); zero p_zs entries contribute 0.
    Batches are averaged over rows.
    """
    p_zs, p_pred = ad.as_tensor(p_zs), ad.as_tensor(p_pred)
    if p_zs.shape != p_pred.shape:
        raise ShapeError(f"distributions {p_zs.shape} and {p_pred.shape} differ")
    if np.any((p_zs.values > 0) & (p_pred.values <= 0)):
        raise DomainError("kl_general_loss: nonpositive prediction under positive reference mass")
    gap = ad.sub(_safe_log(p_zs), _safe_log(p_pred))
    per_row = ad.sum(ad.mul_elementwise(p_zs, gap), axis=p_zs.ndim - 1)
    return _batch_mean(per_row)


def kg_euclidean_loss(handcrafted, learnable) -> Tensor:
    """(1/C)·Σ_j ‖w_j − θ(t_j)‖²."""
    handcrafted, learnable = ad.as_tensor(handcrafted), ad.as_tensor(learnable)
    if handcrafted.shape != learnable.shape or handcrafted.ndim != 2:
        raise ShapeError(f"embedding matrices {handcrafted.shape} and {learnable.shape} differ")
    diff = ad.sub(handcrafted, learnable)
    return ad.scale_by_constant(ad.sum(ad.mul_elementwise(diff, diff)), 1.0 / handcrafted.shape[0])


# ========== Entropies and MI ==========

def _check_distribution(p: Tensor) -> None:
    if np.any(p.values < 0):
        raise DomainError("distribution has negative entries")
    if abs(p.values.sum() - 1.0) > SIMPLEX_ATOL:
        raise DomainError(f"distribution sums to {p.values.sum()}, expected 1")


def entropy(dist) -> Tensor:
    """Shannon entropy in nats with 0·log 0 = 0."""
    dist = ad.as_tensor(dist)
    _check_distribution(dist)
    return ad.scale_by_constant(ad.sum(ad.mul_elementwise(dist, _safe_log(dist))), -1.0)


def joint_entropy(P: Union[JointProbabilityMatrix, Tensor, np.ndarray]) -> Tensor:
    """Entropy of the joint matrix over all C² entries."""
    matrix = P.matrix if isinstance(P, JointProbabilityMatrix) else ad.as_tensor(P)
    return entropy(matrix)


def mi_objective(P: JointProbabilityMatrix) -> Tensor:
    """MI ≈ (1/3)·[H(m1) + H(m2) + H(P)]."""
    total = ad.add(ad.add(entropy(P.row_marginal), entropy(P.col_marginal)), joint_entropy(P))
    return ad.scale_by_constant(total, 1.0 / 3.0)


def _kl(p: Tensor, q: Tensor) -> Tensor:
    return ad.sum(ad.mul_elementwise(p, ad.sub(_safe_log(p), _safe_log(q))))


def distance_constraint(P: JointProbabilityMatrix) -> Tensor:
    """
    KL(d ‖ m1) + KL(d ‖ m2) with d = diag(P)/trace(P).

    Raises:
        DomainError: if trace(P) is zero
    """
    diag = ad.diagonal(P.matrix)
    trace = ad.sum(diag)
    if trace.item() <= 0:
        raise DomainError("distance constraint needs a positive trace")
    d = ad.divide(diag, trace)
    return ad.add(_kl(d, P.row_marginal), _kl(d, P.col_marginal))


# ========== Total loss ==========

@dataclass(frozen=True)
class LossWeights:
    """Weights of the MI objective (lambda1) and the distance constraint (lambda2)."""

    lambda1: float = OBJECTIVE_CONFIG["lambda1"]
    lambda2: float = OBJECTIVE_CONFIG["lambda2"]

    def __post_init__(self):
        for name in ("lambda1", "lambda2"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {value}")

    @property
    def uses_joint(self) -> bool:
        return self.lambda1 > 0 or self.lambda2 > 0


def total_loss(ce: Tensor, P: Optional[JointProbabilityMatrix], weights: LossWeights) -> Tensor:
    """
    L = ce − lambda1·MI(P) + lambda2·L_dc(P).

    Zero-weight terms are not evaluated, so with both weights at zero the
    result is `ce` itself.
    """
    if not weights.uses_joint:
        return ce
    if P is None:
        raise ConfigError("nonzero MI weights need a joint probability matrix")
    loss = ce
    if weights.lambda1 > 0:
        loss = ad.sub(loss, ad.scale_by_constant(mi_objective(P), weights.lambda1))
    if weights.lambda2 > 0:
        loss = ad.add(loss, ad.scale_by_constant(distance_constraint(P), weights.lambda2))
    return loss
