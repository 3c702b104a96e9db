"""
Central finite-difference checks for analytic gradients, and the seeded
suite run by the `gradcheck` command.
"""
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

import autodiff as ad
from autodiff import Tensor
from encoders import SyntheticTextEncoder, encode_prompts
from errors import ConfigError, DomainError
from modules.objectives.losses import (
    LossWeights,
    cross_entropy_from_logits,
    kg_euclidean_loss,
    kl_general_loss,
    prediction_probs,
    similarity_logits,
    total_loss,
    zero_shot_probs,
)
from modules.objectives.mi_estimator import MIEstimator, joint_from_views, pre_activations
from utils import get_logger, make_rng

logger = get_logger("gradcheck")

Objective = Callable[[List[Tensor]], Tensor]
Entry = Tuple[int, int]

KINK_MARGIN = 1e-4
SUITE_STREAM = 7
LOSSES = ("ce", "kl", "kg", "total")


def _evaluate(objective: Objective, arrays: Sequence[np.ndarray]) -> float:
    try:
        value = objective([Tensor(a) for a in arrays])
    except DomainError as e:
        raise DomainError(f"objective is not finite at a perturbed point: {e}") from e
    value = ad.as_tensor(value).item()
    if not math.isfinite(value):
        raise DomainError("objective returned a non-finite value")
    return value


def analytic_gradients(objective: Objective, params: Sequence[Tensor]) -> List[np.ndarray]:
    """Reverse-mode gradients of `objective` at `params` (zeros for a constant objective)."""
    leaves = ad.leaves_of(params)
    loss = ad.as_tensor(objective(leaves))
    if not math.isfinite(loss.item()):
        raise DomainError("objective returned a non-finite value")
    if not loss.requires_grad:
        return [np.zeros(p.shape) for p in params]
    return [g.values for g in ad.backward(loss).for_params(leaves)]


def finite_difference_check(objective: Objective, params: Sequence[Tensor], eps: float = 1e-6,
                            entries: Optional[Iterable[Entry]] = None) -> float:
    """
    Compare analytic gradients with central differences.

    Args:
        objective: Deterministic map from parameter tensors to a scalar tensor
        params: Point of evaluation
        eps: Half step of the central difference
        entries: Optional (param index, flat index) pairs to check; all entries by default

    Returns:
        max |analytic − numeric| / max(1, |numeric|) over the checked entries
    """
    if not eps > 0:
        raise ConfigError(f"eps must be > 0, got {eps}")
    analytic = analytic_gradients(objective, params)
    base = [p.numpy() for p in params]
    if entries is None:
        entries = [(i, j) for i, p in enumerate(base) for j in range(p.size)]

    worst = 0.0
    for i, j in entries:
        plus = [a.copy() for a in base]
        minus = [a.copy() for a in base]
        plus[i].reshape(-1)[j] += eps
        minus[i].reshape(-1)[j] -= eps
        numeric = (_evaluate(objective, plus) - _evaluate(objective, minus)) / (2 * eps)
        error = abs(analytic[i].reshape(-1)[j] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, error)
    return worst


# ========== Seeded suite ==========

@dataclass
class GradientInstance:
    """A small random problem exercising every loss."""

    encoder: SyntheticTextEncoder
    class_tokens: np.ndarray
    handcrafted: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    context: np.ndarray
    estimator: MIEstimator
    tau: float

    def learnable(self, context: Tensor) -> Tensor:
        return encode_prompts(self.encoder, context, self.class_tokens)

    def logits(self, context: Tensor) -> Tuple[Tensor, Tensor]:
        hand = similarity_logits(self.handcrafted, self.features, self.tau)
        learn = similarity_logits(self.learnable(context), self.features, self.tau)
        return hand, learn

    def near_kink(self) -> bool:
        hand, learn = self.logits(Tensor(self.context))
        pre = np.vstack([pre_activations(self.estimator, hand.values),
                         pre_activations(self.estimator, learn.values)])
        return bool(np.any(np.abs(pre) < KINK_MARGIN))


def _unit(rng: np.random.Generator, shape: Tuple[int, int]) -> np.ndarray:
    x = rng.standard_normal(shape)
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def draw_instance(rng: np.random.Generator) -> GradientInstance:
    """C in [2,5], d in [2,16], batch in [2,8], short context, narrow networks."""
    C = int(rng.integers(2, 6))
    d = int(rng.integers(2, 17))
    n = int(rng.integers(2, 9))
    M = int(rng.integers(1, 4))
    encoder = SyntheticTextEncoder.from_seed(int(rng.integers(2**31)), d, int(rng.integers(2, 9)))
    hidden = int(rng.integers(2, 9))
    estimator = MIEstimator.from_arrays(
        rng.standard_normal((hidden, C)) / math.sqrt(C),
        0.1 * rng.standard_normal(hidden),
        rng.standard_normal((C, hidden)) / math.sqrt(hidden),
        0.1 * rng.standard_normal(C),
    )
    return GradientInstance(
        encoder=encoder,
        class_tokens=_unit(rng, (C, d)),
        handcrafted=_unit(rng, (C, d)),
        features=_unit(rng, (n, d)),
        labels=rng.dirichlet(np.ones(C), size=n),
        context=0.5 * rng.standard_normal((M, d)),
        estimator=estimator,
        tau=float(rng.uniform(0.2, 1.0)),
    )


def instance_objectives(inst: GradientInstance,
                        weights: LossWeights = LossWeights()) -> Dict[str, Tuple[Objective, List[Tensor]]]:
    """Each loss as an objective over its learnable parameters."""

    def ce(params):
        _, learn = inst.logits(params[0])
        return cross_entropy_from_logits(learn, inst.labels)

    def kl(params):
        p_zs = zero_shot_probs(inst.handcrafted, inst.features, inst.tau)
        p_pred = prediction_probs(inst.learnable(params[0]), inst.features, inst.tau)
        return kl_general_loss(p_zs, p_pred)

    def kg(params):
        return kg_euclidean_loss(inst.handcrafted, inst.learnable(params[0]))

    def total(params):
        hand, learn = inst.logits(params[0])
        P = joint_from_views(MIEstimator.from_parameters(params[1:]), hand, learn)
        return total_loss(cross_entropy_from_logits(learn, inst.labels), P, weights)

    context = [Tensor.parameter(inst.context)]
    return {
        "ce": (ce, context),
        "kl": (kl, context),
        "kg": (kg, context),
        "total": (total, context + inst.estimator.parameters()),
    }


@dataclass
class GradientSuiteResult:
    """Worst relative error per loss over the suite."""

    seed: int
    trials: int
    max_errors: Dict[str, float] = field(default_factory=lambda: {name: 0.0 for name in LOSSES})
    resampled: int = 0

    @property
    def max_error(self) -> float:
        return max(self.max_errors.values())

    def passed(self, individual_tol: float = 1e-5, total_tol: float = 1e-4) -> bool:
        individual = max(self.max_errors[name] for name in ("ce", "kl", "kg"))
        return individual < individual_tol and self.max_errors["total"] < total_tol


def run_gradient_suite(seed: int = 1, trials: int = 100, eps: float = 1e-6) -> GradientSuiteResult:
    """
    Finite-difference check of every loss on `trials` seeded random instances.

    Instances with an estimator pre-activation within KINK_MARGIN of zero are
    redrawn, since a central difference across the ReLU kink is not a gradient test.
    """
    if trials < 1:
        raise ConfigError(f"trials must be >= 1, got {trials}")
    result = GradientSuiteResult(seed=seed, trials=trials)
    rng = make_rng(seed, SUITE_STREAM)
    for trial in range(trials):
        inst = draw_instance(rng)
        while inst.near_kink():
            result.resampled += 1
            inst = draw_instance(rng)
        for name, (objective, params) in instance_objectives(inst).items():
            error = finite_difference_check(objective, params, eps=eps)
            result.max_errors[name] = max(result.max_errors[name], error)
        logger.debug(f"trial {trial}: running max {result.max_error:.3e}")
    logger.info(f"gradient suite seed={seed} trials={trials} max error {result.max_error:.3e}")
    return result


if __name__ == "__main__":
    outcome = run_gradient_suite(seed=1, trials=10)
    for name, value in outcome.max_errors.items():
        print(f"{name:>5}: {value:.3e}")
