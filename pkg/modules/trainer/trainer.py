"""
Trainer Module - optimization loops for the proposed objective and the
CoOp, KgCoOp and ProGrad baselines.
Plain gradient descent with an optional cosine decay; every run is a pure
function of its configuration and seed.
"""
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

import sys
from pathlib import Path
sys.path.append(str(Path(__file__).parent.parent.parent))

import autodiff as ad
from autodiff import Tensor
from config import METHODS, OBJECTIVE_CONFIG, PROMPT_CONFIG, SCHEDULES, TRAIN_CONFIG, RunConfig, config_hash
from encoders import FewShotTask, SyntheticTextEncoder
from errors import ConfigError, DomainError, ShapeError, TrainingError
from gradcheck import finite_difference_check
from modules.augmentation.mixup import TrainingBatch, build_training_batch
from modules.evaluation.evaluator import accuracy_from_embeddings
from modules.objectives.losses import (
    LossWeights,
    cross_entropy_from_logits,
    kg_euclidean_loss,
    kl_general_loss,
    similarity_logits,
    total_loss,
    zero_shot_probs,
)
from modules.objectives.mi_estimator import MIEstimator, init_estimator, joint_from_views
from modules.prompt.prompt_learner import PromptContext, context_from_template, encode_views, init_context
from utils import get_logger, make_rng, round_to_binary32

logger = get_logger("trainer")

BATCH_STREAM = 2
AUDIT_STREAM = 3


@dataclass
class TrainConfig:
    """Everything one training run depends on."""

    method: str = "ours"
    epochs: int = TRAIN_CONFIG["epochs"]
    batch_size: int = TRAIN_CONFIG["batch"]
    mix_count: Optional[int] = TRAIN_CONFIG["mix_count"]
    learning_rate: float = TRAIN_CONFIG["lr"]
    schedule: str = TRAIN_CONFIG["schedule"]
    lambda1: float = OBJECTIVE_CONFIG["lambda1"]
    lambda2: float = OBJECTIVE_CONFIG["lambda2"]
    kg_weight: float = OBJECTIVE_CONFIG["kg_weight"]
    tau: float = PROMPT_CONFIG["tau"]
    M: int = PROMPT_CONFIG["M"]
    seed: int = 1
    init_scale: float = PROMPT_CONFIG["init_scale"]
    ctx_init: str = PROMPT_CONFIG["ctx_init"]
    mi_hidden: int = OBJECTIVE_CONFIG["mi_hidden"]
    mi_init_scale: float = OBJECTIVE_CONFIG["mi_init_scale"]
    mix_lambda_range: Tuple[float, float] = tuple(OBJECTIVE_CONFIG["mix_lambda_range"])
    prograd_lambda: float = TRAIN_CONFIG["prograd_lambda"]
    use_mixup: Optional[bool] = None
    audit_gradients: bool = False
    audit_tolerance: float = TRAIN_CONFIG["audit_tolerance"]

    def __post_init__(self):
        self.mix_lambda_range = tuple(float(v) for v in self.mix_lambda_range)
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.epochs < 1 or self.batch_size < 2 or self.M < 1 or self.mi_hidden < 1:
            raise ConfigError("epochs, M and mi_hidden must be positive and batch_size >= 2")
        if not self.learning_rate > 0 or not self.tau > 0:
            raise ConfigError("learning_rate and tau must be > 0")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        for name in ("lambda1", "lambda2", "kg_weight", "prograd_lambda"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.mix_count is not None and self.mix_count < 0:
            raise ConfigError("mix_count must be >= 0")

    @property
    def mixup_enabled(self) -> bool:
        return self.method == "ours" if self.use_mixup is None else self.use_mixup

    @property
    def effective_mix_count(self) -> int:
        if not self.mixup_enabled:
            return 0
        return self.batch_size if self.mix_count is None else self.mix_count

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["mix_lambda_range"] = list(self.mix_lambda_range)
        return data

    @classmethod
    def from_run_config(cls, run: RunConfig, method: str, seed: Optional[int] = None,
                        **overrides: Any) -> "TrainConfig":
        """Per-method training config from a run config."""
        values = dict(
            method=method,
            epochs=run.epochs,
            batch_size=run.batch,
            mix_count=run.mix_count,
            learning_rate=run.lr,
            schedule=run.schedule,
            lambda1=run.lambda1,
            lambda2=run.lambda2,
            kg_weight=run.kg_weight,
            tau=run.tau,
            M=run.M,
            seed=run.seed if seed is None else seed,
            init_scale=run.init_scale,
            ctx_init=run.ctx_init,
            mi_hidden=run.mi_hidden,
            mi_init_scale=run.mi_init_scale,
            prograd_lambda=run.prograd_lambda,
            use_mixup=True if run.mixup_baselines else None,
        )
        values.update(overrides)
        return cls(**values)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_accuracy: float
    lr: float
    audit_error: Optional[float] = None


@dataclass
class TrainedModel:
    """Learned context (and estimator for the proposed method) plus training history."""

    method: str
    context: PromptContext
    estimator: Optional[MIEstimator]
    history: List[EpochRecord]
    config: Dict[str, Any]
    config_hash: str
    steps: int
    seed: int
    meta: Dict[str, Any] = field(default_factory=dict)

    @property
    def tau(self) -> float:
        return float(self.config.get("tau", PROMPT_CONFIG["tau"]))

    @property
    def losses(self) -> List[float]:
        return [record.loss for record in self.history]


# ========== Update rules ==========

def prograd_project(g_ce: np.ndarray, g_general: np.ndarray, strength: float = 1.0) -> np.ndarray:
    """
    Remove the part of g_ce that conflicts with the general-knowledge gradient.

    Args:
        g_ce: Flat cross-entropy gradient
        g_general: Flat gradient of the KL to the zero-shot prediction
        strength: 1 is the pure projection

    Returns:
        g_ce if the two agree (dot >= 0), else g_ce − strength·(dot/‖g_general‖²)·g_general
    """
    g_ce = np.asarray(g_ce, dtype=np.float64)
    g_general = np.asarray(g_general, dtype=np.float64)
    if g_ce.shape != g_general.shape:
        raise ShapeError(f"gradient lengths differ: {g_ce.shape} vs {g_general.shape}")
    dot = float(g_ce @ g_general)
    if dot >= 0:
        return g_ce
    return g_ce - strength * (dot / float(g_general @ g_general)) * g_general


def optimizer_step(params: Sequence[Tensor], grads: Sequence, lr: float) -> List[Tensor]:
    """p <- p − lr·g, returned as fresh parameter leaves."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    updated = []
    for p, g in zip(params, grads):
        g = g.values if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        updated.append(Tensor.parameter(p.values - lr * g))
    return updated


def lr_at(schedule: str, step: int, total_steps: int, base_lr: float) -> float:
    """Learning rate at `step` of `total_steps`."""
    if not 0 <= step < total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps})")
    if schedule == "constant":
        return base_lr
    if schedule == "cosine":
        return base_lr * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0
    raise ConfigError(f"unknown schedule {schedule!r}")


# ========== Training loop ==========

class PromptTrainer:
    """Runs one configuration on one task."""

    def __init__(self, config: TrainConfig, task: FewShotTask, encoder: SyntheticTextEncoder):
        """
        Initialize the trainer.

        Args:
            config: Training configuration
            task: Task with base-class training data
            encoder: Frozen text encoder the task was built with
        """
        if task.train_labels.size == 0:
            raise ConfigError("task has no base-class training data")
        if task.dim != encoder.dim:
            raise ShapeError(f"task dim {task.dim} does not match encoder dim {encoder.dim}")
        self.config = config
        self.task = task
        self.encoder = encoder
        self.class_ids = tuple(task.base_class_ids)
        self.steps_per_epoch = math.ceil(len(task.train_labels) / config.batch_size)
        self.total_steps = config.epochs * self.steps_per_epoch

        if config.ctx_init == "template":
            self.context = context_from_template(task, config.M)
        else:
            self.context = init_context(config.M, task.dim, config.init_scale, config.seed)
        self.estimator = None
        if config.method == "ours":
            self.estimator = init_estimator(len(self.class_ids), config.mi_hidden, config.seed,
                                            config.mi_init_scale, view_scale=config.tau)

    # ----- objectives -----

    def _views(self, context: Tensor):
        return encode_views(PromptContext(context), self.task, self.encoder, self.config.tau, self.class_ids)

    def _ce(self, params: List[Tensor], batch: TrainingBatch) -> Tensor:
        views = self._views(params[0])
        logits = similarity_logits(views.learnable, batch.features, self.config.tau)
        return cross_entropy_from_logits(logits, batch.labels)

    def _kl(self, params: List[Tensor], batch: TrainingBatch) -> Tensor:
        views = self._views(params[0])
        p_zs = zero_shot_probs(views.handcrafted, batch.features, self.config.tau)
        logits = similarity_logits(views.learnable, batch.features, self.config.tau)
        return kl_general_loss(p_zs, ad.softmax_lastdim(logits))

    def _kgcoop(self, params: List[Tensor], batch: TrainingBatch) -> Tensor:
        views = self._views(params[0])
        logits = similarity_logits(views.learnable, batch.features, self.config.tau)
        ce = cross_entropy_from_logits(logits, batch.labels)
        if self.config.kg_weight == 0:
            return ce
        kg = kg_euclidean_loss(views.handcrafted, views.learnable)
        return ad.add(ce, ad.scale_by_constant(kg, self.config.kg_weight))

    def _ours(self, params: List[Tensor], batch: TrainingBatch) -> Tensor:
        views = self._views(params[0])
        tau = self.config.tau
        learn = similarity_logits(views.learnable, batch.features, tau)
        ce = cross_entropy_from_logits(learn, batch.labels)
        weights = self.config.weights
        if not weights.uses_joint:
            return ce
        hand = similarity_logits(views.handcrafted, batch.features, tau)
        P = joint_from_views(MIEstimator.from_parameters(params[1:]), hand, learn)
        return total_loss(ce, P, weights)

    def objective(self) -> Callable[[List[Tensor], TrainingBatch], Tensor]:
        """The minimized objective of the configured method."""
        return {
            "coop": self._ce,
            "prograd": self._ce,
            "kgcoop": self._kgcoop,
            "ours": self._ours,
        }[self.config.method]

    def parameters(self) -> List[Tensor]:
        params = [self.context.vectors]
        if self.estimator is not None:
            params += self.estimator.parameters()
        return params

    # ----- steps -----

    def step(self, batch: TrainingBatch, lr: float, step_index: int) -> float:
        """One forward/backward/update; returns the loss before the update."""
        try:
            params = self.parameters()
            loss = self.objective()(params, batch)
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                raise TrainingError("loss is not finite", step=step_index)
            grads = [g.values for g in ad.backward(loss).for_params(params)]
            if self.config.method == "prograd":
                grads[0] = self._prograd_gradient(grads[0], batch)
            updated = optimizer_step(params, grads, lr)
        except DomainError as e:
            raise TrainingError(f"diverged: {e}", step=step_index) from e
        if not all(np.all(np.isfinite(p.values)) for p in updated):
            raise TrainingError("parameters became non-finite", step=step_index)
        self._assign(updated)
        return loss_value

    def _prograd_gradient(self, g_ce: np.ndarray, batch: TrainingBatch) -> np.ndarray:
        leaf = Tensor.parameter(self.context.vectors.values)
        kl = self._kl([leaf], batch)
        g_general = ad.backward(kl)[leaf].values
        projected = prograd_project(g_ce.reshape(-1), g_general.reshape(-1), self.config.prograd_lambda)
        return projected.reshape(g_ce.shape)

    def _assign(self, params: List[Tensor]) -> None:
        self.context.vectors = params[0]
        if self.estimator is not None:
            self.estimator = MIEstimator.from_parameters(params[1:])

    def audit(self, batch: TrainingBatch, rng: np.random.Generator) -> float:
        """Finite-difference check of one random parameter entry of the current objective."""
        params = self.parameters()
        index = int(rng.integers(len(params)))
        entry = int(rng.integers(params[index].size))
        objective = self.objective()
        return finite_difference_check(lambda ps: objective(ps, batch), params, entries=[(index, entry)])

    def train_accuracy(self) -> float:
        views = encode_views(PromptContext(self.context.vectors.detach()), self.task, self.encoder,
                             self.config.tau, self.class_ids)
        return accuracy_from_embeddings(views.learnable.values, self.task.train_features,
                                        self.task.train_labels, self.class_ids)

    def fit(self) -> TrainedModel:
        """
        Run epochs × ⌈|train|/B⌉ steps.

        Returns:
            TrainedModel with binary32-representable parameters
        """
        config = self.config
        batch_rng = make_rng(config.seed, BATCH_STREAM)
        audit_rng = make_rng(config.seed, AUDIT_STREAM)
        audit = config.audit_gradients and config.method == "ours"
        history: List[EpochRecord] = []
        step_index = 0

        logger.info(f"Training {config.method}: {config.epochs} epochs x {self.steps_per_epoch} steps "
                    f"(B={config.batch_size}, B_mix={config.effective_mix_count}, seed={config.seed})")
        for epoch in range(config.epochs):
            losses = []
            lr = config.learning_rate
            batch = None
            for _ in range(self.steps_per_epoch):
                batch = build_training_batch(self.task, config.batch_size, config.effective_mix_count,
                                             batch_rng, config.mix_lambda_range)
                lr = lr_at(config.schedule, step_index, self.total_steps, config.learning_rate)
                losses.append(self.step(batch, lr, step_index))
                step_index += 1

            audit_error = None
            if audit:
                audit_error = self.audit(batch, audit_rng)
                if audit_error > config.audit_tolerance:
                    logger.warning(f"epoch {epoch}: gradient audit error {audit_error:.3e} "
                                   f"exceeds {config.audit_tolerance:.1e}")
                else:
                    logger.debug(f"epoch {epoch}: gradient audit error {audit_error:.3e}")
            record = EpochRecord(epoch=epoch, loss=float(np.mean(losses)),
                                 train_accuracy=self.train_accuracy(), lr=lr, audit_error=audit_error)
            history.append(record)
            logger.info(f"epoch {epoch + 1}/{config.epochs} loss={record.loss:.4f} "
                        f"train_acc={record.train_accuracy:.4f}")

        context = PromptContext.from_values(round_to_binary32(self.context.vectors.values))
        estimator = None
        if self.estimator is not None:
            estimator = MIEstimator.from_arrays(*(round_to_binary32(a) for a in self.estimator.arrays()))
        snapshot = config.to_dict()
        return TrainedModel(
            method=config.method,
            context=context,
            estimator=estimator,
            history=history,
            config=snapshot,
            config_hash=config_hash(snapshot),
            steps=step_index,
            seed=config.seed,
        )


def train(config: TrainConfig, task: FewShotTask, encoder: SyntheticTextEncoder) -> TrainedModel:
    """Train one model (see PromptTrainer.fit)."""
    return PromptTrainer(config, task, encoder).fit()
