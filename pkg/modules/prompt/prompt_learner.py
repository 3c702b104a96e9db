"""
Prompt Space Module - learnable context vectors and the two class-embedding views.
The hand-crafted view is fixed; the learnable view is re-encoded every forward pass.
"""
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

import sys
from pathlib import Path
sys.path.append(str(Path(__file__).parent.parent.parent))

import autodiff as ad
from autodiff import Tensor
from config import PROMPT_CONFIG
from encoders import FewShotTask, SyntheticTextEncoder, encode_prompts
from errors import ConfigError, ShapeError


@dataclass
class PromptContext:
    """The M×d context vectors shared by every class prompt."""

    vectors: Tensor

    def __post_init__(self):
        if self.vectors.ndim != 2:
            raise ShapeError(f"context must be an M×d matrix, got shape {self.vectors.shape}")
        if not np.all(np.isfinite(self.vectors.values)):
            raise ConfigError("context vectors must be finite")

    @property
    def M(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def numpy(self) -> np.ndarray:
        return self.vectors.numpy()

    def update(self, values: np.ndarray) -> None:
        """Swap in new values as a fresh parameter leaf (trainer only)."""
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.vectors.shape:
            raise ShapeError(f"context update has shape {values.shape}, expected {self.vectors.shape}")
        self.vectors = Tensor.parameter(values)

    @classmethod
    def from_values(cls, values: np.ndarray) -> "PromptContext":
        return cls(Tensor.parameter(values))


def init_context(M: int = PROMPT_CONFIG["M"], d: int = 64,
                 init_scale: float = PROMPT_CONFIG["init_scale"], seed: int = 1) -> PromptContext:
    """
    Draw context vectors i.i.d. from N(0, init_scale²).

    Args:
        M: Context length
        d: Embedding dimension
        init_scale: Standard deviation of the entries
        seed: Generator seed

    Returns:
        PromptContext whose vectors require gradients
    """
    if M < 1 or d < 1:
        raise ConfigError(f"context size must be positive, got M={M}, d={d}")
    if not init_scale > 0:
        raise ConfigError(f"init_scale must be > 0, got {init_scale}")
    rng = np.random.default_rng(seed)
    return PromptContext.from_values(init_scale * rng.standard_normal((M, d)))


def context_from_template(task: FewShotTask, M: Optional[int] = None) -> PromptContext:
    """Start from the task's hand-crafted template tokens."""
    if M is not None and M != task.context_length:
        raise ConfigError(f"template has {task.context_length} tokens, context length is {M}")
    return PromptContext.from_values(task.template_tokens)


def assemble_prompt(ctx: PromptContext, class_token) -> Tensor:
    """
    Build t_i = {v_1, ..., v_M, c_i}.

    Returns:
        (M+1)×d tensor; rows 0..M-1 are the context, the last row the class token
    """
    class_token = ad.as_tensor(class_token)
    if class_token.ndim != 1 or class_token.shape[0] != ctx.dim:
        raise ShapeError(f"class token has shape {class_token.shape}, context dim is {ctx.dim}")
    return ad.concat_rows(ctx.vectors, class_token)


@dataclass(frozen=True)
class ClassEmbeddingViews:
    """Hand-crafted (constant) and learnable text embeddings for the active classes."""

    handcrafted: Tensor
    learnable: Tensor
    tau: float
    class_ids: Tuple[int, ...]

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)


def encode_views(ctx: PromptContext, task: FewShotTask, encoder: SyntheticTextEncoder,
                 tau: float = PROMPT_CONFIG["tau"],
                 class_ids: Optional[Sequence[int]] = None) -> ClassEmbeddingViews:
    """
    Produce both class-embedding views.

    Args:
        ctx: Context vectors
        task: Task supplying class tokens and hand-crafted embeddings
        encoder: Frozen text encoder
        tau: Temperature shared by both views
        class_ids: Active class subset (defaults to every class)

    Returns:
        ClassEmbeddingViews; only the learnable rows depend on the context
    """
    if task.dim != encoder.dim or ctx.dim != encoder.dim:
        raise ShapeError(f"dims disagree: task {task.dim}, context {ctx.dim}, encoder {encoder.dim}")
    if not tau > 0:
        raise ConfigError(f"tau must be > 0, got {tau}")
    ids = tuple(range(task.num_classes)) if class_ids is None else tuple(int(i) for i in class_ids)

    # encode every class and gather after, so row values never depend on the subset
    learnable = encode_prompts(encoder, ctx.vectors, task.class_tokens)
    handcrafted = Tensor(task.handcrafted)
    if len(ids) != task.num_classes or ids != tuple(range(task.num_classes)):
        learnable = ad.take_rows(learnable, ids)
        handcrafted = Tensor(task.handcrafted[list(ids)])
    return ClassEmbeddingViews(handcrafted=handcrafted, learnable=learnable, tau=float(tau), class_ids=ids)
