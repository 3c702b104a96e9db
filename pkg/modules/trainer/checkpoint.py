"""
Checkpoint persistence in the PTES container.
"""
from pathlib import Path
from typing import Any, Dict, Optional, Union

import sys
sys.path.append(str(Path(__file__).parent.parent.parent))

from config import config_hash
from embedding_store import EMBEDDING, PARAMETER, EmbeddingStore, load_embedding_store, save_embedding_store
from errors import FormatError
from modules.objectives.mi_estimator import PARAMETER_NAMES, MIEstimator
from modules.prompt.prompt_learner import PromptContext
from modules.trainer.trainer import EpochRecord, TrainedModel
from utils import get_logger

logger = get_logger("checkpoint")

CONTEXT_MATRIX = "context_vectors"


def checkpoint_to_store(model: TrainedModel) -> EmbeddingStore:
    """Pack a model: context vectors, estimator weights (if any) and JSON meta."""
    context = model.context.numpy()
    store = EmbeddingStore(dim=context.shape[1], matrices={CONTEXT_MATRIX: context},
                           kinds={CONTEXT_MATRIX: EMBEDDING})
    if model.estimator is not None:
        for name, values in zip(PARAMETER_NAMES, model.estimator.arrays()):
            store.add_matrix(name, values, kind=PARAMETER)
    store.meta = {
        "kind": "checkpoint",
        "method": model.method,
        "config": model.config,
        "config_hash": model.config_hash,
        "step": model.steps,
        "seed": model.seed,
        "history": [vars(record) for record in model.history],
    }
    return store


def checkpoint_from_store(store: EmbeddingStore) -> TrainedModel:
    meta = store.meta
    if meta.get("kind") != "checkpoint" or not store.has(CONTEXT_MATRIX):
        raise FormatError("store does not hold a checkpoint")
    estimator = None
    present = [name for name in PARAMETER_NAMES if store.has(name)]
    if present:
        if len(present) != len(PARAMETER_NAMES):
            raise FormatError(f"checkpoint has a partial estimator: {present}")
        w1, b1, w2, b2 = (store.matrix(name) for name in PARAMETER_NAMES)
        estimator = MIEstimator.from_arrays(w1, b1.reshape(-1), w2, b2.reshape(-1))
    try:
        history = [EpochRecord(**record) for record in meta.get("history", [])]
        return TrainedModel(
            method=meta["method"],
            context=PromptContext.from_values(store.matrix(CONTEXT_MATRIX)),
            estimator=estimator,
            history=history,
            config=meta["config"],
            config_hash=meta["config_hash"],
            steps=int(meta["step"]),
            seed=int(meta["seed"]),
        )
    except (KeyError, TypeError) as e:
        raise FormatError(f"checkpoint meta is incomplete: {e}") from e


def save_checkpoint(model: TrainedModel, path: Union[str, Path]) -> Path:
    """Write a model to a PTES checkpoint."""
    path = save_embedding_store(checkpoint_to_store(model), path)
    logger.info(f"Saved {model.method} checkpoint to {path}")
    return path


def load_checkpoint(path: Union[str, Path], expected_config: Optional[Dict[str, Any]] = None) -> TrainedModel:
    """
    Read a checkpoint.

    Args:
        path: Checkpoint file
        expected_config: Training config the caller resumes with; a hash
            mismatch is logged and recorded under meta["warnings"]

    Returns:
        TrainedModel
    """
    model = checkpoint_from_store(load_embedding_store(path))
    if expected_config is not None:
        verify_config(model, expected_config)
    return model


def verify_config(model: TrainedModel, expected_config: Dict[str, Any]) -> bool:
    """Compare config hashes; a mismatch is logged and recorded, never fatal."""
    expected = config_hash(expected_config)
    if expected == model.config_hash:
        return True
    message = f"config hash mismatch: checkpoint {model.config_hash}, expected {expected}"
    logger.warning(message)
    model.meta.setdefault("warnings", []).append(message)
    return False
