"""
Utility functions for the Prompt-Tuning Lab.
"""
import logging
import logging.handlers
from typing import Any, List, Optional

import numpy as np

from config import LOG_CONFIG

ROOT_LOGGER = "promptlab"


def setup_logging(name: str = ROOT_LOGGER) -> logging.Logger:
    """
    Attach console and rotating-file handlers to the lab's root logger.

    Safe to call from every entry point; handlers are attached once.
    """
    logger = logging.getLogger(name)
    if logger.handlers:
        return logger
    level = logging.getLevelName(str(LOG_CONFIG["level"]).upper())
    logger.setLevel(level if isinstance(level, int) else logging.INFO)

    formatter = logging.Formatter(LOG_CONFIG["format"])
    console = logging.StreamHandler()
    console.setLevel(logger.level)
    run_log = logging.handlers.RotatingFileHandler(
        LOG_CONFIG["file"], maxBytes=LOG_CONFIG["max_bytes"],
        backupCount=LOG_CONFIG["backup_count"], encoding="utf-8",
    )
    run_log.setLevel(logging.DEBUG)
    for handler in (console, run_log):
        handler.setFormatter(formatter)
        logger.addHandler(handler)
    return logger


def get_logger(component: str) -> logging.Logger:
    """Child logger of the lab's root logger (handlers live on the root)."""
    return logging.getLogger(f"{ROOT_LOGGER}.{component}")


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """
    Seeded generator for one named stream of a run.

    Args:
        seed: Run seed
        stream: Stream path, e.g. (2,) for the batch stream

    Returns:
        Independent numpy Generator
    """
    return np.random.default_rng(np.random.SeedSequence([seed, *stream]))


def round_to_binary32(values: np.ndarray) -> np.ndarray:
    """Snap float64 values to the nearest binary32 and widen back."""
    return np.asarray(values, dtype=np.float64).astype(np.float32).astype(np.float64)


def format_accuracy(value: float, decimals: int = 4) -> str:
    """Format an accuracy with fixed precision."""
    return f"{value:.{decimals}f}"


def color_text(text: str, color: str) -> str:
    """Wrap a CLI status line in a colorama color; unknown colors pass through."""
    from colorama import Fore, Style

    code = getattr(Fore, color.upper(), "")
    return f"{code}{text}{Style.RESET_ALL}"


def create_table(headers: List[str], rows: List[List[Any]], tablefmt: str = "simple",
                 floatfmt: Optional[str] = None) -> str:
    """Create a formatted table from data."""
    from tabulate import tabulate
    if floatfmt is None:
        return tabulate(rows, headers=headers, tablefmt=tablefmt)
    return tabulate(rows, headers=headers, tablefmt=tablefmt, floatfmt=floatfmt)
