"""
Configuration management for the Prompt-Tuning Lab.
Defaults follow the desk-scale protocol; every run is a pure function of its config.
"""
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv

from errors import ConfigError

load_dotenv()

# Base Paths
BASE_DIR = Path(__file__).parent
DATA_DIR = Path(os.environ.get("PROMPTLAB_HOME", BASE_DIR / "data"))
LOGS_DIR = DATA_DIR / "logs"
RUNS_DIR = DATA_DIR / "runs"

# Ensure directories exist
for directory in [DATA_DIR, LOGS_DIR, RUNS_DIR]:
    directory.mkdir(parents=True, exist_ok=True)

METHODS = ("ours", "coop", "kgcoop", "prograd")
EVAL_METHODS = METHODS + ("zeroshot",)
SCHEDULES = ("constant", "cosine")
CTX_INITS = ("random", "template")
REPORT_FORMATS = ("markdown", "csv")

# Synthetic task generation
TASK_CONFIG = {
    "num_classes": 10,
    "dim": 64,
    "hidden": 128,           # frozen text encoder width h
    "shots": [1, 2, 4, 8, 16],
    "noise_sigma": 0.3,
    "prototype_perturb": 0.2,
    "test_per_class": 50,
    "encoder_seed": 0,
}

# Prompt space
PROMPT_CONFIG = {
    "M": 16,                 # context tokens
    "init_scale": 0.02,
    "tau": 0.01,             # logit scale 100
    "ctx_init": "template",  # start from the hand-crafted prompt
}

# Losses and MI estimator
OBJECTIVE_CONFIG = {
    "lambda1": 1.0,
    "lambda2": 2.0,
    "kg_weight": 8.0,
    "mi_hidden": 256,
    "mi_init_scale": 0.1,
    "log_floor": 1e-12,
    "mix_lambda_range": (0.4, 0.6),
}

# Optimization
TRAIN_CONFIG = {
    "epochs": 100,
    "batch": 8,
    "mix_count": None,       # None -> equal to batch
    "lr": 0.002,
    "schedule": "cosine",
    "prograd_lambda": 1.0,
    "mixup_baselines": False,
    "audit_tolerance": 1e-3,
}

# Evaluation protocol
EVAL_CONFIG = {
    "methods": ["coop", "ours"],
    "seeds": [1, 2, 3],
    "report_format": "markdown",
    "decimals": 4,
    "workers": 1,
    "shift_levels": [0.1, 0.2, 0.4],
    "transfer_seeds": [101, 102],
    "csv_header": ["method", "K", "seed", "base_acc", "new_acc", "hm"],
}

# Logging Configuration
LOG_CONFIG = {
    "level": os.environ.get("PROMPTLAB_LOG_LEVEL", "INFO"),
    "format": "%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    "file": LOGS_DIR / "promptlab.log",
    "max_bytes": 10 * 1024 * 1024,  # 10 MB
    "backup_count": 5,
}


@dataclass
class RunConfig:
    """Schema of a run configuration file (UTF-8 JSON)."""

    seed: int = 1
    num_classes: int = TASK_CONFIG["num_classes"]
    dim: int = TASK_CONFIG["dim"]
    hidden: int = TASK_CONFIG["hidden"]
    shots: List[int] = field(default_factory=lambda: [4])
    M: int = PROMPT_CONFIG["M"]
    tau: float = PROMPT_CONFIG["tau"]
    lambda1: float = OBJECTIVE_CONFIG["lambda1"]
    lambda2: float = OBJECTIVE_CONFIG["lambda2"]
    kg_weight: float = OBJECTIVE_CONFIG["kg_weight"]
    lr: float = TRAIN_CONFIG["lr"]
    schedule: str = TRAIN_CONFIG["schedule"]
    epochs: int = TRAIN_CONFIG["epochs"]
    batch: int = TRAIN_CONFIG["batch"]
    mix_count: Optional[int] = TRAIN_CONFIG["mix_count"]
    noise_sigma: float = TASK_CONFIG["noise_sigma"]
    prototype_perturb: float = TASK_CONFIG["prototype_perturb"]
    methods: List[str] = field(default_factory=lambda: list(EVAL_CONFIG["methods"]))
    seeds: List[int] = field(default_factory=lambda: list(EVAL_CONFIG["seeds"]))
    out_dir: str = str(RUNS_DIR)
    # supplements
    encoder_seed: int = TASK_CONFIG["encoder_seed"]
    test_per_class: int = TASK_CONFIG["test_per_class"]
    init_scale: float = PROMPT_CONFIG["init_scale"]
    mi_hidden: int = OBJECTIVE_CONFIG["mi_hidden"]
    mi_init_scale: float = OBJECTIVE_CONFIG["mi_init_scale"]
    ctx_init: str = PROMPT_CONFIG["ctx_init"]
    prograd_lambda: float = TRAIN_CONFIG["prograd_lambda"]
    mixup_baselines: bool = TRAIN_CONFIG["mixup_baselines"]
    report_format: str = EVAL_CONFIG["report_format"]
    workers: int = EVAL_CONFIG["workers"]
    shift_levels: List[float] = field(default_factory=lambda: list(EVAL_CONFIG["shift_levels"]))
    transfer_seeds: List[int] = field(default_factory=lambda: list(EVAL_CONFIG["transfer_seeds"]))

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        """Raise ConfigError on any out-of-range value."""
        positive_ints = {
            "num_classes": self.num_classes, "dim": self.dim, "hidden": self.hidden,
            "M": self.M, "epochs": self.epochs, "batch": self.batch,
            "test_per_class": self.test_per_class, "mi_hidden": self.mi_hidden,
            "workers": self.workers,
        }
        for name, value in positive_ints.items():
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.num_classes < 2 or self.num_classes % 2:
            raise ConfigError(f"num_classes must be even and >= 2, got {self.num_classes}")
        if self.dim < 2:
            raise ConfigError(f"dim must be >= 2, got {self.dim}")
        for name in ("tau", "lr", "init_scale", "mi_init_scale"):
            value = getattr(self, name)
            if not _is_real(value) or value <= 0:
                raise ConfigError(f"{name} must be > 0, got {value!r}")
        for name in ("lambda1", "lambda2", "kg_weight", "noise_sigma",
                     "prototype_perturb", "prograd_lambda"):
            value = getattr(self, name)
            if not _is_real(value) or value < 0:
                raise ConfigError(f"{name} must be >= 0, got {value!r}")
        if self.mix_count is not None and (not isinstance(self.mix_count, int) or self.mix_count < 0):
            raise ConfigError(f"mix_count must be a non-negative integer, got {self.mix_count!r}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.ctx_init not in CTX_INITS:
            raise ConfigError(f"ctx_init must be one of {CTX_INITS}, got {self.ctx_init!r}")
        if self.report_format not in REPORT_FORMATS:
            raise ConfigError(f"report_format must be one of {REPORT_FORMATS}")
        if not self.shots or any(not isinstance(k, int) or k < 1 for k in self.shots):
            raise ConfigError(f"shots must be a non-empty list of positive integers, got {self.shots!r}")
        if not self.seeds or any(not isinstance(s, int) or s < 0 for s in self.seeds):
            raise ConfigError(f"seeds must be a non-empty list of non-negative integers")
        unknown = [m for m in self.methods if m not in EVAL_METHODS]
        if not self.methods or unknown:
            raise ConfigError(f"unknown methods {unknown}; expected a subset of {EVAL_METHODS}")
        if any(not _is_real(s) or s < 0 for s in self.shift_levels):
            raise ConfigError("shift_levels must be non-negative reals")

    @property
    def effective_mix_count(self) -> int:
        return self.batch if self.mix_count is None else self.mix_count

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def replace(self, **changes: Any) -> "RunConfig":
        data = self.to_dict()
        data.update(changes)
        return RunConfig(**data)


def _is_real(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def run_config_from_dict(data: Dict[str, Any], seed: Optional[int] = None) -> RunConfig:
    """Build a RunConfig from a mapping, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    data = dict(data)
    if seed is not None:
        data["seed"] = seed
        data["seeds"] = [seed]
    try:
        return RunConfig(**data)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def load_run_config(path, seed: Optional[int] = None) -> RunConfig:
    """
    Load a run configuration file.

    Args:
        path: Path to a UTF-8 JSON config
        seed: Optional override applied everywhere (seed and seeds list)

    Returns:
        Validated RunConfig
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ConfigError(f"config file {path} is not valid UTF-8 JSON: {e}") from e
    return run_config_from_dict(data, seed=seed)


def config_hash(config: Dict[str, Any]) -> str:
    """Short SHA-256 over the canonical JSON form of a config mapping."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def get_config() -> Dict[str, Any]:
    """Return all default configuration as a dictionary."""
    return {
        "task": TASK_CONFIG,
        "prompt": PROMPT_CONFIG,
        "objective": OBJECTIVE_CONFIG,
        "train": TRAIN_CONFIG,
        "eval": EVAL_CONFIG,
        "paths": {"data": str(DATA_DIR), "logs": str(LOGS_DIR), "runs": str(RUNS_DIR)},
    }


if __name__ == "__main__":
    print("Prompt-Tuning Lab Configuration")
    print("=" * 50)
    print(f"Base Directory: {BASE_DIR}")
    print(f"Data Directory: {DATA_DIR}")
    print(f"Runs Directory: {RUNS_DIR}")
    print(f"\nDefault run config:")
    for key, value in RunConfig().to_dict().items():
        print(f"  - {key}: {value}")
