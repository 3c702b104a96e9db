"""
Main Prompt-Tuning Lab Orchestrator.
Coordinates task generation, training and evaluation for the base-to-new
protocol, the ablation and the generalization runs.
"""
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Dict, List, Optional, Sequence, Tuple

from config import EVAL_METHODS, RunConfig
from encoders import FewShotTask, SyntheticTextEncoder, gen_synthetic_task, shift_task
from errors import ConfigError
from modules.augmentation.mixup import few_shot_sample
from modules.evaluation.evaluator import (
    ZERO_SHOT,
    EvalReport,
    GeneralizationRow,
    ReportRow,
    Stopwatch,
    evaluate_accuracy,
)
from modules.trainer.trainer import TrainConfig, TrainedModel, train
from utils import get_logger, setup_logging

logger = get_logger("lab")

ABLATION_ROWS: Tuple[Tuple[str, str, Dict[str, Any]], ...] = (
    ("baseline", "coop", {}),
    ("+MI loss", "ours", {"mix_count": 0}),
    ("+MI loss+Aug", "ours", {}),
)

# (label, method, overrides, shots, seed)
Job = Tuple[str, str, Dict[str, Any], int, int]


def _run_protocol_job(config_data: Dict[str, Any], job: Job) -> ReportRow:
    """Module-level entry point for worker processes."""
    return PromptLab(RunConfig(**config_data)).run_job(job)


class PromptLab:
    """Runs the lab's experiments from one RunConfig."""

    def __init__(self, config: Optional[RunConfig] = None, workers: Optional[int] = None):
        """
        Initialize the lab.

        Args:
            config: Run configuration (defaults apply when omitted)
            workers: Parallel worker processes; overrides config.workers
        """
        self.config = config or RunConfig()
        self.workers = workers or self.config.workers
        self.encoder = SyntheticTextEncoder.from_seed(self.config.encoder_seed, self.config.dim,
                                                      self.config.hidden)
        self._pools: Dict[int, FewShotTask] = {}

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.close()

    def close(self) -> None:
        self._pools.clear()

    # ========== Building blocks ==========

    def pool_task(self, seed: int) -> FewShotTask:
        """Task for `seed` with a training pool large enough for every shot count."""
        if seed not in self._pools:
            cfg = self.config
            self._pools[seed] = gen_synthetic_task(
                num_classes=cfg.num_classes,
                dim=cfg.dim,
                shots=max(cfg.shots),
                noise_sigma=cfg.noise_sigma,
                prototype_perturb=cfg.prototype_perturb,
                seed=seed,
                encoder=self.encoder,
                context_length=cfg.M,
                test_per_class=cfg.test_per_class,
            )
        return self._pools[seed]

    def make_task(self, seed: int, shots: int) -> FewShotTask:
        """K-shot task for `seed`; all shot counts share the same test splits."""
        if shots > max(self.config.shots):
            raise ConfigError(f"{shots} shots requested, config pool holds {max(self.config.shots)}")
        return few_shot_sample(self.pool_task(seed), shots, seed)

    def train_model(self, method: str, task: FewShotTask, seed: int, **overrides: Any) -> Optional[TrainedModel]:
        """Train `method` on `task`; the zero-shot pseudo-method returns None."""
        if method == ZERO_SHOT:
            return None
        return train(TrainConfig.from_run_config(self.config, method, seed=seed, **overrides), task, self.encoder)

    def run_job(self, job: Job) -> ReportRow:
        """Train and evaluate one (method, K, seed) on both splits."""
        label, method, overrides, shots, seed = job
        task = self.make_task(seed, shots)
        model = self.train_model(method, task, seed, **overrides)
        return ReportRow(
            method=label,
            shots=shots,
            seed=seed,
            base_acc=evaluate_accuracy(model, task, "base", self.encoder, self.config.tau),
            new_acc=evaluate_accuracy(model, task, "new", self.encoder, self.config.tau),
        )

    def _run_jobs(self, jobs: List[Job]) -> List[ReportRow]:
        if self.workers > 1 and len(jobs) > 1:
            data = self.config.to_dict()
            with ProcessPoolExecutor(max_workers=self.workers) as pool:
                return list(pool.map(_run_protocol_job, [data] * len(jobs), jobs))
        return [self.run_job(job) for job in jobs]

    def _report(self, title: str, rows: List[ReportRow], method_order: Sequence[str],
                shots: Sequence[int], seeds: Sequence[int], elapsed: float) -> EvalReport:
        report = EvalReport(
            title=title,
            rows=sorted(rows, key=lambda r: (r.method, r.shots, r.seed)),
            method_order=list(method_order),
            shots=sorted(shots),
            seeds=sorted(seeds),
            config=self.config.to_dict(),
            timing_seconds=elapsed,
        )
        logger.info(f"{title}: {len(rows)} runs in {elapsed:.1f}s")
        return report

    # ========== Experiments ==========

    def base_new_protocol(self, methods: Optional[Sequence[str]] = None, shots: Optional[Sequence[int]] = None,
                          seeds: Optional[Sequence[int]] = None) -> EvalReport:
        """
        Train every (method, K, seed) on the base classes and evaluate both splits.

        Args:
            methods: Methods (config.methods by default; "zeroshot" allowed)
            shots: Shot counts (config.shots by default)
            seeds: Seeds (config.seeds by default)

        Returns:
            EvalReport with one row per run, ordered by (method, K, seed)
        """
        methods = list(methods or self.config.methods)
        shots = list(shots or self.config.shots)
        seeds = list(seeds or self.config.seeds)
        unknown = [m for m in methods if m not in EVAL_METHODS]
        if unknown:
            raise ConfigError(f"unknown methods {unknown}")
        jobs = [(m, m, {}, k, s) for m in sorted(methods) for k in sorted(shots) for s in sorted(seeds)]
        with Stopwatch() as watch:
            rows = self._run_jobs(jobs)
        return self._report("Base-to-new generalization", rows, sorted(methods), shots, seeds, watch.elapsed)

    def ablation_run(self) -> EvalReport:
        """Baseline, +MI loss (no mixup) and +MI loss+Aug on the same seeds."""
        cfg = self.config
        jobs = [(label, method, overrides, k, s)
                for label, method, overrides in ABLATION_ROWS
                for k in sorted(cfg.shots) for s in sorted(cfg.seeds)]
        with Stopwatch() as watch:
            rows = self._run_jobs(jobs)
        return self._report("Component ablation", rows, [label for label, _, _ in ABLATION_ROWS],
                            cfg.shots, cfg.seeds, watch.elapsed)

    def domain_shift_run(self) -> EvalReport:
        """
        Base-class accuracy on the source test set and on drifted copies of it.

        Trains once per (method, seed) with the first configured shot count.
        """
        cfg = self.config
        shots = cfg.shots[0]
        rows: List[GeneralizationRow] = []
        with Stopwatch() as watch:
            for method in sorted(cfg.methods):
                for seed in sorted(cfg.seeds):
                    task = self.make_task(seed, shots)
                    model = self.train_model(method, task, seed)
                    rows.append(GeneralizationRow(method, "source", seed,
                                                  evaluate_accuracy(model, task, "base", self.encoder, cfg.tau)))
                    for level in cfg.shift_levels:
                        shifted = shift_task(task, level, seed)
                        rows.append(GeneralizationRow(method, f"shift={level:g}", seed,
                                                      evaluate_accuracy(model, shifted, "base", self.encoder, cfg.tau)))
        report = EvalReport(title="Domain shift", generalization=rows, method_order=sorted(cfg.methods),
                            shots=[shots], seeds=sorted(cfg.seeds), config=cfg.to_dict(),
                            timing_seconds=watch.elapsed)
        logger.info(f"Domain shift: {len(rows)} evaluations in {watch.elapsed:.1f}s")
        return report

    def cross_task_transfer(self) -> EvalReport:
        """
        Train on the source task, then classify all classes of unseen tasks
        that share the frozen encoder.
        """
        cfg = self.config
        shots = cfg.shots[0]
        rows: List[GeneralizationRow] = []
        targets = [(seed, self.pool_task(seed)) for seed in cfg.transfer_seeds]
        with Stopwatch() as watch:
            for method in sorted(cfg.methods):
                for seed in sorted(cfg.seeds):
                    task = self.make_task(seed, shots)
                    model = self.train_model(method, task, seed)
                    rows.append(GeneralizationRow(method, "source", seed,
                                                  evaluate_accuracy(model, task, "all", self.encoder, cfg.tau)))
                    for target_seed, target in targets:
                        rows.append(GeneralizationRow(method, f"task={target_seed}", seed,
                                                      evaluate_accuracy(model, target, "all", self.encoder, cfg.tau)))
        report = EvalReport(title="Cross-task transfer", generalization=rows, method_order=sorted(cfg.methods),
                            shots=[shots], seeds=sorted(cfg.seeds), config=cfg.to_dict(),
                            timing_seconds=watch.elapsed)
        logger.info(f"Cross-task transfer: {len(rows)} evaluations in {watch.elapsed:.1f}s")
        return report


if __name__ == "__main__":
    setup_logging()
    with PromptLab(RunConfig(dim=32, epochs=5, methods=["zeroshot", "coop"], seeds=[1])) as lab:
        result = lab.base_new_protocol()
        for row in result.rows:
            print(f"{row.method:>8} K={row.shots} base={row.base_acc:.4f} new={row.new_acc:.4f} H={row.hm:.4f}")
