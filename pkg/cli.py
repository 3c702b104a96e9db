"""
Command-Line Interface for the Prompt-Tuning Lab.
Subcommands for task generation, training, evaluation, gradient checking and
the protocol/ablation/generalization runs.

Exit codes: 0 success, 1 validation error, 2 runtime error.
"""
import argparse
import sys
from typing import Callable, Dict, List, Optional

from colorama import init

from config import METHODS, RunConfig, load_run_config
from encoders import SyntheticTextEncoder, encoder_for_task, gen_synthetic_task, load_task, save_task
from errors import VALIDATION_ERRORS, LabError
from gradcheck import run_gradient_suite
from lab import PromptLab
from modules.evaluation.evaluator import EvalReport, GeneralizationRow, ReportRow, evaluate_accuracy, harmonic_mean
from modules.trainer.checkpoint import load_checkpoint, save_checkpoint, verify_config
from modules.trainer.trainer import TrainConfig, train
from report_export import ReportExporter, emit_report
from utils import color_text, create_table, format_accuracy, setup_logging

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


class LabArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with the validation code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _config(args) -> RunConfig:
    return load_run_config(args.config, seed=args.seed)


def _print_report(report: EvalReport) -> None:
    exporter = ReportExporter()
    if report.rows:
        rows = [[s.method, s.shots, format_accuracy(s.base_mean), format_accuracy(s.new_mean),
                 format_accuracy(s.hm), format_accuracy(s.mean_hm)] for s in report.summarize()]
        print(create_table(["Method", "K", "Base", "New", "H", "mean H"], rows))
    if report.generalization:
        print(exporter.generalization_table(report))


# ========== Subcommands ==========

def cmd_gen_task(args) -> int:
    config = _config(args)
    encoder = SyntheticTextEncoder.from_seed(config.encoder_seed, config.dim, config.hidden)
    task = gen_synthetic_task(
        num_classes=config.num_classes,
        dim=config.dim,
        shots=max(config.shots),
        noise_sigma=config.noise_sigma,
        prototype_perturb=config.prototype_perturb,
        seed=config.seed,
        encoder=encoder,
        context_length=config.M,
        test_per_class=config.test_per_class,
    )
    path = save_task(task, args.out)
    print(color_text(f"✓ Task written to {path}", "green"))
    print(f"  classes={task.num_classes} dim={task.dim} shots={task.shots} "
          f"base={list(task.base_class_ids)} new={list(task.new_class_ids)}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _config(args)
    task = load_task(args.task)
    model = train(TrainConfig.from_run_config(config, args.method), task, encoder_for_task(task))
    path = save_checkpoint(model, args.out)
    last = model.history[-1]
    print(color_text(f"✓ {model.method} checkpoint written to {path}", "green"))
    print(f"  steps={model.steps} final loss={last.loss:.4f} train accuracy={format_accuracy(last.train_accuracy)}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.ckpt)
    if args.config:
        verify_config(model, TrainConfig.from_run_config(_config(args), model.method).to_dict())
    task = load_task(args.task)
    encoder = encoder_for_task(task)
    splits = ["base", "new"] if args.split == "both" else [args.split]
    accuracies = {split: evaluate_accuracy(model, task, split, encoder, model.tau) for split in splits}

    table = [[split, format_accuracy(acc)] for split, acc in accuracies.items()]
    if args.split == "both":
        table.append(["H", format_accuracy(harmonic_mean(accuracies["base"], accuracies["new"]))])
        report = EvalReport(title="Checkpoint evaluation",
                            rows=[ReportRow(model.method, task.shots, model.seed,
                                            accuracies["base"], accuracies["new"])],
                            shots=[task.shots], seeds=[model.seed], config=model.config, meta=model.meta)
    else:
        report = EvalReport(title="Checkpoint evaluation",
                            generalization=[GeneralizationRow(model.method, args.split, model.seed,
                                                              accuracies[args.split])],
                            seeds=[model.seed], config=model.config, meta=model.meta)
    print(create_table(["Split", "Accuracy"], table))
    for warning in model.meta.get("warnings", []):
        print(color_text(f"! {warning}", "yellow"))
    if args.out:
        path = emit_report(report, args.format, args.out)
        print(color_text(f"✓ Report written to {path}", "green"))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    result = run_gradient_suite(seed=args.seed if args.seed is not None else 1, trials=args.trials)
    rows = [[name, f"{value:.3e}"] for name, value in result.max_errors.items()]
    print(create_table(["Loss", "Max relative error"], rows))
    print(f"max relative error: {result.max_error:.3e} ({result.trials} trials, {result.resampled} resampled)")
    if result.passed():
        print(color_text("✓ Gradient checks passed", "green"))
        return EXIT_OK
    print(color_text("✗ Gradient checks failed", "red"))
    return EXIT_RUNTIME


def _experiment(runner: Callable[[PromptLab], EvalReport]) -> Callable:
    def command(args) -> int:
        config = _config(args)
        with PromptLab(config, workers=args.workers) as lab:
            report = runner(lab)
        _print_report(report)
        path = emit_report(report, args.format or config.report_format, args.out)
        print(color_text(f"✓ {report.title} report written to {path}", "green"))
        return EXIT_OK
    return command


COMMANDS: Dict[str, Callable] = {
    "gen-task": cmd_gen_task,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "protocol": _experiment(lambda lab: lab.base_new_protocol()),
    "ablate": _experiment(lambda lab: lab.ablation_run()),
    "shift": _experiment(lambda lab: lab.domain_shift_run()),
    "transfer": _experiment(lambda lab: lab.cross_task_transfer()),
}


def build_parser() -> argparse.ArgumentParser:
    common = LabArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the config seed everywhere")

    parser = LabArgumentParser(prog="promptlab", description="Desk-scale prompt-tuning lab")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=LabArgumentParser)

    p = sub.add_parser("gen-task", parents=[common], help="generate a synthetic few-shot task")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", parents=[common], help="train one method on a task file")
    p.add_argument("--config", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--split", choices=["base", "new", "both"], default="both")
    p.add_argument("--format", choices=["md", "markdown", "csv"], default="md")
    p.add_argument("--out")
    p.add_argument("--config", help="training config to compare against the checkpoint")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--trials", type=int, default=100)

    for name, text in (("protocol", "base-to-new protocol"), ("ablate", "component ablation"),
                       ("shift", "domain-shift evaluation"), ("transfer", "cross-task transfer")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--config", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--format", choices=["md", "markdown", "csv"], default=None)
        p.add_argument("--workers", type=int, default=None)
    return parser


def cli_main(argv: Optional[List[str]] = None) -> int:
    """
    Run the CLI.

    Args:
        argv: Arguments without the program name (sys.argv[1:] by default)

    Returns:
        Exit code
    """
    init()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_VALIDATION
    setup_logging()
    try:
        return COMMANDS[args.command](args)
    except VALIDATION_ERRORS as e:
        print(color_text(f"✗ {type(e).__name__}: {e}", "red"), file=sys.stderr)
        return EXIT_VALIDATION
    except (LabError, OSError) as e:
        print(color_text(f"✗ {type(e).__name__}: {e}", "red"), file=sys.stderr)
        return EXIT_RUNTIME


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
