"""
Report export for the Prompt-Tuning Lab.
Writes evaluation reports as Markdown grids or CSV tables.
"""
from pathlib import Path
from typing import List, Union

import pandas as pd
from tabulate import tabulate

from config import EVAL_CONFIG, REPORT_FORMATS
from errors import ConfigError, IoError
from modules.evaluation.evaluator import EvalReport
from utils import format_accuracy

FORMAT_ALIASES = {"md": "markdown", "markdown": "markdown", "csv": "csv"}
GENERALIZATION_HEADER = ["method", "target", "seed", "accuracy"]


class ReportExporter:
    """Render reports to Markdown or CSV text."""

    def __init__(self, decimals: int = EVAL_CONFIG["decimals"]):
        """Initialize the exporter with a fixed number of decimals."""
        self.decimals = decimals

    def _fmt(self, value: float) -> str:
        return format_accuracy(value, self.decimals)

    # ========== CSV ==========

    def to_dataframe(self, report: EvalReport) -> pd.DataFrame:
        """Per-run rows ordered by (method, K, seed)."""
        if report.rows:
            data = [{
                "method": row.method,
                "K": row.shots,
                "seed": row.seed,
                "base_acc": row.base_acc,
                "new_acc": row.new_acc,
                "hm": row.hm,
            } for row in report.sorted_rows()]
            return pd.DataFrame(data, columns=EVAL_CONFIG["csv_header"])
        data = [{
            "method": row.method,
            "target": row.target,
            "seed": row.seed,
            "accuracy": row.accuracy,
        } for row in sorted(report.generalization, key=lambda r: (r.method, r.target, r.seed))]
        return pd.DataFrame(data, columns=GENERALIZATION_HEADER)

    def to_csv(self, report: EvalReport) -> str:
        return self.to_dataframe(report).to_csv(index=False, float_format=f"%.{self.decimals}f",
                                                lineterminator="\n")

    # ========== Markdown ==========

    def grid_table(self, report: EvalReport) -> str:
        """Method rows × (Base, New, H) per K, from seed-mean accuracies."""
        headers = ["Method"]
        for k in report.shots:
            headers += [f"K={k} Base", f"K={k} New", f"K={k} H"]
        rows = []
        for method in report.methods():
            line: List[str] = [method]
            for k in report.shots:
                summary = report.summary(method, k)
                if summary is None:
                    line += ["-", "-", "-"]
                else:
                    line += [self._fmt(summary.base_mean), self._fmt(summary.new_mean), self._fmt(summary.hm)]
            rows.append(line)
        return tabulate(rows, headers=headers, tablefmt="github", disable_numparse=True)

    def mean_hm_table(self, report: EvalReport) -> str:
        """Mean of the per-seed harmonic means."""
        headers = ["Method"] + [f"K={k} mean H" for k in report.shots]
        rows = []
        for method in report.methods():
            line = [method]
            for k in report.shots:
                summary = report.summary(method, k)
                line.append("-" if summary is None else self._fmt(summary.mean_hm))
            rows.append(line)
        return tabulate(rows, headers=headers, tablefmt="github", disable_numparse=True)

    def generalization_table(self, report: EvalReport) -> str:
        means = report.generalization_means()
        targets = report.targets()
        rows = []
        for method in report.methods():
            rows.append([method] + [self._fmt(means[(method, t)]) if (method, t) in means else "-"
                                    for t in targets])
        return tabulate(rows, headers=["Method"] + targets, tablefmt="github", disable_numparse=True)

    def to_markdown(self, report: EvalReport) -> str:
        seeds = ", ".join(str(s) for s in report.seeds)
        parts = [f"# {report.title}", "", f"Seeds: {seeds}", ""]
        if report.rows:
            parts += ["## Accuracy (mean over seeds)", "", self.grid_table(report), "",
                      "## Mean of per-seed H", "", self.mean_hm_table(report), ""]
        if report.generalization:
            parts += ["## Accuracy by target (mean over seeds)", "", self.generalization_table(report), ""]
        for warning in report.meta.get("warnings", []):
            parts += [f"> warning: {warning}", ""]
        return "\n".join(parts)

    def render(self, report: EvalReport, fmt: str) -> str:
        fmt = FORMAT_ALIASES.get(fmt)
        if fmt not in REPORT_FORMATS:
            raise ConfigError(f"report format must be one of {sorted(FORMAT_ALIASES)}")
        return self.to_markdown(report) if fmt == "markdown" else self.to_csv(report)


def emit_report(report: EvalReport, fmt: str, path: Union[str, Path]) -> Path:
    """
    Write a report.

    Args:
        report: Completed report
        fmt: "markdown" (or "md") or "csv"
        path: Destination file

    Returns:
        Path written
    """
    text = ReportExporter().render(report, fmt)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise IoError(f"cannot write report to {path}: {e}") from e
    return path
