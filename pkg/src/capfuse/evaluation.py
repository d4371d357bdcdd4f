"""Accuracy, confusion matrices, accuracy tables and fusion-curve output."""

from __future__ import annotations

import csv
import io
import statistics
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .errors import EmptyInput, IndexOutOfRange, LengthMismatch
from .fusion import FusionSweepResult

NO_STD = "—"


def accuracy(predictions: Sequence[int], labels: Sequence[int]) -> float:
    if len(predictions) != len(labels):
        raise LengthMismatch(f"{len(predictions)} predictions vs {len(labels)} labels")
    if len(labels) == 0:
        raise EmptyInput("accuracy of an empty list is undefined")
    hits = sum(int(p) == int(y) for p, y in zip(predictions, labels))
    return hits / len(labels)


def confusion_matrix(predictions: Sequence[int], labels: Sequence[int], C: int) -> np.ndarray:
    """``cm[i, j]`` counts samples of true class ``i`` predicted as ``j``."""
    if len(predictions) != len(labels):
        raise LengthMismatch(f"{len(predictions)} predictions vs {len(labels)} labels")
    cm = np.zeros((C, C), dtype=np.int64)
    for p, y in zip(predictions, labels):
        if not (0 <= y < C and 0 <= p < C):
            raise IndexOutOfRange(f"class index out of [0, {C}): label={y}, prediction={p}")
        cm[y, p] += 1
    return cm


@dataclass(frozen=True)
class ReportRow:
    system: str
    accuracies: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "accuracies", tuple(self.accuracies))
        if not self.accuracies:
            raise ValueError(f"system {self.system!r} has no trial accuracies")
        for a in self.accuracies:
            if not 0.0 <= a <= 1.0:
                raise ValueError(f"accuracy {a} outside [0, 1]")

    @property
    def mean(self) -> float:
        return statistics.fmean(self.accuracies)

    @property
    def std(self) -> float | None:
        # sample standard deviation across trials
        return statistics.stdev(self.accuracies) if len(self.accuracies) > 1 else None

    @property
    def n_trials(self) -> int:
        return len(self.accuracies)


@dataclass(frozen=True)
class EvalReport:
    task_id: str
    rows: tuple[ReportRow, ...]
    confusion: np.ndarray | None = field(default=None, compare=False)
    class_names: tuple[str, ...] = ()
    confusion_system: str = ""


def pct(x: float) -> str:
    return f"{100.0 * x:.2f}"


def _table(report: EvalReport) -> list[list[str]]:
    out = []
    for r in report.rows:
        std = NO_STD if r.std is None else pct(r.std)
        out.append([report.task_id, r.system, pct(r.mean), std, str(r.n_trials)])
    return out


REPORT_COLUMNS = ["task", "system", "accuracy_mean_pct", "accuracy_std_pct", "n_trials"]


def render_report(report: EvalReport, fmt: str = "csv") -> str:
    if not report.rows:
        raise ValueError("report needs at least one system row")
    rows = _table(report)
    if fmt == "csv":
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows([REPORT_COLUMNS, *rows])
        return buf.getvalue()
    if fmt == "markdown":
        lines = ["| " + " | ".join(REPORT_COLUMNS) + " |",
                 "|" + "|".join(["---"] * len(REPORT_COLUMNS)) + "|"]
        lines += ["| " + " | ".join(r) + " |" for r in rows]
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown report format {fmt!r}")


def emit_report(report: EvalReport, out_dir: str | Path, formats: Sequence[str] = ("csv", "markdown"),
                stem: str = "report") -> list[Path]:
    """Write the accuracy table (and confusion matrix, when present); returns written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in formats:
        path = out_dir / f"{stem}.{'md' if fmt == 'markdown' else fmt}"
        path.write_text(render_report(report, fmt), encoding="utf-8")
        written.append(path)
    if report.confusion is not None:
        path = out_dir / f"{stem}_confusion.csv"
        names = report.class_names or tuple(str(k) for k in range(len(report.confusion)))
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["true\\pred", *names])
            writer.writerows([name, *(int(v) for v in row)] for name, row in zip(names, report.confusion))
        written.append(path)
    return written


def render_fusion_curve(result: FusionSweepResult) -> str:
    curves = result.trial_curves()
    header = ["w", "accuracy_mean", *(f"accuracy_trial_{i + 1}" for i in range(len(curves)))]
    lines = [",".join(header)]
    for j, w in enumerate(result.grid):
        vals = [result.accuracy_per_w[j], *(c[j] for c in curves)]
        lines.append(",".join([f"{w:.2f}", *(f"{v:.6f}" for v in vals)]))
    return "\n".join(lines) + "\n"


class CurveRenderer(Protocol):
    def __call__(self, results: Sequence[FusionSweepResult], path: Path, title: str) -> Path: ...


def matplotlib_renderer(results: Sequence[FusionSweepResult], path: Path, title: str = "") -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for r in results:
        ax.plot(r.grid, [100 * a for a in r.accuracy_per_w], marker="o", ms=3, label=r.label or None)
    ax.set_xlabel("fusion weight w (text)")
    ax.set_ylabel("accuracy (%)")
    ax.set_xlim(0, 1)
    if title:
        ax.set_title(title)
    if any(r.label for r in results):
        ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


def emit_fusion_curve(
    results: FusionSweepResult | Sequence[FusionSweepResult],
    out_path: str | Path,
    render: bool = False,
    renderer: CurveRenderer | None = None,
    title: str = "",
) -> list[Path]:
    """Write one CSV per sweep result and optionally a single overlay plot.

    With several results, ``out_path`` is a stem and each CSV gets the
    result's label as suffix; the plot goes to ``<out_path>.png``.
    """
    if isinstance(results, FusionSweepResult):
        results = [results]
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    written = []
    if len(results) == 1:
        csv_path = out_path.with_suffix(".csv")
        csv_path.write_text(render_fusion_curve(results[0]), encoding="utf-8")
        written.append(csv_path)
    else:
        grid = results[0].grid
        if any(r.grid != grid for r in results):
            raise ValueError("overlaid sweeps must share one grid")
        for i, r in enumerate(results):
            suffix = _safe(r.label) if r.label else str(i + 1)
            csv_path = out_path.with_name(f"{out_path.stem}__{suffix}.csv")
            csv_path.write_text(render_fusion_curve(r), encoding="utf-8")
            written.append(csv_path)
    if render:
        written.append((renderer or matplotlib_renderer)(results, out_path.with_suffix(".png"), title))
    return written


def _safe(s: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in s)
