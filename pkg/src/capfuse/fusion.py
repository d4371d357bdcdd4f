"""Weighted score-level fusion of image and text posteriors.

The fused posterior is ``(1 - w) * p_image + w * p_text``; ``w = 0`` is the
image classifier alone and ``w = 1`` the text classifier alone.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .classification import ProbMatrix
from .dataset import SplitManifest
from .errors import GridMismatch, LengthMismatch, SampleSetMismatch, WeightOutOfRange

AVERAGING = "mean of per-trial accuracies (argmax per trial, then average)"


def default_grid(steps: int = 20) -> tuple[float, ...]:
    """``steps + 1`` evenly spaced weights from 0 to 1 (0.00, 0.05, ..., 1.00 by default)."""
    return tuple(i / steps for i in range(steps + 1))


def validate_grid(grid: Sequence[float]) -> tuple[float, ...]:
    g = tuple(float(w) for w in grid)
    if not g:
        raise ValueError("fusion grid is empty")
    for w in g:
        if not 0.0 <= w <= 1.0:
            raise WeightOutOfRange(w)
    if any(b <= a for a, b in zip(g, g[1:])):
        raise ValueError("fusion grid must be strictly ascending")
    if g[0] != 0.0 or g[-1] != 1.0:
        raise ValueError("fusion grid must include both 0.0 and 1.0")
    return g


@dataclass(frozen=True)
class FusionConfig:
    w: float = 0.5
    grid: tuple[float, ...] = field(default_factory=default_grid)
    selection_split: str = "dev"

    def __post_init__(self) -> None:
        if not 0.0 <= self.w <= 1.0:
            raise WeightOutOfRange(self.w)
        object.__setattr__(self, "grid", validate_grid(self.grid))


def fuse(p_image: Any, p_text: Any, w: float) -> np.ndarray:
    p = np.asarray(p_image, dtype=np.float64)
    q = np.asarray(p_text, dtype=np.float64)
    if p.shape != q.shape:
        raise LengthMismatch(f"cannot fuse vectors of shapes {p.shape} and {q.shape}")
    if not 0.0 <= w <= 1.0:
        raise WeightOutOfRange(w)
    return (1.0 - w) * p + w * q


@dataclass(frozen=True)
class FusionSweepResult:
    grid: tuple[float, ...]
    accuracy_per_w: tuple[float, ...]
    per_trial: tuple[tuple[float, ...], ...] | None = None
    trial_seeds: tuple[int, ...] = ()
    split_name: str = ""
    label: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "grid", tuple(self.grid))
        object.__setattr__(self, "accuracy_per_w", tuple(self.accuracy_per_w))
        object.__setattr__(self, "trial_seeds", tuple(self.trial_seeds))
        if self.per_trial is not None:
            object.__setattr__(self, "per_trial", tuple(tuple(c) for c in self.per_trial))
        if len(self.grid) != len(self.accuracy_per_w):
            raise LengthMismatch("grid and accuracy curve differ in length")

    def at(self, w: float) -> float:
        return self.accuracy_per_w[self.grid.index(w)]

    @property
    def image_only(self) -> float:
        return self.accuracy_per_w[0]

    @property
    def text_only(self) -> float:
        return self.accuracy_per_w[-1]

    def trial_curves(self) -> tuple[tuple[float, ...], ...]:
        return self.per_trial if self.per_trial is not None else (self.accuracy_per_w,)

    def to_dict(self) -> dict[str, Any]:
        return {
            "label": self.label,
            "split_name": self.split_name,
            "grid": list(self.grid),
            "accuracy_per_w": list(self.accuracy_per_w),
            "per_trial": [list(c) for c in self.per_trial] if self.per_trial is not None else None,
            "trial_seeds": list(self.trial_seeds),
            "averaging": AVERAGING,
        }


def _align(mat_image: ProbMatrix, mat_text: ProbMatrix) -> ProbMatrix:
    """Reorder the text matrix to the image matrix's row order (join on sample_id)."""
    a, b = set(mat_image.sample_ids), set(mat_text.sample_ids)
    if a != b:
        raise SampleSetMismatch(a - b, b - a)
    if mat_image.task.C != mat_text.task.C:
        raise LengthMismatch(f"class counts differ: {mat_image.task.C} vs {mat_text.task.C}")
    if mat_text.sample_ids == mat_image.sample_ids:
        return mat_text
    return mat_text.reorder(mat_image.sample_ids)


def _labels_for(ids: Sequence[str], labels: SplitManifest | Mapping[str, int]) -> np.ndarray:
    lookup = labels.label_map() if isinstance(labels, SplitManifest) else labels
    missing = set(ids) - set(lookup)
    if missing:
        raise SampleSetMismatch(missing, ())
    return np.array([lookup[s] for s in ids])


def sweep(
    mat_image: ProbMatrix,
    mat_text: ProbMatrix,
    labels: SplitManifest | Mapping[str, int],
    grid: Sequence[float] | None = None,
) -> FusionSweepResult:
    """Accuracy of the fused argmax for every weight in ``grid``.

    Rows are joined on sample_id in the image matrix's order; differing
    sample sets raise :class:`SampleSetMismatch`.
    """
    g = validate_grid(grid if grid is not None else default_grid())
    text = _align(mat_image, mat_text)
    y = _labels_for(mat_image.sample_ids, labels)
    if len(y) == 0:
        raise ValueError("cannot sweep an empty split")
    P, Q = mat_image.values, text.values
    accs = []
    for w in g:
        pred = np.argmax(fuse(P, Q, w), axis=1)
        accs.append(float(np.mean(pred == y)))
    return FusionSweepResult(
        grid=g,
        accuracy_per_w=tuple(accs),
        per_trial=None,
        trial_seeds=(mat_image.trial_seed,),
        split_name=mat_image.split_name,
        label=f"{mat_image.model_tag}+{mat_text.model_tag}",
    )


def select_weight(dev_result: FusionSweepResult) -> float:
    """Weight with the highest accuracy; ties go to the smallest weight."""
    if not dev_result.accuracy_per_w:
        raise ValueError("empty sweep curve")
    best = max(dev_result.accuracy_per_w)
    return dev_result.grid[dev_result.accuracy_per_w.index(best)]


def multi_trial_average(curves: Sequence[FusionSweepResult]) -> FusionSweepResult:
    """Pointwise mean of accuracy curves that share one grid."""
    if not curves:
        raise ValueError("no curves to average")
    grid = curves[0].grid
    for c in curves[1:]:
        if c.grid != grid:
            raise GridMismatch(f"grids differ: {grid} vs {c.grid}")
    per_trial = tuple(tc for c in curves for tc in c.trial_curves())
    mean = np.mean(np.array(per_trial), axis=0)
    return FusionSweepResult(
        grid=grid,
        accuracy_per_w=tuple(float(a) for a in mean),
        per_trial=per_trial,
        trial_seeds=tuple(s for c in curves for s in c.trial_seeds),
        split_name=curves[0].split_name,
        label=curves[0].label,
    )
