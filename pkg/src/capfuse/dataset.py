"""Task definitions and train/dev/test manifests.

A manifest is a UTF-8 TSV file without header, one sample per row::

    sample_id<TAB>image_path<TAB>class_name

Relative image paths are resolved against the manifest's directory.
"""

from __future__ import annotations

import hashlib
from collections import Counter
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DuplicateSampleId, MalformedRow, MixedTasks, UnknownClassName

SPLITS = ("train", "dev", "test")


@dataclass(frozen=True)
class TaskDefinition:
    task_id: str
    class_names: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if not self.task_id:
            raise ValueError("task_id must be non-empty")
        if len(self.class_names) < 2:
            raise ValueError("a task needs at least two classes")
        if any(not name for name in self.class_names):
            raise ValueError("class names must be non-empty")
        if len(set(self.class_names)) != len(self.class_names):
            raise ValueError(f"duplicate class names in {self.class_names}")

    @property
    def C(self) -> int:
        return len(self.class_names)

    def index_of(self, name: str) -> int:
        try:
            return self.class_names.index(name)
        except ValueError:
            raise UnknownClassName(name) from None

    def to_dict(self) -> dict:
        return {"task_id": self.task_id, "class_names": list(self.class_names)}

    @classmethod
    def from_dict(cls, d: Mapping) -> TaskDefinition:
        return cls(d["task_id"], tuple(d["class_names"]))


DISASTER_TYPES = TaskDefinition(
    "disaster_types",
    (
        "earthquake",
        "fire",
        "flood",
        "hurricane",
        "landslide",
        "other disaster",
        "not disaster",
    ),
)
DAMAGE_SEVERITY = TaskDefinition(
    "damage_severity",
    ("severe damage", "mild damage", "little or none"),
)
BUILTIN_TASKS = {t.task_id: t for t in (DISASTER_TYPES, DAMAGE_SEVERITY)}

# Published CrisisNLP partition sizes for the two studied tasks.
CRISISNLP_COUNTS = {
    "disaster_types": {"train": 12724, "dev": 1574, "test": 3213},
    "damage_severity": {"train": 26898, "dev": 2898, "test": 5100},
}


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    image_path: str
    label_index: int


@dataclass(frozen=True)
class SplitManifest:
    task: TaskDefinition
    split_name: str
    samples: tuple[SampleRecord, ...]
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "samples", tuple(self.samples))
        seen: set[str] = set()
        for s in self.samples:
            if s.sample_id in seen:
                raise DuplicateSampleId(s.sample_id)
            seen.add(s.sample_id)
            if not 0 <= s.label_index < self.task.C:
                raise ValueError(
                    f"label_index {s.label_index} out of range for {self.task.task_id} "
                    f"(sample {s.sample_id!r})"
                )

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def sample_ids(self) -> list[str]:
        return [s.sample_id for s in self.samples]

    @property
    def labels(self) -> list[int]:
        return [s.label_index for s in self.samples]

    def label_map(self) -> dict[str, int]:
        return {s.sample_id: s.label_index for s in self.samples}

    def class_counts(self) -> list[int]:
        counts = Counter(self.labels)
        return [counts.get(k, 0) for k in range(self.task.C)]

    def image_file(self, sample: SampleRecord) -> Path:
        p = Path(sample.image_path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def with_samples(self, samples: Iterable[SampleRecord]) -> SplitManifest:
        return SplitManifest(self.task, self.split_name, tuple(samples), self.root)


def _resolve_label(task: TaskDefinition, value: str, line: int) -> int:
    if value in task.class_names:
        return task.class_names.index(value)
    # numeric labels are accepted only when no class is literally named so
    if value.isdigit() and int(value) < task.C:
        return int(value)
    raise UnknownClassName(value, line)


def load_manifest(path: str | Path, task: TaskDefinition, split_name: str) -> SplitManifest:
    """Parse a TSV manifest, resolving class names to indices.

    Blank lines are skipped; every other row must have exactly three
    non-empty fields.
    """
    path = Path(path)
    samples: list[SampleRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8", newline="") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise MalformedRow(lineno, f"expected 3 tab-separated fields, got {len(parts)}")
            sample_id, image_path, label = parts
            if not sample_id or not image_path or not label:
                raise MalformedRow(lineno, "empty field")
            if sample_id in seen:
                raise DuplicateSampleId(sample_id)
            seen.add(sample_id)
            samples.append(SampleRecord(sample_id, image_path, _resolve_label(task, label, lineno)))
    return SplitManifest(task, split_name, tuple(samples), root=path.parent)


def write_manifest(manifest: SplitManifest, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = manifest.task.class_names
    with open(path, "w", encoding="utf-8", newline="") as f:
        for s in manifest.samples:
            f.write(f"{s.sample_id}\t{s.image_path}\t{names[s.label_index]}\n")
    return path


@dataclass(frozen=True)
class SplitCount:
    split_name: str
    actual: int
    expected: int | None

    @property
    def delta(self) -> int | None:
        return None if self.expected is None else self.actual - self.expected

    @property
    def ok(self) -> bool:
        return self.expected is None or self.actual == self.expected


@dataclass(frozen=True)
class ValidationReport:
    task_id: str | None
    entries: tuple[SplitCount, ...]

    @property
    def passed(self) -> bool:
        return all(e.ok for e in self.entries)

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "passed": self.passed,
            "splits": [
                {"split": e.split_name, "actual": e.actual, "expected": e.expected, "delta": e.delta}
                for e in self.entries
            ],
        }


def validate_split_counts(
    manifests: Sequence[SplitManifest], expected: Mapping[str, int]
) -> ValidationReport:
    """Compare split sizes against expected counts; mismatches are reported, not raised.

    An expected split with no matching manifest counts as 0 samples.
    """
    task_ids = {m.task.task_id for m in manifests}
    if len(task_ids) > 1:
        raise MixedTasks(task_ids)
    actual = {m.split_name: len(m) for m in manifests}
    entries = [SplitCount(name, n, expected.get(name)) for name, n in actual.items()]
    entries += [SplitCount(name, 0, n) for name, n in expected.items() if name not in actual]
    return ValidationReport(next(iter(task_ids), None), tuple(entries))


def counts_of(manifests: Iterable[SplitManifest]) -> dict[str, int]:
    return {m.split_name: len(m) for m in manifests}


def _draw_key(seed: int, sample_id: str) -> bytes:
    return hashlib.sha256(f"{seed}\x1f{sample_id}".encode()).digest()


def stratified_subsample(manifest: SplitManifest, n_per_class: int, seed: int) -> SplitManifest:
    """Keep at most ``n_per_class`` samples of each class.

    Samples are shuffled by a seeded hash of their id, so the draw does
    not depend on row order and re-applying the same call is a no-op.
    The output lists the kept samples in draw order.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    drawn = sorted(manifest.samples, key=lambda s: _draw_key(seed, s.sample_id))
    taken: Counter[int] = Counter()
    kept = []
    for s in drawn:
        if taken[s.label_index] < n_per_class:
            taken[s.label_index] += 1
            kept.append(s)
    return manifest.with_samples(kept)
