"""Run configuration and backend factories.

A run is described by one JSON document. Relative paths inside it are
resolved against the directory holding the file.
"""

from __future__ import annotations

import copy
import json
import os
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from . import synthetic
from .captioning import (
    DEFAULT_FLAVOR_BUDGET,
    CaptionerBackend,
    ClipScorer,
    HFImageToTextCaptioner,
    PhraseBank,
    PromptInversionCaptioner,
    SimilarityScorer,
    StubCaptioner,
    TableScorer,
)
from .dataset import BUILTIN_TASKS, CRISISNLP_COUNTS, SPLITS, TaskDefinition
from .fusion import default_grid, validate_grid

DEFAULT_TRIAL_SEEDS = (11, 22, 33, 44, 55)
CACHE_ENV = "CAPFUSE_CACHE_DIR"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    task: TaskDefinition
    manifests: dict[str, Path]
    captioner: dict[str, Any]
    image_classifier: dict[str, Any]
    text_classifier: dict[str, Any]
    output_dir: Path
    grid: tuple[float, ...] = field(default_factory=default_grid)
    selection_split: str = "dev"
    trial_seeds: tuple[int, ...] = DEFAULT_TRIAL_SEEDS
    expected_counts: dict[str, int] | None = None
    subsample: dict[str, int] | None = None
    cache_dir: Path | None = None
    workers: int = 4
    base_dir: Path = field(default_factory=Path.cwd)

    def __post_init__(self) -> None:
        if not self.trial_seeds:
            raise ConfigError("trial_seeds must be non-empty")
        if len(set(self.trial_seeds)) != len(self.trial_seeds):
            raise ConfigError(f"trial_seeds must be unique: {self.trial_seeds}")
        if self.selection_split not in ("dev", "test"):
            raise ConfigError("selection_split must be 'dev' or 'test'")
        self.grid = validate_grid(self.grid)

    @property
    def caption_cache_path(self) -> Path:
        env = os.environ.get(CACHE_ENV)
        if env:
            return Path(env) / "captions.jsonl"
        root = self.cache_dir if self.cache_dir is not None else self.output_dir / "cache"
        return root / "captions.jsonl"

    def validate_paths(self) -> None:
        missing = [f"{s}: {p}" for s, p in self.manifests.items() if not p.exists()]
        if missing:
            raise ConfigError("manifest files not found: " + "; ".join(missing))

    def to_dict(self) -> dict[str, Any]:
        return {
            "task": self.task.to_dict(),
            "manifests": {k: str(v) for k, v in self.manifests.items()},
            "captioner": self.captioner,
            "image_classifier": self.image_classifier,
            "text_classifier": self.text_classifier,
            "fusion": {"grid": list(self.grid), "selection_split": self.selection_split},
            "trial_seeds": list(self.trial_seeds),
            "expected_counts": self.expected_counts,
            "subsample": self.subsample,
            "output_dir": str(self.output_dir),
            "cache_dir": str(self.cache_dir) if self.cache_dir is not None else None,
            "workers": self.workers,
        }


def _path(base: Path, p: str | os.PathLike) -> Path:
    p = Path(p).expanduser()
    return p if p.is_absolute() else base / p


def _set_dotted(d: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
    d[keys[-1]] = value


def parse_config(raw: Mapping[str, Any], base_dir: Path,
                 overrides: Mapping[str, Any] | None = None) -> RunConfig:
    raw = copy.deepcopy(dict(raw))
    for k, v in (overrides or {}).items():
        _set_dotted(raw, k, v)
    try:
        task_raw = raw["task"]
        if isinstance(task_raw, str):
            if task_raw not in BUILTIN_TASKS:
                raise ConfigError(f"unknown task {task_raw!r}; known: {sorted(BUILTIN_TASKS)}")
            task = BUILTIN_TASKS[task_raw]
        else:
            task = TaskDefinition.from_dict(task_raw)
        manifests = {s: _path(base_dir, p) for s, p in raw["manifests"].items()}
    except KeyError as exc:
        raise ConfigError(f"missing config field {exc}") from None
    unknown = set(manifests) - set(SPLITS)
    if unknown or not {"train", "dev", "test"} <= set(manifests):
        raise ConfigError(f"manifests must name exactly {SPLITS}, got {sorted(manifests)}")

    expected = raw.get("expected_counts")
    if expected == "crisisnlp":
        expected = CRISISNLP_COUNTS[task.task_id]
    fusion = raw.get("fusion", {})
    grid = fusion.get("grid") or default_grid(int(fusion.get("grid_steps", 20)))
    cache_dir = raw.get("cache_dir")
    return RunConfig(
        task=task,
        manifests=manifests,
        captioner=dict(raw.get("captioner", {"backend": "stub-shape", "params": {}})),
        image_classifier=dict(raw.get("image_classifier", {"backend": "pixel-softmax"})),
        text_classifier=dict(raw.get("text_classifier", {"backend": "token-count"})),
        output_dir=_path(base_dir, raw.get("output_dir", "out")),
        grid=tuple(grid),
        selection_split=fusion.get("selection_split", "dev"),
        trial_seeds=tuple(int(s) for s in raw.get("trial_seeds", DEFAULT_TRIAL_SEEDS)),
        expected_counts=dict(expected) if expected else None,
        subsample=raw.get("subsample"),
        cache_dir=_path(base_dir, cache_dir) if cache_dir else None,
        workers=int(raw.get("workers", 4)),
        base_dir=base_dir,
    )


def load_config(path: str | Path, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        raw = json.load(f)
    return parse_config(raw, path.resolve().parent, overrides)


# captioner factories


def _scorer(spec: Any, base_dir: Path) -> SimilarityScorer:
    if spec == "palette":
        return synthetic.PaletteScorer()
    if spec == "clip" or (isinstance(spec, Mapping) and "clip" in spec):
        model_id = spec["clip"] if isinstance(spec, Mapping) else "openai/clip-vit-large-patch14"
        return ClipScorer(model_id)
    if isinstance(spec, Mapping) and "table" in spec:
        with open(_path(base_dir, spec["table"]), encoding="utf-8") as f:
            table = json.load(f)
        return TableScorer(table, default=spec.get("default"))
    raise ConfigError(f"unknown scorer spec {spec!r}")


def _bank(spec: Any, base_dir: Path) -> PhraseBank:
    if spec == "synthetic":
        return synthetic.synthetic_phrase_bank()
    return PhraseBank.load(_path(base_dir, spec))


def _prompt_inversion(params: Mapping[str, Any], base_dir: Path) -> CaptionerBackend:
    base_spec = params.get("base", {"backend": "foundation-captioner"})
    return PromptInversionCaptioner(
        base=build_captioner(base_spec, base_dir),
        bank=_bank(params.get("bank", "synthetic"), base_dir),
        scorer=_scorer(params.get("scorer", "clip"), base_dir),
        budget=int(params.get("budget", DEFAULT_FLAVOR_BUDGET)),
    )


CAPTIONERS: dict[str, Callable[[Mapping[str, Any], Path], CaptionerBackend]] = {
    "stub": lambda p, _: StubCaptioner(**p),
    "stub-shape": lambda p, _: synthetic.ShapeCaptioner(**p),
    # any HF image-to-text checkpoint can stand in for an encoder-decoder captioner
    "basic-encdec": lambda p, _: HFImageToTextCaptioner(
        backend_id="basic-encdec", **{"model_id": "nlpconnect/vit-gpt2-image-captioning",
                                      "num_beams": 3, **p}),
    "foundation-captioner": lambda p, _: HFImageToTextCaptioner(
        backend_id="foundation-captioner", **p),
    "prompt-inversion": _prompt_inversion,
}


def build_captioner(spec: Mapping[str, Any], base_dir: Path) -> CaptionerBackend:
    name = spec.get("backend")
    if name not in CAPTIONERS:
        raise ConfigError(f"unknown captioner backend {name!r}; known: {sorted(CAPTIONERS)}")
    return CAPTIONERS[name](dict(spec.get("params", {})), base_dir)
