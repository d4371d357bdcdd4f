"""Captioner backends, phrase-bank prompt inversion and the caption cache."""

from __future__ import annotations

import abc
import hashlib
import json
import logging
import math
import os
import threading
from collections.abc import Callable, Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from .dataset import SampleRecord, SplitManifest
from .errors import BackendFailure, CacheCorrupt, EmptyPhraseBank, UnreadableImage

log = logging.getLogger(__name__)

DEFAULT_FLAVOR_BUDGET = 16
PHRASE_SEPARATOR = ", "


def params_digest(params: Mapping[str, Any]) -> str:
    payload = json.dumps(params, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


class CaptionerBackend(abc.ABC):
    """Maps an image file to descriptive text.

    Everything that can change the output (model id, decoding settings
    such as ``num_beams``) belongs in ``params`` so that it reaches the
    cache key through ``params_hash``.
    """

    backend_id: str = "abstract"
    deterministic: bool = True

    def __init__(self, **params: Any) -> None:
        self.params = dict(params)

    @property
    def params_hash(self) -> str:
        return params_digest(self.params)

    @abc.abstractmethod
    def generate(self, image_path: Path) -> str: ...

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.backend_id!r}, {self.params})"


class StubCaptioner(CaptionerBackend):
    """Returns fixed text, or ``fn(path)`` when given a callable."""

    backend_id = "stub"

    def __init__(self, text: str | Callable[[Path], str] = "an image", **params: Any) -> None:
        if isinstance(text, str):
            params.setdefault("text", text)
        super().__init__(**params)
        self._text = text
        self.calls = 0

    def generate(self, image_path: Path) -> str:
        self.calls += 1
        return self._text(image_path) if callable(self._text) else self._text


class HFImageToTextCaptioner(CaptionerBackend):
    """Adapter for Hugging Face ``image-to-text`` models (BLIP and friends).

    The model is loaded lazily on first use, so constructing the backend
    (and hashing its params) never touches the network or the GPU.
    """

    def __init__(
        self,
        backend_id: str = "foundation-captioner",
        model_id: str = "Salesforce/blip-image-captioning-large",
        num_beams: int = 8,
        max_new_tokens: int = 40,
        min_new_tokens: int = 5,
        device: str | None = None,
        **extra: Any,
    ) -> None:
        super().__init__(
            model_id=model_id,
            num_beams=num_beams,
            max_new_tokens=max_new_tokens,
            min_new_tokens=min_new_tokens,
            **extra,
        )
        self.backend_id = backend_id
        self.deterministic = not extra.get("do_sample", False)
        self._device = device
        self._pipe = None
        self._lock = threading.Lock()

    def _pipeline(self):
        with self._lock:
            if self._pipe is None:
                from transformers import pipeline

                self._pipe = pipeline(
                    "image-to-text", model=self.params["model_id"], device=self._device
                )
        return self._pipe

    def generate(self, image_path: Path) -> str:
        from PIL import Image

        gen = {k: v for k, v in self.params.items() if k != "model_id"}
        with Image.open(image_path) as im:
            out = self._pipeline()(im.convert("RGB"), generate_kwargs=gen)
        return out[0]["generated_text"].strip()


@dataclass(frozen=True)
class CaptionRecord:
    sample_id: str
    backend_id: str
    params_hash: str
    text: str
    created_at: str
    deterministic: bool

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError("caption text must be non-empty")

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.sample_id, self.backend_id, self.params_hash)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def caption_image(
    backend: CaptionerBackend, image_path: str | Path, sample_id: str | None = None
) -> CaptionRecord:
    path = Path(image_path)
    try:
        with open(path, "rb") as f:
            f.read(1)
    except OSError as exc:
        raise UnreadableImage(path) from exc
    try:
        text = backend.generate(path)
    except UnreadableImage:
        raise
    except Exception as exc:
        raise BackendFailure(backend.backend_id, exc) from exc
    if not isinstance(text, str) or not text.strip():
        raise BackendFailure(backend.backend_id, "empty caption")
    return CaptionRecord(
        sample_id=sample_id if sample_id is not None else path.stem,
        backend_id=backend.backend_id,
        params_hash=backend.params_hash,
        text=text,
        created_at=_now(),
        deterministic=backend.deterministic,
    )


# prompt inversion


def _normalize_phrase(p: str) -> str:
    return " ".join(p.split())


class PhraseBank:
    """Ordered collection of unique candidate phrases."""

    def __init__(self, phrases: Iterable[str]) -> None:
        normalized = [_normalize_phrase(p) for p in phrases]
        if any(not p for p in normalized):
            raise ValueError("phrases must be non-empty")
        dupes = [p for p, n in _counts(normalized).items() if n > 1]
        if dupes:
            raise ValueError(f"duplicate phrases after normalization: {dupes[:5]}")
        self.phrases: tuple[str, ...] = tuple(normalized)

    def __len__(self) -> int:
        return len(self.phrases)

    def __iter__(self):
        return iter(self.phrases)

    @property
    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.phrases).encode("utf-8")).hexdigest()[:16]

    @classmethod
    def load(cls, path: str | Path, dedupe: bool = True) -> PhraseBank:
        phrases = []
        seen = set()
        with open(path, encoding="utf-8") as f:
            for line in f:
                p = _normalize_phrase(line)
                if not p:
                    continue
                if dedupe:
                    if p in seen:
                        continue
                    seen.add(p)
                phrases.append(p)
        return cls(phrases)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(p + "\n" for p in self.phrases), encoding="utf-8")


def _counts(items: Iterable[str]) -> dict[str, int]:
    out: dict[str, int] = {}
    for x in items:
        out[x] = out.get(x, 0) + 1
    return out


class SimilarityScorer(abc.ABC):
    """Image-text match score; larger is better."""

    scorer_id: str = "abstract"

    @abc.abstractmethod
    def score(self, image_ref: Any, text: str) -> float: ...

    def score_many(self, image_ref: Any, texts: Sequence[str]) -> list[float]:
        return [self.score(image_ref, t) for t in texts]


class TableScorer(SimilarityScorer):
    """Image-independent scorer backed by a phrase -> score table."""

    def __init__(self, table: Mapping[str, float], default: float | None = None,
                 scorer_id: str = "table") -> None:
        self.table = dict(table)
        self.default = default
        self.scorer_id = scorer_id

    def score(self, image_ref: Any, text: str) -> float:
        if text in self.table:
            return float(self.table[text])
        if self.default is None:
            raise KeyError(f"no score for phrase {text!r}")
        return float(self.default)


class ClipScorer(SimilarityScorer):
    """Cosine similarity between CLIP image and text embeddings (lazy-loaded)."""

    def __init__(self, model_id: str = "openai/clip-vit-large-patch14", device: str = "cpu") -> None:
        self.scorer_id = f"clip:{model_id}"
        self.model_id = model_id
        self.device = device
        self._model = None
        self._lock = threading.Lock()

    def _load(self):
        with self._lock:
            if self._model is None:
                from transformers import CLIPModel, CLIPProcessor

                self._model = CLIPModel.from_pretrained(self.model_id).to(self.device).eval()
                self._processor = CLIPProcessor.from_pretrained(self.model_id)
        return self._model, self._processor

    def score_many(self, image_ref: Any, texts: Sequence[str]) -> list[float]:
        import torch
        from PIL import Image

        model, proc = self._load()
        with Image.open(image_ref) as im:
            inputs = proc(text=list(texts), images=im.convert("RGB"),
                          return_tensors="pt", padding=True, truncation=True)
        with torch.no_grad():
            out = model(**{k: v.to(self.device) for k, v in inputs.items()})
        img = out.image_embeds / out.image_embeds.norm(dim=-1, keepdim=True)
        txt = out.text_embeds / out.text_embeds.norm(dim=-1, keepdim=True)
        return (txt @ img.T).squeeze(-1).tolist()

    def score(self, image_ref: Any, text: str) -> float:
        return self.score_many(image_ref, [text])[0]


def select_flavors(
    image_ref: Any,
    base_caption: str,
    bank: PhraseBank,
    scorer: SimilarityScorer,
    budget: int = DEFAULT_FLAVOR_BUDGET,
) -> list[str]:
    """Pick the ``budget`` best-matching phrases for an image.

    Each phrase is scored once against the image; phrases are taken in
    descending score order, ties going to the earlier bank entry.
    ``base_caption`` is accepted for interface parity with scorers that
    condition on the prompt so far; the greedy pass does not use it.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if len(bank) == 0:
        raise EmptyPhraseBank()
    scores = scorer.score_many(image_ref, bank.phrases)
    for phrase, s in zip(bank.phrases, scores):
        if not math.isfinite(s):
            raise ValueError(f"non-finite score {s} for phrase {phrase!r}")
    order = sorted(range(len(bank)), key=lambda i: (-scores[i], i))
    return [bank.phrases[i] for i in order[:budget]]


def compose_prompt(base_caption: str, phrases: Sequence[str]) -> str:
    if not base_caption:
        raise ValueError("base caption must be non-empty")
    return PHRASE_SEPARATOR.join([base_caption, *phrases])


class PromptInversionCaptioner(CaptionerBackend):
    """Base caption plus the phrases from ``bank`` that best match the image."""

    backend_id = "prompt-inversion"

    def __init__(
        self,
        base: CaptionerBackend,
        bank: PhraseBank,
        scorer: SimilarityScorer,
        budget: int = DEFAULT_FLAVOR_BUDGET,
    ) -> None:
        super().__init__(
            base_backend=base.backend_id,
            base_params_hash=base.params_hash,
            bank=bank.digest,
            bank_size=len(bank),
            scorer=scorer.scorer_id,
            budget=budget,
        )
        self.base = base
        self.bank = bank
        self.scorer = scorer
        self.budget = budget
        self.deterministic = base.deterministic

    def generate(self, image_path: Path) -> str:
        base_caption = self.base.generate(image_path)
        phrases = select_flavors(image_path, base_caption, self.bank, self.scorer, self.budget)
        return compose_prompt(base_caption, phrases)


# cache


class CaptionCache:
    """Append-only JSON-lines store of :class:`CaptionRecord`.

    Thread-safe within one process; every key is generated at most once
    unless explicitly regenerated. Other processes may read the file but
    must not append to it concurrently.
    """

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self._records: dict[tuple[str, str, str], CaptionRecord] = {}
        self._lock = threading.Lock()
        self._key_locks: dict[tuple[str, str, str], threading.Lock] = {}
        self._load()

    def _load(self) -> None:
        if not self.path.exists():
            return
        with open(self.path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    d = json.loads(line)
                    rec = CaptionRecord(**d)
                except (json.JSONDecodeError, TypeError, ValueError) as exc:
                    raise CacheCorrupt(lineno, self.path, str(exc)) from exc
                if not line.endswith("\n"):
                    raise CacheCorrupt(lineno, self.path, "truncated final line")
                self._records[rec.key] = rec

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, key: tuple[str, str, str]) -> bool:
        return key in self._records

    def get(self, sample_id: str, backend_id: str, params_hash: str) -> CaptionRecord | None:
        return self._records.get((sample_id, backend_id, params_hash))

    def records(self) -> list[CaptionRecord]:
        return list(self._records.values())

    def lookup(self, backend_id: str, params_hash: str) -> dict[str, CaptionRecord]:
        return {
            k[0]: r for k, r in self._records.items() if k[1] == backend_id and k[2] == params_hash
        }

    def put(self, record: CaptionRecord) -> None:
        with self._lock:
            replacing = record.key in self._records
            self._records[record.key] = record
            if replacing:
                self._rewrite()
            else:
                self._append(record)

    def _append(self, record: CaptionRecord) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        line = json.dumps(asdict(record), ensure_ascii=False) + "\n"
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(line)
            f.flush()
            os.fsync(f.fileno())

    def _rewrite(self) -> None:
        tmp = self.path.with_suffix(self.path.suffix + ".tmp")
        with open(tmp, "w", encoding="utf-8") as f:
            for rec in self._records.values():
                f.write(json.dumps(asdict(rec), ensure_ascii=False) + "\n")
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, self.path)

    def _key_lock(self, key: tuple[str, str, str]) -> threading.Lock:
        with self._lock:
            return self._key_locks.setdefault(key, threading.Lock())


def get_or_generate(
    cache: CaptionCache,
    backend: CaptionerBackend,
    sample: SampleRecord,
    image_path: str | Path | None = None,
    regenerate: bool = False,
) -> CaptionRecord:
    key = (sample.sample_id, backend.backend_id, backend.params_hash)
    with cache._key_lock(key):
        hit = cache.get(*key)
        if hit is not None and not regenerate:
            return hit
        rec = caption_image(backend, image_path or sample.image_path, sample.sample_id)
        cache.put(rec)
        return rec


@dataclass
class CaptionRunSummary:
    generated: int = 0
    cached: int = 0
    errors: dict[str, str] | None = None

    @property
    def failed(self) -> int:
        return len(self.errors or {})


def caption_manifest(
    cache: CaptionCache,
    backend: CaptionerBackend,
    manifest: SplitManifest,
    workers: int = 4,
    regenerate: bool = False,
) -> CaptionRunSummary:
    """Caption every sample of a split; per-sample failures are collected, not raised."""
    summary = CaptionRunSummary(errors={})

    def one(sample: SampleRecord):
        key = (sample.sample_id, backend.backend_id, backend.params_hash)
        if not regenerate and key in cache:
            return sample.sample_id, "cached", None
        try:
            get_or_generate(cache, backend, sample, manifest.image_file(sample), regenerate)
        except (BackendFailure, UnreadableImage) as exc:
            return sample.sample_id, "error", str(exc)
        return sample.sample_id, "generated", None

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(one, manifest.samples))
    for sample_id, status, err in results:
        if status == "cached":
            summary.cached += 1
        elif status == "generated":
            summary.generated += 1
        else:
            summary.errors[sample_id] = err
    log.info(
        "%s/%s: %d generated, %d cached, %d failed",
        manifest.split_name, backend.backend_id, summary.generated, summary.cached, summary.failed,
    )
    return summary
