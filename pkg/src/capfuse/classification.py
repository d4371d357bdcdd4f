"""Image and text classifiers that emit class posteriors.

Backends implement :class:`ClassifierBackend`; :func:`train`,
:func:`predict_proba` and :func:`predict_matrix` wrap them with input
validation, provenance and simplex checks.
"""

from __future__ import annotations

import abc
import json
import re
from collections import Counter
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .captioning import CaptionCache
from .dataset import SplitManifest, TaskDefinition
from .errors import (
    MissingCaption,
    MissingClassInTrain,
    ModalityMismatch,
    NotTrained,
)

IMAGE = "image"
TEXT = "text"

SIMPLEX_TOL = 1e-6
RENORM_TOL = 1e-9


@dataclass(frozen=True)
class ModelInput:
    """One sample for a classifier: an image path or a caption text."""

    sample_id: str
    modality: str
    payload: Any
    label: int | None = None


def text_inputs(rows: Sequence[tuple[str, str, int]]) -> list[ModelInput]:
    return [ModelInput(sid, TEXT, text, label) for sid, text, label in rows]


def image_inputs(manifest: SplitManifest) -> list[ModelInput]:
    return [
        ModelInput(s.sample_id, IMAGE, manifest.image_file(s), s.label_index)
        for s in manifest.samples
    ]


def text_features_from_captions(
    cache: CaptionCache, manifest: SplitManifest, backend_id: str, params_hash: str
) -> list[tuple[str, str, int]]:
    """Align cached captions with a manifest: ``[(sample_id, text, label_index), ...]``."""
    found = cache.lookup(backend_id, params_hash)
    missing = [s.sample_id for s in manifest.samples if s.sample_id not in found]
    if missing:
        raise MissingCaption(missing)
    return [(s.sample_id, found[s.sample_id].text, s.label_index) for s in manifest.samples]


def check_prob_vector(values: Any, C: int | None = None) -> np.ndarray:
    """Validate a posterior and renormalize small numerical drift."""
    p = np.asarray(values, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError(f"expected a 1-D probability vector, got shape {p.shape}")
    if C is not None and p.shape[0] != C:
        raise ValueError(f"expected {C} classes, got {p.shape[0]}")
    if not np.all(np.isfinite(p)):
        raise ValueError("probability vector has non-finite entries")
    if np.any(p < 0):
        raise ValueError(f"probability vector has negative entries: {p}")
    s = p.sum()
    if s <= 0:
        raise ValueError("probability vector sums to zero")
    if abs(s - 1.0) > RENORM_TOL:
        p = p / s
    return p


def argmax(p: np.ndarray) -> int:
    # np.argmax returns the first maximum, i.e. the lowest class index
    return int(np.argmax(p))


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# backends


class FittedModel(abc.ABC):
    @abc.abstractmethod
    def raw_proba(self, payload: Any) -> np.ndarray: ...


class ClassifierBackend(abc.ABC):
    modality: str
    model_tag: str
    defaults: dict[str, Any] = {}

    def __init__(self, model_tag: str | None = None, **train_config: Any) -> None:
        self.train_config = {**self.defaults, **train_config}
        if model_tag is not None:
            self.model_tag = model_tag

    @abc.abstractmethod
    def fit(
        self,
        train: Sequence[ModelInput],
        dev: Sequence[ModelInput],
        task: TaskDefinition,
        trial_seed: int,
    ) -> FittedModel: ...


_TOKEN_RE = re.compile(r"[^\W_]+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace and punctuation."""
    return _TOKEN_RE.findall(text.lower())


class _TokenCountModel(FittedModel):
    def __init__(self, log_prior: np.ndarray, log_lik: np.ndarray, vocab: dict[str, int]) -> None:
        self.log_prior = log_prior
        self.log_lik = log_lik
        self.vocab = vocab

    def raw_proba(self, payload: str) -> np.ndarray:
        counts = Counter(t for t in tokenize(payload) if t in self.vocab)
        z = self.log_prior.copy()
        for tok, n in counts.items():
            z += n * self.log_lik[:, self.vocab[tok]]
        return _softmax(z)


class TokenCountClassifier(ClassifierBackend):
    """Multinomial naive Bayes over token counts with add-one smoothing.

    Class priors are the training label frequencies; tokens never seen in
    training are ignored at prediction time. Training does not depend on
    the trial seed.
    """

    modality = TEXT
    model_tag = "token-count"
    defaults = {"smoothing": 1.0, "checkpoint_rule": "none (closed-form fit)"}

    def fit(self, train, dev, task, trial_seed):
        alpha = float(self.train_config["smoothing"])
        vocab: dict[str, int] = {}
        docs = []
        for x in train:
            toks = tokenize(x.payload)
            for t in toks:
                vocab.setdefault(t, len(vocab))
            docs.append((Counter(toks), x.label))
        counts = np.zeros((task.C, len(vocab)))
        n_docs = np.zeros(task.C)
        for c, label in docs:
            n_docs[label] += 1
            for tok, n in c.items():
                counts[label, vocab[tok]] += n
        log_prior = np.log(n_docs / n_docs.sum())
        denom = counts.sum(axis=1, keepdims=True) + alpha * len(vocab)
        log_lik = np.log((counts + alpha) / denom)
        return _TokenCountModel(log_prior, log_lik, vocab)


def pixel_histogram(path: str | Path, bins: int = 4) -> np.ndarray:
    """Joint RGB histogram with ``bins`` levels per channel, normalized to sum 1."""
    from PIL import Image

    with Image.open(path) as im:
        rgb = np.asarray(im.convert("RGB"), dtype=np.uint16)
    q = (rgb * bins) // 256
    idx = (q[..., 0] * bins + q[..., 1]) * bins + q[..., 2]
    h = np.bincount(idx.ravel(), minlength=bins**3).astype(np.float64)
    return h / h.sum()


class _Standardizer:
    def __init__(self, X: np.ndarray) -> None:
        self.mean = X.mean(axis=0)
        self.std = X.std(axis=0) + 1e-8

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.std


class _LinearSoftmaxModel(FittedModel):
    def __init__(self, scale: _Standardizer, W: np.ndarray, b: np.ndarray, bins: int) -> None:
        self.scale = scale
        self.W = W
        self.b = b
        self.bins = bins

    def raw_proba(self, payload) -> np.ndarray:
        x = self.scale(pixel_histogram(payload, self.bins))
        return _softmax(x @ self.W + self.b)


class PixelSoftmaxClassifier(ClassifierBackend):
    """Softmax regression on pixel histograms, trained by minibatch SGD.

    The trial seed drives weight initialization and minibatch order. The
    epoch with the best dev accuracy is kept (earliest on ties).
    """

    modality = IMAGE
    model_tag = "pixel-softmax"
    defaults = {
        "bins": 4,
        "epochs": 40,
        "batch_size": 16,
        "learning_rate": 0.1,
        "l2": 1e-3,
        "init_scale": 0.01,
        "checkpoint_rule": "best-dev-accuracy",
    }

    def fit(self, train, dev, task, trial_seed):
        cfg = self.train_config
        bins = int(cfg["bins"])
        X = np.stack([pixel_histogram(x.payload, bins) for x in train])
        y = np.array([x.label for x in train])
        scale = _Standardizer(X)
        X = scale(X)
        Xd = scale(np.stack([pixel_histogram(x.payload, bins) for x in dev])) if dev else None
        yd = np.array([x.label for x in dev])

        rng = np.random.default_rng(trial_seed)
        W = rng.normal(0.0, cfg["init_scale"], size=(X.shape[1], task.C))
        b = np.zeros(task.C)
        Y = np.eye(task.C)[y]
        lr, l2, bs = float(cfg["learning_rate"]), float(cfg["l2"]), int(cfg["batch_size"])
        best = (-1.0, W.copy(), b.copy())
        for _ in range(int(cfg["epochs"])):
            order = rng.permutation(len(X))
            for start in range(0, len(X), bs):
                idx = order[start:start + bs]
                P = _softmax(X[idx] @ W + b)
                G = (P - Y[idx]) / len(idx)
                W -= lr * (X[idx].T @ G + l2 * W)
                b -= lr * G.sum(axis=0)
            if Xd is None:
                best = (0.0, W.copy(), b.copy())
                continue
            acc = float(np.mean(np.argmax(Xd @ W + b, axis=1) == yd))
            if acc > best[0]:
                best = (acc, W.copy(), b.copy())
        return _LinearSoftmaxModel(scale, best[1], best[2], bins)


class _CentroidModel(FittedModel):
    def __init__(self, scale: _Standardizer, centroids: np.ndarray, temperature: float, bins: int):
        self.scale = scale
        self.centroids = centroids
        self.temperature = temperature
        self.bins = bins

    def raw_proba(self, payload) -> np.ndarray:
        x = self.scale(pixel_histogram(payload, self.bins))
        d2 = ((self.centroids - x) ** 2).mean(axis=1)
        return _softmax(-d2 / self.temperature)


class PixelCentroidClassifier(ClassifierBackend):
    """Nearest class centroid on standardized pixel histograms; seed-independent."""

    modality = IMAGE
    model_tag = "pixel-centroid"
    defaults = {"bins": 4, "temperature": 0.5, "checkpoint_rule": "none (closed-form fit)"}

    def fit(self, train, dev, task, trial_seed):
        bins = int(self.train_config["bins"])
        X = np.stack([pixel_histogram(x.payload, bins) for x in train])
        y = np.array([x.label for x in train])
        scale = _Standardizer(X)
        X = scale(X)
        centroids = np.stack([X[y == k].mean(axis=0) for k in range(task.C)])
        return _CentroidModel(scale, centroids, float(self.train_config["temperature"]), bins)


class HFTextClassifier(ClassifierBackend):
    """Fine-tunes a Hugging Face sequence classifier (BERT-base by default).

    Inputs longer than ``max_length`` tokens are truncated from the end.
    Requires ``torch`` and ``transformers``; intended for full-scale runs.
    """

    modality = TEXT
    model_tag = "bert-base"
    defaults = {
        "model_id": "bert-base-uncased",
        "max_length": 128,
        "epochs": 5,
        "batch_size": 32,
        "learning_rate": 3e-5,
        "warmup_fraction": 0.1,
        "dropout": 0.1,
        "checkpoint_rule": "best-dev-accuracy",
        "device": "cpu",
    }

    def fit(self, train, dev, task, trial_seed):
        import torch
        from transformers import AutoModelForSequenceClassification, AutoTokenizer

        cfg = self.train_config
        torch.manual_seed(trial_seed)
        tok = AutoTokenizer.from_pretrained(cfg["model_id"])
        model = AutoModelForSequenceClassification.from_pretrained(
            cfg["model_id"], num_labels=task.C, hidden_dropout_prob=cfg["dropout"]
        ).to(cfg["device"])

        def encode(xs):
            return tok([x.payload for x in xs], truncation=True, max_length=cfg["max_length"],
                       padding=True, return_tensors="pt")

        opt = torch.optim.AdamW(model.parameters(), lr=cfg["learning_rate"])
        gen = torch.Generator().manual_seed(trial_seed)
        labels = torch.tensor([x.label for x in train])
        best_acc, best_state = -1.0, None
        for _ in range(int(cfg["epochs"])):
            model.train()
            perm = torch.randperm(len(train), generator=gen).tolist()
            for i in range(0, len(perm), int(cfg["batch_size"])):
                idx = perm[i:i + int(cfg["batch_size"])]
                batch = encode([train[j] for j in idx]).to(cfg["device"])
                loss = model(**batch, labels=labels[idx].to(cfg["device"])).loss
                loss.backward()
                opt.step()
                opt.zero_grad()
            model.eval()
            with torch.no_grad():
                logits = model(**encode(dev).to(cfg["device"])).logits if dev else None
            acc = 0.0 if logits is None else float(
                (logits.argmax(-1).cpu() == torch.tensor([x.label for x in dev])).float().mean()
            )
            if acc > best_acc:
                best_acc = acc
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        model.load_state_dict(best_state)
        model.eval()
        return _HFTextModel(model, tok, cfg)


class _HFTextModel(FittedModel):
    def __init__(self, model, tokenizer, cfg) -> None:
        self.model = model
        self.tokenizer = tokenizer
        self.cfg = cfg

    def raw_proba(self, payload: str) -> np.ndarray:
        import torch

        enc = self.tokenizer(payload, truncation=True, max_length=self.cfg["max_length"],
                             return_tensors="pt").to(self.cfg["device"])
        with torch.no_grad():
            probs = torch.softmax(self.model(**enc).logits[0].double(), dim=-1)
        return probs.cpu().numpy()


CLASSIFIERS: dict[str, Callable[..., ClassifierBackend]] = {
    "token-count": TokenCountClassifier,
    "pixel-softmax": PixelSoftmaxClassifier,
    "pixel-centroid": PixelCentroidClassifier,
    "bert-base": HFTextClassifier,
}


def make_classifier(name: str, train_config: Mapping[str, Any] | None = None) -> ClassifierBackend:
    try:
        factory = CLASSIFIERS[name]
    except KeyError:
        raise ValueError(f"unknown classifier backend {name!r}; known: {sorted(CLASSIFIERS)}") from None
    return factory(**dict(train_config or {}))


# train / predict


@dataclass
class TrainedModel:
    modality: str
    model_tag: str
    task: TaskDefinition
    trial_seed: int
    train_config: dict[str, Any]
    fitted: FittedModel | None = field(default=None, repr=False)

    def provenance(self) -> dict[str, Any]:
        return {
            "modality": self.modality,
            "model_tag": self.model_tag,
            "task_id": self.task.task_id,
            "trial_seed": self.trial_seed,
            "train_config": self.train_config,
        }


def train(
    backend: ClassifierBackend,
    train_split: Sequence[ModelInput],
    dev_split: Sequence[ModelInput],
    trial_seed: int,
    task: TaskDefinition,
) -> TrainedModel:
    """Fit ``backend`` on ``train_split``; ``dev_split`` is only used for checkpoint selection."""
    present = {x.label for x in train_split}
    for k, name in enumerate(task.class_names):
        if k not in present:
            raise MissingClassInTrain(name)
    for x in (*train_split, *dev_split):
        if x.modality != backend.modality:
            raise ModalityMismatch(backend.modality, x.modality)
    fitted = backend.fit(list(train_split), list(dev_split), task, trial_seed)
    return TrainedModel(
        modality=backend.modality,
        model_tag=backend.model_tag,
        task=task,
        trial_seed=trial_seed,
        train_config=dict(backend.train_config),
        fitted=fitted,
    )


def predict_proba(model: TrainedModel, sample: ModelInput) -> np.ndarray:
    if model.fitted is None:
        raise NotTrained(f"model {model.model_tag!r} has not been trained")
    if sample.modality != model.modality:
        raise ModalityMismatch(model.modality, sample.modality)
    return check_prob_vector(model.fitted.raw_proba(sample.payload), model.task.C)


@dataclass(frozen=True)
class ProbMatrix:
    """Posteriors for one split, one row per sample in manifest order."""

    task: TaskDefinition
    split_name: str
    sample_ids: tuple[str, ...]
    values: np.ndarray
    model_tag: str
    trial_seed: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (len(self.sample_ids), self.task.C):
            raise ValueError(f"values shape {v.shape} != ({len(self.sample_ids)}, {self.task.C})")
        if len(set(self.sample_ids)) != len(self.sample_ids):
            raise ValueError("duplicate sample ids in ProbMatrix")
        if np.any(v < 0) or np.any(np.abs(v.sum(axis=1) - 1.0) > SIMPLEX_TOL):
            raise ValueError("ProbMatrix rows must lie on the probability simplex")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return len(self.sample_ids)

    def row(self, sample_id: str) -> np.ndarray:
        return self.values[self.sample_ids.index(sample_id)]

    def rows(self) -> dict[str, np.ndarray]:
        return dict(zip(self.sample_ids, self.values))

    def predictions(self) -> np.ndarray:
        return np.argmax(self.values, axis=1)

    def reorder(self, sample_ids: Sequence[str]) -> ProbMatrix:
        pos = {sid: i for i, sid in enumerate(self.sample_ids)}
        idx = [pos[s] for s in sample_ids]
        return ProbMatrix(self.task, self.split_name, tuple(sample_ids), self.values[idx],
                          self.model_tag, self.trial_seed)

    def meta(self) -> dict[str, Any]:
        return {
            "task_id": self.task.task_id,
            "class_names": list(self.task.class_names),
            "split_name": self.split_name,
            "model_tag": self.model_tag,
            "trial_seed": self.trial_seed,
        }


def predict_matrix(
    model: TrainedModel,
    manifest: SplitManifest,
    captions: Mapping[str, str] | None = None,
) -> ProbMatrix:
    """Posteriors for every sample of ``manifest``.

    Text models read ``captions[sample_id]``; every gap is reported at
    once via :class:`MissingCaption`.
    """
    if model.modality == TEXT:
        captions = captions or {}
        missing = [s.sample_id for s in manifest.samples if s.sample_id not in captions]
        if missing:
            raise MissingCaption(missing)
        inputs = [ModelInput(s.sample_id, TEXT, captions[s.sample_id], s.label_index)
                  for s in manifest.samples]
    else:
        inputs = image_inputs(manifest)
    rows = np.stack([predict_proba(model, x) for x in inputs]) if inputs else np.zeros((0, model.task.C))
    return ProbMatrix(model.task, manifest.split_name, tuple(manifest.sample_ids), rows,
                      model.model_tag, model.trial_seed)


def write_prob_matrix(mat: ProbMatrix, path: str | Path) -> tuple[Path, Path]:
    """Write ``<path>`` (CSV, 9 significant digits) and ``<path>.json`` metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(["sample_id", *mat.task.class_names])]
    for sid, row in zip(mat.sample_ids, mat.values):
        lines.append(",".join([_csv_field(sid), *(f"{v:.9g}" for v in row)]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    meta_path = path.with_name(path.name + ".json")
    meta_path.write_text(json.dumps(mat.meta(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path, meta_path


def _csv_field(s: str) -> str:
    if any(ch in s for ch in ',"\n'):
        return '"' + s.replace('"', '""') + '"'
    return s


def read_prob_matrix(path: str | Path) -> ProbMatrix:
    import csv

    path = Path(path)
    meta = json.loads(path.with_name(path.name + ".json").read_text(encoding="utf-8"))
    task = TaskDefinition(meta["task_id"], tuple(meta["class_names"]))
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header[1:] != list(task.class_names):
            raise ValueError(f"{path}: header {header} does not match class names")
        ids, rows = [], []
        for rec in reader:
            ids.append(rec[0])
            rows.append([float(v) for v in rec[1:]])
    values = np.array(rows, dtype=np.float64).reshape(len(ids), task.C)
    # 9 significant digits can leave rows a few 1e-9 off the simplex
    values = values / values.sum(axis=1, keepdims=True) if len(ids) else values
    return ProbMatrix(task, meta["split_name"], tuple(ids), values, meta["model_tag"],
                      int(meta["trial_seed"]))
