"""Synthetic colour/shape corpus for desk-scale end-to-end runs.

Each class is a (colour family, shape family) pair. The colour family is
visible to a pixel-histogram classifier; the shape family is what the
rule-based :class:`ShapeCaptioner` puts into words. Neither modality can
separate all classes on its own, so fusing them pays off.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .captioning import CaptionerBackend, PhraseBank, SimilarityScorer
from .dataset import SampleRecord, SplitManifest, TaskDefinition, write_manifest

SYNTH_TASK = TaskDefinition("synthetic_shapes", ("fire", "flood", "earthquake", "not disaster"))

# class k -> colour family k // 2, shape family k % 2
PALETTES = (
    {"red": (215, 40, 35), "orange": (240, 140, 25)},
    {"blue": (35, 70, 215), "green": (35, 165, 70)},
)
SHAPES = (("circle", "ellipse"), ("square", "triangle"))

IMAGE_SIZE = 32


def _draw(rng: np.random.Generator, colour: tuple[int, int, int], shape: str) -> np.ndarray:
    from PIL import Image, ImageDraw

    grey = int(rng.integers(60, 190))
    img = Image.new("RGB", (IMAGE_SIZE, IMAGE_SIZE), (grey, grey, grey))
    d = ImageDraw.Draw(img)
    s = int(rng.integers(12, 24))
    x0 = int(rng.integers(1, IMAGE_SIZE - s - 1))
    y0 = int(rng.integers(1, IMAGE_SIZE - s - 1))
    if shape == "circle":
        d.ellipse([x0, y0, x0 + s, y0 + s], fill=colour)
    elif shape == "ellipse":
        h = max(6, s // 2)
        d.ellipse([x0, y0, x0 + s, y0 + h], fill=colour)
    elif shape == "square":
        d.rectangle([x0, y0, x0 + s, y0 + s], fill=colour)
    else:
        d.polygon([(x0, y0 + s), (x0 + s, y0 + s), (x0 + s // 2, y0)], fill=colour)
    arr = np.asarray(img, dtype=np.int16)
    arr = arr + rng.integers(-8, 9, size=arr.shape)
    return np.clip(arr, 0, 255).astype(np.uint8)


def make_corpus(
    out_dir: str | Path,
    n_images: int = 200,
    seed: int = 0,
    noise: float = 0.15,
    fractions: tuple[float, float, float] = (0.5, 0.25, 0.25),
) -> dict[str, SplitManifest]:
    """Render ``n_images`` PNGs and write stratified train/dev/test manifests.

    With probability ``noise`` an image takes its colour from the wrong
    colour family, and independently its shape from the wrong shape family.
    """
    from PIL import Image

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    C = SYNTH_TASK.C
    by_class: dict[int, list[SampleRecord]] = {k: [] for k in range(C)}
    for i in range(n_images):
        k = i % C
        fam = k // 2 if rng.random() >= noise else 1 - k // 2
        par = k % 2 if rng.random() >= noise else 1 - k % 2
        colour = list(PALETTES[fam].values())[int(rng.integers(2))]
        shape = SHAPES[par][int(rng.integers(2))]
        arr = _draw(rng, colour, shape)
        rel = f"images/img_{i:04d}.png"
        Image.fromarray(arr).save(out_dir / rel)
        by_class[k].append(SampleRecord(f"img_{i:04d}", rel, k))

    splits: dict[str, list[SampleRecord]] = {"train": [], "dev": [], "test": []}
    for samples in by_class.values():
        n = len(samples)
        n_train = round(n * fractions[0])
        n_dev = round(n * fractions[1])
        splits["train"] += samples[:n_train]
        splits["dev"] += samples[n_train:n_train + n_dev]
        splits["test"] += samples[n_train + n_dev:]
    manifests = {}
    for name, samples in splits.items():
        samples.sort(key=lambda s: s.sample_id)
        m = SplitManifest(SYNTH_TASK, name, tuple(samples), root=out_dir)
        write_manifest(m, out_dir / f"{name}.tsv")
        manifests[name] = m
    return manifests


def _load_rgb(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.int16)


def _foreground(arr: np.ndarray) -> np.ndarray:
    corners = np.stack([arr[0, 0], arr[0, -1], arr[-1, 0], arr[-1, -1]])
    bg = np.median(corners, axis=0)
    return np.abs(arr - bg).max(axis=-1) > 50


class ShapeCaptioner(CaptionerBackend):
    """Rule-based captioner describing shape, size and background tone (never colour)."""

    backend_id = "stub-shape"

    def __init__(self, **params) -> None:
        super().__init__(rules="shape-v1", **params)

    def generate(self, image_path: Path) -> str:
        arr = _load_rgb(image_path)
        mask = _foreground(arr)
        if mask.sum() < 4:
            return "an empty grey picture"
        ys, xs = np.nonzero(mask)
        h = ys.max() - ys.min() + 1
        w = xs.max() - xs.min() + 1
        fill = mask.sum() / (h * w)
        if max(h, w) / min(h, w) > 1.5:
            shape = "oval"
        elif fill > 0.92:
            shape = "square block"
        elif fill > 0.68:
            shape = "round disc"
        else:
            shape = "pointed triangle"
        size = "large" if h * w > 300 else "small"
        bg = arr[~mask].mean()
        tone = "dark" if bg < 125 else "light"
        return f"a {size} {shape} on a {tone} background"


COLOUR_PHRASES = {
    "red tones": (215, 40, 35),
    "orange glow": (240, 140, 25),
    "blue hues": (35, 70, 215),
    "green tint": (35, 165, 70),
}
STYLE_PHRASES = ("film still", "unreal engine", "photo-realistic", "akira movie style", "videogame still")


def synthetic_phrase_bank() -> PhraseBank:
    return PhraseBank([*COLOUR_PHRASES, *STYLE_PHRASES])


class PaletteScorer(SimilarityScorer):
    """Scores colour phrases by closeness to the image's mean foreground colour.

    Style phrases get a fixed, image-independent score in [0, 0.5).
    """

    scorer_id = "palette-v1"

    def score(self, image_ref, text: str) -> float:
        if text in COLOUR_PHRASES:
            arr = _load_rgb(image_ref)
            mask = _foreground(arr)
            mean = arr[mask].mean(axis=0) if mask.any() else arr.reshape(-1, 3).mean(axis=0)
            dist = np.linalg.norm(mean - np.array(COLOUR_PHRASES[text])) / (255 * np.sqrt(3))
            return float(1.0 - dist)
        digest = hashlib.sha256(text.encode("utf-8")).digest()
        return int.from_bytes(digest[:4], "big") / 2**33


def write_run_config(out_dir: str | Path, captioner: str | dict = "stub-shape", **overrides) -> Path:
    """Write a run configuration for a corpus made by :func:`make_corpus`."""
    out_dir = Path(out_dir)
    cfg = {
        "task": SYNTH_TASK.to_dict(),
        "manifests": {s: f"{s}.tsv" for s in ("train", "dev", "test")},
        "captioner": captioner if isinstance(captioner, dict) else {"backend": captioner, "params": {}},
        "image_classifier": {"backend": "pixel-softmax", "train_config": {}},
        "text_classifier": {"backend": "token-count", "train_config": {}},
        "fusion": {"grid_steps": 20, "selection_split": "dev"},
        "output_dir": "out",
    }
    cfg.update(overrides)
    path = out_dir / "config.json"
    path.write_text(json.dumps(cfg, indent=2) + "\n", encoding="utf-8")
    return path
