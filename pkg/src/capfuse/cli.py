"""Command-line entry point: ``capfuse <subcommand> CONFIG [options]``.

Exit codes: 0 success, 1 partial failure, 2 validation failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import pickle
import sys
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from . import __version__, synthetic
from .captioning import CaptionCache, caption_manifest
from .classification import (
    ProbMatrix,
    image_inputs,
    make_classifier,
    predict_matrix,
    read_prob_matrix,
    text_features_from_captions,
    text_inputs,
    train,
    write_prob_matrix,
)
from .config import ConfigError, RunConfig, build_captioner, load_config
from .dataset import (
    SPLITS,
    SplitManifest,
    load_manifest,
    stratified_subsample,
    validate_split_counts,
    write_manifest,
)
from .evaluation import EvalReport, ReportRow, confusion_matrix, emit_fusion_curve, emit_report
from .errors import CapfuseError
from .fusion import FusionSweepResult, fuse, multi_trial_average, select_weight, sweep

log = logging.getLogger("capfuse")

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_INVALID = 2

CHECKSUM_FILE = "checksums.json"
# files with clocks or absolute paths in them; excluded from verification
UNVERIFIED = {CHECKSUM_FILE, "run_meta.json", "resolved_config.json"}


def _write_json(path: Path, obj: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ingest


def load_manifests(cfg: RunConfig) -> dict[str, SplitManifest]:
    manifests = {s: load_manifest(cfg.manifests[s], cfg.task, s) for s in SPLITS}
    if cfg.subsample:
        n, seed = int(cfg.subsample["n_per_class"]), int(cfg.subsample.get("seed", 0))
        manifests = {s: stratified_subsample(m, n, seed) for s, m in manifests.items()}
    return manifests


def cmd_ingest(cfg: RunConfig, allow_count_mismatch: bool = False,
               subsample: int | None = None, seed: int = 0) -> int:
    cfg.validate_paths()
    manifests = {s: load_manifest(cfg.manifests[s], cfg.task, s) for s in SPLITS}
    report = validate_split_counts(list(manifests.values()), cfg.expected_counts or {})
    out = report.to_dict()
    out["class_counts"] = {s: m.class_counts() for s, m in manifests.items()}
    if subsample:
        out["subsampled"] = {}
        for s, m in manifests.items():
            sub = stratified_subsample(m, subsample, seed)
            src = cfg.manifests[s]
            dest = src.with_name(f"{src.stem}.n{subsample}.seed{seed}{src.suffix}")
            write_manifest(sub, dest)
            out["subsampled"][s] = {"path": str(dest), "count": len(sub)}
    _write_json(cfg.output_dir / "ingest_report.json", out)
    for e in report.entries:
        log.info("%s: %d samples (expected %s)", e.split_name, e.actual, e.expected)
    if not report.passed:
        log.error("split counts do not match expectations")
        return EXIT_OK if allow_count_mismatch else EXIT_INVALID
    return EXIT_OK


# caption


def cmd_caption(cfg: RunConfig, splits: list[str] | None = None,
                regenerate: bool = False) -> int:
    manifests = load_manifests(cfg)
    backend = build_captioner(cfg.captioner, cfg.base_dir)
    cache = CaptionCache(cfg.caption_cache_path)
    failures: dict[str, dict[str, str]] = {}
    generated = 0
    for s in splits or list(SPLITS):
        summary = caption_manifest(cache, backend, manifests[s], cfg.workers, regenerate)
        generated += summary.generated
        if summary.errors:
            failures[s] = summary.errors
    log.info("backend %s (%s): %d new captions", backend.backend_id, backend.params_hash, generated)
    if failures:
        _write_json(cfg.output_dir / "caption_errors.json", failures)
        for s, errs in failures.items():
            for sid, msg in errs.items():
                log.error("%s/%s: %s", s, sid, msg)
        return EXIT_PARTIAL
    return EXIT_OK


def _captions(cfg: RunConfig, manifests: dict[str, SplitManifest]) -> dict[str, dict[str, str]]:
    backend = build_captioner(cfg.captioner, cfg.base_dir)
    cache = CaptionCache(cfg.caption_cache_path)
    out = {}
    for s, m in manifests.items():
        rows = text_features_from_captions(cache, m, backend.backend_id, backend.params_hash)
        out[s] = {sid: text for sid, text, _ in rows}
    return out


def _text_tag(cfg: RunConfig) -> str:
    return f"{cfg.text_classifier['backend']}@{cfg.captioner['backend']}"


# train / predict


def _train_pair(cfg: RunConfig, manifests, captions, seed: int):
    task = cfg.task
    img_backend = make_classifier(cfg.image_classifier["backend"],
                                  cfg.image_classifier.get("train_config"))
    txt_backend = make_classifier(cfg.text_classifier["backend"],
                                  cfg.text_classifier.get("train_config"))

    def txt(s):
        return text_inputs([(x.sample_id, captions[s][x.sample_id], x.label_index)
                            for x in manifests[s]])

    image_model = train(img_backend, image_inputs(manifests["train"]),
                        image_inputs(manifests["dev"]), seed, task)
    text_model = train(txt_backend, txt("train"), txt("dev"), seed, task)
    return image_model, text_model


def _model_dir(cfg: RunConfig, seed: int) -> Path:
    return cfg.output_dir / "models" / f"seed_{seed}"


def _trial_dir(cfg: RunConfig, seed: int) -> Path:
    return cfg.output_dir / "trials" / f"seed_{seed}"


def cmd_train(cfg: RunConfig, seed: int) -> int:
    manifests = load_manifests(cfg)
    captions = _captions(cfg, manifests)
    image_model, text_model = _train_pair(cfg, manifests, captions, seed)
    d = _model_dir(cfg, seed)
    d.mkdir(parents=True, exist_ok=True)
    for name, model in (("image", image_model), ("text", text_model)):
        with open(d / f"{name}.pkl", "wb") as f:
            pickle.dump(model, f)
        _write_json(d / f"{name}.json", model.provenance())
    log.info("trained models for seed %d in %s", seed, d)
    return EXIT_OK


def cmd_predict(cfg: RunConfig, seed: int, splits: list[str]) -> int:
    manifests = load_manifests(cfg)
    captions = _captions(cfg, manifests)
    d = _model_dir(cfg, seed)
    for name in ("image", "text"):
        with open(d / f"{name}.pkl", "rb") as f:
            model = pickle.load(f)
        for s in splits:
            mat = predict_matrix(model, manifests[s], captions[s] if name == "text" else None)
            write_prob_matrix(mat, _trial_dir(cfg, seed) / f"{name}_{s}.csv")
    return EXIT_OK


# sweep


def _sweep_stem(cfg: RunConfig, split: str) -> Path:
    name = f"{cfg.task.task_id}__{cfg.image_classifier['backend']}__{_text_tag(cfg)}__{split}"
    return cfg.output_dir / "sweeps" / name.replace("@", "-at-").replace(" ", "_")


def cmd_sweep(cfg: RunConfig, split: str, render: bool = False) -> int:
    """Sweep every trial with stored matrices for ``split`` and write the averaged curve."""
    manifests = load_manifests(cfg)
    curves = []
    for seed in cfg.trial_seeds:
        d = _trial_dir(cfg, seed)
        if not (d / f"image_{split}.csv").exists():
            log.warning("no matrices for seed %d; skipping", seed)
            continue
        curves.append(sweep(read_prob_matrix(d / f"image_{split}.csv"),
                            read_prob_matrix(d / f"text_{split}.csv"),
                            manifests[split], cfg.grid))
    if not curves:
        log.error("no trial matrices found under %s", cfg.output_dir / "trials")
        return EXIT_INVALID
    avg = multi_trial_average(curves)
    emit_fusion_curve(avg, _sweep_stem(cfg, split), render=render)
    return EXIT_OK if len(curves) == len(cfg.trial_seeds) else EXIT_PARTIAL


# run


@dataclass
class TrialOutcome:
    seed: int
    ok: bool
    error: str = ""
    sweeps: dict[str, FusionSweepResult] = field(default_factory=dict)
    w_selected: float | None = None
    w_oracle: float | None = None
    test_predictions: list[int] | None = None

    def summary(self) -> dict[str, Any]:
        if not self.ok:
            return {"seed": self.seed, "ok": False, "error": self.error}
        test = self.sweeps["test"]
        return {
            "seed": self.seed,
            "ok": True,
            "w_selected": self.w_selected,
            "w_oracle": self.w_oracle,
            "test_accuracy": {
                "image_only": test.image_only,
                "text_only": test.text_only,
                "fused_selected": test.at(self.w_selected),
                "fused_oracle": test.at(self.w_oracle),
            },
            "dev_accuracy": {
                "image_only": self.sweeps["dev"].image_only,
                "text_only": self.sweeps["dev"].text_only,
                "fused_selected": self.sweeps["dev"].at(self.w_selected),
            },
        }


def _run_trial(cfg: RunConfig, manifests, captions, seed: int) -> TrialOutcome:
    try:
        image_model, text_model = _train_pair(cfg, manifests, captions, seed)
        mats: dict[str, tuple[ProbMatrix, ProbMatrix]] = {}
        for s in ("dev", "test"):
            mi = predict_matrix(image_model, manifests[s])
            mt = predict_matrix(text_model, manifests[s], captions[s])
            write_prob_matrix(mi, _trial_dir(cfg, seed) / f"image_{s}.csv")
            write_prob_matrix(mt, _trial_dir(cfg, seed) / f"text_{s}.csv")
            mats[s] = (mi, mt)
        sweeps = {s: sweep(mi, mt, manifests[s], cfg.grid) for s, (mi, mt) in mats.items()}
    except Exception as exc:
        log.error("trial seed=%d failed: %s", seed, exc)
        log.debug("%s", traceback.format_exc())
        return TrialOutcome(seed, ok=False, error=f"{type(exc).__name__}: {exc}")
    w_sel = select_weight(sweeps[cfg.selection_split])
    w_oracle = select_weight(sweeps["test"])
    mi, mt = mats["test"]
    preds = [int(fuse(p, q, w_sel).argmax()) for p, q in zip(mi.values, mt.reorder(mi.sample_ids).values)]
    log.info("seed=%d: image %.4f text %.4f fused(w=%.2f) %.4f on test", seed,
             sweeps["test"].image_only, sweeps["test"].text_only, w_sel, sweeps["test"].at(w_sel))
    return TrialOutcome(seed, True, sweeps=sweeps, w_selected=w_sel, w_oracle=w_oracle,
                        test_predictions=preds)


def cmd_run(cfg: RunConfig, parallel_trials: int = 1, render: bool = False,
            allow_count_mismatch: bool = False) -> int:
    started = time.time()
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    _write_json(cfg.output_dir / "resolved_config.json", cfg.to_dict())

    rc = cmd_ingest(cfg, allow_count_mismatch)
    if rc != EXIT_OK:
        return rc
    rc = cmd_caption(cfg)
    if rc != EXIT_OK:
        log.error("captioning incomplete; aborting run")
        return rc
    manifests = load_manifests(cfg)
    captions = _captions(cfg, manifests)

    def one(seed):
        return _run_trial(cfg, manifests, captions, seed)

    if parallel_trials > 1:
        with ThreadPoolExecutor(max_workers=parallel_trials) as pool:
            outcomes = list(pool.map(one, cfg.trial_seeds))
    else:
        outcomes = [one(s) for s in cfg.trial_seeds]
    good = [o for o in outcomes if o.ok]
    failed = [o for o in outcomes if not o.ok]

    results: dict[str, Any] = {
        "task": cfg.task.to_dict(),
        "image_model": cfg.image_classifier["backend"],
        "text_model": _text_tag(cfg),
        "selection_split": cfg.selection_split,
        "trial_seeds": list(cfg.trial_seeds),
        "trials": [o.summary() for o in outcomes],
        "n_trials": len(good),
    }
    if good:
        averaged = {s: multi_trial_average([o.sweeps[s] for o in good]) for s in ("dev", "test")}
        for s, res in averaged.items():
            emit_fusion_curve(res, _sweep_stem(cfg, s), render=render,
                              title=f"{cfg.task.task_id} ({s})")
        results["sweeps"] = {s: r.to_dict() for s, r in averaged.items()}
        report = build_report(cfg, good)
        emit_report(report, cfg.output_dir)
    _write_json(cfg.output_dir / "results.json", results)
    write_checksums(cfg.output_dir)
    _write_json(cfg.output_dir / "run_meta.json", {
        "capfuse_version": __version__,
        "finished_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "elapsed_s": round(time.time() - started, 3),
        "failed_trials": {o.seed: o.error for o in failed},
    })
    if failed:
        log.error("%d of %d trials failed; averages use %d trials",
                  len(failed), len(outcomes), len(good))
        return EXIT_PARTIAL
    return EXIT_OK


def build_report(cfg: RunConfig, trials: list[TrialOutcome]) -> EvalReport:
    image, text = cfg.image_classifier["backend"], _text_tag(cfg)
    sel = "oracle weight" if cfg.selection_split == "test" else "w selected on dev"
    rows = [
        ReportRow(f"image:{image}", [o.sweeps["test"].image_only for o in trials]),
        ReportRow(f"text:{text}", [o.sweeps["test"].text_only for o in trials]),
        ReportRow(f"fused ({sel})", [o.sweeps["test"].at(o.w_selected) for o in trials]),
        ReportRow("fused (oracle weight, best on test)",
                  [o.sweeps["test"].at(o.w_oracle) for o in trials]),
    ]
    manifests = load_manifests(cfg)
    cm = confusion_matrix(trials[0].test_predictions, manifests["test"].labels, cfg.task.C)
    return EvalReport(cfg.task.task_id, tuple(rows), confusion=cm,
                      class_names=cfg.task.class_names, confusion_system=rows[2].system)


def cmd_report(cfg: RunConfig, formats: list[str]) -> int:
    path = cfg.output_dir / "results.json"
    if not path.exists():
        log.error("%s not found; run `capfuse run` first", path)
        return EXIT_INVALID
    results = json.loads(path.read_text(encoding="utf-8"))
    good = [t for t in results["trials"] if t["ok"]]
    if not good:
        log.error("no successful trials in %s", path)
        return EXIT_PARTIAL
    rows = [
        ReportRow(f"image:{results['image_model']}", [t["test_accuracy"]["image_only"] for t in good]),
        ReportRow(f"text:{results['text_model']}", [t["test_accuracy"]["text_only"] for t in good]),
        ReportRow("fused (oracle weight)" if results["selection_split"] == "test"
                  else "fused (w selected on dev)",
                  [t["test_accuracy"]["fused_selected"] for t in good]),
        ReportRow("fused (oracle weight, best on test)",
                  [t["test_accuracy"]["fused_oracle"] for t in good]),
    ]
    emit_report(EvalReport(cfg.task.task_id, tuple(rows)), cfg.output_dir, formats)
    return EXIT_OK


# verify


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _declared_outputs(out_dir: Path) -> list[Path]:
    skip_dirs = {"cache", "models"}
    files = []
    for p in sorted(out_dir.rglob("*")):
        rel = p.relative_to(out_dir)
        if p.is_file() and rel.parts[0] not in skip_dirs and rel.name not in UNVERIFIED:
            files.append(p)
    return files


def write_checksums(out_dir: Path) -> Path:
    sums = {str(p.relative_to(out_dir)): _sha256(p) for p in _declared_outputs(out_dir)}
    return _write_json(out_dir / CHECKSUM_FILE, sums)


def cmd_verify(out_dir: Path) -> int:
    path = out_dir / CHECKSUM_FILE
    if not path.exists():
        log.error("%s not found", path)
        return EXIT_INVALID
    declared = json.loads(path.read_text(encoding="utf-8"))
    bad = []
    for rel, digest in declared.items():
        p = out_dir / rel
        if not p.exists():
            bad.append(f"missing: {rel}")
        elif _sha256(p) != digest:
            bad.append(f"changed: {rel}")
    for line in bad:
        log.error(line)
    log.info("%d of %d outputs verified", len(declared) - len(bad), len(declared))
    return EXIT_INVALID if bad else EXIT_OK


# argument parsing


def _override_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capfuse", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("config", type=Path, help="run configuration (JSON)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field (dotted key, JSON value)")
        p.add_argument("--output-dir", type=Path, help="where run artifacts are written")
        p.add_argument("--cache-dir", type=Path, help="caption cache directory (env: CAPFUSE_CACHE_DIR)")
        p.add_argument("--trial-seeds", type=lambda s: [int(x) for x in s.split(",")],
                       metavar="S1,S2,...", help="comma-separated trial seeds")
        p.add_argument("--backend", help="captioner backend")
        p.add_argument("--budget", type=int, help="flavor phrases per caption (prompt-inversion)")
        return p

    p = with_config(sub.add_parser("ingest", help="validate manifests and split counts"))
    p.add_argument("--allow-count-mismatch", action="store_true",
                   help="report split-count mismatches without failing")
    p.add_argument("--subsample", type=int, metavar="N", help="keep N samples per class")
    p.add_argument("--seed", type=int, default=0, help="subsample seed")

    p = with_config(sub.add_parser("caption", help="fill the caption cache"))
    p.add_argument("--split", action="append", choices=SPLITS)
    p.add_argument("--regenerate", action="store_true", help="draw new captions for cached keys")

    p = with_config(sub.add_parser("train", help="train both classifiers for one seed"))
    p.add_argument("--seed", type=int, help="trial seed (default: first configured)")

    p = with_config(sub.add_parser("predict", help="write posterior matrices for one seed"))
    p.add_argument("--seed", type=int, help="trial seed (default: first configured)")
    p.add_argument("--split", action="append", choices=SPLITS)

    p = with_config(sub.add_parser("sweep", help="fusion-weight sweep over stored matrices"))
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--plot", action="store_true")

    p = with_config(sub.add_parser("run", help="full pipeline over all trial seeds"))
    p.add_argument("--sweep-split", choices=("dev", "test"),
                   help="split used to pick w; 'test' reports an oracle weight")
    p.add_argument("--parallel-trials", type=int, default=1, help="trials run concurrently")
    p.add_argument("--plot", action="store_true", help="also draw the fusion curve (needs matplotlib)")
    p.add_argument("--allow-count-mismatch", action="store_true",
                   help="report split-count mismatches without failing")

    p = with_config(sub.add_parser("report", help="re-emit the accuracy table from results.json"))
    p.add_argument("--format", action="append", choices=("csv", "markdown"))

    p = sub.add_parser("verify", help="check output checksums")
    p.add_argument("output_dir", type=Path)

    p = sub.add_parser("synth", help="generate the synthetic shapes corpus and a run config")
    p.add_argument("out_dir", type=Path)
    p.add_argument("--n-images", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.15)
    p.add_argument("--captioner", choices=("stub-shape", "prompt-inversion"), default="stub-shape")
    return parser


def _config_from_args(args) -> RunConfig:
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key] = _override_value(value)
    if args.output_dir:
        overrides["output_dir"] = str(args.output_dir.resolve())
    if args.cache_dir:
        overrides["cache_dir"] = str(args.cache_dir.resolve())
    if args.trial_seeds:
        overrides["trial_seeds"] = args.trial_seeds
    if args.backend:
        overrides["captioner.backend"] = args.backend
    if args.budget is not None:
        overrides["captioner.params.budget"] = args.budget
    if getattr(args, "sweep_split", None):
        overrides["fusion.selection_split"] = args.sweep_split
    return load_config(args.config, overrides)


def _synth(args) -> int:
    synthetic.make_corpus(args.out_dir, args.n_images, args.seed, args.noise)
    captioner: Any = args.captioner
    if captioner == "prompt-inversion":
        captioner = {"backend": "prompt-inversion",
                     "params": {"base": {"backend": "stub-shape"}, "bank": "synthetic",
                                "scorer": "palette", "budget": 3}}
    path = synthetic.write_run_config(args.out_dir, captioner=captioner)
    log.info("wrote corpus and %s", path)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "verify":
            return cmd_verify(args.output_dir)
        if args.command == "synth":
            return _synth(args)
        cfg = _config_from_args(args)
        if args.command == "ingest":
            return cmd_ingest(cfg, args.allow_count_mismatch, args.subsample, args.seed)
        if args.command == "caption":
            return cmd_caption(cfg, args.split, args.regenerate)
        seed = getattr(args, "seed", None)
        seed = cfg.trial_seeds[0] if seed is None else seed
        if args.command == "train":
            return cmd_train(cfg, seed)
        if args.command == "predict":
            return cmd_predict(cfg, seed, args.split or ["dev", "test"])
        if args.command == "sweep":
            return cmd_sweep(cfg, args.split, args.plot)
        if args.command == "run":
            return cmd_run(cfg, args.parallel_trials, args.plot, args.allow_count_mismatch)
        if args.command == "report":
            return cmd_report(cfg, args.format or ["csv", "markdown"])
    except (ConfigError, CapfuseError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_INVALID
    return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
