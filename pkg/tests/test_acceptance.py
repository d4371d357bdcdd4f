"""Acceptance suite: each test checks one criterion at its stated tolerance and
prints a single PASS/FAIL line (repeated in the terminal summary)."""

import csv
import json
import random
import re
import time
from contextlib import contextmanager

import numpy as np
import pytest

from capfuse.captioning import PhraseBank, TableScorer, select_flavors
from capfuse.classification import ModelInput, ProbMatrix, TEXT, TokenCountClassifier, predict_proba, train
from capfuse.cli import cmd_run
from capfuse.config import load_config
from capfuse.dataset import CRISISNLP_COUNTS, SampleRecord, SplitManifest, BUILTIN_TASKS, validate_split_counts
from capfuse.fusion import default_grid, fuse, sweep
from capfuse.synthetic import make_corpus, write_run_config

from conftest import ACCEPTANCE_LINES, make_task, random_pair, random_simplex
from oracles import brute_force_curve, exhaustive_best, naive_bayes_posterior


@contextmanager
def criterion(number, title, budget_s=None):
    start = time.perf_counter()
    detail = {}
    try:
        yield detail
        elapsed = time.perf_counter() - start
        if budget_s is not None:
            assert elapsed < budget_s, f"took {elapsed:.2f}s, budget {budget_s}s"
    except BaseException as exc:
        line = f"criterion {number} FAIL  {title}: {exc}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        raise
    elapsed = time.perf_counter() - start
    extra = "".join(f", {k}={v}" for k, v in detail.items())
    line = f"criterion {number} PASS  {title} ({elapsed:.2f}s{extra})"
    print(line)
    ACCEPTANCE_LINES.append(line)


def test_1_endpoint_identity():
    with criterion(1, "sweep endpoints equal single-modality accuracy", budget_s=5):
        rng = np.random.default_rng(101)
        for case in range(100):
            C = (2, 3, 7)[case % 3]
            mi, mt, manifest = random_pair(rng, int(rng.integers(1, 60)), C)
            res = sweep(mi, mt, manifest)
            y = manifest.labels
            assert res.at(0.0) == float(np.mean(mi.predictions() == y))
            assert res.at(1.0) == float(np.mean(mt.predictions() == y))


def test_2_simplex_preservation():
    with criterion(2, "fused vectors stay on the simplex", budget_s=5) as d:
        rng = np.random.default_rng(202)
        worst = 0.0
        for _ in range(10_000):
            C = int(rng.integers(2, 8))
            p, q = random_simplex(rng, C), random_simplex(rng, C)
            f = fuse(p, q, float(rng.random()))
            assert np.all(f >= 0)
            worst = max(worst, abs(float(f.sum()) - 1.0))
        assert worst <= 1e-12
        d["max_sum_error"] = f"{worst:.1e}"


def test_3_brute_force_sweep():
    with criterion(3, "sweep equals from-scratch recomputation"):
        rng = np.random.default_rng(303)
        grid = default_grid()
        for _ in range(50):
            mi, mt, manifest = random_pair(rng, int(rng.integers(1, 21)), int(rng.integers(2, 4)))
            res = sweep(mi, mt, manifest, grid)
            assert len(res.grid) == 21
            assert list(res.accuracy_per_w) == brute_force_curve(mi, mt, manifest.label_map(), grid)


def test_4_complementary_synergy(tmp_path):
    with criterion(4, "fusion reaches the better single modality", budget_s=60) as d:
        task = make_task(2)
        ids = ("s0", "s1")
        image = ProbMatrix(task, "dev", ids, np.array([[0.9, 0.1], [0.4, 0.6]]), "img", 0)
        text = ProbMatrix(task, "dev", ids, np.array([[0.35, 0.65], [0.85, 0.15]]), "txt", 0)
        toy = sweep(image, text, {"s0": 0, "s1": 0})
        assert toy.image_only == toy.text_only == 0.5
        interior = [w for w, a in zip(toy.grid, toy.accuracy_per_w) if 0 < w < 1 and a == 1.0]
        assert interior

        make_corpus(tmp_path, n_images=200, seed=0)
        cfg = load_config(write_run_config(tmp_path))
        assert cfg.trial_seeds == (11, 22, 33, 44, 55)
        assert cmd_run(cfg) == 0
        trials = json.loads((cfg.output_dir / "results.json").read_text())["trials"]
        mean = lambda key: float(np.mean([t["test_accuracy"][key] for t in trials]))
        img, txt, fused = mean("image_only"), mean("text_only"), mean("fused_selected")
        assert fused >= max(img, txt) - 0.01, (img, txt, fused)
        d.update(image=f"{img:.4f}", text=f"{txt:.4f}", fused=f"{fused:.4f}")


def test_5_token_count_oracle():
    with criterion(5, "token-count posteriors match exact oracle within 1e-12"):
        rng = random.Random(505)
        words = "water fire smoke flood rubble building people sky car road tree debris".split()
        for _ in range(20):
            C = rng.randint(2, 5)
            n = rng.randint(C, 50)
            corpus = [(" ".join(rng.choices(words, k=rng.randint(1, 8))), i % C) for i in range(n)]
            rng.shuffle(corpus)
            rows = [ModelInput(f"t{i}", TEXT, t, y) for i, (t, y) in enumerate(corpus)]
            model = train(TokenCountClassifier(), rows, [], 0, make_task(C))
            queries = [t for t, _ in corpus] + ["nothing known here", "FIRE fire_water"]
            for q in queries:
                got = predict_proba(model, ModelInput("q", TEXT, q))
                want = naive_bayes_posterior(corpus, C, q)
                assert np.max(np.abs(got - np.array(want))) <= 1e-12


def test_6_flavors_exhaustive():
    with criterion(6, "greedy flavor selection is score-sum optimal"):
        rng = random.Random(606)
        for _ in range(100):
            n = rng.randint(1, 12)
            phrases = [f"phrase {i}" for i in range(n)]
            scores = [rng.uniform(-1, 1) for _ in range(n)]
            k = rng.randint(1, min(5, n))
            scorer = TableScorer(dict(zip(phrases, scores)))
            got = select_flavors(None, "base", PhraseBank(phrases), scorer, k)
            assert set(got) == exhaustive_best(phrases, scores, k)


REPORT_ARTIFACTS = ("report.csv", "report.md", "report_confusion.csv", "results.json")


def test_7_protocol_fidelity(tmp_path):
    with criterion(7, "five-seed report is reproducible and two-decimal"):
        make_corpus(tmp_path, n_images=200, seed=0)
        config_path = write_run_config(tmp_path)
        runs = []
        for name in ("run_a", "run_b"):
            cfg = load_config(config_path, {"output_dir": name})
            assert cmd_run(cfg) == 0
            runs.append(cfg.output_dir)
        with open(runs[0] / "report.csv", newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["task", "system", "accuracy_mean_pct", "accuracy_std_pct", "n_trials"]
        assert len(rows) == 5
        for row in rows[1:]:
            _, _, mean, std, n = row
            assert re.fullmatch(r"\d{1,3}\.\d\d", mean) and re.fullmatch(r"\d{1,3}\.\d\d", std)
            assert n == "5"
        files = list(REPORT_ARTIFACTS) + sorted(
            str(p.relative_to(runs[0])) for p in (runs[0] / "sweeps").iterdir())
        for rel in files:
            assert (runs[0] / rel).read_bytes() == (runs[1] / rel).read_bytes(), rel


@pytest.mark.parametrize("task_id", sorted(CRISISNLP_COUNTS))
def test_8_dataset_counts(task_id):
    with criterion(8, f"split counts validate for {task_id}"):
        task = BUILTIN_TASKS[task_id]
        expected = CRISISNLP_COUNTS[task_id]
        manifests = [
            SplitManifest(task, split, tuple(
                SampleRecord(f"{split}_{i:06d}", f"{split}/{i}.jpg", i % task.C) for i in range(n)))
            for split, n in expected.items()
        ]
        report = validate_split_counts(manifests, expected)
        assert report.passed
        short = manifests[:2] + [manifests[2].with_samples(manifests[2].samples[:-1])]
        assert not validate_split_counts(short, expected).passed
