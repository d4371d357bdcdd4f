import json
import random
import threading
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capfuse.captioning import (
    CaptionCache,
    CaptionerBackend,
    HFImageToTextCaptioner,
    PhraseBank,
    PromptInversionCaptioner,
    StubCaptioner,
    TableScorer,
    caption_image,
    caption_manifest,
    compose_prompt,
    get_or_generate,
    select_flavors,
)
from capfuse.dataset import SampleRecord, SplitManifest, TaskDefinition
from capfuse.errors import BackendFailure, CacheCorrupt, EmptyPhraseBank, UnreadableImage

from oracles import exhaustive_best


@pytest.fixture
def image(tmp_path):
    p = tmp_path / "a.png"
    p.write_bytes(b"\x89PNG fake")
    return p


def test_stub_caption(image):
    rec = caption_image(StubCaptioner("a dog on a sofa"), image, "a")
    assert rec.text == "a dog on a sofa"
    assert rec.backend_id == "stub"
    assert rec.params_hash == StubCaptioner("a dog on a sofa").params_hash
    assert rec.deterministic


def test_unreadable_image(tmp_path):
    with pytest.raises(UnreadableImage):
        caption_image(StubCaptioner(), tmp_path / "missing.png")


class Exploding(CaptionerBackend):
    backend_id = "boom"

    def generate(self, image_path):
        raise RuntimeError("out of memory")


def test_backend_failure_wraps_cause(image):
    with pytest.raises(BackendFailure) as exc:
        caption_image(Exploding(), image)
    assert exc.value.backend_id == "boom"
    with pytest.raises(BackendFailure):
        caption_image(StubCaptioner(lambda p: "  "), image)


def test_params_hash_covers_decoding_params():
    a = HFImageToTextCaptioner(num_beams=3)
    b = HFImageToTextCaptioner(num_beams=8)
    assert a.params_hash != b.params_hash
    assert a.params_hash == HFImageToTextCaptioner(num_beams=3).params_hash
    assert a._pipe is None  # construction must not load a model


# select_flavors


def test_flavors_rank_by_score():
    bank = PhraseBank(["p1", "p2", "p3"])
    scorer = TableScorer({"p1": 0.9, "p2": 0.1, "p3": 0.5})
    assert select_flavors(None, "base", bank, scorer, 2) == ["p1", "p3"]


def test_flavors_saturation():
    bank = PhraseBank(["p1", "p2", "p3"])
    scorer = TableScorer({"p1": 0.2, "p2": 0.7, "p3": 0.5})
    assert select_flavors(None, "base", bank, scorer, 10) == ["p2", "p3", "p1"]


def test_flavors_ties_follow_bank_order():
    bank = PhraseBank(["b", "a", "c"])
    assert select_flavors(None, "x", bank, TableScorer({}, default=1.0), 2) == ["b", "a"]


def test_flavors_errors():
    with pytest.raises(EmptyPhraseBank):
        select_flavors(None, "x", PhraseBank([]), TableScorer({}), 1)
    with pytest.raises(ValueError):
        select_flavors(None, "x", PhraseBank(["a"]), TableScorer({"a": 1}), 0)
    with pytest.raises(ValueError):
        select_flavors(None, "x", PhraseBank(["a"]), TableScorer({"a": float("nan")}), 1)


def test_flavors_match_exhaustive_search():
    rng = random.Random(3)
    for _ in range(50):
        n = rng.randint(1, 12)
        phrases = [f"phrase {i}" for i in range(n)]
        scores = [rng.random() for _ in range(n)]
        k = rng.randint(1, n)
        got = select_flavors(None, "b", PhraseBank(phrases), TableScorer(dict(zip(phrases, scores))), k)
        assert set(got) == exhaustive_best(phrases, scores, k)


@settings(max_examples=100, deadline=None)
@given(
    scores=st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=15, unique=True),
    budget=st.integers(1, 20),
    perm_seed=st.integers(0, 1000),
)
def test_flavors_properties(scores, budget, perm_seed):
    phrases = [f"w{i}" for i in range(len(scores))]
    scorer = TableScorer(dict(zip(phrases, scores)))
    got = select_flavors(None, "b", PhraseBank(phrases), scorer, budget)
    assert len(got) == min(budget, len(phrases)) == len(set(got))
    assert set(got) <= set(phrases)
    shuffled = phrases[:]
    random.Random(perm_seed).shuffle(shuffled)
    assert select_flavors(None, "b", PhraseBank(shuffled), scorer, budget) == got


def test_phrase_bank_normalization(tmp_path):
    with pytest.raises(ValueError):
        PhraseBank(["collapsed  building", " collapsed building"])
    p = tmp_path / "bank.txt"
    p.write_text("earthquake\n\ncollapsed  building\ncollapsed building\nfilm still\n", encoding="utf-8")
    assert PhraseBank.load(p).phrases == ("earthquake", "collapsed building", "film still")


# compose_prompt


def test_compose_prompt_format():
    base = "a group of people standing on top of a building"
    assert (
        compose_prompt(base, ["collapsed building", "earthquake"])
        == "a group of people standing on top of a building, collapsed building, earthquake"
    )
    assert compose_prompt(base, []) == base
    assert compose_prompt("b", ["19xx :2, akira"]) == "b, 19xx :2, akira"
    with pytest.raises(ValueError):
        compose_prompt("", ["x"])


@given(
    base=st.text(min_size=1),
    xs=st.lists(st.text()),
    ys=st.lists(st.text()),
)
def test_compose_prompt_associative(base, xs, ys):
    assert compose_prompt(base, xs + ys) == compose_prompt(compose_prompt(base, xs), ys)


def test_prompt_inversion_backend(image):
    bank = PhraseBank(["earthquake", "film still", "collapsed building"])
    scorer = TableScorer({"earthquake": 0.8, "film still": 0.1, "collapsed building": 0.9})
    base = StubCaptioner("people on rubble")
    cap = PromptInversionCaptioner(base, bank, scorer, budget=2)
    assert cap.generate(image) == "people on rubble, collapsed building, earthquake"
    assert cap.params_hash != PromptInversionCaptioner(base, bank, scorer, budget=3).params_hash


# cache


def _sample(sid="a", path="a.png"):
    return SampleRecord(sid, path, 0)


def test_cache_hit_skips_backend(tmp_path, image):
    cache = CaptionCache(tmp_path / "c.jsonl")
    stub = StubCaptioner("x")
    first = get_or_generate(cache, stub, _sample(), image)
    second = get_or_generate(cache, stub, _sample(), image)
    assert stub.calls == 1
    assert first == second


def test_cache_persists_and_reloads(tmp_path, image):
    path = tmp_path / "c.jsonl"
    rec = get_or_generate(CaptionCache(path), StubCaptioner("words"), _sample(), image)
    fresh_stub = StubCaptioner("words")
    again = get_or_generate(CaptionCache(path), fresh_stub, _sample(), image)
    assert fresh_stub.calls == 0
    assert again.text == rec.text
    line = json.loads(path.read_text(encoding="utf-8").splitlines()[0])
    assert set(line) == {"sample_id", "backend_id", "params_hash", "text", "created_at", "deterministic"}


def test_cache_key_includes_params_hash(tmp_path, image):
    cache = CaptionCache(tmp_path / "c.jsonl")
    get_or_generate(cache, StubCaptioner("x", num_beams=3), _sample(), image)
    get_or_generate(cache, StubCaptioner("x", num_beams=8), _sample(), image)
    assert len(cache) == 2
    assert len((tmp_path / "c.jsonl").read_text().splitlines()) == 2


def test_cache_truncated_line(tmp_path, image):
    path = tmp_path / "c.jsonl"
    cache = CaptionCache(path)
    get_or_generate(cache, StubCaptioner("x"), _sample("a"), image)
    get_or_generate(cache, StubCaptioner("x"), _sample("b"), image)
    data = path.read_text(encoding="utf-8")
    path.write_text(data[:-15], encoding="utf-8")
    with pytest.raises(CacheCorrupt) as exc:
        CaptionCache(path)
    assert exc.value.line == 2


def test_regenerate_replaces_entry(tmp_path, image):
    path = tmp_path / "c.jsonl"
    cache = CaptionCache(path)
    draws = iter(["first draw", "second draw"])
    stub = StubCaptioner(lambda p: next(draws), fn="sampled")
    stub.deterministic = False
    assert get_or_generate(cache, stub, _sample(), image).text == "first draw"
    assert get_or_generate(cache, stub, _sample(), image).text == "first draw"
    assert get_or_generate(cache, stub, _sample(), image, regenerate=True).text == "second draw"
    lines = path.read_text(encoding="utf-8").splitlines()
    assert len(lines) == 1 and json.loads(lines[0])["text"] == "second draw"
    assert not json.loads(lines[0])["deterministic"]


def test_concurrent_generation_at_most_once(tmp_path, image):
    cache = CaptionCache(tmp_path / "c.jsonl")
    lock = threading.Lock()
    calls = []

    def slow(p):
        with lock:
            calls.append(p)
        time.sleep(0.05)
        return "x"

    stub = StubCaptioner(slow, fn="slow")
    threads = [threading.Thread(target=get_or_generate, args=(cache, stub, _sample(), image))
               for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(calls) == 1


def test_caption_manifest_collects_failures(tmp_path, image):
    task = TaskDefinition("t", ("a", "b"))
    m = SplitManifest(task, "dev", (SampleRecord("ok", "a.png", 0), SampleRecord("gone", "nope.png", 1)),
                      root=tmp_path)
    cache = CaptionCache(tmp_path / "c.jsonl")
    summary = caption_manifest(cache, StubCaptioner("x"), m, workers=2)
    assert summary.generated == 1
    assert list(summary.errors) == ["gone"]
    summary = caption_manifest(cache, StubCaptioner("x"), m, workers=2)
    assert summary.cached == 1 and summary.generated == 0
