from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capfuse.dataset import (
    CRISISNLP_COUNTS,
    DAMAGE_SEVERITY,
    DISASTER_TYPES,
    SampleRecord,
    SplitManifest,
    TaskDefinition,
    counts_of,
    load_manifest,
    stratified_subsample,
    validate_split_counts,
    write_manifest,
)
from capfuse.errors import DuplicateSampleId, MalformedRow, MixedTasks, UnknownClassName

FLOOD_FIRE = TaskDefinition("ff", ("flood", "fire"))


def _write(tmp_path, text, name="m.tsv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_task_definition_invariants():
    assert DISASTER_TYPES.C == 7
    assert DAMAGE_SEVERITY.C == 3
    with pytest.raises(ValueError):
        TaskDefinition("t", ("only",))
    with pytest.raises(ValueError):
        TaskDefinition("t", ("a", "a"))
    with pytest.raises(ValueError):
        TaskDefinition("t", ("a", ""))


def test_load_three_rows(tmp_path):
    p = _write(tmp_path, "a\timg/a.jpg\tflood\nb\timg/b.jpg\tfire\nc\timg/c.jpg\tflood\n")
    m = load_manifest(p, FLOOD_FIRE, "train")
    assert m.sample_ids == ["a", "b", "c"]
    assert m.labels == [0, 1, 0]
    assert m.image_file(m.samples[0]) == tmp_path / "img/a.jpg"


def test_unknown_class_under_disaster_types(tmp_path):
    p = _write(tmp_path, "a\ta.jpg\tearthquake\nb\tb.jpg\ttsunami\n")
    with pytest.raises(UnknownClassName) as exc:
        load_manifest(p, DISASTER_TYPES, "train")
    assert exc.value.name == "tsunami"
    assert exc.value.line == 2


def test_class_names_are_case_sensitive(tmp_path):
    p = _write(tmp_path, "a\ta.jpg\tFlood\n")
    with pytest.raises(UnknownClassName):
        load_manifest(p, FLOOD_FIRE, "train")


def test_numeric_label_accepted(tmp_path):
    p = _write(tmp_path, "a\ta.jpg\t1\n")
    assert load_manifest(p, FLOOD_FIRE, "dev").labels == [1]


@pytest.mark.parametrize(
    "text, line",
    [
        ("a\ta.jpg\tflood\nb\tb.jpg\n", 2),
        ("a\ta.jpg\tflood\textra\n", 1),
        ("a\t\tflood\n", 1),
    ],
)
def test_malformed_rows(tmp_path, text, line):
    with pytest.raises(MalformedRow) as exc:
        load_manifest(_write(tmp_path, text), FLOOD_FIRE, "train")
    assert exc.value.line == line


def test_duplicate_sample_id(tmp_path):
    p = _write(tmp_path, "a\ta.jpg\tflood\na\tb.jpg\tfire\n")
    with pytest.raises(DuplicateSampleId):
        load_manifest(p, FLOOD_FIRE, "train")


def test_round_trip(tmp_path):
    text = "x1\timgs/1.png\tfire\nx0\timgs/0.png\tflood\nx2\t/abs/2.png\tfire\n"
    m = load_manifest(_write(tmp_path, text), FLOOD_FIRE, "train")
    out = write_manifest(m, tmp_path / "out.tsv")
    assert out.read_text(encoding="utf-8") == text


def _manifest(task, split, n, label=lambda i: 0):
    return SplitManifest(task, split, tuple(SampleRecord(f"{split}{i}", f"{i}.jpg", label(i)) for i in range(n)))


def test_validate_counts_mismatch():
    report = validate_split_counts([_manifest(FLOOD_FIRE, "train", 10)], {"train": 12})
    assert not report.passed
    assert report.entries[0].delta == -2


def test_validate_counts_empty_expected_is_vacuous():
    assert validate_split_counts([_manifest(FLOOD_FIRE, "train", 3)], {}).passed


def test_validate_counts_mixed_tasks():
    other = TaskDefinition("other", ("x", "y"))
    with pytest.raises(MixedTasks):
        validate_split_counts([_manifest(FLOOD_FIRE, "train", 1), _manifest(other, "dev", 1)], {})


def test_validate_counts_missing_split_fails():
    report = validate_split_counts([_manifest(FLOOD_FIRE, "train", 3)], {"train": 3, "dev": 1})
    assert not report.passed


def test_damage_severity_table_counts(tmp_path):
    expected = CRISISNLP_COUNTS["damage_severity"]
    assert expected == {"train": 26898, "dev": 2898, "test": 5100}
    ms = [_manifest(DAMAGE_SEVERITY, s, n, lambda i: i % 3) for s, n in expected.items()]
    assert validate_split_counts(ms, expected).passed


def _two_class(n=100):
    return _manifest(FLOOD_FIRE, "train", n, lambda i: i % 2)


def test_subsample_cardinality():
    sub = stratified_subsample(_two_class(), 5, seed=7)
    assert len(sub) == 10
    assert Counter(sub.labels) == {0: 5, 1: 5}


def test_subsample_deterministic():
    a = stratified_subsample(_two_class(), 5, seed=7)
    b = stratified_subsample(_two_class(), 5, seed=7)
    assert a.sample_ids == b.sample_ids
    assert stratified_subsample(_two_class(), 5, seed=8).sample_ids != a.sample_ids


def test_subsample_saturation():
    m = _two_class(9)
    sub = stratified_subsample(m, 50, seed=1)
    assert sorted(sub.sample_ids) == sorted(m.sample_ids)
    assert sub.class_counts() == m.class_counts()


def test_subsample_rejects_zero():
    with pytest.raises(ValueError):
        stratified_subsample(_two_class(), 0, seed=1)


@settings(max_examples=50, deadline=None)
@given(
    labels=st.lists(st.integers(0, 2), min_size=1, max_size=60),
    n=st.integers(1, 10),
    seed=st.integers(0, 2**31),
)
def test_subsample_idempotent(labels, n, seed):
    task = TaskDefinition("t3", ("a", "b", "c"))
    m = SplitManifest(task, "train", tuple(SampleRecord(f"s{i}", "x", y) for i, y in enumerate(labels)))
    once = stratified_subsample(m, n, seed)
    assert stratified_subsample(once, n, seed).samples == once.samples
    assert all(c <= n for c in once.class_counts())


@settings(max_examples=50, deadline=None)
@given(sizes=st.dictionaries(st.sampled_from(["train", "dev", "test"]), st.integers(0, 30)))
def test_validate_against_own_counts_passes(sizes):
    ms = [_manifest(FLOOD_FIRE, s, n) for s, n in sizes.items()]
    assert validate_split_counts(ms, counts_of(ms)).passed
