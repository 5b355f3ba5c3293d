import json
import math
import random

import pytest

from raghpo.costs import CostDelta
from raghpo.dataio import (
    Dataset,
    DatasetFormatError,
    Document,
    FingerprintMismatchError,
    GridFormatError,
    GridTable,
    QaPair,
    SamplePlan,
    dataset_content_hash,
    load_dataset,
    load_grid,
    sample_dev,
    store_dataset,
    store_grid,
)
from raghpo.metrics import LEXICAL_AC

from conftest import fill_table, make_document


# ---------------------------------------------------------------------------
# Dataset files
# ---------------------------------------------------------------------------


def test_dataset_store_load_roundtrip(tmp_path, tiny_dataset):
    store_dataset(tiny_dataset, tmp_path / "ds")
    loaded = load_dataset(tmp_path / "ds")
    assert loaded == tiny_dataset
    assert loaded.summary() == {"name": "tiny", "documents": 5, "dev": 4, "test": 2}


def test_dataset_counts_echoed(tmp_path, tiny_dataset):
    store_dataset(tiny_dataset, tmp_path / "ds")
    loaded = load_dataset(tmp_path / "ds")
    assert len(loaded.corpus) == 5
    assert len(loaded.dev) == 4
    assert len(loaded.test) == 2


def test_large_manifest_counts_surfaced(tmp_path):
    # Counts shaped like a large biomedical benchmark: the loader just
    # echoes what the files declare.
    corpus = tuple(Document(doc_id=f"d{i}", text="x") for i in range(40181))
    dev = tuple(
        QaPair(qid=f"q{i}", question="?", gold_answer="a", gold_doc_ids=(f"d{i}",))
        for i in range(1000)
    )
    test = tuple(
        QaPair(qid=f"t{i}", question="?", gold_answer="a", gold_doc_ids=(f"d{i}",))
        for i in range(150)
    )
    dataset = Dataset(corpus=corpus, dev=dev, test=test, name="bio-shaped")
    store_dataset(dataset, tmp_path / "big")
    summary = load_dataset(tmp_path / "big").summary()
    assert summary["documents"] == 40181
    assert summary["dev"] == 1000
    assert summary["test"] == 150


def test_dangling_gold_reference_rejected(tmp_path, tiny_dataset):
    store_dataset(tiny_dataset, tmp_path / "ds")
    bench = tmp_path / "ds" / "benchmark.jsonl"
    rows = bench.read_text().strip().splitlines()
    bad = json.loads(rows[0])
    bad["gold_doc_ids"] = ["does-not-exist"]
    rows[0] = json.dumps(bad)
    bench.write_text("\n".join(rows) + "\n")
    with pytest.raises(DatasetFormatError, match="does-not-exist"):
        load_dataset(tmp_path / "ds")


def test_duplicate_doc_id_rejected_with_location(tmp_path, tiny_dataset):
    store_dataset(tiny_dataset, tmp_path / "ds")
    corpus = tmp_path / "ds" / "corpus.jsonl"
    lines = corpus.read_text().strip().splitlines()
    lines.append(lines[0])
    corpus.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetFormatError, match=r"corpus\.jsonl:6"):
        load_dataset(tmp_path / "ds")


def test_duplicate_qid_rejected(tmp_path, tiny_dataset):
    store_dataset(tiny_dataset, tmp_path / "ds")
    bench = tmp_path / "ds" / "benchmark.jsonl"
    lines = bench.read_text().strip().splitlines()
    lines.append(lines[0])
    bench.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetFormatError, match="duplicate qid"):
        load_dataset(tmp_path / "ds")


def test_missing_field_reported_with_line(tmp_path, tiny_dataset):
    store_dataset(tiny_dataset, tmp_path / "ds")
    bench = tmp_path / "ds" / "benchmark.jsonl"
    lines = bench.read_text().strip().splitlines()
    record = json.loads(lines[2])
    del record["question"]
    lines[2] = json.dumps(record)
    bench.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetFormatError, match=r"benchmark\.jsonl:3.*question"):
        load_dataset(tmp_path / "ds")


def test_unknown_split_rejected(tmp_path, tiny_dataset):
    store_dataset(tiny_dataset, tmp_path / "ds")
    bench = tmp_path / "ds" / "benchmark.jsonl"
    lines = bench.read_text().strip().splitlines()
    record = json.loads(lines[0])
    record["split"] = "validation"
    lines[0] = json.dumps(record)
    bench.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetFormatError, match="split"):
        load_dataset(tmp_path / "ds")


# ---------------------------------------------------------------------------
# Dev sampling
# ---------------------------------------------------------------------------


def _unit_gold_dataset(n_dev: int, n_docs: int) -> Dataset:
    """Each dev question has exactly one distinct gold document."""
    corpus = tuple(make_document(f"d{i}", 4) for i in range(n_docs))
    dev = tuple(
        QaPair(qid=f"q{i}", question="?", gold_answer="a", gold_doc_ids=(f"d{i}",))
        for i in range(n_dev)
    )
    test = (QaPair(qid="t0", question="?", gold_answer="a", gold_doc_ids=("d0",)),)
    return Dataset(corpus=corpus, dev=dev, test=test)


def test_sample_fraction_counts():
    dataset = _unit_gold_dataset(n_dev=1000, n_docs=1200)
    outcome = sample_dev(dataset, SamplePlan(qa_fraction=0.1, noise_ratio=0, seed=1))
    assert len(outcome.dataset.dev) == 100


def test_sample_noise_arithmetic_and_gold_closure():
    dataset = _unit_gold_dataset(n_dev=10, n_docs=200)
    outcome = sample_dev(dataset, SamplePlan(qa_fraction=1.0, noise_ratio=9, seed=3))
    sampled = outcome.dataset
    # 10 gold docs, 9 noise each: exactly 100 documents, gold fully included.
    assert len(sampled.corpus) == 100
    doc_ids = sampled.doc_ids()
    for qa in sampled.dev:
        for gid in qa.gold_doc_ids:
            assert gid in doc_ids
    # Recount from the emitted sample.
    gold = {g for qa in sampled.dev for g in qa.gold_doc_ids}
    assert len(gold) == 10
    assert len(doc_ids - gold) == 90


def test_sample_identity_when_noise_covers_corpus():
    dataset = _unit_gold_dataset(n_dev=5, n_docs=20)
    outcome = sample_dev(dataset, SamplePlan(qa_fraction=1.0, noise_ratio=10, seed=9))
    # 5 gold + up to 50 noise requested but only 15 non-gold exist.
    assert [d.doc_id for d in outcome.dataset.corpus] == [d.doc_id for d in dataset.corpus]
    assert outcome.noise_shortfall == 50 - 15
    assert outcome.dataset.dev == dataset.dev


def test_sample_deterministic_per_seed(tmp_path):
    dataset = _unit_gold_dataset(n_dev=50, n_docs=500)
    plan = SamplePlan(qa_fraction=0.2, noise_ratio=3, seed=42)
    a = sample_dev(dataset, plan)
    b = sample_dev(dataset, plan)
    assert a == b
    store_dataset(a.dataset, tmp_path / "a")
    store_dataset(b.dataset, tmp_path / "b")
    assert dataset_content_hash(tmp_path / "a") == dataset_content_hash(tmp_path / "b")


def test_sample_differs_across_seeds():
    dataset = _unit_gold_dataset(n_dev=50, n_docs=500)
    a = sample_dev(dataset, SamplePlan(qa_fraction=0.2, noise_ratio=3, seed=1))
    b = sample_dev(dataset, SamplePlan(qa_fraction=0.2, noise_ratio=3, seed=2))
    assert a.sampled_qids != b.sampled_qids or a.noise_doc_ids != b.noise_doc_ids


def test_sample_pools_shared_gold_documents():
    # Two questions share one gold document: noise is per pooled gold count.
    corpus = tuple(make_document(f"d{i}", 4) for i in range(50))
    dev = (
        QaPair(qid="q0", question="?", gold_answer="a", gold_doc_ids=("d0",)),
        QaPair(qid="q1", question="?", gold_answer="a", gold_doc_ids=("d0",)),
    )
    dataset = Dataset(corpus=corpus, dev=dev, test=())
    outcome = sample_dev(dataset, SamplePlan(qa_fraction=1.0, noise_ratio=4, seed=5))
    assert len(outcome.gold_doc_ids) == 1
    assert len(outcome.dataset.corpus) == 1 + 4


def test_sample_gold_closure_across_seeds():
    rng = random.Random(7)
    corpus = tuple(make_document(f"d{i}", 4) for i in range(120))
    dev = tuple(
        QaPair(
            qid=f"q{i}",
            question="?",
            gold_answer="a",
            gold_doc_ids=tuple(rng.sample([f"d{j}" for j in range(120)], rng.randrange(1, 4))),
        )
        for i in range(30)
    )
    dataset = Dataset(corpus=corpus, dev=dev, test=())
    for seed in range(10):
        outcome = sample_dev(dataset, SamplePlan(qa_fraction=0.4, noise_ratio=2, seed=seed))
        ids = outcome.dataset.doc_ids()
        for qa in outcome.dataset.dev:
            assert set(qa.gold_doc_ids) <= ids
        n_gold = len(outcome.gold_doc_ids)
        assert len(outcome.dataset.corpus) == min(
            n_gold * 3, n_gold + (120 - n_gold)
        )
        assert len(outcome.dataset.dev) == math.ceil(0.4 * 30)


def test_sample_plan_validation():
    with pytest.raises(ValueError):
        SamplePlan(qa_fraction=0.0, noise_ratio=1, seed=1)
    with pytest.raises(ValueError):
        SamplePlan(qa_fraction=1.2, noise_ratio=1, seed=1)
    with pytest.raises(ValueError):
        SamplePlan(qa_fraction=0.5, noise_ratio=-1, seed=1)


# ---------------------------------------------------------------------------
# Grid tables
# ---------------------------------------------------------------------------


def test_grid_complete_fixture_row_count(default_space):
    qids = ("q0", "q1", "q2", "q3")
    table = fill_table(
        default_space,
        lambda o, s, m, q: (o % 100) / 100.0,
        split_metrics={"dev": (LEXICAL_AC,)},
        qids={"dev": qids},
    )
    assert len(table.scores) == 162 * 4
    assert table.is_complete_for(LEXICAL_AC, "dev", default_space.total_size)


def test_grid_roundtrip_byte_identical(tmp_path, tiny_space):
    table = fill_table(
        tiny_space,
        lambda o, s, m, q: o / 100.0,
        split_metrics={"dev": (LEXICAL_AC,), "test": (LEXICAL_AC,)},
        qids={"dev": ("q0", "q1"), "test": ("t0",)},
    )
    table.set_cost(0, "dev", CostDelta(10, 20, 30))
    path_a = tmp_path / "a.jsonl"
    path_b = tmp_path / "b.jsonl"
    store_grid(table, path_a)
    store_grid(load_grid(path_a, tiny_space), path_b)
    assert path_a.read_bytes() == path_b.read_bytes()


def test_grid_roundtrip_canonicalizes_row_order(tmp_path, tiny_space):
    table = fill_table(
        tiny_space,
        lambda o, s, m, q: 0.5,
        split_metrics={"dev": (LEXICAL_AC,)},
        qids={"dev": ("q0", "q1")},
    )
    path = tmp_path / "g.jsonl"
    store_grid(table, path)
    lines = path.read_text().strip().splitlines()
    shuffled = [lines[0]] + list(reversed(lines[1:]))
    path.write_text("\n".join(shuffled) + "\n")
    reloaded = load_grid(path, tiny_space)
    out = tmp_path / "canon.jsonl"
    store_grid(reloaded, out)
    assert out.read_text().strip().splitlines() == lines


def test_grid_empty_table_loads_and_reports_incomplete(tmp_path, tiny_space):
    table = GridTable(space_fingerprint=tiny_space.fingerprint())
    path = tmp_path / "empty.jsonl"
    store_grid(table, path)
    loaded = load_grid(path, tiny_space)
    assert not loaded.is_complete_for(LEXICAL_AC, "dev", tiny_space.total_size)
    missing = loaded.missing_pairs(LEXICAL_AC, "dev", tiny_space.total_size)
    assert len(missing) == tiny_space.total_size


def test_grid_score_out_of_range_rejected(tiny_space):
    table = GridTable(space_fingerprint=tiny_space.fingerprint())
    with pytest.raises(GridFormatError, match="score"):
        table.add_score(0, "dev", LEXICAL_AC, "q0", 1.2)


def test_grid_duplicate_key_rejected(tiny_space):
    table = GridTable(space_fingerprint=tiny_space.fingerprint())
    table.add_score(0, "dev", LEXICAL_AC, "q0", 0.5)
    with pytest.raises(GridFormatError, match="duplicate"):
        table.add_score(0, "dev", LEXICAL_AC, "q0", 0.6)


def test_grid_unknown_metric_rejected(tiny_space):
    table = GridTable(space_fingerprint=tiny_space.fingerprint())
    with pytest.raises(GridFormatError, match="metric"):
        table.add_score(0, "dev", "bleu", "q0", 0.5)


def test_grid_fingerprint_mismatch(tmp_path, tiny_space, default_space):
    table = GridTable(space_fingerprint=tiny_space.fingerprint())
    path = tmp_path / "g.jsonl"
    store_grid(table, path)
    with pytest.raises(FingerprintMismatchError):
        load_grid(path, default_space)


def test_grid_bad_score_row_reports_line(tmp_path, tiny_space):
    path = tmp_path / "g.jsonl"
    header = {"format_version": 1, "space_fingerprint": tiny_space.fingerprint()}
    row = {"ordinal": 0, "split": "dev", "metric": LEXICAL_AC, "qid": "q0", "score": 2.0}
    path.write_text(json.dumps(header) + "\n" + json.dumps(row) + "\n")
    with pytest.raises(GridFormatError, match=":2"):
        load_grid(path)


def test_grid_missing_header_rejected(tmp_path):
    path = tmp_path / "g.jsonl"
    path.write_text("")
    with pytest.raises(GridFormatError, match="header"):
        load_grid(path)
