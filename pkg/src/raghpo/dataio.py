"""Dataset and grid-table file formats, validation, and dev-set sampling.

Dataset on disk is a directory of three files:

* ``manifest.json`` -- ``{"format_version": 1, "name": ..., "corpus_file":
  ..., "benchmark_file": ..., "relaxed_test_closure": bool}``
* corpus file (JSON lines) -- ``{"doc_id": str, "title": str?, "text": str}``
* benchmark file (JSON lines) -- ``{"qid": str, "question": str,
  "gold_answer": str, "gold_doc_ids": [str], "split": "dev"|"test"}``

A grid table is a JSON-lines file whose first line is a header carrying the
format version and the fingerprint of the search space it was computed
against. Remaining lines are score rows ``{"ordinal", "split", "metric",
"qid", "score"}`` plus optional per-config cost rows (``"kind": "cost"``).
Writers emit rows in the canonical order (ordinal, split, metric, qid) with
canonical JSON, so store(load(x)) is byte-identical for canonical files.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .costs import CostDelta
from .metrics import METRIC_NAMES
from .searchspace import SearchSpace

log = logging.getLogger(__name__)

DATASET_FORMAT_VERSION = 1
GRID_FORMAT_VERSION = 1

SPLITS = ("dev", "test")


class DatasetFormatError(ValueError):
    """Schema violation, duplicate id, or dangling reference in dataset files."""


class GridFormatError(ValueError):
    """Schema violation in a grid-table file."""


class FingerprintMismatchError(ValueError):
    """Grid table was computed against a different search space."""


@dataclass(frozen=True)
class Document:
    doc_id: str
    text: str
    title: str | None = None

    def __post_init__(self) -> None:
        if not self.doc_id:
            raise ValueError("doc_id must be non-empty")
        if not self.text:
            raise ValueError(f"document {self.doc_id!r} has empty text")


@dataclass(frozen=True)
class QaPair:
    qid: str
    question: str
    gold_answer: str
    gold_doc_ids: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.qid:
            raise ValueError("qid must be non-empty")
        object.__setattr__(self, "gold_doc_ids", tuple(self.gold_doc_ids))


@dataclass(frozen=True)
class Dataset:
    """A corpus plus a QA benchmark split into dev and test."""

    corpus: tuple[Document, ...]
    dev: tuple[QaPair, ...]
    test: tuple[QaPair, ...]
    name: str | None = None
    # Set on corpus-subsampled datasets: the test split may reference gold
    # documents that were dropped from the sampled corpus.
    relaxed_test_closure: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "corpus", tuple(self.corpus))
        object.__setattr__(self, "dev", tuple(self.dev))
        object.__setattr__(self, "test", tuple(self.test))

    def split(self, name: str) -> tuple[QaPair, ...]:
        if name == "dev":
            return self.dev
        if name == "test":
            return self.test
        raise ValueError(f"unknown split {name!r}; expected one of {SPLITS}")

    def doc_ids(self) -> set[str]:
        return {d.doc_id for d in self.corpus}

    def validate(self) -> None:
        """Check id uniqueness, split disjointness and gold-doc referential integrity."""
        seen_docs: set[str] = set()
        for doc in self.corpus:
            if doc.doc_id in seen_docs:
                raise DatasetFormatError(f"duplicate doc_id {doc.doc_id!r}")
            seen_docs.add(doc.doc_id)
        seen_qids: set[str] = set()
        for qa in self.dev + self.test:
            if qa.qid in seen_qids:
                raise DatasetFormatError(f"duplicate qid {qa.qid!r}")
            seen_qids.add(qa.qid)
        for qa in self.dev:
            for gid in qa.gold_doc_ids:
                if gid not in seen_docs:
                    raise DatasetFormatError(
                        f"question {qa.qid!r} references missing doc_id {gid!r}"
                    )
        if not self.relaxed_test_closure:
            for qa in self.test:
                for gid in qa.gold_doc_ids:
                    if gid not in seen_docs:
                        raise DatasetFormatError(
                            f"question {qa.qid!r} references missing doc_id {gid!r}"
                        )

    def summary(self) -> dict:
        return {
            "name": self.name,
            "documents": len(self.corpus),
            "dev": len(self.dev),
            "test": len(self.test),
        }


def _read_jsonl(path: Path) -> Iterable[tuple[int, dict]]:
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: invalid JSON ({exc})") from None
            if not isinstance(record, dict):
                raise DatasetFormatError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, record


def _require(record: dict, key: str, path: Path, lineno: int) -> object:
    if key not in record:
        raise DatasetFormatError(f"{path}:{lineno}: missing required field {key!r}")
    return record[key]


def load_dataset(path: str | Path) -> Dataset:
    """Load and validate a dataset directory.

    Duplicate ids, dangling gold references, unknown splits and malformed
    records are rejected with the offending file and line number.
    """
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise DatasetFormatError(f"{manifest_path}: manifest not found")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    version = manifest.get("format_version")
    if version != DATASET_FORMAT_VERSION:
        raise DatasetFormatError(
            f"{manifest_path}: unsupported format_version {version!r}"
        )
    corpus_path = root / manifest.get("corpus_file", "corpus.jsonl")
    benchmark_path = root / manifest.get("benchmark_file", "benchmark.jsonl")
    relaxed = bool(manifest.get("relaxed_test_closure", False))

    corpus: list[Document] = []
    seen_docs: set[str] = set()
    for lineno, record in _read_jsonl(corpus_path):
        doc_id = str(_require(record, "doc_id", corpus_path, lineno))
        if doc_id in seen_docs:
            raise DatasetFormatError(f"{corpus_path}:{lineno}: duplicate doc_id {doc_id!r}")
        seen_docs.add(doc_id)
        try:
            corpus.append(
                Document(
                    doc_id=doc_id,
                    text=str(_require(record, "text", corpus_path, lineno)),
                    title=record.get("title"),
                )
            )
        except ValueError as exc:
            raise DatasetFormatError(f"{corpus_path}:{lineno}: {exc}") from None

    dev: list[QaPair] = []
    test: list[QaPair] = []
    seen_qids: set[str] = set()
    for lineno, record in _read_jsonl(benchmark_path):
        qid = str(_require(record, "qid", benchmark_path, lineno))
        if qid in seen_qids:
            raise DatasetFormatError(f"{benchmark_path}:{lineno}: duplicate qid {qid!r}")
        seen_qids.add(qid)
        split = _require(record, "split", benchmark_path, lineno)
        if split not in SPLITS:
            raise DatasetFormatError(
                f"{benchmark_path}:{lineno}: split must be one of {SPLITS}, got {split!r}"
            )
        gold_ids = record.get("gold_doc_ids", [])
        if not isinstance(gold_ids, list):
            raise DatasetFormatError(f"{benchmark_path}:{lineno}: gold_doc_ids must be a list")
        if split == "dev" or not relaxed:
            for gid in gold_ids:
                if gid not in seen_docs:
                    raise DatasetFormatError(
                        f"{benchmark_path}:{lineno}: gold_doc_ids references "
                        f"missing doc_id {gid!r}"
                    )
        qa = QaPair(
            qid=qid,
            question=str(_require(record, "question", benchmark_path, lineno)),
            gold_answer=str(_require(record, "gold_answer", benchmark_path, lineno)),
            gold_doc_ids=tuple(str(g) for g in gold_ids),
        )
        (dev if split == "dev" else test).append(qa)

    dataset = Dataset(
        corpus=tuple(corpus),
        dev=tuple(dev),
        test=tuple(test),
        name=manifest.get("name"),
        relaxed_test_closure=relaxed,
    )
    dataset.validate()
    return dataset


def _dump_canonical(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def store_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write a dataset directory in the canonical on-disk layout."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "corpus_file": "corpus.jsonl",
        "benchmark_file": "benchmark.jsonl",
    }
    if dataset.name:
        manifest["name"] = dataset.name
    if dataset.relaxed_test_closure:
        manifest["relaxed_test_closure"] = True
    (root / "manifest.json").write_text(
        _dump_canonical(manifest) + "\n", encoding="utf-8"
    )
    with (root / "corpus.jsonl").open("w", encoding="utf-8") as fh:
        for doc in dataset.corpus:
            record = {"doc_id": doc.doc_id, "text": doc.text}
            if doc.title is not None:
                record["title"] = doc.title
            fh.write(_dump_canonical(record) + "\n")
    with (root / "benchmark.jsonl").open("w", encoding="utf-8") as fh:
        for split in SPLITS:
            for qa in dataset.split(split):
                fh.write(
                    _dump_canonical(
                        {
                            "qid": qa.qid,
                            "question": qa.question,
                            "gold_answer": qa.gold_answer,
                            "gold_doc_ids": list(qa.gold_doc_ids),
                            "split": split,
                        }
                    )
                    + "\n"
                )


def dataset_content_hash(path: str | Path) -> str:
    """SHA-256 over the corpus and benchmark file bytes, for provenance records."""
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    digest = hashlib.sha256()
    for key, default in (("corpus_file", "corpus.jsonl"), ("benchmark_file", "benchmark.jsonl")):
        digest.update((root / manifest.get(key, default)).read_bytes())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# Dev-set sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SamplePlan:
    """Sampling parameters: QA fraction, noise docs per gold doc, RNG seed."""

    qa_fraction: float
    noise_ratio: int
    seed: int

    def __post_init__(self) -> None:
        if not 0.0 < self.qa_fraction <= 1.0:
            raise ValueError(f"qa_fraction must be in (0, 1], got {self.qa_fraction}")
        if self.noise_ratio < 0:
            raise ValueError(f"noise_ratio must be >= 0, got {self.noise_ratio}")


@dataclass(frozen=True)
class SampleOutcome:
    """Result of :func:`sample_dev` plus accounting for provenance records."""

    dataset: Dataset
    sampled_qids: tuple[str, ...]
    gold_doc_ids: tuple[str, ...]
    noise_doc_ids: tuple[str, ...]
    noise_requested: int
    noise_shortfall: int


def sample_dev(dataset: Dataset, plan: SamplePlan) -> SampleOutcome:
    """Subsample the dev benchmark and shrink the corpus around it.

    Draws ceil(qa_fraction * |dev|) dev questions uniformly without
    replacement, keeps every gold document of the sample, and adds
    ``noise_ratio`` non-gold documents per pooled gold document, drawn
    uniformly without replacement from the rest of the corpus. Questions
    sharing gold documents do not double-count. The test split passes
    through unchanged (its gold documents may reference the source corpus,
    so the result is marked ``relaxed_test_closure``).

    Deterministic per seed: questions are drawn by ``random.Random(seed)``
    over the dev list in stored order, then noise over non-gold documents in
    corpus order; emitted lists keep the source ordering.
    """
    rng = random.Random(plan.seed)
    n_sample = math.ceil(plan.qa_fraction * len(dataset.dev))
    picked_idx = sorted(rng.sample(range(len(dataset.dev)), n_sample))
    sampled = [dataset.dev[i] for i in picked_idx]

    gold_ids = sorted({gid for qa in sampled for gid in qa.gold_doc_ids})
    gold_set = set(gold_ids)
    non_gold = [d.doc_id for d in dataset.corpus if d.doc_id not in gold_set]
    requested = plan.noise_ratio * len(gold_ids)
    take = min(requested, len(non_gold))
    shortfall = requested - take
    if shortfall:
        log.warning(
            "noise shortfall: requested %d non-gold documents, only %d available",
            requested,
            len(non_gold),
        )
    noise_ids = set(rng.sample(non_gold, take))

    keep = gold_set | noise_ids
    corpus = tuple(d for d in dataset.corpus if d.doc_id in keep)
    sampled_dataset = Dataset(
        corpus=corpus,
        dev=tuple(sampled),
        test=dataset.test,
        name=dataset.name,
        relaxed_test_closure=True,
    )
    sampled_dataset.validate()
    return SampleOutcome(
        dataset=sampled_dataset,
        sampled_qids=tuple(qa.qid for qa in sampled),
        gold_doc_ids=tuple(gold_ids),
        noise_doc_ids=tuple(sorted(noise_ids)),
        noise_requested=requested,
        noise_shortfall=shortfall,
    )


# ---------------------------------------------------------------------------
# Grid tables
# ---------------------------------------------------------------------------

GridKey = tuple[int, str, str, str]  # (ordinal, split, metric, qid)


@dataclass
class GridTable:
    """Per-(config, question, metric, split) score store; the replay oracle."""

    space_fingerprint: str
    scores: dict[GridKey, float] = field(default_factory=dict)
    costs: dict[tuple[int, str], CostDelta] = field(default_factory=dict)
    format_version: int = GRID_FORMAT_VERSION

    def add_score(
        self, ordinal: int, split: str, metric: str, qid: str, score: float
    ) -> None:
        if split not in SPLITS:
            raise GridFormatError(f"split must be one of {SPLITS}, got {split!r}")
        if metric not in METRIC_NAMES:
            raise GridFormatError(
                f"metric must be one of {sorted(METRIC_NAMES)}, got {metric!r}"
            )
        if ordinal < 0:
            raise GridFormatError(f"ordinal must be >= 0, got {ordinal}")
        if not 0.0 <= score <= 1.0:
            raise GridFormatError(
                f"score must be in [0, 1], got {score} for "
                f"(ordinal={ordinal}, split={split}, metric={metric}, qid={qid})"
            )
        key = (ordinal, split, metric, qid)
        if key in self.scores:
            raise GridFormatError(f"duplicate row for key {key}")
        self.scores[key] = score

    def get(self, ordinal: int, split: str, metric: str, qid: str) -> float | None:
        return self.scores.get((ordinal, split, metric, qid))

    def set_cost(self, ordinal: int, split: str, cost: CostDelta) -> None:
        self.costs[(ordinal, split)] = cost

    def cost_for(self, ordinal: int, split: str) -> CostDelta | None:
        return self.costs.get((ordinal, split))

    def qids_for(self, metric: str, split: str) -> tuple[str, ...]:
        """All qids with at least one row for (metric, split), sorted."""
        return tuple(
            sorted({q for (_, s, m, q) in self.scores if s == split and m == metric})
        )

    def has_metric(self, metric: str, split: str) -> bool:
        return any(s == split and m == metric for (_, s, m, _) in self.scores)

    def ordinals(self) -> tuple[int, ...]:
        return tuple(sorted({o for (o, _, _, _) in self.scores}))

    def missing_pairs(
        self, metric: str, split: str, total_size: int
    ) -> list[tuple[int, str]]:
        """(ordinal, qid) pairs absent for (metric, split).

        The qid universe is the union of qids seen for that metric and split;
        a table with no rows at all for the pair is reported as missing every
        ordinal with a placeholder qid.
        """
        qids = self.qids_for(metric, split)
        if not qids:
            return [(o, "<no rows>") for o in range(total_size)]
        missing = []
        for ordinal in range(total_size):
            for qid in qids:
                if (ordinal, split, metric, qid) not in self.scores:
                    missing.append((ordinal, qid))
        return missing

    def is_complete_for(self, metric: str, split: str, total_size: int) -> bool:
        return not self.missing_pairs(metric, split, total_size)


def load_grid(path: str | Path, space: SearchSpace | None = None) -> GridTable:
    """Load a grid table, optionally checking it matches ``space``."""
    source = Path(path)
    table: GridTable | None = None
    with source.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise GridFormatError(f"{source}:{lineno}: invalid JSON ({exc})") from None
            if table is None:
                version = record.get("format_version")
                if version != GRID_FORMAT_VERSION:
                    raise GridFormatError(
                        f"{source}:{lineno}: unsupported format_version {version!r}"
                    )
                fingerprint = record.get("space_fingerprint")
                if not fingerprint:
                    raise GridFormatError(f"{source}:{lineno}: header missing space_fingerprint")
                table = GridTable(space_fingerprint=fingerprint)
                continue
            if record.get("kind") == "cost":
                try:
                    table.set_cost(
                        int(record["ordinal"]),
                        str(record["split"]),
                        CostDelta(
                            embedded_tokens=int(record["embedded_tokens"]),
                            generation_input_tokens=int(record["generation_input_tokens"]),
                            generation_output_tokens=int(record["generation_output_tokens"]),
                        ),
                    )
                except (KeyError, ValueError) as exc:
                    raise GridFormatError(f"{source}:{lineno}: bad cost row ({exc})") from None
                continue
            try:
                table.add_score(
                    int(record["ordinal"]),
                    str(record["split"]),
                    str(record["metric"]),
                    str(record["qid"]),
                    float(record["score"]),
                )
            except KeyError as exc:
                raise GridFormatError(f"{source}:{lineno}: missing field {exc}") from None
            except GridFormatError as exc:
                raise GridFormatError(f"{source}:{lineno}: {exc}") from None
    if table is None:
        raise GridFormatError(f"{source}: empty file, expected a header line")
    if space is not None and table.space_fingerprint != space.fingerprint():
        raise FingerprintMismatchError(
            f"{source}: table fingerprint {table.space_fingerprint[:12]}... does not "
            f"match the active search space {space.fingerprint()[:12]}..."
        )
    return table


def store_grid(table: GridTable, path: str | Path) -> None:
    """Write a grid table in canonical row order (ordinal, split, metric, qid)."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open("w", encoding="utf-8") as fh:
        fh.write(
            _dump_canonical(
                {
                    "format_version": table.format_version,
                    "space_fingerprint": table.space_fingerprint,
                }
            )
            + "\n"
        )
        for (ordinal, split, metric, qid) in sorted(table.scores):
            fh.write(
                _dump_canonical(
                    {
                        "ordinal": ordinal,
                        "split": split,
                        "metric": metric,
                        "qid": qid,
                        "score": table.scores[(ordinal, split, metric, qid)],
                    }
                )
                + "\n"
            )
        for (ordinal, split) in sorted(table.costs):
            cost = table.costs[(ordinal, split)]
            record = {"kind": "cost", "ordinal": ordinal, "split": split}
            record.update(cost.as_dict())
            fh.write(_dump_canonical(record) + "\n")
