"""Categorical search space over RAG pipeline configurations.

A configuration assigns a value to each of five pipeline parameters. The
first three (chunk size, chunk overlap, embedding model) determine how the
corpus is indexed; the last two (top-k, generative model) determine how
questions are answered. Index settings are factored out into their own type
because several configurations can share one index, which matters for cost
accounting.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from enum import Enum


class ParamName(str, Enum):
    """The five tunable pipeline parameters."""

    CHUNK_SIZE = "chunk_size"
    CHUNK_OVERLAP = "chunk_overlap"
    EMBEDDING_MODEL = "embedding_model"
    TOP_K = "top_k"
    GENERATIVE_MODEL = "generative_model"


# Canonical mixed-radix digit order for config ordinals, slowest-varying
# first. Replay files and seeded runs depend on this order staying fixed.
ORDINAL_ORDER: tuple[ParamName, ...] = (
    ParamName.CHUNK_SIZE,
    ParamName.CHUNK_OVERLAP,
    ParamName.EMBEDDING_MODEL,
    ParamName.TOP_K,
    ParamName.GENERATIVE_MODEL,
)

SPACE_FORMAT_VERSION = 1


@dataclass(frozen=True)
class IndexConfig:
    """Settings that determine a vector index: chunking plus embedding model.

    Equality over all three fields drives index reuse detection, so two
    configurations sharing an IndexConfig are charged for one index build.
    """

    chunk_size: int
    chunk_overlap: float
    embedding_model: str

    def __post_init__(self) -> None:
        if self.chunk_size < 1:
            raise ValueError(f"chunk_size must be >= 1, got {self.chunk_size}")
        if not 0.0 <= self.chunk_overlap < 1.0:
            raise ValueError(
                f"chunk_overlap must be a fraction in [0, 1), got {self.chunk_overlap}"
            )


@dataclass(frozen=True)
class AnswerConfig:
    """Settings for the answering stage: retrieval depth and generator."""

    top_k: int
    generative_model: str

    def __post_init__(self) -> None:
        if self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k}")


@dataclass(frozen=True)
class RagConfig:
    """One point in the five-parameter search space."""

    index: IndexConfig
    answer: AnswerConfig

    @classmethod
    def from_values(
        cls,
        chunk_size: int,
        chunk_overlap: float,
        embedding_model: str,
        top_k: int,
        generative_model: str,
    ) -> "RagConfig":
        return cls(
            index=IndexConfig(chunk_size, chunk_overlap, embedding_model),
            answer=AnswerConfig(top_k, generative_model),
        )

    def value_of(self, param: ParamName):
        if param is ParamName.CHUNK_SIZE:
            return self.index.chunk_size
        if param is ParamName.CHUNK_OVERLAP:
            return self.index.chunk_overlap
        if param is ParamName.EMBEDDING_MODEL:
            return self.index.embedding_model
        if param is ParamName.TOP_K:
            return self.answer.top_k
        if param is ParamName.GENERATIVE_MODEL:
            return self.answer.generative_model
        raise ValueError(f"unknown parameter {param!r}")

    def replace(self, param: ParamName, value) -> "RagConfig":
        """Return a copy with one parameter set to ``value``."""
        values = {p: self.value_of(p) for p in ParamName}
        values[param] = value
        return RagConfig.from_values(
            values[ParamName.CHUNK_SIZE],
            values[ParamName.CHUNK_OVERLAP],
            values[ParamName.EMBEDDING_MODEL],
            values[ParamName.TOP_K],
            values[ParamName.GENERATIVE_MODEL],
        )

    def as_dict(self) -> dict:
        return {p.value: self.value_of(p) for p in ORDINAL_ORDER}


@dataclass(frozen=True)
class SearchSpace:
    """Ordered value lists for each parameter.

    Value lists are kept in declaration order; that order is the tie-break
    order used by greedy commits and the digit order of config ordinals.
    """

    chunk_sizes: tuple[int, ...]
    chunk_overlaps: tuple[float, ...]
    embedding_models: tuple[str, ...]
    top_ks: tuple[int, ...]
    generative_models: tuple[str, ...]

    def __post_init__(self) -> None:
        # Accept any sequence; store tuples so the space is hashable.
        for name in (
            "chunk_sizes",
            "chunk_overlaps",
            "embedding_models",
            "top_ks",
            "generative_models",
        ):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        for param in ParamName:
            values = self.values_of(param)
            if not values:
                raise ValueError(f"value list for {param.value} is empty")
            if len(set(values)) != len(values):
                raise ValueError(f"value list for {param.value} has duplicates: {values}")
        for size in self.chunk_sizes:
            if size < 1:
                raise ValueError(f"chunk_size values must be >= 1, got {size}")
        for overlap in self.chunk_overlaps:
            if not 0.0 <= overlap < 1.0:
                raise ValueError(f"chunk_overlap values must be in [0, 1), got {overlap}")
        for k in self.top_ks:
            if k < 1:
                raise ValueError(f"top_k values must be >= 1, got {k}")

    @classmethod
    def default(cls) -> "SearchSpace":
        """The stock 162-configuration space (18 index x 9 answering)."""
        return cls(
            chunk_sizes=(256, 384, 512),
            chunk_overlaps=(0.0, 0.25),
            embedding_models=(
                "multilingual-e5-large",
                "bge-large-en-v1.5",
                "granite-embedding-125M-english",
            ),
            top_ks=(3, 5, 10),
            generative_models=(
                "Llama-3.1-8B-Instruct",
                "Mistral-Nemo-Instruct-2407",
                "Granite-3.1-8B-instruct",
            ),
        )

    def values_of(self, param: ParamName) -> tuple:
        if param is ParamName.CHUNK_SIZE:
            return self.chunk_sizes
        if param is ParamName.CHUNK_OVERLAP:
            return self.chunk_overlaps
        if param is ParamName.EMBEDDING_MODEL:
            return self.embedding_models
        if param is ParamName.TOP_K:
            return self.top_ks
        if param is ParamName.GENERATIVE_MODEL:
            return self.generative_models
        raise ValueError(f"unknown parameter {param!r}")

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(self.values_of(p)) for p in ORDINAL_ORDER)

    @property
    def total_size(self) -> int:
        n = 1
        for s in self.sizes:
            n *= s
        return n

    def contains(self, config: RagConfig) -> bool:
        return all(config.value_of(p) in self.values_of(p) for p in ParamName)

    def _ordinal_map(self) -> dict[RagConfig, int]:
        # Lazy config -> ordinal index; a non-field attribute, so it stays
        # out of equality and hashing. Optimizers hit this path constantly.
        cached = self.__dict__.get("_ordinals")
        if cached is None:
            cached = {self.config_at(i): i for i in range(self.total_size)}
            object.__setattr__(self, "_ordinals", cached)
        return cached

    def ordinal_of(self, config: RagConfig) -> int:
        """Dense ordinal of a config under the canonical mixed-radix order."""
        ordinal = self._ordinal_map().get(config)
        if ordinal is None:
            for param in ORDINAL_ORDER:
                if config.value_of(param) not in self.values_of(param):
                    raise ValueError(
                        f"{param.value}={config.value_of(param)!r} is not in this space"
                    )
            raise ValueError(f"config {config!r} is not in this space")
        return ordinal

    def config_at(self, ordinal: int) -> RagConfig:
        """Inverse of :meth:`ordinal_of`."""
        if not 0 <= ordinal < self.total_size:
            raise IndexError(
                f"ordinal {ordinal} out of range [0, {self.total_size})"
            )
        digits: list[int] = []
        rest = ordinal
        for param in reversed(ORDINAL_ORDER):
            rest, digit = divmod(rest, len(self.values_of(param)))
            digits.append(digit)
        digits.reverse()
        values = {
            param: self.values_of(param)[digit]
            for param, digit in zip(ORDINAL_ORDER, digits)
        }
        return RagConfig.from_values(
            values[ParamName.CHUNK_SIZE],
            values[ParamName.CHUNK_OVERLAP],
            values[ParamName.EMBEDDING_MODEL],
            values[ParamName.TOP_K],
            values[ParamName.GENERATIVE_MODEL],
        )

    def enumerate(self) -> list[RagConfig]:
        """All configurations in ordinal order."""
        return [self.config_at(i) for i in range(self.total_size)]

    def neighbors_fixing(self, config: RagConfig, free_param: ParamName) -> list[RagConfig]:
        """One config per value of ``free_param``, all other fields copied.

        The input config itself is among the results.
        """
        return [config.replace(free_param, v) for v in self.values_of(free_param)]

    def to_dict(self) -> dict:
        return {
            "format_version": SPACE_FORMAT_VERSION,
            "chunk_size": list(self.chunk_sizes),
            "chunk_overlap": list(self.chunk_overlaps),
            "embedding_model": list(self.embedding_models),
            "top_k": list(self.top_ks),
            "generative_model": list(self.generative_models),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SearchSpace":
        version = data.get("format_version", SPACE_FORMAT_VERSION)
        if version != SPACE_FORMAT_VERSION:
            raise ValueError(f"unsupported search-space format_version {version}")
        missing = [p.value for p in ParamName if p.value not in data]
        if missing:
            raise ValueError(f"search space config missing keys: {missing}")
        return cls(
            chunk_sizes=tuple(data["chunk_size"]),
            chunk_overlaps=tuple(float(v) for v in data["chunk_overlap"]),
            embedding_models=tuple(data["embedding_model"]),
            top_ks=tuple(data["top_k"]),
            generative_models=tuple(data["generative_model"]),
        )

    def fingerprint(self) -> str:
        """Stable hash of the canonical serialization.

        Stored in grid-table headers so a table cannot be replayed against a
        mismatched space.
        """
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
