"""Evaluation contract consumed by the optimizers, with the grid-replay backend.

An evaluator scores one configuration on one benchmark split under an
objective. The grid-replay backend is a pure lookup into a precomputed score
table, which makes optimizer runs exact, deterministic and free; the live
backend (see :mod:`raghpo.pipeline`) runs the actual RAG pipeline against
model services.
"""

from __future__ import annotations

from dataclasses import dataclass

from .costs import CostDelta, ZERO_COST
from .dataio import FingerprintMismatchError, GridTable
from .metrics import CONTEXT_MRR, METRIC_NAMES, QuestionEval
from .searchspace import RagConfig, SearchSpace


class IncompleteTableError(ValueError):
    """Grid replay was asked for rows the table does not contain."""


@dataclass(frozen=True)
class Objective:
    """What the optimizer maximizes: one metric, or a weighted sum of several.

    Weights default to uniform and must sum to 1 when given explicitly.
    Aggregation over questions is always the arithmetic mean.
    """

    metrics: tuple[str, ...] = ("lexical_ac",)
    weights: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "metrics", tuple(self.metrics))
        if not self.metrics:
            raise ValueError("objective needs at least one metric")
        unknown = [m for m in self.metrics if m not in METRIC_NAMES]
        if unknown:
            raise ValueError(f"unknown metric names {unknown}; expected {sorted(METRIC_NAMES)}")
        if len(set(self.metrics)) != len(self.metrics):
            raise ValueError(f"duplicate metrics in objective: {self.metrics}")
        if self.weights is not None:
            object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
            if len(self.weights) != len(self.metrics):
                raise ValueError("weights must match metrics one-to-one")
            if any(w < 0 for w in self.weights):
                raise ValueError(f"weights must be non-negative, got {self.weights}")
            if abs(sum(self.weights) - 1.0) > 1e-9:
                raise ValueError(f"weights must sum to 1, got {sum(self.weights)}")

    def weighted_metrics(self) -> tuple[tuple[str, float], ...]:
        if self.weights is None:
            w = 1.0 / len(self.metrics)
            return tuple((m, w) for m in self.metrics)
        return tuple(zip(self.metrics, self.weights))

    def describe(self) -> str:
        if len(self.metrics) == 1:
            return self.metrics[0]
        return "+".join(f"{w:g}*{m}" for m, w in self.weighted_metrics())


#: Objective used for retrieval-only evaluation.
RETRIEVAL_OBJECTIVE = Objective(metrics=(CONTEXT_MRR,))


@dataclass(frozen=True)
class EvalResult:
    """Outcome of evaluating one configuration on one split."""

    config: RagConfig
    per_question: tuple[QuestionEval, ...]
    objective_score: float
    cost: CostDelta
    failed_qids: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not 0.0 <= self.objective_score <= 1.0:
            raise ValueError(f"objective_score must be in [0, 1], got {self.objective_score}")


def best_so_far(history) -> tuple[RagConfig, float]:
    """Best configuration by objective score; ties go to the earliest trial.

    Trials without an objective score (retrieval-only probes in live runs)
    are skipped. Raises ValueError when no trial has an objective score.
    """
    best: tuple[RagConfig, float] | None = None
    for trial in history:
        score = trial.objective_score
        if score is None:
            continue
        if best is None or score > best[1]:
            best = (trial.config, score)
    if best is None:
        raise ValueError("history has no trials with an objective score")
    return best


class GridReplayEvaluator:
    """Replays precomputed grid scores; evaluation is a deterministic lookup."""

    def __init__(self, table: GridTable, space: SearchSpace):
        if table.space_fingerprint != space.fingerprint():
            raise FingerprintMismatchError(
                "grid table fingerprint does not match the active search space"
            )
        self.table = table
        self.space = space
        self._qids_cache: dict[tuple[str, str], tuple[str, ...]] = {}
        self._mean_cache: dict[tuple[int, str, str], float] = {}

    def _qids(self, metric: str, split: str) -> tuple[str, ...]:
        key = (metric, split)
        if key not in self._qids_cache:
            self._qids_cache[key] = self.table.qids_for(metric, split)
        return self._qids_cache[key]

    def _metric_mean(self, ordinal: int, metric: str, split: str) -> float:
        key = (ordinal, metric, split)
        cached = self._mean_cache.get(key)
        if cached is not None:
            return cached
        qids = self._qids(metric, split)
        if not qids:
            raise IncompleteTableError(
                f"grid table has no rows for metric {metric!r} on split {split!r}"
            )
        gaps = [q for q in qids if (ordinal, split, metric, q) not in self.table.scores]
        if gaps:
            shown = ", ".join(gaps[:5]) + ("..." if len(gaps) > 5 else "")
            raise IncompleteTableError(
                f"grid table incomplete: config ordinal {ordinal} is missing "
                f"{len(gaps)} {metric!r}/{split!r} rows (qids: {shown})"
            )
        mean = sum(self.table.scores[(ordinal, split, metric, q)] for q in qids) / len(qids)
        self._mean_cache[key] = mean
        return mean

    def _build_result(
        self, config: RagConfig, split: str, objective: Objective, cost: CostDelta
    ) -> EvalResult:
        ordinal = self.space.ordinal_of(config)
        score = 0.0
        for metric, weight in objective.weighted_metrics():
            score += weight * self._metric_mean(ordinal, metric, split)
        per_question: dict[str, QuestionEval] = {}
        for metric in objective.metrics:
            for qid in self._qids(metric, split):
                qe = per_question.setdefault(qid, QuestionEval(qid=qid))
                qe.scores[metric] = self.table.scores[(ordinal, split, metric, qid)]
        ordered = tuple(per_question[q] for q in sorted(per_question))
        return EvalResult(
            config=config, per_question=ordered, objective_score=score, cost=cost
        )

    def evaluate(self, config: RagConfig, split: str, objective: Objective) -> EvalResult:
        """Replay the full objective for one configuration."""
        ordinal = self.space.ordinal_of(config)
        cost = self.table.cost_for(ordinal, split) or ZERO_COST
        return self._build_result(config, split, objective, cost)

    def evaluate_retrieval_only(self, config: RagConfig, split: str) -> EvalResult:
        """Replay retrieval quality only; generation is neither run nor charged."""
        ordinal = self.space.ordinal_of(config)
        full = self.table.cost_for(ordinal, split)
        cost = (
            CostDelta(embedded_tokens=full.embedded_tokens) if full is not None else ZERO_COST
        )
        return self._build_result(config, split, RETRIEVAL_OBJECTIVE, cost)

    def replay_objective(
        self, config: RagConfig, split: str, objective: Objective
    ) -> float | None:
        """Zero-cost objective lookup, or None when the rows are absent.

        Lets the harness record the would-be objective score of a
        retrieval-only probe, which on a replay backend is free. Live
        backends have no equivalent.
        """
        try:
            ordinal = self.space.ordinal_of(config)
            score = 0.0
            for metric, weight in objective.weighted_metrics():
                score += weight * self._metric_mean(ordinal, metric, split)
            return score
        except IncompleteTableError:
            return None

    def supports_metric(self, metric: str, split: str) -> bool:
        return bool(self._qids(metric, split))
