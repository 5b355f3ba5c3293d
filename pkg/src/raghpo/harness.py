"""Experiment protocol: budgeted runs, seed repetition, dev-to-test tracking.

A run executes one algorithm for a fixed number of iterations, once per
seed. Each iteration suggests a configuration, evaluates it on the dev
split, then evaluates the current dev-best configuration on the test split,
so generalization can be analyzed per iteration. Token spend is accumulated
in a cost ledger that charges each distinct index build once; test-side
evaluation spend is tracked in a separate ledger because the optimization
cost curves cover optimization-time spend only.
"""

from __future__ import annotations

import json
import logging
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path

from .costs import CostDelta
from .evaluator import Objective
from .metrics import CONTEXT_MRR
from .optimizers import (
    ALGORITHMS,
    DRIVER_OBJECTIVE,
    DRIVER_RETRIEVAL,
    Optimizer,
    Trial,
    TrialHistory,
    create_optimizer,
    restore_optimizer,
)
from .searchspace import IndexConfig, RagConfig, SearchSpace

log = logging.getLogger(__name__)

RUN_FORMAT_VERSION = 1
CHECKPOINT_FORMAT_VERSION = 1


class RunSuspended(RuntimeError):
    """A live run hit a service outage; resumable state was written."""

    def __init__(self, message: str, checkpoint_path: Path):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


@dataclass(frozen=True)
class CostTotals:
    """A ledger snapshot: cumulative token counts up to some iteration."""

    embedded_tokens: int = 0
    generation_input_tokens: int = 0
    generation_output_tokens: int = 0


class CostLedger:
    """Accumulates token spend across evaluations, charging each index once."""

    def __init__(self) -> None:
        self._charged_indexes: set[IndexConfig] = set()
        self._embedded = 0
        self._gen_in = 0
        self._gen_out = 0
        self._snapshots: list[CostTotals] = []

    def charge(self, index_config: IndexConfig, cost: CostDelta) -> None:
        """Add generation tokens always; embedding tokens only for new indexes."""
        if index_config not in self._charged_indexes:
            self._charged_indexes.add(index_config)
            self._embedded += cost.embedded_tokens
        self._gen_in += cost.generation_input_tokens
        self._gen_out += cost.generation_output_tokens

    def snapshot(self) -> CostTotals:
        totals = self.totals
        self._snapshots.append(totals)
        return totals

    @property
    def totals(self) -> CostTotals:
        return CostTotals(self._embedded, self._gen_in, self._gen_out)

    @property
    def snapshots(self) -> tuple[CostTotals, ...]:
        return tuple(self._snapshots)

    @property
    def charged_indexes(self) -> frozenset[IndexConfig]:
        return frozenset(self._charged_indexes)


@dataclass(frozen=True)
class IterationRecord:
    """State after one iteration: dev best, its test score, spend so far."""

    iteration: int
    best_dev_score: float | None
    best_ordinal: int | None
    test_score_of_best: float | None
    cost: CostTotals


@dataclass(frozen=True)
class SeedRun:
    seed: int
    history: TrialHistory
    iterations: tuple[IterationRecord, ...]


@dataclass(frozen=True)
class AggregatePoint:
    """Cross-seed mean and standard error of the test score at one iteration."""

    iteration: int
    mean_test: float | None
    se_test: float | None
    n: int


@dataclass(frozen=True)
class RunSpec:
    """Everything that determines a run besides the evaluator backend."""

    space: SearchSpace
    algorithm: str
    objective: Objective
    budget: int
    seeds: tuple[int, ...]
    optimizer_options: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "seeds", tuple(self.seeds))
        if self.algorithm not in ALGORITHMS:
            raise ValueError(
                f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}"
            )
        if self.budget < 1:
            raise ValueError(f"budget must be >= 1, got {self.budget}")
        if self.budget > self.space.total_size:
            raise ValueError(
                f"budget {self.budget} exceeds the space size {self.space.total_size}"
            )
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError(f"seeds must be distinct, got {self.seeds}")


@dataclass(frozen=True)
class RunRecord:
    spec: RunSpec
    seed_runs: tuple[SeedRun, ...]
    aggregate: tuple[AggregatePoint, ...]


def _aggregate_test_scores(seed_runs: tuple[SeedRun, ...], budget: int) -> tuple[AggregatePoint, ...]:
    points = []
    for i in range(budget):
        values = [
            sr.iterations[i].test_score_of_best
            for sr in seed_runs
            if sr.iterations[i].test_score_of_best is not None
        ]
        if not values:
            points.append(AggregatePoint(i + 1, None, None, 0))
            continue
        mean = sum(values) / len(values)
        se = statistics.stdev(values) / math.sqrt(len(values)) if len(values) > 1 else 0.0
        points.append(AggregatePoint(i + 1, mean, se, len(values)))
    return tuple(points)


class _SeedProgress:
    """Mutable per-seed state, restorable from a checkpoint mid-run."""

    def __init__(self, spec: RunSpec, seed: int):
        self.seed = seed
        self.optimizer: Optimizer = create_optimizer(
            spec.algorithm, spec.space, seed, **spec.optimizer_options
        )
        self.history = TrialHistory()
        self.iterations: list[IterationRecord] = []
        self.ledger = CostLedger()
        self.test_ledger = CostLedger()
        self.test_cache: dict[int, float] = {}
        # Optimizer snapshot taken before the in-flight iteration's suggest,
        # so a suspension rolls back to a clean iteration boundary.
        self.resume_state: dict | None = None

    def best_so_far(self) -> tuple[RagConfig | None, float | None]:
        # Strict improvement keeps the earliest trial on ties.
        config, score = None, None
        for trial in self.history:
            if trial.objective_score is not None and (
                score is None or trial.objective_score > score
            ):
                config, score = trial.config, trial.objective_score
        return config, score


def _advance_seed(
    spec: RunSpec, evaluator, progress: _SeedProgress, free_lookup, track_state: bool
) -> SeedRun:
    """Run the remaining iterations of one seed, returning its final record."""
    best_config, best_score = progress.best_so_far()
    for iteration in range(len(progress.history) + 1, spec.budget + 1):
        if track_state:
            progress.resume_state = progress.optimizer.state_dict()
        suggestion = progress.optimizer.suggest(progress.history)
        config = suggestion.config
        if suggestion.retrieval_only:
            result = evaluator.evaluate_retrieval_only(config, "dev")
            retrieval_score = result.objective_score
            objective_score = (
                free_lookup(config, "dev", spec.objective) if free_lookup else None
            )
            driver = DRIVER_RETRIEVAL
        else:
            result = evaluator.evaluate(config, "dev", spec.objective)
            objective_score = result.objective_score
            retrieval_score = None
            driver = DRIVER_OBJECTIVE
        progress.history.append(
            Trial(
                iteration=iteration,
                config=config,
                objective_score=objective_score,
                retrieval_score=retrieval_score,
                cost=result.cost,
                driver=driver,
            )
        )
        progress.ledger.charge(config.index, result.cost)

        if objective_score is not None and (
            best_score is None or objective_score > best_score
        ):
            best_config, best_score = config, objective_score
        best_ordinal = None
        test_score = None
        if best_config is not None:
            best_ordinal = spec.space.ordinal_of(best_config)
            test_score = progress.test_cache.get(best_ordinal)
            if test_score is None:
                test_result = evaluator.evaluate(best_config, "test", spec.objective)
                progress.test_ledger.charge(best_config.index, test_result.cost)
                test_score = test_result.objective_score
                progress.test_cache[best_ordinal] = test_score
        progress.iterations.append(
            IterationRecord(
                iteration=iteration,
                best_dev_score=best_score,
                best_ordinal=best_ordinal,
                test_score_of_best=test_score,
                cost=progress.ledger.snapshot(),
            )
        )
    return SeedRun(
        seed=progress.seed,
        history=progress.history,
        iterations=tuple(progress.iterations),
    )


def run(spec: RunSpec, evaluator, checkpoint_path: str | Path | None = None) -> RunRecord:
    """Execute the full protocol: budget iterations per seed, then aggregate.

    The evaluator must provide ``evaluate(config, split, objective)`` and
    ``evaluate_retrieval_only(config, split)``. When it also provides
    ``replay_objective`` (the grid-replay backend does), retrieval-only
    probes get their objective score recorded via that free lookup, so the
    dev-best trajectory is defined from iteration 1 without charging any
    generation spend for those probes.

    With ``checkpoint_path`` set, a live-service outage writes resumable
    state there and raises :class:`RunSuspended`; re-running with the same
    arguments continues the identical trajectory. A completed run removes
    the checkpoint.
    """
    from .pipeline import ServiceFailure

    if spec.algorithm == "greedy_rcc":
        supports = getattr(evaluator, "supports_metric", None)
        if supports is not None and not supports(CONTEXT_MRR, "dev"):
            raise ValueError(
                "greedy_rcc needs retrieval quality on the dev split, but no dev "
                "question has gold document labels (and the grid table has no "
                "context_mrr rows); choose another algorithm or add gold labels"
            )
    free_lookup = getattr(evaluator, "replay_objective", None)

    seed_runs: list[SeedRun] = []
    resumed: _SeedProgress | None = None
    if checkpoint_path is not None and Path(checkpoint_path).is_file():
        seed_runs, resumed = _load_checkpoint(Path(checkpoint_path), spec)
        log.info(
            "resuming from %s: %d seeds complete%s",
            checkpoint_path,
            len(seed_runs),
            f", seed {resumed.seed} mid-run" if resumed else "",
        )

    done = {sr.seed for sr in seed_runs}
    for seed in spec.seeds:
        if seed in done:
            continue
        if resumed is not None and resumed.seed == seed:
            progress, resumed = resumed, None
        else:
            progress = _SeedProgress(spec, seed)
        try:
            seed_run = _advance_seed(
                spec, evaluator, progress, free_lookup, track_state=checkpoint_path is not None
            )
        except ServiceFailure as exc:
            if checkpoint_path is None:
                raise
            _save_checkpoint(Path(checkpoint_path), spec, seed_runs, progress)
            raise RunSuspended(
                f"service outage during seed {seed}: {exc}; resumable state "
                f"written to {checkpoint_path}",
                Path(checkpoint_path),
            ) from exc
        seed_runs.append(seed_run)
        log.info(
            "seed %d done: best dev %s",
            seed,
            f"{seed_run.iterations[-1].best_dev_score:.4f}"
            if seed_run.iterations[-1].best_dev_score is not None
            else "n/a",
        )
    if checkpoint_path is not None:
        Path(checkpoint_path).unlink(missing_ok=True)
    ordered = tuple(sorted(seed_runs, key=lambda sr: spec.seeds.index(sr.seed)))
    return RunRecord(
        spec=spec,
        seed_runs=ordered,
        aggregate=_aggregate_test_scores(ordered, spec.budget),
    )


# ---------------------------------------------------------------------------
# Run export / import and checkpoints
# ---------------------------------------------------------------------------


def _dump(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def _spec_header(spec: RunSpec) -> dict:
    return {
        "algorithm": spec.algorithm,
        "objective_metrics": list(spec.objective.metrics),
        "objective_weights": list(spec.objective.weights)
        if spec.objective.weights is not None
        else None,
        "budget": spec.budget,
        "seeds": list(spec.seeds),
        "space": spec.space.to_dict(),
        "space_fingerprint": spec.space.fingerprint(),
        "optimizer_options": spec.optimizer_options,
    }


def _spec_from_header(header: dict) -> RunSpec:
    return RunSpec(
        space=SearchSpace.from_dict(header["space"]),
        algorithm=header["algorithm"],
        objective=Objective(
            metrics=tuple(header["objective_metrics"]),
            weights=tuple(header["objective_weights"])
            if header.get("objective_weights") is not None
            else None,
        ),
        budget=header["budget"],
        seeds=tuple(header["seeds"]),
        optimizer_options=header.get("optimizer_options", {}),
    )


def _trial_row(space: SearchSpace, seed: int, trial: Trial, it: IterationRecord) -> dict:
    return {
        "kind": "trial",
        "seed": seed,
        "iteration": trial.iteration,
        "ordinal": space.ordinal_of(trial.config),
        "objective_score": trial.objective_score,
        "retrieval_score": trial.retrieval_score,
        "driver": trial.driver,
        "cost": trial.cost.as_dict(),
        "best_dev": it.best_dev_score,
        "best_ordinal": it.best_ordinal,
        "test_of_best": it.test_score_of_best,
        "cum_embedded_tokens": it.cost.embedded_tokens,
        "cum_generation_input_tokens": it.cost.generation_input_tokens,
        "cum_generation_output_tokens": it.cost.generation_output_tokens,
    }


def _parse_trial_row(space: SearchSpace, row: dict) -> tuple[Trial, IterationRecord]:
    trial = Trial(
        iteration=row["iteration"],
        config=space.config_at(row["ordinal"]),
        objective_score=row["objective_score"],
        retrieval_score=row["retrieval_score"],
        cost=CostDelta(**row["cost"]),
        driver=row["driver"],
    )
    record = IterationRecord(
        iteration=row["iteration"],
        best_dev_score=row["best_dev"],
        best_ordinal=row["best_ordinal"],
        test_score_of_best=row["test_of_best"],
        cost=CostTotals(
            embedded_tokens=row["cum_embedded_tokens"],
            generation_input_tokens=row["cum_generation_input_tokens"],
            generation_output_tokens=row["cum_generation_output_tokens"],
        ),
    )
    return trial, record


def _seed_run_from_rows(space: SearchSpace, seed: int, rows: list[dict]) -> SeedRun:
    history = TrialHistory()
    iterations = []
    for row in sorted(rows, key=lambda r: r["iteration"]):
        trial, record = _parse_trial_row(space, row)
        history.append(trial)
        iterations.append(record)
    return SeedRun(seed=seed, history=history, iterations=tuple(iterations))


def export_run(record: RunRecord, path: str | Path) -> None:
    """Write a run as JSON lines: header, one row per trial, one per aggregate point.

    The header embeds the search space, so the file is self-contained and
    :func:`load_run` can rebuild configurations from ordinals.
    """
    spec = record.spec
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open("w", encoding="utf-8") as fh:
        header = {"kind": "run_header", "format_version": RUN_FORMAT_VERSION}
        header.update(_spec_header(spec))
        fh.write(_dump(header) + "\n")
        for sr in record.seed_runs:
            for trial, it in zip(sr.history, sr.iterations):
                fh.write(_dump(_trial_row(spec.space, sr.seed, trial, it)) + "\n")
        for point in record.aggregate:
            fh.write(
                _dump(
                    {
                        "kind": "aggregate",
                        "iteration": point.iteration,
                        "mean_test": point.mean_test,
                        "se_test": point.se_test,
                        "n": point.n,
                    }
                )
                + "\n"
            )


def load_run(path: str | Path) -> RunRecord:
    """Rebuild a RunRecord from an exported file (lossless round-trip)."""
    source = Path(path)
    header: dict | None = None
    trials_by_seed: dict[int, list[dict]] = {}
    aggregate: list[AggregatePoint] = []
    with source.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            kind = record.get("kind")
            if kind == "run_header":
                if record.get("format_version") != RUN_FORMAT_VERSION:
                    raise ValueError(
                        f"{source}:{lineno}: unsupported run format_version "
                        f"{record.get('format_version')!r}"
                    )
                header = record
            elif kind == "trial":
                trials_by_seed.setdefault(record["seed"], []).append(record)
            elif kind == "aggregate":
                aggregate.append(
                    AggregatePoint(
                        iteration=record["iteration"],
                        mean_test=record["mean_test"],
                        se_test=record["se_test"],
                        n=record["n"],
                    )
                )
            else:
                raise ValueError(f"{source}:{lineno}: unknown row kind {kind!r}")
    if header is None:
        raise ValueError(f"{source}: missing run_header row")
    spec = _spec_from_header(header)
    seed_runs = tuple(
        _seed_run_from_rows(spec.space, seed, trials_by_seed.get(seed, []))
        for seed in spec.seeds
    )
    return RunRecord(spec=spec, seed_runs=seed_runs, aggregate=tuple(aggregate))


def _save_checkpoint(
    path: Path, spec: RunSpec, completed: list[SeedRun], progress: _SeedProgress
) -> None:
    payload = {
        "kind": "run_checkpoint",
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "completed": [
            {
                "seed": sr.seed,
                "trials": [
                    _trial_row(spec.space, sr.seed, trial, it)
                    for trial, it in zip(sr.history, sr.iterations)
                ],
            }
            for sr in completed
        ],
        # Rows are the completed iterations only (zip drops a trial whose
        # per-iteration record never landed); the optimizer state is the
        # pre-suggest snapshot, so resume re-proposes the interrupted
        # iteration identically.
        "current": {
            "seed": progress.seed,
            "optimizer_state": progress.resume_state or progress.optimizer.state_dict(),
            "trials": [
                _trial_row(spec.space, progress.seed, trial, it)
                for trial, it in zip(progress.history, progress.iterations)
            ],
            "test_cache": {str(k): v for k, v in progress.test_cache.items()},
        },
    }
    payload.update(_spec_header(spec))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_dump(payload) + "\n", encoding="utf-8")


def _load_checkpoint(path: Path, spec: RunSpec) -> tuple[list[SeedRun], _SeedProgress | None]:
    payload = json.loads(path.read_text(encoding="utf-8"))
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format_version")
    saved = _spec_from_header(payload)
    if saved != spec:
        raise ValueError(
            f"{path}: checkpoint was written for a different run spec; "
            "delete it or re-run with the original settings"
        )
    completed = [
        _seed_run_from_rows(spec.space, entry["seed"], entry["trials"])
        for entry in payload.get("completed", [])
    ]
    current = payload.get("current")
    progress: _SeedProgress | None = None
    if current is not None:
        progress = _SeedProgress(spec, current["seed"])
        progress.optimizer = restore_optimizer(spec.space, current["optimizer_state"])
        for row in sorted(current["trials"], key=lambda r: r["iteration"]):
            trial, record = _parse_trial_row(spec.space, row)
            progress.history.append(trial)
            progress.iterations.append(record)
            progress.ledger.charge(trial.config.index, trial.cost)
            progress.ledger.snapshot()
        progress.test_cache = {int(k): v for k, v in current["test_cache"].items()}
    return completed, progress
