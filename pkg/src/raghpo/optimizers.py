"""The five configuration-search algorithms behind one iterative contract.

Each optimizer is a sequential state machine: ``suggest(history)`` proposes
an unexplored configuration, the caller evaluates it and appends a
:class:`Trial`, and the cycle repeats. Given the same seed, search space and
evaluator, the whole trajectory is deterministic, and a snapshot taken with
``state_dict()`` resumes the identical trajectory.

Algorithms:

* ``random`` -- uniform draws over unexplored configurations.
* ``tpe`` -- after a handful of uniform warm-up draws, splits past trials
  into good/bad sets at a quantile, fits smoothed categorical densities per
  parameter, and picks the candidate with the highest good/bad density ratio.
* ``greedy_m`` / ``greedy_r`` -- coordinate descent over a fixed parameter
  ordering (models first vs. retrieval first): sweep every value of the
  current parameter with earlier parameters fixed and one shared random
  suffix for the later ones, commit the best value, move on.
* ``greedy_rcc`` -- retrieval-first ordering where the sweeps for the three
  index parameters are scored by retrieval quality alone, deferring all
  generation spend until the retrieval side is fixed.
"""

from __future__ import annotations

import math
import random
from collections import Counter
from dataclasses import dataclass
from typing import Iterator, Sequence

from .costs import CostDelta, ZERO_COST
from .searchspace import ORDINAL_ORDER, ParamName, RagConfig, SearchSpace

ALGORITHMS = ("random", "tpe", "greedy_m", "greedy_r", "greedy_rcc")

#: Which score drove a trial: the run objective, or retrieval quality.
DRIVER_OBJECTIVE = "objective"
DRIVER_RETRIEVAL = "context_mrr"

GREEDY_ORDERINGS: dict[str, tuple[ParamName, ...]] = {
    # Models first: generative and embedding model are presumed highest impact.
    "greedy_m": (
        ParamName.GENERATIVE_MODEL,
        ParamName.EMBEDDING_MODEL,
        ParamName.CHUNK_SIZE,
        ParamName.CHUNK_OVERLAP,
        ParamName.TOP_K,
    ),
    # Pipeline order: retrieval side first (model first within it), then generation.
    "greedy_r": (
        ParamName.EMBEDDING_MODEL,
        ParamName.CHUNK_SIZE,
        ParamName.CHUNK_OVERLAP,
        ParamName.GENERATIVE_MODEL,
        ParamName.TOP_K,
    ),
}
GREEDY_ORDERINGS["greedy_rcc"] = GREEDY_ORDERINGS["greedy_r"]

#: Parameters whose sweeps are scored retrieval-only under greedy_rcc.
RCC_RETRIEVAL_PARAMS = frozenset(
    {ParamName.EMBEDDING_MODEL, ParamName.CHUNK_SIZE, ParamName.CHUNK_OVERLAP}
)


class SpaceExhaustedError(RuntimeError):
    """Every configuration has been explored; nothing left to suggest."""


@dataclass(frozen=True)
class Trial:
    """One evaluated configuration in a run."""

    iteration: int
    config: RagConfig
    objective_score: float | None
    retrieval_score: float | None = None
    cost: CostDelta = ZERO_COST
    driver: str = DRIVER_OBJECTIVE


class TrialHistory:
    """Ordered, duplicate-free record of evaluated configurations."""

    def __init__(self, trials: Sequence[Trial] = ()):
        self._trials: list[Trial] = []
        self._configs: set[RagConfig] = set()
        for trial in trials:
            self.append(trial)

    def append(self, trial: Trial) -> None:
        if trial.iteration != len(self._trials) + 1:
            raise ValueError(
                f"iterations must be consecutive from 1; got {trial.iteration} "
                f"after {len(self._trials)} trials"
            )
        if trial.config in self._configs:
            raise ValueError(f"duplicate config at iteration {trial.iteration}")
        self._trials.append(trial)
        self._configs.add(trial.config)

    def __len__(self) -> int:
        return len(self._trials)

    def __iter__(self) -> Iterator[Trial]:
        return iter(self._trials)

    def __getitem__(self, i: int) -> Trial:
        return self._trials[i]

    def __eq__(self, other) -> bool:
        return isinstance(other, TrialHistory) and self._trials == other._trials

    def __contains__(self, config: RagConfig) -> bool:
        return config in self._configs

    @property
    def trials(self) -> tuple[Trial, ...]:
        return tuple(self._trials)

    @property
    def explored(self) -> frozenset[RagConfig]:
        return frozenset(self._configs)

    def configs(self) -> set[RagConfig]:
        return set(self._configs)

    def by_config(self) -> dict[RagConfig, Trial]:
        return {t.config: t for t in self._trials}


@dataclass(frozen=True)
class Suggestion:
    """A proposed configuration plus the evaluation mode it expects."""

    config: RagConfig
    retrieval_only: bool = False


def _value_tuple(config: RagConfig) -> tuple:
    # Field order mirrors ORDINAL_ORDER; direct attribute access is the hot path.
    return (
        config.index.chunk_size,
        config.index.chunk_overlap,
        config.index.embedding_model,
        config.answer.top_k,
        config.answer.generative_model,
    )


def _encode_rng(rng: random.Random) -> list:
    version, internal, gauss = rng.getstate()
    return [version, list(internal), gauss]


def _decode_rng(state: list) -> tuple:
    return (state[0], tuple(state[1]), state[2])


class Optimizer:
    """Shared plumbing: seeded RNG, unexplored-set helpers, state snapshots."""

    algorithm = ""

    def __init__(self, space: SearchSpace, seed: int):
        self.space = space
        self.seed = seed
        self._rng = random.Random(seed)
        # Incremental view of the explored ordinals. An optimizer is a
        # sequential state machine, so the history it sees only grows; the
        # guard below falls back to a full rescan if it does not.
        self._seen = 0
        self._seen_last: Trial | None = None
        self._explored: set[int] = set()

    def suggest(self, history: TrialHistory) -> Suggestion:
        raise NotImplementedError

    # -- serialization -----------------------------------------------------

    def state_dict(self) -> dict:
        state = {
            "algorithm": self.algorithm,
            "seed": self.seed,
            "rng_state": _encode_rng(self._rng),
        }
        state.update(self._extra_state())
        return state

    def load_state_dict(self, state: dict) -> None:
        if state.get("algorithm") != self.algorithm:
            raise ValueError(
                f"state is for algorithm {state.get('algorithm')!r}, not {self.algorithm!r}"
            )
        self._rng.setstate(_decode_rng(state["rng_state"]))
        self._load_extra_state(state)

    def _extra_state(self) -> dict:
        return {}

    def _load_extra_state(self, state: dict) -> None:
        pass

    # -- helpers ------------------------------------------------------------

    def _explored_ordinals(self, history: TrialHistory) -> set[int]:
        n = len(history)
        if self._seen > n or (self._seen > 0 and history[self._seen - 1] is not self._seen_last):
            self._seen = 0
            self._explored = set()
        for i in range(self._seen, n):
            self._explored.add(self.space.ordinal_of(history[i].config))
        self._seen = n
        self._seen_last = history[n - 1] if n else None
        return self._explored

    def _unexplored(self, history: TrialHistory) -> list[int]:
        explored = self._explored_ordinals(history)
        return [i for i in range(self.space.total_size) if i not in explored]

    def _uniform_unexplored(self, history: TrialHistory) -> RagConfig:
        pool = self._unexplored(history)
        if not pool:
            raise SpaceExhaustedError("all configurations have been explored")
        return self.space.config_at(pool[self._rng.randrange(len(pool))])

    def _check_not_exhausted(self, history: TrialHistory) -> None:
        if len(history) >= self.space.total_size:
            raise SpaceExhaustedError("all configurations have been explored")


class RandomOptimizer(Optimizer):
    """Uniform draws over unexplored configurations, ignoring past scores."""

    algorithm = "random"

    def suggest(self, history: TrialHistory) -> Suggestion:
        self._check_not_exhausted(history)
        return Suggestion(self._uniform_unexplored(history))


class TpeOptimizer(Optimizer):
    """Density-ratio search over the categorical space.

    The first ``n_init`` suggestions are uniform. Afterwards the scored
    trials are split at the ``gamma`` quantile into good and bad sets (ties
    resolved toward earlier trials), per-parameter categorical densities are
    fit with add-one smoothing over the full value list, ``n_candidates``
    configurations are drawn from the good density, and the unexplored
    candidate maximizing the good/bad likelihood ratio is suggested. All
    constants are overridable.
    """

    algorithm = "tpe"

    def __init__(
        self,
        space: SearchSpace,
        seed: int,
        gamma: float = 0.25,
        n_candidates: int = 24,
        n_init: int = 5,
    ):
        super().__init__(space, seed)
        if not 0.0 < gamma < 1.0:
            raise ValueError(f"gamma must be in (0, 1), got {gamma}")
        if n_candidates < 1:
            raise ValueError(f"n_candidates must be >= 1, got {n_candidates}")
        if n_init < 0:
            raise ValueError(f"n_init must be >= 0, got {n_init}")
        self.gamma = gamma
        self.n_candidates = n_candidates
        self.n_init = n_init

    def suggest(self, history: TrialHistory) -> Suggestion:
        self._check_not_exhausted(history)
        scored = [t for t in history if t.objective_score is not None]
        if len(history) < self.n_init or len(scored) < 2:
            return Suggestion(self._uniform_unexplored(history))

        ranked = sorted(scored, key=lambda t: (-t.objective_score, t.iteration))
        n_good = max(1, math.ceil(self.gamma * len(ranked)))
        good, bad = ranked[:n_good], ranked[n_good:]
        if not bad:
            return Suggestion(self._uniform_unexplored(history))

        good_vals = [_value_tuple(t.config) for t in good]
        bad_vals = [_value_tuple(t.config) for t in bad]

        # Per parameter: one draw of n_candidates values from the good
        # density, plus the per-value log ratio for scoring candidates.
        draws: list[list] = []
        log_ratio: list[dict] = []
        for k, param in enumerate(ORDINAL_ORDER):
            values = self.space.values_of(param)
            l = self._smoothed([v[k] for v in good_vals], values)
            g = self._smoothed([v[k] for v in bad_vals], values)
            draws.append(self._rng.choices(values, weights=l, k=self.n_candidates))
            log_ratio.append(
                {v: math.log(l[i]) - math.log(g[i]) for i, v in enumerate(values)}
            )

        best: tuple[float, RagConfig] | None = None
        for j in range(self.n_candidates):
            cs, co, em, tk, gm = (draws[k][j] for k in range(5))
            candidate = RagConfig.from_values(cs, co, em, tk, gm)
            if candidate in history:
                continue
            ratio = sum(log_ratio[k][draws[k][j]] for k in range(5))
            if best is None or ratio > best[0]:
                best = (ratio, candidate)
        if best is None:
            return Suggestion(self._uniform_unexplored(history))
        return Suggestion(best[1])

    @staticmethod
    def _smoothed(observed: list, values: tuple) -> list[float]:
        counts = Counter(observed)
        total = len(observed) + len(values)
        return [(counts[v] + 1) / total for v in values]

    def _extra_state(self) -> dict:
        return {"gamma": self.gamma, "n_candidates": self.n_candidates, "n_init": self.n_init}

    def _load_extra_state(self, state: dict) -> None:
        self.gamma = state.get("gamma", self.gamma)
        self.n_candidates = state.get("n_candidates", self.n_candidates)
        self.n_init = state.get("n_init", self.n_init)


@dataclass
class _Sweep:
    param: ParamName
    # One candidate per value of ``param``, in the space's value order.
    candidates: list[RagConfig]
    driver: str


class GreedyOptimizer(Optimizer):
    """Coordinate descent over a fixed parameter ordering.

    Within a sweep every candidate shares identical values for all
    parameters except the swept one: earlier parameters are pinned to their
    committed values, later ones to a single random suffix drawn once per
    sweep (``suffix_mode="per_candidate"`` draws a fresh suffix per
    candidate instead). Sweep candidates that already appear in the history
    are not re-suggested; their recorded scores feed the commit decision.
    The best value (ties to the first in the value list) is committed and
    the next parameter swept; once every parameter is committed, remaining
    budget falls back to uniform random suggestions.
    """

    def __init__(
        self,
        space: SearchSpace,
        seed: int,
        algorithm: str,
        suffix_mode: str = "shared",
    ):
        if algorithm not in GREEDY_ORDERINGS:
            raise ValueError(f"unknown greedy variant {algorithm!r}")
        if suffix_mode not in ("shared", "per_candidate"):
            raise ValueError(f"suffix_mode must be 'shared' or 'per_candidate', got {suffix_mode!r}")
        super().__init__(space, seed)
        self.algorithm = algorithm
        self.ordering = GREEDY_ORDERINGS[algorithm]
        self.suffix_mode = suffix_mode
        self._param_idx = 0
        self._committed: dict[ParamName, object] = {}
        self._sweep: _Sweep | None = None

    @property
    def committed(self) -> dict[ParamName, object]:
        return dict(self._committed)

    def _sweep_driver(self, param: ParamName) -> str:
        if self.algorithm == "greedy_rcc" and param in RCC_RETRIEVAL_PARAMS:
            return DRIVER_RETRIEVAL
        return DRIVER_OBJECTIVE

    def _draw_suffix(self, following: Sequence[ParamName]) -> dict[ParamName, object]:
        return {q: self._rng.choice(self.space.values_of(q)) for q in following}

    def _start_sweep(self) -> _Sweep:
        param = self.ordering[self._param_idx]
        following = self.ordering[self._param_idx + 1 :]
        shared_suffix = self._draw_suffix(following) if self.suffix_mode == "shared" else None
        candidates = []
        for value in self.space.values_of(param):
            suffix = shared_suffix if shared_suffix is not None else self._draw_suffix(following)
            assignment = {**self._committed, param: value, **suffix}
            candidates.append(
                RagConfig.from_values(
                    assignment[ParamName.CHUNK_SIZE],
                    assignment[ParamName.CHUNK_OVERLAP],
                    assignment[ParamName.EMBEDDING_MODEL],
                    assignment[ParamName.TOP_K],
                    assignment[ParamName.GENERATIVE_MODEL],
                )
            )
        return _Sweep(param=param, candidates=candidates, driver=self._sweep_driver(param))

    def _commit(self, sweep: _Sweep, trials: dict[RagConfig, Trial]) -> None:
        values = self.space.values_of(sweep.param)
        best_value = None
        best_score = None
        for value, candidate in zip(values, sweep.candidates):
            trial = trials[candidate]
            score = (
                trial.retrieval_score
                if sweep.driver == DRIVER_RETRIEVAL
                else trial.objective_score
            )
            if score is None:
                # The candidate was explored in a different evaluation mode
                # and lacks the score this sweep compares on. Leave it out.
                continue
            if best_score is None or score > best_score:
                best_score = score
                best_value = value
        if best_value is None:
            # No comparable scores at all; keep the first value for progress.
            best_value = values[0]
        self._committed[sweep.param] = best_value
        self._param_idx += 1
        self._sweep = None

    def suggest(self, history: TrialHistory) -> Suggestion:
        self._check_not_exhausted(history)
        while self._param_idx < len(self.ordering):
            if self._sweep is None:
                self._sweep = self._start_sweep()
            for candidate in self._sweep.candidates:
                if candidate not in history:
                    return Suggestion(
                        candidate,
                        retrieval_only=self._sweep.driver == DRIVER_RETRIEVAL,
                    )
            self._commit(self._sweep, history.by_config())
        return Suggestion(self._uniform_unexplored(history))

    # -- serialization -----------------------------------------------------

    def _extra_state(self) -> dict:
        return {
            "suffix_mode": self.suffix_mode,
            "param_idx": self._param_idx,
            "committed": {p.value: v for p, v in self._committed.items()},
            "sweep": None
            if self._sweep is None
            else {
                "param": self._sweep.param.value,
                "candidates": [self.space.ordinal_of(c) for c in self._sweep.candidates],
                "driver": self._sweep.driver,
            },
        }

    def _load_extra_state(self, state: dict) -> None:
        self.suffix_mode = state.get("suffix_mode", self.suffix_mode)
        self._param_idx = state["param_idx"]
        self._committed = {ParamName(p): v for p, v in state["committed"].items()}
        sweep = state.get("sweep")
        self._sweep = (
            None
            if sweep is None
            else _Sweep(
                param=ParamName(sweep["param"]),
                candidates=[self.space.config_at(i) for i in sweep["candidates"]],
                driver=sweep["driver"],
            )
        )


def create_optimizer(
    algorithm: str,
    space: SearchSpace,
    seed: int,
    *,
    tpe_gamma: float = 0.25,
    tpe_candidates: int = 24,
    tpe_init: int = 5,
    greedy_suffix_mode: str = "shared",
) -> Optimizer:
    """Instantiate one of the five algorithms by id."""
    if algorithm == "random":
        return RandomOptimizer(space, seed)
    if algorithm == "tpe":
        return TpeOptimizer(
            space, seed, gamma=tpe_gamma, n_candidates=tpe_candidates, n_init=tpe_init
        )
    if algorithm in GREEDY_ORDERINGS:
        return GreedyOptimizer(space, seed, algorithm, suffix_mode=greedy_suffix_mode)
    raise ValueError(f"unknown algorithm {algorithm!r}; expected one of {ALGORITHMS}")


def restore_optimizer(space: SearchSpace, state: dict) -> Optimizer:
    """Rebuild an optimizer from a ``state_dict()`` snapshot."""
    algorithm = state.get("algorithm")
    optimizer = create_optimizer(algorithm, space, seed=state["seed"])
    optimizer.load_state_dict(state)
    return optimizer
