import random

import pytest

from raghpo.costs import CostDelta
from raghpo.evaluator import GridReplayEvaluator, Objective
from raghpo.harness import (
    CostLedger,
    RunSpec,
    export_run,
    load_run,
    run,
)
from raghpo.searchspace import IndexConfig

from conftest import table_from_config_scores

OBJECTIVE = Objective()


def scored_evaluator(space, seed=0, with_mrr=True, with_costs=False):
    rng = random.Random(seed)
    dev = [rng.random() for _ in range(space.total_size)]
    mrr = [rng.random() for _ in range(space.total_size)] if with_mrr else None
    table = table_from_config_scores(space, dev, mrr_scores=mrr)
    if with_costs:
        for ordinal in range(space.total_size):
            config = space.config_at(ordinal)
            table.set_cost(
                ordinal,
                "dev",
                CostDelta(
                    embedded_tokens=_index_tokens(space, config.index),
                    generation_input_tokens=50,
                    generation_output_tokens=5,
                ),
            )
    return GridReplayEvaluator(table, space), dev


def _index_tokens(space, index_config: IndexConfig) -> int:
    # Deterministic per-index embedding cost so ledger dedup is observable.
    sizes = (
        space.chunk_sizes.index(index_config.chunk_size),
        space.chunk_overlaps.index(index_config.chunk_overlap),
        space.embedding_models.index(index_config.embedding_model),
    )
    return 1000 + sizes[0] * 100 + sizes[1] * 10 + sizes[2]


def spec_for(space, algorithm="random", budget=10, seeds=(1, 2), **options):
    return RunSpec(
        space=space,
        algorithm=algorithm,
        objective=OBJECTIVE,
        budget=budget,
        seeds=tuple(seeds),
        optimizer_options=dict(options),
    )


# ---------------------------------------------------------------------------
# Run protocol
# ---------------------------------------------------------------------------


def test_run_shape_ten_by_ten(default_space):
    evaluator, _ = scored_evaluator(default_space)
    record = run(spec_for(default_space, budget=10, seeds=range(1, 11)), evaluator)
    assert len(record.seed_runs) == 10
    assert all(len(sr.history) == 10 for sr in record.seed_runs)
    assert len(record.aggregate) == 10
    total_trials = sum(len(sr.history) for sr in record.seed_runs)
    assert total_trials == 100


def test_run_budget_one_single_seed(tiny_space):
    evaluator, dev = scored_evaluator(tiny_space)
    record = run(spec_for(tiny_space, budget=1, seeds=(7,)), evaluator)
    (seed_run,) = record.seed_runs
    trial = seed_run.history[0]
    assert seed_run.iterations[0].best_dev_score == trial.objective_score
    assert seed_run.iterations[0].best_ordinal == tiny_space.ordinal_of(trial.config)


def test_exhaustive_random_run_reaches_grid_max(default_space):
    evaluator, dev = scored_evaluator(default_space)
    record = run(spec_for(default_space, budget=162, seeds=(3,)), evaluator)
    assert record.seed_runs[0].iterations[-1].best_dev_score == pytest.approx(max(dev))


def test_best_dev_is_monotone_per_seed(default_space):
    evaluator, _ = scored_evaluator(default_space)
    record = run(
        spec_for(default_space, algorithm="tpe", budget=25, seeds=range(1, 6)), evaluator
    )
    for sr in record.seed_runs:
        scores = [it.best_dev_score for it in sr.iterations]
        assert scores == sorted(scores)


def test_test_score_tracks_dev_best(default_space):
    rng = random.Random(5)
    dev = [rng.random() for _ in range(162)]
    test = [rng.random() for _ in range(162)]
    table = table_from_config_scores(default_space, dev, test_scores=test)
    evaluator = GridReplayEvaluator(table, default_space)
    record = run(spec_for(default_space, budget=15, seeds=(1,)), evaluator)
    for it in record.seed_runs[0].iterations:
        assert it.test_score_of_best == pytest.approx(test[it.best_ordinal])


def test_runs_are_bit_identical_across_executions(default_space):
    evaluator, _ = scored_evaluator(default_space)
    spec = spec_for(default_space, algorithm="greedy_m", budget=20, seeds=(1, 2, 3))
    assert run(spec, evaluator) == run(spec, evaluator)


def test_cross_seed_aggregate_is_recomputable(default_space):
    import math
    import statistics

    evaluator, _ = scored_evaluator(default_space)
    record = run(spec_for(default_space, budget=8, seeds=range(1, 11)), evaluator)
    for i, point in enumerate(record.aggregate):
        values = [sr.iterations[i].test_score_of_best for sr in record.seed_runs]
        assert point.n == 10
        assert point.mean_test == pytest.approx(sum(values) / 10)
        assert point.se_test == pytest.approx(statistics.stdev(values) / math.sqrt(10))


def test_constant_histories_have_zero_se(tiny_space):
    table = table_from_config_scores(tiny_space, [0.5] * tiny_space.total_size)
    evaluator = GridReplayEvaluator(table, tiny_space)
    record = run(spec_for(tiny_space, budget=5, seeds=(1, 2, 3)), evaluator)
    for point in record.aggregate:
        assert point.mean_test == pytest.approx(0.5)
        assert point.se_test == pytest.approx(0.0)


def test_rcc_refuses_to_start_without_retrieval_metric(default_space):
    evaluator, _ = scored_evaluator(default_space, with_mrr=False)
    with pytest.raises(ValueError, match="gold document labels"):
        run(spec_for(default_space, algorithm="greedy_rcc"), evaluator)


class _NoFreeLookup:
    """Evaluator facade without replay_objective, like a live backend."""

    def __init__(self, inner):
        self._inner = inner

    def evaluate(self, *args):
        return self._inner.evaluate(*args)

    def evaluate_retrieval_only(self, *args):
        return self._inner.evaluate_retrieval_only(*args)

    def supports_metric(self, *args):
        return self._inner.supports_metric(*args)


def test_rcc_without_free_lookup_defers_best_tracking(default_space):
    evaluator, _ = scored_evaluator(default_space)
    record = run(
        spec_for(default_space, algorithm="greedy_rcc", budget=10, seeds=(1,)),
        _NoFreeLookup(evaluator),
    )
    iterations = record.seed_runs[0].iterations
    # The retrieval-only prefix has no objective score, so no dev best yet.
    for it in iterations[:8]:
        assert it.best_dev_score is None
        assert it.test_score_of_best is None
    assert iterations[8].best_dev_score is not None
    assert iterations[8].test_score_of_best is not None
    # Aggregates skip seeds with undefined values.
    assert record.aggregate[0].n == 0
    assert record.aggregate[0].mean_test is None
    assert record.aggregate[9].n == 1


def test_rcc_probes_get_free_objective_backfill(default_space):
    evaluator, dev = scored_evaluator(default_space)
    record = run(spec_for(default_space, algorithm="greedy_rcc", budget=10, seeds=(4,)), evaluator)
    history = record.seed_runs[0].history
    for trial in history.trials[:8]:
        assert trial.driver == "context_mrr"
        assert trial.retrieval_score is not None
        # Grid replay backfills the objective at zero cost.
        assert trial.objective_score == pytest.approx(
            dev[default_space.ordinal_of(trial.config)]
        )
    assert record.seed_runs[0].iterations[0].best_dev_score is not None


# ---------------------------------------------------------------------------
# Cost ledger
# ---------------------------------------------------------------------------


def test_ledger_charges_index_once():
    ledger = CostLedger()
    index = IndexConfig(256, 0.0, "emb")
    for _ in range(3):
        ledger.charge(index, CostDelta(1000, 50, 5))
        ledger.snapshot()
    assert ledger.totals.embedded_tokens == 1000
    assert ledger.totals.generation_input_tokens == 150
    assert ledger.totals.generation_output_tokens == 15


def test_ledger_distinct_indexes_both_charged():
    ledger = CostLedger()
    ledger.charge(IndexConfig(256, 0.0, "emb"), CostDelta(1000, 0, 0))
    ledger.charge(IndexConfig(512, 0.0, "emb"), CostDelta(2000, 0, 0))
    assert ledger.totals.embedded_tokens == 3000


def test_ledger_snapshots_monotone():
    rng = random.Random(2)
    ledger = CostLedger()
    for i in range(20):
        index = IndexConfig(256 + (i % 3), 0.0, "emb")
        ledger.charge(index, CostDelta(rng.randrange(100), rng.randrange(50), rng.randrange(20)))
        ledger.snapshot()
    snaps = ledger.snapshots
    for a, b in zip(snaps, snaps[1:]):
        assert b.embedded_tokens >= a.embedded_tokens
        assert b.generation_input_tokens >= a.generation_input_tokens
        assert b.generation_output_tokens >= a.generation_output_tokens


def test_greedy_m_first_sweep_charges_one_index(default_space):
    evaluator, _ = scored_evaluator(default_space, with_costs=True)
    record = run(spec_for(default_space, algorithm="greedy_m", budget=3, seeds=(1,)), evaluator)
    history = record.seed_runs[0].history
    # Shared random suffix: three candidates, one index configuration.
    assert len({t.config.index for t in history}) == 1
    expected = _index_tokens(default_space, history[0].config.index)
    after_three = record.seed_runs[0].iterations[2].cost
    assert after_three.embedded_tokens == expected
    assert after_three.generation_input_tokens == 150


def test_rcc_first_eight_iterations_charge_zero_generation(default_space):
    evaluator, _ = scored_evaluator(default_space, with_costs=True)
    record = run(
        spec_for(default_space, algorithm="greedy_rcc", budget=10, seeds=(2,)), evaluator
    )
    snaps = [it.cost for it in record.seed_runs[0].iterations]
    assert snaps[7].generation_input_tokens == 0
    assert snaps[7].generation_output_tokens == 0
    assert snaps[7].embedded_tokens > 0
    # Generation charges begin with the generative-model sweep.
    assert snaps[8].generation_input_tokens > 0


def test_run_spec_validation(default_space):
    with pytest.raises(ValueError, match="budget"):
        spec_for(default_space, budget=0)
    with pytest.raises(ValueError, match="exceeds"):
        spec_for(default_space, budget=163)
    with pytest.raises(ValueError, match="seed"):
        spec_for(default_space, seeds=())
    with pytest.raises(ValueError, match="distinct"):
        spec_for(default_space, seeds=(1, 1))
    with pytest.raises(ValueError, match="algorithm"):
        spec_for(default_space, algorithm="grid")


# ---------------------------------------------------------------------------
# Export / import
# ---------------------------------------------------------------------------


def test_export_row_arithmetic(tmp_path, default_space):
    evaluator, _ = scored_evaluator(default_space)
    record = run(spec_for(default_space, budget=10, seeds=range(1, 11)), evaluator)
    out = tmp_path / "run.jsonl"
    export_run(record, out)
    lines = out.read_text().strip().splitlines()
    kinds = [line.split('"kind":"')[1].split('"')[0] for line in lines]
    assert kinds.count("run_header") == 1
    assert kinds.count("trial") == 100
    assert kinds.count("aggregate") == 10


def test_export_roundtrip_reproduces_record(tmp_path, default_space):
    evaluator, _ = scored_evaluator(default_space, with_costs=True)
    record = run(
        spec_for(default_space, algorithm="greedy_rcc", budget=12, seeds=(1, 2)), evaluator
    )
    out = tmp_path / "run.jsonl"
    export_run(record, out)
    assert load_run(out) == record


def test_export_is_deterministic(tmp_path, default_space):
    evaluator, _ = scored_evaluator(default_space)
    spec = spec_for(default_space, budget=6, seeds=(1, 2))
    export_run(run(spec, evaluator), tmp_path / "a.jsonl")
    export_run(run(spec, evaluator), tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_load_run_rejects_missing_header(tmp_path):
    path = tmp_path / "broken.jsonl"
    path.write_text('{"kind":"aggregate","iteration":1,"mean_test":0.5,"se_test":0,"n":1}\n')
    with pytest.raises(ValueError, match="run_header"):
        load_run(path)


# ---------------------------------------------------------------------------
# Suspension / resume
# ---------------------------------------------------------------------------


class FlakyEvaluator:
    """Delegates to a real evaluator, raising one injected outage."""

    def __init__(self, inner, fail_after_calls: int):
        self._inner = inner
        self._remaining = fail_after_calls
        self._armed = True

    def _tick(self):
        if self._armed:
            self._remaining -= 1
            if self._remaining < 0:
                self._armed = False
                raise ServiceFailure("injected outage")

    def evaluate(self, *args, **kwargs):
        self._tick()
        return self._inner.evaluate(*args, **kwargs)

    def evaluate_retrieval_only(self, *args, **kwargs):
        self._tick()
        return self._inner.evaluate_retrieval_only(*args, **kwargs)

    def __getattr__(self, name):
        return getattr(self._inner, name)


from raghpo.harness import RunSuspended  # noqa: E402
from raghpo.pipeline import ServiceFailure  # noqa: E402


@pytest.mark.parametrize("algorithm", ["random", "tpe", "greedy_m", "greedy_rcc"])
@pytest.mark.parametrize("fail_after", [0, 3, 11])
def test_suspended_run_resumes_identically(tmp_path, default_space, algorithm, fail_after):
    evaluator, _ = scored_evaluator(default_space, with_costs=True)
    spec = spec_for(default_space, algorithm=algorithm, budget=10, seeds=(1, 2))
    reference = run(spec, evaluator)

    checkpoint = tmp_path / "run.checkpoint"
    flaky = FlakyEvaluator(evaluator, fail_after_calls=fail_after)
    with pytest.raises(RunSuspended):
        run(spec, flaky, checkpoint_path=checkpoint)
    assert checkpoint.is_file()

    resumed = run(spec, flaky, checkpoint_path=checkpoint)  # outage cleared
    assert resumed == reference
    assert not checkpoint.exists()  # consumed on completion


def test_suspension_without_checkpoint_path_propagates(default_space):
    evaluator, _ = scored_evaluator(default_space)
    flaky = FlakyEvaluator(evaluator, fail_after_calls=2)
    with pytest.raises(ServiceFailure):
        run(spec_for(default_space, budget=5, seeds=(1,)), flaky)


def test_live_rcc_integration_with_stub_service(stub_service, tiny_dataset):
    from raghpo.pipeline import (
        EmbeddingClient,
        GenerationClient,
        LivePipelineEvaluator,
        ServiceEndpoint,
    )
    from raghpo.searchspace import SearchSpace

    space = SearchSpace(
        chunk_sizes=(8,),
        chunk_overlaps=(0.0,),
        embedding_models=("stub-a", "stub-b"),
        top_ks=(2,),
        generative_models=("Granite-3.1-8B-instruct", "Llama-3.1-8B-Instruct"),
    )
    endpoint = ServiceEndpoint(
        base_url=stub_service.base_url, timeout=5.0, max_attempts=2, backoff_seconds=0.01
    )
    evaluator = LivePipelineEvaluator(
        dataset=tiny_dataset,
        space=space,
        embedder=EmbeddingClient(endpoint, batch_size=16),
        generator=GenerationClient(endpoint),
    )
    record = run(spec_for(space, algorithm="greedy_rcc", budget=4, seeds=(1,)), evaluator)
    sr = record.seed_runs[0]
    probes = [t for t in sr.history if t.driver == "context_mrr"]
    assert len(probes) >= 2  # the embedding-model sweep at minimum
    for trial in probes:
        assert trial.objective_score is None  # no free lookup on a live backend
        assert trial.cost.generation_input_tokens == 0
        assert trial.retrieval_score is not None
    # Ledger generation totals come only from objective-phase trials.
    expected_gen = sum(
        t.cost.generation_input_tokens for t in sr.history if t.driver == "objective"
    )
    assert sr.iterations[-1].cost.generation_input_tokens == expected_gen
    # Dev-best tracking starts with the first objective-scored trial.
    first_objective = next(
        (i for i, t in enumerate(sr.history) if t.objective_score is not None), None
    )
    for i, it in enumerate(sr.iterations):
        if first_objective is None or i < first_objective:
            assert it.best_dev_score is None
        else:
            assert it.best_dev_score is not None


def test_checkpoint_for_different_spec_rejected(tmp_path, default_space):
    evaluator, _ = scored_evaluator(default_space)
    checkpoint = tmp_path / "run.checkpoint"
    flaky = FlakyEvaluator(evaluator, fail_after_calls=2)
    spec_a = spec_for(default_space, algorithm="random", budget=10, seeds=(1, 2))
    with pytest.raises(RunSuspended):
        run(spec_a, flaky, checkpoint_path=checkpoint)
    spec_b = spec_for(default_space, algorithm="tpe", budget=10, seeds=(1, 2))
    with pytest.raises(ValueError, match="different run spec"):
        run(spec_b, evaluator, checkpoint_path=checkpoint)
