from dataclasses import replace

import numpy as np
import pytest

from unilp.errors import ConfigError, DataError
from unilp.evaluation import hits_at_k, score_pairs
from unilp.graphs import Graph, LatticeSpec, derive_seed_int, generate_lattice
from unilp.model import MODE_ICL, MODE_NO_CONTEXT, ModelConfig, init_params
from unilp.training import (
    LinkDataset,
    TrainConfig,
    TrainRecord,
    TransferResult,
    _epoch_queries,
    build_training_pool,
    eval_context_for,
    finetune,
    pretrain,
    sample_context,
    sample_context_pairs,
    transfer_probe,
)

SMALL_ICL = ModelConfig(
    hidden_dim=8, attention_dim=8, embed_dim=8,
    encoder_layers=1, mlp_layers=2, mlp_hidden=8,
)
SMALL_PLAIN = replace(SMALL_ICL, mode=MODE_NO_CONTEXT)
OVERFIT_CONFIG = ModelConfig(
    hidden_dim=16, attention_dim=16, embed_dim=16,
    encoder_layers=2, mlp_layers=2, mlp_hidden=16, mode=MODE_NO_CONTEXT,
)


def lattice(kind="triangular", rows=5, cols=5):
    return generate_lattice(LatticeSpec(kind=kind, rows=rows, cols=cols, torus=True))


def path_graph(n=4):
    return Graph.from_edges(n, [(i, i + 1) for i in range(n - 1)])


@pytest.fixture(scope="module")
def tri_dataset():
    return LinkDataset.from_graph("tri", lattice(), seed=0)


# ---------------------------------------------------------------------------
# query pools and context sampling


def test_training_pool_alternates_and_avoids_edges(tri_dataset):
    g = tri_dataset.observed
    pool = build_training_pool(g, seed=4)
    assert len(pool) == 2 * g.edge_count
    assert [label for _, label in pool] == [1.0, 0.0] * g.edge_count
    edges = g.edge_set()
    positives = [pair for pair, label in pool if label == 1.0]
    negatives = [pair for pair, label in pool if label == 0.0]
    assert set(positives) == edges
    assert not set(negatives) & edges
    assert len(set(negatives)) == len(negatives)


def test_training_pool_deterministic(tri_dataset):
    g = tri_dataset.observed
    assert build_training_pool(g, seed=4) == build_training_pool(g, seed=4)
    assert build_training_pool(g, seed=4) != build_training_pool(g, seed=5)


def test_sample_context_pairs_invariants(tri_dataset):
    g = tri_dataset.observed
    edges = g.edge_set()
    query = tuple(g.edge_array()[0])
    for seed in range(5):
        pos, neg = sample_context_pairs(
            g, 10, 10, seed, exclude=query, forbidden=tri_dataset.full_edges
        )
        assert len(pos) == len(neg) == 10
        assert set(pos) <= edges
        assert query not in pos
        assert query not in neg
        assert not set(neg) & tri_dataset.full_edges
        assert len(set(pos)) == 10 and len(set(neg)) == 10


def test_sample_context_pairs_determinism(tri_dataset):
    g = tri_dataset.observed
    query = tuple(g.edge_array()[3])
    again = [sample_context_pairs(g, 6, 6, 9, exclude=query) for _ in range(2)]
    assert again[0] == again[1]
    other_seed = sample_context_pairs(g, 6, 6, 10, exclude=query)
    assert other_seed != again[0]


def test_sample_context_pairs_validation(tri_dataset):
    g = tri_dataset.observed
    with pytest.raises(ConfigError):
        sample_context_pairs(g, 0, 0, seed=0)
    with pytest.raises(DataError):
        sample_context_pairs(g, g.edge_count + 1, 1, seed=0)


def test_sample_context_set(tri_dataset):
    ctx = sample_context(tri_dataset, k=7, seed=2)
    assert len(ctx.positives) == len(ctx.negatives) == 7
    assert ctx.size == 14
    assert ctx.source == "target-graph"
    edges = tri_dataset.observed.edge_set()
    assert {s.pair for s in ctx.positives} <= edges
    assert not {s.pair for s in ctx.negatives} & tri_dataset.full_edges
    assert sample_context(tri_dataset, k=7, seed=2) == ctx
    assert sample_context(tri_dataset, k=7, seed=3) != ctx


def test_sample_context_rejects_oversized_request():
    ds = LinkDataset.whole_graph("path", path_graph(5))
    with pytest.raises(DataError):
        sample_context(ds, k=ds.observed.edge_count + 1, seed=0)


def test_eval_context_clips_to_graph_capacity():
    ds = LinkDataset.whole_graph("path", path_graph(4))
    ctx = eval_context_for(ds, SMALL_PLAIN, size=10, seed=0)
    assert len(ctx.positives) == 3
    assert len(ctx.negatives) == 3
    assert {s.pair for s in ctx.positives} == {(0, 1), (1, 2), (2, 3)}
    assert {s.pair for s in ctx.negatives} == {(0, 2), (0, 3), (1, 3)}


# ---------------------------------------------------------------------------
# datasets and configuration


def test_linkdataset_memoizes_subgraphs(tri_dataset):
    pair = tuple(tri_dataset.observed.edge_array()[0])
    first = tri_dataset.subgraph(pair, radius=1)
    assert tri_dataset.subgraph(pair, radius=1) is first
    assert tri_dataset.subgraph(pair, radius=2) is not first


def test_whole_graph_dataset():
    g = lattice("grid", 4, 4)
    ds = LinkDataset.whole_graph("grid", g)
    assert ds.observed is g
    assert ds.full_edges == g.edge_set()
    assert ds.split.valid_pos == () and ds.split.test_pos == ()


def test_train_config_validation():
    for bad in (
        dict(batch_size=0),
        dict(patience=0),
        dict(max_epochs=-1),
        dict(lr=0.0),
        dict(context_k=0),
        dict(eval_context_size=0),
        dict(per_graph_cap=0),
        dict(hits_k=0),
    ):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


def test_epoch_queries_round_robin():
    pools = (
        (((0, 1), 1.0), ((0, 2), 0.0), ((1, 2), 1.0)),
        (((5, 6), 1.0),),
    )
    queries = _epoch_queries(pools, cap=10, seed=0, epoch=1)
    assert len(queries) == 4
    assert sorted(q[0] for q in queries[:2]) == [0, 1]
    assert [q[0] for q in queries[2:]] == [0, 0]
    assert {(pair, label) for _, pair, label in queries} == {
        ((0, 1), 1.0), ((0, 2), 0.0), ((1, 2), 1.0), ((5, 6), 1.0),
    }
    capped = _epoch_queries(pools, cap=2, seed=0, epoch=1)
    assert len(capped) == 3
    assert _epoch_queries(pools, 10, 0, 1) == queries
    assert _epoch_queries(pools, 10, 0, 2) != queries


# ---------------------------------------------------------------------------
# pretraining


def test_pretrain_requires_datasets(tri_dataset):
    tc = TrainConfig(max_epochs=1)
    with pytest.raises(ConfigError):
        pretrain([], [tri_dataset], SMALL_PLAIN, tc)
    with pytest.raises(ConfigError):
        pretrain([tri_dataset], [], SMALL_PLAIN, tc)


def test_pretrain_rejects_validation_without_holdout():
    g = lattice("grid", 4, 4)
    train = LinkDataset.from_graph("grid", g, seed=0)
    whole = LinkDataset.whole_graph("whole", g)
    tc = TrainConfig(max_epochs=1, hits_k=2, eval_context_size=4, context_k=2)
    with pytest.raises(DataError):
        pretrain([train], [whole], SMALL_PLAIN, tc)


def test_pretrain_zero_epochs_returns_initial_params(tri_dataset):
    tc = TrainConfig(seed=3, max_epochs=0, hits_k=5, eval_context_size=8, context_k=4)
    params, record = pretrain([tri_dataset], [tri_dataset], SMALL_PLAIN, tc)
    init = init_params(SMALL_PLAIN, derive_seed_int(3, "init"))
    assert set(params) == set(init)
    for key in params:
        assert np.array_equal(params[key].values, init[key].values)
    assert record.epochs == [] and not record.diverged


def test_pretrain_is_deterministic_per_seed():
    def run(seed):
        ds = LinkDataset.from_graph("tri", lattice(rows=4, cols=4), seed=0)
        tc = TrainConfig(
            seed=seed, max_epochs=2, patience=2, batch_size=4, per_graph_cap=8,
            context_k=2, eval_context_size=3, hits_k=2,
        )
        return pretrain([ds], [ds], SMALL_ICL, tc)

    params_a, record_a = run(seed=0)
    params_b, record_b = run(seed=0)
    assert record_a.epochs == record_b.epochs
    for key in params_a:
        assert np.array_equal(params_a[key].values, params_b[key].values)
    params_c, _ = run(seed=1)
    assert any(
        not np.array_equal(params_a[key].values, params_c[key].values) for key in params_a
    )


def test_pretrain_early_stopping_tracks_best_epoch(tri_dataset):
    tc = TrainConfig(
        seed=0, lr=0.01, max_epochs=40, patience=2, batch_size=10,
        per_graph_cap=60, context_k=4, eval_context_size=8, hits_k=5,
    )
    params, record = pretrain([tri_dataset], [tri_dataset], SMALL_PLAIN, tc)
    metrics = [m for _, _, m in record.epochs]
    assert record.best_metric == max(metrics)
    assert record.best_epoch == metrics.index(max(metrics)) + 1
    assert record.stopped_epoch < tc.max_epochs
    assert record.stopped_epoch == record.best_epoch + tc.patience

    # the returned checkpoint is the one that achieved best_metric
    pos, neg = tri_dataset.split.valid_pos, tri_dataset.split.valid_neg
    scores = score_pairs(params, SMALL_PLAIN, tri_dataset, list(pos) + list(neg))
    k_eff = min(tc.hits_k, len(neg))
    assert hits_at_k(scores[: len(pos)], scores[len(pos):], k_eff) == record.best_metric


def test_pretrain_divergence_aborts_with_finite_params(tri_dataset):
    tc = TrainConfig(
        seed=0, optimizer="sgd", lr=1e100, max_epochs=5, patience=3,
        batch_size=10, per_graph_cap=20, context_k=4, eval_context_size=8, hits_k=5,
    )
    params, record = pretrain([tri_dataset], [tri_dataset], SMALL_PLAIN, tc)
    assert record.diverged
    assert record.stopped_epoch == 1
    assert record.epochs == []
    init = init_params(SMALL_PLAIN, derive_seed_int(0, "init"))
    for key in params:
        assert np.isfinite(params[key].values).all()
        assert np.array_equal(params[key].values, init[key].values)


def test_train_record_csv_round_trip(tmp_path):
    record = TrainRecord(epochs=[(1, 0.75, 0.25), (2, 0.5, 0.375)])
    out = tmp_path / "trace.csv"
    record.to_csv(out)
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "epoch,loss,val_metric"
    assert lines[1] == "1,0.75,0.25"
    assert lines[2] == "2,0.5,0.375"


# ---------------------------------------------------------------------------
# finetuning


def test_finetune_zero_steps_is_identity(tri_dataset):
    start = init_params(OVERFIT_CONFIG, seed=0)
    tuned, losses = finetune(start, tri_dataset, n_links=5, steps=0,
                             model_config=OVERFIT_CONFIG, train_config=TrainConfig())
    assert losses == []
    assert set(tuned) == set(start)
    for key in start:
        assert tuned[key] is not start[key]
        assert np.array_equal(tuned[key].values, start[key].values)


def test_finetune_does_not_mutate_input_params(tri_dataset):
    tc = TrainConfig(seed=0, lr=0.01, batch_size=10, context_k=4,
                     eval_context_size=8, hits_k=5)
    start = init_params(OVERFIT_CONFIG, seed=0)
    frozen = {key: start[key].values.copy() for key in start}
    tuned, losses = finetune(start, tri_dataset, n_links=5, steps=10,
                             model_config=OVERFIT_CONFIG, train_config=tc)
    assert len(losses) == 10
    for key in start:
        assert np.array_equal(start[key].values, frozen[key])
    assert any(not np.array_equal(tuned[key].values, frozen[key]) for key in start)


def test_finetune_deterministic_and_seed_override(tri_dataset):
    tc = TrainConfig(seed=0, lr=0.01, batch_size=10, context_k=4,
                     eval_context_size=8, hits_k=5)
    start = init_params(OVERFIT_CONFIG, seed=0)
    _, losses_a = finetune(start, tri_dataset, 5, 30, OVERFIT_CONFIG, tc)
    _, losses_b = finetune(start, tri_dataset, 5, 30, OVERFIT_CONFIG, tc)
    _, losses_c = finetune(start, tri_dataset, 5, 30, OVERFIT_CONFIG, tc, seed=7)
    assert losses_a == losses_b
    assert losses_a != losses_c


def test_finetune_overfits_small_pool(tri_dataset):
    tc = TrainConfig(seed=0, lr=0.01, batch_size=10, context_k=4,
                     eval_context_size=8, hits_k=5)
    start = init_params(OVERFIT_CONFIG, seed=0)
    _, losses = finetune(start, tri_dataset, 5, 200, OVERFIT_CONFIG, tc)
    assert losses[0] > 0.6
    assert losses[-1] < 0.05


def test_finetune_icl_loss_decreases(tri_dataset):
    # contexts are resampled at every step, so individual losses are noisy;
    # compare windows instead of endpoints
    config = replace(OVERFIT_CONFIG, mode=MODE_ICL)
    tc = TrainConfig(seed=0, lr=0.01, batch_size=10, context_k=8,
                     eval_context_size=8, hits_k=5)
    start = init_params(config, seed=0)
    _, losses = finetune(start, tri_dataset, 5, 200, config, tc)
    assert np.mean(losses[:30]) > 0.6
    assert np.mean(losses[-30:]) < 0.45


def test_finetune_validation(tri_dataset):
    start = init_params(SMALL_PLAIN, seed=0)
    tc = TrainConfig()
    with pytest.raises(ConfigError):
        finetune(start, tri_dataset, 0, 1, SMALL_PLAIN, tc)
    with pytest.raises(ConfigError):
        finetune(start, tri_dataset, 5, -1, SMALL_PLAIN, tc)
    with pytest.raises(DataError):
        finetune(start, tri_dataset, tri_dataset.observed.edge_count + 1, 1, SMALL_PLAIN, tc)


# ---------------------------------------------------------------------------
# transfer probe


def test_transfer_result_delta():
    assert TransferResult(seed=0, baseline_hits=0.25, augmented_hits=0.75).delta == 0.5


def test_transfer_probe_requires_no_context():
    with pytest.raises(ConfigError):
        transfer_probe(lattice("grid", 6, 6), path_graph(), SMALL_ICL, TrainConfig())


def test_transfer_probe_empty_extra_changes_nothing():
    target = lattice("grid", 6, 6)
    extra = Graph.from_edges(8, [])
    tc = TrainConfig(
        seed=1, batch_size=16, max_epochs=3, patience=3, per_graph_cap=40,
        context_k=4, eval_context_size=8, hits_k=5,
    )
    result = transfer_probe(target, extra, SMALL_PLAIN, tc, seed=5)
    assert result.seed == 5
    assert result.baseline_hits == result.augmented_hits
    assert result.delta == 0.0
