import itertools
import json
from fractions import Fraction

import numpy as np
import pytest

from unilp.errors import ConfigError, DataError, NumericError
from unilp.evaluation import (
    FLIP_LABEL,
    RANDOM_CONTEXT,
    EvalReport,
    PatternStats,
    context_size_sweep,
    evaluate_model,
    hits_at_k,
    pattern_stats,
    perturb_context,
    score_pairs,
    spearman,
    verify_connectivity_pattern,
)
from unilp.graphs import Graph, LatticeSpec, derive_seed_int, generate_lattice
from unilp.model import MODE_NO_CONTEXT, ModelConfig, init_params
from unilp.training import LinkDataset, build_context, sample_context, sample_context_pairs

SMALL_ICL = ModelConfig(
    hidden_dim=8, attention_dim=8, embed_dim=8,
    encoder_layers=1, mlp_layers=2, mlp_hidden=8,
)
SMALL_PLAIN = ModelConfig(
    hidden_dim=8, attention_dim=8, embed_dim=8,
    encoder_layers=1, mlp_layers=2, mlp_hidden=8, mode=MODE_NO_CONTEXT,
)


def lattice(kind, rows, cols, torus=True):
    return generate_lattice(LatticeSpec(kind=kind, rows=rows, cols=cols, torus=torus))


@pytest.fixture(scope="module")
def tri_dataset():
    return LinkDataset.from_graph("tri", lattice("triangular", 6, 6), seed=0)


# ---------------------------------------------------------------------------
# Hits@K


def test_hits_at_k_worked_example():
    pos = [0.9, 0.4, 0.8]
    neg = [0.7, 0.5, 0.3, 0.1]
    assert hits_at_k(pos, neg, 1) == pytest.approx(2 / 3)
    assert hits_at_k(pos, neg, 2) == pytest.approx(2 / 3)
    assert hits_at_k(pos, neg, 4) == 1.0
    # ties with the threshold never count: ranking must be strict
    assert hits_at_k([0.5], [0.5, 0.2], 1) == 0.0
    assert hits_at_k([0.5], [0.5, 0.2], 2) == 1.0


def test_hits_at_k_against_counting_oracle():
    # independent formulation: a positive is a hit iff fewer than k negatives
    # score at or above it
    rng = np.random.default_rng(7)
    for trial in range(1000):
        n_pos = int(rng.integers(1, 7))
        n_neg = int(rng.integers(1, 9))
        if trial % 2:
            pos = rng.integers(0, 5, size=n_pos) / 4.0  # force ties
            neg = rng.integers(0, 5, size=n_neg) / 4.0
        else:
            pos = rng.standard_normal(n_pos)
            neg = rng.standard_normal(n_neg)
        k = int(rng.integers(1, n_neg + 1))
        expected = float(np.mean([(neg >= p).sum() < k for p in pos]))
        assert hits_at_k(pos, neg, k) == expected


def test_hits_at_k_invariant_under_monotone_transforms():
    rng = np.random.default_rng(11)
    for _ in range(200):
        pos = rng.standard_normal(int(rng.integers(1, 6)))
        neg = rng.standard_normal(int(rng.integers(2, 8)))
        k = int(rng.integers(1, neg.size + 1))
        base = hits_at_k(pos, neg, k)
        for f in (lambda a: 3.0 * a + 1.0, np.exp, np.tanh):
            assert hits_at_k(f(pos), f(neg), k) == base


def test_hits_at_k_validation():
    with pytest.raises(ConfigError):
        hits_at_k([], [0.1], 1)
    with pytest.raises(ConfigError):
        hits_at_k([0.5], [0.1, 0.2], 0)
    with pytest.raises(ConfigError):
        hits_at_k([0.5], [0.1, 0.2], 3)
    with pytest.raises(NumericError):
        hits_at_k([float("nan")], [0.1], 1)
    with pytest.raises(NumericError):
        hits_at_k([0.5], [float("inf")], 1)


# ---------------------------------------------------------------------------
# connectivity-pattern verification


def test_pattern_triangle():
    g = Graph.from_edges(3, [(0, 1), (0, 2), (1, 2)])
    result = verify_connectivity_pattern(g)
    assert result[2] == Fraction(1, 1)
    assert result[3] is None  # a 3-edge simple path needs four distinct nodes


def test_pattern_four_cycle():
    g = Graph.from_edges(4, [(0, 1), (1, 2), (2, 3), (0, 3)])
    result = verify_connectivity_pattern(g)
    assert result[2] == Fraction(0, 1)  # only the two unlinked diagonals are A2
    assert result[3] == Fraction(1, 1)  # only the four edges are A3
    overridden = verify_connectivity_pattern(g, link_set={(0, 2)})
    assert overridden[2] == Fraction(1, 2)
    assert overridden[3] == Fraction(0, 1)


def test_pattern_grid_torus_exact():
    stats = pattern_stats(lattice("grid", 8, 8))
    assert stats.p_two == Fraction(0, 1)
    assert stats.p_three == Fraction(1, 4)
    assert stats.n_two == 256
    assert stats.n_three == 512
    assert stats.n_pairs == 64 * 63 // 2


def test_pattern_triangular_torus_exact():
    stats = pattern_stats(lattice("triangular", 8, 8))
    assert stats.p_two == Fraction(1, 3)
    assert stats.p_three == Fraction(1, 6)
    assert stats.n_two == 576
    assert stats.n_three == 1152


def test_pattern_constants_stable_across_torus_sizes():
    for rows, cols in ((7, 7), (9, 9), (7, 9)):
        result = verify_connectivity_pattern(lattice("grid", rows, cols))
        assert result[2] == Fraction(0, 1)
        assert result[3] == Fraction(1, 4)
    # below 7 per side the wrap-around shortcuts distort the rates
    small = verify_connectivity_pattern(lattice("grid", 6, 6))
    assert small[3] != Fraction(1, 4)


def test_pattern_anchors_match_full_enumeration_on_transitive_graph():
    g = lattice("grid", 8, 8)
    anchored = verify_connectivity_pattern(g, anchors=[0])
    assert anchored[2] == Fraction(0, 1)
    assert anchored[3] == Fraction(1, 4)
    with pytest.raises(ConfigError):
        verify_connectivity_pattern(g, anchors=[64])
    with pytest.raises(ConfigError):
        verify_connectivity_pattern(g, lengths=(1,))


def test_pattern_enumeration_guard():
    g = Graph.from_edges(400, [(0, 1)])
    with pytest.raises(DataError):
        verify_connectivity_pattern(g)
    assert verify_connectivity_pattern(g, anchors=[0])[2] is None


def test_pattern_stats_json(tmp_path):
    stats = pattern_stats(lattice("grid", 8, 8))
    doc = stats.to_json_dict()
    assert doc == {
        "p_A2": [0, 1],
        "p_A3": [1, 4],
        "counts": {"A2": 256, "A3": 512, "pairs": 2016},
    }
    out = tmp_path / "pattern.json"
    stats.save(out)
    assert json.loads(out.read_text()) == doc
    empty = PatternStats()
    assert empty.to_json_dict()["p_A2"] is None


# ---------------------------------------------------------------------------
# context perturbations


def test_flip_label_is_an_involution(tri_dataset):
    ctx = sample_context(tri_dataset, k=3, seed=0)
    flipped = perturb_context(ctx, FLIP_LABEL)
    assert flipped.positives == ctx.negatives
    assert flipped.negatives == ctx.positives
    assert flipped.source == "flipped:target-graph"
    assert perturb_context(flipped, FLIP_LABEL) == ctx


def test_random_context_preserves_shape(tri_dataset):
    ctx = sample_context(tri_dataset, k=3, seed=0, radius=1)
    randomized = perturb_context(ctx, RANDOM_CONTEXT, seed=4)
    assert len(randomized.positives) == 3
    assert len(randomized.negatives) == 3
    assert randomized.source == "random-graph"
    assert all(s.radius == 1 for s in randomized.positives + randomized.negatives)
    assert perturb_context(ctx, RANDOM_CONTEXT, seed=4) == randomized
    assert perturb_context(ctx, RANDOM_CONTEXT, seed=5) != randomized


def test_perturb_unknown_kind(tri_dataset):
    ctx = sample_context(tri_dataset, k=2, seed=0)
    with pytest.raises(ConfigError):
        perturb_context(ctx, "dropout")


# ---------------------------------------------------------------------------
# scoring


def test_score_pairs_parallel_matches_serial(tri_dataset):
    params = init_params(SMALL_ICL, seed=0)
    ctx = sample_context(tri_dataset, k=4, seed=1)
    pairs = list(itertools.combinations(range(12), 2))  # 66 pairs -> two chunks
    serial = score_pairs(params, SMALL_ICL, tri_dataset, pairs, ctx, jobs=1)
    parallel = score_pairs(params, SMALL_ICL, tri_dataset, pairs, ctx, jobs=2)
    assert np.array_equal(serial, parallel)
    assert np.isfinite(serial).all()
    assert ((serial > 0) & (serial < 1)).all()


def test_score_pairs_canonicalizes_and_validates(tri_dataset):
    params = init_params(SMALL_PLAIN, seed=0)
    fwd = score_pairs(params, SMALL_PLAIN, tri_dataset, [(0, 1), (2, 5)])
    rev = score_pairs(params, SMALL_PLAIN, tri_dataset, [(1, 0), (5, 2)])
    assert np.array_equal(fwd, rev)
    assert score_pairs(params, SMALL_PLAIN, tri_dataset, []).shape == (0,)
    with pytest.raises(ConfigError):
        score_pairs(params, SMALL_PLAIN, tri_dataset, [(0, 1)], jobs=0)
    icl_params = init_params(SMALL_ICL, seed=0)
    with pytest.raises(ConfigError):
        score_pairs(icl_params, SMALL_ICL, tri_dataset, [(0, 1)], context=None)


def test_score_pairs_no_context_ignores_context(tri_dataset):
    params = init_params(SMALL_PLAIN, seed=0)
    ctx = sample_context(tri_dataset, k=3, seed=2)
    with_ctx = score_pairs(params, SMALL_PLAIN, tri_dataset, [(0, 1), (0, 7)], ctx)
    without = score_pairs(params, SMALL_PLAIN, tri_dataset, [(0, 1), (0, 7)])
    assert np.array_equal(with_ctx, without)


# ---------------------------------------------------------------------------
# reports


def test_eval_report_accumulates_and_summarizes():
    report = EvalReport(experiment="demo")
    report.add("g", "icl", 10, 0.5, None, 0, 0, "hits@5", 0.5)
    report.add("g", "icl", 10, 0.5, None, 1, 1, "hits@5", 0.75)
    report.add("g", "icl", 10, 0.5, FLIP_LABEL, 0, 0, "auc", 0.9)
    assert report.values("hits@5") == [0.5, 0.75]
    summary = report.summary()
    assert summary["hits@5"]["mean"] == pytest.approx(0.625)
    assert summary["hits@5"]["std"] == pytest.approx(np.std([0.5, 0.75], ddof=1))
    assert summary["hits@5"]["n"] == 2
    assert summary["auc"] == {"mean": 0.9, "std": 0.0, "n": 1}


def test_eval_report_files(tmp_path):
    report = EvalReport(experiment="demo", config={"hits_k": 5})
    report.add("g", "icl", 10, 0.5, None, 0, 0, "hits@5", 0.5)
    report.add("g", "icl", 10, 0.5, FLIP_LABEL, 3, 1, "hits@5", 0.25)
    text = report.to_csv_text()
    lines = text.strip().splitlines()
    assert lines[0] == "experiment,dataset,mode,context_size,ratio,perturb,seed,run,metric,value"
    assert lines[1] == "demo,g,icl,10,0.5,,0,0,hits@5,0.5"
    assert lines[2] == "demo,g,icl,10,0.5,flip_label,3,1,hits@5,0.25"
    csv_path = tmp_path / "report.csv"
    json_path = tmp_path / "report.json"
    report.save_csv(csv_path)
    report.save_json(json_path)
    assert csv_path.read_text() == text
    doc = json.loads(json_path.read_text())
    assert doc["experiment"] == "demo"
    assert doc["config"] == {"hits_k": 5}
    assert doc["summary"]["hits@5"]["n"] == 2
    assert doc["rows"][1]["perturb"] == "flip_label"


# ---------------------------------------------------------------------------
# evaluate_model


def test_evaluate_model_no_context(tri_dataset):
    params = init_params(SMALL_PLAIN, seed=0)
    k_eff = min(50, len(tri_dataset.split.test_neg))
    report = evaluate_model(params, SMALL_PLAIN, tri_dataset, context_size=10, seeds=(0, 1))
    assert len(report.rows) == 2
    assert {r["metric"] for r in report.rows} == {f"hits@{k_eff}"}
    assert [r["run"] for r in report.rows] == [0, 1]
    assert [r["seed"] for r in report.rows] == [0, 1]
    assert report.rows[0]["mode"] == MODE_NO_CONTEXT
    assert report.rows[0]["perturb"] == ""
    # no-context scoring is context-free, so both runs agree exactly
    assert report.rows[0]["value"] == report.rows[1]["value"]
    again = evaluate_model(params, SMALL_PLAIN, tri_dataset, context_size=10, seeds=(0, 1))
    assert again.rows == report.rows


def test_evaluate_model_icl_and_perturbations(tri_dataset):
    params = init_params(SMALL_ICL, seed=0)
    base = evaluate_model(params, SMALL_ICL, tri_dataset, context_size=6, seeds=(0,), hits_k=5)
    assert base.rows[0]["metric"] == "hits@5"
    assert base.rows == evaluate_model(
        params, SMALL_ICL, tri_dataset, context_size=6, seeds=(0,), hits_k=5
    ).rows
    flipped = evaluate_model(
        params, SMALL_ICL, tri_dataset, context_size=6, seeds=(0,), hits_k=5,
        perturb=FLIP_LABEL,
    )
    assert flipped.rows[0]["perturb"] == FLIP_LABEL
    assert flipped.config["perturb"] == FLIP_LABEL
    for ratio in (0.0, 1.0):
        one_sided = evaluate_model(
            params, SMALL_ICL, tri_dataset, context_size=4, ratio=ratio, seeds=(0,), hits_k=5,
        )
        assert len(one_sided.rows) == 1


def test_evaluate_model_validation(tri_dataset):
    params = init_params(SMALL_PLAIN, seed=0)
    with pytest.raises(ConfigError):
        evaluate_model(params, SMALL_PLAIN, tri_dataset, context_size=10, ratio=1.5)
    with pytest.raises(ConfigError):
        evaluate_model(params, SMALL_PLAIN, tri_dataset, context_size=0)
    whole = LinkDataset.whole_graph("whole", tri_dataset.observed)
    with pytest.raises(DataError):
        evaluate_model(params, SMALL_PLAIN, whole, context_size=10)


# ---------------------------------------------------------------------------
# Spearman and the context-size sweep


def test_spearman_frozen_cases():
    assert spearman([1, 2, 3, 4], [10, 20, 30, 40]) == 1.0
    assert spearman([1, 2, 3, 4], [40, 30, 20, 10]) == -1.0
    assert spearman([1, 2, 2, 3], [10, 20, 20, 40]) == 1.0  # tied ranks average
    assert spearman([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8)
    assert spearman([1, 1, 1], [1, 2, 3]) == 0.0
    with pytest.raises(ConfigError):
        spearman([1, 2], [1, 2, 3])
    with pytest.raises(ConfigError):
        spearman([1], [1])


def test_context_size_sweep(tri_dataset):
    params = init_params(SMALL_ICL, seed=0)
    report = context_size_sweep(
        params, SMALL_ICL, tri_dataset, sizes=(2, 4, 8), seeds=(0, 1), hits_k=5
    )
    assert len(report.rows) == 6
    assert [r["context_size"] for r in report.rows] == [2, 4, 8, 2, 4, 8]
    trends = report.config["trend_spearman"]
    assert len(trends) == 2
    assert all(-1.0 <= t <= 1.0 for t in trends)

    # nested contexts: each size reuses a prefix of the seed's maximal draw
    pos, neg = list(tri_dataset.split.test_pos), list(tri_dataset.split.test_neg)
    full_pos, full_neg = sample_context_pairs(
        tri_dataset.observed, 4, 4, derive_seed_int(0, "sweep-ctx", "tri"),
        forbidden=tri_dataset.full_edges,
    )
    ctx = build_context(tri_dataset, full_pos[:1], full_neg[:1], SMALL_ICL.radius)
    scores = score_pairs(params, SMALL_ICL, tri_dataset, pos + neg, ctx)
    expected = hits_at_k(scores[: len(pos)], scores[len(pos):], 5)
    assert report.rows[0]["value"] == expected


def test_context_size_sweep_validation(tri_dataset):
    icl_params = init_params(SMALL_ICL, seed=0)
    plain_params = init_params(SMALL_PLAIN, seed=0)
    with pytest.raises(ConfigError):
        context_size_sweep(plain_params, SMALL_PLAIN, tri_dataset, sizes=(2, 4))
    with pytest.raises(ConfigError):
        context_size_sweep(icl_params, SMALL_ICL, tri_dataset, sizes=())
    with pytest.raises(ConfigError):
        context_size_sweep(icl_params, SMALL_ICL, tri_dataset, sizes=(0, 2))
