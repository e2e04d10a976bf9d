"""Evaluation: ranking metrics, context perturbations, report files, and an
exact combinatorial check of what "connectivity pattern" a graph rewards.

The pattern verifier answers, with rational arithmetic: among node pairs
whose endpoints are connected by a simple path of exactly 2 (resp. 3) edges
after removing any edge between them, what fraction are themselves linked?
Regular lattices give clean constants here, which makes them useful probes
for whether a context-conditioned scorer actually reads its context.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ConfigError, DataError, NumericError
from .graphs import (
    PAIR_ENUMERATION_GUARD,
    Graph,
    canonical_pair,
    count_simple_paths,
    derive_seed_int,
    generate_sbm,
    write_json_atomic,
    write_text_atomic,
)
from .model import (
    MODE_NO_CONTEXT,
    ContextSet,
    ModelConfig,
    attention_scores,
    contextualize,
    encode_subgraphs,
    predict,
)
from .autodiff import Tape, const

#: Pairs scored per chunk; fixed so parallel and serial runs agree bit-for-bit.
SCORE_CHUNK = 64

FLIP_LABEL = "flip_label"
RANDOM_CONTEXT = "random_context"
PERTURB_KINDS = (FLIP_LABEL, RANDOM_CONTEXT)


# ---------------------------------------------------------------------------
# ranking metric


def hits_at_k(pos_scores, neg_scores, k: int) -> float:
    """Fraction of positives scoring strictly above the k-th best negative."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if pos.size == 0:
        raise ConfigError("hits_at_k needs at least one positive score")
    if k < 1 or k > neg.size:
        raise ConfigError(f"k={k} out of range for {neg.size} negatives")
    if not (np.isfinite(pos).all() and np.isfinite(neg).all()):
        raise NumericError("hits_at_k received non-finite scores")
    threshold = np.sort(neg)[-k]
    return float(np.mean(pos > threshold))


# ---------------------------------------------------------------------------
# connectivity-pattern verification


@dataclass(frozen=True)
class PatternStats:
    """Exact link rates conditioned on 2-edge / 3-edge simple-path reachability."""

    p_two: Fraction = None
    p_three: Fraction = None
    n_two: int = 0
    n_three: int = 0
    n_pairs: int = 0

    def to_json_dict(self) -> dict:
        def enc(f):
            return None if f is None else [f.numerator, f.denominator]

        return {
            "p_A2": enc(self.p_two),
            "p_A3": enc(self.p_three),
            "counts": {"A2": self.n_two, "A3": self.n_three, "pairs": self.n_pairs},
        }

    def save(self, path):
        write_json_atomic(path, self.to_json_dict())


def _enumerate_pattern(g: Graph, lengths, link_set, anchors):
    for length in lengths:
        if length < 2:
            raise ConfigError(f"pattern lengths must be >= 2, got {length}")
    if link_set is None:
        link_set = g.edge_set()
    first = range(g.n) if anchors is None else sorted(set(anchors))
    for a in first:
        if not 0 <= a < g.n:
            raise ConfigError(f"anchor {a} out of range for {g.n} nodes")
    bound = sum((g.n - 1 - a) if anchors is None else g.n - 1 for a in first)
    if bound > PAIR_ENUMERATION_GUARD:
        raise DataError(
            f"up to {bound} candidate pairs exceeds the enumeration guard "
            f"({PAIR_ENUMERATION_GUARD}); restrict anchors"
        )
    hits = {length: 0 for length in lengths}
    totals = {length: 0 for length in lengths}
    seen = set()
    for u in first:
        others = range(u + 1, g.n) if anchors is None else range(g.n)
        for v in others:
            if v == u:
                continue
            pair = canonical_pair(u, v)
            if pair in seen:
                continue
            seen.add(pair)
            view = g.without_edge(*pair) if g.has_edge(*pair) else g
            linked = pair in link_set
            for length in lengths:
                if count_simple_paths(view, pair[0], pair[1], length) > 0:
                    totals[length] += 1
                    hits[length] += linked
    return hits, totals, len(seen)


def verify_connectivity_pattern(g: Graph, lengths=(2, 3), link_set=None, anchors=None) -> dict:
    """Exact conditional link probabilities per path length.

    For each unordered pair (with the pair's own edge, if any, removed) and
    each requested length, test whether a simple path of exactly that many
    edges connects the endpoints; return Fraction(linked pairs, such pairs).
    `anchors` restricts the first endpoint; `link_set` overrides which pairs
    count as linked (defaults to the graph's own edges).
    """
    hits, totals, _ = _enumerate_pattern(g, lengths, link_set, anchors)
    return {
        length: Fraction(hits[length], totals[length]) if totals[length] else None
        for length in lengths
    }


def pattern_stats(g: Graph, link_set=None, anchors=None) -> PatternStats:
    hits, totals, n_pairs = _enumerate_pattern(g, (2, 3), link_set, anchors)
    return PatternStats(
        p_two=Fraction(hits[2], totals[2]) if totals[2] else None,
        p_three=Fraction(hits[3], totals[3]) if totals[3] else None,
        n_two=totals[2], n_three=totals[3], n_pairs=n_pairs,
    )


# ---------------------------------------------------------------------------
# context perturbations


def perturb_context(context: ContextSet, kind: str, seed: int = 0, sbm_spec=None) -> ContextSet:
    """Return a corrupted copy of the context.

    flip_label swaps which side each example sits on (applying it twice
    restores the original); random_context rebuilds a context of the same
    shape from a freshly generated unrelated graph.
    """
    if kind == FLIP_LABEL:
        flipped = "flipped:"
        source = (
            context.source[len(flipped):]
            if context.source.startswith(flipped)
            else flipped + context.source
        )
        return ContextSet(positives=context.negatives, negatives=context.positives, source=source)
    if kind == RANDOM_CONTEXT:
        from .graphs import SbmSpec
        from .training import LinkDataset, sample_context_pairs, build_context

        if sbm_spec is None:
            sbm_spec = SbmSpec(block_sizes=(60, 60), p_in=0.1, p_out=0.02)
        g = generate_sbm(sbm_spec, derive_seed_int(seed, "random-ctx-graph"))
        ds = LinkDataset.whole_graph("random-context", g)
        n_pos = len(context.positives)
        n_neg = len(context.negatives)
        radius = context.positives[0].radius if context.positives else context.negatives[0].radius
        pos_pairs, neg_pairs = sample_context_pairs(
            g, n_pos, n_neg, derive_seed_int(seed, "random-ctx-pairs"),
            forbidden=ds.full_edges,
        )
        return build_context(ds, pos_pairs, neg_pairs, radius, source="random-graph")
    raise ConfigError(f"unknown perturbation {kind!r}; expected one of {PERTURB_KINDS}")


# ---------------------------------------------------------------------------
# scoring


def _encode_context_values(params, config, context):
    """Context embeddings as a plain array (encoded once per evaluation)."""
    if config.mode == MODE_NO_CONTEXT:
        return None, 0
    if context is None or context.size == 0:
        raise ConfigError("in-context scoring needs a non-empty context")
    tape = Tape()
    subs = list(context.positives) + list(context.negatives)
    h = encode_subgraphs(params, config, subs, tape)
    return h.values.copy(), len(context.positives)


def _score_chunk(params, config, dataset, pairs, ctx_values, n_ctx_pos):
    tape = Tape()
    subs = [dataset.subgraph(p, config.radius) for p in pairs]
    h_all = encode_subgraphs(params, config, subs, tape)
    h_ctx = None if ctx_values is None else const(ctx_values)
    scores = []
    for i in range(len(pairs)):
        h_q = tape.reshape(tape.take_rows(h_all, [i]), (config.hidden_dim,))
        if h_ctx is None:
            h_tilde = tape.matmul(h_q, params["attn.value"])
        else:
            alphas = attention_scores(params, config, h_q, h_ctx, tape)
            h_tilde = contextualize(params, config, alphas, h_ctx, n_ctx_pos, tape)
        scores.append(predict(params, config, h_tilde, tape).item())
    return scores


_WORKER_STATE = {}


def _worker_init(param_values, config_dict, split_dict, name, ctx_values, n_ctx_pos):
    from .graphs import DataSplit
    from .training import LinkDataset

    _WORKER_STATE["params"] = {k: const(v) for k, v in param_values.items()}
    _WORKER_STATE["config"] = ModelConfig.from_dict(config_dict)
    _WORKER_STATE["dataset"] = LinkDataset(name=name, split=DataSplit.from_json_dict(split_dict))
    _WORKER_STATE["ctx"] = (ctx_values, n_ctx_pos)


def _worker_score(pairs):
    ctx_values, n_ctx_pos = _WORKER_STATE["ctx"]
    return _score_chunk(
        _WORKER_STATE["params"], _WORKER_STATE["config"], _WORKER_STATE["dataset"],
        pairs, ctx_values, n_ctx_pos,
    )


def score_pairs(params, config: ModelConfig, dataset, pairs, context=None, jobs: int = 1):
    """Probability per query pair, in order.

    The context is embedded once; queries are scored in fixed-size chunks so
    the result is bit-identical whatever `jobs` is.
    """
    if jobs < 1:
        raise ConfigError("jobs must be >= 1")
    pairs = [canonical_pair(*p) for p in pairs]
    if not pairs:
        return np.zeros(0, dtype=np.float64)
    ctx_values, n_ctx_pos = _encode_context_values(params, config, context)
    chunks = [pairs[lo : lo + SCORE_CHUNK] for lo in range(0, len(pairs), SCORE_CHUNK)]
    if jobs == 1 or len(chunks) <= 1:
        out = []
        for chunk in chunks:
            out.extend(_score_chunk(params, config, dataset, chunk, ctx_values, n_ctx_pos))
        return np.array(out, dtype=np.float64)
    with ProcessPoolExecutor(
        max_workers=min(jobs, len(chunks)),
        initializer=_worker_init,
        initargs=(
            {k: t.values for k, t in params.items()},
            config.to_dict(), dataset.split.to_json_dict(), dataset.name,
            ctx_values, n_ctx_pos,
        ),
    ) as pool:
        out = [s for chunk_scores in pool.map(_worker_score, chunks) for s in chunk_scores]
    return np.array(out, dtype=np.float64)


# ---------------------------------------------------------------------------
# experiment reports


REPORT_COLUMNS = (
    "experiment", "dataset", "mode", "context_size", "ratio",
    "perturb", "seed", "run", "metric", "value",
)


@dataclass
class EvalReport:
    """Accumulates rows in the shared report schema; one row per measurement."""

    experiment: str
    config: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)

    def add(self, dataset: str, mode: str, context_size: int, ratio: float,
            perturb, seed: int, run: int, metric: str, value: float):
        self.rows.append({
            "experiment": self.experiment, "dataset": dataset, "mode": mode,
            "context_size": context_size, "ratio": ratio,
            "perturb": "" if perturb is None else perturb,
            "seed": seed, "run": run, "metric": metric, "value": value,
        })

    def values(self, metric: str):
        return [r["value"] for r in self.rows if r["metric"] == metric]

    def summary(self) -> dict:
        out = {}
        for metric in sorted({r["metric"] for r in self.rows}):
            vals = np.array(self.values(metric), dtype=np.float64)
            out[metric] = {
                "mean": float(vals.mean()),
                "std": float(vals.std(ddof=1)) if vals.size > 1 else 0.0,
                "n": int(vals.size),
            }
        return out

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.rows)
        return buf.getvalue()

    def save_csv(self, path):
        write_text_atomic(path, self.to_csv_text())

    def save_json(self, path):
        write_json_atomic(path, {
            "experiment": self.experiment,
            "config": self.config,
            "summary": self.summary(),
            "rows": self.rows,
        })


def evaluate_model(params, config: ModelConfig, dataset, context_size: int,
                   ratio: float = 0.5, seeds=(0,), perturb=None, sbm_spec=None,
                   hits_k: int = 50, jobs: int = 1, experiment: str = "eval") -> EvalReport:
    """Score the dataset's test slice under fresh contexts, one run per seed.

    `context_size` is the total number of context links; `ratio` is the
    positive share (n_pos = round(size * ratio)). In no-context mode those
    knobs are recorded but unused.
    """
    from .training import build_context, sample_context_pairs

    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"ratio must lie in [0, 1], got {ratio}")
    if context_size < 1:
        raise ConfigError("context_size must be >= 1")
    pos, neg = list(dataset.split.test_pos), list(dataset.split.test_neg)
    if not pos or not neg:
        raise DataError(f"dataset {dataset.name!r} has an empty test slice")
    report = EvalReport(experiment=experiment, config={
        "model": config.to_dict(), "context_size": context_size, "ratio": ratio,
        "perturb": perturb, "seeds": list(seeds), "hits_k": hits_k,
        "dataset": dataset.name,
    })
    k_eff = min(hits_k, len(neg))
    n_pos = int(round(context_size * ratio))
    n_neg = context_size - n_pos
    for run, seed in enumerate(seeds):
        context = None
        if config.mode != MODE_NO_CONTEXT:
            pos_pairs, neg_pairs = sample_context_pairs(
                dataset.observed, n_pos, n_neg,
                derive_seed_int(seed, "eval-ctx", dataset.name),
                forbidden=dataset.full_edges,
            )
            context = build_context(dataset, pos_pairs, neg_pairs, config.radius)
            if perturb is not None:
                context = perturb_context(
                    context, perturb, derive_seed_int(seed, "eval-perturb"), sbm_spec
                )
        scores = score_pairs(params, config, dataset, pos + neg, context, jobs=jobs)
        value = hits_at_k(scores[: len(pos)], scores[len(pos):], k_eff)
        report.add(dataset.name, config.mode, context_size, ratio, perturb,
                   seed, run, f"hits@{k_eff}", value)
    return report


# ---------------------------------------------------------------------------
# context-size sweep


def spearman(xs, ys) -> float:
    """Spearman rank correlation with average ranks for ties; 0 when either
    input is constant."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ConfigError("spearman expects two equal-length 1-D sequences")
    if xs.size < 2:
        raise ConfigError("spearman needs at least two points")

    def ranks(a):
        order = np.argsort(a, kind="stable")
        r = np.empty(a.size, dtype=np.float64)
        sorted_a = a[order]
        i = 0
        while i < a.size:
            j = i
            while j + 1 < a.size and sorted_a[j + 1] == sorted_a[i]:
                j += 1
            r[order[i : j + 1]] = (i + j) / 2.0 + 1.0
            i = j + 1
        return r

    rx, ry = ranks(xs), ranks(ys)
    if np.all(rx == rx[0]) or np.all(ry == ry[0]):
        return 0.0
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    return float((rx * ry).sum() / np.sqrt((rx * rx).sum() * (ry * ry).sum()))


def context_size_sweep(params, config: ModelConfig, dataset, sizes, ratio: float = 0.5,
                       seeds=(0,), hits_k: int = 50, jobs: int = 1) -> EvalReport:
    """Hits@K as a function of context size, on nested contexts.

    For each seed one maximal context is sampled; smaller sizes reuse its
    prefixes, so along the sweep the only thing changing is how much of the
    same evidence the model sees. The report's summary gains a Spearman
    trend statistic per seed.
    """
    if config.mode == MODE_NO_CONTEXT:
        raise ConfigError("context_size_sweep requires a context-conditioned mode")
    from .training import build_context, sample_context_pairs

    sizes = sorted(set(int(s) for s in sizes))
    if not sizes or sizes[0] < 1:
        raise ConfigError("sizes must be positive integers")
    pos, neg = list(dataset.split.test_pos), list(dataset.split.test_neg)
    if not pos or not neg:
        raise DataError(f"dataset {dataset.name!r} has an empty test slice")
    cap_pos = dataset.observed.edge_count
    cap_neg = dataset.observed.n * (dataset.observed.n - 1) // 2 - len(dataset.full_edges)
    report = EvalReport(experiment="context-size-sweep", config={
        "model": config.to_dict(), "sizes": sizes, "ratio": ratio,
        "seeds": list(seeds), "hits_k": hits_k, "dataset": dataset.name,
    })
    k_eff = min(hits_k, len(neg))
    trends = []
    for run, seed in enumerate(seeds):
        max_size = sizes[-1]
        want_pos = int(round(max_size * ratio))
        want_neg = max_size - want_pos
        full_pos, full_neg = sample_context_pairs(
            dataset.observed, min(want_pos, cap_pos), min(want_neg, cap_neg),
            derive_seed_int(seed, "sweep-ctx", dataset.name),
            forbidden=dataset.full_edges,
        )
        values = []
        used_sizes = []
        for size in sizes:
            n_pos = min(int(round(size * ratio)), len(full_pos))
            n_neg = min(size - int(round(size * ratio)), len(full_neg))
            if n_pos + n_neg == 0:
                continue
            context = build_context(
                dataset, full_pos[:n_pos], full_neg[:n_neg], config.radius
            )
            scores = score_pairs(params, config, dataset, pos + neg, context, jobs=jobs)
            value = hits_at_k(scores[: len(pos)], scores[len(pos):], k_eff)
            report.add(dataset.name, config.mode, size, ratio, None, seed, run,
                       f"hits@{k_eff}", value)
            values.append(value)
            used_sizes.append(size)
        if len(values) >= 2:
            trends.append(spearman(used_sizes, values))
    report.config["trend_spearman"] = trends
    return report
