"""Classical link-prediction scores.

All scores are computed on a scoring view of the graph: if the queried pair
is itself an edge, that edge is removed first. This keeps scores for known
links comparable with scores for candidate links instead of letting the
answer leak into its own evidence.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError
from .graphs import Graph, canonical_pair, shortest_path

KINDS = ("cn", "aa", "ra", "pa", "sp", "katz")


@dataclass(frozen=True)
class Heuristic:
    """A heuristic kind plus the parameters Katz needs.

    katz_beta is the per-edge damping; katz_len the walk-length cutoff.
    Truncation keeps the score finite for any beta, but beta below
    1/(max_degree + 1) is the regime where the untruncated series is a
    sensible reference; larger values trigger a warning.
    """

    kind: str
    katz_beta: float = 0.005
    katz_len: int = 5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown heuristic {self.kind!r}; choose from {KINDS}")
        if self.katz_beta <= 0:
            raise ConfigError("katz_beta must be positive")
        if self.katz_len < 1:
            raise ConfigError("katz_len must be >= 1")


def _common_neighbors(view: Graph, u: int, v: int) -> np.ndarray:
    return np.intersect1d(view.neighbors(u), view.neighbors(v), assume_unique=True)


def _katz(view: Graph, u: int, v: int, beta: float, length: int) -> float:
    # walk counts by repeated frontier push: x_k = A x_{k-1}, x_0 = e_u
    n = view.n
    rows = np.repeat(np.arange(n, dtype=np.int64), np.diff(view.indptr))
    x = np.zeros(n)
    x[u] = 1.0
    score = 0.0
    for step in range(1, length + 1):
        x = np.bincount(view.indices, weights=x[rows], minlength=n)
        score += beta**step * x[v]
    return float(score)


def score(h: Heuristic, g: Graph, pair) -> float:
    """Score one candidate pair with heuristic h on the scoring view of g."""
    u, v = canonical_pair(*pair)
    if v >= g.n:
        raise ConfigError(f"pair {pair} out of range for graph with n={g.n}")
    view = g.without_edge(u, v)
    if h.kind == "cn":
        return float(len(_common_neighbors(view, u, v)))
    if h.kind == "aa":
        total = 0.0
        for w in _common_neighbors(view, u, v):
            d = view.degree(int(w))
            if d < 2:
                raise NumericError(f"common neighbor {w} has degree {d} < 2")
            total += 1.0 / math.log(d)
        return total
    if h.kind == "ra":
        return float(sum(1.0 / view.degree(int(w)) for w in _common_neighbors(view, u, v)))
    if h.kind == "pa":
        return float(view.degree(u) * view.degree(v))
    if h.kind == "sp":
        d = shortest_path(view, u, v)
        return -math.inf if math.isinf(d) else -float(d)
    # katz
    max_deg = int(np.diff(view.indptr).max()) if view.n else 0
    if h.katz_beta >= 1.0 / (max_deg + 1):
        warnings.warn(
            f"katz_beta={h.katz_beta} >= 1/(max_degree+1)={1.0 / (max_deg + 1):.4g}; "
            "truncated score is finite but far from the series limit",
            stacklevel=2,
        )
    return _katz(view, u, v, h.katz_beta, h.katz_len)


def score_batch(h: Heuristic, g: Graph, pairs) -> np.ndarray:
    """Vector of scores in the order of pairs."""
    return np.array([score(h, g, p) for p in pairs], dtype=np.float64)
