"""Graph substrate: immutable undirected graphs, generators, paths, splits.

Graphs are simple (no self-loops, no multi-edges) over dense 0-based node
ids, stored in compressed row form with each neighbor list sorted. All other
modules treat `Graph` as read-only; "removing" an edge produces a new view
via `Graph.without_edge`.
"""

from __future__ import annotations

import json
import logging
import math
import os
import tempfile
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .rng import derive_rng

log = logging.getLogger(__name__)

#: Distance sentinel for node pairs with no connecting path.
UNREACHABLE = math.inf

#: Maximum path length accepted by count_simple_paths; the enumeration is
#: exponential in this bound, so it stays small by contract.
MAX_SIMPLE_PATH_LEN = 6

#: Above this many candidate pairs, exhaustive pair enumeration is refused
#: (see evaluation.verify_connectivity_pattern).
PAIR_ENUMERATION_GUARD = 50_000


def canonical_pair(u: int, v: int) -> tuple[int, int]:
    """Return the pair ordered (min, max); rejects u == v."""
    u, v = int(u), int(v)
    if u == v:
        raise ConfigError(f"node pair must have two distinct endpoints, got ({u}, {v})")
    return (u, v) if u < v else (v, u)


class Graph:
    """Undirected simple graph in compressed row (CSR) layout.

    `indptr` has length n+1; `indices[indptr[u]:indptr[u+1]]` are the sorted
    neighbors of u. Instances are immutable; the backing arrays are marked
    read-only.
    """

    __slots__ = ("indptr", "indices", "source_ids", "_edge_array")

    def __init__(self, indptr: np.ndarray, indices: np.ndarray, source_ids=None):
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.source_ids = None if source_ids is None else np.asarray(source_ids, dtype=np.int64)
        self.indptr.flags.writeable = False
        self.indices.flags.writeable = False
        self._edge_array = None

    @classmethod
    def from_edges(cls, n: int, edges, source_ids=None) -> "Graph":
        """Build from an iterable of canonical (u, v) pairs with u < v."""
        n = int(n)
        if n < 0:
            raise ConfigError("node count must be non-negative")
        pairs = sorted(set(canonical_pair(u, v) for u, v in edges))
        if pairs and (pairs[0][0] < 0 or pairs[-1][1] >= n):
            raise DataError(f"edge endpoints must lie in [0, {n}); got {pairs[0]}..{pairs[-1]}")
        deg = np.zeros(n, dtype=np.int64)
        for u, v in pairs:
            deg[u] += 1
            deg[v] += 1
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(deg, out=indptr[1:])
        indices = np.zeros(indptr[-1], dtype=np.int64)
        cursor = indptr[:-1].copy()
        # lexicographic pair order fills every row in ascending neighbor
        # order: back-neighbors (< u) land before forward ones (> u)
        for u, v in pairs:
            indices[cursor[u]] = v
            cursor[u] += 1
            indices[cursor[v]] = u
            cursor[v] += 1
        return cls(indptr, indices, source_ids)

    @property
    def n(self) -> int:
        return len(self.indptr) - 1

    @property
    def edge_count(self) -> int:
        return len(self.indices) // 2

    def degree(self, u: int) -> int:
        return int(self.indptr[u + 1] - self.indptr[u])

    def neighbors(self, u: int) -> np.ndarray:
        return self.indices[self.indptr[u] : self.indptr[u + 1]]

    def has_edge(self, u: int, v: int) -> bool:
        row = self.neighbors(u)
        i = np.searchsorted(row, v)
        return i < len(row) and row[i] == v

    def edge_array(self) -> np.ndarray:
        """All edges as an (m, 2) array with u < v, sorted lexicographically."""
        if self._edge_array is None:
            rows = np.repeat(np.arange(self.n, dtype=np.int64), np.diff(self.indptr))
            mask = rows < self.indices
            arr = np.stack([rows[mask], self.indices[mask]], axis=1)
            arr.flags.writeable = False
            self._edge_array = arr
        return self._edge_array

    def edge_set(self) -> frozenset:
        return frozenset(map(tuple, self.edge_array()))

    def without_edge(self, u: int, v: int) -> "Graph":
        """Copy of this graph with edge (u, v) removed; self if absent."""
        u, v = canonical_pair(u, v)
        if not self.has_edge(u, v):
            return self
        keep = np.ones(len(self.indices), dtype=bool)
        for a, b in ((u, v), (v, u)):
            lo, hi = self.indptr[a], self.indptr[a + 1]
            keep[lo + int(np.searchsorted(self.indices[lo:hi], b))] = False
        indices = self.indices[keep]
        drop = np.zeros(self.n + 1, dtype=np.int64)
        drop[u + 1] += 1
        drop[v + 1] += 1
        indptr = self.indptr - np.cumsum(drop)
        return Graph(indptr, indices, self.source_ids)

    def __repr__(self):
        return f"Graph(n={self.n}, edges={self.edge_count})"


# ---------------------------------------------------------------------------
# ingestion


def load_edge_list(path) -> Graph:
    """Read a whitespace-separated "u v" edge list.

    Lines starting with '#' (and inline '# ...' tails) are comments. Node
    ids may be arbitrary non-negative integers; they are mapped onto a dense
    0-based range in sorted order and the original ids are kept on
    `Graph.source_ids`. Duplicate edges collapse; self-loops are dropped
    with a logged count.
    """
    edges = set()
    self_loops = 0
    try:
        fh = open(path, "r", encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"no such edge list: {path}")
    with fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise DataError(f"{path}: line {lineno}: expected 'u v', got {raw.strip()!r}")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise DataError(f"{path}: line {lineno}: non-integer node id in {raw.strip()!r}")
            if u < 0 or v < 0:
                raise DataError(f"{path}: line {lineno}: negative node id in {raw.strip()!r}")
            if u == v:
                self_loops += 1
                continue
            edges.add((min(u, v), max(u, v)))
    if self_loops:
        log.warning("%s: dropped %d self-loop(s)", path, self_loops)
    if not edges:
        raise DataError(f"{path}: no edges found")
    ids = sorted({x for e in edges for x in e})
    dense = {orig: i for i, orig in enumerate(ids)}
    remapped = [(dense[u], dense[v]) for u, v in edges]
    return Graph.from_edges(len(ids), remapped, source_ids=np.array(ids, dtype=np.int64))


# ---------------------------------------------------------------------------
# generators


@dataclass(frozen=True)
class LatticeSpec:
    """Regular lattice: 'grid' (4-neighbor) or 'triangular' (grid plus one
    diagonal per unit cell). With torus=True rows and columns wrap."""

    kind: str
    rows: int
    cols: int
    torus: bool = False

    def __post_init__(self):
        if self.kind not in ("grid", "triangular"):
            raise ConfigError(f"unknown lattice kind {self.kind!r}")
        if self.rows < 3 or self.cols < 3:
            raise ConfigError(f"lattice dimensions must be >= 3, got {self.rows}x{self.cols}")


@dataclass(frozen=True)
class SbmSpec:
    """Stochastic block model with shared intra/inter block probabilities."""

    block_sizes: tuple
    p_in: float
    p_out: float

    def __post_init__(self):
        object.__setattr__(self, "block_sizes", tuple(int(b) for b in self.block_sizes))
        if not self.block_sizes or any(b <= 0 for b in self.block_sizes):
            raise ConfigError("block sizes must be positive")
        for name, p in (("p_in", self.p_in), ("p_out", self.p_out)):
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {p}")


def generate_lattice(spec: LatticeSpec) -> Graph:
    rows, cols = spec.rows, spec.cols
    n = rows * cols

    def nid(r, c):
        return (r % rows) * cols + (c % cols)

    edges = set()
    for r in range(rows):
        for c in range(cols):
            if c + 1 < cols or spec.torus:
                edges.add(canonical_pair(nid(r, c), nid(r, c + 1)))
            if r + 1 < rows or spec.torus:
                edges.add(canonical_pair(nid(r, c), nid(r + 1, c)))
            if spec.kind == "triangular" and ((r + 1 < rows and c + 1 < cols) or spec.torus):
                edges.add(canonical_pair(nid(r, c), nid(r + 1, c + 1)))
    return Graph.from_edges(n, edges)


def generate_sbm(spec: SbmSpec, seed: int) -> Graph:
    """Sample an SBM graph; deterministic for a given (spec, seed)."""
    sizes = spec.block_sizes
    n = sum(sizes)
    starts = np.cumsum((0,) + sizes)
    block_of = np.zeros(n, dtype=np.int64)
    for b, (lo, hi) in enumerate(zip(starts[:-1], starts[1:])):
        block_of[lo:hi] = b
    rng = derive_rng(seed, "sbm", sizes, repr(spec.p_in), repr(spec.p_out))
    iu, iv = np.triu_indices(n, k=1)
    p = np.where(block_of[iu] == block_of[iv], spec.p_in, spec.p_out)
    mask = rng.random(len(iu)) < p
    edges = list(zip(iu[mask].tolist(), iv[mask].tolist()))
    return Graph.from_edges(n, edges)


# ---------------------------------------------------------------------------
# paths and traversal


def bfs_distances(g: Graph, source: int, max_depth=None) -> dict:
    """Hop distances from source; nodes beyond max_depth are omitted."""
    dist = {int(source): 0}
    queue = deque([int(source)])
    while queue:
        x = queue.popleft()
        d = dist[x]
        if max_depth is not None and d >= max_depth:
            continue
        for w in g.neighbors(x):
            w = int(w)
            if w not in dist:
                dist[w] = d + 1
                queue.append(w)
    return dist


def shortest_path(g: Graph, u: int, v: int):
    """Hop count of a shortest u-v path, or UNREACHABLE."""
    u, v = int(u), int(v)
    if u == v:
        return 0
    seen = {u}
    queue = deque([(u, 0)])
    while queue:
        x, d = queue.popleft()
        for w in g.neighbors(x):
            w = int(w)
            if w == v:
                return d + 1
            if w not in seen:
                seen.add(w)
                queue.append((w, d + 1))
    return UNREACHABLE


def count_simple_paths(g: Graph, u: int, v: int, edge_len: int) -> int:
    """Number of simple paths from u to v using exactly edge_len edges.

    Exhaustive DFS; edge_len is capped at MAX_SIMPLE_PATH_LEN because the
    enumeration grows with degree**edge_len.
    """
    u, v = int(u), int(v)
    if u == v:
        raise ConfigError("count_simple_paths requires distinct endpoints")
    if not 1 <= edge_len <= MAX_SIMPLE_PATH_LEN:
        raise ConfigError(
            f"edge_len must be in [1, {MAX_SIMPLE_PATH_LEN}], got {edge_len}"
        )
    visited = np.zeros(g.n, dtype=bool)
    visited[u] = True
    count = 0

    def walk(node, remaining):
        nonlocal count
        for w in g.neighbors(node):
            if w == v:
                if remaining == 1:
                    count += 1
                continue
            if remaining == 1 or visited[w]:
                continue
            visited[w] = True
            walk(w, remaining - 1)
            visited[w] = False

    walk(u, edge_len)
    return count


def is_bipartite(g: Graph) -> bool:
    color = np.full(g.n, -1, dtype=np.int8)
    for start in range(g.n):
        if color[start] != -1:
            continue
        color[start] = 0
        queue = deque([start])
        while queue:
            x = queue.popleft()
            for w in g.neighbors(x):
                if color[w] == -1:
                    color[w] = 1 - color[x]
                    queue.append(int(w))
                elif color[w] == color[x]:
                    return False
    return True


# ---------------------------------------------------------------------------
# splits and negative sampling


def sample_nonedges(g: Graph, count: int, seed: int, exclude=()) -> list:
    """Uniform sample (without replacement) of node pairs that are neither
    edges of g nor members of exclude. Deterministic per seed."""
    count = int(count)
    if count < 0:
        raise ConfigError("count must be non-negative")
    if count == 0:
        return []
    n = g.n
    total_pairs = n * (n - 1) // 2
    edge_set = g.edge_set()
    excluded = {canonical_pair(u, v) for u, v in exclude} - edge_set
    capacity = total_pairs - g.edge_count - len(excluded)
    if count > capacity:
        raise DataError(
            f"requested {count} non-edges but only {capacity} exist "
            f"(n={n}, edges={g.edge_count}, excluded={len(excluded)})"
        )
    rng = derive_rng(seed, "nonedges", count)
    forbidden = edge_set | excluded
    if total_pairs <= 200_000:
        pool = [
            (u, v)
            for u in range(n)
            for v in range(u + 1, n)
            if (u, v) not in forbidden
        ]
        picks = rng.choice(len(pool), size=count, replace=False)
        return [pool[i] for i in picks]
    # sparse regime: rejection sampling
    out = []
    chosen = set()
    attempts = 0
    limit = 200 * count + 10_000
    while len(out) < count:
        if attempts >= limit:
            raise DataError("non-edge rejection sampling exceeded attempt budget")
        u = int(rng.integers(0, n))
        v = int(rng.integers(0, n))
        attempts += 1
        if u == v:
            continue
        pair = (u, v) if u < v else (v, u)
        if pair in forbidden or pair in chosen:
            continue
        chosen.add(pair)
        out.append(pair)
    return out


@dataclass(frozen=True)
class DataSplit:
    """Observed / validation / test partition of one graph's edges.

    `node_count` and `id_map` (dense index -> original id) carry enough
    information to rebuild the observed graph without the source file.
    """

    seed: int
    node_count: int
    observed: tuple
    valid_pos: tuple
    valid_neg: tuple
    test_pos: tuple
    test_neg: tuple
    id_map: tuple = field(default=None)

    def observed_graph(self) -> Graph:
        src = None if self.id_map is None else np.array(self.id_map, dtype=np.int64)
        return Graph.from_edges(self.node_count, self.observed, source_ids=src)

    def full_edge_set(self) -> frozenset:
        return frozenset(self.observed) | frozenset(self.valid_pos) | frozenset(self.test_pos)

    def to_json_dict(self) -> dict:
        id_map = list(self.id_map) if self.id_map is not None else list(range(self.node_count))
        return {
            "seed": self.seed,
            "id_map": id_map,
            "observed": [list(e) for e in self.observed],
            "valid_pos": [list(e) for e in self.valid_pos],
            "valid_neg": [list(e) for e in self.valid_neg],
            "test_pos": [list(e) for e in self.test_pos],
            "test_neg": [list(e) for e in self.test_neg],
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "DataSplit":
        try:
            id_map = tuple(int(x) for x in doc["id_map"])
            fields = {
                key: tuple(canonical_pair(u, v) for u, v in doc[key])
                for key in ("observed", "valid_pos", "valid_neg", "test_pos", "test_neg")
            }
            seed = int(doc["seed"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed split document: {exc}")
        return cls(seed=seed, node_count=len(id_map), id_map=id_map, **fields)

    def save(self, path):
        write_json_atomic(path, self.to_json_dict())

    @classmethod
    def load(cls, path) -> "DataSplit":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                return cls.from_json_dict(json.load(fh))
        except FileNotFoundError:
            raise DataError(f"no such split file: {path}")
        except json.JSONDecodeError as exc:
            raise DataError(f"{path} is not a valid split file: {exc}")


def split_edges(g: Graph, fractions: tuple, seed: int) -> DataSplit:
    """Partition edges into observed/valid/test and attach sampled negatives.

    fractions = (train, valid, test), each positive, summing to 1. Validation
    and test sizes round down; the remainder stays observed. One negative is
    sampled per held-out positive, uniformly from the non-edges of g, with
    valid and test negatives disjoint.
    """
    if len(fractions) != 3:
        raise ConfigError("fractions must be (train, valid, test)")
    f_train, f_valid, f_test = (float(f) for f in fractions)
    if min(f_train, f_valid, f_test) <= 0:
        raise ConfigError("all split fractions must be positive")
    if abs(f_train + f_valid + f_test - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {fractions}")
    m = g.edge_count
    if m < 10:
        raise DataError(f"graph has {m} edges; at least 10 required to split")
    edges = [tuple(e) for e in g.edge_array().tolist()]
    rng = derive_rng(seed, "split-perm")
    perm = rng.permutation(m)
    n_valid = math.floor(m * f_valid)
    n_test = math.floor(m * f_test)
    valid_pos = tuple(edges[i] for i in perm[:n_valid])
    test_pos = tuple(edges[i] for i in perm[n_valid : n_valid + n_test])
    observed = tuple(sorted(edges[i] for i in perm[n_valid + n_test :]))
    negatives = sample_nonedges(g, n_valid + n_test, derive_seed_int(seed, "split-neg"))
    id_map = tuple(g.source_ids.tolist()) if g.source_ids is not None else tuple(range(g.n))
    return DataSplit(
        seed=int(seed),
        node_count=g.n,
        observed=observed,
        valid_pos=valid_pos,
        valid_neg=tuple(negatives[:n_valid]),
        test_pos=test_pos,
        test_neg=tuple(negatives[n_valid:]),
        id_map=id_map,
    )


def derive_seed_int(seed: int, *labels) -> int:
    """Collapse (seed, labels) to a single int, for APIs that take a seed."""
    return int(derive_rng(seed, *labels).integers(0, 2**63 - 1))


# ---------------------------------------------------------------------------
# shared file helpers


def write_json_atomic(path, doc):
    write_text_atomic(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_text_atomic(path, text: str):
    """Write via temp file + rename so readers never see partial output."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_edge_list(path, g: Graph, header: str = ""):
    lines = []
    if header:
        lines.extend(f"# {line}" for line in header.splitlines())
    src = g.source_ids
    for u, v in g.edge_array().tolist():
        if src is not None:
            u, v = int(src[u]), int(src[v])
        lines.append(f"{u} {v}")
    write_text_atomic(path, "\n".join(lines) + "\n")
