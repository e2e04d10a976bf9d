"""Ego-subgraph extraction around a node pair and structural node labels.

A candidate link (u, v) is represented by the subgraph induced on all nodes
within `radius` hops of u or of v. The pair's own edge is removed before
extraction (when present and requested), so the representation of a known
link never contains the link itself. Each node then gets a two-slot label:

    (drnl(d_u, d_v), 0)   when the node reaches both targets,
    (0, d)                when it reaches exactly one target at distance d,

with the two targets themselves pinned to (1, 0). Distances are measured
inside the extracted subgraph. drnl is the double-radius scheme

    1 + min(d_u, d_v) + (d // 2) * ((d // 2) + (d % 2) - 1),  d = d_u + d_v,

which injectively encodes the orbit of (d_u, d_v) under swapping.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, replace

from .errors import ConfigError, NumericError
from .graphs import Graph, bfs_distances, canonical_pair
from .rng import derive_rng


def drnl(d_u: int, d_v: int) -> int:
    """Double-radius label of a node at hop distances (d_u, d_v) from the
    two targets. Requires both distances finite and non-negative."""
    if d_u < 0 or d_v < 0:
        raise ConfigError(f"distances must be non-negative, got ({d_u}, {d_v})")
    d = d_u + d_v
    half = d // 2
    return 1 + min(d_u, d_v) + half * (half + d % 2 - 1)


@dataclass(frozen=True)
class LabelVocab:
    """Finite index space for label tuples.

    Two-sided labels (a, 0) map to min(a, drnl_cap); one-sided labels (0, b)
    map to drnl_cap + 1 + min(b, dist_cap). Values beyond the caps saturate
    instead of erroring, so rare deep nodes share the boundary index.
    """

    drnl_cap: int = 100
    dist_cap: int = 20

    def __post_init__(self):
        if self.drnl_cap < 1 or self.dist_cap < 1:
            raise ConfigError("label caps must be >= 1")

    @property
    def size(self) -> int:
        return self.drnl_cap + self.dist_cap + 2

    def index(self, label: tuple) -> int:
        a, b = label
        if a < 0 or b < 0 or (a > 0 and b > 0):
            raise ConfigError(f"malformed label tuple {label!r}")
        if a > 0:
            return min(a, self.drnl_cap)
        return self.drnl_cap + 1 + min(b, self.dist_cap)


def vocab_index(vocab: LabelVocab, label: tuple) -> int:
    return vocab.index(label)


@dataclass(frozen=True)
class LabeledSubgraph:
    """Induced ego subgraph around a target pair.

    nodes: original node ids; local index 0 is u, 1 is v, the rest ascend.
    adj:   per-node tuples of local neighbor indices, each sorted.
    labels: per-node (a, b) tuples, or None before labeling.
    """

    nodes: tuple
    adj: tuple
    radius: int
    labels: tuple = None

    @property
    def n(self) -> int:
        return len(self.nodes)

    @property
    def pair(self) -> tuple:
        return (self.nodes[0], self.nodes[1])

    def local_edges(self):
        return [(i, j) for i in range(self.n) for j in self.adj[i] if i < j]

    def with_labels(self, labels) -> "LabeledSubgraph":
        return replace(self, labels=tuple(tuple(t) for t in labels))


def _bounded_bfs(g: Graph, source: int, radius: int, cap, rng) -> dict:
    """Distances within radius hops; each new frontier optionally thinned to
    cap nodes (uniform, seeded)."""
    dist = {source: 0}
    frontier = [source]
    for depth in range(1, radius + 1):
        nxt = sorted(
            {int(w) for x in frontier for w in g.neighbors(x)} - dist.keys()
        )
        if cap is not None and len(nxt) > cap:
            picks = rng.choice(len(nxt), size=cap, replace=False)
            nxt = [nxt[i] for i in sorted(picks)]
        for w in nxt:
            dist[w] = depth
        frontier = nxt
    return dist


def extract_ego_subgraph(
    g: Graph,
    pair,
    radius: int,
    remove_target: bool = True,
    max_per_hop: int = None,
    seed: int = 0,
) -> LabeledSubgraph:
    """Induced subgraph on nodes within radius hops of either endpoint.

    Extraction runs on the view with the target edge removed (when present
    and remove_target is set), so known links are represented the same way
    candidate links are. Both endpoints are always included, even when
    isolated. Node order is canonical: u, v, then ascending original ids.
    """
    u, v = canonical_pair(*pair)
    if v >= g.n:
        raise ConfigError(f"pair {pair} out of range for graph with n={g.n}")
    if radius < 1:
        raise ConfigError(f"radius must be >= 1, got {radius}")
    view = g.without_edge(u, v) if remove_target else g
    rng = derive_rng(seed, "hop-cap", u, v) if max_per_hop is not None else None
    du = _bounded_bfs(view, u, radius, max_per_hop, rng)
    dv = _bounded_bfs(view, v, radius, max_per_hop, rng)
    members = (du.keys() | dv.keys()) - {u, v}
    nodes = [u, v] + sorted(members)
    local = {orig: i for i, orig in enumerate(nodes)}
    adj = tuple(
        tuple(sorted(local[int(w)] for w in view.neighbors(orig) if int(w) in local))
        for orig in nodes
    )
    return LabeledSubgraph(nodes=tuple(nodes), adj=adj, radius=radius)


def _local_distances(sub: LabeledSubgraph, source: int) -> list:
    dist = [math.inf] * sub.n
    dist[source] = 0
    queue = deque([source])
    while queue:
        x = queue.popleft()
        for w in sub.adj[x]:
            if math.isinf(dist[w]):
                dist[w] = dist[x] + 1
                queue.append(w)
    return dist


def drnl_plus(sub: LabeledSubgraph) -> tuple:
    """Per-node label tuples for an extracted subgraph.

    Targets are (1, 0) by definition. Other nodes combine their in-subgraph
    distances to the two targets; unreachable-from-one-side nodes fall back
    to the one-sided (0, d) form.
    """
    d_u = _local_distances(sub, 0)
    d_v = _local_distances(sub, 1)
    labels = []
    for i in range(sub.n):
        if i < 2:
            labels.append((1, 0))
            continue
        du, dv = d_u[i], d_v[i]
        u_ok, v_ok = not math.isinf(du), not math.isinf(dv)
        if u_ok and v_ok:
            labels.append((drnl(int(du), int(dv)), 0))
        elif u_ok:
            labels.append((0, int(du)))
        elif v_ok:
            labels.append((0, int(dv)))
        else:
            raise NumericError(
                f"node {sub.nodes[i]} unreachable from both targets; "
                "extraction should make this impossible"
            )
    return tuple(labels)


def labeled_subgraph(
    g: Graph,
    pair,
    radius: int,
    remove_target: bool = True,
    max_per_hop: int = None,
    seed: int = 0,
) -> LabeledSubgraph:
    """Extract and label in one step; the form every model input takes."""
    sub = extract_ego_subgraph(g, pair, radius, remove_target, max_per_hop, seed)
    return sub.with_labels(drnl_plus(sub))
