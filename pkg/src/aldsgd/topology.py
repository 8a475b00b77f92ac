"""Communication graphs: construction, Laplacians, matchings, rotation, thinning.

Graphs are small undirected simple graphs on nodes ``0..m-1``. Every value
here is immutable once built, so graphs and dynamic graph sets can be shared
freely between workers and threads.
"""

from __future__ import annotations

from collections import deque
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

__all__ = [
    "BASE_13_EDGES",
    "BASE_13_EDGES_6",
    "DynamicGraphSet",
    "Graph",
    "build_graph",
    "default_shifts",
    "laplacian",
    "matching_decomposition",
    "matching_laplacian",
    "make_dynamic_set",
    "reduce_degree",
    "rotate_graph",
]

Edge = tuple[int, int]
Matching = tuple[Edge, ...]

# 8 nodes, 13 links: node 4 hangs off node 0 only, node 7 is the hub.
BASE_13_EDGES: tuple[Edge, ...] = (
    (0, 1), (0, 4), (0, 7), (1, 2), (1, 6), (1, 7), (2, 3),
    (2, 7), (3, 5), (3, 7), (5, 6), (5, 7), (6, 7),
)

# 6 nodes, 13 links (complete graph minus (0,3) and (2,5)). Small enough that
# a spanning tree has 5 links, so it can be thinned down to 38% of its links.
BASE_13_EDGES_6: tuple[Edge, ...] = tuple(
    (i, j) for i in range(6) for j in range(i + 1, 6) if (i, j) not in ((0, 3), (2, 5))
)


def _normalize(edges: Iterable[Sequence[int]]) -> tuple[Edge, ...]:
    out = []
    for e in edges:
        u, v = int(e[0]), int(e[1])
        out.append((u, v) if u < v else (v, u))
    return tuple(sorted(out))


@dataclass(frozen=True)
class Graph:
    """Undirected simple graph on ``m`` nodes.

    Edges are stored as sorted ``(u, v)`` pairs with ``u < v``, in
    lexicographic order. Connectivity is *not* required here (sampled
    active subgraphs are often disconnected); :func:`build_graph` enforces it
    for training topologies.
    """

    m: int
    edges: tuple[Edge, ...] = field(default=())

    def __post_init__(self) -> None:
        edges = _normalize(self.edges)
        object.__setattr__(self, "edges", edges)
        if self.m < 1:
            raise ValueError(f"graph needs at least one node, got m={self.m}")
        for u, v in edges:
            if u == v:
                raise ValueError(f"self-loop at node {u}")
            if u < 0 or v >= self.m:
                raise ValueError(f"edge {(u, v)} has an endpoint outside [0, {self.m})")
        if len(set(edges)) != len(edges):
            raise ValueError("duplicate edges")

    @property
    def total_degree(self) -> int:
        """Number of links, D."""
        return len(self.edges)

    @property
    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.m, dtype=np.int64)
        for u, v in self.edges:
            deg[u] += 1
            deg[v] += 1
        return deg

    @property
    def max_degree(self) -> int:
        return int(self.degrees.max()) if self.m else 0

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.m, self.m), dtype=bool)
        for u, v in self.edges:
            a[u, v] = a[v, u] = True
        return a

    def neighbors(self, i: int) -> list[int]:
        return sorted({v for u, v in self.edges if u == i} | {u for u, v in self.edges if v == i})

    def is_connected(self) -> bool:
        return _connected(self.m, self.edges)

    def to_dict(self) -> dict[str, Any]:
        return {"m": self.m, "edges": [list(e) for e in self.edges]}


def _connected(m: int, edges: Iterable[Edge]) -> bool:
    adj: list[list[int]] = [[] for _ in range(m)]
    for u, v in edges:
        adj[u].append(v)
        adj[v].append(u)
    seen = [False] * m
    seen[0] = True
    queue = deque([0])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if not seen[v]:
                seen[v] = True
                queue.append(v)
    return all(seen)


def _ring_edges(m: int) -> list[Edge]:
    if m == 2:
        return [(0, 1)]
    return [(i, (i + 1) % m) for i in range(m)]


def build_graph(spec: Mapping[str, Any] | str, m: int | None = None,
                edges: Iterable[Sequence[int]] | None = None) -> Graph:
    """Build a connected training topology.

    ``spec`` is either a descriptor mapping ``{"kind": ..., "m": ..., "edges": ...}``
    or just the kind string, with ``m``/``edges`` passed separately.

    Kinds: ``ring``, ``complete``, ``star`` (center 0), ``pendant_ring``
    (ring on the first ``m-1`` nodes plus node ``m-1`` attached to node 0),
    and ``explicit``.
    """
    if isinstance(spec, str):
        kind = spec
    else:
        kind = spec["kind"]
        m = spec.get("m", m)
        edges = spec.get("edges", edges)

    if kind == "explicit":
        if edges is None:
            raise ValueError("explicit topology requires an edge list")
        edges = [tuple(e) for e in edges]
        if m is None:
            m = 1 + max(max(e) for e in edges) if edges else 0
    if m is None or m < 2:
        raise ValueError(f"topology needs m >= 2, got {m}")

    if kind == "ring":
        edge_list = _ring_edges(m)
    elif kind == "complete":
        edge_list = [(i, j) for i in range(m) for j in range(i + 1, m)]
    elif kind == "star":
        edge_list = [(0, i) for i in range(1, m)]
    elif kind == "pendant_ring":
        if m < 3:
            raise ValueError("pendant_ring needs m >= 3")
        edge_list = _ring_edges(m - 1) + [(0, m - 1)]
    elif kind == "explicit":
        edge_list = edges
    else:
        raise ValueError(f"unknown topology kind {kind!r}")

    g = Graph(m, tuple(edge_list))
    if not g.is_connected():
        raise ValueError(f"{kind} topology on {m} nodes is not connected")
    return g


def laplacian(g: Graph | Sequence[Edge], m: int | None = None) -> np.ndarray:
    """Integer graph Laplacian ``D - A`` of ``g`` (or of an edge subset on ``m`` nodes)."""
    if isinstance(g, Graph):
        m, edges = g.m, g.edges
    else:
        edges = g
    lap = np.zeros((m, m), dtype=np.int64)
    for u, v in edges:
        lap[u, u] += 1
        lap[v, v] += 1
        lap[u, v] -= 1
        lap[v, u] -= 1
    return lap


def matching_laplacian(matching: Sequence[Edge], m: int) -> np.ndarray:
    return laplacian(matching, m)


def _greedy_coloring(g: Graph) -> list[int]:
    used: list[set[int]] = [set() for _ in range(g.m)]
    colors = []
    for u, v in g.edges:
        c = 0
        while c in used[u] or c in used[v]:
            c += 1
        used[u].add(c)
        used[v].add(c)
        colors.append(c)
    return colors


def _misra_gries_coloring(g: Graph) -> list[int]:
    """Proper edge coloring with at most max_degree + 1 colors."""
    m = g.m
    n_colors = g.max_degree + 1
    # at[v][c] = neighbor joined to v by an edge of color c
    at: list[dict[int, int]] = [dict() for _ in range(m)]

    def free(v: int) -> int:
        for c in range(n_colors):
            if c not in at[v]:
                return c
        raise AssertionError("no free color")  # pragma: no cover

    def is_free(v: int, c: int) -> bool:
        return c not in at[v]

    def set_color(u: int, v: int, c: int) -> None:
        at[u][c] = v
        at[v][c] = u

    def clear(u: int, v: int, c: int) -> None:
        del at[u][c]
        del at[v][c]

    def color_of(u: int, v: int) -> int | None:
        for c, w in at[u].items():
            if w == v:
                return c
        return None

    for u, v in g.edges:
        # maximal fan of u starting at v
        fan = [v]
        in_fan = {v}
        while True:
            last = fan[-1]
            nxt = None
            for c, w in sorted(at[u].items()):
                if w not in in_fan and is_free(last, c):
                    nxt = w
                    break
            if nxt is None:
                break
            fan.append(nxt)
            in_fan.add(nxt)
        c = free(u)
        d = free(fan[-1])
        if c != d:
            # invert the cd-path starting at u
            path_edges = []
            x, col = u, d
            while col in at[x]:
                y = at[x][col]
                path_edges.append((x, y, col))
                x = y
                col = c if col == d else d
            for x, y, col in path_edges:
                clear(x, y, col)
            for x, y, col in path_edges:
                set_color(x, y, c if col == d else d)
        # find w in fan with d free such that fan[:w] is still a fan
        w_idx = len(fan) - 1
        for idx, w in enumerate(fan):
            if is_free(w, d):
                prefix_ok = all(
                    color_of(u, fan[j + 1]) is not None and is_free(fan[j], color_of(u, fan[j + 1]))
                    for j in range(idx)
                )
                if prefix_ok:
                    w_idx = idx
                    break
        # rotate the fan prefix
        for j in range(w_idx):
            cj = color_of(u, fan[j + 1])
            clear(u, fan[j + 1], cj)
            set_color(u, fan[j], cj)
        set_color(u, fan[w_idx], d)

    colors = []
    for u, v in g.edges:
        c = color_of(u, v)
        assert c is not None
        colors.append(c)
    return colors


def matching_decomposition(g: Graph) -> list[Matching]:
    """Split the edge set into vertex-disjoint matchings.

    Greedy sequential coloring over lexicographically sorted edges; if that
    needs more than ``max_degree + 1`` colors, the Misra-Gries construction is
    used instead, which always stays within the Vizing bound. Both paths are
    deterministic for a given graph.
    """
    if not g.edges:
        return []
    colors = _greedy_coloring(g)
    if max(colors) + 1 > g.max_degree + 1:
        colors = _misra_gries_coloring(g)
    n = max(colors) + 1
    groups: list[list[Edge]] = [[] for _ in range(n)]
    for e, c in zip(g.edges, colors):
        groups[c].append(e)
    return [tuple(grp) for grp in groups if grp]


def rotate_graph(g: Graph, shift: int) -> Graph:
    """Relabel every node ``v`` as ``(v + shift) mod m``."""
    if not 0 <= shift < g.m:
        raise ValueError(f"shift must lie in [0, {g.m}), got {shift}")
    return Graph(g.m, tuple(((u + shift) % g.m, (v + shift) % g.m) for u, v in g.edges))


def default_shifts(m: int, n: int) -> list[int]:
    """Evenly spaced rotation offsets ``floor(i*m/n)``; ``{0, m//3, 2m//3}`` for n = 3."""
    return [(i * m) // n for i in range(n)]


@dataclass(frozen=True)
class DynamicGraphSet:
    """Ordered graphs a run cycles through, one per round.

    ``matching_laplacians[i]`` stacks the Laplacians of the matchings in
    ``decompositions[i]`` as an int array of shape ``(n_matchings, m, m)``.
    """

    graphs: tuple[Graph, ...]
    decompositions: tuple[tuple[Matching, ...], ...]
    shifts: tuple[int, ...]
    matching_laplacians: tuple[np.ndarray, ...] = field(repr=False, compare=False)

    @property
    def n(self) -> int:
        return len(self.graphs)

    @property
    def m(self) -> int:
        return self.graphs[0].m

    def graph_index(self, k: int, start: int = 0) -> int:
        """Graph used in round ``k`` (1-based): round 1 uses ``graphs[start]``."""
        return (k - 1 + start) % self.n

    def relabel(self, perm: Sequence[int]) -> DynamicGraphSet:
        """Apply the node permutation ``v -> perm[v]`` to every graph."""
        graphs = tuple(Graph(g.m, tuple((perm[u], perm[v]) for u, v in g.edges)) for g in self.graphs)
        return _assemble(graphs, self.shifts)


def _assemble(graphs: Sequence[Graph], shifts: Sequence[int]) -> DynamicGraphSet:
    decomps = tuple(tuple(matching_decomposition(g)) for g in graphs)
    laps = []
    for g, dec in zip(graphs, decomps):
        if dec:
            laps.append(np.stack([matching_laplacian(mt, g.m) for mt in dec]))
        else:
            laps.append(np.zeros((0, g.m, g.m), dtype=np.int64))
    return DynamicGraphSet(tuple(graphs), decomps, tuple(shifts), tuple(laps))


def make_dynamic_set(g: Graph, n: int = 1, shifts: Sequence[int] | None = None) -> DynamicGraphSet:
    """Rotated copies of ``g`` with precomputed matching decompositions.

    ``n = 1`` with shift 0 is the static topology of D-PSGD and MATCHA.
    """
    if n < 1:
        raise ValueError(f"need at least one graph, got n={n}")
    if shifts is None:
        shifts = default_shifts(g.m, n)
    shifts = [int(s) for s in shifts]
    if len(shifts) != n:
        raise ValueError(f"expected {n} shifts, got {len(shifts)}")
    if len(set(shifts)) != n:
        raise ValueError(f"shifts must be distinct, got {shifts}")
    return _assemble([rotate_graph(g, s) for s in shifts], shifts)


def reduce_degree(g: Graph, target_D: int) -> Graph:
    """Thin ``g`` to exactly ``target_D`` links while keeping it connected.

    Repeatedly drops the non-bridge edge with the largest endpoint-degree sum;
    ties go to the lexicographically smallest edge.
    """
    if target_D > g.total_degree:
        raise ValueError(f"target_D={target_D} exceeds current link count {g.total_degree}")
    if target_D < g.m - 1:
        raise ValueError(f"target_D={target_D} is below spanning-tree size {g.m - 1}")
    if not g.is_connected():
        raise ValueError("reduce_degree needs a connected graph")
    edges = list(g.edges)
    deg = g.degrees.copy()
    while len(edges) > target_D:
        best = None
        best_score = -1
        for e in edges:
            score = int(deg[e[0]] + deg[e[1]])
            if score <= best_score:
                continue
            rest = [f for f in edges if f != e]
            if _connected(g.m, rest):
                best, best_score = e, score
        if best is None:  # pragma: no cover - impossible above spanning-tree size
            raise RuntimeError("no removable edge found")
        edges.remove(best)
        deg[best[0]] -= 1
        deg[best[1]] -= 1
    return Graph(g.m, tuple(edges))
