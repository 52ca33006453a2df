"""Bounded-independence graphs: construction, neighbourhoods and exact
independence numbers on small induced subgraphs."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.spatial import cKDTree

BRUTE_FORCE_CAP = 24

STRUCTURED_KINDS = ("path", "cycle", "grid", "star", "clique", "empty")


class GraphError(ValueError):
    pass


class SubsetTooLarge(GraphError):
    """Exact search was asked for more nodes than the configured cap."""


@dataclass(eq=False)
class Graph:
    """Undirected simple graph in CSR form.

    ``edges`` holds each undirected edge once as ``(u, v)`` with ``u < v``;
    ``indptr``/``indices`` is the symmetric adjacency used by the kernels.
    """

    node_count: int
    indptr: np.ndarray
    indices: np.ndarray
    edges: np.ndarray
    positions: np.ndarray | None = None
    radius: float | None = None
    labels: dict = field(default_factory=dict)

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[Sequence[int]], *, positions=None,
                   radius=None, labels=None) -> "Graph":
        if n < 1:
            raise GraphError("graph needs at least one node")
        arr = np.asarray(list(edges), dtype=np.int64).reshape(-1, 2)
        if arr.size:
            if arr.min() < 0 or arr.max() >= n:
                raise GraphError("edge endpoint out of range")
            if np.any(arr[:, 0] == arr[:, 1]):
                raise GraphError("self-loops are not allowed")
            arr = np.sort(arr, axis=1)
            arr = np.unique(arr, axis=0)
        both = np.concatenate([arr, arr[:, ::-1]]) if arr.size else arr
        order = np.lexsort((both[:, 1], both[:, 0])) if arr.size else np.zeros(0, np.int64)
        both = both[order]
        indptr = np.zeros(n + 1, dtype=np.int64)
        if both.size:
            np.add.at(indptr, both[:, 0] + 1, 1)
        indptr = np.cumsum(indptr)
        indices = both[:, 1].copy() if both.size else np.zeros(0, dtype=np.int64)
        return cls(n, indptr, indices, arr, positions, radius, dict(labels or {}))

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    def neighbors(self, v: int) -> np.ndarray:
        self._check_node(v)
        return self.indices[self.indptr[v]:self.indptr[v + 1]]

    def degree(self) -> np.ndarray:
        return np.diff(self.indptr)

    def has_edge(self, u: int, v: int) -> bool:
        nb = self.neighbors(u)
        i = np.searchsorted(nb, v)
        return bool(i < len(nb) and nb[i] == v)

    def adjacency_sets(self) -> list[frozenset[int]]:
        return [frozenset(self.neighbors(v).tolist()) for v in range(self.node_count)]

    def _check_node(self, v: int) -> None:
        if not 0 <= v < self.node_count:
            raise GraphError(f"unknown node {v}")


def gen_unit_disk(n: int, radius: float, world: float = 1.0, seed: int = 0) -> Graph:
    if n < 1 or radius <= 0 or world < 0:
        raise GraphError("need n >= 1, radius > 0, world >= 0")
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0.0, world, size=(n, 2))
    pairs = cKDTree(pts).query_pairs(radius, output_type="ndarray")
    return Graph.from_edges(n, pairs, positions=pts, radius=radius,
                            labels={"kind": "udg", "world": world, "seed": seed})


def _square_cover(r: float) -> float:
    # probability that two uniform points in the unit square lie within r (r <= 1)
    return math.pi * r * r - 8.0 / 3.0 * r ** 3 + 0.5 * r ** 4


def udg_radius_for_degree(n: int, avg_degree: float, world: float = 1.0) -> float:
    """Radius whose expected average degree is ``avg_degree``, border loss included."""
    if n < 2 or avg_degree <= 0:
        raise GraphError("need n >= 2 and a positive target degree")
    target = avg_degree / (n - 1)
    if target >= 1.0:
        return world * math.sqrt(2.0)
    return world * brentq(lambda r: _square_cover(r) - target, 0.0, 1.0)


def gen_structured(kind: str, n: int, width: int | None = None) -> Graph:
    if n < 1:
        raise GraphError("need n >= 1")
    if kind == "path":
        edges = [(i, i + 1) for i in range(n - 1)]
    elif kind == "cycle":
        edges = [(i, i + 1) for i in range(n - 1)]
        if n >= 3:
            edges.append((n - 1, 0))
    elif kind == "star":
        edges = [(0, i) for i in range(1, n)]
    elif kind == "clique":
        edges = [(i, j) for i in range(n) for j in range(i + 1, n)]
    elif kind == "empty":
        edges = []
    elif kind == "grid":
        if width is None or width < 1 or n % width:
            raise GraphError(f"grid of {n} nodes needs a width dividing n")
        edges = []
        for v in range(n):
            r, c = divmod(v, width)
            if c + 1 < width:
                edges.append((v, v + 1))
            if (r + 1) * width < n:
                edges.append((v, v + width))
    else:
        raise GraphError(f"unknown structured kind {kind!r}")
    labels = {"kind": kind}
    if width is not None:
        labels["width"] = width
    return Graph.from_edges(n, edges, labels=labels)


def neighborhood(g: Graph, v: int, d: int) -> frozenset[int]:
    """Closed BFS ball ``N^d(v)``."""
    g._check_node(v)
    if d < 0:
        raise GraphError("hop distance must be non-negative")
    seen = {v}
    frontier = deque([(v, 0)])
    while frontier:
        u, du = frontier.popleft()
        if du == d:
            continue
        for w in g.neighbors(u).tolist():
            if w not in seen:
                seen.add(w)
                frontier.append((w, du + 1))
    return frozenset(seen)


def _mis_bitset(nbr: list[int], k: int) -> int:
    best = 0

    def rec(cand: int, size: int) -> None:
        nonlocal best
        while cand:
            # vertices of degree <= 1 in the candidate set are always safe picks
            forced = -1
            pick, pick_deg = -1, -1
            c = cand
            while c:
                low = c & -c
                v = low.bit_length() - 1
                c ^= low
                deg = (nbr[v] & cand).bit_count()
                if deg <= 1:
                    forced = v
                    break
                if deg > pick_deg:
                    pick, pick_deg = v, deg
            if forced >= 0:
                size += 1
                cand &= ~(nbr[forced] | (1 << forced))
                continue
            if size + cand.bit_count() <= best:
                return
            rec(cand & ~(nbr[pick] | (1 << pick)), size + 1)
            cand &= ~(1 << pick)
            if size + cand.bit_count() <= best:
                return
        best = max(best, size)

    rec((1 << k) - 1, 0)
    return best


def max_independent_set_size(g: Graph, subset: Iterable[int] | None = None,
                             cap: int = BRUTE_FORCE_CAP) -> int:
    """Exact independence number of the subgraph induced by ``subset``."""
    nodes = sorted(set(range(g.node_count) if subset is None else subset))
    if len(nodes) > cap:
        raise SubsetTooLarge(f"{len(nodes)} nodes exceeds brute-force cap {cap}")
    local = {v: i for i, v in enumerate(nodes)}
    nbr = [0] * len(nodes)
    for v, i in local.items():
        for w in g.neighbors(v).tolist():
            j = local.get(w)
            if j is not None:
                nbr[i] |= 1 << j
    return _mis_bitset(nbr, len(nodes)) if nodes else 0


def independence_function(g: Graph, v: int, d: int, cap: int = BRUTE_FORCE_CAP) -> int:
    return max_independent_set_size(g, neighborhood(g, v, d), cap)


def alpha_two(g: Graph, cap: int = BRUTE_FORCE_CAP) -> int:
    """Bounded-independence constant: largest independent set in any 2-hop ball."""
    return max(independence_function(g, v, 2, cap) for v in range(g.node_count))


@dataclass(frozen=True)
class IndependenceProfile:
    alpha_of_d: dict[int, int]

    @property
    def alpha(self) -> int:
        return self.alpha_of_d[2]


def independence_profile(g: Graph, max_d: int = 2, cap: int = BRUTE_FORCE_CAP) -> IndependenceProfile:
    out = {}
    for d in range(max(max_d, 2) + 1):
        out[d] = max(independence_function(g, v, d, cap) for v in range(g.node_count))
    return IndependenceProfile(out)


@dataclass(frozen=True)
class TuranCheck:
    sum_ratio: float
    sum_product: float
    alpha_bound: int
    lower_bound: float
    both_hold: bool


def weighted_turan_check(g: Graph, weights, alpha: int | None = None,
                         cap: int = BRUTE_FORCE_CAP, rtol: float = 1e-12) -> TuranCheck:
    """Evaluate both weighted Turan inequalities with closed-neighbourhood sums."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (g.node_count,):
        raise GraphError("need one weight per node")
    if np.any(w <= 0):
        raise GraphError("weights must be positive")
    if alpha is None:
        alpha = max_independent_set_size(g, None, cap)
    closed = w.copy()
    if g.edge_count:
        u, v = g.edges[:, 0], g.edges[:, 1]
        np.add.at(closed, u, w[v])
        np.add.at(closed, v, w[u])
    sum_ratio = float(np.sum(w / closed))
    sum_product = float(np.sum(w * closed))
    total = float(w.sum())
    lower = total * total / alpha
    ok = sum_ratio <= alpha * (1 + rtol) and sum_product >= lower * (1 - rtol)
    return TuranCheck(sum_ratio, sum_product, alpha, lower, bool(ok))


def write_edge_list(g: Graph, path) -> None:
    lines = [f"n={g.node_count}"] + [f"{u} {v}" for u, v in g.edges.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_edge_list(path) -> Graph:
    n = None
    edges = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("n="):
            n = int(line[2:])
            continue
        parts = line.split()
        if len(parts) != 2:
            raise GraphError(f"{path}:{lineno}: expected 'u v', got {raw!r}")
        edges.append((int(parts[0]), int(parts[1])))
    if n is None:
        n = 1 + max((max(e) for e in edges), default=0)
    return Graph.from_edges(n, edges, labels={"kind": "file", "path": str(path)})
