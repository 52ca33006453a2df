"""Omniscient checks over end-of-round snapshots.

The verifier sees ground truth the nodes never have: exact states, activity
values and which herald belongs to which leader. Everything here is
read-only and vectorised over the edge list where it is called every round.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import protocol as P
from .graph import Graph

SCHEMA_VERSION = 1

MIS_ADJACENCY = "MisAdjacency"
DOMINATION_MISSING = "DominationMissing"
UNDECIDED = "Undecided"
CROSSING_EDGE = "CrossingEdge"
DEGREE_BOUND = "DegreeBound"
VIOLATION_KINDS = (MIS_ADJACENCY, DOMINATION_MISSING, UNDECIDED, CROSSING_EDGE, DEGREE_BOUND)
SAFETY_KINDS = frozenset({MIS_ADJACENCY, DOMINATION_MISSING, CROSSING_EDGE})

# Hc counts that mean "executes handshake round 5 or 6 next" at end of round
LATE_HANDSHAKE_COUNTS = (4, 5)


@dataclass(frozen=True)
class Violation:
    kind: str
    round: int
    nodes: tuple[int, ...]
    detail: str = ""

    def __post_init__(self):
        if self.kind not in VIOLATION_KINDS:
            raise ValueError(f"unknown violation kind {self.kind!r}")
        if self.kind == MIS_ADJACENCY and len(self.nodes) != 2:
            raise ValueError("MisAdjacency names exactly two nodes")

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "kind": self.kind, "round": self.round,
                "nodes": list(self.nodes), "detail": self.detail}

    @classmethod
    def from_dict(cls, d: dict) -> "Violation":
        return cls(d["kind"], int(d["round"]), tuple(d["nodes"]), d.get("detail", ""))


def _ro(a: np.ndarray) -> np.ndarray:
    v = a.view()
    v.flags.writeable = False
    return v


@dataclass
class Snapshot:
    round: int
    graph: Graph
    state: np.ndarray
    gamma: np.ndarray
    leader_id: np.ndarray
    count: np.ndarray
    hs_start: np.ndarray
    _pairs: tuple | None = field(default=None, repr=False)
    _rows: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def from_engine(cls, engine, copy: bool = False) -> "Snapshot":
        ist = engine.ist
        take = (lambda a: a.copy()) if copy else _ro
        return cls(engine.round - 1, engine.graph, take(ist[:, P.F_STATE]), take(engine.gam),
                   take(ist[:, P.F_LEADER]), take(ist[:, P.F_COUNT]), take(engine.hs_start),
                   _rows=engine._rows)

    @classmethod
    def build(cls, graph: Graph, state, *, round: int = 0, gamma=None, leader_id=None,
              count=None, hs_start=None) -> "Snapshot":
        n = graph.node_count

        def arr(x, fill, dtype):
            return np.full(n, fill, dtype=dtype) if x is None else np.asarray(x, dtype=dtype)

        return cls(round, graph, arr(state, 0, np.int64), arr(gamma, 0.0, np.float64),
                   arr(leader_id, -1, np.int64), arr(count, 0, np.int64),
                   arr(hs_start, -1, np.int64))

    @property
    def rows(self) -> np.ndarray:
        if self._rows is None:
            self._rows = np.repeat(np.arange(self.graph.node_count), self.graph.degree())
        return self._rows

    def pairs(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Current leader-herald pairs as (leaders, heralds, handshake start rounds)."""
        if self._pairs is None:
            h = np.flatnonzero(self.state == P.H)
            lead = self.leader_id[h]
            ok = lead >= 0
            h, lead = h[ok], lead[ok]
            ok = (self.state[lead] == P.L) & (self.hs_start[lead] == self.hs_start[h])
            h, lead = h[ok], lead[ok]
            self._pairs = (lead, h, self.hs_start[h])
        return self._pairs


def _edges_both_in(s: Snapshot, mask: np.ndarray) -> np.ndarray:
    e = s.graph.edges
    if not len(e):
        return e
    return e[mask[e[:, 0]] & mask[e[:, 1]]]


def check_property_p(s: Snapshot) -> list[Violation]:
    bad = _edges_both_in(s, s.state == P.M)
    return [Violation(MIS_ADJACENCY, s.round, (int(u), int(v)), "adjacent dominators")
            for u, v in bad]


def _m_neighbor_count(s: Snapshot) -> np.ndarray:
    in_m = (s.state == P.M).astype(np.int64)
    return np.bincount(s.rows, weights=in_m[s.graph.indices],
                       minlength=s.graph.node_count).astype(np.int64)


def check_domination(s: Snapshot) -> list[Violation]:
    e_nodes = np.flatnonzero(s.state == P.E)
    if not len(e_nodes):
        return []
    lonely = e_nodes[_m_neighbor_count(s)[e_nodes] == 0]
    return [Violation(DOMINATION_MISSING, s.round, (int(v),), "eliminated without a dominator")
            for v in lonely]


def check_final(s: Snapshot, budget: int, wake) -> list[Violation]:
    wake = np.asarray(wake)
    decided = (s.state == P.M) | (s.state == P.E)
    late = np.flatnonzero(~decided & (wake + budget <= s.round))
    out = [Violation(UNDECIDED, s.round, (int(v),), f"undecided {s.round - int(wake[v])} "
                     f"rounds after wake-up, budget {budget}") for v in late]
    out += check_property_p(s)
    covered = (s.state == P.M) | (_m_neighbor_count(s) > 0)
    for v in np.flatnonzero(decided & ~covered):
        out.append(Violation(DOMINATION_MISSING, s.round, (int(v),), "not covered by final M"))
    return out


def is_maximal_independent(g: Graph, in_set) -> bool:
    """Direct definition: no edge inside the set, every outside node has a neighbour in it."""
    in_set = np.asarray(in_set, dtype=bool)
    for u, v in g.edges.tolist():
        if in_set[u] and in_set[v]:
            return False
    for v in range(g.node_count):
        if not in_set[v] and not any(in_set[w] for w in g.neighbors(v).tolist()):
            return False
    return True


def _threats(s: Snapshot) -> np.ndarray:
    st = s.state
    late_hc = (st == P.HC) & np.isin(s.count, LATE_HANDSHAKE_COUNTS)
    return (st == P.L) | (st == P.H) | late_hc


def classify_pair(s: Snapshot, leader: int, herald: int) -> str:
    """'good' iff no neighbour of the leader besides its herald is a leader,
    a herald, or a herald candidate late in its handshake."""
    ls, hs, _ = s.pairs()
    if not np.any((ls == leader) & (hs == herald)):
        raise ValueError(f"({leader}, {herald}) is not a current leader-herald pair")
    threat = _threats(s)
    nb = s.graph.neighbors(leader)
    nb = nb[nb != herald]
    return "bad" if threat[nb].any() else "good"


def classify_pairs(s: Snapshot) -> np.ndarray:
    """Boolean 'good' flag for every pair returned by ``s.pairs()``."""
    ls, hs, _ = s.pairs()
    if not len(ls):
        return np.zeros(0, dtype=bool)
    threat = _threats(s)
    hits = np.bincount(s.rows, weights=threat[s.graph.indices].astype(np.float64),
                       minlength=s.graph.node_count)
    # the herald itself is always one of the leader's threats
    return hits[ls] - 1 < 0.5


def crossing_edge_audit(s: Snapshot) -> list[Violation]:
    ls, hs, starts = s.pairs()
    if len(ls) < 2:
        return []
    n = s.graph.node_count
    pid = np.full(n, -1, dtype=np.int64)
    pid[ls] = np.arange(len(ls))
    pid[hs] = np.arange(len(hs))
    e = s.graph.edges
    pu, pv = pid[e[:, 0]], pid[e[:, 1]]
    cross = (pu >= 0) & (pv >= 0) & (pu != pv)
    if not cross.any():
        return []
    groups: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for (u, v), a, b in zip(e[cross].tolist(), pu[cross].tolist(), pv[cross].tolist()):
        groups.setdefault((min(a, b), max(a, b)), []).append((u, v))
    out = []
    for (a, b), edges in sorted(groups.items()):
        if starts[a] > starts[b]:
            a, b = b, a
        l1, h1, r1 = int(ls[a]), int(hs[a]), int(starts[a])
        l2, h2, r2 = int(ls[b]), int(hs[b]), int(starts[b])
        found = {frozenset(x) for x in edges}
        if r1 == r2:
            ok = found <= {frozenset((l1, l2)), frozenset((h1, h2))}
        elif r2 == r1 + 2:
            ok = found == {frozenset((l1, h2))}
        else:
            ok = False
        if not ok:
            desc = ", ".join(f"{u}-{v}" for u, v in sorted(tuple(sorted(f)) for f in found))
            out.append(Violation(CROSSING_EDGE, s.round, (l1, h1, l2, h2),
                                 f"pairs started {r1} and {r2}; crossing edges {desc}"))
    return out


def activity_mass(s: Snapshot, u: int, open: bool = False) -> float:
    """Sum of activity over the closed neighbourhood; ``open=True`` drops u itself."""
    total = float(s.gamma[s.graph.neighbors(u)].sum())
    return total if open else total + float(s.gamma[u])


def activity_masses(s: Snapshot) -> np.ndarray:
    g = s.gamma
    return g + np.bincount(s.rows, weights=g[s.graph.indices], minlength=s.graph.node_count)


def is_fat(s: Snapshot, u: int, eta_hat: float) -> bool:
    if not 0 < eta_hat <= 1:
        raise ValueError("eta_hat must lie in (0, 1]")
    nb = s.graph.neighbors(u)
    if not len(nb):
        return True
    mine = activity_mass(s, u)
    return mine >= eta_hat * max(activity_mass(s, int(v)) for v in nb)


def _hf_or_m(s: Snapshot) -> np.ndarray:
    st = s.state
    return ((st >= P.A) & (st <= P.L)) | (st == P.M)


def induced_degrees(s: Snapshot) -> np.ndarray:
    mask = _hf_or_m(s)
    deg = np.bincount(s.rows, weights=mask[s.graph.indices].astype(np.float64),
                      minlength=s.graph.node_count).astype(np.int64)
    return np.where(mask, deg, 0)


def default_degree_cap(n: int) -> int:
    return int(math.ceil(math.log2(max(n, 2)) ** 4))


def herald_filter_degree_probe(s: Snapshot, cap: int | None = None) -> list[Violation]:
    if cap is None:
        cap = default_degree_cap(s.graph.node_count)
    deg = induced_degrees(s)
    return [Violation(DEGREE_BOUND, s.round, (int(v),), f"induced degree {int(deg[v])} > {cap}")
            for v in np.flatnonzero(deg > cap)]


def max_gamma_near(s: Snapshot, nodes: np.ndarray, exclude: np.ndarray) -> float:
    """Largest activity among neighbours of ``nodes`` outside ``exclude``."""
    if not len(nodes):
        return 0.0
    best = 0.0
    skip = set(exclude.tolist())
    for v in nodes.tolist():
        nb = s.graph.neighbors(v)
        for w in nb.tolist():
            if w not in skip and s.gamma[w] > best:
                best = float(s.gamma[w])
    return best
