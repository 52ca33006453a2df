"""Synchronous multichannel radio rounds without collision detection.

A listener on channel ``c`` decodes a message iff exactly one of its graph
neighbours broadcasts on ``c`` in that round; collisions and silence look
the same. Broadcasters hear nothing.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import protocol as P
from . import rng
from ._jit import BACKEND, njit
from .graph import Graph

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ChannelId:
    cls: P.ChannelClass
    index: int = 1

    def to_global(self, params: P.ProtocolParams) -> int:
        return params.channel_index(self.cls, self.index)

    @classmethod
    def from_global(cls, g: int, params: P.ProtocolParams) -> "ChannelId":
        return cls(*params.channel_of(g))

    def __str__(self) -> str:
        tag = {"REPORT": "R", "DECAY": "D", "HERALD": "A", "HANDSHAKE": "H", "GAME": "G"}[self.cls.name]
        return tag if self.cls >= P.ChannelClass.HANDSHAKE else f"{tag}{self.index}"


@dataclass(frozen=True)
class Delivery:
    receiver: int
    message: P.Message


class DuplicateIntent(ValueError):
    pass


@njit
def resolve_kernel(indptr, indices, act, chan, recv):
    for v in range(act.shape[0]):
        recv[v] = -1
        if act[v] != P.ACT_LISTEN:
            continue
        c = chan[v]
        found = -1
        hits = 0
        for p in range(indptr[v], indptr[v + 1]):
            u = indices[p]
            if act[u] == P.ACT_SEND and chan[u] == c:
                hits += 1
                found = u
                if hits > 1:
                    break
        if hits == 1:
            recv[v] = found


def resolve_numpy(rows, indices, act, chan, recv):
    """Vectorised twin of :func:`resolve_kernel`; ``rows`` is the CSR row index."""
    n = act.shape[0]
    hit = (act[rows] == P.ACT_LISTEN) & (act[indices] == P.ACT_SEND) & (chan[rows] == chan[indices])
    listeners = rows[hit]
    hits = np.bincount(listeners, minlength=n)
    senders = np.zeros(n, dtype=np.int64)
    np.add.at(senders, listeners, indices[hit])
    recv[:] = np.where(hits == 1, senders, -1)


def resolve_arrays(g: Graph, act, chan, recv, backend: str = BACKEND) -> None:
    if backend == "numba":
        resolve_kernel(g.indptr, g.indices, act, chan, recv)
    else:
        rows = np.repeat(np.arange(g.node_count, dtype=np.int64), g.degree())
        resolve_numpy(rows, g.indices, act, chan, recv)


def resolve_round(g: Graph, intents: list[P.Intent]) -> list[Delivery]:
    """Deliveries for one round, ordered by receiver id."""
    n = g.node_count
    act = np.zeros(n, dtype=np.int64)
    chan = np.full(n, -1, dtype=np.int64)
    msgs: dict[int, P.Message] = {}
    seen = set()
    for it in intents:
        if it.node in seen:
            raise DuplicateIntent(f"node {it.node} has more than one intent")
        seen.add(it.node)
        if it.action == "listen":
            act[it.node], chan[it.node] = P.ACT_LISTEN, it.channel
        elif it.action == "broadcast":
            act[it.node], chan[it.node] = P.ACT_SEND, it.channel
            msgs[it.node] = it.message
        elif it.action != "inactive":
            raise ValueError(f"unknown action {it.action!r}")
    recv = np.empty(n, dtype=np.int64)
    resolve_arrays(g, act, chan, recv)
    return [Delivery(v, msgs[int(u)]) for v, u in enumerate(recv.tolist()) if u >= 0]


# ---------------------------------------------------------------- engine

@njit
def fnv1a64(data):
    h = np.uint64(0xCBF29CE484222325)
    prime = np.uint64(0x100000001B3)
    for b in data:
        h = (h ^ np.uint64(b)) * prime
    return h


def _fnv1a64_numpy(data: np.ndarray) -> int:
    h = 0xCBF29CE484222325
    for b in data.tolist():
        h = ((h ^ b) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def hash_transitions(log: np.ndarray) -> int:
    """FNV-1a/64 of the canonical little-endian int64 (round, node, from, to) log."""
    data = np.ascontiguousarray(log, dtype="<i8").reshape(-1).view(np.uint8)
    if BACKEND == "numba":
        return int(fnv1a64(data))
    return _fnv1a64_numpy(data)


@dataclass
class RoundReport:
    round: int
    awake: int = 0
    delivered: int = 0
    transitions: int = 0
    new_m: int = 0
    new_e: int = 0


@dataclass
class Engine:
    """Owns the node state of one simulation; strictly one round at a time."""

    graph: Graph
    params: P.ProtocolParams
    wake_rounds: np.ndarray
    seed: int
    record_deliveries: bool = False
    round: int = 0
    ist: np.ndarray = field(init=False)
    gam: np.ndarray = field(init=False)
    hs_start: np.ndarray = field(init=False)
    decision_round: np.ndarray = field(init=False)

    def __post_init__(self):
        n = self.graph.node_count
        self.wake_rounds = np.asarray(self.wake_rounds, dtype=np.int64)
        if self.wake_rounds.shape != (n,) or np.any(self.wake_rounds < 0):
            raise ValueError("need one non-negative wake round per node")
        self.ist, self.gam = P.new_state(n)
        self.hs_start = np.full(n, -1, dtype=np.int64)
        self.decision_round = np.full(n, -1, dtype=np.int64)
        self._pi, self._pf = self.params.packed()
        self._act = np.zeros(n, dtype=np.int64)
        self._chan = np.full(n, -1, dtype=np.int64)
        self._msg = np.zeros((n, P.MSG_FIELDS), dtype=np.int64)
        self._recv = np.full(n, -1, dtype=np.int64)
        self._q = np.zeros(n)
        self._dr = np.zeros((n, 4), dtype=np.int64)
        self._ids = np.arange(n, dtype=np.int64)
        self._rows = np.repeat(self._ids, self.graph.degree())
        self._transitions: list[np.ndarray] = []
        self._deliveries: list[np.ndarray] = []
        self._wake_order = np.argsort(self.wake_rounds, kind="stable")
        self._wake_ptr = 0
        self.last_act = self._act
        self.last_chan = self._chan
        self.last_recv = self._recv

    @property
    def state(self) -> np.ndarray:
        return self.ist[:, P.F_STATE]

    def all_decided(self) -> bool:
        s = self.state
        return bool(np.all((s == P.M) | (s == P.E)))

    def advance(self) -> RoundReport:
        r = self.round
        ist, gam = self.ist, self.gam
        rep = RoundReport(r)

        before = ist[:, P.F_STATE].copy()
        order, ptr = self._wake_order, self._wake_ptr
        start = ptr
        while ptr < len(order) and self.wake_rounds[order[ptr]] <= r:
            ptr += 1
        if ptr > start:
            P.wake(ist, gam, order[start:ptr])
        self._wake_ptr = ptr

        now = ist[:, P.F_STATE]
        live = (now != P.ASLEEP) & (now != P.E)
        rep.awake = int(np.count_nonzero(live))
        if rep.awake:
            self._q, self._dr = rng.draw_round(self.seed, self._ids, ist[:, P.F_STEP],
                                               self.params.n_D, self.params.n_R, self.params.n_A)
            P.act_all(ist, gam, self._q, self._dr, self._act, self._chan, self._msg,
                      self._pi, self._pf)
            if BACKEND == "numba":
                resolve_kernel(self.graph.indptr, self.graph.indices, self._act, self._chan,
                               self._recv)
            else:
                resolve_numpy(self._rows, self.graph.indices, self._act, self._chan, self._recv)
            P.handle_all(ist, gam, self._dr, self._act, self._chan, self._msg, self._recv,
                         self._pi, self._pf)
            got = np.flatnonzero(self._recv >= 0)
            rep.delivered = len(got)
            if self.record_deliveries and len(got):
                rec = np.empty((len(got), 2 + P.MSG_FIELDS), dtype=np.int64)
                rec[:, 0] = r
                rec[:, 1] = got
                rec[:, 2:] = self._msg[self._recv[got]]
                self._deliveries.append(rec)
        else:
            self._act[:] = P.ACT_IDLE
            self._recv[:] = -1

        after = ist[:, P.F_STATE]
        changed = np.flatnonzero(after != before)
        if len(changed):
            frm, to = before[changed], after[changed]
            log = np.stack([np.full(len(changed), r), changed, frm, to], axis=1)
            self._transitions.append(log)
            rep.transitions = len(changed)
            hs = changed[(to == P.HC) | (to == P.LC)]
            self.hs_start[hs] = r
            dec = changed[(to == P.M) | (to == P.E)]
            self.decision_round[dec] = r
            rep.new_m = int(np.count_nonzero(to == P.M))
            rep.new_e = int(np.count_nonzero(to == P.E))
        self.round = r + 1
        return rep

    def transition_log(self) -> np.ndarray:
        if not self._transitions:
            return np.zeros((0, 4), dtype=np.int64)
        return np.concatenate(self._transitions)

    def delivery_log(self) -> np.ndarray:
        if not self._deliveries:
            return np.zeros((0, 2 + P.MSG_FIELDS), dtype=np.int64)
        return np.concatenate(self._deliveries)


def advance(engine: Engine) -> RoundReport:
    return engine.advance()


def trace_hash(engine_or_log) -> int:
    log = engine_or_log.transition_log() if isinstance(engine_or_log, Engine) else engine_or_log
    return hash_transitions(log)
