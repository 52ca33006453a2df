"""Counter-based per-node random streams.

Every draw is a pure function of ``(master_seed, node, step, slot)``:
splitmix64 finalisers chained over the four coordinates. A node's stream
therefore never depends on which other nodes exist, on iteration order, or
on the backend, and a single node can be replayed in isolation.
"""

from __future__ import annotations

import numpy as np

from ._jit import BACKEND, njit

_M64 = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_C1 = np.uint64(0xBF58476D1CE4E5B9)
_C2 = np.uint64(0x94D049BB133111EB)

# draw slots consumed each awake round
SLOT_Q, SLOT_J, SLOT_K, SLOT_HERALD, SLOT_COLOR = range(5)
N_SLOTS = 5

# columns of the integer draw matrix
D_J, D_K, D_HERALD, D_COLOR = range(4)


def _mix(x: np.ndarray) -> np.ndarray:
    x = x + _GOLDEN
    x = (x ^ (x >> np.uint64(30))) * _C1
    x = (x ^ (x >> np.uint64(27))) * _C2
    return x ^ (x >> np.uint64(31))


def raw_words(seed: int, nodes, steps, slot: int) -> np.ndarray:
    nodes = np.asarray(nodes, dtype=np.int64).astype(np.uint64)
    steps = np.asarray(steps, dtype=np.int64).astype(np.uint64)
    h = _mix(np.full(nodes.shape, np.uint64(seed & _M64)))
    h = _mix(h ^ nodes)
    h = _mix(h ^ steps)
    return _mix(h ^ np.uint64(slot))


def uniform(words: np.ndarray) -> np.ndarray:
    return (words >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def herald_index(words: np.ndarray, n_a: int) -> np.ndarray:
    """Index in 1..n_a with P(i)=2^-i, or 0 for the leftover mass 2^-n_a."""
    low = words & np.uint64((1 << n_a) - 1)
    out = np.zeros(low.shape, dtype=np.int64)
    nz = low != 0
    lowest = (low[nz] & (~low[nz] + np.uint64(1))).astype(np.float64)
    out[nz] = np.frexp(lowest)[1]  # exponent e with lowest == 2^(e-1)
    return out


@njit
def _mix1(x):
    x = x + np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


@njit
def _draw_kernel(seed, nodes, steps, n_d, n_r, n_a, q, ints):
    base = _mix1(np.uint64(seed))
    mask = np.uint64((1 << n_a) - 1)
    for p in range(nodes.shape[0]):
        h = _mix1(_mix1(base ^ np.uint64(nodes[p])) ^ np.uint64(steps[p]))
        q[p] = float(_mix1(h ^ np.uint64(SLOT_Q)) >> np.uint64(11)) * (1.0 / 9007199254740992.0)
        ints[p, D_J] = 1 + np.int64(_mix1(h ^ np.uint64(SLOT_J)) % np.uint64(n_d))
        ints[p, D_K] = 1 + np.int64(_mix1(h ^ np.uint64(SLOT_K)) % np.uint64(n_r))
        low = _mix1(h ^ np.uint64(SLOT_HERALD)) & mask
        idx = 0
        if low != 0:
            idx = 1
            while (low & np.uint64(1)) == 0:
                low = low >> np.uint64(1)
                idx += 1
        ints[p, D_HERALD] = idx
        ints[p, D_COLOR] = np.int64(_mix1(h ^ np.uint64(SLOT_COLOR)) >> np.uint64(63))


def draw_round(seed: int, nodes, steps, n_d: int, n_r: int, n_a: int):
    """Fresh per-round draws: ``q`` in [0,1) and an int matrix of (j, k, herald, color)."""
    if BACKEND == "numba":
        nodes = np.asarray(nodes, dtype=np.int64)
        q = np.empty(len(nodes))
        ints = np.empty((len(nodes), 4), dtype=np.int64)
        _draw_kernel(np.uint64(seed & _M64), nodes, np.asarray(steps, dtype=np.int64), n_d, n_r, n_a, q, ints)
        return q, ints
    q = uniform(raw_words(seed, nodes, steps, SLOT_Q))
    ints = np.empty((len(q), 4), dtype=np.int64)
    ints[:, D_J] = 1 + (raw_words(seed, nodes, steps, SLOT_J) % np.uint64(n_d)).astype(np.int64)
    ints[:, D_K] = 1 + (raw_words(seed, nodes, steps, SLOT_K) % np.uint64(n_r)).astype(np.int64)
    ints[:, D_HERALD] = herald_index(raw_words(seed, nodes, steps, SLOT_HERALD), n_a)
    ints[:, D_COLOR] = (raw_words(seed, nodes, steps, SLOT_COLOR) >> np.uint64(63)).astype(np.int64)
    return q, ints
