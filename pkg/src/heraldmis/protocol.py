"""HeraldMIS node state machine.

Node state is stored column-wise in an ``int64[n, N_FIELDS]`` matrix plus a
``float64[n]`` activity vector so the same per-node kernels serve the
engine (all nodes, compiled) and the single-node ``NodeCtx`` API below
(one row, used for unit tests and replay).

A round for an awake node is ``node_tick`` -> ``node_intent`` -> (radio
resolution) -> ``node_handle`` -> ``node_promote``. Only ``node_handle`` and
``node_promote`` change the protocol state; tick and intent touch counters,
activity and the per-round choices (colour, enforce) only.
"""

from __future__ import annotations

import dataclasses
import enum
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import rng
from ._jit import njit


class State(enum.IntEnum):
    ASLEEP = 0
    W = 1
    D = 2
    A = 3
    HC = 4  # herald candidate, H'
    LC = 5  # leader candidate, L'
    H = 6
    L = 7
    M = 8
    E = 9


class Kind(enum.IntEnum):
    NONE = 0
    DECAY = 1
    ADV = 2
    HS_HERALD = 3
    HS_LEADER = 4
    BLOCK = 5
    GAME = 6
    RBG_RESULT = 7
    RBG_NOTIFY = 8
    MIS = 9


class ChannelClass(enum.IntEnum):
    REPORT = 0
    DECAY = 1
    HERALD = 2
    HANDSHAKE = 3
    GAME = 4


HERALD_FILTER = frozenset({State.A, State.HC, State.LC, State.H, State.L})
DECIDED = frozenset({State.M, State.E})

# kernel-level constants (plain ints so numba folds them)
ASLEEP, W, D, A, HC, LC, H, L, M, E = range(10)
K_NONE, K_DECAY, K_ADV, K_HS_HERALD, K_HS_LEADER, K_BLOCK, K_GAME, K_RBG_RESULT, K_RBG_NOTIFY, K_MIS = range(10)
ACT_IDLE, ACT_LISTEN, ACT_SEND = 0, 1, 2
FAIL, SUCC = 0, 1
RED, BLUE = 0, 1

(F_ID, F_STATE, F_COUNT, F_PHASE, F_LONELY, F_LEADER, F_MEET, F_HS, F_GAME,
 F_COLOR, F_ENFORCE, F_STEP) = range(12)
N_FIELDS = 12

M_KIND, M_STATE, M_SENDER, M_A, M_B, M_C = range(6)
MSG_FIELDS = 6

(P_NKNOWN, P_NR, P_ND, P_NA, P_TAU_W, P_TAU_D, P_TAU_LONELY, P_TAU_RB,
 P_PHASE_CAP, P_LONELY_ALL) = range(10)
PF_PI_L, PF_SIG_P, PF_SIG_M, PF_GMIN, PF_RBG_FACTOR = range(5)

D_J, D_K, D_HERALD, D_COLOR = rng.D_J, rng.D_K, rng.D_HERALD, rng.D_COLOR


# ---------------------------------------------------------------- parameters

DESK_DEFAULTS = {
    "c_W": 2.0,
    "c_D": 2.0,
    "c_L": 80.0,
    "c_R": 24.0,
    "sigma_plus": 2.0 ** (1.0 / 16.0),
    "m_bar": 1,
    "pi_l": 0.1,
    "rbg_decay_exp": 20,
}


@dataclass(frozen=True)
class ProtocolParams:
    n_known: int
    alpha: int
    F: int
    n_R: int
    n_D: int
    n_A: int
    pi_l: float
    sigma_plus: float
    sigma_minus: float
    rbg_decay_exp: int
    m_bar: float
    gamma_min: float
    tau_W: int
    tau_D: int
    tau_lonely: int
    tau_red_blue: int
    runtime_budget: int
    lonely_scope: str = "herald"
    # analysis-only quantities, consumed by the verifier probes
    delta: float = 0.0
    eta: float = 1.0
    gamma_low: float = 0.0
    delta_max: int = 0
    divergences: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.tau_red_blue % 8:
            raise ValueError("tau_red_blue must be a multiple of 8")
        if not 0 < self.pi_l <= 0.1:
            raise ValueError("pi_l must lie in (0, 1/10]")
        if not 0 < self.gamma_min <= 0.5:
            raise ValueError("gamma_min must lie in (0, 1/2]")
        if self.sigma_plus <= 1 or self.sigma_minus <= 1:
            raise ValueError("activity factors must exceed 1")
        if min(self.n_R, self.n_D, self.n_A, self.tau_W, self.tau_D, self.tau_lonely) < 1:
            raise ValueError("channel counts and thresholds must be positive")
        if self.lonely_scope not in ("herald", "all"):
            raise ValueError("lonely_scope must be 'herald' or 'all'")

    @property
    def phase_cap(self) -> int:
        return max(0, int(math.floor(math.log2(self.n_known))) - 2)

    @property
    def channel_total(self) -> int:
        return self.n_R + self.n_D + self.n_A + 2

    def channel_index(self, cls: ChannelClass, index: int = 1) -> int:
        """Global 0-based index of channel ``cls_index`` (index is 1-based)."""
        limit = {ChannelClass.REPORT: self.n_R, ChannelClass.DECAY: self.n_D,
                 ChannelClass.HERALD: self.n_A}.get(cls, 1)
        if not 1 <= index <= limit:
            raise ValueError(f"channel {cls.name}_{index} out of range 1..{limit}")
        base = (0, self.n_R, self.n_R + self.n_D, self.n_R + self.n_D + self.n_A,
                self.n_R + self.n_D + self.n_A + 1)[cls]
        return base + index - 1

    def channel_of(self, g: int) -> tuple[ChannelClass, int]:
        if g < self.n_R:
            return ChannelClass.REPORT, g + 1
        g -= self.n_R
        if g < self.n_D:
            return ChannelClass.DECAY, g + 1
        g -= self.n_D
        if g < self.n_A:
            return ChannelClass.HERALD, g + 1
        g -= self.n_A
        if g == 0:
            return ChannelClass.HANDSHAKE, 1
        if g == 1:
            return ChannelClass.GAME, 1
        raise ValueError("channel index out of range")

    def packed(self) -> tuple[np.ndarray, np.ndarray]:
        pi = np.array([self.n_known, self.n_R, self.n_D, self.n_A, self.tau_W, self.tau_D,
                       self.tau_lonely, self.tau_red_blue, self.phase_cap,
                       1 if self.lonely_scope == "all" else 0], dtype=np.int64)
        pf = np.array([self.pi_l, self.sigma_plus, self.sigma_minus, self.gamma_min,
                       self.sigma_plus ** (-self.rbg_decay_exp)], dtype=np.float64)
        return pi, pf

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ProtocolParams":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _log2(n: int) -> float:
    return math.log2(max(n, 2))


def analysis_constants(n: int, n_R: int) -> dict:
    """Activity constants exactly as the analysis fixes them."""
    m_bar = float(2 ** 16 * n_R)
    return {
        "m_bar": m_bar,
        "sigma_plus": 2.0 ** (6.0 / (1000.0 * m_bar)),
        "sigma_minus": 2.0 ** (12.0 / 100.0),
        "gamma_min": _log2(n) ** -24,
    }


def derive_params(n: int, F: int, alpha: int, overrides: dict | None = None,
                  preset: str = "desk") -> ProtocolParams:
    """Fill every protocol constant from ``(n, F, alpha)``.

    ``preset="analysis"`` uses the analysis constants for the activity dynamics;
    ``overrides`` wins over both presets. Threshold scalings ``c_W, c_D, c_L,
    c_R`` and the budget multiplier (default ``2 alpha^2``) may be overridden.
    """
    if n < 1 or F < 1 or alpha < 1:
        raise ValueError("need n, F, alpha >= 1")
    ov = dict(overrides or {})
    c = {k: ov.pop(k, v) for k, v in DESK_DEFAULTS.items()}
    budget_mult = ov.pop("budget_multiplier", None)
    lg = _log2(n)

    n_R = int(ov.pop("n_R", 3 * alpha * alpha))
    n_A = int(ov.pop("n_A", max(1, math.ceil(math.log2(lg))) if lg > 1 else 1))
    n_D = int(ov.pop("n_D", max(1, F - n_R - n_A - 2)))
    tau_W = int(ov.pop("tau_W", max(1, math.ceil(c["c_W"] * lg))))
    tau_D = int(ov.pop("tau_D", max(1, math.ceil(c["c_D"] * lg / F))))
    tau_lonely = int(ov.pop("tau_lonely", math.ceil(c["c_L"] * (lg * lg / F + lg))))
    tau_rb = int(ov.pop("tau_red_blue", 8 * math.ceil(c["c_R"] * lg / 8)))

    exact = analysis_constants(n, n_R)
    if preset == "analysis":
        act = dict(exact)
    elif preset == "desk":
        act = {"m_bar": c["m_bar"], "sigma_plus": c["sigma_plus"],
               "gamma_min": min(0.5, lg ** -3)}
        act["sigma_minus"] = act["sigma_plus"] ** (20 * act["m_bar"])
    else:
        raise ValueError(f"unknown preset {preset!r}")
    for k in ("m_bar", "sigma_plus", "gamma_min"):
        if k in ov:
            act[k] = ov.pop(k)
            if k != "gamma_min" and "sigma_minus" not in ov:
                act["sigma_minus"] = act["sigma_plus"] ** (20 * act["m_bar"])
    if "sigma_minus" in ov:
        act["sigma_minus"] = ov.pop("sigma_minus")
    pi_l = float(ov.pop("pi_l", c["pi_l"]))
    lonely_scope = ov.pop("lonely_scope", "herald")
    if ov:
        raise ValueError(f"unknown parameter overrides: {sorted(ov)}")

    if budget_mult is None:
        budget_mult = 2 * alpha * alpha
    runtime_budget = int(math.ceil(budget_mult * tau_lonely))

    delta = math.log2(lg) / (2 * math.log2(alpha)) if alpha > 1 else math.inf
    gamma_low = math.sqrt(act["gamma_min"])
    divergences = {k: {"used": act[k], "analysis": exact[k]}
                   for k in ("m_bar", "sigma_plus", "sigma_minus", "gamma_min")
                   if not math.isclose(act[k], exact[k], rel_tol=1e-12)}

    params = ProtocolParams(
        n_known=n, alpha=alpha, F=F, n_R=n_R, n_D=n_D, n_A=n_A, pi_l=pi_l,
        sigma_plus=float(act["sigma_plus"]), sigma_minus=float(act["sigma_minus"]),
        rbg_decay_exp=int(c["rbg_decay_exp"]), m_bar=float(act["m_bar"]),
        gamma_min=float(act["gamma_min"]), tau_W=tau_W, tau_D=tau_D,
        tau_lonely=tau_lonely, tau_red_blue=tau_rb, runtime_budget=runtime_budget,
        lonely_scope=lonely_scope, delta=delta, eta=float(alpha) ** -8,
        gamma_low=gamma_low, delta_max=int(math.ceil(lg ** 4)), divergences=divergences,
    )
    if F < n_R + n_A + 3:
        warnings.warn(f"{params.channel_total} channels in use but only F={F} available",
                      stacklevel=2)
    if tau_lonely <= tau_rb + 8:
        warnings.warn("tau_lonely does not exceed tau_red_blue + 8; paired nodes may "
                      "promote through the lonely counter", stacklevel=2)
    return params


# ------------------------------------------------------------------- kernels

@njit
def _send(i, ist, act, chan, msg, ch, kind, a, b, c):
    act[i] = ACT_SEND
    chan[i] = ch
    msg[i, M_KIND] = kind
    msg[i, M_STATE] = ist[i, F_STATE]
    msg[i, M_SENDER] = ist[i, F_ID]
    msg[i, M_A] = a
    msg[i, M_B] = b
    msg[i, M_C] = c


@njit
def _listen(i, act, chan, ch):
    act[i] = ACT_LISTEN
    chan[i] = ch


@njit
def node_tick(i, ist, gam, pi, pf):
    s = ist[i, F_STATE]
    if s == ASLEEP or s == E:
        return
    ist[i, F_STEP] += 1
    ist[i, F_COUNT] += 1
    if pi[P_LONELY_ALL] != 0 or (s >= A and s <= L):
        ist[i, F_LONELY] += 1
    g = gam[i]
    if g > 0.0:
        g = g * pf[PF_SIG_P]
        gam[i] = 0.5 if g > 0.5 else g


@njit
def node_intent(i, ist, gam, q, dr, act, chan, msg, pi, pf):
    act[i] = ACT_IDLE
    chan[i] = -1
    s = ist[i, F_STATE]
    if s == ASLEEP or s == E:
        return
    n_r = pi[P_NR]
    n_d = pi[P_ND]
    ch_d0 = n_r
    ch_a0 = n_r + n_d
    ch_h = n_r + n_d + pi[P_NA]
    ch_g = ch_h + 1
    me = ist[i, F_ID]
    k = dr[i, D_K]
    c = ist[i, F_COUNT]

    if s == W:
        _listen(i, act, chan, k - 1)
    elif s == D:
        thr = (2.0 ** ist[i, F_PHASE]) / pi[P_NKNOWN]
        qq = q[i]
        if qq < thr:
            _send(i, ist, act, chan, msg, ch_d0 + dr[i, D_J] - 1, K_DECAY, me, 0, 0)
        elif qq < 0.5:
            _listen(i, act, chan, ch_d0 + dr[i, D_J] - 1)
        else:
            _listen(i, act, chan, k - 1)
    elif s == A:
        hi = dr[i, D_HERALD]
        qq = q[i] if hi != 0 else 1.0
        g = gam[i]
        if qq < pf[PF_PI_L] * g:
            _listen(i, act, chan, ch_a0 + hi - 1)
        elif qq < g:
            _send(i, ist, act, chan, msg, ch_a0 + hi - 1, K_ADV, me, 0, 0)
        else:
            _listen(i, act, chan, k - 1)
    elif s == HC:
        if c == 3 or c == 4:
            _listen(i, act, chan, ch_h)
        else:
            _send(i, ist, act, chan, msg, ch_h, K_HS_HERALD, ist[i, F_LEADER], 0, 0)
    elif s == LC:
        if c == 3 or c == 4:
            _send(i, ist, act, chan, msg, ch_h, K_HS_LEADER, me, k, 0)
        else:
            _listen(i, act, chan, ch_h)
    elif s == H:
        c8 = c % 8
        lead = ist[i, F_LEADER]
        if c8 % 2 == 1:
            _send(i, ist, act, chan, msg, ch_h, K_BLOCK, lead, 0, 0)
        elif c8 == 2 or c8 == 4:
            _send(i, ist, act, chan, msg, ch_g, K_GAME, lead, 0, 0)
        elif c8 == 6:
            _listen(i, act, chan, ist[i, F_MEET] - 1)
        else:
            _send(i, ist, act, chan, msg, ist[i, F_MEET] - 1, K_RBG_NOTIFY, lead, 0, 0)
    elif s == L:
        c8 = c % 8
        if c8 % 2 == 1:
            if c8 == 1:
                ist[i, F_COLOR] = dr[i, D_COLOR]
            _send(i, ist, act, chan, msg, ch_h, K_BLOCK, me, 0, 0)
        elif c8 == 2 or c8 == 4:
            listens = (ist[i, F_COLOR] == BLUE) if c8 == 2 else (ist[i, F_COLOR] == RED)
            if listens:
                _listen(i, act, chan, ch_g)
            else:
                _send(i, ist, act, chan, msg, ch_g, K_GAME, me, 0, 0)
        elif c8 == 6:
            _send(i, ist, act, chan, msg, ist[i, F_MEET] - 1, K_RBG_RESULT, me,
                  ist[i, F_GAME], k)
        else:
            _listen(i, act, chan, ist[i, F_MEET] - 1)
    elif s == M:
        if ist[i, F_ENFORCE] != 0:
            _send(i, ist, act, chan, msg, ch_h, K_MIS, me, 0, 0)
            ist[i, F_ENFORCE] = 0
        else:
            qq = q[i]
            if qq < 0.5:
                _send(i, ist, act, chan, msg, ch_h, K_MIS, me, 0, 0)
                ist[i, F_ENFORCE] = 0
            elif qq < 0.75:
                _send(i, ist, act, chan, msg, ch_g, K_MIS, me, 0, 0)
                ist[i, F_ENFORCE] = 1
            else:
                _send(i, ist, act, chan, msg, k - 1, K_MIS, me, 0, 0)
                ist[i, F_ENFORCE] = 1


@njit
def _become_m(i, ist, gam):
    ist[i, F_STATE] = M
    ist[i, F_COUNT] = 0
    ist[i, F_ENFORCE] = 0
    gam[i] = 0.0


@njit
def _become_e(i, ist, gam):
    ist[i, F_STATE] = E
    gam[i] = 0.0


@njit
def node_handle(i, ist, gam, dr, act, chan, msg, src, pi, pf):
    """End-of-round transition of node ``i``; ``src`` is the row of the
    delivered message in ``msg`` or -1 for silence."""
    s = ist[i, F_STATE]
    if s == ASLEEP or s == E or s == M:
        return
    has = src >= 0
    mk = K_NONE
    ms = -1
    ma = -1
    mb = -1
    mc = -1
    if has:
        mk = msg[src, M_KIND]
        ms = msg[src, M_STATE]
        ma = msg[src, M_A]
        mb = msg[src, M_B]
        mc = msg[src, M_C]
    c = ist[i, F_COUNT]
    me = ist[i, F_ID]
    if has and s >= A and s <= L:
        ist[i, F_LONELY] = 0

    if s == W or s == D:
        if s == W:
            if c == pi[P_TAU_W]:
                ist[i, F_STATE] = D
                ist[i, F_COUNT] = 0
                ist[i, F_PHASE] = 0
        else:
            if act[i] == ACT_SEND:
                ist[i, F_STATE] = A
                ist[i, F_COUNT] = 0
                ist[i, F_LONELY] = 0
                gam[i] = pf[PF_GMIN]
                return
            if c == pi[P_TAU_D]:
                ist[i, F_COUNT] = 0
                ph = ist[i, F_PHASE] + 1
                ist[i, F_PHASE] = ph if ph < pi[P_PHASE_CAP] else pi[P_PHASE_CAP]
        if has:
            if ms == D:
                ist[i, F_STATE] = W
                ist[i, F_COUNT] = 0
            elif ms == M:
                _become_e(i, ist, gam)
    elif s == A:
        if act[i] == ACT_SEND:
            ist[i, F_STATE] = LC
            ist[i, F_COUNT] = 0
            ist[i, F_HS] = SUCC
            ist[i, F_LEADER] = me
        elif chan[i] >= pi[P_NR] + pi[P_ND]:
            if has:
                ist[i, F_LEADER] = ma
                ist[i, F_STATE] = HC
                ist[i, F_COUNT] = 0
                ist[i, F_HS] = SUCC
                ist[i, F_LONELY] = 0
        elif has:
            if ms == M:
                _become_e(i, ist, gam)
            elif ms == L or ms == H:
                g = gam[i] / pf[PF_SIG_M]
                gam[i] = g if g > pf[PF_GMIN] else pf[PF_GMIN]
                ist[i, F_LONELY] = 0
    elif s == HC or s == LC:
        listened = act[i] == ACT_LISTEN
        if listened and has and ms == M:
            _become_e(i, ist, gam)
            return
        if s == HC:
            if listened:
                if (not has) or mk != K_HS_LEADER or ma != ist[i, F_LEADER]:
                    ist[i, F_HS] = FAIL
                else:
                    ist[i, F_MEET] = mb
        else:
            if listened:
                if (not has) or mk != K_HS_HERALD or ma != me:
                    ist[i, F_HS] = FAIL
            else:
                ist[i, F_MEET] = dr[i, D_K]
        if ist[i, F_HS] == FAIL:
            ist[i, F_COUNT] = 0
            ist[i, F_STATE] = A
        elif c == 6:
            ist[i, F_COUNT] = 0
            ist[i, F_STATE] = H if s == HC else L
            ist[i, F_GAME] = SUCC
            ist[i, F_LONELY] = 0
    elif s == H or s == L:
        g = gam[i] * pf[PF_RBG_FACTOR]
        gam[i] = g if g > pf[PF_GMIN] else pf[PF_GMIN]
        c8 = c % 8
        if s == H:
            if c8 == 6:
                ok = has and mk == K_RBG_RESULT and ma == ist[i, F_LEADER] and mb == SUCC
                if not ok:
                    ist[i, F_COUNT] = 0
                    ist[i, F_STATE] = A
                    ist[i, F_LONELY] = 0
                else:
                    ist[i, F_MEET] = mc
                if ist[i, F_COUNT] > pi[P_TAU_RB]:
                    _become_e(i, ist, gam)
        else:
            if act[i] == ACT_LISTEN and (c8 == 2 or c8 == 4):
                if (not has) or ma != me:
                    ist[i, F_GAME] = FAIL
            elif c8 == 6:
                ist[i, F_MEET] = dr[i, D_K]
                if ist[i, F_GAME] == FAIL:
                    ist[i, F_COUNT] = 0
                    ist[i, F_STATE] = A
                    ist[i, F_LONELY] = 0
                if ist[i, F_COUNT] > pi[P_TAU_RB]:
                    _become_m(i, ist, gam)


@njit
def node_promote(i, ist, gam, pi):
    s = ist[i, F_STATE]
    if s == ASLEEP or s == M or s == E:
        return
    if pi[P_LONELY_ALL] == 0 and not (s >= A and s <= L):
        return
    if ist[i, F_LONELY] == pi[P_TAU_LONELY]:
        _become_m(i, ist, gam)


@njit
def act_all(ist, gam, q, dr, act, chan, msg, pi, pf):
    for i in range(ist.shape[0]):
        node_tick(i, ist, gam, pi, pf)
        node_intent(i, ist, gam, q, dr, act, chan, msg, pi, pf)


@njit
def handle_all(ist, gam, dr, act, chan, msg, recv, pi, pf):
    for i in range(ist.shape[0]):
        node_handle(i, ist, gam, dr, act, chan, msg, recv[i], pi, pf)
        node_promote(i, ist, gam, pi)


def new_state(n: int) -> tuple[np.ndarray, np.ndarray]:
    ist = np.zeros((n, N_FIELDS), dtype=np.int64)
    ist[:, F_ID] = np.arange(n)
    ist[:, F_LEADER] = -1
    ist[:, F_MEET] = 1
    ist[:, F_HS] = SUCC
    ist[:, F_GAME] = SUCC
    return ist, np.zeros(n, dtype=np.float64)


def wake(ist: np.ndarray, gam: np.ndarray, nodes) -> None:
    ist[nodes, F_STATE] = W
    ist[nodes, F_COUNT] = 0
    ist[nodes, F_LONELY] = 0
    gam[nodes] = 0.0


# ------------------------------------------------------- single-node API

@dataclass(frozen=True)
class Message:
    sender: int
    state_tag: State
    kind: Kind
    a: int = 0
    b: int = 0
    c: int = 0

    def row(self) -> np.ndarray:
        return np.array([self.kind, self.state_tag, self.sender, self.a, self.b, self.c],
                        dtype=np.int64)

    @classmethod
    def from_row(cls, r) -> "Message":
        r = [int(x) for x in r]
        return cls(r[M_SENDER], State(r[M_STATE]), Kind(r[M_KIND]), r[M_A], r[M_B], r[M_C])

    def to_dict(self) -> dict:
        return {"sender": self.sender, "state": self.state_tag.name, "kind": self.kind.name,
                "payload": [self.a, self.b, self.c]}

    @classmethod
    def from_dict(cls, d: dict) -> "Message":
        a, b, c = d.get("payload", [0, 0, 0])
        return cls(int(d["sender"]), State[d["state"]], Kind[d["kind"]], a, b, c)


@dataclass(frozen=True)
class Intent:
    node: int
    action: str  # "inactive" | "listen" | "broadcast"
    channel: int | None = None
    message: Message | None = None


@dataclass
class NodeCtx:
    """Full local state of one node, including this round's random draws."""

    id: int
    seed: int = 0
    state: State = State.ASLEEP
    count: int = 0
    phase: int = 0
    gamma: float = 0.0
    lonely: int = 0
    leader_id: int = -1
    meet: int = 1
    handshake_flag: int = SUCC
    game_flag: int = SUCC
    color: int = RED
    enforce: bool = False
    step: int = 0
    q: float = 0.0
    j: int = 1
    k: int = 1
    herald_choice: int = 0
    color_draw: int = 0

    def _arrays(self):
        ist = np.zeros((2, N_FIELDS), dtype=np.int64)
        ist[0] = [self.id, int(self.state), self.count, self.phase, self.lonely, self.leader_id,
                  self.meet, self.handshake_flag, self.game_flag, self.color,
                  int(self.enforce), self.step]
        gam = np.array([self.gamma, 0.0])
        q = np.array([self.q, 0.0])
        dr = np.zeros((2, 4), dtype=np.int64)
        dr[0] = [self.j, self.k, self.herald_choice, self.color_draw]
        return ist, gam, q, dr

    def _absorb(self, ist, gam) -> "NodeCtx":
        r = ist[0]
        return dataclasses.replace(
            self, state=State(int(r[F_STATE])), count=int(r[F_COUNT]), phase=int(r[F_PHASE]),
            lonely=int(r[F_LONELY]), leader_id=int(r[F_LEADER]), meet=int(r[F_MEET]),
            handshake_flag=int(r[F_HS]), game_flag=int(r[F_GAME]), color=int(r[F_COLOR]),
            enforce=bool(r[F_ENFORCE]), step=int(r[F_STEP]), gamma=float(gam[0]))


def _intent_from(i, node_id, act, chan, msg) -> Intent:
    if act[i] == ACT_IDLE:
        return Intent(node_id, "inactive")
    if act[i] == ACT_LISTEN:
        return Intent(node_id, "listen", int(chan[i]))
    return Intent(node_id, "broadcast", int(chan[i]), Message.from_row(msg[i]))


def draw(ctx: NodeCtx, params: ProtocolParams) -> NodeCtx:
    q, ints = rng.draw_round(ctx.seed, [ctx.id], [ctx.step], params.n_D, params.n_R, params.n_A)
    return dataclasses.replace(ctx, q=float(q[0]), j=int(ints[0, D_J]), k=int(ints[0, D_K]),
                               herald_choice=int(ints[0, D_HERALD]),
                               color_draw=int(ints[0, D_COLOR]))


def core_tick(ctx: NodeCtx, params: ProtocolParams, fresh_draws: bool = True) -> NodeCtx:
    """Start-of-round bookkeeping: counters, activity growth and fresh draws."""
    if fresh_draws and ctx.state not in (State.ASLEEP, State.E):
        ctx = draw(ctx, params)
    ist, gam, _, _ = ctx._arrays()
    pi, pf = params.packed()
    node_tick(0, ist, gam, pi, pf)
    return ctx._absorb(ist, gam)


def step(ctx: NodeCtx, params: ProtocolParams, delivery: Message | None = None):
    """Intent for the current round plus the end-of-round transition, given
    ``delivery`` (ignored unless the intent is a listen). ``ctx`` is assumed
    already ticked. Loneliness promotion is not applied here."""
    ist, gam, q, dr = ctx._arrays()
    pi, pf = params.packed()
    act = np.zeros(2, dtype=np.int64)
    chan = np.full(2, -1, dtype=np.int64)
    msg = np.zeros((2, MSG_FIELDS), dtype=np.int64)
    node_intent(0, ist, gam, q, dr, act, chan, msg, pi, pf)
    intent = _intent_from(0, ctx.id, act, chan, msg)
    src = -1
    if delivery is not None and act[0] == ACT_LISTEN:
        msg[1] = delivery.row()
        src = 1
    node_handle(0, ist, gam, dr, act, chan, msg, src, pi, pf)
    return intent, ctx._absorb(ist, gam)


def _require(ctx: NodeCtx, allowed) -> None:
    if ctx.state not in allowed:
        raise ValueError(f"node {ctx.id} in state {ctx.state.name}, expected one of "
                         f"{sorted(s.name for s in allowed)}")


def dfilter_step(ctx, params, delivery=None):
    _require(ctx, {State.W, State.D})
    return step(ctx, params, delivery)


def herald_protocol_step(ctx, params, delivery=None):
    _require(ctx, {State.A})
    return step(ctx, params, delivery)


def handshake_step(ctx, params, delivery=None):
    _require(ctx, {State.HC, State.LC})
    return step(ctx, params, delivery)


def red_blue_step(ctx, params, delivery=None):
    _require(ctx, {State.H, State.L})
    return step(ctx, params, delivery)


def dominator_step(ctx, params):
    _require(ctx, {State.M})
    intent, ctx = step(ctx, params, None)
    return intent, ctx


def handle_mis_message(ctx: NodeCtx, params: ProtocolParams, delivery: Message) -> NodeCtx:
    """Apply a delivered dominator message to a node that listened this round."""
    if delivery.kind != Kind.MIS:
        raise ValueError("expected a Mis message")
    return step(ctx, params, delivery)[1]


def loneliness_promotion(ctx: NodeCtx, params: ProtocolParams) -> NodeCtx:
    ist, gam, _, _ = ctx._arrays()
    pi, _ = params.packed()
    node_promote(0, ist, gam, pi)
    return ctx._absorb(ist, gam)


def full_round(ctx: NodeCtx, params: ProtocolParams, delivery: Message | None = None):
    """Tick, draws, intent, transition and promotion for one awake round."""
    ctx = core_tick(ctx, params)
    intent, ctx = step(ctx, params, delivery)
    return intent, loneliness_promotion(ctx, params)
