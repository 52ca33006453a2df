import dataclasses
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from heraldmis import graph as G
from heraldmis import protocol as P
from heraldmis import radio as R
from heraldmis import rng
from heraldmis.protocol import ChannelClass as CC, Kind, Message, NodeCtx, State

from conftest import quiet_params

PARAMS = quiet_params(256, F=8, alpha=2)


def slot(ctx, params=PARAMS, delivery=None, **draws):
    """One round with chosen draws: tick, intent, delivery, promotion."""
    ctx = dataclasses.replace(P.core_tick(ctx, params, fresh_draws=False), **draws)
    intent, ctx = P.step(ctx, params, delivery)
    return intent, P.loneliness_promotion(ctx, params)


def chan_cls(intent, params=PARAMS):
    return params.channel_of(intent.channel)[0]


class TestDeriveParams:
    def test_delta_example(self):
        p = quiet_params(2 ** 16, F=8, alpha=2)
        assert p.delta == pytest.approx(2.0)
        assert p.alpha ** p.delta == pytest.approx(math.sqrt(16))

    def test_eta_example(self):
        assert quiet_params(64, alpha=2).eta == pytest.approx(1 / 256)

    def test_analysis_sigma_minus(self):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            p = P.derive_params(1024, 8, 2, preset="analysis")
        assert p.sigma_minus == pytest.approx(2 ** 0.12, rel=1e-12)
        assert p.sigma_minus == pytest.approx(1.08666, abs=1e-4)
        assert p.divergences == {}

    def test_defaults(self):
        p = quiet_params(1024, F=16, alpha=3)
        lg = 10
        assert p.n_R == 27 and p.n_A == math.ceil(math.log2(lg))
        assert p.n_D == 1
        assert p.tau_W == 2 * lg and p.tau_D == math.ceil(2 * lg / 16)
        assert p.tau_lonely == math.ceil(80 * (lg * lg / 16 + lg))
        assert p.tau_red_blue % 8 == 0 and p.tau_red_blue >= 24 * lg
        assert p.runtime_budget == 2 * 9 * p.tau_lonely
        assert p.sigma_minus == pytest.approx(p.sigma_plus ** 20)
        assert p.gamma_min == pytest.approx(lg ** -3)
        assert set(p.divergences) == {"m_bar", "sigma_plus", "sigma_minus", "gamma_min"}

    def test_n_D_uses_spare_channels(self):
        assert quiet_params(16, F=40, alpha=2).n_D == 40 - 12 - 2 - 2

    def test_channel_warning(self):
        with pytest.warns(UserWarning, match="channels"):
            P.derive_params(64, 4, 3)

    def test_overrides(self):
        p = quiet_params(64, tau_red_blue=16, c_L=10, budget_multiplier=3, lonely_scope="all")
        assert p.tau_red_blue == 16
        assert p.tau_lonely == math.ceil(10 * (36 / 8 + 6))
        assert p.runtime_budget == 3 * p.tau_lonely
        assert p.lonely_scope == "all"

    def test_invalid(self):
        with pytest.raises(ValueError):
            quiet_params(64, bogus=1)
        with pytest.raises(ValueError):
            quiet_params(64, tau_red_blue=12)
        with pytest.raises(ValueError):
            quiet_params(64, pi_l=0.2)
        with pytest.raises(ValueError):
            P.derive_params(0, 1, 1)

    def test_dict_round_trip(self):
        assert P.ProtocolParams.from_dict(PARAMS.to_dict()) == PARAMS

    def test_tiny_n(self):
        p = quiet_params(1, F=1, alpha=1)
        assert p.n_A == 1 and p.phase_cap == 0


class TestCoreTick:
    def test_gamma_capped(self):
        p = quiet_params(64, sigma_plus=2.0)
        ctx = P.core_tick(NodeCtx(0, state=State.A, gamma=0.4), p)
        assert ctx.gamma == 0.5

    def test_counters(self):
        ctx = P.core_tick(NodeCtx(0, state=State.A, gamma=0.1, count=3, lonely=7), PARAMS)
        assert (ctx.count, ctx.lonely, ctx.step) == (4, 8, 1)
        assert ctx.gamma == pytest.approx(0.1 * PARAMS.sigma_plus)

    def test_w_keeps_zero_gamma(self):
        ctx = P.core_tick(NodeCtx(0, state=State.W), PARAMS)
        assert ctx.gamma == 0.0 and ctx.lonely == 0

    def test_lonely_scope_all(self):
        p = quiet_params(64, lonely_scope="all")
        assert P.core_tick(NodeCtx(0, state=State.D), p).lonely == 1

    def test_draws_in_range(self):
        ctx = NodeCtx(3, seed=5, state=State.A, gamma=0.2)
        for _ in range(200):
            ctx = P.core_tick(ctx, PARAMS)
            assert 0 <= ctx.q < 1 and 1 <= ctx.j <= PARAMS.n_D and 1 <= ctx.k <= PARAMS.n_R
            assert 0 <= ctx.herald_choice <= PARAMS.n_A

    def test_lonely_threshold_promotes(self):
        ctx = NodeCtx(0, state=State.A, gamma=PARAMS.gamma_min, lonely=PARAMS.tau_lonely - 1)
        _, ctx = slot(ctx, q=0.99, herald_choice=1)
        assert ctx.state == State.M and ctx.gamma == 0.0 and not ctx.enforce


class TestDecayFilter:
    def test_w_to_d(self):
        ctx = NodeCtx(0, state=State.W, count=PARAMS.tau_W - 1)
        intent, ctx = P.dfilter_step(P.core_tick(ctx, PARAMS, fresh_draws=False), PARAMS)
        assert intent.action == "listen" and chan_cls(intent) == CC.REPORT
        assert (ctx.state, ctx.count, ctx.phase) == (State.D, 0, 0)

    def test_phase_capped(self):
        cap = PARAMS.phase_cap
        assert cap == 8 - 2
        ctx = NodeCtx(0, state=State.D, phase=cap, count=PARAMS.tau_D - 1)
        _, ctx = slot(ctx, q=0.7)
        assert ctx.state == State.D and ctx.phase == cap

    def test_phase_grows(self):
        ctx = NodeCtx(0, state=State.D, phase=1, count=PARAMS.tau_D - 1)
        _, ctx = slot(ctx, q=0.7)
        assert ctx.phase == 2 and ctx.count == 0

    def test_decay_message_restarts(self):
        ctx = NodeCtx(0, state=State.D, count=0)
        m = Message(4, State.D, Kind.DECAY, 4)
        intent, ctx = slot(ctx, delivery=m, q=0.3, j=1)
        assert chan_cls(intent) == CC.DECAY
        assert ctx.state == State.W and ctx.count == 0

    def test_mis_eliminates(self):
        _, ctx = slot(NodeCtx(0, state=State.W), delivery=Message(2, State.M, Kind.MIS, 2), k=4)
        assert ctx.state == State.E and ctx.gamma == 0

    def test_other_kinds_ignored(self):
        m = Message(2, State.L, Kind.BLOCK, 2)
        _, ctx = slot(NodeCtx(0, state=State.D, phase=2), delivery=m, q=0.9)
        assert ctx.state == State.D

    def test_broadcast_enters_herald_filter(self):
        ctx = NodeCtx(0, state=State.D, phase=0, lonely=5)
        intent, ctx = slot(ctx, q=0.0, j=1)
        assert intent.action == "broadcast" and intent.message.kind == Kind.DECAY
        assert ctx.state == State.A and ctx.gamma == PARAMS.gamma_min
        assert ctx.count == 0 and ctx.lonely == 0


class TestHeraldProtocol:
    def test_herald_channel_distribution_exact(self):
        # every assignment of the low n_A bits is equally likely, so counting them is exact
        words = np.arange(16, dtype=np.uint64)
        idx = rng.herald_index(words, 4)
        probs = [np.mean(idx == i) for i in (1, 2, 3, 4, 0)]
        assert probs == [1 / 2, 1 / 4, 1 / 8, 1 / 16, 1 / 16]
        assert sum(probs) == 1

    def test_herald_index_sampled(self):
        w = rng.raw_words(1, np.arange(200_000), np.zeros(200_000, int), rng.SLOT_HERALD)
        idx = rng.herald_index(w, 4)
        assert np.mean(idx == 1) == pytest.approx(0.5, abs=0.005)
        assert np.mean(idx == 0) == pytest.approx(1 / 16, abs=0.003)

    def test_bottom_forces_report_listen(self):
        ctx = NodeCtx(0, state=State.A, gamma=0.5)
        intent, _ = slot(ctx, q=0.0, herald_choice=0, k=2)
        assert intent.action == "listen" and chan_cls(intent) == CC.REPORT

    def test_listen_then_adv_makes_herald_candidate(self):
        ctx = NodeCtx(0, state=State.A, gamma=0.5, lonely=9)
        intent, ctx = slot(ctx, delivery=Message(6, State.A, Kind.ADV, 6), q=0.01, herald_choice=2)
        assert intent.channel == PARAMS.channel_index(CC.HERALD, 2)
        assert (ctx.state, ctx.leader_id, ctx.count, ctx.lonely) == (State.HC, 6, 0, 0)

    def test_send_makes_leader_candidate(self):
        intent, ctx = slot(NodeCtx(5, state=State.A, gamma=0.5), q=0.3, herald_choice=1)
        assert intent.action == "broadcast" and intent.message.kind == Kind.ADV
        assert intent.message.sender == 5
        assert ctx.state == State.LC and ctx.count == 0

    def test_mis_on_report(self):
        _, ctx = slot(NodeCtx(0, state=State.A, gamma=0.2), delivery=Message(1, State.M, Kind.MIS, 1),
                      q=0.9, herald_choice=1)
        assert ctx.state == State.E and ctx.gamma == 0.0

    @pytest.mark.parametrize("sigma_minus, want", [(1.08666, 0.46012), (2 ** 0.12, 0.5 / 2 ** 0.12)])
    def test_leader_report_damps_activity(self, sigma_minus, want):
        p = quiet_params(256, sigma_minus=sigma_minus)
        ctx = NodeCtx(0, state=State.A, gamma=0.5, lonely=30)
        m = Message(3, State.L, Kind.RBG_RESULT, 3, P.SUCC, 1)
        _, ctx = slot(ctx, p, delivery=m, q=0.9, herald_choice=1)
        assert ctx.gamma == pytest.approx(want, abs=1e-5)
        assert ctx.lonely == 0

    def test_damping_floor(self):
        ctx = NodeCtx(0, state=State.A, gamma=PARAMS.gamma_min)
        m = Message(3, State.H, Kind.BLOCK, 3)
        _, ctx = slot(ctx, delivery=m, q=0.9, herald_choice=1)
        assert ctx.gamma == PARAMS.gamma_min


def hs_leader(leader, meet):
    return Message(leader, State.LC, Kind.HS_LEADER, leader, meet)


def hs_herald(leader, sender):
    return Message(sender, State.HC, Kind.HS_HERALD, leader)


class TestHandshake:
    def test_herald_silence_fails(self):
        ctx = NodeCtx(1, state=State.HC, leader_id=0, count=2, gamma=0.3)
        intent, ctx = slot(ctx)
        assert intent.action == "listen" and chan_cls(intent) == CC.HANDSHAKE
        assert ctx.state == State.A and ctx.count == 0

    def test_herald_completes(self):
        ctx = NodeCtx(1, state=State.HC, leader_id=0, gamma=0.3, lonely=4)
        for c in range(1, 7):
            d = hs_leader(0, 5 if c == 3 else 2) if c in (3, 4) else None
            intent, ctx = slot(ctx, delivery=d)
            if c in (3, 4):
                assert intent.action == "listen"
            else:
                assert intent.action == "broadcast" and intent.message.kind == Kind.HS_HERALD
                assert intent.message.a == 0
        assert (ctx.state, ctx.game_flag, ctx.lonely, ctx.count) == (State.H, P.SUCC, 0, 0)
        assert ctx.meet == 2  # last reception wins

    def test_herald_rejects_wrong_leader(self):
        ctx = NodeCtx(1, state=State.HC, leader_id=0, count=2, gamma=0.3)
        _, ctx = slot(ctx, delivery=hs_leader(7, 3))
        assert ctx.state == State.A

    def test_leader_completes_with_meet_from_last_draw(self):
        ctx = NodeCtx(0, state=State.LC, leader_id=0, gamma=0.3)
        for c in range(1, 7):
            d = hs_herald(0, 1) if c not in (3, 4) else None
            intent, ctx = slot(ctx, delivery=d, k={3: 5, 4: 2}.get(c, 9))
            if c in (3, 4):
                assert intent.message.kind == Kind.HS_LEADER and intent.message.b == ctx.meet
        assert ctx.state == State.L and ctx.meet == 2

    def test_leader_rejects_foreign_herald(self):
        ctx = NodeCtx(0, state=State.LC, leader_id=0, gamma=0.3)
        _, ctx = slot(ctx, delivery=hs_herald(4, 1))
        assert ctx.state == State.A

    def test_mis_during_listen_eliminates(self):
        ctx = NodeCtx(0, state=State.LC, leader_id=0, gamma=0.3)
        _, ctx = slot(ctx, delivery=Message(9, State.M, Kind.MIS, 9))
        assert ctx.state == State.E

    def test_wrong_state_rejected(self):
        with pytest.raises(ValueError):
            P.handshake_step(NodeCtx(0, state=State.A), PARAMS)


class TestRedBlue:
    def test_blue_silence_fails(self):
        ctx = NodeCtx(0, state=State.L, leader_id=0, color=P.BLUE, count=1, gamma=0.3)
        intent, ctx = slot(ctx)
        assert intent.action == "listen" and chan_cls(intent) == CC.GAME
        assert ctx.game_flag == P.FAIL and ctx.state == State.L

    def test_red_sends_game(self):
        ctx = NodeCtx(0, state=State.L, leader_id=0, color=P.RED, count=1, gamma=0.3)
        intent, ctx = slot(ctx)
        assert intent.action == "broadcast" and intent.message.kind == Kind.GAME
        assert ctx.game_flag == P.SUCC

    def test_color_drawn_at_cycle_start(self):
        ctx = NodeCtx(0, state=State.L, leader_id=0, color=P.RED, count=8, gamma=0.3)
        intent, ctx = slot(ctx, color_draw=P.BLUE)
        assert intent.message.kind == Kind.BLOCK and ctx.color == P.BLUE

    def test_leader_joins_after_budget(self):
        c = PARAMS.tau_red_blue + 5
        ctx = NodeCtx(0, state=State.L, leader_id=0, count=c, gamma=0.3, meet=3)
        intent, ctx = slot(ctx, k=7)
        assert intent.message.kind == Kind.RBG_RESULT and intent.message.b == P.SUCC
        assert intent.message.c == 7
        assert intent.channel == PARAMS.channel_index(CC.REPORT, 3)
        assert ctx.state == State.M

    def test_failed_leader_returns(self):
        ctx = NodeCtx(0, state=State.L, leader_id=0, count=5, gamma=0.3, game_flag=P.FAIL, lonely=3)
        _, ctx = slot(ctx, k=4)
        assert (ctx.state, ctx.count, ctx.lonely) == (State.A, 0, 0)

    def test_herald_knocked_out_by_fail(self):
        ctx = NodeCtx(1, state=State.H, leader_id=0, count=5, gamma=0.3, meet=2)
        m = Message(0, State.L, Kind.RBG_RESULT, 0, P.FAIL, 3)
        intent, ctx = slot(ctx, delivery=m)
        assert intent.action == "listen"
        assert (ctx.state, ctx.count, ctx.lonely) == (State.A, 0, 0)

    def test_herald_follows_meet(self):
        ctx = NodeCtx(1, state=State.H, leader_id=0, count=5, gamma=0.3, meet=2)
        _, ctx = slot(ctx, delivery=Message(0, State.L, Kind.RBG_RESULT, 0, P.SUCC, 6))
        assert ctx.state == State.H and ctx.meet == 6

    def test_herald_eliminated_after_budget(self):
        ctx = NodeCtx(1, state=State.H, leader_id=0, count=PARAMS.tau_red_blue + 5, gamma=0.3)
        _, ctx = slot(ctx, delivery=Message(0, State.L, Kind.RBG_RESULT, 0, P.SUCC, 6))
        assert ctx.state == State.E

    def test_activity_decays(self):
        ctx = NodeCtx(0, state=State.L, leader_id=0, count=2, gamma=0.5)
        _, ctx = slot(ctx)
        want = max(min(0.5 * PARAMS.sigma_plus, 0.5) * PARAMS.sigma_plus ** -20, PARAMS.gamma_min)
        assert ctx.gamma == pytest.approx(want)

    def test_blue_leader_disrupted_by_mis(self):
        ctx = NodeCtx(0, state=State.L, leader_id=0, color=P.BLUE, count=1, gamma=0.3)
        _, ctx = slot(ctx, delivery=Message(8, State.M, Kind.MIS, 8))
        assert ctx.game_flag == P.FAIL


class TestDominator:
    def test_enforce(self):
        intent, ctx = P.dominator_step(NodeCtx(0, state=State.M, enforce=True, q=0.9), PARAMS)
        assert chan_cls(intent) == CC.HANDSHAKE and not ctx.enforce

    def test_q_selects_game(self):
        intent, ctx = P.dominator_step(NodeCtx(0, state=State.M, q=0.6), PARAMS)
        assert chan_cls(intent) == CC.GAME and ctx.enforce

    def test_q_selects_report(self):
        intent, ctx = P.dominator_step(NodeCtx(0, state=State.M, q=0.8, k=3), PARAMS)
        assert intent.channel == PARAMS.channel_index(CC.REPORT, 3) and ctx.enforce

    @given(st.lists(st.floats(0, 0.999), min_size=2, max_size=60))
    def test_handshake_channel_every_two_rounds(self, qs):
        ctx = NodeCtx(0, state=State.M)
        on_h = []
        for q in qs:
            intent, ctx = P.dominator_step(dataclasses.replace(ctx, q=q), PARAMS)
            assert intent.message.kind == Kind.MIS
            on_h.append(chan_cls(intent) == CC.HANDSHAKE)
        assert not any(not a and not b for a, b in zip(on_h, on_h[1:]))

    def test_mis_node_ignores_deliveries(self):
        _, ctx = P.step(NodeCtx(0, state=State.M, q=0.1), PARAMS, Message(1, State.M, Kind.MIS, 1))
        assert ctx.state == State.M


class TestMisHandling:
    def test_w_node(self):
        ctx = P.handle_mis_message(NodeCtx(0, state=State.W, k=2), PARAMS,
                                   Message(1, State.M, Kind.MIS, 1))
        assert ctx.state == State.E

    def test_requires_mis_kind(self):
        with pytest.raises(ValueError):
            P.handle_mis_message(NodeCtx(0, state=State.W), PARAMS, Message(1, State.D, Kind.DECAY))


class TestLoneliness:
    def test_isolated_node_promotes_exactly(self):
        g = G.gen_structured("empty", 1)
        for seed in range(10):
            e = R.Engine(g, PARAMS, [0], seed=seed)
            while not e.all_decided():
                e.advance()
            log = e.transition_log()
            entry = log[log[:, 3] == P.A][0, 0]
            assert log[-1, 3] == P.M
            assert log[-1, 0] - entry == PARAMS.tau_lonely

    def test_block_restarts_counter(self):
        ctx = NodeCtx(0, state=State.LC, leader_id=0, gamma=0.3, lonely=PARAMS.tau_lonely - 1)
        _, ctx = slot(ctx, delivery=Message(4, State.L, Kind.BLOCK, 4))
        assert ctx.state == State.A and ctx.lonely == 0
        for _ in range(PARAMS.tau_lonely - 1):
            _, ctx = slot(ctx, q=0.99, herald_choice=1)
            assert ctx.state == State.A
        _, ctx = slot(ctx, q=0.99, herald_choice=1)
        assert ctx.state == State.M

    def test_eliminated_never_promotes(self):
        ctx = P.loneliness_promotion(NodeCtx(0, state=State.E, lonely=PARAMS.tau_lonely), PARAMS)
        assert ctx.state == State.E


@st.composite
def small_networks(draw):
    n = draw(st.integers(1, 14))
    pairs = [(u, v) for u in range(n) for v in range(u + 1, n)]
    edges = draw(st.lists(st.sampled_from(pairs), unique=True)) if pairs else []
    wake = draw(st.lists(st.integers(0, 30), min_size=n, max_size=n))
    return G.Graph.from_edges(n, edges), wake, draw(st.integers(0, 2 ** 32))


STAGE = {P.ASLEEP: 0, P.W: 1, P.D: 1, P.A: 2, P.HC: 2, P.LC: 2, P.H: 2, P.L: 2, P.M: 3, P.E: 3}


class TestInvariants:
    @settings(max_examples=25, deadline=None)
    @given(small_networks())
    def test_per_round_invariants(self, net):
        g, wake, seed = net
        p = quiet_params(max(g.node_count, 2), F=8, alpha=2, c_L=6, c_R=2)
        e = R.Engine(g, p, wake, seed=seed)
        adj = g.adjacency_sets()
        left_decay = np.zeros(g.node_count, bool)
        for _ in range(3000):
            before = e.state.copy()
            e.advance()
            st_ = e.state
            gam = e.gam
            off = np.isin(st_, [P.ASLEEP, P.W, P.D, P.M, P.E])
            assert np.all(gam[off] == 0)
            assert np.all((gam[~off] >= p.gamma_min) & (gam[~off] <= 0.5))
            live = ~np.isin(st_, [P.M, P.E])
            assert np.all(e.ist[live, P.F_LONELY] < p.tau_lonely)
            for v in np.flatnonzero(np.isin(st_, [P.HC, P.H])):
                assert int(e.ist[v, P.F_LEADER]) in adj[v]
            for v in np.flatnonzero(st_ == P.L):
                assert e.ist[v, P.F_LEADER] == v
            for v in range(g.node_count):
                b, a = STAGE[int(before[v])], STAGE[int(st_[v])]
                assert a >= b
                if before[v] in (P.M, P.E):
                    assert st_[v] == before[v]
                assert not (left_decay[v] and a <= 1)
            left_decay |= np.isin(st_, [P.A, P.HC, P.LC, P.H, P.L, P.M])
            if e.all_decided() and e.round > max(wake):
                break
        assert e.all_decided()
