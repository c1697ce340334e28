import random
from dataclasses import replace

import pytest

from qfam import client as client_mod
from qfam import server as sv
from qfam import token_codec
from qfam.challenge import ChallengeInstance, verify
from qfam.client import ClientConfig
from qfam.metrics import ThreadCpuMeter
from qfam.packet import InitialMessage, RejectReason
from qfam.server import (
    Address,
    Drop,
    EnqueueLow,
    MitigationPolicy,
    SendReject,
    SendRetry,
    SendShlo,
    ServerState,
    ValidationResult,
    drain_low_priority,
    on_initial,
    update_difficulty,
)

from conftest import NOW

SRC = Address(ip="192.0.2.7", port=51000)


def make_state(mode="on", cci=4, **kwargs):
    policy = MitigationPolicy(mode=mode, manual_cci=cci, **kwargs)
    return ServerState(policy=policy, meter=ThreadCpuMeter(),
                       rng=random.Random(42))


def first_flight(cfg=None, rng=None):
    cfg = cfg or ClientConfig()
    return client_mod.start_handshake(cfg, rng=rng or random.Random(7))


def second_flight(state, src=SRC, cfg=None, now=NOW):
    """Issue a Retry for a fresh Initial and build the solved follow-up."""
    cfg = cfg or ClientConfig()
    first = first_flight(cfg)
    action = on_initial(state, first, src, now)
    assert isinstance(action, SendRetry)
    follow_up, solution = client_mod.on_retry(
        cfg, first, action.packet, src.port, solve_start=0)
    return first, action.packet, follow_up, solution


class TestPolicyValidation:
    def test_defaults_valid(self):
        MitigationPolicy()

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            MitigationPolicy(mode="sometimes")

    def test_unsorted_thresholds(self):
        with pytest.raises(ValueError):
            MitigationPolicy(thresholds=((40, 12), (20, 8)))

    def test_non_monotonic_cci(self):
        with pytest.raises(ValueError):
            MitigationPolicy(thresholds=((0, 0), (20, 12), (40, 8)))


class TestDifficultyTable:
    @pytest.mark.parametrize("rate,expected", [
        (0.0, 0), (10.0, 0), (20.0, 8), (25.0, 8),
        (40.0, 12), (60.0, 12), (80.0, 14), (500.0, 14),
    ])
    def test_auto_lookup(self, rate, expected):
        state = make_state(mode="auto")
        state.rate_estimate = rate
        state.last_arrival = float(NOW)
        assert update_difficulty(state, float(NOW)) == expected

    def test_manual_mode_pins_value(self):
        state = make_state(mode="on", cci=9)
        assert update_difficulty(state, float(NOW)) == 9

    def test_off_mode_is_zero(self):
        state = make_state(mode="off")
        state.rate_estimate = 1000.0
        state.last_arrival = float(NOW)
        assert update_difficulty(state, float(NOW)) == 0

    def test_monotonic_in_rate(self):
        state = make_state(mode="auto")
        state.last_arrival = float(NOW)
        prev = -1
        for rate in range(0, 200, 5):
            state.rate_estimate = float(rate)
            cci = update_difficulty(state, float(NOW))
            assert cci >= prev
            prev = cci


class TestRateEstimator:
    def test_steady_arrivals_converge_to_rate(self):
        state = make_state(mode="auto")
        t = float(NOW)
        for _ in range(400):
            state.record_arrival(t)
            t += 0.02  # 50 requests/second
        assert state.current_rate(t) == pytest.approx(50.0, rel=0.15)

    def test_idle_decay_halves_per_half_life(self):
        state = make_state(mode="auto")
        state.rate_estimate = 80.0
        state.last_arrival = float(NOW)
        hl = state.policy.ewma_half_life
        assert state.current_rate(NOW + hl) == pytest.approx(40.0)
        assert state.current_rate(NOW + 2 * hl) == pytest.approx(20.0)


class TestOnInitial:
    def test_mitigation_off_completes_immediately(self):
        state = make_state(mode="off")
        action = on_initial(state, first_flight(), SRC, NOW)
        assert isinstance(action, SendShlo)
        assert state.accepted == 1

    def test_mitigation_on_sends_enhanced_retry(self):
        state = make_state()
        first = first_flight()
        action = on_initial(state, first, SRC, NOW)
        assert isinstance(action, SendRetry)
        pkt = action.packet
        assert pkt.mitigation_bit == 1
        assert pkt.dcid == first.scid
        token = token_codec.decode_token(pkt.token)
        assert token.header.cci == 4
        assert token.header.mrn == 0

    def test_solved_round_trip_completes(self):
        state = make_state()
        _first, _pkt, follow_up, solution = second_flight(state)
        assert solution is not None
        action = on_initial(state, follow_up, SRC, NOW + 1)
        assert isinstance(action, SendShlo)

    def test_issued_tins_distinct(self):
        state = make_state()
        tins = set()
        for _ in range(50):
            action = on_initial(state, first_flight(), SRC, NOW)
            tins.add(token_codec.decode_token(action.packet.token).header.tin)
        assert len(tins) == 50

    def test_garbage_token_rejected(self):
        state = make_state()
        msg = replace(first_flight(), token=b"\x00" * 40)
        action = on_initial(state, msg, SRC, NOW)
        assert action == SendReject(RejectReason.BAD_TOKEN)
        assert state.rejected[RejectReason.BAD_TOKEN] == 1

    def test_replay_from_different_ip_rejected(self):
        state = make_state()
        _f, _p, follow_up, _s = second_flight(state)
        other = Address(ip="192.0.2.99", port=SRC.port)
        action = on_initial(state, follow_up, other, NOW + 1)
        assert action == SendReject(RejectReason.BAD_TOKEN)

    def test_replay_from_different_port_fails_challenge(self):
        # the port feeds the puzzle, not the sealed data, so a port change
        # invalidates the solution rather than the token
        state = make_state(cci=12)
        _f, _p, follow_up, _s = second_flight(state)
        other = Address(ip=SRC.ip, port=SRC.port + 1)
        action = on_initial(state, follow_up, other, NOW + 1)
        assert action == SendReject(RejectReason.BAD_CHALLENGE)

    def test_unsolved_token_rejected_by_default(self):
        state = make_state(cci=12)
        cfg = ClientConfig(solve_challenges=False)
        first = first_flight(cfg)
        retry = on_initial(state, first, SRC, NOW)
        follow_up, solution = client_mod.on_retry(cfg, first, retry.packet,
                                                  SRC.port)
        assert solution is None
        action = on_initial(state, follow_up, SRC, NOW + 1)
        assert action == SendReject(RejectReason.BAD_CHALLENGE)

    def test_unsolved_token_queued_when_tolerated(self):
        state = make_state(cci=12, reject_unsolved=False)
        cfg = ClientConfig(qfam_capable=False)
        first = first_flight(cfg)
        retry = on_initial(state, first, SRC, NOW)
        follow_up, _ = client_mod.on_retry(cfg, first, retry.packet, SRC.port)
        action = on_initial(state, follow_up, SRC, NOW + 1)
        assert isinstance(action, EnqueueLow)
        assert len(state.low_queue) == 1

    def test_expired_token_gets_fresh_retry_while_active(self):
        state = make_state()
        _f, _p, follow_up, _s = second_flight(state)
        late = NOW + state.policy.token_lifetime + 5
        action = on_initial(state, follow_up, SRC, late)
        assert isinstance(action, SendRetry)
        assert state.rejected[RejectReason.BAD_TOKEN] == 1

    def test_expired_token_plain_reject_when_inactive(self):
        state = make_state()
        _f, _p, follow_up, _s = second_flight(state)
        state.policy = replace(state.policy, mode="off")
        late = NOW + state.policy.token_lifetime + 5
        action = on_initial(state, follow_up, SRC, late)
        assert action == SendReject(RejectReason.BAD_TOKEN)

    def test_high_queue_overload(self):
        state = make_state(high_queue_capacity=0)
        _f, _p, follow_up, _s = second_flight(state)
        action = on_initial(state, follow_up, SRC, NOW + 1)
        assert action == SendReject(RejectReason.OVERLOADED)

    def test_low_queue_overload(self):
        state = make_state(cci=12, reject_unsolved=False,
                           low_queue_capacity=1)
        cfg = ClientConfig(qfam_capable=False)
        actions = []
        for _ in range(2):
            first = first_flight(cfg)
            retry = on_initial(state, first, SRC, NOW)
            follow_up, _ = client_mod.on_retry(cfg, first, retry.packet,
                                               SRC.port)
            actions.append(on_initial(state, follow_up, SRC, NOW + 1))
        assert isinstance(actions[0], EnqueueLow)
        assert actions[1] == SendReject(RejectReason.OVERLOADED)

    def test_unsupported_group_rejected(self):
        state = make_state(mode="off")
        msg = replace(first_flight(), group_id=0x9999)
        action = on_initial(state, msg, SRC, NOW)
        assert action == SendReject(RejectReason.UNSUPPORTED_GROUP)

    def test_invalid_key_share_dropped(self):
        state = make_state(mode="off")
        msg = replace(first_flight(), key_share=b"\x05" * 31)
        action = on_initial(state, msg, SRC, NOW)
        assert isinstance(action, Drop)


class TestValidationCost:
    def test_no_keyexchange_cpu_on_bad_token(self):
        state = make_state()
        msg = replace(first_flight(), token=b"\x00" * 40)
        on_initial(state, msg, SRC, NOW)
        assert state.meter.cpu["keyexchange"] == 0.0
        assert state.meter.cpu["token"] > 0.0

    def test_validation_result_verifies_challenge(self):
        state = make_state(cci=8)
        _f, pkt, follow_up, solution = second_flight(state)
        token = token_codec.decode_token(pkt.token)
        result = sv.validate_token_and_challenge(state, follow_up, SRC,
                                                 NOW + 1)
        assert result is ValidationResult.ACCEPT_HIGH
        instance = ChallengeInstance(icv=token.icv, tin=token.header.tin,
                                     port=SRC.port, cci=8)
        assert verify(instance, solution.mrn)


class TestStatelessness:
    def test_restarted_server_accepts_outstanding_token(self):
        """All handshake context rides in the token: a new state object
        sharing only the key store validates a token the old one issued."""
        state = make_state()
        _f, _p, follow_up, _s = second_flight(state)
        fresh = ServerState(key_store=state.key_store, policy=state.policy,
                            meter=ThreadCpuMeter())
        action = on_initial(fresh, follow_up, SRC, NOW + 1)
        assert isinstance(action, SendShlo)

    def test_no_pending_state_after_retry(self):
        state = make_state()
        for _ in range(20):
            on_initial(state, first_flight(), SRC, NOW)
        assert not state.high_queue and not state.low_queue


class TestDrainLowPriority:
    def fill_low(self, state, n):
        for i in range(n):
            msg = first_flight(rng=random.Random(i))
            state.low_queue.append(
                sv.PendingHandshake(msg=msg, src=Address("10.0.0.2", 7000 + i),
                                    enqueued_at=float(NOW)))

    def test_budget_respected_oldest_first(self):
        state = make_state(reject_unsolved=False)
        self.fill_low(state, 5)
        oldest = state.low_queue[0]
        actions = drain_low_priority(state, budget=2)
        assert len(actions) == 2
        assert len(state.low_queue) == 3
        assert isinstance(actions[0], SendShlo)
        assert actions[0].dest == oldest.src

    def test_high_priority_preempts(self):
        state = make_state(reject_unsolved=False)
        self.fill_low(state, 3)
        state.high_queue.append(sv.PendingHandshake(
            msg=first_flight(), src=SRC, enqueued_at=float(NOW)))
        assert drain_low_priority(state, budget=4) == []
        assert len(state.low_queue) == 3

    def test_negative_budget_rejected(self):
        with pytest.raises(ValueError):
            drain_low_priority(make_state(), budget=-1)
