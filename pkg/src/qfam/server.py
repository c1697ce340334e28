"""Server handshake state machine.

All pending-handshake context lives inside the sealed token, so the server
keeps no per-client state between issuing a Retry and seeing it come back;
validation costs one AEAD open plus one hash, independent of difficulty.
"""

from __future__ import annotations

import enum
import random
import secrets
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Union

from . import crypto_workload, token_codec
from .challenge import ChallengeInstance, verify
from .errors import (
    AuthenticationFailed,
    Expired,
    InvalidPoint,
    TokenError,
    UnknownKeySequence,
    UnsupportedGroup,
)
from .metrics import Meter, ThreadCpuMeter
from .packet import InitialMessage, RejectReason, RetryPacket, ShloMessage
from .token_codec import (
    AssociatedData,
    TokenBody,
    TokenHeader,
    TokenKeyStore,
)


@dataclass(frozen=True)
class Address:
    ip: str
    port: int


@dataclass(frozen=True)
class MitigationPolicy:
    mode: str = "off"  # off | on | auto
    manual_cci: int = 12  # pinned difficulty when mode == "on"
    thresholds: tuple[tuple[float, int], ...] = ((0, 0), (20, 8), (40, 12), (80, 14))
    ewma_half_life: float = 2.0
    token_lifetime: float = 30.0
    high_queue_capacity: int = 1024
    low_queue_capacity: int = 256
    reject_unsolved: bool = True

    def __post_init__(self) -> None:
        if self.mode not in ("off", "on", "auto"):
            raise ValueError(f"unknown mode {self.mode!r}")
        rates = [r for r, _ in self.thresholds]
        ccis = [c for _, c in self.thresholds]
        if rates != sorted(rates):
            raise ValueError("thresholds must be sorted ascending by rate")
        if ccis != sorted(ccis):
            raise ValueError("cci must be non-decreasing along thresholds")
        if any(not 0 <= c <= 15 for c in ccis):
            raise ValueError("cci out of range 0-15")


class ValidationResult(enum.Enum):
    ACCEPT_HIGH = "accept_high"
    BAD_TOKEN = "bad_token"
    BAD_CHALLENGE = "bad_challenge"
    EXPIRED = "expired"


@dataclass(frozen=True)
class SendShlo:
    shlo: ShloMessage
    dest: Optional[Address] = None


@dataclass(frozen=True)
class SendRetry:
    packet: RetryPacket


@dataclass(frozen=True)
class SendReject:
    reason: RejectReason


@dataclass(frozen=True)
class EnqueueLow:
    pass


@dataclass(frozen=True)
class Drop:
    why: str


Action = Union[SendShlo, SendRetry, SendReject, EnqueueLow, Drop]


@dataclass
class PendingHandshake:
    msg: InitialMessage
    src: Address
    enqueued_at: float


class ServerState:
    def __init__(self, key_store: Optional[TokenKeyStore] = None,
                 policy: Optional[MitigationPolicy] = None,
                 meter: Optional[Meter] = None,
                 rng: Optional[random.Random] = None) -> None:
        self.key_store = key_store or TokenKeyStore.generate()
        self.policy = policy or MitigationPolicy()
        self.meter = meter or ThreadCpuMeter()
        self.rng = rng
        self.rate_estimate = 0.0
        self.last_arrival: Optional[float] = None
        self.high_queue: deque[PendingHandshake] = deque()
        self.low_queue: deque[PendingHandshake] = deque()
        self.retries_issued = 0
        self.accepted = 0
        self.rejected: dict[RejectReason, int] = {r: 0 for r in RejectReason}

    # -- randomness (seedable for the deterministic engine) --

    def _rand_u64(self) -> int:
        if self.rng is not None:
            return self.rng.getrandbits(64)
        return int.from_bytes(secrets.token_bytes(8), "big")

    def _rand_cid(self) -> bytes:
        if self.rng is not None:
            return self.rng.getrandbits(64).to_bytes(8, "big")
        return secrets.token_bytes(8)

    # -- difficulty control --

    def record_arrival(self, now: float) -> None:
        if self.last_arrival is not None:
            dt = max(now - self.last_arrival, 1e-9)
            alpha = 0.5 ** (dt / self.policy.ewma_half_life)
            self.rate_estimate = (alpha * self.rate_estimate
                                  + (1 - alpha) / dt)
        self.last_arrival = now

    def current_rate(self, now: float) -> float:
        if self.last_arrival is None:
            return 0.0
        idle = max(now - self.last_arrival, 0.0)
        return self.rate_estimate * 0.5 ** (idle / self.policy.ewma_half_life)

    def mitigation_active(self, now: float) -> bool:
        if self.policy.mode == "off":
            return False
        if self.policy.mode == "on":
            return True
        return update_difficulty(self, now) > 0


def update_difficulty(state: ServerState, now: float) -> int:
    """Difficulty for the next issued token: threshold-table lookup on the
    decayed arrival-rate estimate, or the pinned value in manual mode."""
    if state.policy.mode == "off":
        return 0
    if state.policy.mode == "on":
        return state.policy.manual_cci
    rate = state.current_rate(now)
    cci = 0
    for threshold, value in state.policy.thresholds:
        if rate >= threshold:
            cci = value
    return cci


def issue_enhanced_retry(state: ServerState, msg: InitialMessage,
                         src: Address, now: float) -> RetryPacket:
    cci = update_difficulty(state, now)
    rscid = state._rand_cid()
    header = TokenHeader(
        token_type=token_codec.TOKEN_TYPE_RETRY,
        token_key_sequence=state.key_store.active_sequence,
        tin=state._rand_u64(),
        mrn=0,
        cci=cci,
    )
    body = TokenBody(
        expiry=int(now + state.policy.token_lifetime),
        odcid=msg.dcid,
        source_port=src.port,
    )
    ad = AssociatedData.for_header(src.ip, header, rscid)
    with state.meter.measure("token", "seal"):
        token = token_codec.seal_token(state.key_store, header, body, ad)
        wire = token_codec.encode_token(token)
    state.retries_issued += 1
    return RetryPacket(dcid=msg.scid, scid=rscid, token=wire,
                       mitigation_bit=1, version=msg.version)


def validate_token_and_challenge(state: ServerState, msg: InitialMessage,
                                 src: Address, now: float) -> ValidationResult:
    with state.meter.measure("token", "open"):
        try:
            token = token_codec.decode_token(msg.token)
        except TokenError:
            return ValidationResult.BAD_TOKEN
        ad = AssociatedData.for_header(src.ip, token.header, rscid=msg.scid)
        try:
            token_codec.open_token(state.key_store, token, ad, int(now))
        except Expired:
            return ValidationResult.EXPIRED
        except (UnknownKeySequence, AuthenticationFailed):
            return ValidationResult.BAD_TOKEN
        instance = ChallengeInstance(
            icv=token.icv,
            tin=token.header.tin,
            port=src.port,
            cci=token.header.cci,
        )
        if not verify(instance, token.header.mrn):
            return ValidationResult.BAD_CHALLENGE
    return ValidationResult.ACCEPT_HIGH


def complete_handshake(state: ServerState, msg: InitialMessage) -> Action:
    try:
        group = crypto_workload.KeyExchangeGroup.from_id(msg.group_id)
    except UnsupportedGroup:
        state.rejected[RejectReason.UNSUPPORTED_GROUP] += 1
        return SendReject(RejectReason.UNSUPPORTED_GROUP)
    with state.meter.measure("keyexchange", group.name):
        pair = crypto_workload.generate_keyshare(group)
        try:
            crypto_workload.compute_shared(group, pair.private, msg.key_share)
        except InvalidPoint:
            return Drop("invalid key share")
    state.accepted += 1
    return SendShlo(ShloMessage(scid=state._rand_cid(), group_id=msg.group_id,
                                key_share=pair.public))


def on_initial(state: ServerState, msg: InitialMessage, src: Address,
               now: float) -> Action:
    state.record_arrival(now)
    active = state.mitigation_active(now)

    if not msg.token:
        if active:
            return SendRetry(issue_enhanced_retry(state, msg, src, now))
        return complete_handshake(state, msg)

    result = validate_token_and_challenge(state, msg, src, now)
    if result is ValidationResult.ACCEPT_HIGH:
        if len(state.high_queue) >= state.policy.high_queue_capacity:
            state.rejected[RejectReason.OVERLOADED] += 1
            return SendReject(RejectReason.OVERLOADED)
        return complete_handshake(state, msg)
    if result is ValidationResult.EXPIRED:
        # hand the slow solver a fresh challenge instead of a dead end
        state.rejected[RejectReason.BAD_TOKEN] += 1
        if active:
            return SendRetry(issue_enhanced_retry(state, msg, src, now))
        return SendReject(RejectReason.BAD_TOKEN)
    if result is ValidationResult.BAD_TOKEN:
        state.rejected[RejectReason.BAD_TOKEN] += 1
        return SendReject(RejectReason.BAD_TOKEN)
    # challenge failed: legacy or cheating client
    if state.policy.reject_unsolved:
        state.rejected[RejectReason.BAD_CHALLENGE] += 1
        return SendReject(RejectReason.BAD_CHALLENGE)
    if len(state.low_queue) >= state.policy.low_queue_capacity:
        state.rejected[RejectReason.OVERLOADED] += 1
        return SendReject(RejectReason.OVERLOADED)
    state.low_queue.append(PendingHandshake(msg=msg, src=src, enqueued_at=now))
    return EnqueueLow()


def drain_low_priority(state: ServerState, budget: int) -> list[Action]:
    """Complete up to `budget` deferred handshakes, oldest first.

    Callers only invoke this when the high-priority queue is empty.
    """
    if budget < 0:
        raise ValueError("budget must be non-negative")
    actions: list[Action] = []
    while budget > 0 and state.low_queue and not state.high_queue:
        pending = state.low_queue.popleft()
        action = complete_handshake(state, pending.msg)
        if isinstance(action, SendShlo):
            action = SendShlo(shlo=action.shlo, dest=pending.src)
        actions.append(action)
        budget -= 1
    return actions
