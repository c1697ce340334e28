"""Client-side actors: legitimate clients and attacker profiles.

An actor is just a `ClientConfig`; the attacker profiles differ from the
legitimate one only in the key-share mode, solving behaviour and pacing.
"""

from __future__ import annotations

import random
import secrets
import time
from dataclasses import dataclass, field
from typing import Optional

from . import token_codec
from .challenge import ChallengeInstance, ChallengeSolution
from .crypto_workload import KeyExchangeGroup, generate_keyshare, precomputed_share
from .errors import MalformedToken, Timeout, TokenError
from .metrics import Meter, RoleMetrics, ThreadCpuMeter
from .packet import (
    InitialMessage,
    RejectMessage,
    RejectReason,
    RetryPacket,
    ShloMessage,
    decode_message,
    encode_message,
)

_REJECT_COUNTER = {
    RejectReason.BAD_TOKEN: "rejects_badtoken",
    RejectReason.BAD_CHALLENGE: "rejects_badchallenge",
    RejectReason.OVERLOADED: "rejects_overloaded",
}
from .server import Address
from .transport import Endpoint


@dataclass(frozen=True)
class ClientConfig:
    group: KeyExchangeGroup = KeyExchangeGroup.X25519
    qfam_capable: bool = True
    request_rate: float = 0.0  # 0 = as fast as possible
    key_share_mode: str = "fresh"  # fresh | precomputed
    solve_challenges: bool = True

    def __post_init__(self) -> None:
        if self.key_share_mode not in ("fresh", "precomputed"):
            raise ValueError(f"unknown key_share_mode {self.key_share_mode!r}")
        if self.request_rate < 0:
            raise ValueError("request_rate must be non-negative")

    @classmethod
    def legitimate(cls, rate: float = 0.0) -> "ClientConfig":
        return cls(request_rate=rate)

    @classmethod
    def attacker(cls, rate: float = 0.0, solve: bool = False,
                 group: KeyExchangeGroup = KeyExchangeGroup.SECP384R1
                 ) -> "ClientConfig":
        return cls(group=group, request_rate=rate, key_share_mode="precomputed",
                   solve_challenges=solve)


@dataclass
class FloodStats:
    sent: int = 0
    retries_received: int = 0
    shlos: int = 0
    rejects: int = 0
    solve_time_total_s: float = 0.0
    cpu_time_s: float = 0.0
    duration_s: float = 0.0
    response_times_s: list[float] = field(default_factory=list)

    @property
    def completion_rate(self) -> float:
        return self.shlos / self.duration_s if self.duration_s > 0 else 0.0


def _key_share(cfg: ClientConfig, meter: Meter) -> bytes:
    if cfg.key_share_mode == "precomputed":
        return precomputed_share(cfg.group)
    with meter.measure("keyexchange", cfg.group.name):
        return generate_keyshare(cfg.group).public


def start_handshake(cfg: ClientConfig, meter: Optional[Meter] = None,
                    rng: Optional[random.Random] = None) -> InitialMessage:
    meter = meter or ThreadCpuMeter()
    if rng is not None:
        dcid, scid = (rng.getrandbits(64).to_bytes(8, "big") for _ in range(2))
    else:
        dcid, scid = secrets.token_bytes(8), secrets.token_bytes(8)
    return InitialMessage(
        dcid=dcid,
        scid=scid,
        token=b"",
        group_id=cfg.group.value,
        key_share=_key_share(cfg, meter),
    )


def on_retry(cfg: ClientConfig, first: InitialMessage, pkt: RetryPacket,
             my_port: int, meter: Optional[Meter] = None,
             solve_start: Optional[int] = None
             ) -> tuple[InitialMessage, Optional[ChallengeSolution]]:
    """Build the second flight for a received Retry.

    A legacy client (or one told not to solve) echoes the token untouched;
    a QFAM client solves the puzzle and overwrites the MRN field. Either
    way the Retry packet's SCID comes back as the new flight's SCID so the
    server can rebind the token's associated data.
    """
    meter = meter or ThreadCpuMeter()
    solution: Optional[ChallengeSolution] = None
    token = pkt.token
    if pkt.mitigation_bit and cfg.qfam_capable and cfg.solve_challenges:
        try:
            decoded = token_codec.decode_token(token)
        except TokenError as exc:
            raise MalformedToken(str(exc)) from exc
        instance = ChallengeInstance(
            icv=decoded.icv,
            tin=decoded.header.tin,
            port=my_port,
            cci=decoded.header.cci,
        )
        solution = meter.run_solve(instance, solve_start)
        token = token_codec.encode_token(token_codec.RetryToken(
            header=decoded.header.with_mrn(solution.mrn),
            encrypted_body=decoded.encrypted_body,
            icv=decoded.icv,
        ))
    msg = InitialMessage(
        dcid=first.dcid,
        scid=pkt.scid,
        token=token,
        group_id=first.group_id,
        key_share=(first.key_share if cfg.key_share_mode == "precomputed"
                   else _key_share(cfg, meter)),
    )
    return msg, solution


def run_handshake(cfg: ClientConfig, endpoint: Endpoint, server: Address,
                  meter: Optional[Meter] = None, timeout: float = 5.0):
    """One closed-loop handshake; returns the final message received."""
    meter = meter or ThreadCpuMeter()
    first = start_handshake(cfg, meter)
    with meter.measure("send"):
        endpoint.send(server, encode_message(first))
    deadline = time.monotonic() + timeout
    while True:
        data, _src = endpoint.recv(timeout=max(deadline - time.monotonic(), 0.001))
        msg = decode_message(data)
        if isinstance(msg, RetryPacket):
            follow_up, _sol = on_retry(cfg, first, msg, endpoint.address.port,
                                       meter)
            with meter.measure("send"):
                endpoint.send(server, encode_message(follow_up))
            continue
        return msg


def run_flood(cfg: ClientConfig, duration: float, endpoint: Endpoint,
              server: Address, metrics: Optional[RoleMetrics] = None
              ) -> FloodStats:
    """Open-loop paced sender; rate 0 floods as fast as possible.

    Pacing is tick-batched (10 ms ticks) so the send machinery's fixed
    wakeup overhead amortizes over more handshakes at higher rates, the
    same profile a real paced sender shows.
    """
    metrics = metrics or RoleMetrics(role="attacker", meter=ThreadCpuMeter())
    meter = metrics.meter
    stats = FloodStats()
    cpu0 = time.thread_time()
    start = time.monotonic()
    deadline = start + duration
    interval = 1.0 / cfg.request_rate if cfg.request_rate > 0 else 0.0
    next_send = start
    in_flight: dict[bytes, tuple[InitialMessage, float]] = {}
    tick = 0.01

    def send_first() -> None:
        first = start_handshake(cfg, meter)
        with meter.measure("send"):
            endpoint.send(server, encode_message(first))
        in_flight[first.scid] = (first, time.monotonic())
        stats.sent += 1
        metrics.bump("sent")

    def drain(block_for: float) -> None:
        try:
            data, _src = endpoint.recv(timeout=block_for)
        except Timeout:
            return
        try:
            msg = decode_message(data)
        except Exception:
            return
        if isinstance(msg, RetryPacket):
            stats.retries_received += 1
            metrics.bump("retries")
            entry = in_flight.get(msg.dcid)
            if entry is None:
                return
            first, _t0 = entry
            follow_up, solution = on_retry(cfg, first, msg,
                                           endpoint.address.port, meter)
            if solution is not None:
                metrics.record_solution(solution)
                stats.solve_time_total_s += solution.wall_time_ns / 1e9
            with meter.measure("send"):
                endpoint.send(server, encode_message(follow_up))
            # second flight answers arrive addressed to the retry SCID
            in_flight[follow_up.scid] = (first, entry[1])
        elif isinstance(msg, ShloMessage):
            stats.shlos += 1
            metrics.bump("shlos")
            for scid, (first, t0) in list(in_flight.items()):
                # Shlo carries no correlation id in this lab; attribute to
                # the oldest in-flight handshake
                metrics.response_times_s.append(time.monotonic() - t0)
                stats.response_times_s.append(time.monotonic() - t0)
                del in_flight[scid]
                break
        elif isinstance(msg, RejectMessage):
            stats.rejects += 1
            metrics.bump(_REJECT_COUNTER.get(msg.reason, "rejects_badtoken"))

    while True:
        now = time.monotonic()
        if now >= deadline:
            break
        if interval > 0:
            while next_send <= now and next_send < deadline:
                send_first()
                next_send += interval
            budget = min(next_send, deadline) - time.monotonic()
            while budget > 0:
                drain(min(budget, tick))
                budget = min(next_send, deadline) - time.monotonic()
        else:
            send_first()
            drain(0.0)

    # let straggling responses land
    settle = time.monotonic() + 0.2
    while time.monotonic() < settle:
        drain(0.02)

    stats.duration_s = duration
    stats.cpu_time_s = time.thread_time() - cpu0
    return stats


def run_closed_loop(cfg: ClientConfig, duration: float, endpoint: Endpoint,
                    server: Address, metrics: Optional[RoleMetrics] = None,
                    rate: float = 0.0, handshake_timeout: float = 3.0
                    ) -> FloodStats:
    """Sequential handshakes for `duration` seconds.

    With rate 0 this runs back to back: a solving actor is then limited by
    its own CPU, which is the honest way to measure the achieved completion
    rate of a maximal-rate attacker that must solve every challenge. A
    positive rate paces the loop, which models a low-rate legitimate client
    and yields per-handshake response times.
    """
    metrics = metrics or RoleMetrics(role="client", meter=ThreadCpuMeter())
    stats = FloodStats()
    cpu0 = time.thread_time()
    start = time.monotonic()
    deadline = start + duration
    interval = 1.0 / rate if rate > 0 else 0.0
    next_start = start
    while time.monotonic() < deadline:
        if interval > 0:
            pause = next_start - time.monotonic()
            if pause > 0:
                time.sleep(pause)
            next_start += interval
        t0 = time.monotonic()
        stats.sent += 1
        metrics.bump("sent")
        try:
            msg = run_handshake(cfg, endpoint, server, metrics.meter,
                                timeout=handshake_timeout)
        except Timeout:
            continue
        if isinstance(msg, ShloMessage):
            elapsed = time.monotonic() - t0
            stats.shlos += 1
            metrics.bump("shlos")
            stats.response_times_s.append(elapsed)
            metrics.response_times_s.append(elapsed)
        elif isinstance(msg, RejectMessage):
            stats.rejects += 1
            metrics.bump(_REJECT_COUNTER.get(msg.reason, "rejects_badtoken"))
    stats.duration_s = duration
    stats.cpu_time_s = time.thread_time() - cpu0
    metrics.total_cpu_s = stats.cpu_time_s
    return stats
