"""Experiment harness: scenario configs, a threaded real-time runner for
UDP/in-process transports, and a deterministic virtual-time engine.

The virtual engine replays the same protocol logic over an event queue with
fixed per-operation service times (see `metrics.CostModel`), sized so the
virtual server saturates near 100 requests/second. Seeded runs are fully
reproducible: every random draw (connection ids, token numbers, solve start
points) comes from the scenario seed.
"""

from __future__ import annotations

import heapq
import json
import math
import random
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

from . import client as client_mod
from . import server as server_mod
from .client import ClientConfig
from .crypto_workload import KeyExchangeGroup
from .errors import CodecError, ConfigError
from .metrics import (
    CostModel,
    MetricsReport,
    PhaseResult,
    RoleMetrics,
    ThreadCpuMeter,
    VirtualCostMeter,
    phase_samples,
)
from .packet import (
    InitialMessage,
    RejectMessage,
    RejectReason,
    RetryPacket,
    ShloMessage,
    decode_message,
    encode_message,
)
from .server import (
    Address,
    TokenKeyStore,
    Drop,
    EnqueueLow,
    MitigationPolicy,
    SendReject,
    SendRetry,
    SendShlo,
    ServerState,
    drain_low_priority,
    on_initial,
)
from .transport import Endpoint, InprocNetwork, Timeout, UdpEndpoint

SCENARIO_KINDS = (
    "rate_sweep", "complexity_cpu", "rate_reduction",
    "timeline", "solve_time", "response_time",
)

_REJECT_COUNTER = {
    RejectReason.BAD_TOKEN: "rejects_badtoken",
    RejectReason.BAD_CHALLENGE: "rejects_badchallenge",
    RejectReason.OVERLOADED: "rejects_overloaded",
}


@dataclass(frozen=True)
class ScenarioConfig:
    kind: str
    duration_s: float = 10.0
    rates: tuple[float, ...] = (20.0,)
    ccis: tuple[int, ...] = (0,)
    backend: str = "udp"  # udp (threaded real time) | inproc (virtual time)
    seed: int = 0
    attacker_solve: bool = False
    attacker_group: str = "SECP384R1"
    legit_rate: float = 0.0  # 0 = no legitimate client
    reject_unsolved: bool = True
    mitigation: str = "on"  # off | on | auto (server mode during attack phases)
    policy: Optional[MitigationPolicy] = None
    costs: CostModel = field(default_factory=CostModel)
    output: Optional[str] = None
    sample_interval_s: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in SCENARIO_KINDS:
            raise ConfigError(f"unknown scenario kind {self.kind!r}")
        if self.backend not in ("udp", "inproc"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        if not self.rates or not self.ccis:
            raise ConfigError("rates and ccis must be non-empty")
        if self.duration_s <= 0:
            raise ConfigError("duration_s must be positive")

    @classmethod
    def from_dict(cls, raw: dict) -> "ScenarioConfig":
        data = dict(raw)
        if "rates" in data:
            data["rates"] = tuple(float(r) for r in data["rates"])
        if "ccis" in data:
            data["ccis"] = tuple(int(c) for c in data["ccis"])
        if "policy" in data and data["policy"] is not None:
            pol = dict(data["policy"])
            if "thresholds" in pol:
                pol["thresholds"] = tuple(
                    (float(r), int(c)) for r, c in pol["thresholds"])
            data["policy"] = MitigationPolicy(**pol)
        if "costs" in data and data["costs"] is not None:
            data["costs"] = CostModel(**data["costs"])
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str) -> "ScenarioConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def attacker_config(self, rate: float) -> ClientConfig:
        return ClientConfig.attacker(
            rate=rate,
            solve=self.attacker_solve,
            group=KeyExchangeGroup.from_name(self.attacker_group),
        )

    def base_policy(self, cci: int) -> MitigationPolicy:
        pol = self.policy or MitigationPolicy()
        return replace(pol, mode=self.mitigation, manual_cci=cci,
                       reject_unsolved=self.reject_unsolved)


# ---------------------------------------------------------------------------
# threaded real-time runner
# ---------------------------------------------------------------------------


class RealtimeServer:
    """Single-writer server loop over one endpoint."""

    def __init__(self, endpoint: Endpoint, state: ServerState,
                 metrics: RoleMetrics, drain_budget: int = 4):
        self.endpoint = endpoint
        self.state = state
        self.metrics = metrics
        self.drain_budget = drain_budget
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    def start(self) -> None:
        self._thread = threading.Thread(target=self._run, name="qfam-server",
                                        daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()

    def _dispatch(self, action: server_mod.Action, src: Address) -> None:
        if isinstance(action, SendShlo):
            dest = action.dest or src
            self.endpoint.send(dest, encode_message(action.shlo))
            self.metrics.bump("shlos")
        elif isinstance(action, SendRetry):
            self.endpoint.send(src, encode_message(action.packet))
            self.metrics.bump("retries")
        elif isinstance(action, SendReject):
            self.endpoint.send(src, encode_message(RejectMessage(action.reason)))
            self.metrics.bump(_REJECT_COUNTER.get(action.reason,
                                                  "rejects_badtoken"))
        # EnqueueLow / Drop: nothing on the wire

    def _run(self) -> None:
        cpu0 = time.thread_time()
        while not self._stop.is_set():
            try:
                data, src = self.endpoint.recv(timeout=0.005)
            except Timeout:
                for action in drain_low_priority(self.state, self.drain_budget):
                    if isinstance(action, SendShlo) and action.dest is not None:
                        self._dispatch(action, src=action.dest)
                continue
            try:
                msg = decode_message(data)
            except CodecError:
                continue
            if not isinstance(msg, InitialMessage):
                continue
            action = on_initial(self.state, msg, src, now=time.time())
            self._dispatch(action, src)
        self.metrics.total_cpu_s = time.thread_time() - cpu0


def _make_endpoints(backend: str, network: Optional[InprocNetwork],
                    n: int) -> list[Endpoint]:
    if backend == "udp":
        return [UdpEndpoint("127.0.0.1", 0) for _ in range(n)]
    assert network is not None
    return [network.endpoint(ip=f"10.0.0.{i + 1}") for i in range(n)]


def run_realtime_phase(phase: str, policy: MitigationPolicy,
                       attacker: Optional[ClientConfig], duration: float,
                       backend: str = "udp",
                       network: Optional[InprocNetwork] = None,
                       legit: Optional[ClientConfig] = None,
                       legit_rate: float = 1.0,
                       attacker_closed_loop: bool = False,
                       state: Optional[ServerState] = None) -> PhaseResult:
    """Run server plus up to two actors for `duration` wall seconds."""
    n = 1 + (attacker is not None) + (legit is not None)
    endpoints = _make_endpoints(backend, network, n)
    server_ep = endpoints[0]
    server_metrics = RoleMetrics(role="server", meter=ThreadCpuMeter())
    if state is None:
        state = ServerState(policy=policy, meter=server_metrics.meter)
    else:
        state.policy = policy
        state.meter = server_metrics.meter
    runner = RealtimeServer(server_ep, state, server_metrics)
    runner.start()

    roles = {"server": server_metrics}
    threads = []
    idx = 1
    if attacker is not None:
        a_ep = endpoints[idx]
        idx += 1
        a_metrics = RoleMetrics(role="attacker", meter=ThreadCpuMeter())
        roles["attacker"] = a_metrics

        def attack() -> None:
            if attacker_closed_loop:
                client_mod.run_closed_loop(attacker, duration, a_ep,
                                           server_ep.address, a_metrics)
            else:
                stats = client_mod.run_flood(attacker, duration, a_ep,
                                             server_ep.address, a_metrics)
                a_metrics.total_cpu_s = stats.cpu_time_s
        threads.append(threading.Thread(target=attack, name="qfam-attacker"))
    if legit is not None:
        l_ep = endpoints[idx]
        l_metrics = RoleMetrics(role="client", meter=ThreadCpuMeter())
        roles["client"] = l_metrics
        threads.append(threading.Thread(
            target=client_mod.run_closed_loop,
            args=(legit, duration, l_ep, server_ep.address, l_metrics),
            kwargs={"rate": legit_rate},
            name="qfam-client"))

    for t in threads:
        t.start()
    for t in threads:
        t.join()
    time.sleep(0.05)
    runner.stop()
    for ep in endpoints:
        ep.close()
    return PhaseResult(phase=phase, duration_s=duration, roles=roles)


# ---------------------------------------------------------------------------
# deterministic virtual-time engine
# ---------------------------------------------------------------------------


@dataclass
class _HandshakeCtx:
    actor: "_VirtualActor"
    t_start: float
    first: InitialMessage


class _VirtualActor:
    def __init__(self, name: str, cfg: ClientConfig, address: Address,
                 rng: random.Random, costs: CostModel, max_lag: float = 1.0):
        self.name = name
        self.cfg = cfg
        self.address = address
        self.rng = rng
        self.metrics = RoleMetrics(role=name, meter=VirtualCostMeter(costs))
        self.cpu_free = 0.0
        self.max_lag = max_lag

    def alloc(self, t: float, duration: float) -> Optional[float]:
        """Schedule `duration` of virtual CPU; None when the actor has
        fallen too far behind and abandons the job."""
        start = max(t, self.cpu_free)
        if start - t > self.max_lag:
            return None
        self.cpu_free = start + duration
        return self.cpu_free


class VirtualEngine:
    """Event-driven simulation of one phase at testbed-scale service times."""

    def __init__(self, policy: MitigationPolicy, costs: CostModel, seed: int,
                 latency: float = 0.0005, sample_interval: float = 1.0,
                 phase: str = "phase"):
        self.costs = costs
        self.latency = latency
        self.phase = phase
        self.sample_interval = sample_interval
        self.now = 0.0
        self._events: list[tuple[float, int, Callable[[], None]]] = []
        self._seq = 0
        self.rng = random.Random(seed)
        self.server_meter = VirtualCostMeter(costs)
        self.server_metrics = RoleMetrics(role="server", meter=self.server_meter)
        # the token keys must come from the seed too: ICVs feed the puzzle,
        # so a random key store would make solve costs vary across runs
        key_rng = random.Random(self.rng.getrandbits(64))
        key_store = TokenKeyStore(
            entries={0: (key_rng.randbytes(16), key_rng.randbytes(12))},
            active_sequence=0)
        self.state = ServerState(
            key_store=key_store,
            policy=policy, meter=self.server_meter,
            rng=random.Random(self.rng.getrandbits(64)))
        self.server_addr = Address("10.0.0.1", 8443)
        self.server_cpu_free = 0.0
        self.backlog = 0
        self.actors: dict[Address, _VirtualActor] = {}
        self.roles: dict[str, RoleMetrics] = {"server": self.server_metrics}
        self.samples: list = []
        self._drain_pending = False

    # -- plumbing --

    def schedule(self, t: float, fn: Callable[[], None]) -> None:
        heapq.heappush(self._events, (t, self._seq, fn))
        self._seq += 1

    def add_actor(self, name: str, cfg: ClientConfig, rate: float,
                  duration: float, max_lag: float = 1.0) -> _VirtualActor:
        address = Address(f"10.0.1.{len(self.actors) + 1}", 9000)
        actor = _VirtualActor(name, cfg, address,
                              random.Random(self.rng.getrandbits(64)),
                              self.costs, max_lag)
        self.actors[address] = actor
        self.roles[name] = actor.metrics
        if rate <= 0:
            raise ConfigError("virtual actors need a positive rate")
        count = int(rate * duration)
        for k in range(count):
            t = k / rate
            self.schedule(t, lambda a=actor, t=t: self._start_handshake(a, t))
        return actor

    def run(self, duration: float) -> PhaseResult:
        for k in range(1, math.ceil(duration / self.sample_interval) + 1):
            t = k * self.sample_interval
            self.schedule(t, lambda t=t: self._sample(t))
        while self._events:
            t, _seq, fn = heapq.heappop(self._events)
            self.now = t
            fn()
        return PhaseResult(phase=self.phase, duration_s=duration,
                           roles=dict(self.roles))

    def _sample(self, t: float) -> None:
        result = PhaseResult(phase=self.phase, duration_s=t, roles=self.roles)
        self.samples.extend(phase_samples(result, start_s=0.0))

    # -- client side --

    def _start_handshake(self, actor: _VirtualActor, t: float) -> None:
        meter = actor.metrics.meter
        meter.take_accrued()
        first = client_mod.start_handshake(actor.cfg, meter, rng=actor.rng)
        with meter.measure("send"):
            data = encode_message(first)
        done = actor.alloc(t, meter.take_accrued())
        if done is None:
            return
        actor.metrics.bump("sent")
        ctx = _HandshakeCtx(actor=actor, t_start=t, first=first)
        self.schedule(done + self.latency,
                      lambda: self._server_recv(data, actor.address, ctx))

    def _client_recv(self, ctx: _HandshakeCtx, data: bytes) -> None:
        actor = ctx.actor
        meter = actor.metrics.meter
        msg = decode_message(data)
        if isinstance(msg, RetryPacket):
            actor.metrics.bump("retries")
            meter.take_accrued()
            follow_up, solution = client_mod.on_retry(
                actor.cfg, ctx.first, msg, actor.address.port, meter,
                solve_start=actor.rng.randrange(1 << 28))
            with meter.measure("send"):
                out = encode_message(follow_up)
            done = actor.alloc(self.now, meter.take_accrued())
            if done is None:
                return  # fell behind; challenge abandoned
            if solution is not None:
                actor.metrics.record_solution(
                    solution, wall_s=solution.iterations * self.costs.hash)
            self.schedule(done + self.latency,
                          lambda: self._server_recv(out, actor.address, ctx))
        elif isinstance(msg, ShloMessage):
            actor.metrics.bump("shlos")
            actor.metrics.response_times_s.append(self.now - ctx.t_start)
        elif isinstance(msg, RejectMessage):
            actor.metrics.bump(_REJECT_COUNTER.get(msg.reason,
                                                   "rejects_badtoken"))

    # -- server side --

    def _server_recv(self, data: bytes, src: Address,
                     ctx: _HandshakeCtx) -> None:
        if self.backlog >= self.state.policy.high_queue_capacity:
            self.server_metrics.bump("queue_drops")
            return
        self.backlog += 1
        t_start = max(self.now, self.server_cpu_free)
        msg = decode_message(data)
        self.server_meter.take_accrued()
        action = on_initial(self.state, msg, src, now=t_start)
        self.server_meter.add("send", self.costs.send)  # recv+dispatch cost
        service = self.server_meter.take_accrued()
        self.server_cpu_free = t_start + service
        self.schedule(self.server_cpu_free,
                      lambda: self._server_done(action, ctx))

    def _server_done(self, action: server_mod.Action,
                     ctx: _HandshakeCtx) -> None:
        self.backlog -= 1
        if isinstance(action, SendShlo):
            self.server_metrics.bump("shlos")
            out = encode_message(action.shlo)
            self.schedule(self.now + self.latency,
                          lambda: self._client_recv(ctx, out))
        elif isinstance(action, SendRetry):
            self.server_metrics.bump("retries")
            out = encode_message(action.packet)
            self.schedule(self.now + self.latency,
                          lambda: self._client_recv(ctx, out))
        elif isinstance(action, SendReject):
            self.server_metrics.bump(
                _REJECT_COUNTER.get(action.reason, "rejects_badtoken"))
            out = encode_message(RejectMessage(action.reason))
            self.schedule(self.now + self.latency,
                          lambda: self._client_recv(ctx, out))
        elif isinstance(action, EnqueueLow):
            self._schedule_drain()

    def _schedule_drain(self) -> None:
        if self._drain_pending:
            return
        self._drain_pending = True
        self.schedule(max(self.now, self.server_cpu_free) + 0.01, self._drain)

    def _drain(self) -> None:
        self._drain_pending = False
        if self.backlog > 0:
            self._schedule_drain()
            return
        self.server_meter.take_accrued()
        actions = drain_low_priority(self.state, budget=4)
        service = self.server_meter.take_accrued()
        t_start = max(self.now, self.server_cpu_free)
        self.server_cpu_free = t_start + service
        for action in actions:
            if isinstance(action, SendShlo) and action.dest is not None:
                actor = self.actors.get(action.dest)
                self.server_metrics.bump("shlos")
                if actor is not None:
                    out = encode_message(action.shlo)
                    # low-priority completions have no per-handshake ctx;
                    # deliver directly so the actor can count the Shlo
                    self.schedule(
                        self.server_cpu_free + self.latency,
                        lambda a=actor, o=out: self._deliver_plain(a, o))
        if self.state.low_queue:
            self._schedule_drain()

    def _deliver_plain(self, actor: _VirtualActor, data: bytes) -> None:
        msg = decode_message(data)
        if isinstance(msg, ShloMessage):
            actor.metrics.bump("shlos")


def run_virtual_phase(phase: str, policy: MitigationPolicy, costs: CostModel,
                      seed: int, duration: float,
                      attacker: Optional[ClientConfig] = None,
                      attack_rate: float = 0.0,
                      legit: Optional[ClientConfig] = None,
                      legit_rate: float = 0.0,
                      sample_interval: float = 1.0
                      ) -> tuple[PhaseResult, list]:
    engine = VirtualEngine(policy=policy, costs=costs, seed=seed,
                           sample_interval=sample_interval, phase=phase)
    if attacker is not None and attack_rate > 0:
        engine.add_actor("attacker", attacker, attack_rate, duration)
    if legit is not None and legit_rate > 0:
        engine.add_actor("client", legit, legit_rate, duration, max_lag=30.0)
    result = engine.run(duration)
    return result, engine.samples


# ---------------------------------------------------------------------------
# scenario dispatch
# ---------------------------------------------------------------------------


def run_scenario(cfg: ScenarioConfig) -> MetricsReport:
    report = MetricsReport(scenario=cfg.kind)
    network = InprocNetwork(seed=cfg.seed) if cfg.backend == "inproc" else None

    def add_phase(result: PhaseResult, samples=None) -> None:
        report.phases.append(result)
        offset = sum(p.duration_s for p in report.phases[:-1])
        if samples is not None:
            for s in samples:
                s.timestamp_s += offset
            report.samples.extend(samples)
        else:
            report.samples.extend(phase_samples(result, start_s=offset))

    if cfg.kind == "rate_sweep":
        policy = cfg.base_policy(0)
        policy = replace(policy, mode="off")
        for rate in cfg.rates:
            result = run_realtime_phase(
                phase=f"rate_{rate:g}", policy=policy,
                attacker=cfg.attacker_config(rate), duration=cfg.duration_s,
                backend=cfg.backend, network=network)
            add_phase(result)

    elif cfg.kind == "complexity_cpu":
        rate = cfg.rates[0]
        for cci in cfg.ccis:
            result = run_realtime_phase(
                phase=f"cci_{cci}", policy=cfg.base_policy(cci),
                attacker=cfg.attacker_config(rate), duration=cfg.duration_s,
                backend=cfg.backend, network=network)
            add_phase(result)

    elif cfg.kind == "rate_reduction":
        for cci in cfg.ccis:
            result = run_realtime_phase(
                phase=f"cci_{cci}", policy=cfg.base_policy(cci),
                attacker=cfg.attacker_config(0.0), duration=cfg.duration_s,
                backend=cfg.backend, network=network,
                attacker_closed_loop=True)
            add_phase(result)

    elif cfg.kind == "timeline":
        low, high = (cfg.rates + cfg.rates)[:2]
        cci = cfg.ccis[0]
        phases = [
            ("p1_low_off", low, replace(cfg.base_policy(cci), mode="off")),
            ("p2_high_off", high, replace(cfg.base_policy(cci), mode="off")),
            ("p3_high_on", high, replace(cfg.base_policy(cci), mode="on")),
            ("p4_low_on", low, replace(cfg.base_policy(cci), mode="on")),
        ]
        state: Optional[ServerState] = None
        for name, rate, policy in phases:
            result = run_realtime_phase(
                phase=name, policy=policy,
                attacker=cfg.attacker_config(rate), duration=cfg.duration_s,
                backend=cfg.backend, network=network, state=state)
            state = None  # endpoints are rebuilt per phase; state kept fresh
            add_phase(result)

    elif cfg.kind == "solve_time":
        cci = cfg.ccis[0]
        attacker = replace(cfg.attacker_config(0.0), request_rate=0.0,
                           solve_challenges=True)
        for i, rate in enumerate(cfg.rates):
            result, samples = run_virtual_phase(
                phase=f"rate_{rate:g}", policy=cfg.base_policy(cci),
                costs=cfg.costs, seed=cfg.seed + i, duration=cfg.duration_s,
                attacker=attacker, attack_rate=rate,
                sample_interval=cfg.sample_interval_s)
            add_phase(result, samples)

    elif cfg.kind == "response_time":
        legit = ClientConfig.legitimate()
        legit_rate = cfg.legit_rate or 2.0
        for i, rate in enumerate(cfg.rates):
            for j, cci in enumerate(cfg.ccis):
                attacker = (replace(cfg.attacker_config(rate),
                                    solve_challenges=cfg.attacker_solve)
                            if rate > 0 else None)
                result, samples = run_virtual_phase(
                    phase=f"r{rate:g}_c{cci}", policy=cfg.base_policy(cci),
                    costs=cfg.costs, seed=cfg.seed + 1000 * i + j,
                    duration=cfg.duration_s,
                    attacker=attacker, attack_rate=rate,
                    legit=legit, legit_rate=legit_rate,
                    sample_interval=cfg.sample_interval_s)
                add_phase(result, samples)

    if cfg.output:
        from .metrics import emit_csv
        emit_csv(report, cfg.output)
    return report
