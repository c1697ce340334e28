"""CPU accounting and experiment reporting.

Two interchangeable meters attribute CPU to the categories
{send, solve, keyexchange, token, other}:

* `ThreadCpuMeter` reads the per-thread CPU clock around instrumented
  regions — the real-time backends use it.
* `VirtualCostMeter` charges fixed per-operation service times from a
  `CostModel` — the deterministic in-process engine uses it, with defaults
  sized so the virtual server saturates around 100 requests/second, the
  regime the reference measurements were taken in.

Timers never nest: a region opened inside another is a no-op, so category
sums can never exceed the role's total CPU.
"""

from __future__ import annotations

import csv
import statistics
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Iterator, Optional

from . import challenge as challenge_mod
from .challenge import ChallengeInstance, ChallengeSolution

CATEGORIES = ("send", "solve", "keyexchange", "token")

CSV_COLUMNS = (
    "timestamp_s", "phase", "role",
    "cpu_send_s", "cpu_solve_s", "cpu_keyexchange_s", "cpu_token_s",
    "sent", "retries", "shlos",
    "rejects_badtoken", "rejects_badchallenge", "rejects_overloaded",
    "median_response_ms", "amplification_factor",
)

COUNTER_KEYS = (
    "sent", "retries", "shlos",
    "rejects_badtoken", "rejects_badchallenge", "rejects_overloaded",
    "queue_drops",
)


@dataclass(frozen=True)
class CostModel:
    """Virtual service times, in seconds per operation."""

    hash: float = 5e-6
    keyexchange: dict[str, float] = field(default_factory=lambda: {
        "X25519": 2e-3,
        "SECP256R1": 4e-3,
        "SECP384R1": 10e-3,
    })
    token_op: float = 5e-4
    send: float = 1e-4

    def cost(self, category: str, op: str) -> float:
        if category == "keyexchange":
            return self.keyexchange[op]
        if category == "token":
            return self.token_op
        if category == "send":
            return self.send
        if category == "solve":
            return self.hash
        return 0.0


class Meter:
    """Accumulates CPU per category for one role."""

    def __init__(self) -> None:
        self.cpu: dict[str, float] = {c: 0.0 for c in CATEGORIES}
        self.total_cpu = 0.0
        self._depth = 0

    def add(self, category: str, seconds: float) -> None:
        self.cpu[category] += seconds
        self.total_cpu += seconds

    @contextmanager
    def measure(self, category: str, op: str = "op") -> Iterator[None]:
        raise NotImplementedError

    def run_solve(self, instance: ChallengeInstance,
                  start: Optional[int] = None) -> ChallengeSolution:
        raise NotImplementedError

    def take_accrued(self) -> float:
        """Seconds charged since the last call; the virtual engine reads
        this as the service time of the datagram just processed."""
        raise NotImplementedError


class ThreadCpuMeter(Meter):
    def __init__(self) -> None:
        super().__init__()
        self._accrued = 0.0

    @contextmanager
    def measure(self, category: str, op: str = "op") -> Iterator[None]:
        if self._depth:
            yield
            return
        self._depth += 1
        t0 = time.thread_time()
        try:
            yield
        finally:
            self._depth -= 1
            dt = time.thread_time() - t0
            self.add(category, dt)
            self._accrued += dt

    def run_solve(self, instance: ChallengeInstance,
                  start: Optional[int] = None) -> ChallengeSolution:
        with self.measure("solve"):
            return challenge_mod.solve(instance, start)

    def take_accrued(self) -> float:
        out = self._accrued
        self._accrued = 0.0
        return out


class VirtualCostMeter(Meter):
    def __init__(self, costs: Optional[CostModel] = None) -> None:
        super().__init__()
        self.costs = costs or CostModel()
        self._accrued = 0.0

    def add(self, category: str, seconds: float) -> None:
        super().add(category, seconds)
        self._accrued += seconds

    @contextmanager
    def measure(self, category: str, op: str = "op") -> Iterator[None]:
        if self._depth:
            yield
            return
        self._depth += 1
        try:
            yield
        finally:
            self._depth -= 1
            self.add(category, self.costs.cost(category, op))

    def run_solve(self, instance: ChallengeInstance,
                  start: Optional[int] = None) -> ChallengeSolution:
        solution = challenge_mod.solve(instance, start)
        self.add("solve", solution.iterations * self.costs.hash)
        return solution

    def take_accrued(self) -> float:
        out = self._accrued
        self._accrued = 0.0
        return out


@dataclass
class RoleMetrics:
    role: str
    meter: Meter
    counts: dict[str, int] = field(
        default_factory=lambda: {k: 0 for k in COUNTER_KEYS})
    response_times_s: list[float] = field(default_factory=list)
    solve_iterations: list[int] = field(default_factory=list)
    solve_wall_s: list[float] = field(default_factory=list)
    # whole-thread CPU over the run, set by the real-time runner; mirrors
    # process-level sampling and includes loop overhead
    total_cpu_s: float = 0.0

    def bump(self, key: str, n: int = 1) -> None:
        self.counts[key] += n

    def record_solution(self, solution: ChallengeSolution,
                        wall_s: Optional[float] = None) -> None:
        self.solve_iterations.append(solution.iterations)
        if wall_s is None:
            wall_s = solution.wall_time_ns / 1e9
        self.solve_wall_s.append(wall_s)

    def handshake_cpu(self) -> float:
        """CPU the role spent driving handshakes over the interval.

        Real-time runs report whole-thread CPU; the virtual engine has no
        'other' bucket, so category sums are the total there.
        """
        if self.total_cpu_s > 0:
            return self.total_cpu_s
        return sum(self.meter.cpu.values())


@dataclass
class Sample:
    timestamp_s: float
    phase: str
    role: str
    cpu: dict[str, float]
    counts: dict[str, int]
    median_response_ms: Optional[float]
    amplification_factor: Optional[float]


@dataclass
class PhaseResult:
    phase: str
    duration_s: float
    roles: dict[str, RoleMetrics]

    def amplification_factor(self) -> Optional[float]:
        server = self.roles.get("server")
        attacker = self.roles.get("attacker")
        if server is None or attacker is None:
            return None
        denom = attacker.handshake_cpu()
        if denom == 0:
            return None
        return server.handshake_cpu() / denom


@dataclass
class MetricsReport:
    scenario: str
    phases: list[PhaseResult] = field(default_factory=list)
    samples: list[Sample] = field(default_factory=list)

    def phase(self, name: str) -> PhaseResult:
        for p in self.phases:
            if p.phase == name:
                return p
        raise KeyError(name)

    def role_totals(self, role: str) -> tuple[dict[str, float], dict[str, int]]:
        cpu = {c: 0.0 for c in CATEGORIES}
        counts = {k: 0 for k in COUNTER_KEYS}
        for p in self.phases:
            rm = p.roles.get(role)
            if rm is None:
                continue
            for c in CATEGORIES:
                cpu[c] += rm.meter.cpu[c]
            for k in COUNTER_KEYS:
                counts[k] += rm.counts[k]
        return cpu, counts


def amplification_factor(report: MetricsReport) -> Optional[float]:
    """Server handshake CPU over attacker handshake CPU, whole run.

    Absent (None) when the attacker spent no measurable CPU.
    """
    server_cpu, _ = report.role_totals("server")
    attacker_cpu, _ = report.role_totals("attacker")
    denom = sum(attacker_cpu.values())
    if denom == 0:
        return None
    return sum(server_cpu.values()) / denom


def phase_samples(result: PhaseResult, start_s: float,
                  interval_s: float = 1.0) -> list[Sample]:
    """Flatten a finished phase into per-role rows.

    One row per role at the phase end timestamp; finer-grained sampling is
    appended live by the real-time runner.
    """
    aff = result.amplification_factor()
    rows = []
    for role in sorted(result.roles):
        rm = result.roles[role]
        med = (statistics.median(rm.response_times_s) * 1e3
               if rm.response_times_s else None)
        rows.append(Sample(
            timestamp_s=start_s + result.duration_s,
            phase=result.phase,
            role=role,
            cpu=dict(rm.meter.cpu),
            counts={k: rm.counts[k] for k in COUNTER_KEYS},
            median_response_ms=med,
            amplification_factor=aff if role == "server" else None,
        ))
    return rows


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def emit_csv(report: MetricsReport, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for s in report.samples:
            writer.writerow([
                _fmt(s.timestamp_s), s.phase, s.role,
                _fmt(s.cpu["send"]), _fmt(s.cpu["solve"]),
                _fmt(s.cpu["keyexchange"]), _fmt(s.cpu["token"]),
                s.counts["sent"], s.counts["retries"], s.counts["shlos"],
                s.counts["rejects_badtoken"], s.counts["rejects_badchallenge"],
                s.counts["rejects_overloaded"],
                _fmt(s.median_response_ms), _fmt(s.amplification_factor),
            ])
