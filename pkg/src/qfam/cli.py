"""Command-line surface.

    qfam serve --bind 127.0.0.1:8443 --mitigation on --cci 12
    qfam client --server 127.0.0.1:8443 --group x25519
    qfam attack --server 127.0.0.1:8443 --rate 40 --no-solve
    qfam experiment run scenario.json
    qfam token inspect <hex>
"""

from __future__ import annotations

import json
import signal
import statistics
import sys
import threading

import click

from . import token_codec
from .client import ClientConfig, run_flood, run_handshake
from .crypto_workload import KeyExchangeGroup
from .metrics import RoleMetrics, ThreadCpuMeter, amplification_factor
from .packet import ShloMessage
from .scenario import RealtimeServer, ScenarioConfig, run_scenario
from .server import Address, MitigationPolicy, ServerState
from .transport import UdpEndpoint


def _parse_addr(value: str) -> Address:
    host, _, port = value.rpartition(":")
    return Address(ip=host or "127.0.0.1", port=int(port))


@click.group()
def main() -> None:
    """Proof-of-work enhanced Retry tokens: protocol lab and harness."""


@main.command()
@click.option("--bind", default="127.0.0.1:8443", show_default=True)
@click.option("--mitigation", type=click.Choice(["off", "on", "auto"]),
              default="off", show_default=True)
@click.option("--cci", type=click.IntRange(0, 15), default=12,
              show_default=True, help="Pinned difficulty for --mitigation on.")
@click.option("--policy-file", type=click.Path(exists=True), default=None,
              help="JSON file with MitigationPolicy fields; overrides flags.")
def serve(bind: str, mitigation: str, cci: int, policy_file: str) -> None:
    """Run a handshake server until interrupted (SIGHUP reloads the policy)."""
    def load_policy() -> MitigationPolicy:
        if policy_file:
            with open(policy_file) as fh:
                raw = json.load(fh)
            if "thresholds" in raw:
                raw["thresholds"] = tuple(
                    (float(r), int(c)) for r, c in raw["thresholds"])
            return MitigationPolicy(**raw)
        return MitigationPolicy(mode=mitigation, manual_cci=cci)

    addr = _parse_addr(bind)
    endpoint = UdpEndpoint(addr.ip, addr.port)
    metrics = RoleMetrics(role="server", meter=ThreadCpuMeter())
    state = ServerState(policy=load_policy(), meter=metrics.meter)
    runner = RealtimeServer(endpoint, state, metrics)

    def reload_policy(_sig, _frame) -> None:
        state.policy = load_policy()
        click.echo("policy reloaded", err=True)

    if hasattr(signal, "SIGHUP"):
        signal.signal(signal.SIGHUP, reload_policy)
    click.echo(f"serving on {endpoint.address.ip}:{endpoint.address.port} "
               f"(mode={state.policy.mode})", err=True)
    runner.start()
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        runner.stop()
        click.echo(json.dumps({"counts": metrics.counts,
                               "cpu": metrics.meter.cpu}, indent=2))


@main.command()
@click.option("--server", "server_addr", default="127.0.0.1:8443",
              show_default=True)
@click.option("--group", type=click.Choice(["x25519", "secp256r1", "secp384r1"]),
              default="x25519", show_default=True)
@click.option("--rate", type=float, default=0.0, show_default=True,
              help="Handshakes per second; 0 = a single handshake.")
@click.option("--legacy", is_flag=True,
              help="Echo enhanced tokens unchanged instead of solving.")
@click.option("--duration", type=float, default=10.0, show_default=True)
def client(server_addr: str, group: str, rate: float, legacy: bool,
           duration: float) -> None:
    """Run a legitimate client against a server."""
    cfg = ClientConfig(group=KeyExchangeGroup.from_name(group),
                       qfam_capable=not legacy)
    endpoint = UdpEndpoint()
    dest = _parse_addr(server_addr)
    if rate == 0:
        msg = run_handshake(cfg, endpoint, dest)
        ok = isinstance(msg, ShloMessage)
        click.echo(f"handshake {'completed' if ok else f'failed: {msg}'}")
        sys.exit(0 if ok else 1)
    from .client import run_closed_loop
    metrics = RoleMetrics(role="client", meter=ThreadCpuMeter())
    stats = run_closed_loop(cfg, duration, endpoint, dest, metrics, rate=rate)
    med = (statistics.median(stats.response_times_s) * 1e3
           if stats.response_times_s else None)
    click.echo(json.dumps({"sent": stats.sent, "shlos": stats.shlos,
                           "rejects": stats.rejects,
                           "median_response_ms": med}))


@main.command()
@click.option("--server", "server_addr", default="127.0.0.1:8443",
              show_default=True)
@click.option("--rate", type=float, default=0.0, show_default=True,
              help="Requests per second; 0 = as fast as possible.")
@click.option("--precomputed-share/--fresh-share", default=True,
              show_default=True)
@click.option("--no-solve", is_flag=True, help="Never solve challenges.")
@click.option("--group", type=click.Choice(["x25519", "secp256r1", "secp384r1"]),
              default="secp384r1", show_default=True)
@click.option("--duration", type=float, default=10.0, show_default=True)
def attack(server_addr: str, rate: float, precomputed_share: bool,
           no_solve: bool, group: str, duration: float) -> None:
    """Run a flooding attacker against a server."""
    cfg = ClientConfig(
        group=KeyExchangeGroup.from_name(group),
        request_rate=rate,
        key_share_mode="precomputed" if precomputed_share else "fresh",
        solve_challenges=not no_solve,
    )
    endpoint = UdpEndpoint()
    metrics = RoleMetrics(role="attacker", meter=ThreadCpuMeter())
    stats = run_flood(cfg, duration, endpoint, _parse_addr(server_addr),
                      metrics)
    click.echo(json.dumps({
        "sent": stats.sent, "retries": stats.retries_received,
        "shlos": stats.shlos, "rejects": stats.rejects,
        "solve_time_total_s": round(stats.solve_time_total_s, 6),
        "cpu_time_s": round(stats.cpu_time_s, 6),
    }))


@main.group()
def experiment() -> None:
    """Scenario harness."""


@experiment.command("run")
@click.argument("config", type=click.Path(exists=True))
@click.option("--output", type=click.Path(), default=None,
              help="Override the CSV output path from the config.")
def experiment_run(config: str, output: str) -> None:
    """Run the scenario described by a JSON config file."""
    cfg = ScenarioConfig.load(config)
    if output:
        from dataclasses import replace
        cfg = replace(cfg, output=output)
    report = run_scenario(cfg)
    aff = amplification_factor(report)
    for phase in report.phases:
        parts = [f"phase={phase.phase}"]
        for role in sorted(phase.roles):
            rm = phase.roles[role]
            parts.append(f"{role}: shlos={rm.counts['shlos']} "
                         f"cpu={rm.handshake_cpu():.3f}s")
        pa = phase.amplification_factor()
        if pa is not None:
            parts.append(f"aff={pa:.2f}")
        click.echo("  ".join(parts))
    click.echo(f"overall amplification_factor="
               f"{'absent' if aff is None else f'{aff:.2f}'}")


@main.group()
def token() -> None:
    """Token utilities."""


@token.command("inspect")
@click.argument("hexstring")
def token_inspect(hexstring: str) -> None:
    """Render every field of a token given as hex."""
    tok = token_codec.decode_token(bytes.fromhex(hexstring))
    h = tok.header
    click.echo(f"token_type          {h.token_type} "
               f"({'NEW-TOKEN' if h.token_type else 'Retry'})")
    click.echo(f"token_key_sequence  {h.token_key_sequence} "
               f"(0x{h.token_key_sequence:02x})")
    click.echo(f"tin                 {h.tin} (0x{h.tin:016x})")
    click.echo(f"mrn                 {h.mrn} (0x{h.mrn:07x})")
    click.echo(f"cci                 {h.cci} (0b{h.cci:04b})")
    click.echo(f"encrypted_body      {len(tok.encrypted_body)} bytes: "
               f"{tok.encrypted_body.hex()}")
    click.echo(f"icv                 {tok.icv.hex()}")


if __name__ == "__main__":
    main()
