import csv
import random

import pytest

from qfam import metrics as mx
from qfam.challenge import ChallengeInstance


def make_instance(cci=4, seed=0):
    rng = random.Random(seed)
    return ChallengeInstance(icv=rng.randbytes(16), tin=rng.getrandbits(64),
                             port=443, cci=cci)


def role(name, cpu=0.0, total=0.0):
    rm = mx.RoleMetrics(role=name, meter=mx.VirtualCostMeter())
    rm.meter.add("keyexchange", cpu)
    rm.total_cpu_s = total
    return rm


class TestThreadCpuMeter:
    def test_nested_regions_do_not_double_count(self):
        meter = mx.ThreadCpuMeter()
        with meter.measure("token"):
            with meter.measure("keyexchange"):
                sum(range(200_000))
        assert meter.cpu["keyexchange"] == 0.0
        assert meter.cpu["token"] > 0.0
        assert meter.total_cpu == pytest.approx(sum(meter.cpu.values()))

    def test_run_solve_charges_solve_category(self):
        meter = mx.ThreadCpuMeter()
        solution = meter.run_solve(make_instance(cci=8, seed=1), start=0)
        assert solution.iterations >= 1
        assert meter.cpu["solve"] > 0.0

    def test_take_accrued_resets(self):
        meter = mx.ThreadCpuMeter()
        with meter.measure("send"):
            sum(range(50_000))
        first = meter.take_accrued()
        assert first > 0.0
        assert meter.take_accrued() == 0.0


class TestVirtualCostMeter:
    def test_fixed_costs_charged(self):
        costs = mx.CostModel()
        meter = mx.VirtualCostMeter(costs)
        with meter.measure("keyexchange", "SECP384R1"):
            pass
        with meter.measure("token", "seal"):
            pass
        with meter.measure("send"):
            pass
        assert meter.cpu["keyexchange"] == costs.keyexchange["SECP384R1"]
        assert meter.cpu["token"] == costs.token_op
        assert meter.cpu["send"] == costs.send
        assert meter.take_accrued() == pytest.approx(
            costs.keyexchange["SECP384R1"] + costs.token_op + costs.send)

    def test_solve_cost_scales_with_iterations(self):
        costs = mx.CostModel()
        meter = mx.VirtualCostMeter(costs)
        solution = meter.run_solve(make_instance(cci=8, seed=2), start=0)
        assert meter.cpu["solve"] == pytest.approx(
            solution.iterations * costs.hash)

    def test_nested_regions_do_not_double_count(self):
        meter = mx.VirtualCostMeter()
        with meter.measure("token", "seal"):
            with meter.measure("keyexchange", "X25519"):
                pass
        assert meter.cpu["keyexchange"] == 0.0
        assert meter.cpu["token"] == meter.costs.token_op


class TestAmplificationFactor:
    def test_phase_ratio(self):
        phase = mx.PhaseResult(phase="p", duration_s=1.0, roles={
            "server": role("server", cpu=4.0),
            "attacker": role("attacker", cpu=2.0),
        })
        assert phase.amplification_factor() == pytest.approx(2.0)

    def test_equal_cpu_is_unity(self):
        phase = mx.PhaseResult(phase="p", duration_s=1.0, roles={
            "server": role("server", cpu=3.0),
            "attacker": role("attacker", cpu=3.0),
        })
        assert phase.amplification_factor() == pytest.approx(1.0)

    def test_absent_when_attacker_idle_or_missing(self):
        no_attacker = mx.PhaseResult(phase="p", duration_s=1.0, roles={
            "server": role("server", cpu=4.0)})
        idle = mx.PhaseResult(phase="p", duration_s=1.0, roles={
            "server": role("server", cpu=4.0),
            "attacker": role("attacker", cpu=0.0)})
        assert no_attacker.amplification_factor() is None
        assert idle.amplification_factor() is None

    def test_whole_thread_cpu_preferred(self):
        phase = mx.PhaseResult(phase="p", duration_s=1.0, roles={
            "server": role("server", cpu=1.0, total=6.0),
            "attacker": role("attacker", cpu=1.0, total=3.0),
        })
        assert phase.amplification_factor() == pytest.approx(2.0)

    def test_report_level_aggregation(self):
        report = mx.MetricsReport(scenario="s", phases=[
            mx.PhaseResult(phase="a", duration_s=1.0, roles={
                "server": role("server", cpu=2.0),
                "attacker": role("attacker", cpu=1.0)}),
            mx.PhaseResult(phase="b", duration_s=1.0, roles={
                "server": role("server", cpu=4.0),
                "attacker": role("attacker", cpu=1.0)}),
        ])
        assert mx.amplification_factor(report) == pytest.approx(3.0)
        assert mx.amplification_factor(
            mx.MetricsReport(scenario="empty")) is None


class TestCsv:
    def make_report(self):
        server = role("server", cpu=1.25)
        server.bump("sent", 10)
        server.response_times_s.extend([0.010, 0.020, 0.030])
        attacker = role("attacker", cpu=0.5)
        phase = mx.PhaseResult(phase="rate_20", duration_s=2.0,
                               roles={"server": server, "attacker": attacker})
        report = mx.MetricsReport(scenario="test", phases=[phase])
        report.samples.extend(mx.phase_samples(phase, start_s=0.0))
        return report

    def test_columns_and_values(self, tmp_path):
        path = tmp_path / "out.csv"
        mx.emit_csv(self.make_report(), str(path))
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0].keys()) == list(mx.CSV_COLUMNS)
        by_role = {r["role"]: r for r in rows}
        assert set(by_role) == {"server", "attacker"}
        assert by_role["server"]["phase"] == "rate_20"
        assert by_role["server"]["sent"] == "10"
        assert by_role["server"]["median_response_ms"] == "20.000000"
        assert float(by_role["server"]["amplification_factor"]) == \
            pytest.approx(2.5)
        assert by_role["attacker"]["amplification_factor"] == ""
        assert by_role["attacker"]["median_response_ms"] == ""

    def test_deterministic_output(self, tmp_path):
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        mx.emit_csv(self.make_report(), str(p1))
        mx.emit_csv(self.make_report(), str(p2))
        assert p1.read_bytes() == p2.read_bytes()

    def test_empty_report_is_header_only(self, tmp_path):
        path = tmp_path / "empty.csv"
        mx.emit_csv(mx.MetricsReport(scenario="none"), str(path))
        lines = path.read_text().strip().splitlines()
        assert len(lines) == 1
        assert lines[0] == ",".join(mx.CSV_COLUMNS)
