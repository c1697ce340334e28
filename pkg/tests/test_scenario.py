import csv
import json

import pytest

from qfam.client import ClientConfig
from qfam.errors import ConfigError
from qfam.metrics import COUNTER_KEYS, CostModel
from qfam.scenario import (
    ScenarioConfig,
    run_scenario,
    run_virtual_phase,
)
from qfam.server import MitigationPolicy


class TestConfig:
    def test_minimal(self):
        cfg = ScenarioConfig(kind="rate_sweep")
        assert cfg.backend == "udp"
        assert cfg.rates == (20.0,)

    @pytest.mark.parametrize("overrides", [
        {"kind": "nope"},
        {"kind": "rate_sweep", "backend": "tcp"},
        {"kind": "rate_sweep", "rates": ()},
        {"kind": "rate_sweep", "ccis": ()},
        {"kind": "rate_sweep", "duration_s": 0},
    ])
    def test_invalid_values(self, overrides):
        with pytest.raises(ConfigError):
            ScenarioConfig(**overrides)

    def test_from_dict_coerces_and_nests(self):
        cfg = ScenarioConfig.from_dict({
            "kind": "response_time",
            "rates": [20, 40],
            "ccis": ["0", "14"],
            "policy": {"mode": "on",
                       "thresholds": [[0, 0], [20, 8]]},
            "costs": {"hash": 1e-6},
        })
        assert cfg.rates == (20.0, 40.0)
        assert cfg.ccis == (0, 14)
        assert isinstance(cfg.policy, MitigationPolicy)
        assert cfg.policy.thresholds == ((0.0, 0), (20.0, 8))
        assert cfg.costs.hash == 1e-6

    def test_from_dict_unknown_key(self):
        with pytest.raises(ConfigError):
            ScenarioConfig.from_dict({"kind": "rate_sweep", "bogus": 1})

    def test_load_json(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"kind": "solve_time", "seed": 9}))
        cfg = ScenarioConfig.load(str(path))
        assert cfg.kind == "solve_time"
        assert cfg.seed == 9

    def test_base_policy_applies_scenario_fields(self):
        cfg = ScenarioConfig(kind="rate_sweep", mitigation="on",
                             reject_unsolved=False)
        pol = cfg.base_policy(10)
        assert pol.mode == "on"
        assert pol.manual_cci == 10
        assert not pol.reject_unsolved


def counts_of(result):
    return {role: dict(rm.counts) for role, rm in result.roles.items()}


class TestVirtualEngine:
    def test_no_solve_attacker_fully_rejected(self):
        policy = MitigationPolicy(mode="on", manual_cci=12)
        result, _samples = run_virtual_phase(
            "p", policy, CostModel(), seed=1, duration=2.0,
            attacker=ClientConfig.attacker(solve=False), attack_rate=30.0)
        a = result.roles["attacker"].counts
        assert a["sent"] == 60
        assert a["retries"] == 60
        assert a["shlos"] == 0
        assert a["rejects_badchallenge"] == 60

    def test_solving_attacker_completes(self):
        policy = MitigationPolicy(mode="on", manual_cci=6)
        result, _samples = run_virtual_phase(
            "p", policy, CostModel(), seed=2, duration=2.0,
            attacker=ClientConfig.attacker(solve=True), attack_rate=10.0)
        a = result.roles["attacker"].counts
        assert a["shlos"] > 0
        assert result.roles["attacker"].meter.cpu["solve"] > 0

    def test_legit_client_alone_completes_everything(self):
        policy = MitigationPolicy(mode="off")
        result, samples = run_virtual_phase(
            "p", policy, CostModel(), seed=3, duration=4.0,
            legit=ClientConfig.legitimate(), legit_rate=2.0)
        c = result.roles["client"].counts
        assert c["sent"] == 8
        assert c["shlos"] == 8
        assert result.roles["server"].counts["shlos"] == 8
        # one row per role per virtual second
        assert len(samples) == 4 * len(result.roles)

    def test_seeded_run_is_bit_reproducible(self):
        policy = MitigationPolicy(mode="on", manual_cci=8)

        def run():
            result, _ = run_virtual_phase(
                "p", policy, CostModel(), seed=11, duration=3.0,
                attacker=ClientConfig.attacker(solve=True), attack_rate=25.0,
                legit=ClientConfig.legitimate(), legit_rate=2.0)
            cpu = {r: dict(rm.meter.cpu) for r, rm in result.roles.items()}
            return counts_of(result), cpu

        assert run() == run()

    def test_different_seeds_differ(self):
        policy = MitigationPolicy(mode="on", manual_cci=10)

        def solve_cpu(seed):
            result, _ = run_virtual_phase(
                "p", policy, CostModel(), seed=seed, duration=2.0,
                attacker=ClientConfig.attacker(solve=True), attack_rate=10.0)
            return result.roles["attacker"].meter.cpu["solve"]

        assert solve_cpu(1) != solve_cpu(2)


class TestRunScenario:
    def test_solve_time_phases_and_csv(self, tmp_path):
        out = tmp_path / "solve.csv"
        cfg = ScenarioConfig(kind="solve_time", backend="inproc",
                             duration_s=2.0, rates=(10.0, 20.0), ccis=(8,),
                             seed=4, output=str(out))
        report = run_scenario(cfg)
        assert [p.phase for p in report.phases] == ["rate_10", "rate_20"]
        with open(out, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert {r["phase"] for r in rows} == {"rate_10", "rate_20"}
        assert all(set(r) == set(rows[0]) for r in rows)

    def test_response_time_grid(self):
        cfg = ScenarioConfig(kind="response_time", backend="inproc",
                             duration_s=2.0, rates=(0.0, 30.0), ccis=(0, 8),
                             attacker_solve=True, legit_rate=2.0, seed=5)
        report = run_scenario(cfg)
        assert [p.phase for p in report.phases] == [
            "r0_c0", "r0_c8", "r30_c0", "r30_c8"]
        quiet = report.phase("r0_c0")
        assert "attacker" not in quiet.roles
        assert quiet.roles["client"].counts["shlos"] == 4

    def test_scenario_repeat_is_identical(self):
        cfg = ScenarioConfig(kind="response_time", backend="inproc",
                             duration_s=2.0, rates=(25.0,), ccis=(10,),
                             attacker_solve=True, legit_rate=2.0, seed=6)

        def run():
            report = run_scenario(cfg)
            return [
                {role: {k: rm.counts[k] for k in COUNTER_KEYS}
                 for role, rm in p.roles.items()}
                for p in report.phases]

        assert run() == run()

    @pytest.mark.parametrize("backend", ["udp", "inproc"])
    def test_realtime_backends_equivalent_outcomes(self, backend):
        cfg = ScenarioConfig(kind="complexity_cpu", backend=backend,
                             duration_s=1.5, rates=(20.0,), ccis=(4,),
                             attacker_solve=True, seed=7)
        report = run_scenario(cfg)
        phase = report.phase("cci_4")
        a = phase.roles["attacker"].counts
        # solving attacker at modest rate: every flight answered, most complete
        assert a["sent"] == pytest.approx(30, abs=3)
        assert a["retries"] == pytest.approx(a["sent"], abs=3)
        assert a["shlos"] >= a["sent"] * 0.8

    def test_timeline_phase_order(self):
        cfg = ScenarioConfig(kind="timeline", backend="inproc",
                             duration_s=1.0, rates=(5.0, 40.0), ccis=(8,),
                             attacker_solve=True, seed=8)
        report = run_scenario(cfg)
        assert [p.phase for p in report.phases] == [
            "p1_low_off", "p2_high_off", "p3_high_on", "p4_low_on"]
        # mitigation off: no retries; mitigation on: retries for every flight
        assert report.phase("p1_low_off").roles["server"].counts["retries"] == 0
        assert report.phase("p3_high_on").roles["server"].counts["retries"] > 0
