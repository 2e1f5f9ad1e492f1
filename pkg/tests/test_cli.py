"""Command line surface: exit codes, output shapes, server round trips."""

import json
import os
import signal
import subprocess
import sys
import time

import pytest

from cyberlog.claimdb import ClaimDb, HttpLogClient, serve_db_in_thread
from cyberlog.claimlog import MerkleLog
from cyberlog.cli import main
from cyberlog.harness import OPERATOR_NAME, ScenarioRun, identity_seed, load_scenario
from cyberlog.identity import TrustStore, generate_identity

SCENARIOS = os.path.join(os.path.dirname(__file__), "..", "scenarios")
BOOKING = os.path.join(SCENARIOS, "uav_booking.jsonl")


def test_parse_ok_and_error(tmp_path, capsys):
    good = os.path.join(SCENARIOS, "rules", "dom.cyberlog")
    assert main(["parse", good, "--self", "DOM"]) == 0
    bad = tmp_path / "bad.cyberlog"
    bad.write_text("p(X) :- q(X)")  # missing terminator
    assert main(["parse", str(bad), "--self", "M"]) == 1
    out = capsys.readouterr().out
    assert "ok" in out and "expected" in out


def test_check_reports_diagnostics(tmp_path, capsys):
    sheet = tmp_path / "undeclared.cyberlog"
    sheet.write_text("'M': Subject: 's' Issuer: 'i'\np(X) :- 'ZZ' attests q(X).\n")
    assert main(["check", str(sheet), "--self", "M"]) == 1
    assert "undeclared principal" in capsys.readouterr().out


def test_fmt_emits_canonical_fixpoint(capsys):
    path = os.path.join(SCENARIOS, "rules", "sb.cyberlog")
    assert main(["fmt", path, "--self", "SB"]) == 0
    first = capsys.readouterr().out
    from cyberlog.lang import format_rulesheet, parse_rulesheet

    assert format_rulesheet(parse_rulesheet(first, "SB")) == first


def test_run_scenario_pass_and_report(tmp_path, capsys):
    report_path = tmp_path / "report.json"
    code = main(["run-scenario", BOOKING, "--report", str(report_path)])
    assert code == 0
    report = json.loads(report_path.read_text())
    assert report["passed"] is True
    assert {m["monitor"] for m in report["metrics"]} == {"SB", "MRM", "CA", "OM", "DOM"}


def test_run_scenario_expectation_failure_exit(tmp_path, capsys):
    scenario = load_scenario(BOOKING)
    lines = open(BOOKING).read().splitlines()
    header = json.loads(lines[0])
    header["expected"] = [{"monitor": "DOM", "query": "good_rtf_exists(R, A)", "count": 3}]
    bad = tmp_path / "impossible.jsonl"
    # rulesheet paths are relative to the scenario file: keep it next to the others
    header["monitors"] = [
        {**m, "rulesheet": os.path.join(SCENARIOS, m["rulesheet"])} for m in header["monitors"]
    ]
    bad.write_text("\n".join([json.dumps(header)] + lines[1:]) + "\n")
    assert main(["run-scenario", str(bad)]) == 1
    assert "FAIL" in capsys.readouterr().out


@pytest.fixture
def served_scenario(tmp_path):
    """Booking scenario persisted to disk, then served back over HTTP."""
    scenario = load_scenario(BOOKING)
    log_path = str(tmp_path / "claims.log")
    run = ScenarioRun(scenario, log_path=log_path)
    assert run.run().passed
    heads = str(tmp_path / "heads.jsonl")
    trust = str(tmp_path / "trust.jsonl")
    run.write_heads_cache(heads)
    store = TrustStore.from_identities([*run.identities.values(), run.operator])
    store.save(trust)
    run.close()

    operator = generate_identity(
        OPERATOR_NAME, "CN=log-operator", "CN=R3", seed=identity_seed(scenario.name, OPERATOR_NAME)
    )
    db = ClaimDb(MerkleLog(log_path), operator, TrustStore.load(trust))
    server, url = serve_db_in_thread(db)
    yield {"url": url, "heads": heads, "trust": trust, "log": log_path}
    server.shutdown()
    server.server_close()
    db.log.close()


def test_audit_cli_full_green(served_scenario, capsys):
    code = main(
        [
            "audit",
            "--db", served_scenario["url"],
            "--trust-store", served_scenario["trust"],
            "--owner", "DOM",
            "--heads-cache", served_scenario["heads"],
            "good_rtf_exists(7, 3)",
        ]
    )
    out = capsys.readouterr().out
    assert code == 0, out
    assert "fully verified" in out
    assert "derived_by_rule" in out and "log_inclusion" in out


def test_audit_cli_whole_head(served_scenario, capsys):
    code = main(
        ["audit", "--db", served_scenario["url"], "--trust-store", served_scenario["trust"], "--owner", "OM"]
    )
    assert code == 0
    assert "fully verified" in capsys.readouterr().out


def test_audit_cli_missing_atom(served_scenario, capsys):
    code = main(
        [
            "audit",
            "--db", served_scenario["url"],
            "--trust-store", served_scenario["trust"],
            "--owner", "DOM",
            "good_rtf_exists(42, 42)",
        ]
    )
    assert code == 1
    assert "not in head revision" in capsys.readouterr().out


def test_verify_log_cli_pass(served_scenario, capsys):
    code = main(
        [
            "verify-log",
            "--db", served_scenario["url"],
            "--heads-cache", served_scenario["heads"],
            "--trust-store", served_scenario["trust"],
        ]
    )
    assert code == 0
    assert "append-only consistent" in capsys.readouterr().out


def test_query_cli(tmp_path, capsys):
    from cyberlog.monitor import Monitor, MonitorService
    from cyberlog.claimdb import InProcessLogClient
    from cyberlog.lang import parse_rulesheet

    ident = generate_identity("SB", seed=bytes([1]) * 32)
    trust = TrustStore.from_identities([ident])
    db = ClaimDb(MerkleLog(), generate_identity("op", seed=bytes([2]) * 32), trust)
    monitor = Monitor(
        ident,
        parse_rulesheet("'SB': Subject: 's' Issuer: 'i'\nseen(P) :- getRequest(P, T, B).\n", "SB"),
        InProcessLogClient(db),
        trust,
    )
    from cyberlog.monitor import EventEnvelope

    monitor.ingest_event(EventEnvelope("GET", "/x", "", 4))
    service = MonitorService(monitor)
    service.start()
    try:
        assert main(["query", "--url", service.url, "seen(P)"]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["answers"] == [{"bindings": {"P": "/x"}, "auditable": True}]
    finally:
        service.stop()


def test_serve_db_subprocess_restart_same_root(tmp_path):
    log_path = str(tmp_path / "db.log")
    trust_path = str(tmp_path / "trust.jsonl")
    sb = generate_identity("SB", "CN=SB", "CN=R3", seed=bytes([3]) * 32)
    operator_seed = bytes([4]) * 32
    operator = generate_identity("log-operator", "CN=log", "CN=R3", seed=operator_seed)
    TrustStore.from_identities([sb, operator]).save(trust_path)
    config = tmp_path / "db.json"
    config.write_text(
        json.dumps(
            {
                "listen": "127.0.0.1:0",
                "log_file": log_path,
                "trust_store": trust_path,
                "seed_hex": operator_seed.hex(),
            }
        )
    )

    def spawn():
        proc = subprocess.Popen(
            [sys.executable, "-m", "cyberlog", "serve-db", "--config", str(config)],
            stdout=subprocess.PIPE,
            stderr=subprocess.STDOUT,
            text=True,
        )
        line = proc.stdout.readline()
        url = line.strip().rsplit(" ", 1)[-1]
        client = HttpLogClient(url)
        deadline = time.time() + 10
        while time.time() < deadline:
            try:
                client.get_log_root()
                return proc, client
            except Exception:
                time.sleep(0.1)
        proc.kill()
        raise RuntimeError(f"server did not come up: {line}")

    proc, client = spawn()
    try:
        from cyberlog.lang import parse_rulesheet
        from cyberlog.revision import StagingRevision, commit_staging

        rs = parse_rulesheet("'SB': Subject: 's' Issuer: 'i'\n", "SB")
        record, receipt, _ = commit_staging(StagingRevision("SB"), rs, client, sb, now_ms=1)
        fetched = client.get_revision(record.id)
        assert json.loads(fetched["payload"])["owner"] == "SB"
        root_before = client.get_log_root()["root_hash"]
    finally:
        proc.send_signal(signal.SIGINT)
        proc.wait(timeout=10)

    proc, client = spawn()
    try:
        assert client.get_log_root()["root_hash"] == root_before
        assert client.get_head("SB")["revision_id"] == record.id
    finally:
        proc.send_signal(signal.SIGINT)
        proc.wait(timeout=10)
