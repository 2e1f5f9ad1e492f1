"""Operator command line: rulesheet tooling, servers, scenario harness,
audits, and log verification.

Exit codes: 0 success, 1 verification or expectation failure, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys

from .audit import Auditor, render_audit_tree, verify_log_consistency
from .claimdb import ClaimDb, HttpLogClient, make_db_server
from .claimlog import MerkleLog
from .engine import GroundAtom, resolve_term
from .errors import CyberlogError, ParseError
from .harness import load_scenario, run_scenario
from .identity import TrustStore, generate_identity
from .lang import format_rulesheet, parse_query, parse_rulesheet, validate_rulesheet
from .monitor import HttpMonitorClient, Monitor, MonitorService, load_rulesheet_file

DEFAULT_OPERATOR = "log-operator"


def _read(path: str) -> str:
    with open(path, "r", encoding="utf-8") as fh:
        return fh.read()


def _load_config(path: str) -> dict:
    try:
        return json.loads(_read(path))
    except (OSError, ValueError) as exc:
        raise SystemExit(f"cannot read config {path!r}: {exc}")


def _identity_from_config(cfg: dict, name: str, role: str):
    seed_hex = cfg.get("seed_hex")
    key_file = cfg.get("key_file")
    if key_file:
        seed_hex = _read(key_file).strip()
    if not seed_hex:
        raise SystemExit(f"{role} config needs 'seed_hex' or 'key_file'")
    return generate_identity(name, cfg.get("subject", f"CN={name}"), cfg.get("issuer", ""), bytes.fromhex(seed_hex))


def _split_listen(listen: str) -> tuple[str, int]:
    host, _, port = listen.partition(":")
    return host or "127.0.0.1", int(port or 0)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_parse(args) -> int:
    try:
        parse_rulesheet(_read(args.file), args.self_id)
    except ParseError as exc:
        print(f"{args.file}: {exc}")
        return 1
    print(f"{args.file}: ok")
    return 0


def cmd_check(args) -> int:
    try:
        sheet = parse_rulesheet(_read(args.file), args.self_id)
    except ParseError as exc:
        print(f"{args.file}: {exc}")
        return 1
    diags = validate_rulesheet(sheet)
    for diag in diags:
        where = f"rule {diag.rule_index}" if diag.rule_index is not None else "sheet"
        print(f"{args.file}: {where}: {diag.reason}")
    if diags:
        return 1
    print(f"{args.file}: ok ({len(sheet.rules)} rules, {len(sheet.identities)} identities)")
    return 0


def cmd_fmt(args) -> int:
    try:
        sheet = parse_rulesheet(_read(args.file), args.self_id)
    except ParseError as exc:
        print(f"{args.file}: {exc}")
        return 1
    sys.stdout.write(format_rulesheet(sheet))
    return 0


def cmd_serve_db(args) -> int:
    cfg = _load_config(args.config)
    operator = _identity_from_config(cfg, cfg.get("operator_name", DEFAULT_OPERATOR), "claim db")
    trust = TrustStore.load(cfg["trust_store"])
    trust.add(operator)
    db = ClaimDb(MerkleLog(cfg.get("log_file")), operator, trust)
    host, port = _split_listen(cfg.get("listen", "127.0.0.1:8440"))
    server = make_db_server(db, host, port)
    print(
        f"claim database listening on http://{server.server_address[0]}:{server.server_address[1]}",
        flush=True,
    )
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
        db.log.close()
    return 0


def cmd_serve_monitor(args) -> int:
    cfg = _load_config(args.config)
    name = cfg["name"]
    identity = _identity_from_config(cfg, name, "monitor")
    trust = TrustStore.load(cfg["trust_store"])
    operator_key = trust.public_key(cfg.get("operator_name", DEFAULT_OPERATOR))
    monitor = Monitor(
        identity,
        load_rulesheet_file(cfg["rulesheet"], name),
        HttpLogClient(cfg["db_url"]),
        trust,
        operator_key=operator_key,
        watched_owners=tuple(cfg.get("watched_owners", ())),
        authz_predicate=cfg.get("authz_predicate"),
    )
    host, port = _split_listen(cfg.get("listen", "127.0.0.1:8441"))
    service = MonitorService(
        monitor,
        commit_interval_ms=int(cfg.get("commit_interval_ms", 1000)),
        poll_interval_ms=int(cfg.get("poll_interval_ms", 500)),
        host=host,
        port=port,
    )
    print(f"monitor {name} listening on {service.url}", flush=True)
    service.run_forever()
    return 0


def cmd_run_scenario(args) -> int:
    scenario = load_scenario(args.file)
    mode = "integration" if args.integration else "memory"
    if mode == "memory" and (args.log_file or args.heads_cache):
        from .harness import ScenarioRun

        run = ScenarioRun(scenario, log_path=args.log_file)
        try:
            report = run.run()
            if args.heads_cache:
                run.write_heads_cache(args.heads_cache)
            if args.trust_store_out:
                run.trust_store.save(args.trust_store_out)
        finally:
            run.close()
    else:
        report = run_scenario(scenario, mode=mode, log_path=args.log_file, heads_cache_path=args.heads_cache)
    print(report.render())
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump(report.to_obj(), fh, indent=2)
        print(f"report written to {args.report}")
    return 0 if report.passed else 1


def cmd_query(args) -> int:
    client = HttpMonitorClient(args.url)
    response = client.query(args.pattern)
    print(json.dumps(response, indent=2))
    return 0


def cmd_audit(args) -> int:
    trust = TrustStore.load(args.trust_store)
    if args.db.startswith("http"):
        client = HttpLogClient(args.db)
        operator_key = trust.public_key(args.operator)
    else:
        # offline audit from a log file: heads are re-signed by a scratch
        # key, so tree-head signature checks are skipped
        client = _local_client(args.db, args.trust_store)
        operator_key = None
    if args.heads_cache:
        ok, checks = verify_log_consistency(client, args.heads_cache, operator_key, append_current=False)
        for check in checks:
            mark = "ok  " if check.ok else "FAIL"
            print(f"[{mark}] log {check.old_size} -> {check.new_size}: {check.detail}")
        if not ok:
            print("audit aborted: log failed append-only verification")
            return 1
    auditor = Auditor(client, trust, operator_key)
    try:
        if args.atom:
            atom = _ground_atom_from_text(args.atom, args.owner)
            nodes = [auditor.audit_atom(args.owner, atom)]
        else:
            nodes = auditor.audit_head(args.owner)
    except CyberlogError as exc:
        print(f"audit failed: {exc}")
        return 1
    ok = True
    for node in nodes:
        print(render_audit_tree(node))
        ok = ok and node.all_ok
    print("audit: " + ("fully verified" if ok else "FAILED"))
    return 0 if ok else 1


def _ground_atom_from_text(text: str, owner: str) -> GroundAtom:
    pattern = parse_query(text, owner)
    args = []
    for term in pattern.args:
        value = resolve_term(term, {})
        if value is None:
            raise SystemExit("audit needs a fully ground atom (no variables)")
        args.append(value)
    return GroundAtom(pattern.principal, pattern.predicate, tuple(args))


def _local_client(log_path: str, trust_store_path: str):
    # offline audit straight from a log file (operator identity not needed
    # for reading; receipts/heads are re-derived from the file)
    trust = TrustStore.load(trust_store_path)
    operator = generate_identity(DEFAULT_OPERATOR, seed=bytes(32))
    from .claimdb import InProcessLogClient

    return InProcessLogClient(ClaimDb(MerkleLog(log_path), operator, trust))


def cmd_verify_log(args) -> int:
    client = HttpLogClient(args.db)
    operator_key = None
    if args.trust_store:
        operator_key = TrustStore.load(args.trust_store).public_key(args.operator)
    try:
        ok, checks = verify_log_consistency(client, args.heads_cache, operator_key)
    except CyberlogError as exc:
        print(f"verify-log failed: {exc}")
        return 1
    for check in checks:
        mark = "ok  " if check.ok else "FAIL"
        print(f"[{mark}] {check.old_size} -> {check.new_size}: {check.detail}")
    print("verdict: " + ("append-only consistent" if ok else "split-view/tamper suspected"))
    return 0 if ok else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cyberlog", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("parse", help="parse a rulesheet")
    p.add_argument("file")
    p.add_argument("--self", dest="self_id", required=True, help="principal executing the sheet")
    p.set_defaults(fn=cmd_parse)

    p = sub.add_parser("check", help="parse and validate a rulesheet")
    p.add_argument("file")
    p.add_argument("--self", dest="self_id", required=True)
    p.set_defaults(fn=cmd_check)

    p = sub.add_parser("fmt", help="print the canonical form of a rulesheet")
    p.add_argument("file")
    p.add_argument("--self", dest="self_id", required=True)
    p.set_defaults(fn=cmd_fmt)

    p = sub.add_parser("serve-db", help="run the claim database server")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_serve_db)

    p = sub.add_parser("serve-monitor", help="run a security monitor server")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_serve_monitor)

    p = sub.add_parser("run-scenario", help="replay a scenario and check expectations")
    p.add_argument("file")
    p.add_argument("--integration", action="store_true", help="run over HTTP on loopback")
    p.add_argument("--log-file", help="back the claim database with this file")
    p.add_argument("--heads-cache", help="append the final signed tree head here")
    p.add_argument("--trust-store-out", help="write the scenario trust store here")
    p.add_argument("--report", help="write the JSON report here")
    p.set_defaults(fn=cmd_run_scenario)

    p = sub.add_parser("query", help="query a running monitor")
    p.add_argument("--url", required=True, help="monitor base URL")
    p.add_argument("pattern")
    p.set_defaults(fn=cmd_query)

    p = sub.add_parser("audit", help="recursively verify evidence for claims")
    p.add_argument("--db", required=True, help="claim database URL, or a log file path for offline audit")
    p.add_argument("--trust-store", required=True)
    p.add_argument("--owner", required=True)
    p.add_argument("--operator", default=DEFAULT_OPERATOR)
    p.add_argument("--heads-cache", help="verify log consistency against these trusted heads first")
    p.add_argument("atom", nargs="?", help="ground atom text; omit to audit the whole head revision")
    p.set_defaults(fn=cmd_audit)

    p = sub.add_parser("verify-log", help="append-only verification against cached tree heads")
    p.add_argument("--db", required=True)
    p.add_argument("--heads-cache", required=True)
    p.add_argument("--trust-store")
    p.add_argument("--operator", default=DEFAULT_OPERATOR)
    p.set_defaults(fn=cmd_verify_log)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except SystemExit:
        raise
    except ParseError as exc:
        print(f"error: {exc}")
        return 1
    except CyberlogError as exc:
        print(f"error: {exc}")
        return 1
    except OSError as exc:
        print(f"error: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
