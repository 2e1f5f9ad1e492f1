"""Desk-scale scenario harness: spins up a claim database and monitors,
replays events at scenario offsets, and evaluates expected query counts.

Default mode is fully deterministic: a virtual clock stamps both envelope
timestamps and commit times, monitors run as in-process actors, and ticks
fire in a fixed order (events, then commits, then polls). Integration mode
runs the same scenario over real HTTP on loopback.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass

from .claimdb import ClaimDb, HttpLogClient, InProcessLogClient, serve_db_in_thread
from .claimlog import MerkleLog, SignedTreeHead
from .errors import ConfigError, NotFoundError
from .identity import Identity, TrustStore, generate_identity
from .lang import parse_rulesheet
from .monitor import EventEnvelope, HttpMonitorClient, Monitor, MonitorService
from .audit import append_heads_cache

OPERATOR_NAME = "log-operator"


def identity_seed(scope: str, name: str) -> bytes:
    return hashlib.sha256(f"cyberlog:{scope}:{name}".encode("utf-8")).digest()


@dataclass(frozen=True)
class MonitorSpec:
    name: str
    rulesheet_text: str
    watched: tuple[str, ...] = ()
    authz_predicate: str | None = None


@dataclass(frozen=True)
class ScenarioEvent:
    at_ms: int
    monitor: str
    envelope: EventEnvelope


@dataclass(frozen=True)
class Expectation:
    monitor: str
    query: str
    count: int


@dataclass
class Scenario:
    name: str
    monitors: list[MonitorSpec]
    events: list[ScenarioEvent]
    expected: list[Expectation]
    commit_interval_ms: int = 1000
    poll_interval_ms: int = 1000
    drain_rounds: int = 3

    def validate(self) -> None:
        names = {m.name for m in self.monitors}
        if len(names) != len(self.monitors):
            raise ConfigError("duplicate monitor names in scenario")
        last = 0
        for event in self.events:
            if event.monitor not in names:
                raise ConfigError(f"event targets unknown monitor {event.monitor!r}")
            if event.at_ms < last:
                raise ConfigError("event offsets must be nondecreasing")
            last = event.at_ms
        for exp in self.expected:
            if exp.monitor not in names:
                raise ConfigError(f"expectation targets unknown monitor {exp.monitor!r}")


def load_scenario(path: str) -> Scenario:
    """Scenario files are JSON lines: a header object, then one event per line.

    Rulesheet paths in the header resolve relative to the scenario file.
    """
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line.strip() for line in fh if line.strip() and not line.startswith("#")]
    if not lines:
        raise ConfigError(f"scenario file {path!r} is empty")
    try:
        header = json.loads(lines[0])
    except ValueError as exc:
        raise ConfigError(f"bad scenario header: {exc}") from exc
    monitors = []
    for m in header.get("monitors", []):
        sheet_path = os.path.join(base, m["rulesheet"])
        with open(sheet_path, "r", encoding="utf-8") as fh:
            text = fh.read()
        monitors.append(
            MonitorSpec(m["name"], text, tuple(m.get("watched", ())), m.get("authz_predicate"))
        )
    expected = [Expectation(e["monitor"], e["query"], int(e["count"])) for e in header.get("expected", [])]
    events = []
    for line in lines[1:]:
        try:
            obj = json.loads(line)
            at = int(obj["at"])
            envelope = EventEnvelope(
                str(obj.get("method", "POST")).upper(),
                obj["path"],
                obj.get("body", ""),
                int(obj.get("timestamp", at)),
            )
            events.append(ScenarioEvent(at, obj["monitor"], envelope))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad scenario event {line!r}: {exc}") from exc
    scenario = Scenario(
        name=header.get("name", os.path.basename(path)),
        monitors=monitors,
        events=events,
        expected=expected,
        commit_interval_ms=int(header.get("commit_interval_ms", 1000)),
        poll_interval_ms=int(header.get("poll_interval_ms", 1000)),
        drain_rounds=int(header.get("drain_rounds", 3)),
    )
    scenario.validate()
    return scenario


@dataclass
class ExpectationResult:
    monitor: str
    query: str
    expected: int
    actual: int

    @property
    def ok(self) -> bool:
        return self.expected == self.actual


@dataclass
class ScenarioReport:
    scenario: str
    mode: str
    expectations: list[ExpectationResult]
    metrics: list[dict]
    heads: dict[str, dict]

    @property
    def passed(self) -> bool:
        return all(e.ok for e in self.expectations)

    def to_obj(self) -> dict:
        return {
            "scenario": self.scenario,
            "mode": self.mode,
            "passed": self.passed,
            "expectations": [
                {
                    "monitor": e.monitor,
                    "query": e.query,
                    "expected": e.expected,
                    "actual": e.actual,
                    "ok": e.ok,
                }
                for e in self.expectations
            ],
            "metrics": self.metrics,
            "heads": self.heads,
        }

    def render(self) -> str:
        lines = [f"scenario {self.scenario} [{self.mode}]: {'PASS' if self.passed else 'FAIL'}"]
        for e in self.expectations:
            mark = "ok  " if e.ok else "FAIL"
            lines.append(f"  [{mark}] {e.monitor}: {e.query} -> {e.actual} (expected {e.expected})")
        for m in self.metrics:
            if m["events"]:
                lines.append(
                    "  {monitor}: {events} events, delay min/avg/max = "
                    "{delay_min_ms:.2f}/{delay_avg_ms:.2f}/{delay_max_ms:.2f} ms, "
                    "kb={kb_facts}, facts/request max={facts_added_max}".format(**m)
                )
            else:
                lines.append(f"  {m['monitor']}: 0 events, kb={m['kb_facts']}")
        return "\n".join(lines)


class ScenarioRun:
    """Deterministic in-process execution with a stepped virtual clock."""

    def __init__(self, scenario: Scenario, log_path: str | None = None):
        scenario.validate()
        self.scenario = scenario
        self.now = 0
        self.operator = generate_identity(
            OPERATOR_NAME, "CN=log-operator", "CN=R3", seed=identity_seed(scenario.name, OPERATOR_NAME)
        )
        self.identities: dict[str, Identity] = {
            spec.name: generate_identity(
                spec.name, f"CN={spec.name}", "CN=R3", seed=identity_seed(scenario.name, spec.name)
            )
            for spec in scenario.monitors
        }
        self.trust_store = TrustStore.from_identities([*self.identities.values(), self.operator])
        self.db = ClaimDb(MerkleLog(log_path), self.operator, self.trust_store, clock=lambda: self.now)
        self.client = InProcessLogClient(self.db)
        self.monitors: dict[str, Monitor] = {}
        for spec in scenario.monitors:
            self.monitors[spec.name] = Monitor(
                self.identities[spec.name],
                parse_rulesheet(spec.rulesheet_text, spec.name),
                self.client,
                self.trust_store,
                operator_key=self.operator.public_key,
                watched_owners=spec.watched,
                clock=lambda: self.now,
                authz_predicate=spec.authz_predicate,
            )
        self._order = [spec.name for spec in scenario.monitors]
        self._pending = list(scenario.events)
        self._next_commit = {name: scenario.commit_interval_ms for name in self._order}
        self._next_poll = {name: scenario.poll_interval_ms for name in self._order}

    # -- stepped execution --------------------------------------------------

    def _next_action_time(self) -> int | None:
        times = []
        if self._pending:
            times.append(self._pending[0].at_ms)
        times.extend(self._next_commit.values())
        times.extend(self._next_poll.values())
        return min(times) if times else None

    def advance_to(self, target_ms: int) -> None:
        """Process events and ticks with time <= target, in time order.
        At equal times: events first, then commits, then polls."""
        while True:
            upcoming = self._next_action_time()
            if upcoming is None or upcoming > target_ms:
                break
            self.now = upcoming
            while self._pending and self._pending[0].at_ms == upcoming:
                event = self._pending.pop(0)
                self.monitors[event.monitor].ingest_event(event.envelope)
            for name in self._order:
                if self._next_commit[name] == upcoming:
                    self.monitors[name].commit()
                    self._next_commit[name] += self.scenario.commit_interval_ms
            for name in self._order:
                if self._next_poll[name] == upcoming:
                    self.monitors[name].poll_and_include()
                    self._next_poll[name] += self.scenario.poll_interval_ms
        self.now = max(self.now, target_ms)

    def finish(self) -> None:
        """Drain: run the remaining ticks, then a final poll+commit round so
        every derived claim lands in a head revision."""
        last_event = self.scenario.events[-1].at_ms if self.scenario.events else 0
        interval = max(self.scenario.commit_interval_ms, self.scenario.poll_interval_ms)
        self.advance_to(last_event + self.scenario.drain_rounds * interval)
        for name in self._order:
            self.monitors[name].poll_and_include()
        self.now += self.scenario.commit_interval_ms
        for name in self._order:
            self.monitors[name].commit()

    def query_count(self, monitor: str, query: str) -> int:
        return len(self.monitors[monitor].handle_query(query))

    def evaluate(self) -> ScenarioReport:
        results = [
            ExpectationResult(e.monitor, e.query, e.count, self.query_count(e.monitor, e.query))
            for e in self.scenario.expected
        ]
        heads = {}
        for name in self._order:
            try:
                head = self.client.get_head(name)
                heads[name] = {"revision_id": head["revision_id"], "chain_length": head["chain_length"]}
            except NotFoundError:
                heads[name] = {"revision_id": None, "chain_length": 0}
        metrics = [self.monitors[name].metrics_report() for name in self._order]
        return ScenarioReport(self.scenario.name, "memory", results, metrics, heads)

    def run(self) -> ScenarioReport:
        self.finish()
        return self.evaluate()

    def write_heads_cache(self, path: str) -> None:
        append_heads_cache(path, SignedTreeHead.from_obj(self.client.get_log_root()))

    def close(self) -> None:
        self.db.log.close()


# ---------------------------------------------------------------------------
# Integration mode: same scenario over HTTP on loopback


def run_scenario_integration(
    scenario: Scenario,
    log_path: str | None = None,
    settle_timeout_s: float = 30.0,
    interval_scale: float = 0.1,
    heads_cache_path: str | None = None,
) -> ScenarioReport:
    """Execute over real HTTP servers; commit/poll timers run on scaled-down
    wall-clock intervals; expectations are polled until they settle."""
    scenario.validate()
    operator = generate_identity(
        OPERATOR_NAME, "CN=log-operator", "CN=R3", seed=identity_seed(scenario.name, OPERATOR_NAME)
    )
    identities = {
        spec.name: generate_identity(
            spec.name, f"CN={spec.name}", "CN=R3", seed=identity_seed(scenario.name, spec.name)
        )
        for spec in scenario.monitors
    }
    trust = TrustStore.from_identities([*identities.values(), operator])
    db = ClaimDb(MerkleLog(log_path), operator, trust)
    db_server, db_url = serve_db_in_thread(db)
    services: dict[str, MonitorService] = {}
    clients: dict[str, HttpMonitorClient] = {}
    try:
        for spec in scenario.monitors:
            monitor = Monitor(
                identities[spec.name],
                parse_rulesheet(spec.rulesheet_text, spec.name),
                HttpLogClient(db_url),
                trust,
                operator_key=operator.public_key,
                watched_owners=spec.watched,
                authz_predicate=spec.authz_predicate,
            )
            service = MonitorService(
                monitor,
                commit_interval_ms=max(20, int(scenario.commit_interval_ms * interval_scale)),
                poll_interval_ms=max(20, int(scenario.poll_interval_ms * interval_scale)),
            )
            service.start()
            services[spec.name] = service
            clients[spec.name] = HttpMonitorClient(service.url)

        for event in scenario.events:
            clients[event.monitor].send_event(event.envelope)

        def counts():
            return [len(clients[e.monitor].query(e.query)["answers"]) for e in scenario.expected]

        deadline = time.monotonic() + settle_timeout_s
        actual = counts()
        # settle: expected counts reached and stable for one extra round
        while time.monotonic() < deadline:
            if actual == [e.count for e in scenario.expected]:
                break
            time.sleep(0.2)
            actual = counts()
        results = [
            ExpectationResult(e.monitor, e.query, e.count, a) for e, a in zip(scenario.expected, actual)
        ]
        metrics = [clients[name].metrics() for name in services]
        heads = {}
        for name in services:
            try:
                head = HttpLogClient(db_url).get_head(name)
                heads[name] = {"revision_id": head["revision_id"], "chain_length": head["chain_length"]}
            except NotFoundError:
                heads[name] = {"revision_id": None, "chain_length": 0}
        if heads_cache_path:
            append_heads_cache(heads_cache_path, SignedTreeHead.from_obj(HttpLogClient(db_url).get_log_root()))
        return ScenarioReport(scenario.name, "integration", results, metrics, heads)
    finally:
        for service in services.values():
            service.stop()
        db_server.shutdown()
        db_server.server_close()
        db.log.close()


def run_scenario(
    scenario: Scenario | str,
    mode: str = "memory",
    log_path: str | None = None,
    heads_cache_path: str | None = None,
) -> ScenarioReport:
    if isinstance(scenario, str):
        scenario = load_scenario(scenario)
    if mode == "integration":
        return run_scenario_integration(scenario, log_path=log_path, heads_cache_path=heads_cache_path)
    run = ScenarioRun(scenario, log_path=log_path)
    try:
        report = run.run()
        if heads_cache_path:
            run.write_heads_cache(heads_cache_path)
        return report
    finally:
        run.close()
