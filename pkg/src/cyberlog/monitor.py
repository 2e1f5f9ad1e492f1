"""Security monitor runtime: event ingestion, continuous saturation,
periodic commit, polling/inclusion of watched owners, query interface.

One monitor owns one knowledge base; ingestion, polling, commit and queries
are serialized through a lock so the HTTP server and timer threads can share
it. Event timestamps always come from the envelope, never the wall clock.
"""

from __future__ import annotations

import json
import threading
import time
import urllib.error
import urllib.parse
import urllib.request
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable

from .engine import (
    DirectAssertion,
    GroundAtom,
    KnowledgeBase,
    LogInclusion,
    RelationalAtom,
    canonical_atom,
    make_claim,
    resolve_term,
)
from .errors import ConfigError, CyberlogError, NotFoundError, SubmitError
from .identity import Identity, TrustStore, sign_claim
from .lang import Rulesheet, format_rulesheet, parse_query, parse_rulesheet, validate_rulesheet
from .revision import (
    LogClient,
    StagingRevision,
    commit_staging,
    encode_rulesheet_payload,
    include_revision,
    on_superseded,
)

EVENT_PREDICATES = {
    "GET": "getRequest",
    "POST": "postRequest",
    "PUT": "putRequest",
    "DELETE": "deleteRequest",
}


@dataclass(frozen=True)
class EventEnvelope:
    method: str
    path: str
    body: str
    timestamp_ms: int

    @classmethod
    def from_obj(cls, obj: dict) -> "EventEnvelope":
        try:
            env = cls(str(obj["method"]).upper(), obj["path"], obj.get("body", ""), int(obj["timestamp"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed event envelope: {exc}") from exc
        env.validate()
        return env

    def validate(self) -> None:
        if self.method not in EVENT_PREDICATES:
            raise ConfigError(f"unsupported method {self.method!r}")
        if not isinstance(self.path, str) or not isinstance(self.body, str):
            raise ConfigError("event path and body must be strings")
        if not isinstance(self.timestamp_ms, int) or self.timestamp_ms < 0:
            raise ConfigError("event timestamp must be a non-negative integer")


@dataclass(frozen=True)
class IngestResult:
    decision: str
    event_atom: GroundAtom
    new_event: bool
    derived: tuple[GroundAtom, ...]
    delay_ms: float


@dataclass(frozen=True)
class QueryAnswer:
    bindings: dict
    auditable: bool


@dataclass
class MonitorMetrics:
    delays_ms: list[float] = field(default_factory=list)
    facts_added: list[int] = field(default_factory=list)

    def report(self, kb_facts: int, name: str) -> dict:
        delays = self.delays_ms
        return {
            "monitor": name,
            "events": len(delays),
            "delay_min_ms": min(delays) if delays else None,
            "delay_avg_ms": sum(delays) / len(delays) if delays else None,
            "delay_max_ms": max(delays) if delays else None,
            "kb_facts": kb_facts,
            "facts_added_total": sum(self.facts_added),
            "facts_added_max": max(self.facts_added) if self.facts_added else 0,
        }


class Monitor:
    def __init__(
        self,
        identity: Identity,
        rulesheet: Rulesheet,
        db: LogClient,
        trust_store: TrustStore,
        operator_key: bytes | None = None,
        watched_owners: tuple[str, ...] = (),
        clock: Callable[[], int] | None = None,
        authz_predicate: str | None = None,
    ):
        if identity.name != rulesheet.self_id:
            raise ConfigError(f"identity {identity.name!r} does not match rulesheet self {rulesheet.self_id!r}")
        diags = validate_rulesheet(rulesheet)
        if diags:
            raise ConfigError(f"invalid rulesheet: {diags[0].reason}")
        self.identity = identity
        self.rulesheet = rulesheet
        self.db = db
        self.trust_store = trust_store
        self.operator_key = operator_key
        self.watched_owners = tuple(watched_owners)
        self.clock = clock or (lambda: int(time.time() * 1000))
        self.authz_predicate = authz_predicate
        self.name = identity.name
        self.lock = threading.RLock()
        self.kb = KnowledgeBase(trust_store=trust_store, log_operator_key=operator_key)
        self._base: str | None = None
        self.active_includes: dict[str, str] = {}
        self.metrics = MonitorMetrics()
        self.commit_count = 0
        self._rulesheet_published = False

    # -- ingestion ------------------------------------------------------

    def ingest_event(self, env: EventEnvelope) -> IngestResult:
        env.validate()
        started = time.perf_counter()
        atom = GroundAtom(
            self.name, EVENT_PREDICATES[env.method], (env.path, env.timestamp_ms, env.body)
        )
        signed = sign_claim(self.identity, atom)
        claim = make_claim(atom, DirectAssertion(self.name, signed.signature))
        with self.lock:
            new_event = self.kb.assert_claim(claim)
            derived = tuple(c.atom for c in self.kb.saturate(self.rulesheet)) if new_event else ()
            decision = self._decision()
            kb_size = len(self.kb)
        delay_ms = (time.perf_counter() - started) * 1000.0
        self.metrics.delays_ms.append(delay_ms)
        self.metrics.facts_added.append((1 if new_event else 0) + len(derived))
        return IngestResult(decision, atom, new_event, derived, delay_ms)

    def _decision(self) -> str:
        if self.authz_predicate is None:
            return "allow"
        return "allow" if self.kb.claims_for(self.name, self.authz_predicate) else "deny"

    # -- commit cycle ------------------------------------------------------

    def commit(self):
        """Commit own claims as a new revision; returns the record, or None
        if the claim database was unreachable (staging preserved)."""
        with self.lock:
            self._ensure_rulesheet_published()
            own = [c for c in self.kb.claims.values() if not isinstance(c.evidence, LogInclusion)]
            included = [c for c in self.kb.claims.values() if isinstance(c.evidence, LogInclusion)]
            staging = StagingRevision(
                owner=self.name,
                claims=own,
                includes=sorted(set(self.active_includes.values())),
                base=self._base,
            )
            try:
                record, _receipt, fresh = commit_staging(
                    staging, self.rulesheet, self.db, self.identity, self.clock(), included_claims=included
                )
            except (SubmitError, urllib.error.URLError, OSError) as exc:
                # commit retried next interval; KB/staging untouched
                self._warn(f"commit failed, keeping staging: {exc}")
                return None
            self._base = record.id
            self.commit_count += 1
            rebuilt = KnowledgeBase(trust_store=self.trust_store, log_operator_key=self.operator_key)
            for claim in fresh.claims:
                rebuilt.assert_claim(claim)
            for claim in included:
                rebuilt.assert_claim(claim)
            rebuilt.saturate(self.rulesheet)
            self.kb = rebuilt
            return record

    def _ensure_rulesheet_published(self) -> None:
        if self._rulesheet_published:
            return
        try:
            self.db.submit_revision(encode_rulesheet_payload(format_rulesheet(self.rulesheet)))
            self._rulesheet_published = True
        except (SubmitError, urllib.error.URLError, OSError):
            pass

    # -- polling ------------------------------------------------------------

    def poll_and_include(self) -> list[str]:
        """Fetch watched owners' heads, include new revisions, handle
        supersessions; returns ids newly loaded this poll."""
        loaded: list[str] = []
        with self.lock:
            for owner in self.watched_owners:
                try:
                    head = self.db.get_head(owner)["revision_id"]
                except NotFoundError:
                    continue
                except (SubmitError, urllib.error.URLError, OSError) as exc:
                    self._warn(f"poll skipped ({owner}): {exc}")
                    continue
                last = self.active_includes.get(owner)
                if head == last:
                    continue
                try:
                    if last is None:
                        include_revision(self.kb, head, self.db)
                        self.kb.saturate(self.rulesheet)
                    else:
                        self.kb = on_superseded(self.kb, last, head, self.rulesheet, self.db)
                except (CyberlogError, urllib.error.URLError, OSError) as exc:
                    self._warn(f"include of {head} from {owner} refused: {exc}")
                    continue
                self.active_includes[owner] = head
                loaded.append(head)
        return loaded

    # -- queries --------------------------------------------------------------

    def handle_query(self, pattern: str | RelationalAtom) -> list[QueryAnswer]:
        if isinstance(pattern, str):
            pattern = parse_query(pattern, self.name)
        with self.lock:
            answers = []
            for subst in self.kb.query(pattern):
                atom = GroundAtom(
                    pattern.principal,
                    pattern.predicate,
                    tuple(resolve_term(arg, subst) for arg in pattern.args),
                )
                answers.append(QueryAnswer(subst, self.kb.verify_claim_chain(atom)))
            return answers

    def kb_fact_count(self) -> int:
        with self.lock:
            return len(self.kb)

    def metrics_report(self) -> dict:
        return self.metrics.report(self.kb_fact_count(), self.name)

    def _warn(self, message: str) -> None:
        print(f"[monitor {self.name}] {message}", flush=True)


# ---------------------------------------------------------------------------
# HTTP surface: POST /event, POST /query, GET /metrics, GET /health


class _MonitorHandler(BaseHTTPRequestHandler):
    monitor: Monitor

    def log_message(self, *args):
        pass

    def _send(self, code: int, obj: dict) -> None:
        body = json.dumps(obj).encode("utf-8")
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_POST(self):
        length = int(self.headers.get("Content-Length", "0"))
        try:
            obj = json.loads(self.rfile.read(length).decode("utf-8"))
        except ValueError:
            self._send(400, {"error": "body must be JSON"})
            return
        try:
            if self.path == "/event":
                result = self.monitor.ingest_event(EventEnvelope.from_obj(obj))
                self._send(
                    200,
                    {
                        "decision": result.decision,
                        "event": canonical_atom(result.event_atom),
                        "new": result.new_event,
                        "derived": [canonical_atom(a) for a in result.derived],
                        "delay_ms": result.delay_ms,
                    },
                )
            elif self.path == "/query":
                answers = self.monitor.handle_query(obj["pattern"])
                self._send(
                    200,
                    {"answers": [{"bindings": a.bindings, "auditable": a.auditable} for a in answers]},
                )
            else:
                self._send(404, {"error": f"no such endpoint {self.path}"})
        except (ConfigError, CyberlogError, KeyError) as exc:
            self._send(400, {"error": str(exc)})

    def do_GET(self):
        if self.path == "/metrics":
            self._send(200, self.monitor.metrics_report())
        elif self.path == "/health":
            self._send(200, {"status": "ok", "monitor": self.monitor.name})
        else:
            self._send(404, {"error": f"no such endpoint {self.path}"})


def make_monitor_server(monitor: Monitor, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    handler = type("BoundMonitorHandler", (_MonitorHandler,), {"monitor": monitor})
    return ThreadingHTTPServer((host, port), handler)


class MonitorService:
    """Monitor plus its HTTP server and commit/poll timer threads."""

    def __init__(self, monitor: Monitor, commit_interval_ms: int = 1000, poll_interval_ms: int = 500,
                 host: str = "127.0.0.1", port: int = 0):
        self.monitor = monitor
        self.commit_interval_ms = commit_interval_ms
        self.poll_interval_ms = poll_interval_ms
        self.server = make_monitor_server(monitor, host, port)
        self.url = f"http://{self.server.server_address[0]}:{self.server.server_address[1]}"
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    def start(self) -> None:
        self._threads = [
            threading.Thread(target=self.server.serve_forever, daemon=True),
            threading.Thread(target=self._timer, args=(self.commit_interval_ms, self.monitor.commit), daemon=True),
            threading.Thread(
                target=self._timer, args=(self.poll_interval_ms, self.monitor.poll_and_include), daemon=True
            ),
        ]
        for t in self._threads:
            t.start()

    def _timer(self, interval_ms: int, action) -> None:
        while not self._stop.wait(interval_ms / 1000.0):
            try:
                action()
            except (CyberlogError, urllib.error.URLError, OSError) as exc:
                self.monitor._warn(f"periodic task failed: {exc}")

    def stop(self) -> None:
        self._stop.set()
        self.server.shutdown()
        self.server.server_close()

    def run_forever(self) -> None:
        self.start()
        try:
            while True:
                time.sleep(3600)
        except KeyboardInterrupt:
            self.stop()


class HttpMonitorClient:
    """Client for the monitor's event/query/metrics endpoints."""

    def __init__(self, base_url: str, timeout: float = 10.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def _request(self, method: str, path: str, obj: dict | None = None) -> dict:
        data = json.dumps(obj).encode("utf-8") if obj is not None else None
        req = urllib.request.Request(
            self.base_url + path, data=data, method=method, headers={"Content-Type": "application/json"}
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return json.loads(resp.read().decode("utf-8"))
        except urllib.error.HTTPError as exc:
            detail = exc.read().decode("utf-8", errors="replace")
            raise SubmitError(exc.code, detail) from exc

    def send_event(self, env: EventEnvelope) -> dict:
        return self._request(
            "POST",
            "/event",
            {"method": env.method, "path": env.path, "body": env.body, "timestamp": env.timestamp_ms},
        )

    def query(self, pattern: str) -> dict:
        return self._request("POST", "/query", {"pattern": pattern})

    def metrics(self) -> dict:
        return self._request("GET", "/metrics")

    def health(self) -> dict:
        return self._request("GET", "/health")


def load_rulesheet_file(path: str, self_id: str) -> Rulesheet:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_rulesheet(fh.read(), self_id)
