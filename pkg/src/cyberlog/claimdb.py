"""Networked claim database fronting the Merkle log.

Endpoints (JSON bodies, hashes lowercase hex):

    POST /revisions                        submit a signed revision record
    GET  /revisions/{id}                   record + inclusion proof + head
    GET  /heads/{owner}                    per-owner head + chain length
    GET  /log/root                         current signed tree head
    GET  /log/consistency?old=&new=        consistency proof
    GET  /log/inclusion?index=&size=       inclusion proof

Rulesheet texts are stored as ordinary log entries (payload kind
"rulesheet") submitted through POST /revisions and fetched by their
content hash via GET /revisions/{hash}.
"""

from __future__ import annotations

import json
import threading
import time
import urllib.error
import urllib.parse
import urllib.request
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable

from .claimlog import MerkleLog, sign_tree_head
from .errors import CyberlogError, LogIntegrityError, NotFoundError, SubmitError
from .identity import Identity, TrustStore
from .revision import decode_payload, rulesheet_entry_id, verify_record_signature


def _now_ms() -> int:
    return int(time.time() * 1000)


@dataclass
class _HeadState:
    revision_id: str
    chain_length: int


class ClaimDb:
    """Single-log claim database core; appends are serialized internally."""

    def __init__(
        self,
        log: MerkleLog,
        operator: Identity,
        trust_store: TrustStore,
        clock: Callable[[], int] = _now_ms,
    ):
        self.log = log
        self.operator = operator
        self.trust_store = trust_store
        self.clock = clock
        self._lock = threading.Lock()
        self._by_id: dict[str, int] = {}
        self._heads: dict[str, _HeadState] = {}
        self._superseded: set[str] = set()
        self._replay_existing()

    def _replay_existing(self) -> None:
        # Rebuild indexes from a reopened log file. Entries that no longer
        # parse are left unindexed; the tree still hashes their raw bytes.
        for index in range(len(self.log)):
            payload = self.log.payload(index).decode("utf-8", errors="replace")
            try:
                self._index_payload(payload, index)
            except (CyberlogError, ValueError, KeyError, TypeError):
                continue

    def _index_payload(self, payload: str, index: int) -> None:
        obj = json.loads(payload)
        kind = obj.get("kind")
        if kind == "rulesheet":
            self._by_id[rulesheet_entry_id(obj["text"])] = index
            return
        record, _sig = decode_payload(payload)
        self._by_id[record.id] = index
        head = self._heads.get(record.owner)
        if record.supersedes is not None:
            self._superseded.add(record.supersedes)
        self._heads[record.owner] = _HeadState(record.id, (head.chain_length if head else 0) + 1)

    # -- submission -----------------------------------------------------

    def submit_revision(self, payload: str) -> dict:
        """Validate and append a revision (or rulesheet blob); the per-owner
        head index is updated atomically with the append."""
        try:
            obj = json.loads(payload)
        except ValueError as exc:
            raise SubmitError(400, f"payload is not valid JSON: {exc}") from exc
        if not isinstance(obj, dict):
            raise SubmitError(400, "payload must be a JSON object")
        if obj.get("kind") == "rulesheet":
            return self._submit_rulesheet(payload, obj)
        try:
            record, signature = decode_payload(payload)
        except LogIntegrityError as exc:
            raise SubmitError(400, str(exc)) from exc

        key = self.trust_store.public_key(record.owner)
        if key is None:
            raise SubmitError(401, f"unknown owner {record.owner!r}")
        if not verify_record_signature(record, signature, key):
            raise SubmitError(401, f"bad signature on revision by {record.owner!r}")

        with self._lock:
            head = self._heads.get(record.owner)
            if record.supersedes is None:
                if head is not None:
                    raise SubmitError(409, f"owner {record.owner!r} already has a revision chain")
            else:
                target_index = self._by_id.get(record.supersedes)
                if target_index is None:
                    raise SubmitError(400, f"supersedes target {record.supersedes} does not exist")
                target, _ = decode_payload(self.log.payload(target_index).decode("utf-8"))
                if target.owner != record.owner:
                    raise SubmitError(
                        401, f"only the owner may supersede: target owned by {target.owner!r}"
                    )
                if record.supersedes in self._superseded:
                    raise SubmitError(409, f"revision {record.supersedes} is already superseded")
            if record.id in self._by_id:
                raise SubmitError(409, f"revision {record.id} already logged")

            index = self.log.append(payload.encode("utf-8"))
            self._by_id[record.id] = index
            if record.supersedes is not None:
                self._superseded.add(record.supersedes)
            self._heads[record.owner] = _HeadState(record.id, (head.chain_length if head else 0) + 1)
            return self._receipt(index, record.id)

    def _submit_rulesheet(self, payload: str, obj: dict) -> dict:
        text = obj.get("text")
        if not isinstance(text, str):
            raise SubmitError(400, "rulesheet payload needs a 'text' field")
        entry_id = rulesheet_entry_id(text)
        with self._lock:
            existing = self._by_id.get(entry_id)
            if existing is not None:
                return self._receipt(existing, entry_id)
            index = self.log.append(payload.encode("utf-8"))
            self._by_id[entry_id] = index
            return self._receipt(index, entry_id)

    def _receipt(self, index: int, entry_id: str) -> dict:
        head = sign_tree_head(self.log, self.operator, self.clock())
        proof = self.log.prove_inclusion(index, head.tree_size)
        return {
            "leaf_index": index,
            "revision_id": entry_id,
            "tree_head": head.to_obj(),
            "inclusion_proof": proof.to_obj(),
        }

    # -- retrieval --------------------------------------------------------

    def get_revision(self, rev_id: str) -> dict:
        with self._lock:
            index = self._by_id.get(rev_id)
            if index is None:
                raise NotFoundError(f"no revision {rev_id}")
            payload = self.log.payload(index).decode("utf-8")
            head = sign_tree_head(self.log, self.operator, self.clock())
            proof = self.log.prove_inclusion(index, head.tree_size)
        return {"payload": payload, "proof": proof.to_obj(), "tree_head": head.to_obj()}

    def get_head(self, owner: str) -> dict:
        with self._lock:
            head = self._heads.get(owner)
        if head is None:
            raise NotFoundError(f"owner {owner!r} has no revisions")
        return {"owner": owner, "revision_id": head.revision_id, "chain_length": head.chain_length}

    def get_log_root(self) -> dict:
        with self._lock:
            return sign_tree_head(self.log, self.operator, self.clock()).to_obj()

    def get_consistency(self, old_size: int, new_size: int) -> dict:
        with self._lock:
            return self.log.prove_consistency(old_size, new_size).to_obj()

    def get_inclusion(self, index: int, size: int) -> dict:
        with self._lock:
            return self.log.prove_inclusion(index, size).to_obj()


class InProcessLogClient:
    """LogClient over a ClaimDb object in the same process."""

    def __init__(self, db: ClaimDb):
        self.db = db

    def submit_revision(self, payload: str) -> dict:
        return self.db.submit_revision(payload)

    def get_revision(self, rev_id: str) -> dict:
        return self.db.get_revision(rev_id)

    def get_head(self, owner: str) -> dict:
        return self.db.get_head(owner)

    def get_log_root(self) -> dict:
        return self.db.get_log_root()

    def get_consistency(self, old_size: int, new_size: int) -> dict:
        return self.db.get_consistency(old_size, new_size)

    def get_inclusion(self, index: int, size: int) -> dict:
        return self.db.get_inclusion(index, size)


class HttpLogClient:
    """LogClient speaking the REST endpoints over HTTP."""

    def __init__(self, base_url: str, timeout: float = 10.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def _request(self, method: str, path: str, body: dict | str | None = None) -> dict:
        url = self.base_url + path
        data = None
        headers = {}
        if body is not None:
            data = (body if isinstance(body, str) else json.dumps(body)).encode("utf-8")
            headers["Content-Type"] = "application/json"
        req = urllib.request.Request(url, data=data, method=method, headers=headers)
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return json.loads(resp.read().decode("utf-8"))
        except urllib.error.HTTPError as exc:
            detail = exc.read().decode("utf-8", errors="replace")
            try:
                message = json.loads(detail).get("error", detail)
            except ValueError:
                message = detail
            if exc.code == 404:
                raise NotFoundError(message) from exc
            raise SubmitError(exc.code, message) from exc

    def submit_revision(self, payload: str) -> dict:
        return self._request("POST", "/revisions", payload)

    def get_revision(self, rev_id: str) -> dict:
        return self._request("GET", f"/revisions/{rev_id}")

    def get_head(self, owner: str) -> dict:
        return self._request("GET", f"/heads/{urllib.parse.quote(owner)}")

    def get_log_root(self) -> dict:
        return self._request("GET", "/log/root")

    def get_consistency(self, old_size: int, new_size: int) -> dict:
        return self._request("GET", f"/log/consistency?old={old_size}&new={new_size}")

    def get_inclusion(self, index: int, size: int) -> dict:
        return self._request("GET", f"/log/inclusion?index={index}&size={size}")


class _ClaimDbHandler(BaseHTTPRequestHandler):
    db: ClaimDb  # set by server factory

    def log_message(self, *args):  # quiet by default
        pass

    def _send(self, code: int, obj: dict) -> None:
        body = json.dumps(obj).encode("utf-8")
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _guard(self, fn) -> None:
        try:
            self._send(200, fn())
        except NotFoundError as exc:
            self._send(404, {"error": str(exc)})
        except SubmitError as exc:
            self._send(exc.code, {"error": str(exc)})
        except LogIntegrityError as exc:
            self._send(400, {"error": str(exc)})

    def do_POST(self):
        if self.path != "/revisions":
            self._send(404, {"error": f"no such endpoint {self.path}"})
            return
        length = int(self.headers.get("Content-Length", "0"))
        payload = self.rfile.read(length).decode("utf-8")
        self._guard(lambda: self.db.submit_revision(payload))

    def do_GET(self):
        parsed = urllib.parse.urlparse(self.path)
        parts = [p for p in parsed.path.split("/") if p]
        query = urllib.parse.parse_qs(parsed.query)
        if parts == ["health"]:
            self._send(200, {"status": "ok", "tree_size": len(self.db.log)})
        elif len(parts) == 2 and parts[0] == "revisions":
            self._guard(lambda: self.db.get_revision(parts[1]))
        elif len(parts) == 2 and parts[0] == "heads":
            self._guard(lambda: self.db.get_head(urllib.parse.unquote(parts[1])))
        elif parts == ["log", "root"]:
            self._guard(self.db.get_log_root)
        elif parts == ["log", "consistency"]:
            self._guard(lambda: self.db.get_consistency(int(query["old"][0]), int(query["new"][0])))
        elif parts == ["log", "inclusion"]:
            self._guard(lambda: self.db.get_inclusion(int(query["index"][0]), int(query["size"][0])))
        else:
            self._send(404, {"error": f"no such endpoint {parsed.path}"})


def make_db_server(db: ClaimDb, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    handler = type("BoundClaimDbHandler", (_ClaimDbHandler,), {"db": db})
    return ThreadingHTTPServer((host, port), handler)


def serve_db_in_thread(db: ClaimDb, host: str = "127.0.0.1", port: int = 0):
    """Start the HTTP server on a daemon thread; returns (server, base_url)."""
    server = make_db_server(db, host, port)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server, f"http://{server.server_address[0]}:{server.server_address[1]}"
