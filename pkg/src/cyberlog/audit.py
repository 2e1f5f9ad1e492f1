"""Recursive evidence verification against the claim database.

Audits reconstruct how a claim was made: rule instances are re-derived,
direct assertions are signature-checked against the trust store, and
foreign premises are resolved through the auditing revision's includes,
terminating in verified log inclusions. An optional trusted-heads cache
adds an append-only consistency check of the whole log first, which is
what catches byte tampering outside the audited evidence path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .claimlog import ConsistencyProof, SignedTreeHead, verify_consistency, verify_tree_head
from .engine import (
    BuiltinAtom,
    CarriedByNextRule,
    Claim,
    ComparisonAtom,
    DerivedByRule,
    DirectAssertion,
    GroundAtom,
    LogInclusion,
    RelationalAtom,
    canonical_atom,
    eval_builtin,
    instantiate_head,
    _eval_comparison,
)
from .errors import CyberlogError, EvaluationError, LogIntegrityError, NotFoundError
from .identity import TrustStore, verify_bytes
from .revision import LogClient, RevisionRecord, fetch_verified_revision


@dataclass
class AuditNode:
    atom: str
    kind: str
    ok: bool
    detail: str
    children: list["AuditNode"] = field(default_factory=list)

    @property
    def all_ok(self) -> bool:
        return self.ok and all(child.all_ok for child in self.children)

    def to_obj(self) -> dict:
        return {
            "atom": self.atom,
            "kind": self.kind,
            "ok": self.ok,
            "detail": self.detail,
            "children": [c.to_obj() for c in self.children],
        }


def render_audit_tree(node: AuditNode, indent: int = 0) -> str:
    mark = "ok  " if node.ok else "FAIL"
    lines = [f"{'  ' * indent}[{mark}] {node.atom} <- {node.kind}: {node.detail}"]
    for child in node.children:
        lines.append(render_audit_tree(child, indent + 1))
    return "\n".join(lines)


class Auditor:
    def __init__(self, db: LogClient, trust_store: TrustStore, operator_key: bytes | None = None):
        self.db = db
        self.trust_store = trust_store
        self.operator_key = operator_key
        self._revisions: dict[str, RevisionRecord] = {}

    # -- revision access -------------------------------------------------

    def fetch_revision(self, rev_id: str) -> RevisionRecord:
        cached = self._revisions.get(rev_id)
        if cached is not None:
            return cached
        record, _payload, _proof, _head = fetch_verified_revision(self.db, rev_id, self.operator_key)
        self._revisions[rev_id] = record
        return record

    # -- entry points ------------------------------------------------------

    def audit_atom(self, owner: str, atom: GroundAtom) -> AuditNode:
        """Audit one atom of the owner's head revision."""
        head = self.db.get_head(owner)["revision_id"]
        record = self.fetch_revision(head)
        claim = next((c for c in record.claims if c.atom == atom), None)
        if claim is None:
            raise NotFoundError(f"atom {canonical_atom(atom)} not in head revision {head} of {owner!r}")
        return self.audit_claim(record, claim)

    def audit_head(self, owner: str) -> list[AuditNode]:
        """Audit every claim in the owner's head revision."""
        head = self.db.get_head(owner)["revision_id"]
        record = self.fetch_revision(head)
        return [self.audit_claim(record, claim) for claim in record.claims]

    # -- recursive verification ---------------------------------------------

    def audit_claim(self, record: RevisionRecord, claim: Claim, depth: int = 0) -> AuditNode:
        if depth > 500:
            return self._fail(claim.atom, "depth", "evidence chain exceeds depth limit")
        ev = claim.evidence
        try:
            if isinstance(ev, DirectAssertion):
                return self._audit_direct(claim, ev)
            if isinstance(ev, DerivedByRule):
                return self._audit_derived(record, claim, ev, depth)
            if isinstance(ev, CarriedByNextRule):
                return self._audit_carried(claim, ev, depth)
            if isinstance(ev, LogInclusion):
                return self._audit_inclusion(claim, ev)
            return self._fail(claim.atom, "unknown", f"unknown evidence type {type(ev).__name__}")
        except CyberlogError as exc:
            return self._fail(claim.atom, type(ev).__name__, str(exc))

    def _fail(self, atom: GroundAtom, kind: str, detail: str) -> AuditNode:
        return AuditNode(canonical_atom(atom), kind, False, detail)

    def _audit_direct(self, claim: Claim, ev: DirectAssertion) -> AuditNode:
        key = self.trust_store.public_key(ev.signer)
        if key is None:
            return self._fail(claim.atom, "direct_assertion", f"no trusted key for {ev.signer!r}")
        if not verify_bytes(key, ev.signature, canonical_atom(claim.atom).encode("utf-8")):
            return self._fail(claim.atom, "direct_assertion", f"signature by {ev.signer!r} invalid")
        return AuditNode(canonical_atom(claim.atom), "direct_assertion", True, f"signed by {ev.signer}")

    def _audit_derived(self, record: RevisionRecord, claim: Claim, ev: DerivedByRule, depth: int) -> AuditNode:
        subst = dict(ev.substitution)
        head = instantiate_head(ev.rule.head, subst)
        if head != claim.atom:
            return self._fail(claim.atom, "derived_by_rule", "rule instance does not reproduce the claim")
        node = AuditNode(canonical_atom(claim.atom), "derived_by_rule", True, "rule re-derivation checked")
        rel_atoms = [a for a in ev.rule.body if isinstance(a, RelationalAtom)]
        if len(rel_atoms) != len(ev.premises):
            return self._fail(claim.atom, "derived_by_rule", "premise count does not match rule body")
        for body_atom, premise_id in zip(rel_atoms, ev.premises):
            expected = instantiate_head(body_atom, subst)
            node.children.append(self._resolve_premise(record, premise_id, expected, depth + 1))
        ok, detail = self._check_side_conditions(ev.rule.body, subst)
        if not ok:
            node.ok = False
            node.detail = detail
        return node

    def _audit_carried(self, claim: Claim, ev: CarriedByNextRule, depth: int) -> AuditNode:
        source = self.fetch_revision(ev.source_revision)
        subst = dict(ev.substitution)
        head = instantiate_head(ev.rule.head, subst)
        if head != claim.atom:
            return self._fail(claim.atom, "carried_by_next_rule", "next-rule instance does not reproduce the claim")
        node = AuditNode(
            canonical_atom(claim.atom),
            "carried_by_next_rule",
            True,
            f"carried from revision {ev.source_revision[:8]}",
        )
        for body_atom in ev.rule.body:
            if not isinstance(body_atom, RelationalAtom):
                continue
            expected = instantiate_head(body_atom, subst)
            premise = next((c for c in source.claims if c.atom == expected), None)
            if premise is not None:
                node.children.append(self.audit_claim(source, premise, depth + 1))
            else:
                node.children.append(self._resolve_included_atom(source, expected))
        ok, detail = self._check_side_conditions(ev.rule.body, subst)
        if not ok:
            node.ok = False
            node.detail = detail
        return node

    def _audit_inclusion(self, claim: Claim, ev: LogInclusion) -> AuditNode:
        from .claimlog import verify_inclusion

        if not verify_inclusion(ev.tree_head.root_hash, ev.leaf_hash, ev.proof):
            return self._fail(claim.atom, "log_inclusion", f"inclusion proof failed for {ev.revision_id[:8]}")
        if self.operator_key is not None and not verify_tree_head(ev.tree_head, self.operator_key):
            return self._fail(claim.atom, "log_inclusion", "tree head signature invalid")
        record = self.fetch_revision(ev.revision_id)
        if not any(c.atom == claim.atom for c in record.claims):
            return self._fail(claim.atom, "log_inclusion", f"atom absent from revision {ev.revision_id[:8]}")
        return AuditNode(
            canonical_atom(claim.atom), "log_inclusion", True, f"included from {ev.revision_id[:8]}, proof verified"
        )

    def _resolve_premise(self, record: RevisionRecord, premise_id: str, expected: GroundAtom, depth: int) -> AuditNode:
        for claim in record.claims:
            if claim.claim_id == premise_id:
                if claim.atom != expected:
                    return self._fail(expected, "premise", "premise claim does not match instantiated body atom")
                return self.audit_claim(record, claim, depth)
        # not an own claim: look through the revisions this record includes
        for rev_id in record.includes:
            try:
                included = self.fetch_revision(rev_id)
            except (LogIntegrityError, NotFoundError) as exc:
                return self._fail(expected, "log_inclusion", f"included revision {rev_id[:8]} unusable: {exc}")
            for claim in included.claims:
                if claim.claim_id == premise_id:
                    if claim.atom != expected:
                        return self._fail(expected, "premise", "premise claim does not match instantiated body atom")
                    return AuditNode(
                        canonical_atom(claim.atom),
                        "log_inclusion",
                        True,
                        f"included from {rev_id[:8]}, fetched with verified proof",
                    )
        return self._fail(expected, "premise", f"premise {premise_id[:8]} not found in record or its includes")

    def _resolve_included_atom(self, record: RevisionRecord, expected: GroundAtom) -> AuditNode:
        for rev_id in record.includes:
            try:
                included = self.fetch_revision(rev_id)
            except (LogIntegrityError, NotFoundError) as exc:
                return self._fail(expected, "log_inclusion", f"included revision {rev_id[:8]} unusable: {exc}")
            if any(c.atom == expected for c in included.claims):
                return AuditNode(
                    canonical_atom(expected),
                    "log_inclusion",
                    True,
                    f"included from {rev_id[:8]}, fetched with verified proof",
                )
        return self._fail(expected, "premise", "next-rule premise not found in source revision or its includes")

    def _check_side_conditions(self, body, subst) -> tuple[bool, str]:
        try:
            for atom in body:
                if isinstance(atom, BuiltinAtom):
                    if not eval_builtin(atom.name, atom.args, subst):
                        return False, f"builtin {atom.name} does not hold under the stored substitution"
                elif isinstance(atom, ComparisonAtom):
                    if not _eval_comparison(atom, subst):
                        return False, f"comparison {atom.op} does not hold under the stored substitution"
        except EvaluationError as exc:
            return False, f"side condition unevaluable: {exc}"
        return True, ""


# ---------------------------------------------------------------------------
# Trusted-heads cache and log consistency verification


def load_heads_cache(path: str) -> list[SignedTreeHead]:
    heads = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    heads.append(SignedTreeHead.from_obj(json.loads(line)))
    except FileNotFoundError:
        pass
    return heads


def append_heads_cache(path: str, head: SignedTreeHead) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(head.to_obj()) + "\n")


@dataclass
class LogCheck:
    old_size: int
    new_size: int
    ok: bool
    detail: str


def verify_log_consistency(
    db: LogClient,
    heads_cache_path: str,
    operator_key: bytes | None = None,
    append_current: bool = True,
) -> tuple[bool, list[LogCheck]]:
    """Verify append-only consistency between every consecutive cached head
    pair and the current root; appends the current head to the cache."""
    cached = load_heads_cache(heads_cache_path)
    if not cached:
        raise NotFoundError(f"heads cache {heads_cache_path!r} is empty")
    current = SignedTreeHead.from_obj(db.get_log_root())
    sequence = cached + [current]
    checks: list[LogCheck] = []
    for head in sequence:
        if operator_key is not None and not verify_tree_head(head, operator_key):
            checks.append(LogCheck(head.tree_size, head.tree_size, False, "tree head signature invalid"))
    for older, newer in zip(sequence, sequence[1:]):
        if newer.tree_size < older.tree_size:
            checks.append(LogCheck(older.tree_size, newer.tree_size, False, "tree size went backwards"))
            continue
        if older.tree_size == newer.tree_size:
            ok = older.root_hash == newer.root_hash
            checks.append(
                LogCheck(older.tree_size, newer.tree_size, ok, "equal-size roots match" if ok else "equal-size roots differ")
            )
            continue
        if older.tree_size == 0:
            checks.append(LogCheck(0, newer.tree_size, True, "trivial extension of empty log"))
            continue
        try:
            proof = ConsistencyProof.from_obj(db.get_consistency(older.tree_size, newer.tree_size))
        except CyberlogError as exc:
            checks.append(LogCheck(older.tree_size, newer.tree_size, False, f"no consistency proof: {exc}"))
            continue
        ok = verify_consistency(older.root_hash, newer.root_hash, proof)
        checks.append(
            LogCheck(
                older.tree_size,
                newer.tree_size,
                ok,
                "append-only extension verified" if ok else "split-view/tamper suspected",
            )
        )
    all_ok = all(c.ok for c in checks)
    if append_current and all_ok:
        append_heads_cache(heads_cache_path, current)
    return all_ok, checks
