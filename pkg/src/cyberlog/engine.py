"""Evidence-carrying knowledge base and bottom-up saturation.

Every stored fact is a Claim: a ground attested atom plus the evidence that
justifies it. Saturation is semi-naive (per-iteration delta sets) and tags
each derivation with the rule instance and premise claims used, so the full
derivation chain can be replayed later.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Iterator, Mapping, Sequence

from .errors import EvaluationError, EvidenceError, NotFoundError
from .lang import (
    INT64_MAX,
    INT64_MIN,
    ArithExpr,
    BodyAtom,
    BuiltinAtom,
    ComparisonAtom,
    IntConstant,
    RelationalAtom,
    Rule,
    RuleKind,
    Rulesheet,
    StringConstant,
    Variable,
    format_rule,
    term_variables,
)

if TYPE_CHECKING:
    from .claimlog import InclusionProof, SignedTreeHead
    from .identity import TrustStore

GroundTerm = int | str
Substitution = dict[str, GroundTerm]


@dataclass(frozen=True)
class GroundAtom:
    principal: str
    predicate: str
    args: tuple[GroundTerm, ...]


# ---------------------------------------------------------------------------
# Canonical serialization: principal|predicate(a1,...) with double-quoted
# strings, base-10 integers, no whitespace. Claim ids hash these UTF-8 bytes.


def _enc_string(value: str) -> str:
    return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'


def _enc_term(value: GroundTerm) -> str:
    if isinstance(value, bool) or not isinstance(value, (int, str)):
        raise TypeError(f"not a ground term: {value!r}")
    return str(value) if isinstance(value, int) else _enc_string(value)


def canonical_atom(atom: GroundAtom) -> str:
    args = ",".join(_enc_term(a) for a in atom.args)
    return f"{_enc_string(atom.principal)}|{atom.predicate}({args})"


def atom_id(atom: GroundAtom) -> str:
    """Hex SHA-256 of the canonical serialization."""
    return hashlib.sha256(canonical_atom(atom).encode("utf-8")).hexdigest()


def parse_canonical_atom(text: str) -> GroundAtom:
    try:
        principal, pos = _scan_string(text, 0)
        if text[pos] != "|":
            raise ValueError(f"bad canonical atom: {text!r}")
        pos += 1
        open_paren = text.index("(", pos)
        predicate = text[pos:open_paren]
        pos = open_paren + 1
        args: list[GroundTerm] = []
        if text[pos] != ")":
            while True:
                if text[pos] == '"':
                    value, pos = _scan_string(text, pos)
                    args.append(value)
                else:
                    end = pos
                    while text[end] not in ",)":
                        end += 1
                    args.append(int(text[pos:end]))
                    pos = end
                if text[pos] == ")":
                    break
                pos += 1  # skip comma
    except IndexError as exc:
        raise ValueError(f"truncated canonical atom: {text!r}") from exc
    if text[pos + 1 :]:
        raise ValueError(f"trailing data in canonical atom: {text!r}")
    return GroundAtom(principal, predicate, tuple(args))


def _scan_string(text: str, pos: int) -> tuple[str, int]:
    if text[pos] != '"':
        raise ValueError(f"expected string at {pos} in {text!r}")
    out: list[str] = []
    i = pos + 1
    while i < len(text):
        ch = text[i]
        if ch == "\\":
            out.append(text[i + 1])
            i += 2
        elif ch == '"':
            return "".join(out), i + 1
        else:
            out.append(ch)
            i += 1
    raise ValueError(f"unterminated string in {text!r}")


# ---------------------------------------------------------------------------
# Evidence


@dataclass(frozen=True)
class DerivedByRule:
    rule: Rule
    substitution: Mapping[str, GroundTerm]
    premises: tuple[str, ...]  # claim ids of relational body atoms, in body order


@dataclass(frozen=True)
class DirectAssertion:
    signer: str
    signature: bytes


@dataclass(frozen=True)
class LogInclusion:
    revision_id: str
    leaf_hash: bytes
    proof: "InclusionProof"
    tree_head: "SignedTreeHead"


@dataclass(frozen=True)
class CarriedByNextRule:
    rule: Rule
    substitution: Mapping[str, GroundTerm]
    source_revision: str


Evidence = DerivedByRule | DirectAssertion | LogInclusion | CarriedByNextRule


@dataclass(frozen=True)
class Claim:
    atom: GroundAtom
    evidence: Evidence
    claim_id: str


def make_claim(atom: GroundAtom, evidence: Evidence) -> Claim:
    return Claim(atom, evidence, atom_id(atom))


@dataclass
class EvidenceNode:
    claim: Claim
    children: list["EvidenceNode"] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Term and body evaluation


def resolve_term(term, subst: Substitution) -> GroundTerm | None:
    """Ground value of a term under subst, or None if any variable is unbound."""
    if isinstance(term, Variable):
        return subst.get(term.name)
    if isinstance(term, IntConstant):
        return term.value
    if isinstance(term, StringConstant):
        return term.value
    if isinstance(term, ArithExpr):
        left = resolve_term(term.left, subst)
        right = resolve_term(term.right, subst)
        if left is None or right is None:
            return None
        if not isinstance(left, int) or not isinstance(right, int):
            raise EvaluationError(f"arithmetic on non-integer values: {left!r} {term.op} {right!r}")
        if term.op == "+":
            value = left + right
        elif term.op == "-":
            value = left - right
        else:
            value = left * right
        if not (INT64_MIN <= value <= INT64_MAX):
            raise EvaluationError(f"integer overflow: {left} {term.op} {right}")
        return value
    raise TypeError(term)


def _unify_args(pattern: Sequence, ground: Sequence[GroundTerm], subst: Substitution) -> Substitution | None:
    if len(pattern) != len(ground):
        return None
    out = subst
    copied = False
    for p, g in zip(pattern, ground):
        if isinstance(p, Variable):
            bound = out.get(p.name)
            if bound is None:
                if not copied:
                    out = dict(out)
                    copied = True
                out[p.name] = g
            elif bound != g:
                return None
        else:
            if resolve_term(p, out) != g:
                return None
    return out


def _json_lookup(data: str, path: str):
    try:
        value = json.loads(data)
    except ValueError:
        return None, False
    for key in path.split("."):
        if not isinstance(value, dict) or key not in value:
            return None, False
        value = value[key]
    return value, True


def eval_builtin(name: str, args: Sequence, subst: Substitution | None = None) -> list[Substitution]:
    """Evaluate a registered builtin against partially bound arguments.

    Inputs must be bound (EvaluationError otherwise); failure to produce a
    value yields no substitutions rather than an error.
    """
    subst = subst or {}
    if name not in ("get_param_int", "get_param_str"):
        raise EvaluationError(f"unknown builtin {name!r}")
    data = resolve_term(args[0], subst)
    path = resolve_term(args[1], subst)
    if data is None or path is None:
        raise EvaluationError(f"unbound input to builtin {name!r}")
    if not isinstance(data, str) or not isinstance(path, str):
        return []
    value, found = _json_lookup(data, path)
    want = int if name == "get_param_int" else str
    if not found or type(value) is not want:
        return []
    out = args[2]
    if isinstance(out, Variable) and out.name not in subst:
        bound = dict(subst)
        bound[out.name] = value
        return [bound]
    return [subst] if resolve_term(out, subst) == value else []


def _eval_comparison(atom: ComparisonAtom, subst: Substitution) -> list[Substitution]:
    left = resolve_term(atom.left, subst)
    right = resolve_term(atom.right, subst)
    if atom.op == "==":
        if left is None and isinstance(atom.left, Variable) and right is not None:
            bound = dict(subst)
            bound[atom.left.name] = right
            return [bound]
        if right is None and isinstance(atom.right, Variable) and left is not None:
            bound = dict(subst)
            bound[atom.right.name] = left
            return [bound]
        if left is None or right is None:
            raise EvaluationError("'==' with unbound operands")
        return [subst] if left == right else []
    if left is None or right is None:
        raise EvaluationError(f"{atom.op!r} with unbound operands")
    if atom.op == "!=":
        return [subst] if left != right else []
    if not isinstance(left, int) or not isinstance(right, int):
        raise EvaluationError(f"ordered comparison on non-integers: {left!r} {atom.op} {right!r}")
    ok = {"<": left < right, ">": left > right, "<=": left <= right, ">=": left >= right}[atom.op]
    return [subst] if ok else []


def instantiate_head(head: RelationalAtom, subst: Substitution) -> GroundAtom:
    args = []
    for term in head.args:
        value = resolve_term(term, subst)
        if value is None:
            raise EvaluationError(f"unbound head variable in {head.predicate}")
        args.append(value)
    return GroundAtom(head.principal, head.predicate, tuple(args))


def match_rule_body(
    body: Sequence[BodyAtom],
    candidates,
    subst: Substitution | None = None,
) -> Iterator[tuple[Substitution, list[Claim]]]:
    """All (substitution, relational premises) satisfying the body left-to-right.

    `candidates(rel_index, atom)` supplies the claims to try at the i-th
    relational position; builtins and comparisons evaluate in place.
    """

    def walk(i: int, rel_i: int, subst: Substitution, premises: list[Claim]):
        if i == len(body):
            yield subst, premises
            return
        atom = body[i]
        if isinstance(atom, RelationalAtom):
            for claim in candidates(rel_i, atom):
                bound = _unify_args(atom.args, claim.atom.args, subst)
                if bound is not None:
                    yield from walk(i + 1, rel_i + 1, bound, premises + [claim])
        elif isinstance(atom, BuiltinAtom):
            try:
                results = eval_builtin(atom.name, atom.args, subst)
            except EvaluationError as exc:
                raise EvaluationError(f"{exc} [bindings: {subst}]") from exc
            for bound in results:
                yield from walk(i + 1, rel_i, bound, premises)
        else:
            try:
                results = _eval_comparison(atom, subst)
            except EvaluationError as exc:
                raise EvaluationError(f"{exc} [bindings: {subst}]") from exc
            for bound in results:
                yield from walk(i + 1, rel_i, bound, premises)

    yield from walk(0, 0, subst or {}, [])


def rule_substitution(rule: Rule, subst: Substitution) -> dict[str, GroundTerm]:
    """Restrict a full match substitution to the variables of the rule."""
    names: set[str] = set()
    for atom in (rule.head, *rule.body):
        if isinstance(atom, RelationalAtom) or isinstance(atom, BuiltinAtom):
            for arg in atom.args:
                names.update(term_variables(arg))
        else:
            names.update(term_variables(atom.left))
            names.update(term_variables(atom.right))
    return {name: subst[name] for name in sorted(names) if name in subst}


# ---------------------------------------------------------------------------
# Knowledge base


class KnowledgeBase:
    """Set of claims keyed by atom, with first-derivation-wins evidence.

    Owned by a single logical actor; not safe for concurrent mutation.
    When a trust store is supplied, direct assertions are signature-checked
    on entry; log inclusions are proof-checked when an operator key is known.
    """

    def __init__(self, trust_store: "TrustStore | None" = None, log_operator_key: bytes | None = None):
        self.trust_store = trust_store
        self.log_operator_key = log_operator_key
        self.claims: dict[GroundAtom, Claim] = {}
        self.by_id: dict[str, Claim] = {}
        self._index: dict[tuple[str, str], list[Claim]] = {}
        self.saturated = False

    def __len__(self) -> int:
        return len(self.claims)

    def __contains__(self, atom: GroundAtom) -> bool:
        return atom in self.claims

    def atoms(self) -> frozenset[GroundAtom]:
        return frozenset(self.claims)

    def claims_for(self, principal: str, predicate: str) -> list[Claim]:
        return self._index.get((principal, predicate), [])

    # -- admission ------------------------------------------------------

    def assert_claim(self, claim: Claim) -> bool:
        """Add a claim after checking its evidence; returns False if the atom
        is already present (set semantics, first evidence wins)."""
        self.check_evidence(claim)
        if claim.atom in self.claims:
            return False
        self.claims[claim.atom] = claim
        self.by_id[claim.claim_id] = claim
        self._index.setdefault((claim.atom.principal, claim.atom.predicate), []).append(claim)
        self.saturated = False
        return True

    def check_evidence(self, claim: Claim) -> None:
        if claim.claim_id != atom_id(claim.atom):
            raise EvidenceError(f"claim id does not match atom {canonical_atom(claim.atom)}")
        ev = claim.evidence
        if isinstance(ev, DirectAssertion):
            if self.trust_store is not None:
                key = self.trust_store.public_key(ev.signer)
                if key is None:
                    raise EvidenceError(f"no trusted key for signer {ev.signer!r}")
                from .identity import verify_bytes

                if not verify_bytes(key, ev.signature, canonical_atom(claim.atom).encode("utf-8")):
                    raise EvidenceError(f"bad signature on {canonical_atom(claim.atom)}")
        elif isinstance(ev, (DerivedByRule, CarriedByNextRule)):
            head = instantiate_head(ev.rule.head, dict(ev.substitution))
            if head != claim.atom:
                raise EvidenceError(
                    f"rule instance mismatch: rule head yields {canonical_atom(head)}, "
                    f"claim is {canonical_atom(claim.atom)}"
                )
        elif isinstance(ev, LogInclusion):
            from .claimlog import verify_inclusion, verify_tree_head

            if not verify_inclusion(ev.tree_head.root_hash, ev.leaf_hash, ev.proof):
                raise EvidenceError(f"inclusion proof failed for revision {ev.revision_id}")
            if self.log_operator_key is not None and not verify_tree_head(ev.tree_head, self.log_operator_key):
                raise EvidenceError("tree head signature invalid")
        else:
            raise EvidenceError(f"unknown evidence type {type(ev).__name__}")

    # -- saturation -----------------------------------------------------

    def saturate(self, rs: Rulesheet) -> list[Claim]:
        """Least fixpoint of the standard rules; returns claims added."""
        std = [r for r in rs.rules if r.kind is RuleKind.STANDARD]
        added: list[Claim] = []

        def derive(rule: Rule, subst: Substitution, premises: list[Claim], sink: dict):
            atom = instantiate_head(rule.head, subst)
            if atom in self.claims or atom in sink:
                return
            evidence = DerivedByRule(
                rule, rule_substitution(rule, subst), tuple(c.claim_id for c in premises)
            )
            sink[atom] = Claim(atom, evidence, atom_id(atom))

        def run_rule(rule: Rule, candidates, sink: dict):
            try:
                for subst, premises in match_rule_body(rule.body, candidates):
                    derive(rule, subst, premises, sink)
            except EvaluationError as exc:
                raise EvaluationError(f"{exc} in rule: {format_rule(rule, oneline=True)}") from exc

        # Rules without relational atoms fire once.
        pending: dict[GroundAtom, Claim] = {}
        for rule in std:
            if not any(isinstance(a, RelationalAtom) for a in rule.body):
                run_rule(rule, lambda i, a: (), pending)
        for claim in pending.values():
            if self.assert_claim(claim):
                added.append(claim)

        delta: set[GroundAtom] = set(self.claims)
        recursive = [r for r in std if any(isinstance(a, RelationalAtom) for a in r.body)]
        while delta:
            pending = {}
            for rule in recursive:
                n_rel = sum(1 for a in rule.body if isinstance(a, RelationalAtom))
                for k in range(n_rel):

                    def candidates(i: int, atom: RelationalAtom, k=k):
                        pool = self.claims_for(atom.principal, atom.predicate)
                        if i < k:
                            return [c for c in pool if c.atom not in delta]
                        if i == k:
                            return [c for c in pool if c.atom in delta]
                        return pool

                    run_rule(rule, candidates, pending)
            new_delta: set[GroundAtom] = set()
            for claim in pending.values():
                if self.assert_claim(claim):
                    added.append(claim)
                    new_delta.add(claim.atom)
            delta = new_delta
        self.saturated = True
        return added

    # -- queries ----------------------------------------------------------

    def query(self, pattern: RelationalAtom) -> list[Substitution]:
        """All substitutions grounding `pattern` to a stored atom, in
        canonical-serialization order of the matched atoms."""
        for arg in pattern.args:
            if isinstance(arg, ArithExpr):
                raise EvaluationError("arithmetic not allowed in query patterns")
        matches: list[tuple[str, Substitution]] = []
        for claim in self.claims_for(pattern.principal, pattern.predicate):
            bound = _unify_args(pattern.args, claim.atom.args, {})
            if bound is not None:
                matches.append((canonical_atom(claim.atom), bound))
        matches.sort(key=lambda pair: pair[0])
        return [subst for _, subst in matches]

    # -- explanation ------------------------------------------------------

    def explain(self, atom: GroundAtom) -> EvidenceNode:
        """Evidence tree for a stored atom, expanding derivation premises.

        DirectAssertion, LogInclusion and CarriedByNextRule are leaves here;
        auditing across revisions is the audit module's job.
        """
        claim = self.claims.get(atom)
        if claim is None:
            raise NotFoundError(f"atom not in knowledge base: {canonical_atom(atom)}")
        return self._explain_claim(claim, set())

    def _explain_claim(self, claim: Claim, seen: set[str]) -> EvidenceNode:
        if claim.claim_id in seen:
            raise EvidenceError(f"cyclic evidence at {canonical_atom(claim.atom)}")
        node = EvidenceNode(claim)
        if isinstance(claim.evidence, DerivedByRule):
            for premise_id in claim.evidence.premises:
                premise = self.by_id.get(premise_id)
                if premise is None:
                    raise EvidenceError(f"premise {premise_id} missing from knowledge base")
                node.children.append(self._explain_claim(premise, seen | {claim.claim_id}))
        return node

    # -- local audit -------------------------------------------------------

    def verify_claim_chain(self, atom: GroundAtom) -> bool:
        """True iff the atom's local evidence tree re-checks all the way down."""
        try:
            node = self.explain(atom)
        except (NotFoundError, EvidenceError):
            return False
        return self._verify_node(node)

    def _verify_node(self, node: EvidenceNode) -> bool:
        claim = node.claim
        try:
            self.check_evidence(claim)
        except EvidenceError:
            return False
        ev = claim.evidence
        if isinstance(ev, DerivedByRule):
            subst = dict(ev.substitution)
            rel_atoms = [a for a in claim.evidence.rule.body if isinstance(a, RelationalAtom)]
            if len(rel_atoms) != len(ev.premises):
                return False
            for body_atom, child in zip(rel_atoms, node.children):
                instantiated = instantiate_head(body_atom, subst)
                if instantiated != child.claim.atom:
                    return False
            try:
                for atom in ev.rule.body:
                    if isinstance(atom, BuiltinAtom):
                        if not eval_builtin(atom.name, atom.args, subst):
                            return False
                    elif isinstance(atom, ComparisonAtom):
                        if not _eval_comparison(atom, subst):
                            return False
            except EvaluationError:
                return False
            return all(self._verify_node(child) for child in node.children)
        return True


def claims_from_atoms(atoms: Iterable[GroundAtom], signer: str = "", signature: bytes = b"") -> list[Claim]:
    """Wrap bare atoms as directly asserted claims (test/tooling helper)."""
    return [make_claim(a, DirectAssertion(signer or a.principal, signature)) for a in atoms]
