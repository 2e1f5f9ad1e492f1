"""Claim database service: submissions, retrieval, proofs, HTTP wire."""

import pytest

from cyberlog.claimdb import ClaimDb, HttpLogClient, InProcessLogClient, serve_db_in_thread
from cyberlog.claimlog import (
    ConsistencyProof,
    InclusionProof,
    MerkleLog,
    SignedTreeHead,
    leaf_hash,
    verify_consistency,
    verify_inclusion,
    verify_tree_head,
)
from cyberlog.engine import DirectAssertion, GroundAtom, make_claim
from cyberlog.errors import NotFoundError, SubmitError
from cyberlog.identity import sign_claim
from cyberlog.lang import parse_rulesheet
from cyberlog.revision import (
    StagingRevision,
    build_record,
    commit_staging,
    encode_payload,
    encode_rulesheet_payload,
    fetch_verified_revision,
    rulesheet_entry_id,
    sign_record,
)

from conftest import OPERATOR

SB_SHEET = "'SB': Subject: 's' Issuer: 'i'\n"


def sb_payload(identities, supersedes=None, atoms=(), commit_time=1):
    rs = parse_rulesheet(SB_SHEET, "SB")
    claims = []
    for atom in atoms:
        sc = sign_claim(identities["SB"], atom)
        claims.append(make_claim(atom, DirectAssertion("SB", sc.signature)))
    record = build_record("SB", supersedes, (), rs.source_hash.hex(), claims, commit_time)
    return record, encode_payload(record, sign_record(record, identities["SB"]))


def test_first_submission_receipt_verifies(db, db_client, identities):
    record, payload = sb_payload(identities)
    receipt = db_client.submit_revision(payload)
    assert receipt["leaf_index"] == 0
    assert receipt["revision_id"] == record.id
    head = SignedTreeHead.from_obj(receipt["tree_head"])
    proof = InclusionProof.from_obj(receipt["inclusion_proof"])
    assert verify_inclusion(head.root_hash, leaf_hash(payload.encode()), proof)
    assert verify_tree_head(head, identities[OPERATOR].public_key)


def test_bad_signature_rejected(db_client, identities):
    record, _payload = sb_payload(identities)
    forged = encode_payload(record, b"\x00" * 64)
    with pytest.raises(SubmitError) as exc:
        db_client.submit_revision(forged)
    assert exc.value.code == 401


def test_unknown_owner_rejected(db_client, identities, trust_store):
    from cyberlog.identity import generate_identity

    rogue = generate_identity("ROGUE", seed=bytes([7]) * 32)
    rs = parse_rulesheet("'ROGUE': Subject: 's' Issuer: 'i'\n", "ROGUE")
    record = build_record("ROGUE", None, (), rs.source_hash.hex(), (), 1)
    with pytest.raises(SubmitError) as exc:
        db_client.submit_revision(encode_payload(record, sign_record(record, rogue)))
    assert exc.value.code == 401


def test_cross_owner_supersession_rejected(db_client, identities):
    _, payload = sb_payload(identities)
    receipt = db_client.submit_revision(payload)
    rs = parse_rulesheet("'MRM': Subject: 's' Issuer: 'i'\n", "MRM")
    record = build_record("MRM", receipt["revision_id"], (), rs.source_hash.hex(), (), 2)
    with pytest.raises(SubmitError) as exc:
        db_client.submit_revision(encode_payload(record, sign_record(record, identities["MRM"])))
    assert exc.value.code == 401


def test_double_supersession_conflict(db_client, identities):
    _, payload = sb_payload(identities)
    base = db_client.submit_revision(payload)["revision_id"]
    _, first = sb_payload(identities, supersedes=base, commit_time=2)
    db_client.submit_revision(first)
    _, second = sb_payload(identities, supersedes=base, commit_time=3)
    with pytest.raises(SubmitError) as exc:
        db_client.submit_revision(second)
    assert exc.value.code == 409


def test_second_chain_root_rejected(db_client, identities):
    _, payload = sb_payload(identities)
    db_client.submit_revision(payload)
    _, another_root = sb_payload(identities, commit_time=9)
    with pytest.raises(SubmitError) as exc:
        db_client.submit_revision(another_root)
    assert exc.value.code == 409


def test_malformed_record_rejected(db_client):
    with pytest.raises(SubmitError) as exc:
        db_client.submit_revision("not json at all")
    assert exc.value.code == 400
    with pytest.raises(SubmitError) as exc:
        db_client.submit_revision('{"kind":"revision","owner":"SB"}')
    assert exc.value.code == 400


def test_unknown_supersedes_target(db_client, identities):
    _, payload = sb_payload(identities, supersedes="ab" * 32)
    with pytest.raises(SubmitError) as exc:
        db_client.submit_revision(payload)
    assert exc.value.code == 400


def test_get_revision_proof_still_verifies_after_growth(db_client, identities):
    record, payload = sb_payload(identities, atoms=[GroundAtom("SB", "p", (1,))])
    db_client.submit_revision(payload)
    rs = parse_rulesheet("'CTR': Subject: 's' Issuer: 'i'\n", "CTR")
    staging = StagingRevision("CTR")
    for t in range(10):
        _, _, staging = commit_staging(staging, rs, db_client, identities["CTR"], now_ms=t)
    fetched, _, proof, head = fetch_verified_revision(db_client, record.id, identities[OPERATOR].public_key)
    assert fetched.id == record.id
    assert proof.tree_size == 11
    root = SignedTreeHead.from_obj(db_client.get_log_root())
    assert root.tree_size == 11


def test_get_revision_not_found(db_client):
    with pytest.raises(NotFoundError):
        db_client.get_revision("00" * 32)


def test_heads_endpoint(db_client, identities):
    with pytest.raises(NotFoundError):
        db_client.get_head("SB")
    _, payload = sb_payload(identities)
    base = db_client.submit_revision(payload)["revision_id"]
    _, nxt = sb_payload(identities, supersedes=base, commit_time=2)
    head_id = db_client.submit_revision(nxt)["revision_id"]
    head = db_client.get_head("SB")
    assert head["revision_id"] == head_id and head["chain_length"] == 2


def test_rulesheet_blob_storage(db_client):
    text = "'SB': Subject: 's' Issuer: 'i'\n"
    receipt = db_client.submit_revision(encode_rulesheet_payload(text))
    assert receipt["revision_id"] == rulesheet_entry_id(text)
    fetched = db_client.get_revision(receipt["revision_id"])
    import json

    assert json.loads(fetched["payload"])["text"] == text
    # resubmission is idempotent
    again = db_client.submit_revision(encode_rulesheet_payload(text))
    assert again["leaf_index"] == receipt["leaf_index"]


def test_receipts_linearizable_and_consistent(db_client, identities):
    rs = parse_rulesheet("'CTR': Subject: 's' Issuer: 'i'\n", "CTR")
    staging = StagingRevision("CTR")
    receipts = []
    for t in range(6):
        _, receipt, staging = commit_staging(staging, rs, db_client, identities["CTR"], now_ms=t)
        receipts.append(receipt)
    indices = [r["leaf_index"] for r in receipts]
    assert indices == sorted(indices) and len(set(indices)) == len(indices)
    heads = [SignedTreeHead.from_obj(r["tree_head"]) for r in receipts]
    for older, newer in zip(heads, heads[1:]):
        proof = ConsistencyProof.from_obj(db_client.get_consistency(older.tree_size, newer.tree_size))
        assert verify_consistency(older.root_hash, newer.root_hash, proof)


def test_restart_rebuilds_indexes_and_root(tmp_path, identities, trust_store):
    path = str(tmp_path / "db.log")
    db = ClaimDb(MerkleLog(path), identities[OPERATOR], trust_store, clock=lambda: 1)
    client = InProcessLogClient(db)
    _, payload = sb_payload(identities)
    base = client.submit_revision(payload)["revision_id"]
    _, nxt = sb_payload(identities, supersedes=base, commit_time=2)
    client.submit_revision(nxt)
    root = db.get_log_root()["root_hash"]
    db.log.close()

    reopened = ClaimDb(MerkleLog(path), identities[OPERATOR], trust_store, clock=lambda: 2)
    assert reopened.get_log_root()["root_hash"] == root
    head = reopened.get_head("SB")
    assert head["chain_length"] == 2
    # double-supersede still detected after reload
    _, conflict = sb_payload(identities, supersedes=base, commit_time=3)
    with pytest.raises(SubmitError):
        reopened.submit_revision(conflict)
    reopened.log.close()


# --- HTTP wire -----------------------------------------------------------------


@pytest.fixture
def http_client(db):
    server, url = serve_db_in_thread(db)
    yield HttpLogClient(url)
    server.shutdown()
    server.server_close()


def test_http_submit_fetch_roundtrip(http_client, identities):
    record, payload = sb_payload(identities, atoms=[GroundAtom("SB", "p", ("x",))])
    receipt = http_client.submit_revision(payload)
    assert receipt["revision_id"] == record.id
    fetched, _, _, _ = fetch_verified_revision(http_client, record.id, identities[OPERATOR].public_key)
    assert fetched.claims[0].atom == GroundAtom("SB", "p", ("x",))
    head = http_client.get_head("SB")
    assert head["revision_id"] == record.id
    root = SignedTreeHead.from_obj(http_client.get_log_root())
    assert root.tree_size == 1
    proof = InclusionProof.from_obj(http_client.get_inclusion(0, 1))
    assert verify_inclusion(root.root_hash, leaf_hash(payload.encode()), proof)


def test_http_error_mapping(http_client, identities):
    with pytest.raises(NotFoundError):
        http_client.get_head("NOBODY")
    with pytest.raises(SubmitError) as exc:
        http_client.submit_revision("garbage")
    assert exc.value.code == 400
    _, payload = sb_payload(identities)
    http_client.submit_revision(payload)
    _, dup_root = sb_payload(identities, commit_time=5)
    with pytest.raises(SubmitError) as exc:
        http_client.submit_revision(dup_root)
    assert exc.value.code == 409


def test_http_consistency_endpoint(http_client, identities):
    _, payload = sb_payload(identities)
    r1 = http_client.submit_revision(payload)
    _, nxt = sb_payload(identities, supersedes=r1["revision_id"], commit_time=2)
    r2 = http_client.submit_revision(nxt)
    h1 = SignedTreeHead.from_obj(r1["tree_head"])
    h2 = SignedTreeHead.from_obj(r2["tree_head"])
    proof = ConsistencyProof.from_obj(http_client.get_consistency(1, 2))
    assert verify_consistency(h1.root_hash, h2.root_hash, proof)


def test_double_supersede_race_two_clients(db, identities):
    """Two clients race to supersede the same target; appends are serialized
    so exactly one wins and the loser gets a conflict."""
    import threading

    client_a = InProcessLogClient(db)
    client_b = InProcessLogClient(db)
    _, payload = sb_payload(identities)
    base = client_a.submit_revision(payload)["revision_id"]
    _, race_a = sb_payload(identities, supersedes=base, commit_time=10)
    _, race_b = sb_payload(identities, supersedes=base, commit_time=11)

    outcomes = {}
    barrier = threading.Barrier(2)

    def submit(tag, client, body):
        barrier.wait()
        try:
            outcomes[tag] = client.submit_revision(body)["revision_id"]
        except SubmitError as exc:
            outcomes[tag] = exc.code

    threads = [
        threading.Thread(target=submit, args=("a", client_a, race_a)),
        threading.Thread(target=submit, args=("b", client_b, race_b)),
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert sorted(v for v in outcomes.values() if v == 409) == [409]
    winners = [v for v in outcomes.values() if v != 409]
    assert len(winners) == 1
    assert db.get_head("SB")["revision_id"] == winners[0]
