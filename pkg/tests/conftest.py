import hashlib

import pytest

from cyberlog.claimdb import ClaimDb, InProcessLogClient
from cyberlog.claimlog import MerkleLog
from cyberlog.identity import TrustStore, generate_identity

PRINCIPALS = ("SB", "MRM", "OM", "CA", "DOM", "CTR")
OPERATOR = "log-operator"


def seed_for(name: str) -> bytes:
    return hashlib.sha256(b"cyberlog-test-id:" + name.encode()).digest()


@pytest.fixture
def identities():
    ids = {name: generate_identity(name, f"CN={name}", "CN=R3", seed=seed_for(name)) for name in PRINCIPALS}
    ids[OPERATOR] = generate_identity(OPERATOR, "CN=log", "CN=R3", seed=seed_for(OPERATOR))
    return ids


@pytest.fixture
def trust_store(identities):
    return TrustStore.from_identities(identities.values())


@pytest.fixture
def db(identities, trust_store):
    return ClaimDb(MerkleLog(), identities[OPERATOR], trust_store, clock=lambda: 1000)


@pytest.fixture
def db_client(db):
    return InProcessLogClient(db)
