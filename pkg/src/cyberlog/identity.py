"""Principal identities, claim signing, and the static trust store.

Identities are Ed25519 keypairs with X.509-style subject/issuer display
strings kept as opaque metadata. A trust store maps principal names to
public keys and is loaded by every monitor and by the claim database.
"""

from __future__ import annotations

import json
import secrets
from dataclasses import dataclass
from typing import Iterable

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .engine import GroundAtom, canonical_atom
from .errors import ConfigError, EvidenceError


@dataclass(frozen=True)
class Identity:
    name: str
    subject: str
    issuer: str
    public_key: bytes
    private_key: bytes | None = None


@dataclass(frozen=True)
class SignedClaim:
    atom: GroundAtom
    signer: str
    signature: bytes


def generate_identity(name: str, subject: str = "", issuer: str = "", seed: bytes | None = None) -> Identity:
    """Create an identity; a 32-byte seed makes the keypair reproducible."""
    if seed is None:
        seed = secrets.token_bytes(32)
    if len(seed) != 32:
        raise ConfigError("identity seed must be exactly 32 bytes")
    priv = Ed25519PrivateKey.from_private_bytes(seed)
    pub = priv.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
    return Identity(name, subject, issuer, pub, seed)


def sign_bytes(identity: Identity, data: bytes) -> bytes:
    if identity.private_key is None:
        raise EvidenceError(f"identity {identity.name!r} has no private key")
    return Ed25519PrivateKey.from_private_bytes(identity.private_key).sign(data)


def verify_bytes(public_key: bytes, signature: bytes, data: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, data)
        return True
    except (InvalidSignature, ValueError):
        return False


def sign_claim(identity: Identity, atom: GroundAtom) -> SignedClaim:
    signature = sign_bytes(identity, canonical_atom(atom).encode("utf-8"))
    return SignedClaim(atom, identity.name, signature)


def verify_claim(identity: Identity, sc: SignedClaim) -> bool:
    if sc.signer != identity.name:
        return False
    return verify_bytes(identity.public_key, sc.signature, canonical_atom(sc.atom).encode("utf-8"))


@dataclass(frozen=True)
class TrustEntry:
    name: str
    subject: str
    issuer: str
    public_key: bytes


class TrustStore:
    """Static principal-name -> public-key mapping, persisted as JSON lines."""

    def __init__(self, entries: Iterable[TrustEntry] = ()):
        self._entries: dict[str, TrustEntry] = {}
        for entry in entries:
            self.add(entry)

    @classmethod
    def from_identities(cls, identities: Iterable[Identity]) -> "TrustStore":
        return cls(TrustEntry(i.name, i.subject, i.issuer, i.public_key) for i in identities)

    def add(self, entry: TrustEntry | Identity) -> None:
        if isinstance(entry, Identity):
            entry = TrustEntry(entry.name, entry.subject, entry.issuer, entry.public_key)
        self._entries[entry.name] = entry

    def get(self, name: str) -> TrustEntry | None:
        return self._entries.get(name)

    def public_key(self, name: str) -> bytes | None:
        entry = self._entries.get(name)
        return entry.public_key if entry else None

    def names(self) -> list[str]:
        return sorted(self._entries)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for name in self.names():
                e = self._entries[name]
                fh.write(
                    json.dumps(
                        {
                            "name": e.name,
                            "subject": e.subject,
                            "issuer": e.issuer,
                            "public_key": e.public_key.hex(),
                        }
                    )
                    + "\n"
                )

    @classmethod
    def load(cls, path: str) -> "TrustStore":
        store = cls()
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                    store.add(
                        TrustEntry(obj["name"], obj["subject"], obj["issuer"], bytes.fromhex(obj["public_key"]))
                    )
                except (ValueError, KeyError) as exc:
                    raise ConfigError(f"malformed trust store entry: {line!r}") from exc
        return store
