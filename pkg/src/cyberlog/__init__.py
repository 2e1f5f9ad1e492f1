"""Auditable runtime monitoring: an attestation-based Datalog dialect, a
tamper-evident Merkle claim database, and monitors whose knowledge bases
carry verifiable evidence for every claim."""

__version__ = "0.1.0"

from .engine import Claim, GroundAtom, KnowledgeBase  # noqa: F401
from .lang import Rulesheet, parse_rulesheet  # noqa: F401
