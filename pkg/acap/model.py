# Copyright (c) ACAP contributors.
# Licensed under the MIT License.

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping, NamedTuple, TypeVar

from pydantic import BaseModel, ConfigDict, ValidationError

import acap.internal.shared as shared

Scalar = str | bool | int | float | None


class RuleType(str, Enum):
    PERMISSION = "permission"
    PROHIBITION = "prohibition"
    OBLIGATION = "obligation"


class ConstraintOperator(str, Enum):
    EQ = "eq"
    NEQ = "neq"
    IN = "in"
    NOT_IN = "not_in"
    LT = "lt"
    LTEQ = "lteq"
    GT = "gt"
    GTEQ = "gteq"

    @property
    def is_ordering(self) -> bool:
        return self in (ConstraintOperator.LT, ConstraintOperator.LTEQ, ConstraintOperator.GT, ConstraintOperator.GTEQ)

    @property
    def is_membership(self) -> bool:
        return self in (ConstraintOperator.IN, ConstraintOperator.NOT_IN)


class ConsentDecision(str, Enum):
    ACCEPTED = "accepted"
    REJECTED = "rejected"
    CONDITIONAL = "conditional"


class AdherenceDecision(str, Enum):
    PERMIT = "permit"
    DENY = "deny"
    ESCALATE = "escalate"


class ValiditySentinel(str, Enum):
    ON_VERSION_BUMP = "on_version_bump"
    ON_CAPABILITY_CHANGE = "on_capability_change"
    ON_ANY_CHANGE = "on_any_change"


class ReconsentTrigger(str, Enum):
    POLICY_BUMP = "POLICY_BUMP"
    CAPABILITY_CHANGE = "CAPABILITY_CHANGE"
    PRINCIPAL_CHANGE = "PRINCIPAL_CHANGE"


class AdherenceMode(str, Enum):
    LOCAL = "local"
    DELEGATED = "delegated"


class AcapModel(BaseModel):
    """Base class for protocol records: immutable, closed field set."""
    model_config = ConfigDict(frozen=True, extra="forbid")


class Constraint(AcapModel):
    left_operand: str
    # Kept as a string so documents using operators outside the supported set still load
    # and can be reported on instead of failing to parse.
    operator: str
    right_operand: Scalar | list[Scalar]

    @property
    def supported_operator(self) -> ConstraintOperator | None:
        try:
            return ConstraintOperator(self.operator)
        except ValueError:
            return None


class PolicyClaim(AcapModel):
    id: str
    clause_ref: str
    action: str
    asset: str
    rule_type: RuleType
    constraint: Constraint | None = None
    since_version: str
    category: str | None = None
    dimension: str | None = None


class PolicyDocument(AcapModel):
    version: str
    hash: str = ""
    effective_date: str
    supersedes: str | None = None
    claims: tuple[PolicyClaim, ...] = ()
    publisher: str
    natural_language_uri: str

    def claim(self, claim_id: str) -> PolicyClaim | None:
        for c in self.claims:
            if c.id == claim_id:
                return c
        return None

    @property
    def claim_ids(self) -> list[str]:
        return [c.id for c in self.claims]


class ParsedClaim(AcapModel):
    claim_id: str
    understood: bool
    disputed: bool
    dispute_reason: str | None = None


class ChainAnchor(AcapModel):
    """Reserved for external ledger anchoring. Never attached to records by this package."""
    anchor_uri: str
    anchor_hash: str


class ConsentRecord(AcapModel):
    id: str
    prev_id: str | None = None
    caller: str
    callee: str
    policy_version: str
    policy_hash: str
    parsed_claims: tuple[ParsedClaim, ...]
    decision: ConsentDecision
    timestamp: str
    valid_until: str
    signature: str = ""
    caller_capability_hash: str
    reconsent_trigger: ReconsentTrigger | None = None

    @property
    def validity_sentinel(self) -> ValiditySentinel | None:
        try:
            return ValiditySentinel(self.valid_until)
        except ValueError:
            return None


class AdherenceEvent(AcapModel):
    id: str
    prev_id: str | None = None
    consent_record_id: str
    action: str
    claim_id: str
    clause_ref: str
    decision: AdherenceDecision
    reasoning: str
    timestamp: str
    context: dict[str, Scalar] = {}
    signature: str = ""


class CapabilityManifest(AcapModel):
    model_identifier: str
    tool_manifest: tuple[str, ...] = ()
    reasoning_configuration: dict[str, Scalar] = {}
    caller_capability_hash: str = ""


SignedRecord = ConsentRecord | AdherenceEvent
TRecord = TypeVar("TRecord", ConsentRecord, AdherenceEvent)


class Violation(NamedTuple):
    code: str
    position: int | str | None
    detail: str

    def to_dict(self) -> dict[str, Any]:
        return {"code": self.code, "position": self.position, "detail": self.detail}


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok

    def add(self, code: str, position: int | str | None, detail: str) -> None:
        self.violations.append(Violation(code, position, detail))

    def extend(self, other: ValidationReport) -> None:
        self.violations.extend(other.violations)

    def codes(self) -> list[str]:
        return [v.code for v in self.violations]

    def at(self, position: int | str | None) -> list[Violation]:
        return [v for v in self.violations if v.position == position]

    def to_dict(self) -> dict[str, Any]:
        return {"ok": self.ok, "violations": [v.to_dict() for v in self.violations]}


def compute_policy_hash(doc: PolicyDocument) -> str:
    return shared.content_hash(doc.model_copy(update={"hash": ""}))


def compute_capability_hash(manifest: CapabilityManifest) -> str:
    return shared.content_hash(manifest.model_copy(update={"caller_capability_hash": ""}))


def seal_policy(doc: PolicyDocument) -> PolicyDocument:
    """Returns a copy of the document carrying its computed hash."""
    return doc.model_copy(update={"hash": compute_policy_hash(doc)})


def seal_manifest(manifest: CapabilityManifest) -> CapabilityManifest:
    return manifest.model_copy(update={"caller_capability_hash": compute_capability_hash(manifest)})


def with_signature(record: TRecord, signature: str) -> TRecord:
    return record.model_copy(update={"signature": signature})


def _check_semver(report: ValidationReport, value: str | None, position: int | str | None, what: str) -> bool:
    if value is None:
        return False
    try:
        shared.parse_semver(value)
        return True
    except ValueError:
        report.add("bad_semver", position, f"{what} '{value}' is not a semantic version.")
        return False


def _check_timestamp(report: ValidationReport, value: str, position: int | str | None, what: str) -> bool:
    try:
        shared.parse_timestamp(value)
        return True
    except ValueError:
        report.add("bad_timestamp", position, f"{what} '{value}' is not an ISO 8601 UTC timestamp.")
        return False


def validate_document(doc: PolicyDocument) -> ValidationReport:
    """Checks a policy document's structural invariants.

    Reports duplicate claim ids, a stored hash that disagrees with the computed one, semver
    ordering problems and unsupported enum values. Problems are returned as data; this function
    never raises for an invalid document.
    """
    report = ValidationReport()
    version_ok = _check_semver(report, doc.version, None, "Document version")
    _check_timestamp(report, doc.effective_date, None, "effective_date")

    if doc.supersedes is not None and _check_semver(report, doc.supersedes, None, "supersedes") and version_ok:
        if shared.compare_semver(doc.supersedes, doc.version) >= 0:
            report.add(
                "semver_order", None,
                f"supersedes '{doc.supersedes}' must be lower than version '{doc.version}'.")

    first_seen: dict[str, int] = {}
    for i, claim in enumerate(doc.claims):
        if not claim.id:
            report.add("empty_claim_id", i, "Claim ids must be non-empty.")
        elif claim.id in first_seen:
            report.add(
                "duplicate_claim_id", i,
                f"Claim id '{claim.id}' appears at positions {first_seen[claim.id]} and {i}.")
        else:
            first_seen[claim.id] = i

        if _check_semver(report, claim.since_version, i, f"Claim '{claim.id}' since_version") and version_ok:
            if shared.compare_semver(claim.since_version, doc.version) > 0:
                report.add(
                    "semver_order", i,
                    f"Claim '{claim.id}' since_version '{claim.since_version}' is newer than "
                    f"document version '{doc.version}'.")

        if claim.constraint is not None:
            _validate_constraint(report, claim, i)

    computed = compute_policy_hash(doc)
    if doc.hash != computed:
        report.add("hash_mismatch", None, f"Stored hash '{doc.hash}' does not match computed hash '{computed}'.")
    return report


def _validate_constraint(report: ValidationReport, claim: PolicyClaim, position: int) -> None:
    c = claim.constraint
    assert c is not None
    op = c.supported_operator
    if op is None:
        report.add("bad_enum", position, f"Claim '{claim.id}' uses unsupported operator '{c.operator}'.")
        return
    if not c.left_operand:
        report.add("bad_constraint", position, f"Claim '{claim.id}' constraint has an empty left_operand.")
    if op.is_membership and not isinstance(c.right_operand, list):
        report.add("bad_constraint", position, f"Claim '{claim.id}' operator '{op.value}' requires a list operand.")
    elif not op.is_membership and isinstance(c.right_operand, list):
        report.add("bad_constraint", position, f"Claim '{claim.id}' operator '{op.value}' requires a scalar operand.")
    elif op.is_ordering and not _is_number(c.right_operand):
        report.add("bad_constraint", position, f"Claim '{claim.id}' operator '{op.value}' requires a numeric operand.")


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def validate_document_json(raw: Mapping[str, Any] | str | bytes) -> tuple[PolicyDocument | None, ValidationReport]:
    """Parses and validates a raw document, converting schema errors (bad enums, missing fields) into violations."""
    report = ValidationReport()
    try:
        if isinstance(raw, (str, bytes)):
            doc = PolicyDocument.model_validate_json(raw)
        else:
            doc = PolicyDocument.model_validate(raw)
    except ValidationError as ex:
        for err in ex.errors():
            loc = ".".join(str(p) for p in err["loc"])
            code = "bad_enum" if err["type"] == "enum" else "schema"
            report.add(code, loc or None, err["msg"])
        return None, report
    report.extend(validate_document(doc))
    return doc, report


def validate_consent_record(record: ConsentRecord, doc: PolicyDocument | None = None,
                            position: int | str | None = None) -> ValidationReport:
    """Checks record-local invariants, plus claim completeness when the referenced document is given."""
    report = ValidationReport()
    _check_timestamp(report, record.timestamp, position, "timestamp")
    _check_semver(report, record.policy_version, position, "policy_version")
    if record.validity_sentinel is None:
        _check_timestamp(report, record.valid_until, position, "valid_until")

    if (record.prev_id is None) != (record.reconsent_trigger is None):
        report.add(
            "trigger_mismatch", position,
            "reconsent_trigger must be set exactly when prev_id is set.")

    seen: set[str] = set()
    for pc in record.parsed_claims:
        if pc.claim_id in seen:
            report.add("duplicate_parsed_claim", position, f"Claim '{pc.claim_id}' is parsed more than once.")
        seen.add(pc.claim_id)
        if pc.disputed and not pc.dispute_reason:
            report.add("missing_dispute_reason", position, f"Disputed claim '{pc.claim_id}' has no dispute_reason.")

    # disputed and not-understood claims both block
    blocked = sum(1 for pc in record.parsed_claims if pc.disputed or not pc.understood)
    clear = len(record.parsed_claims) - blocked
    if record.decision == ConsentDecision.ACCEPTED and blocked:
        report.add("incoherent_decision", position, f"Accepted record blocks {blocked} claim(s).")
    elif record.decision == ConsentDecision.CONDITIONAL and (blocked == 0 or clear == 0):
        report.add(
            "incoherent_decision", position,
            "Conditional record must block at least one claim and leave at least one clear.")

    if doc is not None:
        expected = set(doc.claim_ids)
        missing = [cid for cid in doc.claim_ids if cid not in seen]
        extra = sorted(seen - expected)
        if missing:
            report.add(
                "incomplete_parsed_claims", position,
                f"No ParsedClaim for claim(s): {', '.join(missing)}.")
        if extra:
            report.add(
                "unexpected_parsed_claims", position,
                f"ParsedClaim(s) for claim(s) not in policy v{doc.version}: {', '.join(extra)}.")
        if record.policy_version != doc.version:
            report.add(
                "policy_version_mismatch", position,
                f"Record cites policy v{record.policy_version} but its hash resolves to v{doc.version}.")
    return report


def validate_adherence_event(event: AdherenceEvent, position: int | str | None = None) -> ValidationReport:
    report = ValidationReport()
    if not event.reasoning or not event.reasoning.strip():
        report.add("missing_reasoning", position, f"Event '{event.id}' has empty reasoning.")
    _check_timestamp(report, event.timestamp, position, "timestamp")
    for key in event.context:
        if not key:
            report.add("bad_context", position, f"Event '{event.id}' context has an empty key.")
    return report


def json_schemas() -> dict[str, dict[str, Any]]:
    """JSON schemas of the wire records, as published under docs/schemas."""
    return {
        "policy-document": PolicyDocument.model_json_schema(),
        "consent-record": ConsentRecord.model_json_schema(),
        "adherence-event": AdherenceEvent.model_json_schema(),
        "capability-manifest": CapabilityManifest.model_json_schema(),
    }
