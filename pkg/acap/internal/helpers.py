# Copyright (c) ACAP contributors.
# Licensed under the MIT License.

import uuid
from typing import Iterable, Mapping

import acap.internal.shared as shared
from acap.model import (AdherenceDecision, AdherenceEvent, ConsentDecision,
                        ConsentRecord, ParsedClaim, ReconsentTrigger, Scalar,
                        ValiditySentinel)


def new_id() -> str:
    return str(uuid.uuid4())


def new_parsed_claim(claim_id: str, *, understood: bool = True, dispute_reason: str | None = None) -> ParsedClaim:
    return ParsedClaim(
        claim_id=claim_id,
        understood=understood,
        disputed=dispute_reason is not None,
        dispute_reason=dispute_reason)


def new_consent_record(
        *,
        caller: str,
        callee: str,
        policy_version: str,
        policy_hash: str,
        parsed_claims: Iterable[ParsedClaim],
        decision: ConsentDecision,
        caller_capability_hash: str,
        prev_id: str | None = None,
        reconsent_trigger: ReconsentTrigger | None = None,
        valid_until: str | ValiditySentinel = ValiditySentinel.ON_ANY_CHANGE,
        timestamp: str | None = None,
        record_id: str | None = None) -> ConsentRecord:
    return ConsentRecord(
        id=record_id or new_id(),
        prev_id=prev_id,
        caller=caller,
        callee=callee,
        policy_version=policy_version,
        policy_hash=policy_hash,
        parsed_claims=tuple(parsed_claims),
        decision=decision,
        timestamp=timestamp or shared.utc_now(),
        valid_until=valid_until.value if isinstance(valid_until, ValiditySentinel) else valid_until,
        signature="",
        caller_capability_hash=caller_capability_hash,
        reconsent_trigger=reconsent_trigger)


def new_adherence_event(
        *,
        consent_record_id: str,
        action: str,
        claim_id: str,
        clause_ref: str,
        decision: AdherenceDecision,
        reasoning: str,
        context: Mapping[str, Scalar] | None = None,
        prev_id: str | None = None,
        timestamp: str | None = None,
        event_id: str | None = None) -> AdherenceEvent:
    return AdherenceEvent(
        id=event_id or new_id(),
        prev_id=prev_id,
        consent_record_id=consent_record_id,
        action=action,
        claim_id=claim_id,
        clause_ref=clause_ref,
        decision=decision,
        reasoning=reasoning,
        timestamp=timestamp or shared.utc_now(),
        context=dict(context or {}),
        signature="")


def derive_consent_decision(parsed_claims: Iterable[ParsedClaim]) -> ConsentDecision:
    """accepted when no claim is blocked, rejected when every claim is, conditional otherwise.

    A claim is blocked when it is disputed or not understood.
    """
    parsed = list(parsed_claims)
    blocked = sum(1 for pc in parsed if pc.disputed or not pc.understood)
    if blocked == 0:
        return ConsentDecision.ACCEPTED
    if blocked == len(parsed):
        return ConsentDecision.REJECTED
    return ConsentDecision.CONDITIONAL


def is_empty(v: str | None) -> bool:
    return v is None or v == ""
