# Copyright (c) ACAP contributors.
# Licensed under the MIT License.

from __future__ import annotations

import hashlib
import logging
import os
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping, NamedTuple, Sequence

from pydantic import ValidationError

import acap.internal.shared as shared
from acap.model import (AdherenceDecision, AdherenceEvent, ConsentDecision,
                        ConsentRecord, PolicyDocument, ValidationReport,
                        ValiditySentinel, compute_policy_hash,
                        validate_adherence_event, validate_consent_record)
from acap.signing import VerificationKey, verify_with_any

AUDIT_FORMAT_VERSION = "0.1"


class ChainError(Exception):
    """Base class for errors raised when mutating consent chains and adherence trails"""
    pass


class ChainLinkError(ChainError):
    """Raised when a record's prev_id does not point at the current tail"""
    pass


class DuplicateRecordError(ChainError):
    """Raised when a record id is already present with different content"""
    pass


class UnanchoredEventError(ChainError):
    """Raised when an adherence event references a consent record that is not stored"""
    pass


class AuditFormatError(ChainError):
    """Raised when an audit document cannot be read back into chains and trails"""
    pass


class RecordValidationError(ChainError):
    """Raised when a record fails validation against its policy document"""

    def __init__(self, message: str, report: ValidationReport):
        super().__init__(message)
        self._report = report

    @property
    def report(self) -> ValidationReport:
        return self._report


class ChainKey(NamedTuple):
    caller: str
    callee: str


@dataclass(frozen=True)
class ConsentChain:
    key: ChainKey
    records: tuple[ConsentRecord, ...] = ()

    @property
    def tail(self) -> ConsentRecord | None:
        return self.records[-1] if self.records else None

    def __len__(self) -> int:
        return len(self.records)

    def find(self, record_id: str) -> ConsentRecord | None:
        for r in self.records:
            if r.id == record_id:
                return r
        return None


@dataclass(frozen=True)
class AdherenceTrail:
    key: str
    events: tuple[AdherenceEvent, ...] = ()

    @property
    def tail(self) -> AdherenceEvent | None:
        return self.events[-1] if self.events else None

    def __len__(self) -> int:
        return len(self.events)

    def find(self, event_id: str) -> AdherenceEvent | None:
        for e in self.events:
            if e.id == event_id:
                return e
        return None


class ConsentStatus(str, Enum):
    ACTIVE = "active"
    MISSING = "missing"
    REJECTED = "rejected"
    STALE = "stale"


class StaleCause(str, Enum):
    POLICY_BUMP = "policy_bump"
    CAPABILITY_CHANGE = "capability_change"
    EXPIRED = "expired"


class ConsentResolution(NamedTuple):
    record: ConsentRecord | None
    status: ConsentStatus
    cause: StaleCause | None = None


def append_consent(chain: ConsentChain, record: ConsentRecord, document: PolicyDocument | None = None) -> ConsentChain:
    """Returns the chain extended by record. The input chain is left untouched."""
    if (record.caller, record.callee) != tuple(chain.key):
        raise ChainLinkError(
            f"Record '{record.id}' belongs to ({record.caller}, {record.callee}), "
            f"not to chain ({chain.key.caller}, {chain.key.callee}).")
    if chain.find(record.id) is not None:
        raise DuplicateRecordError(f"Consent record '{record.id}' is already in the chain.")
    expected = chain.tail.id if chain.tail else None
    if record.prev_id != expected:
        raise ChainLinkError(
            f"Consent record '{record.id}' has prev_id '{record.prev_id}' but the chain tail is '{expected}'.")
    if document is not None:
        report = validate_consent_record(record, document)
        if not report.ok:
            raise RecordValidationError(
                f"Consent record '{record.id}' is invalid against policy v{document.version}: "
                f"{', '.join(report.codes())}", report)
    return ConsentChain(chain.key, chain.records + (record,))


def append_adherence(trail: AdherenceTrail, event: AdherenceEvent) -> AdherenceTrail:
    if event.consent_record_id != trail.key:
        raise ChainLinkError(
            f"Event '{event.id}' is anchored to '{event.consent_record_id}', not to trail '{trail.key}'.")
    if trail.find(event.id) is not None:
        raise DuplicateRecordError(f"Adherence event '{event.id}' is already in the trail.")
    expected = trail.tail.id if trail.tail else None
    if event.prev_id != expected:
        raise ChainLinkError(
            f"Adherence event '{event.id}' has prev_id '{event.prev_id}' but the trail tail is '{expected}'.")
    report = validate_adherence_event(event)
    if not report.ok:
        raise RecordValidationError(f"Adherence event '{event.id}' is invalid: {', '.join(report.codes())}", report)
    return AdherenceTrail(trail.key, trail.events + (event,))


def _index_documents(documents: Mapping[str, PolicyDocument] | Iterable[PolicyDocument] | None
                     ) -> dict[str, PolicyDocument] | None:
    if documents is None:
        return None
    if isinstance(documents, Mapping):
        return dict(documents)
    return {compute_policy_hash(d): d for d in documents}


def _timestamp_or_none(value: str) -> datetime | None:
    try:
        return shared.parse_timestamp(value)
    except ValueError:
        return None


def _check_links(report: ValidationReport, items: Sequence[ConsentRecord] | Sequence[AdherenceEvent], kind: str):
    seen: set[str] = set()
    last_ts: datetime | None = None
    for i, item in enumerate(items):
        if item.id in seen:
            report.add("duplicate_id", i, f"{kind} id '{item.id}' appears more than once.")
        seen.add(item.id)

        expected = items[i - 1].id if i > 0 else None
        if item.prev_id != expected:
            report.add(
                "broken_link", i,
                f"{kind} '{item.id}' has prev_id '{item.prev_id}', expected '{expected}'.")

        ts = _timestamp_or_none(item.timestamp)
        if ts is not None:
            if last_ts is not None and ts < last_ts:
                report.add("timestamp_regression", i, f"{kind} '{item.id}' is older than its predecessor.")
            last_ts = ts


def validate_consent_chain(
        records: ConsentChain | Sequence[ConsentRecord],
        documents: Mapping[str, PolicyDocument] | Iterable[PolicyDocument] | None = None,
        verification_keys: Sequence[VerificationKey] | None = None) -> ValidationReport:
    """Validates link integrity, id uniqueness, timestamp order, per-record invariants and signatures.

    When documents are supplied (keyed by policy hash, or as a list) each record's ParsedClaims
    are checked for completeness against the document its policy_hash resolves to. Signatures
    are verified when verification keys are supplied and the record is signed.
    Every record must be between the same caller and callee as the chain key, or as the first
    record when a plain sequence is given.
    """
    items = list(records.records if isinstance(records, ConsentChain) else records)
    docs = _index_documents(documents)
    report = ValidationReport()
    _check_links(report, items, "Consent record")

    if isinstance(records, ConsentChain):
        parties = tuple(records.key)
    else:
        parties = (items[0].caller, items[0].callee) if items else ("", "")
    for i, record in enumerate(items):
        doc = None
        if (record.caller, record.callee) != parties:
            report.add(
                "foreign_record", i,
                f"Consent record '{record.id}' is between ({record.caller}, {record.callee}), "
                f"not ({parties[0]}, {parties[1]}).")
        if docs is not None:
            doc = docs.get(record.policy_hash)
            if doc is None:
                report.add("unknown_policy", i, f"No policy document with hash '{record.policy_hash}'.")
        report.extend(validate_consent_record(record, doc, position=i))
        if record.signature and verification_keys is not None and not verify_with_any(record, verification_keys):
            report.add("bad_signature", i, f"Signature on consent record '{record.id}' does not verify.")
    return report


def validate_adherence_trail(
        events: AdherenceTrail | Sequence[AdherenceEvent],
        chain: ConsentChain | Sequence[ConsentRecord],
        verification_keys: Sequence[VerificationKey] | None = None) -> ValidationReport:
    """Validates one adherence trail and its anchoring into the consent chain."""
    items = list(events.events if isinstance(events, AdherenceTrail) else events)
    records = {r.id: r for r in (chain.records if isinstance(chain, ConsentChain) else chain)}
    report = ValidationReport()
    _check_links(report, items, "Adherence event")

    trail_key = events.key if isinstance(events, AdherenceTrail) else (items[0].consent_record_id if items else None)
    for i, event in enumerate(items):
        record = records.get(event.consent_record_id)
        if record is None:
            report.add(
                "unanchored_event", i,
                f"Event '{event.id}' references unknown consent record '{event.consent_record_id}'.")
        elif event.decision == AdherenceDecision.PERMIT:
            for pc in record.parsed_claims:
                if pc.claim_id == event.claim_id and (pc.disputed or not pc.understood):
                    report.add(
                        "permit_on_disputed", i,
                        f"Event '{event.id}' permits on claim '{event.claim_id}', which the consent blocks.")
        if event.consent_record_id != trail_key:
            report.add(
                "foreign_event", i,
                f"Event '{event.id}' is anchored to '{event.consent_record_id}', not to trail '{trail_key}'.")
        report.extend(validate_adherence_event(event, position=i))
        if event.signature and verification_keys is not None and not verify_with_any(event, verification_keys):
            report.add("bad_signature", i, f"Signature on adherence event '{event.id}' does not verify.")
    return report


def resolve_consent(
        chain: ConsentChain,
        current_policy: PolicyDocument,
        current_capability_hash: str,
        now: datetime | None = None) -> ConsentResolution:
    """Resolves the chain tail against the current policy and capability fingerprint."""
    record = chain.tail
    if record is None:
        return ConsentResolution(None, ConsentStatus.MISSING)
    if record.decision == ConsentDecision.REJECTED:
        return ConsentResolution(record, ConsentStatus.REJECTED)

    policy_changed = record.policy_hash != current_policy.hash or record.policy_version != current_policy.version
    capability_changed = record.caller_capability_hash != current_capability_hash
    sentinel = record.validity_sentinel

    if policy_changed:
        return ConsentResolution(record, ConsentStatus.STALE, StaleCause.POLICY_BUMP)
    if capability_changed and sentinel in (ValiditySentinel.ON_CAPABILITY_CHANGE, ValiditySentinel.ON_ANY_CHANGE):
        return ConsentResolution(record, ConsentStatus.STALE, StaleCause.CAPABILITY_CHANGE)
    if sentinel is None:
        expiry = _timestamp_or_none(record.valid_until)
        now = now or datetime.now(timezone.utc)
        if expiry is None or now > expiry:
            return ConsentResolution(record, ConsentStatus.STALE, StaleCause.EXPIRED)
    return ConsentResolution(record, ConsentStatus.ACTIVE)


def active_consent(
        chain: ConsentChain,
        current_policy: PolicyDocument,
        current_capability_hash: str,
        now: datetime | None = None) -> ConsentRecord | None:
    resolution = resolve_consent(chain, current_policy, current_capability_hash, now)
    return resolution.record if resolution.status == ConsentStatus.ACTIVE else None


def blocked_claims(record: ConsentRecord) -> set[str]:
    return {pc.claim_id for pc in record.parsed_claims if pc.disputed or not pc.understood}


def export_audit(
        chain: ConsentChain,
        trails: Mapping[str, AdherenceTrail | Sequence[AdherenceEvent]] | None = None,
        documents: Iterable[PolicyDocument] | None = None) -> dict[str, Any]:
    """Builds the audit document for one caller/callee chain and every trail anchored to it.

    Trails are emitted in chain order. Documents referenced by the chain are embedded when
    given, which makes the export self-validating.
    """
    trails = trails or {}
    consent_chain = [
        {"record_id": r.id, "prev_record_id": r.prev_id, "record": r.model_dump(mode="json")}
        for r in chain.records]

    ordered_keys = [r.id for r in chain.records if r.id in trails]
    ordered_keys += sorted(k for k in trails if chain.find(k) is None)
    adherence_trails = []
    for key in ordered_keys:
        trail = trails[key]
        events = trail.events if isinstance(trail, AdherenceTrail) else tuple(trail)
        adherence_trails.append({
            "consent_record_id": key,
            "events": [
                {"event_id": e.id, "prev_event_id": e.prev_id, "event": e.model_dump(mode="json")}
                for e in events],
        })

    referenced = {r.policy_hash for r in chain.records}
    policy_documents = []
    seen: set[str] = set()
    for doc in documents or ():
        if doc.hash in referenced and doc.hash not in seen:
            seen.add(doc.hash)
            policy_documents.append(doc.model_dump(mode="json"))

    return {
        "audit_format_version": AUDIT_FORMAT_VERSION,
        "caller": chain.key.caller,
        "callee": chain.key.callee,
        "consent_chain": consent_chain,
        "adherence_trails": adherence_trails,
        "policy_documents": policy_documents,
    }


def import_audit(doc: Mapping[str, Any]) -> tuple[ConsentChain, dict[str, AdherenceTrail], list[PolicyDocument]]:
    """Reads an audit document back into a chain, its trails and embedded policy documents.

    Envelope fields must agree with the records they wrap. Link integrity is left to the validators.
    """
    try:
        key = ChainKey(str(doc["caller"]), str(doc["callee"]))
        records = []
        for entry in doc.get("consent_chain", []):
            record = ConsentRecord.model_validate(entry["record"])
            if entry.get("record_id") != record.id or entry.get("prev_record_id") != record.prev_id:
                raise AuditFormatError(f"Envelope of consent record '{record.id}' disagrees with the record.")
            records.append(record)

        trails: dict[str, AdherenceTrail] = {}
        for block in doc.get("adherence_trails", []):
            events = []
            for entry in block.get("events", []):
                event = AdherenceEvent.model_validate(entry["event"])
                if entry.get("event_id") != event.id or entry.get("prev_event_id") != event.prev_id:
                    raise AuditFormatError(f"Envelope of adherence event '{event.id}' disagrees with the event.")
                events.append(event)
            trail_key = str(block["consent_record_id"])
            trails[trail_key] = AdherenceTrail(trail_key, tuple(events))

        documents = [PolicyDocument.model_validate(d) for d in doc.get("policy_documents", [])]
    except (KeyError, TypeError, AttributeError, ValidationError) as ex:
        raise AuditFormatError(f"Malformed audit document: {ex}") from ex
    return ConsentChain(key, tuple(records)), trails, documents


def validate_audit(
        doc: Mapping[str, Any],
        extra_documents: Iterable[PolicyDocument] = (),
        verification_keys: Sequence[VerificationKey] | None = None) -> ValidationReport:
    """Re-validates an audit export: the chain, then every trail against it."""
    chain, trails, documents = import_audit(doc)
    all_docs = list(documents) + list(extra_documents)
    report = ValidationReport()
    for v in validate_consent_chain(chain, all_docs if all_docs else None, verification_keys).violations:
        report.add(v.code, f"consent_chain[{v.position}]" if v.position is not None else "consent_chain", v.detail)
    for key, trail in trails.items():
        for v in validate_adherence_trail(trail, chain, verification_keys).violations:
            where = f"adherence_trails[{key}][{v.position}]" if v.position is not None else f"adherence_trails[{key}]"
            report.add(v.code, where, v.detail)
    return report


def audit_bytes(doc: Mapping[str, Any]) -> bytes:
    return shared.canonicalize(doc)


def detect_divergence(left: Mapping[str, Any], right: Mapping[str, Any]) -> bool:
    """True when two audit exports of the same chain differ in any byte of their canonical form."""
    return audit_bytes(left) != audit_bytes(right)


def _file_stem(value: str) -> str:
    return hashlib.sha256(value.encode("utf-8")).hexdigest()[:32]


class ChainStore:
    """Append-only store of consent chains and adherence trails.

    Each (caller, callee) chain and each trail is persisted as a JSON-lines file of canonical
    record bytes when a root directory is given; otherwise the store lives in memory. Appends
    are serialized per key; readers see immutable snapshots.
    """

    def __init__(self, root: str | os.PathLike | None = None, *,
                 log_handler: logging.Handler | None = None,
                 log_formatter: logging.Formatter | None = None):
        self._logger = shared.get_logger("store", log_handler, log_formatter)
        self._root = Path(root) if root is not None else None
        self._lock = threading.Lock()
        self._key_locks: dict[Any, threading.Lock] = {}
        self._chains: dict[ChainKey, ConsentChain] = {}
        self._trails: dict[str, AdherenceTrail] = {}
        self._record_keys: dict[str, ChainKey] = {}
        self._event_keys: dict[str, str] = {}
        if self._root is not None:
            self._load()

    @property
    def root(self) -> Path | None:
        return self._root

    def _key_lock(self, key: Any) -> threading.Lock:
        with self._lock:
            lock = self._key_locks.get(key)
            if lock is None:
                lock = self._key_locks[key] = threading.Lock()
            return lock

    def _consent_path(self, key: ChainKey) -> Path:
        assert self._root is not None
        return self._root / "consent" / f"{_file_stem(key.caller + chr(10) + key.callee)}.jsonl"

    def _trail_path(self, consent_record_id: str) -> Path:
        assert self._root is not None
        return self._root / "adherence" / f"{_file_stem(consent_record_id)}.jsonl"

    def _load(self) -> None:
        assert self._root is not None
        for path in sorted((self._root / "consent").glob("*.jsonl")):
            for line in path.read_bytes().splitlines():
                if line.strip():
                    record = ConsentRecord.model_validate_json(line)
                    key = ChainKey(record.caller, record.callee)
                    chain = self._chains.get(key, ConsentChain(key))
                    self._chains[key] = ConsentChain(key, chain.records + (record,))
                    self._record_keys[record.id] = key
        for path in sorted((self._root / "adherence").glob("*.jsonl")):
            for line in path.read_bytes().splitlines():
                if line.strip():
                    event = AdherenceEvent.model_validate_json(line)
                    trail = self._trails.get(event.consent_record_id, AdherenceTrail(event.consent_record_id))
                    self._trails[event.consent_record_id] = AdherenceTrail(trail.key, trail.events + (event,))
                    self._event_keys[event.id] = event.consent_record_id
        self._logger.debug(
            f"Loaded {len(self._chains)} consent chain(s) and {len(self._trails)} adherence trail(s) from '{self._root}'.")

    def _persist(self, path: Path, payload: bytes) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("ab") as f:
            f.write(payload + b"\n")
            f.flush()
            os.fsync(f.fileno())

    def chain(self, caller: str, callee: str) -> ConsentChain:
        key = ChainKey(caller, callee)
        return self._chains.get(key, ConsentChain(key))

    def chains(self) -> list[ConsentChain]:
        return list(self._chains.values())

    def trail(self, consent_record_id: str) -> AdherenceTrail:
        return self._trails.get(consent_record_id, AdherenceTrail(consent_record_id))

    def trails_for(self, chain: ConsentChain) -> dict[str, AdherenceTrail]:
        return {r.id: self._trails[r.id] for r in chain.records if r.id in self._trails}

    def find_record(self, record_id: str) -> ConsentRecord | None:
        key = self._record_keys.get(record_id)
        return self._chains[key].find(record_id) if key is not None else None

    def find_event(self, event_id: str) -> AdherenceEvent | None:
        trail_key = self._event_keys.get(event_id)
        return self._trails[trail_key].find(event_id) if trail_key is not None else None

    def append_consent(self, record: ConsentRecord, document: PolicyDocument | None = None) -> ConsentChain:
        """Appends a consent record to its chain. Resubmitting an identical record is a no-op."""
        key = ChainKey(record.caller, record.callee)
        with self._key_lock(key):
            existing_key = self._record_keys.get(record.id)
            if existing_key is not None:
                existing = self._chains[existing_key].find(record.id)
                if existing is not None and shared.canonicalize(existing) == shared.canonicalize(record):
                    return self._chains[existing_key]
                raise DuplicateRecordError(f"Consent record id '{record.id}' is already used by a different record.")

            chain = append_consent(self.chain(record.caller, record.callee), record, document)
            if self._root is not None:
                self._persist(self._consent_path(key), shared.canonicalize(record))
            self._chains[key] = chain
            self._record_keys[record.id] = key

        self._logger.info(
            f"Appended consent record '{record.id}' ({record.decision.value}) for caller '{record.caller}' "
            f"at chain position {len(chain) - 1}.")
        return chain

    def append_adherence(self, event: AdherenceEvent) -> AdherenceTrail:
        """Appends an adherence event to the trail of its consent record. Identical resubmissions are no-ops."""
        if self.find_record(event.consent_record_id) is None:
            raise UnanchoredEventError(
                f"Adherence event '{event.id}' references unknown consent record '{event.consent_record_id}'.")
        with self._key_lock(("trail", event.consent_record_id)):
            existing = self.find_event(event.id)
            if existing is not None:
                if shared.canonicalize(existing) == shared.canonicalize(event):
                    return self.trail(event.consent_record_id)
                raise DuplicateRecordError(f"Adherence event id '{event.id}' is already used by a different event.")

            trail = append_adherence(self.trail(event.consent_record_id), event)
            if self._root is not None:
                self._persist(self._trail_path(event.consent_record_id), shared.canonicalize(event))
            self._trails[event.consent_record_id] = trail
            self._event_keys[event.id] = event.consent_record_id

        self._logger.debug(
            f"Appended adherence event '{event.id}' ({event.decision.value}) for action '{event.action}' "
            f"on claim '{event.claim_id}'.")
        return trail

    def export_audit(self, caller: str, callee: str,
                     documents: Iterable[PolicyDocument] | None = None) -> dict[str, Any]:
        chain = self.chain(caller, callee)
        return export_audit(chain, self.trails_for(chain), documents)

    def import_audit(self, doc: Mapping[str, Any]) -> ConsentChain:
        """Replays an audit export into this store through the normal append path."""
        chain, trails, _ = import_audit(doc)
        for record in chain.records:
            self.append_consent(record)
        for record in chain.records:
            for event in trails.get(record.id, AdherenceTrail(record.id)).events:
                self.append_adherence(event)
        return self.chain(chain.key.caller, chain.key.callee)
