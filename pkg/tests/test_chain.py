# Copyright (c) ACAP contributors.
# Licensed under the MIT License.

from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from enum import Enum

import pytest

import acap.internal.helpers as helpers
from acap.chain import (AdherenceTrail, AuditFormatError, ChainKey,
                        ChainLinkError, ChainStore, ConsentChain,
                        ConsentStatus, DuplicateRecordError,
                        RecordValidationError, StaleCause,
                        UnanchoredEventError, active_consent, append_adherence,
                        append_consent, blocked_claims, detect_divergence,
                        export_audit, import_audit, resolve_consent,
                        validate_adherence_trail, validate_audit,
                        validate_consent_chain)
from acap.demo import demo_policy
from acap.model import (AdherenceDecision, AdherenceEvent, ConsentDecision,
                        ConsentRecord, ReconsentTrigger, seal_policy)
from acap.signing import generate_signing_key, sign

CALLER = "urn:test:caller"
CAP_HASH = "sha256:" + "a" * 64
KEY = generate_signing_key()


def _record(prev=None, trigger=None, doc=None, decision=ConsentDecision.ACCEPTED, parsed=None,
            timestamp=None, **kwargs):
    doc = doc or demo_policy()
    return helpers.new_consent_record(
        caller=CALLER, callee=doc.publisher, policy_version=doc.version, policy_hash=doc.hash,
        parsed_claims=parsed if parsed is not None else [helpers.new_parsed_claim(c.id) for c in doc.claims],
        decision=decision, caller_capability_hash=kwargs.pop("cap_hash", CAP_HASH),
        prev_id=prev.id if prev else None, reconsent_trigger=trigger, timestamp=timestamp, **kwargs)


def _event(record, prev=None, decision=AdherenceDecision.PERMIT, claim_id="claim-data-retention", **kwargs):
    return helpers.new_adherence_event(
        consent_record_id=record.id, action="analyse_dataset", claim_id=claim_id, clause_ref="§2.1",
        decision=decision, reasoning=kwargs.pop("reasoning", "Permitting."),
        context={"purpose": "statistical_analysis"}, prev_id=prev.id if prev else None, **kwargs)


def _chain(*records):
    chain = ConsentChain(ChainKey(CALLER, demo_policy().publisher))
    for r in records:
        chain = append_consent(chain, r)
    return chain


def _bumped_policy():
    doc = demo_policy()
    return seal_policy(doc.model_copy(update={"version": "2.2.0", "supersedes": "2.1.0"}))


def test_append_consent_links_and_leaves_input_untouched():
    first = _record()
    second = _record(first, ReconsentTrigger.PRINCIPAL_CHANGE)
    empty = ConsentChain(ChainKey(CALLER, demo_policy().publisher))
    one = append_consent(empty, first, demo_policy())
    two = append_consent(one, second)
    assert len(empty) == 0 and len(one) == 1 and len(two) == 2
    assert two.tail is second
    assert two.find(first.id) is first


def test_append_consent_refuses_bad_links():
    first = _record()
    chain = _chain(first)
    with pytest.raises(ChainLinkError):
        append_consent(chain, _record())
    with pytest.raises(DuplicateRecordError):
        append_consent(chain, first)
    with pytest.raises(ChainLinkError):
        append_consent(chain, _record(first, ReconsentTrigger.PRINCIPAL_CHANGE).model_copy(
            update={"caller": "someone-else"}))
    incomplete = _record(first, ReconsentTrigger.PRINCIPAL_CHANGE, parsed=[])
    with pytest.raises(RecordValidationError) as info:
        append_consent(chain, incomplete, demo_policy())
    assert "incomplete_parsed_claims" in info.value.report.codes()


def test_append_adherence_links_events():
    record = _record()
    e1 = _event(record)
    e2 = _event(record, e1, AdherenceDecision.DENY, reasoning="Denying.")
    trail = append_adherence(append_adherence(AdherenceTrail(record.id), e1), e2)
    assert [e.id for e in trail.events] == [e1.id, e2.id]

    with pytest.raises(ChainLinkError):
        append_adherence(trail, _event(record, e1))
    with pytest.raises(ChainLinkError):
        append_adherence(AdherenceTrail("other"), e1)
    with pytest.raises(RecordValidationError):
        append_adherence(trail, _event(record, e2, reasoning=""))


def test_validate_consent_chain_reports_breaks():
    first = _record(timestamp="2026-03-01T00:00:00Z")
    second = _record(first, ReconsentTrigger.PRINCIPAL_CHANGE, timestamp="2026-03-02T00:00:00Z")
    assert validate_consent_chain([first, second], [demo_policy()]).ok

    report = validate_consent_chain([first, second.model_copy(update={"prev_id": "nowhere"})])
    assert [(v.code, v.position) for v in report.violations] == [("broken_link", 1)]

    report = validate_consent_chain([first, first])
    assert "duplicate_id" in report.codes()

    earlier = second.model_copy(update={"timestamp": "2026-02-01T00:00:00Z"})
    assert validate_consent_chain([first, earlier]).codes() == ["timestamp_regression"]

    assert validate_consent_chain([first], [_bumped_policy()]).codes() == ["unknown_policy"]


def test_validate_consent_chain_checks_signatures():
    first = sign(_record(), KEY)
    assert validate_consent_chain([first], verification_keys=[KEY]).ok
    forged = first.model_copy(update={"decision": ConsentDecision.REJECTED,
                                      "parsed_claims": tuple(p.model_copy(update={"understood": False})
                                                             for p in first.parsed_claims)})
    assert validate_consent_chain([forged], verification_keys=[KEY]).codes() == ["bad_signature"]
    # unsigned records are not checked
    assert validate_consent_chain([_record()], verification_keys=[KEY]).ok


def test_validate_adherence_trail():
    disputed = [helpers.new_parsed_claim("claim-data-retention", dispute_reason="keeps data for 90 days")] + \
        [helpers.new_parsed_claim(c.id) for c in demo_policy().claims[1:]]
    record = _record(decision=ConsentDecision.CONDITIONAL, parsed=disputed)
    chain = _chain(record)

    e1 = _event(record, decision=AdherenceDecision.DENY, reasoning="Denying.")
    assert validate_adherence_trail([e1], chain).ok

    e2 = _event(record, e1)
    assert validate_adherence_trail([e1, e2], chain).codes() == ["permit_on_disputed"]

    stray = _event(_record())
    report = validate_adherence_trail(AdherenceTrail(record.id, (stray,)), chain)
    assert set(report.codes()) == {"unanchored_event", "foreign_event"}


def test_resolve_consent_statuses():
    doc = demo_policy()
    assert resolve_consent(_chain(), doc, CAP_HASH).status == ConsentStatus.MISSING

    record = _record()
    chain = _chain(record)
    assert resolve_consent(chain, doc, CAP_HASH) == (record, ConsentStatus.ACTIVE, None)
    assert active_consent(chain, doc, CAP_HASH) is record

    stale = resolve_consent(chain, _bumped_policy(), "sha256:" + "b" * 64)
    assert stale.cause == StaleCause.POLICY_BUMP
    assert resolve_consent(chain, doc, "sha256:" + "b" * 64).cause == StaleCause.CAPABILITY_CHANGE

    version_only = _chain(_record(valid_until="on_version_bump"))
    assert resolve_consent(version_only, doc, "sha256:" + "b" * 64).status == ConsentStatus.ACTIVE

    rejected = _chain(_record(decision=ConsentDecision.REJECTED,
                              parsed=[helpers.new_parsed_claim(c.id, understood=False) for c in doc.claims]))
    assert resolve_consent(rejected, doc, CAP_HASH).status == ConsentStatus.REJECTED
    assert active_consent(rejected, doc, CAP_HASH) is None


def test_resolve_consent_timestamp_expiry():
    doc = demo_policy()
    chain = _chain(_record(valid_until="2026-06-01T00:00:00Z"))
    before = datetime(2026, 5, 1, tzinfo=timezone.utc)
    after = datetime(2026, 7, 1, tzinfo=timezone.utc)
    assert resolve_consent(chain, doc, CAP_HASH, before).status == ConsentStatus.ACTIVE
    assert resolve_consent(chain, doc, CAP_HASH, after).cause == StaleCause.EXPIRED


def test_blocked_claims():
    parsed = [helpers.new_parsed_claim("a"), helpers.new_parsed_claim("b", dispute_reason="no"),
              helpers.new_parsed_claim("c", understood=False)]
    record = _record(parsed=parsed, decision=ConsentDecision.CONDITIONAL)
    assert blocked_claims(record) == {"b", "c"}


def _audit():
    first = _record()
    second = _record(first, ReconsentTrigger.POLICY_BUMP, doc=_bumped_policy())
    e1 = _event(first)
    e2 = _event(second)
    e3 = _event(second, e2, AdherenceDecision.DENY, reasoning="Denying.")
    chain = _chain(first, second)
    trails = {second.id: [e2, e3], first.id: AdherenceTrail(first.id, (e1,))}
    return chain, trails, export_audit(chain, trails, [demo_policy(), _bumped_policy(), demo_policy()])


def test_export_audit_layout():
    chain, _, audit = _audit()
    assert audit["audit_format_version"] == "0.1"
    assert [e["record_id"] for e in audit["consent_chain"]] == [r.id for r in chain.records]
    assert audit["consent_chain"][1]["prev_record_id"] == chain.records[0].id
    assert [t["consent_record_id"] for t in audit["adherence_trails"]] == [r.id for r in chain.records]
    assert len(audit["policy_documents"]) == 2
    assert validate_audit(audit).ok


def test_import_audit_round_trip_preserves_bytes():
    chain, trails, audit = _audit()
    imported_chain, imported_trails, documents = import_audit(audit)
    assert imported_chain == chain
    assert [e.id for e in imported_trails[chain.records[1].id].events] == [e.id for e in trails[chain.records[1].id]]
    assert not detect_divergence(audit, export_audit(imported_chain, imported_trails, documents))


def test_tampered_audit_is_reported():
    _, _, audit = _audit()
    audit["adherence_trails"][1]["events"][1]["event"]["prev_id"] = "elsewhere"
    audit["adherence_trails"][1]["events"][1]["prev_event_id"] = "elsewhere"
    report = validate_audit(audit)
    assert report.codes() == ["broken_link"]
    assert report.violations[0].position.startswith("adherence_trails[")

    _, _, audit = _audit()
    audit["consent_chain"][0]["record_id"] = "mismatch"
    with pytest.raises(AuditFormatError):
        import_audit(audit)
    with pytest.raises(AuditFormatError):
        import_audit({"consent_chain": []})


def test_divergence_detects_any_change():
    _, _, audit = _audit()
    _, _, same = _audit()
    assert detect_divergence(audit, same)  # fresh ids and timestamps
    copy = import_audit(audit)
    assert not detect_divergence(audit, export_audit(copy[0], copy[1], copy[2]))
    changed = dict(audit, callee="someone")
    assert detect_divergence(audit, changed)


def test_store_appends_are_idempotent_and_refuse_conflicts():
    store = ChainStore()
    record = _record()
    store.append_consent(record, demo_policy())
    store.append_consent(record)
    assert len(store.chain(CALLER, record.callee)) == 1

    with pytest.raises(DuplicateRecordError):
        store.append_consent(record.model_copy(update={"timestamp": "2030-01-01T00:00:00Z"}))

    event = _event(record)
    store.append_adherence(event)
    store.append_adherence(event)
    assert len(store.trail(record.id)) == 1
    assert store.find_event(event.id) == event
    with pytest.raises(DuplicateRecordError):
        store.append_adherence(event.model_copy(update={"reasoning": "changed"}))
    with pytest.raises(UnanchoredEventError):
        store.append_adherence(_event(_record()))


def test_store_persists_and_reloads(tmp_path):
    store = ChainStore(tmp_path)
    first = _record()
    second = _record(first, ReconsentTrigger.CAPABILITY_CHANGE, cap_hash="sha256:" + "c" * 64)
    store.append_consent(first)
    store.append_consent(second)
    e1 = _event(second)
    store.append_adherence(e1)

    reloaded = ChainStore(tmp_path)
    assert reloaded.chain(CALLER, first.callee) == store.chain(CALLER, first.callee)
    assert reloaded.find_record(first.id) == first
    assert reloaded.trail(second.id).events == (e1,)
    assert not detect_divergence(store.export_audit(CALLER, first.callee), reloaded.export_audit(CALLER, first.callee))


def test_store_import_audit():
    chain, _, audit = _audit()
    store = ChainStore()
    imported = store.import_audit(audit)
    assert imported == chain
    assert not detect_divergence(audit, store.export_audit(CALLER, chain.key.callee,
                                                           [demo_policy(), _bumped_policy()]))


def _timed_chain(length):
    records = []
    for i in range(length):
        prev = records[-1] if records else None
        records.append(_record(prev, ReconsentTrigger.PRINCIPAL_CHANGE if prev else None,
                               timestamp=f"2026-03-0{i + 1}T00:00:00Z"))
    return records


def test_transposed_records_break_links_at_both_positions():
    r0, r1, r2, r3 = _timed_chain(4)
    report = validate_consent_chain([r0, r2, r1, r3])
    broken = {v.position for v in report.violations if v.code == "broken_link"}
    assert {1, 2} <= broken

    records = [r0, r1, r2, r3]
    for i in range(len(records) - 1):
        swapped = list(records)
        swapped[i], swapped[i + 1] = swapped[i + 1], swapped[i]
        assert not validate_consent_chain(swapped).ok, i


def test_records_must_share_the_chain_parties():
    first = _record()
    stranger = _record(first, ReconsentTrigger.PRINCIPAL_CHANGE).model_copy(update={"caller": "urn:test:other"})
    report = validate_consent_chain([first, stranger])
    assert [(v.code, v.position) for v in report.violations] == [("foreign_record", 1)]

    misfiled = ConsentChain(ChainKey(CALLER, "urn:test:elsewhere"), (first,))
    assert validate_consent_chain(misfiled).codes() == ["foreign_record"]
    assert validate_consent_chain(_chain(first)).ok


def _corrupt(item, field, donor):
    if field == "signature":
        return item.model_copy(update={"signature": donor.signature})
    value = getattr(item, field)
    if field == "reconsent_trigger":
        changed = ReconsentTrigger.POLICY_BUMP if value is None else None
    elif value is None:
        changed = "corrupted"
    elif isinstance(value, Enum):
        members = list(type(value))
        changed = members[(members.index(value) + 1) % len(members)]
    elif isinstance(value, str):
        changed = value + "0"
    elif isinstance(value, tuple):
        changed = value[:-1]
    else:
        changed = {**value, "corrupted": 1}
    return item.model_copy(update={field: changed})


def _signed_records():
    return [sign(r, KEY) for r in _timed_chain(3)]


def _signed_events(record):
    events = []
    for i in range(3):
        events.append(sign(_event(record, events[-1] if events else None,
                                  timestamp=f"2026-04-0{i + 1}T00:00:00Z"), KEY))
    return events


@pytest.mark.parametrize("field", list(ConsentRecord.model_fields))
def test_any_corrupted_consent_field_is_reported(field):
    records = _signed_records()
    assert validate_consent_chain(records, [demo_policy()], [KEY]).ok
    for i in range(len(records)):
        corrupted = list(records)
        corrupted[i] = _corrupt(records[i], field, records[(i + 1) % len(records)])
        assert not validate_consent_chain(corrupted, [demo_policy()], [KEY]).ok, (field, i)


@pytest.mark.parametrize("field", list(AdherenceEvent.model_fields))
def test_any_corrupted_adherence_field_is_reported(field):
    records = _signed_records()
    events = _signed_events(records[0])
    assert validate_adherence_trail(events, records, [KEY]).ok
    for i in range(len(events)):
        corrupted = list(events)
        corrupted[i] = _corrupt(events[i], field, events[(i + 1) % len(events)])
        assert not validate_adherence_trail(corrupted, records, [KEY]).ok, (field, i)


def test_store_serializes_concurrent_appends_per_key(tmp_path):
    store = ChainStore(tmp_path)
    callee = demo_policy().publisher
    appended = []

    def add_records(_):
        for _ in range(5):
            while True:
                tail = store.chain(CALLER, callee).tail
                record = _record(tail, ReconsentTrigger.PRINCIPAL_CHANGE if tail else None)
                try:
                    store.append_consent(record)
                except ChainLinkError:
                    continue
                appended.append(record.id)
                break

    with ThreadPoolExecutor(max_workers=8) as pool:
        list(pool.map(add_records, range(8)))

    chain = store.chain(CALLER, callee)
    assert len(chain) == len(appended) == 40
    assert sorted(r.id for r in chain.records) == sorted(appended)
    assert [r.prev_id for r in chain.records[1:]] == [r.id for r in chain.records[:-1]]
    assert validate_consent_chain(chain, [demo_policy()]).ok
    assert ChainStore(tmp_path).chain(CALLER, callee) == chain


def test_store_serializes_concurrent_adherence_appends(tmp_path):
    store = ChainStore(tmp_path)
    record = _record()
    store.append_consent(record)
    appended = []

    def add_events(_):
        for _ in range(5):
            while True:
                event = _event(record, store.trail(record.id).tail)
                try:
                    store.append_adherence(event)
                except ChainLinkError:
                    continue
                appended.append(event.id)
                break

    with ThreadPoolExecutor(max_workers=8) as pool:
        list(pool.map(add_events, range(8)))

    trail = store.trail(record.id)
    assert len(trail) == len(appended) == 40
    assert [e.prev_id for e in trail.events[1:]] == [e.id for e in trail.events[:-1]]
    assert validate_adherence_trail(trail, store.chain(CALLER, record.callee)).ok
    assert ChainStore(tmp_path).trail(record.id) == trail
