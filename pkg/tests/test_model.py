# Copyright (c) ACAP contributors.
# Licensed under the MIT License.

import hashlib
import json
import random
from pathlib import Path

import pytest
from pydantic import ValidationError

import acap.internal.helpers as helpers
import acap.internal.shared as shared
from acap.demo import demo_policy
from acap.model import (AdherenceEvent, CapabilityManifest, ConsentDecision,
                        Constraint, PolicyClaim, PolicyDocument,
                        ReconsentTrigger, RuleType, compute_capability_hash, compute_policy_hash,
                        json_schemas, seal_manifest, seal_policy,
                        validate_adherence_event, validate_consent_record,
                        validate_document, validate_document_json)


def _oracle_hash(doc: PolicyDocument) -> str:
    # sorted keys and compact separators equal JCS for documents without floats
    data = doc.model_dump(mode="json")
    data["hash"] = ""
    encoded = json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    return "sha256:" + hashlib.sha256(encoded).hexdigest()


def _random_document(rng: random.Random) -> PolicyDocument:
    words = ["purpose", "retention_days", "recipient", "région", "ключ", "data", "x\ty", "quote\"d"]
    claims = []
    for i in range(rng.randint(0, 12)):
        constraint = None
        if rng.random() < 0.7:
            if rng.random() < 0.5:
                constraint = Constraint(left_operand=rng.choice(words), operator="eq", right_operand=rng.choice(words))
            else:
                constraint = Constraint(left_operand="retention_days", operator="gt", right_operand=rng.randint(-5, 400))
        claims.append(PolicyClaim(
            id=f"claim-{i}-{rng.randint(0, 10**6)}",
            clause_ref=f"§{i}.{rng.randint(1, 9)}",
            action=rng.choice(["odrl:use", "odrl:aggregate", "odrl:distribute"]),
            asset=rng.choice(words),
            rule_type=rng.choice(list(RuleType)),
            constraint=constraint,
            since_version="1.0.0",
            category=rng.choice([None, "retention", "privacy"])))
    return PolicyDocument(
        version=f"{rng.randint(1, 3)}.{rng.randint(0, 9)}.{rng.randint(0, 9)}",
        hash=rng.choice(["", "sha256:" + "f" * 64]),
        effective_date="2026-02-27T00:00:00Z",
        claims=tuple(claims),
        publisher=rng.choice(words),
        natural_language_uri="https://example.invalid/terms")


def test_policy_hash_matches_independent_oracle():
    rng = random.Random(20260227)
    for _ in range(100):
        doc = _random_document(rng)
        assert compute_policy_hash(doc) == _oracle_hash(doc)
        # the stored hash never feeds into the computed one
        assert compute_policy_hash(doc) == compute_policy_hash(doc.model_copy(update={"hash": "anything"}))


def test_policy_hash_is_stable_and_key_order_independent():
    doc = demo_policy()
    assert doc.hash == compute_policy_hash(doc)
    assert shared.is_hash_string(doc.hash)

    data = doc.model_dump(mode="json")
    reordered = json.loads(json.dumps(dict(reversed(list(data.items())))))
    assert compute_policy_hash(PolicyDocument.model_validate(reordered)) == doc.hash


def test_policy_hash_depends_on_claim_order():
    doc = demo_policy()
    swapped = doc.model_copy(update={"claims": tuple(reversed(doc.claims))})
    assert compute_policy_hash(swapped) != doc.hash


def test_capability_hash_excludes_stored_hash():
    manifest = CapabilityManifest(model_identifier="m/1", tool_manifest=("a", "b"),
                                  reasoning_configuration={"temperature": 0})
    sealed = seal_manifest(manifest)
    assert sealed.caller_capability_hash == compute_capability_hash(manifest)
    assert compute_capability_hash(sealed) == sealed.caller_capability_hash

    changed = manifest.model_copy(update={"tool_manifest": ("a", "b", "c")})
    assert compute_capability_hash(changed) != sealed.caller_capability_hash


def test_canonicalize_rejects_non_finite_numbers():
    with pytest.raises(shared.CanonicalizationError):
        shared.canonicalize({"x": float("nan")})
    with pytest.raises(shared.CanonicalizationError):
        shared.canonicalize({"x": float("inf")})


def test_canonicalize_sorts_keys_and_strips_whitespace():
    assert shared.canonicalize({"b": 1, "a": [True, None, "é"]}) == '{"a":[true,null,"é"],"b":1}'.encode("utf-8")


def test_validate_demo_policy_is_clean():
    assert validate_document(demo_policy()).ok


def test_validate_document_reports_duplicates_and_hash_mismatch():
    doc = demo_policy()
    dup = doc.model_copy(update={"claims": doc.claims + (doc.claims[0],)})
    report = validate_document(dup)
    assert "duplicate_claim_id" in report.codes()
    assert "hash_mismatch" in report.codes()
    violation = next(v for v in report.violations if v.code == "duplicate_claim_id")
    assert violation.position == 3
    assert "0" in violation.detail and "3" in violation.detail


def test_validate_document_semver_rules():
    doc = demo_policy()
    newer_claim = doc.claims[0].model_copy(update={"since_version": "9.0.0"})
    report = validate_document(seal_policy(doc.model_copy(update={"claims": (newer_claim,) + doc.claims[1:]})))
    assert report.codes() == ["semver_order"]

    report = validate_document(seal_policy(doc.model_copy(update={"supersedes": "3.0.0"})))
    assert report.codes() == ["semver_order"]

    report = validate_document(seal_policy(doc.model_copy(update={"version": "v2"})))
    assert "bad_semver" in report.codes()


def test_validate_document_constraint_problems():
    doc = demo_policy()
    bad_op = doc.claims[0].model_copy(update={
        "constraint": Constraint(left_operand="purpose", operator="matches", right_operand="x")})
    bad_shape = doc.claims[1].model_copy(update={
        "constraint": Constraint(left_operand="purpose", operator="in", right_operand="x")})
    report = validate_document(seal_policy(doc.model_copy(update={"claims": (bad_op, bad_shape, doc.claims[2])})))
    assert [(v.code, v.position) for v in report.violations] == [("bad_enum", 0), ("bad_constraint", 1)]


def test_validate_document_json_reports_schema_errors():
    data = demo_policy().model_dump(mode="json")
    data["claims"][0]["rule_type"] = "suggestion"
    doc, report = validate_document_json(json.dumps(data))
    assert doc is None
    assert report.codes() == ["bad_enum"]

    del data["publisher"]
    doc, report = validate_document_json(data)
    assert doc is None
    assert "schema" in report.codes()


def _record(doc: PolicyDocument, **kwargs):
    fields = dict(
        caller="caller", callee=doc.publisher, policy_version=doc.version, policy_hash=doc.hash,
        parsed_claims=[helpers.new_parsed_claim(c.id) for c in doc.claims],
        decision=ConsentDecision.ACCEPTED, caller_capability_hash="sha256:" + "0" * 64)
    fields.update(kwargs)
    return helpers.new_consent_record(**fields)


def test_every_missing_parsed_claim_is_detected():
    doc = demo_policy()
    record = _record(doc)
    assert validate_consent_record(record, doc).ok
    for i in range(len(record.parsed_claims)):
        parsed = record.parsed_claims[:i] + record.parsed_claims[i + 1:]
        report = validate_consent_record(record.model_copy(update={"parsed_claims": parsed}), doc)
        assert report.codes() == ["incomplete_parsed_claims"]


def test_consent_record_invariants():
    doc = demo_policy()
    report = validate_consent_record(_record(doc, prev_id="earlier"), doc)
    assert "trigger_mismatch" in report.codes()

    report = validate_consent_record(_record(doc, reconsent_trigger=ReconsentTrigger.POLICY_BUMP), doc)
    assert "trigger_mismatch" in report.codes()

    disputed = [helpers.new_parsed_claim(doc.claims[0].id, dispute_reason="no")] + \
        [helpers.new_parsed_claim(c.id) for c in doc.claims[1:]]
    assert "incoherent_decision" in validate_consent_record(_record(doc, parsed_claims=disputed), doc).codes()
    assert validate_consent_record(
        _record(doc, parsed_claims=disputed, decision=ConsentDecision.CONDITIONAL), doc).ok

    no_reason = [p.model_copy(update={"dispute_reason": None}) for p in disputed]
    report = validate_consent_record(_record(doc, parsed_claims=no_reason, decision=ConsentDecision.CONDITIONAL), doc)
    assert report.codes() == ["missing_dispute_reason"]

    extra = [helpers.new_parsed_claim(c.id) for c in doc.claims] + [helpers.new_parsed_claim("claim-unknown")]
    assert validate_consent_record(_record(doc, parsed_claims=extra), doc).codes() == ["unexpected_parsed_claims"]

    assert validate_consent_record(_record(doc, valid_until="tomorrow"), doc).codes() == ["bad_timestamp"]
    assert validate_consent_record(_record(doc, valid_until="2030-01-01T00:00:00Z"), doc).ok


def test_adherence_event_needs_reasoning():
    event = helpers.new_adherence_event(
        consent_record_id="r", action="a", claim_id="c", clause_ref="§1",
        decision="deny", reasoning="   ")
    assert validate_adherence_event(event, 4).codes() == ["missing_reasoning"]
    assert validate_adherence_event(event, 4).violations[0].position == 4


def test_unknown_adherence_decision_is_a_schema_error():
    event = helpers.new_adherence_event(
        consent_record_id="r", action="a", claim_id="c", clause_ref="§1", decision="deny", reasoning="Denying.")
    raw = dict(event.model_dump(mode="json"), decision="maybe")
    with pytest.raises(ValidationError):
        AdherenceEvent.model_validate(raw)
    assert validate_adherence_event(event).ok


def test_derive_consent_decision():
    clear = helpers.new_parsed_claim("a")
    disputed = helpers.new_parsed_claim("b", dispute_reason="collides")
    unclear = helpers.new_parsed_claim("c", understood=False)
    assert helpers.derive_consent_decision([clear, clear]) == ConsentDecision.ACCEPTED
    assert helpers.derive_consent_decision([clear, disputed]) == ConsentDecision.CONDITIONAL
    assert helpers.derive_consent_decision([clear, unclear]) == ConsentDecision.CONDITIONAL
    assert helpers.derive_consent_decision([disputed, unclear]) == ConsentDecision.REJECTED


def test_semver_ordering():
    assert shared.compare_semver("2.1.0", "2.0.9") == 1
    assert shared.compare_semver("2.1.0-rc.1", "2.1.0") == -1
    assert shared.compare_semver("2.1.0+build.7", "2.1.0") == 0
    assert shared.compare_semver("1.10.0", "1.9.0") == 1
    with pytest.raises(ValueError):
        shared.parse_semver("1.0")


def test_json_schemas_cover_wire_records():
    schemas = json_schemas()
    assert set(schemas) == {"policy-document", "consent-record", "adherence-event", "capability-manifest"}
    assert "parsed_claims" in schemas["consent-record"]["properties"]


def test_published_schemas_match_models():
    docs = Path(__file__).resolve().parent.parent / "docs" / "schemas"
    for name, schema in json_schemas().items():
        published = json.loads((docs / f"{name}.json").read_text(encoding="utf-8"))
        assert published["title"] == schema["title"]
        assert set(published["properties"]) == set(schema["properties"]), name
        assert set(published["required"]) == set(schema["required"]), name
