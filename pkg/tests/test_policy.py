# Copyright (c) ACAP contributors.
# Licensed under the MIT License.

import pytest

import acap.internal.helpers as helpers
from acap.demo import (DENIED_CONTEXT, PERMITTED_CONTEXT, demo_intent,
                       demo_policy)
from acap.model import (AdherenceDecision, Constraint, PolicyClaim,
                        PolicyDocument, RuleType, seal_policy)
from acap.policy import (NO_GOVERNING_CLAIMS, ActionContext, CallerIntent,
                         ConstraintOutcome, IntentError, PolicyVersionError,
                         RuleBasedClaimParser, aggregate_decisions,
                         diff_policies, evaluate_action, evaluate_claim,
                         evaluate_constraint, intent_digest, parse_claims,
                         render_reasoning)


def _claim(rule_type: RuleType, constraint: Constraint | None = None, claim_id: str = "claim-x") -> PolicyClaim:
    return PolicyClaim(id=claim_id, clause_ref="§9.9", action="odrl:use", asset="dataset",
                       rule_type=rule_type, constraint=constraint, since_version="1.0.0")


def _c(left: str, op: str, right) -> Constraint:
    return Constraint(left_operand=left, operator=op, right_operand=right)


def test_parse_demo_policy_with_compatible_intent():
    parsed = parse_claims(demo_policy(), demo_intent())
    assert [p.claim_id for p in parsed] == demo_policy().claim_ids
    assert all(p.understood and not p.disputed for p in parsed)
    assert RuleBasedClaimParser().parse(demo_policy(), demo_intent()) == parsed


def test_parse_disputes_prohibited_declared_purpose():
    intent = CallerIntent("profile customers", declared_purposes=("statistical_analysis", "behavioural_profiling"))
    parsed = {p.claim_id: p for p in parse_claims(demo_policy(), intent)}
    aggregation = parsed["claim-aggregation-prohibition"]
    assert aggregation.disputed
    assert "behavioural_profiling" in aggregation.dispute_reason
    assert "§3.4" in aggregation.dispute_reason
    assert not parsed["claim-data-retention"].disputed


def test_parse_disputes_prohibited_declared_context():
    intent = CallerIntent("keep data", declared_purposes=("statistical_analysis",),
                          declared_context={"retention_days": 90})
    parsed = {p.claim_id: p for p in parse_claims(demo_policy(), intent)}
    assert parsed["claim-data-retention"].disputed
    assert "retention_days = 90" in parsed["claim-data-retention"].dispute_reason


def test_parse_marks_malformed_constraints_not_understood():
    doc = seal_policy(PolicyDocument(
        version="1.0.0", effective_date="2026-01-01T00:00:00Z", publisher="p", natural_language_uri="u",
        claims=(_claim(RuleType.PROHIBITION, _c("region", "matches", "eu"), "a"),
                _claim(RuleType.PROHIBITION, _c("region", "in", "eu"), "b"),
                _claim(RuleType.PROHIBITION, _c("size", "gt", "big"), "c"),
                _claim(RuleType.PERMISSION, None, "d"))))
    parsed = parse_claims(doc, demo_intent())
    assert [p.understood for p in parsed] == [False, False, False, True]
    assert not any(p.disputed for p in parsed)


def test_parse_requires_purposes_for_purpose_constraints():
    with pytest.raises(IntentError):
        parse_claims(demo_policy(), CallerIntent("no purposes"))

    permission_only = seal_policy(PolicyDocument(
        version="1.0.0", effective_date="2026-01-01T00:00:00Z", publisher="p", natural_language_uri="u",
        claims=(_claim(RuleType.PERMISSION, _c("purpose", "eq", "research"), "a"),
                _claim(RuleType.OBLIGATION, _c("region", "eq", "eu"), "b"))))
    with pytest.raises(IntentError):
        parse_claims(permission_only, CallerIntent("no purposes"))
    assert len(parse_claims(permission_only, CallerIntent("research", ("research",)))) == 2


def test_intent_digest_is_order_sensitive_only_where_it_matters():
    a = CallerIntent("x", ("p",), {"k": 1, "j": 2})
    b = CallerIntent("x", ["p"], {"j": 2, "k": 1})
    assert intent_digest(a) == intent_digest(b)
    assert intent_digest(a) != intent_digest(CallerIntent("y", ("p",), {"k": 1, "j": 2}))


@pytest.mark.parametrize("constraint, context, expected", [
    (_c("purpose", "eq", "a"), {"purpose": "a"}, ConstraintOutcome.SATISFIED),
    (_c("purpose", "eq", "a"), {"purpose": "b"}, ConstraintOutcome.UNSATISFIED),
    (_c("purpose", "neq", "a"), {"purpose": "b"}, ConstraintOutcome.SATISFIED),
    (_c("purpose", "eq", "a"), {}, ConstraintOutcome.INDETERMINATE),
    (_c("region", "in", ["eu", "uk"]), {"region": "uk"}, ConstraintOutcome.SATISFIED),
    (_c("region", "not_in", ["eu", "uk"]), {"region": "uk"}, ConstraintOutcome.UNSATISFIED),
    (_c("region", "in", "eu"), {"region": "eu"}, ConstraintOutcome.INDETERMINATE),
    (_c("n", "lt", 5), {"n": 4}, ConstraintOutcome.SATISFIED),
    (_c("n", "lteq", 5), {"n": 5}, ConstraintOutcome.SATISFIED),
    (_c("n", "gt", 5), {"n": 5}, ConstraintOutcome.UNSATISFIED),
    (_c("n", "gteq", 5.5), {"n": 6}, ConstraintOutcome.SATISFIED),
    (_c("n", "gt", 5), {"n": "7"}, ConstraintOutcome.INDETERMINATE),
    (_c("n", "gt", 5), {"n": True}, ConstraintOutcome.INDETERMINATE),
    (_c("flag", "eq", 1), {"flag": True}, ConstraintOutcome.UNSATISFIED),
    (_c("flag", "eq", None), {"flag": None}, ConstraintOutcome.SATISFIED),
    (_c("n", "approx", 5), {"n": 5}, ConstraintOutcome.INDETERMINATE),
])
def test_evaluate_constraint(constraint, context, expected):
    assert evaluate_constraint(constraint, ActionContext(context)) == expected


def test_action_context_rejects_empty_keys():
    with pytest.raises(ValueError):
        ActionContext({"": 1})
    ctx = ActionContext.of({"a": 1}, b=2)
    assert ctx.to_dict() == {"a": 1, "b": 2}
    assert ActionContext.of(ctx) is ctx


@pytest.mark.parametrize("rule_type, outcome_context, expected", [
    (RuleType.PROHIBITION, {"purpose": "x"}, AdherenceDecision.DENY),
    (RuleType.PROHIBITION, {"purpose": "y"}, AdherenceDecision.PERMIT),
    (RuleType.PROHIBITION, {}, AdherenceDecision.ESCALATE),
    (RuleType.PERMISSION, {"purpose": "x"}, AdherenceDecision.PERMIT),
    (RuleType.PERMISSION, {"purpose": "y"}, AdherenceDecision.DENY),
    (RuleType.PERMISSION, {}, AdherenceDecision.ESCALATE),
])
def test_claim_decision_table(rule_type, outcome_context, expected):
    claim = _claim(rule_type, _c("purpose", "eq", "x"))
    evaluation = evaluate_claim(claim, helpers.new_parsed_claim(claim.id), ActionContext(outcome_context), "1.0.0")
    assert evaluation.decision == expected
    assert evaluation.claim_id == "claim-x"
    assert evaluation.clause_ref == "§9.9"


def test_obligations_permit_only_when_fulfilled():
    claim = _claim(RuleType.OBLIGATION)
    parsed = helpers.new_parsed_claim(claim.id)
    assert evaluate_claim(claim, parsed, ActionContext(), "1.0.0").decision == AdherenceDecision.ESCALATE
    fulfilled = ActionContext({"obligation_fulfilled:claim-x": True})
    assert evaluate_claim(claim, parsed, fulfilled, "1.0.0").decision == AdherenceDecision.PERMIT
    truthy = ActionContext({"obligation_fulfilled:claim-x": 1})
    assert evaluate_claim(claim, parsed, truthy, "1.0.0").decision == AdherenceDecision.ESCALATE


def test_disputed_and_not_understood_claims_deny():
    claim = _claim(RuleType.PERMISSION)
    disputed = evaluate_claim(claim, helpers.new_parsed_claim(claim.id, dispute_reason="conflicts"),
                              ActionContext(), "1.0.0")
    assert disputed.decision == AdherenceDecision.DENY
    assert "conflicts" in disputed.reasoning
    unclear = evaluate_claim(claim, helpers.new_parsed_claim(claim.id, understood=False), ActionContext(), "1.0.0")
    assert unclear.decision == AdherenceDecision.DENY

    with pytest.raises(ValueError):
        evaluate_claim(claim, helpers.new_parsed_claim("other"), ActionContext(), "1.0.0")


def test_reasoning_cites_clause_and_constraint():
    doc = demo_policy()
    claim = doc.claim("claim-aggregation-prohibition")
    evaluation = evaluate_claim(claim, helpers.new_parsed_claim(claim.id), ActionContext(DENIED_CONTEXT),
                                doc.version, action="analyse_dataset")
    assert evaluation.reasoning == (
        "Action 'analyse_dataset' maps to odrl:aggregate on pii:session_data. "
        "Policy v2.1.0 §3.4 (claim-aggregation-prohibition) prohibits this where "
        "purpose = behavioural_profiling; context has purpose = behavioural_profiling, "
        "constraint satisfied. Denying.")
    rendered = render_reasoning(claim, "2.1.0", AdherenceDecision.PERMIT, "ok")
    assert rendered == "Policy v2.1.0 §3.4 (claim-aggregation-prohibition) prohibits this where " \
        "purpose = behavioural_profiling; ok. Permitting."


def test_aggregate_precedence():
    P, D, E = AdherenceDecision.PERMIT, AdherenceDecision.DENY, AdherenceDecision.ESCALATE
    assert aggregate_decisions([P, E, D]) == D
    assert aggregate_decisions([P, E]) == E
    assert aggregate_decisions([P, P]) == P
    assert aggregate_decisions([]) == P


def _governing(doc: PolicyDocument, *claim_ids: str):
    return [(doc.claim(cid), helpers.new_parsed_claim(cid)) for cid in claim_ids]


def test_evaluate_action_picks_decisive_claim():
    doc = demo_policy()
    governing = _governing(doc, "claim-data-retention", "claim-aggregation-prohibition")

    denied = evaluate_action("analyse_dataset", governing, ActionContext(DENIED_CONTEXT), doc.version)
    assert denied.decision == AdherenceDecision.DENY
    assert denied.decisive.claim_id == "claim-aggregation-prohibition"
    assert denied.reasoning == denied.decisive.reasoning

    permitted = evaluate_action("analyse_dataset", governing, ActionContext(PERMITTED_CONTEXT), doc.version)
    assert permitted.decision == AdherenceDecision.PERMIT
    assert permitted.decisive.claim_id == "claim-data-retention"
    assert permitted.reasoning == " ".join(e.reasoning for e in permitted.evaluations)

    escalated = evaluate_action("analyse_dataset", governing, ActionContext({"retention_days": 7}), doc.version)
    assert escalated.decision == AdherenceDecision.ESCALATE
    assert escalated.decisive.claim_id == "claim-aggregation-prohibition"


def test_ungoverned_action_permits():
    evaluation = evaluate_action("ping", [], ActionContext(), "2.1.0")
    assert evaluation.decision == AdherenceDecision.PERMIT
    assert evaluation.decisive.claim_id == NO_GOVERNING_CLAIMS
    assert "not governed" in evaluation.reasoning


def _bumped(doc: PolicyDocument) -> PolicyDocument:
    added = _claim(RuleType.PROHIBITION, _c("recipient", "eq", "broker"), "claim-broker")
    added = added.model_copy(update={"since_version": "2.2.0"})
    changed = doc.claims[0].model_copy(update={"since_version": "2.2.0"})
    return seal_policy(doc.model_copy(update={
        "version": "2.2.0", "supersedes": "2.1.0",
        "claims": (changed, doc.claims[1], added)}))


def test_diff_policies_partitions_claim_ids():
    old = demo_policy()
    diff = diff_policies(old, _bumped(old))
    assert diff.added == ["claim-data-retention", "claim-broker"]
    assert diff.retained == ["claim-aggregation-prohibition"]
    assert diff.removed == ["claim-third-party-distribution"]
    assert not diff.is_empty
    assert diff.to_dict()["removed"] == ["claim-third-party-distribution"]


def test_diff_policies_rejects_wrong_order():
    old = demo_policy()
    with pytest.raises(PolicyVersionError):
        diff_policies(_bumped(old), old)
    with pytest.raises(PolicyVersionError):
        diff_policies(old, old)
    skipping = seal_policy(_bumped(old).model_copy(update={"supersedes": "2.0.0"}))
    with pytest.raises(PolicyVersionError):
        diff_policies(old, skipping)
