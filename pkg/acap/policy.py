# Copyright (c) ACAP contributors.
# Licensed under the MIT License.

"""Deterministic claim parsing, constraint evaluation, per-action claim evaluation and policy diffing."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping, NamedTuple, Protocol, Sequence

import acap.internal.shared as shared
from acap.model import (AdherenceDecision, Constraint, ConstraintOperator,
                        ParsedClaim, PolicyClaim, PolicyDocument, RuleType,
                        Scalar)

PURPOSE_KEY = "purpose"
OBLIGATION_FLAG_PREFIX = "obligation_fulfilled:"
NO_GOVERNING_CLAIMS = ""

_OPERATOR_SYMBOLS = {
    ConstraintOperator.EQ: "=",
    ConstraintOperator.NEQ: "!=",
    ConstraintOperator.IN: "in",
    ConstraintOperator.NOT_IN: "not in",
    ConstraintOperator.LT: "<",
    ConstraintOperator.LTEQ: "<=",
    ConstraintOperator.GT: ">",
    ConstraintOperator.GTEQ: ">=",
}

_DECISION_VERBS = {
    AdherenceDecision.PERMIT: "Permitting.",
    AdherenceDecision.DENY: "Denying.",
    AdherenceDecision.ESCALATE: "Escalating to principal.",
}

# deny > escalate > permit
_PRECEDENCE = {
    AdherenceDecision.PERMIT: 0,
    AdherenceDecision.ESCALATE: 1,
    AdherenceDecision.DENY: 2,
}


class PolicyVersionError(ValueError):
    """Raised when two policy versions cannot be diffed in the given order"""
    pass


class IntentError(ValueError):
    """Raised when a caller intent cannot be used against a policy"""
    pass


class ConstraintOutcome(str, Enum):
    SATISFIED = "satisfied"
    UNSATISFIED = "unsatisfied"
    INDETERMINATE = "indeterminate"


@dataclass(frozen=True)
class CallerIntent:
    purpose_statement: str
    declared_purposes: tuple[str, ...] = ()
    declared_context: Mapping[str, Scalar] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "declared_purposes", tuple(self.declared_purposes))

    def to_dict(self) -> dict[str, Any]:
        return {
            "purpose_statement": self.purpose_statement,
            "declared_purposes": list(self.declared_purposes),
            "declared_context": dict(self.declared_context),
        }


def intent_digest(intent: CallerIntent) -> str:
    return hashlib.sha256(shared.canonicalize(intent.to_dict())).hexdigest()


@dataclass(frozen=True)
class ActionContext:
    entries: Mapping[str, Scalar] = field(default_factory=dict)

    def __post_init__(self):
        for key in self.entries:
            if not isinstance(key, str) or not key:
                raise ValueError("ActionContext keys must be non-empty strings.")

    @classmethod
    def of(cls, entries: ActionContext | Mapping[str, Scalar] | None = None, **kwargs: Scalar) -> ActionContext:
        if isinstance(entries, ActionContext):
            return entries
        merged = dict(entries or {})
        merged.update(kwargs)
        return cls(merged)

    def get(self, key: str, default: Any = None) -> Any:
        return self.entries.get(key, default)

    def __contains__(self, key: object) -> bool:
        return key in self.entries

    def to_dict(self) -> dict[str, Scalar]:
        return dict(self.entries)


@dataclass(frozen=True)
class ClaimEvaluation:
    decision: AdherenceDecision
    reasoning: str
    claim_id: str
    clause_ref: str
    constraint_outcome: ConstraintOutcome | None = None


class ActionEvaluation(NamedTuple):
    decision: AdherenceDecision
    evaluations: list[ClaimEvaluation]

    @property
    def decisive(self) -> ClaimEvaluation:
        """First claim evaluation whose decision equals the aggregate decision."""
        return next(e for e in self.evaluations if e.decision == self.decision)

    @property
    def reasoning(self) -> str:
        # a permit needs every claim's reasoning; a refusal cites the claim that refused
        if self.decision == AdherenceDecision.PERMIT:
            return " ".join(e.reasoning for e in self.evaluations)
        return self.decisive.reasoning


@dataclass(frozen=True)
class PolicyDiff:
    added: list[str]
    removed: list[str]
    retained: list[str]

    @property
    def is_empty(self) -> bool:
        return not self.added and not self.removed

    def to_dict(self) -> dict[str, list[str]]:
        return {"added": list(self.added), "removed": list(self.removed), "retained": list(self.retained)}


class ClaimParser(Protocol):
    """Turns a policy document into the caller's per-claim understanding.

    Any implementation must return exactly one ParsedClaim per claim, in document order.
    """

    def parse(self, doc: PolicyDocument, intent: CallerIntent) -> list[ParsedClaim]:
        ...


class RuleBasedClaimParser:
    """The deterministic ClaimParser: a prohibition is disputed when a declared purpose would trigger it."""

    def parse(self, doc: PolicyDocument, intent: CallerIntent) -> list[ParsedClaim]:
        return parse_claims(doc, intent)


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _constraint_is_well_formed(c: Constraint) -> bool:
    op = c.supported_operator
    if op is None or not c.left_operand:
        return False
    if op.is_membership:
        return isinstance(c.right_operand, list)
    if isinstance(c.right_operand, list):
        return False
    if op.is_ordering:
        return _is_number(c.right_operand)
    return True


def parse_claims(doc: PolicyDocument, intent: CallerIntent) -> list[ParsedClaim]:
    """Returns one ParsedClaim per claim of doc, in document order.

    A claim is disputed when it is a prohibition whose constraint is satisfied by the
    caller's declared context extended with one of its declared purposes. Claims whose
    constraint uses an unsupported operator, or is malformed, are not understood.
    Raises IntentError when any claim constrains purpose and the intent declares none.
    """
    constrained = [c.id for c in doc.claims if c.constraint is not None and c.constraint.left_operand == PURPOSE_KEY]
    if constrained and not intent.declared_purposes:
        raise IntentError(
            f"Claim(s) {', '.join(constrained)} constrain '{PURPOSE_KEY}' but the caller intent declares no purposes.")

    parsed: list[ParsedClaim] = []
    for claim in doc.claims:
        c = claim.constraint
        if c is not None and not _constraint_is_well_formed(c):
            parsed.append(ParsedClaim(claim_id=claim.id, understood=False, disputed=False))
            continue

        dispute_reason = None
        if claim.rule_type == RuleType.PROHIBITION and c is not None:
            dispute_reason = _find_colliding_purpose(claim, c, intent)
        parsed.append(ParsedClaim(
            claim_id=claim.id,
            understood=True,
            disputed=dispute_reason is not None,
            dispute_reason=dispute_reason))
    return parsed


def _find_colliding_purpose(claim: PolicyClaim, c: Constraint, intent: CallerIntent) -> str | None:
    if c.left_operand == PURPOSE_KEY:
        for purpose in intent.declared_purposes:
            ctx = ActionContext({**intent.declared_context, PURPOSE_KEY: purpose})
            if evaluate_constraint(c, ctx) == ConstraintOutcome.SATISFIED:
                return (
                    f"Declared purpose '{purpose}' is prohibited by {claim.clause_ref} ({claim.id}): "
                    f"{claim.action} on {claim.asset} where {_describe_constraint(c)}.")
        return None

    # Constraint on some other context key; only the declared context can collide with it.
    ctx = ActionContext(dict(intent.declared_context))
    if evaluate_constraint(c, ctx) == ConstraintOutcome.SATISFIED:
        return (
            f"Declared context {c.left_operand} = {_render(ctx.get(c.left_operand))} is prohibited by "
            f"{claim.clause_ref} ({claim.id}): {claim.action} on {claim.asset} where {_describe_constraint(c)}.")
    return None


def evaluate_constraint(c: Constraint, ctx: ActionContext) -> ConstraintOutcome:
    """Evaluates a constraint against an action context.

    Total over every operator and context: a missing key, an operand shape the operator
    does not accept, or a non-numeric ordering comparison all yield INDETERMINATE.
    """
    op = c.supported_operator
    if op is None or c.left_operand not in ctx:
        return ConstraintOutcome.INDETERMINATE
    value = ctx.get(c.left_operand)
    right = c.right_operand

    if op.is_membership:
        if not isinstance(right, list) or isinstance(value, list):
            return ConstraintOutcome.INDETERMINATE
        member = any(_scalar_equal(value, r) for r in right)
        return _outcome(member if op == ConstraintOperator.IN else not member)

    if isinstance(right, list) or isinstance(value, list):
        return ConstraintOutcome.INDETERMINATE

    if op == ConstraintOperator.EQ:
        return _outcome(_scalar_equal(value, right))
    if op == ConstraintOperator.NEQ:
        return _outcome(not _scalar_equal(value, right))

    if not _is_number(value) or not _is_number(right):
        return ConstraintOutcome.INDETERMINATE
    if op == ConstraintOperator.LT:
        return _outcome(value < right)
    if op == ConstraintOperator.LTEQ:
        return _outcome(value <= right)
    if op == ConstraintOperator.GT:
        return _outcome(value > right)
    return _outcome(value >= right)


def _scalar_equal(left: Any, right: Any) -> bool:
    # True == 1 in Python; JSON keeps booleans and numbers apart
    if isinstance(left, bool) or isinstance(right, bool):
        return isinstance(left, bool) and isinstance(right, bool) and left == right
    return left == right


def _outcome(flag: bool) -> ConstraintOutcome:
    return ConstraintOutcome.SATISFIED if flag else ConstraintOutcome.UNSATISFIED


def _render(value: Any) -> str:
    if isinstance(value, list):
        return "[" + ", ".join(_render(v) for v in value) + "]"
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "null"
    return str(value)


def _describe_constraint(c: Constraint) -> str:
    op = c.supported_operator
    symbol = _OPERATOR_SYMBOLS[op] if op is not None else c.operator
    return f"{c.left_operand} {symbol} {_render(c.right_operand)}"


def _rule_verb(rule_type: RuleType) -> str:
    return {
        RuleType.PROHIBITION: "prohibits",
        RuleType.PERMISSION: "permits",
        RuleType.OBLIGATION: "obliges",
    }[rule_type]


def render_reasoning(
        claim: PolicyClaim,
        policy_version: str,
        decision: AdherenceDecision,
        detail: str,
        action: str | None = None) -> str:
    """Renders the reasoning string recorded on adherence events.

    Format: ``Action '<action>' maps to <claim.action> on <claim.asset>. Policy v<version>
    <clause_ref> (<claim_id>) <rule verb> this[ where <constraint>]; <detail>. <Decision verb>``
    """
    subject = f"Action '{action}' maps to {claim.action} on {claim.asset}. " if action else ""
    where = f" where {_describe_constraint(claim.constraint)}" if claim.constraint is not None else ""
    return (
        f"{subject}Policy v{policy_version} {claim.clause_ref} ({claim.id}) {_rule_verb(claim.rule_type)} "
        f"this{where}; {detail}. {_DECISION_VERBS[decision]}")


def evaluate_claim(
        claim: PolicyClaim,
        parsed: ParsedClaim,
        ctx: ActionContext,
        policy_version: str,
        *,
        action: str | None = None) -> ClaimEvaluation:
    """Evaluates one claim for an action attempt.

    Disputed or not-understood claims always deny. Otherwise the decision follows the
    claim's rule type and the constraint outcome; obligations permit only when the
    context carries ``obligation_fulfilled:<claim_id>`` = true.
    """
    if parsed.claim_id != claim.id:
        raise ValueError(f"ParsedClaim '{parsed.claim_id}' does not belong to claim '{claim.id}'.")

    outcome: ConstraintOutcome | None = None
    if parsed.disputed:
        decision = AdherenceDecision.DENY
        detail = f"the caller disputes this claim ({parsed.dispute_reason or 'no reason given'})"
    elif not parsed.understood:
        decision = AdherenceDecision.DENY
        detail = "the caller did not understand this claim"
    elif claim.rule_type == RuleType.OBLIGATION:
        flag = f"{OBLIGATION_FLAG_PREFIX}{claim.id}"
        if ctx.get(flag) is True:
            decision, detail = AdherenceDecision.PERMIT, f"context reports {flag} = true"
        else:
            decision, detail = AdherenceDecision.ESCALATE, f"context does not report {flag} = true"
    else:
        if claim.constraint is None:
            outcome = ConstraintOutcome.SATISFIED
            detail = "claim is unconstrained"
        else:
            outcome = evaluate_constraint(claim.constraint, ctx)
            detail = _describe_outcome(claim.constraint, ctx, outcome)
        decision = _decide(claim.rule_type, outcome)

    return ClaimEvaluation(
        decision=decision,
        reasoning=render_reasoning(claim, policy_version, decision, detail, action),
        claim_id=claim.id,
        clause_ref=claim.clause_ref,
        constraint_outcome=outcome)


def _describe_outcome(c: Constraint, ctx: ActionContext, outcome: ConstraintOutcome) -> str:
    if c.left_operand not in ctx:
        return f"context has no '{c.left_operand}', constraint indeterminate"
    return f"context has {c.left_operand} = {_render(ctx.get(c.left_operand))}, constraint {outcome.value}"


def _decide(rule_type: RuleType, outcome: ConstraintOutcome) -> AdherenceDecision:
    if outcome == ConstraintOutcome.INDETERMINATE:
        return AdherenceDecision.ESCALATE
    satisfied = outcome == ConstraintOutcome.SATISFIED
    if rule_type == RuleType.PROHIBITION:
        return AdherenceDecision.DENY if satisfied else AdherenceDecision.PERMIT
    return AdherenceDecision.PERMIT if satisfied else AdherenceDecision.DENY


def aggregate_decisions(decisions: Iterable[AdherenceDecision]) -> AdherenceDecision:
    return max(decisions, key=lambda d: _PRECEDENCE[d], default=AdherenceDecision.PERMIT)


def evaluate_action(
        action: str,
        governing_claims: Sequence[tuple[PolicyClaim, ParsedClaim]],
        ctx: ActionContext,
        policy_version: str) -> ActionEvaluation:
    """Evaluates every claim governing an action and aggregates with deny > escalate > permit."""
    if not governing_claims:
        ungoverned = ClaimEvaluation(
            decision=AdherenceDecision.PERMIT,
            reasoning=(
                f"Action '{action}' is not governed by any claim of policy v{policy_version}. Permitting."),
            claim_id=NO_GOVERNING_CLAIMS,
            clause_ref="")
        return ActionEvaluation(AdherenceDecision.PERMIT, [ungoverned])

    evaluations = [
        evaluate_claim(claim, parsed, ctx, policy_version, action=action) for claim, parsed in governing_claims]
    return ActionEvaluation(aggregate_decisions(e.decision for e in evaluations), evaluations)


def diff_policies(old: PolicyDocument, new: PolicyDocument) -> PolicyDiff:
    """Partitions the claim ids of two consecutive policy versions into added, removed and retained."""
    try:
        order = shared.compare_semver(old.version, new.version)
    except ValueError as ex:
        raise PolicyVersionError(str(ex)) from ex
    if order >= 0:
        raise PolicyVersionError(
            f"Cannot diff policy v{old.version} against v{new.version}: the new version must be higher.")
    if new.supersedes is not None and new.supersedes != old.version:
        raise PolicyVersionError(
            f"Policy v{new.version} supersedes v{new.supersedes}, not v{old.version}.")

    old_ids = set(old.claim_ids)
    new_ids = set(new.claim_ids)
    added: list[str] = []
    retained: list[str] = []
    for claim in new.claims:
        if claim.id not in old_ids or shared.compare_semver(claim.since_version, old.version) > 0:
            added.append(claim.id)
        else:
            retained.append(claim.id)
    removed = [cid for cid in old.claim_ids if cid not in new_ids]
    return PolicyDiff(added=added, removed=removed, retained=retained)
