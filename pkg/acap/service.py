# Copyright (c) ACAP contributors.
# Licensed under the MIT License.

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Callable, Iterable, Mapping, Sequence

from fastapi import Body, FastAPI, Query
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, Response
from pydantic import BaseModel, ValidationError

import acap.internal.shared as shared
from acap import SUPPORTED_PROTOCOL_VERSIONS
from acap.card import (ACAP_EXTENSION_URI, ADHERENCE_PATH, AGENT_CARD_PATH,
                       AUDIT_PATH, CONSENT_PATH, SKILLS_PATH,
                       USAGE_POLICY_PATH, AgentCapabilities, AgentCard,
                       AgentExtension, AgentSkill, ExtensionParams, GateCode,
                       SkillGateError, UsagePolicy)
from acap.chain import (ChainLinkError, ChainStore, ConsentStatus,
                        DuplicateRecordError, UnanchoredEventError,
                        blocked_claims, resolve_consent)
from acap.config import ConfigError, ServiceSettings
from acap.model import (AdherenceDecision, AdherenceEvent, AdherenceMode,
                        ConsentDecision, ConsentRecord, PolicyDocument,
                        ValidationReport, Violation, seal_policy,
                        validate_adherence_event, validate_consent_record,
                        validate_document)
from acap.policy import NO_GOVERNING_CLAIMS, ActionContext, evaluate_action
from acap.signing import (SigningKey, VerificationKey, load_signing_key,
                          load_verification_key, sign_record,
                          verify_with_any)

__all__ = [
    "CalleeService", "SkillContext", "SkillGateError", "SkillNotRegisteredError", "PolicyPublicationError",
    "NoPolicyError", "ConsentResult", "AdherenceResult", "SkillPermit", "create_app", "service_from_settings",
]

LINK_CODES = frozenset({"broken_link", "duplicate_id", "unanchored_event"})


class SkillNotRegisteredError(ValueError):
    """Raised when attempting to call a skill that is not registered"""
    pass


class PolicyPublicationError(ValueError):
    """Raised when a policy document cannot be published as the current version"""

    def __init__(self, message: str, report: ValidationReport | None = None):
        super().__init__(message)
        self.report = report or ValidationReport()


class NoPolicyError(Exception):
    """Raised when a request needs the current policy but none has been published"""
    pass


class SkillContext:
    def __init__(self, skill: str, caller: str, consent_record_id: str, adherence_event_id: str,
                 context: Mapping[str, Any]):
        self._skill = skill
        self._caller = caller
        self._consent_record_id = consent_record_id
        self._adherence_event_id = adherence_event_id
        self._context = dict(context)

    @property
    def skill(self) -> str:
        return self._skill

    @property
    def caller(self) -> str:
        """Get the agent id of the caller this skill runs for.

        Returns
        -------
        str
            The caller_agent_id bound to the consent chain.
        """
        return self._caller

    @property
    def consent_record_id(self) -> str:
        return self._consent_record_id

    @property
    def adherence_event_id(self) -> str:
        """Get the id of the adherence event that authorised this call.

        Returns
        -------
        str
            The id of the permit event this call consumed.
        """
        return self._adherence_event_id

    @property
    def context(self) -> dict[str, Any]:
        return dict(self._context)


# Skills are plain functions that take the call context and a JSON payload
Skill = Callable[[SkillContext, Any], Any]


def get_name(fn: Callable) -> str:
    """Returns the name of the provided function"""
    name = fn.__name__
    if name == '<lambda>':
        raise ValueError('Cannot infer a name from a lambda function. Please provide a name explicitly.')
    return name


@dataclass(frozen=True)
class _RegisteredSkill:
    name: str
    fn: Skill
    policy_claims: tuple[str, ...]
    description: str


class _SkillRegistry:

    skills: dict[str, _RegisteredSkill]

    def __init__(self):
        self.skills = dict[str, _RegisteredSkill]()

    def add_skill(self, fn: Skill, policy_claims: Iterable[str] = (), description: str | None = None) -> str:
        if fn is None:
            raise ValueError('A skill function argument is required.')

        name = get_name(fn)
        self.add_named_skill(name, fn, policy_claims, description)
        return name

    def add_named_skill(self, name: str, fn: Skill, policy_claims: Iterable[str] = (),
                        description: str | None = None) -> None:
        if not name:
            raise ValueError('A non-empty skill name is required.')
        if name in self.skills:
            raise ValueError(f"A '{name}' skill already exists.")

        self.skills[name] = _RegisteredSkill(name, fn, tuple(policy_claims), description or (fn.__doc__ or "").strip())

    def get_skill(self, name: str) -> _RegisteredSkill | None:
        return self.skills.get(name)


class _SkillExecutor:
    def __init__(self, registry: _SkillRegistry, logger: logging.Logger):
        self._registry = registry
        self._logger = logger

    def execute(self, name: str, ctx: SkillContext, payload: Any) -> Any:
        self._logger.debug(f"{ctx.caller}/{ctx.adherence_event_id}: Executing skill '{name}'...")
        skill = self._registry.get_skill(name)
        if not skill:
            raise SkillNotRegisteredError(f"Skill function named '{name}' was not registered!")
        result = skill.fn(ctx, payload)
        self._logger.debug(f"{ctx.caller}/{ctx.adherence_event_id}: Skill '{name}' completed successfully.")
        return result


@dataclass(frozen=True)
class _Publication:
    document: PolicyDocument
    document_bytes: bytes
    card: AgentCard
    card_bytes: bytes


@dataclass
class ConsentResult:
    accepted: bool
    record_id: str | None
    violations: list[Violation] = field(default_factory=list)

    @property
    def status_code(self) -> int:
        if self.accepted:
            return 200
        codes = {v.code for v in self.violations}
        if "malformed_body" in codes:
            return 400
        return 409 if codes & LINK_CODES else 403

    def to_dict(self) -> dict[str, Any]:
        if self.accepted:
            return {"status": "accepted", "record_id": self.record_id}
        return {
            "status": "rejected",
            "record_id": self.record_id,
            "code": self.violations[0].code if self.violations else None,
            "violations": [v.to_dict() for v in self.violations],
        }


@dataclass
class AdherenceResult:
    recorded: bool
    mode: AdherenceMode
    event: AdherenceEvent | None = None
    decision: AdherenceDecision | None = None
    action_decision: AdherenceDecision | None = None
    error_code: str | None = None
    detail: str = ""

    @property
    def status_code(self) -> int:
        if self.recorded:
            return 200
        if self.error_code == "malformed_body":
            return 400
        return 409 if self.error_code in LINK_CODES else 403

    def to_dict(self) -> dict[str, Any]:
        if not self.recorded:
            return {"status": "rejected", "code": self.error_code, "detail": self.detail}
        assert self.event is not None and self.decision is not None
        body: dict[str, Any] = {
            "status": "recorded",
            "mode": self.mode.value,
            "event_id": self.event.id,
            "decision": self.decision.value,
        }
        if self.mode == AdherenceMode.DELEGATED:
            body["action_decision"] = self.action_decision.value if self.action_decision else None
            body["event"] = self.event.model_dump(mode="json")
        return body


@dataclass(frozen=True)
class SkillPermit:
    skill: str
    consent_record: ConsentRecord
    authorizing_event: AdherenceEvent


class CalleeService:
    """Callee-side ACAP middleware.

    Publishes the agent card and usage policy, records consent and adherence submissions
    into a ChainStore, and gates every skill call on the caller's active consent and a
    permitting adherence evaluation.
    """

    def __init__(self, *,
                 publisher_id: str,
                 base_url: str,
                 agent_name: str = "acap-callee",
                 description: str = "",
                 adherence_mode: AdherenceMode = AdherenceMode.LOCAL,
                 store: ChainStore | None = None,
                 signing_key: SigningKey | None = None,
                 trusted_keys: Mapping[str, Sequence[VerificationKey]] | None = None,
                 log_handler: logging.Handler | None = None,
                 log_formatter: logging.Formatter | None = None):
        self._logger = shared.get_logger("service", log_handler, log_formatter)
        self.publisher_id = publisher_id
        self.base_url = base_url.rstrip("/")
        self.agent_name = agent_name
        self.description = description
        self.adherence_mode = AdherenceMode(adherence_mode)
        self._store = store if store is not None else ChainStore(log_handler=log_handler, log_formatter=log_formatter)
        self._signing_key = signing_key
        self._trusted_keys = {k: list(v) for k, v in (trusted_keys or {}).items()}
        self._registry = _SkillRegistry()
        self._executor = _SkillExecutor(self._registry, self._logger)
        self._publication: _Publication | None = None
        self._history: dict[str, PolicyDocument] = {}
        self._publish_lock = threading.Lock()
        self._consumed_lock = threading.Lock()
        self._consumed: set[str] = set()

    @property
    def store(self) -> ChainStore:
        return self._store

    @property
    def current_policy(self) -> PolicyDocument | None:
        pub = self._publication
        return pub.document if pub is not None else None

    def policy_by_hash(self, policy_hash: str) -> PolicyDocument | None:
        return self._history.get(policy_hash)

    def policy_history(self) -> list[PolicyDocument]:
        return list(self._history.values())

    def add_skill(self, fn: Skill, policy_claims: Iterable[str] = (), description: str | None = None) -> str:
        claims = tuple(policy_claims)
        self._check_skill_claims(get_name(fn) if fn is not None else "", claims, self.current_policy)
        name = self._registry.add_skill(fn, claims, description)
        self._republish_card()
        return name

    def add_named_skill(self, name: str, fn: Skill, policy_claims: Iterable[str] = (),
                        description: str | None = None) -> None:
        claims = tuple(policy_claims)
        self._check_skill_claims(name, claims, self.current_policy)
        self._registry.add_named_skill(name, fn, claims, description)
        self._republish_card()

    def _check_skill_claims(self, name: str, claims: tuple[str, ...], doc: PolicyDocument | None) -> None:
        if doc is None:
            return
        unknown = [c for c in claims if doc.claim(c) is None]
        if unknown:
            raise PolicyPublicationError(
                f"Skill '{name}' references claim(s) not in policy v{doc.version}: {', '.join(unknown)}.")

    def publish_policy(self, doc: PolicyDocument) -> PolicyDocument:
        """Publishes doc as the current policy, swapping the policy and card responses together.

        A document without a stored hash is sealed first. The document must validate and
        every registered skill's policy_claims must resolve in it.
        """
        if doc.publisher != self.publisher_id:
            raise PolicyPublicationError(
                f"Policy publisher '{doc.publisher}' does not match this service ('{self.publisher_id}').")
        if not doc.hash:
            doc = seal_policy(doc)
        report = validate_document(doc)
        if not report.ok:
            raise PolicyPublicationError(
                f"Policy v{doc.version} is invalid: {', '.join(report.codes())}", report)
        for skill in self._registry.skills.values():
            self._check_skill_claims(skill.name, skill.policy_claims, doc)

        with self._publish_lock:
            current = self._publication
            if current is not None and shared.compare_semver(doc.version, current.document.version) <= 0 \
                    and doc.hash != current.document.hash:
                raise PolicyPublicationError(
                    f"Policy v{doc.version} does not supersede the current v{current.document.version}.")
            self._history[doc.hash] = doc
            self._publication = self._build_publication(doc)
        self._logger.info(f"Published policy v{doc.version} ({doc.hash}) with {len(doc.claims)} claim(s).")
        return doc

    def _republish_card(self) -> None:
        with self._publish_lock:
            if self._publication is not None:
                self._publication = self._build_publication(self._publication.document)

    def _build_publication(self, doc: PolicyDocument) -> _Publication:
        card = self.agent_card(doc)
        return _Publication(
            document=doc,
            document_bytes=shared.canonicalize(doc),
            card=card,
            card_bytes=shared.canonicalize(card))

    def agent_card(self, doc: PolicyDocument | None = None) -> AgentCard:
        doc = doc or self.current_policy
        if doc is None:
            raise NoPolicyError("No usage policy has been published.")
        version = SUPPORTED_PROTOCOL_VERSIONS[-1]
        return AgentCard(
            name=self.agent_name,
            description=self.description,
            url=self.base_url,
            capabilities=AgentCapabilities(extensions=(
                AgentExtension(
                    uri=ACAP_EXTENSION_URI,
                    description="Agent Consent and Adherence Protocol",
                    required=True,
                    params=ExtensionParams(minVersion=SUPPORTED_PROTOCOL_VERSIONS[0], maxVersion=version)),
            )),
            usage_policy=UsagePolicy(
                version=doc.version,
                document_uri=f"{self.base_url}{USAGE_POLICY_PATH}",
                document_hash=doc.hash,
                effective_date=doc.effective_date,
                acceptance_required=True,
                acceptance_endpoint=f"{self.base_url}{CONSENT_PATH}",
                natural_language_uri=doc.natural_language_uri,
                adherence_mode=self.adherence_mode),
            skills=tuple(
                AgentSkill(name=s.name, description=s.description, policy_claims=s.policy_claims)
                for s in self._registry.skills.values()))

    def _require_publication(self) -> _Publication:
        pub = self._publication
        if pub is None:
            raise NoPolicyError("No usage policy has been published.")
        return pub

    def well_known_card(self) -> bytes:
        return self._require_publication().card_bytes

    def well_known_policy(self) -> bytes:
        return self._require_publication().document_bytes

    def _signature_problem(self, record: ConsentRecord | AdherenceEvent, caller: str) -> str | None:
        keys = self._trusted_keys.get(caller)
        if not keys:
            return None
        if not record.signature:
            return "missing_signature"
        return None if verify_with_any(record, keys) else "bad_signature"

    def handle_consent(self, body: Mapping[str, Any] | str | bytes) -> ConsentResult:
        """Verifies and records a consent submission. Every failed check is reported, not just the first."""
        pub = self._require_publication()
        try:
            record = (ConsentRecord.model_validate_json(body) if isinstance(body, (str, bytes))
                      else ConsentRecord.model_validate(body))
        except ValidationError as ex:
            violations = [
                Violation("malformed_body", ".".join(str(p) for p in e["loc"]) or None, e["msg"])
                for e in ex.errors()]
            self._logger.warning(f"Rejected malformed consent submission: {len(violations)} problem(s).")
            return ConsentResult(False, None, violations)

        doc = pub.document
        report = ValidationReport()
        if record.callee != self.publisher_id:
            report.add("callee_mismatch", None, f"Record is addressed to '{record.callee}', not '{self.publisher_id}'.")
        if record.policy_hash != doc.hash:
            report.add(
                "hash_mismatch", None,
                f"Record cites policy hash '{record.policy_hash}' but the current policy is '{doc.hash}'.")
        report.extend(validate_consent_record(record, doc))

        existing = self._store.find_record(record.id)
        if existing is not None:
            if existing == record:
                return ConsentResult(True, record.id)
            report.add("duplicate_id", None, f"Consent record id '{record.id}' is already in use.")
        else:
            tail = self._store.chain(record.caller, self.publisher_id).tail
            expected = tail.id if tail else None
            if record.prev_id != expected:
                report.add("broken_link", None, f"prev_id '{record.prev_id}' does not match chain tail '{expected}'.")

        problem = self._signature_problem(record, record.caller)
        if problem:
            report.add(problem, None, f"Signature of consent record '{record.id}' cannot be verified.")

        if report.ok:
            try:
                self._store.append_consent(record, doc)
            except (ChainLinkError, DuplicateRecordError) as ex:
                code = "duplicate_id" if isinstance(ex, DuplicateRecordError) else "broken_link"
                report.add(code, None, str(ex))

        if not report.ok:
            self._logger.warning(
                f"Rejected consent record '{record.id}' from '{record.caller}': {', '.join(report.codes())}.")
            return ConsentResult(False, record.id, report.violations)

        self._logger.info(
            f"Accepted consent record '{record.id}' from '{record.caller}' for policy v{record.policy_version} "
            f"with decision '{record.decision.value}'.")
        return ConsentResult(True, record.id)

    def _governing_claims(self, record: ConsentRecord, doc: PolicyDocument, action: str):
        skill = self._registry.get_skill(action)
        claim_ids = skill.policy_claims if skill is not None else ()
        parsed = {pc.claim_id: pc for pc in record.parsed_claims}
        pairs = []
        for cid in claim_ids:
            claim = doc.claim(cid)
            if claim is not None and cid in parsed:
                pairs.append((claim, parsed[cid]))
        return pairs

    def handle_adherence(self, body: Mapping[str, Any] | str | bytes) -> AdherenceResult:
        """Records an adherence event. In delegated mode the callee's own evaluation decides."""
        pub = self._require_publication()
        mode = self.adherence_mode
        try:
            event = (AdherenceEvent.model_validate_json(body) if isinstance(body, (str, bytes))
                     else AdherenceEvent.model_validate(body))
        except ValidationError as ex:
            return AdherenceResult(False, mode, error_code="malformed_body", detail=str(ex))

        def reject(code: str, detail: str) -> AdherenceResult:
            self._logger.warning(f"Rejected adherence event '{event.id}': {code}: {detail}")
            return AdherenceResult(False, mode, error_code=code, detail=detail)

        record = self._store.find_record(event.consent_record_id)
        if record is None:
            return reject("unanchored_event", f"Unknown consent record '{event.consent_record_id}'.")
        tail = self._store.chain(record.caller, record.callee).tail
        if tail is None or tail.id != record.id:
            return reject(GateCode.STALE_CONSENT.value, f"Consent record '{record.id}' has been superseded.")
        if record.decision == ConsentDecision.REJECTED:
            return reject(GateCode.CONSENT_REQUIRED.value, f"Consent record '{record.id}' rejects the policy.")
        if record.policy_hash != pub.document.hash:
            return reject(
                GateCode.STALE_CONSENT.value,
                f"Consent record '{record.id}' binds policy v{record.policy_version}; current is "
                f"v{pub.document.version}.")
        report = validate_adherence_event(event)
        if not report.ok:
            return reject(report.codes()[0], "; ".join(v.detail for v in report.violations))
        if event.decision == AdherenceDecision.PERMIT and event.claim_id in blocked_claims(record):
            return reject("permit_on_disputed", f"Claim '{event.claim_id}' is blocked under the caller's consent.")
        problem = self._signature_problem(event, record.caller)
        if problem:
            return reject(problem, f"Signature of adherence event '{event.id}' cannot be verified.")

        stored = event
        action_decision = event.decision
        if mode == AdherenceMode.DELEGATED:
            evaluation = evaluate_action(
                event.action, self._governing_claims(record, pub.document, event.action),
                ActionContext.of(event.context), pub.document.version)
            action_decision = evaluation.decision
            if evaluation.decision != event.decision:
                decisive = evaluation.decisive
                stored = event.model_copy(update={
                    "decision": evaluation.decision, "reasoning": evaluation.reasoning,
                    "claim_id": decisive.claim_id, "clause_ref": decisive.clause_ref, "signature": ""})
                if self._signing_key is not None:
                    stored = stored.model_copy(update={"signature": sign_record(stored, self._signing_key)})

        existing = self._store.find_event(event.id)
        if existing is not None:
            if existing == event or existing.model_copy(update={
                    "decision": event.decision, "reasoning": event.reasoning, "claim_id": event.claim_id,
                    "clause_ref": event.clause_ref, "signature": event.signature}) == event:
                return AdherenceResult(True, mode, existing, existing.decision, action_decision)
            return reject("duplicate_id", f"Adherence event id '{event.id}' is already in use.")

        try:
            self._store.append_adherence(stored)
        except ChainLinkError as ex:
            return reject("broken_link", str(ex))
        except DuplicateRecordError as ex:
            return reject("duplicate_id", str(ex))
        except UnanchoredEventError as ex:
            return reject("unanchored_event", str(ex))

        self._logger.info(
            f"Recorded adherence event '{stored.id}' for action '{stored.action}' on claim "
            f"'{stored.claim_id}': {stored.decision.value} ({mode.value} mode).")
        return AdherenceResult(True, mode, stored, stored.decision, action_decision)

    def gate_skill(self, skill_name: str, caller_id: str, adherence_event_id: str | None = None,
                   capability_hash: str | None = None, now: datetime | None = None) -> SkillPermit:
        """Decides whether caller_id may run skill_name now.

        Raises SkillGateError with consent_required, stale_consent, claims_blocked or
        adherence_required; raises SkillNotRegisteredError for unknown skills.

        A caller with consent on record must present its capability fingerprint; a missing
        fingerprint is treated as stale.
        """
        pub = self._require_publication()
        skill = self._registry.get_skill(skill_name)
        if skill is None:
            raise SkillNotRegisteredError(f"Skill '{skill_name}' is not registered.")

        chain = self._store.chain(caller_id, self.publisher_id)
        tail = chain.tail
        if tail is None:
            raise SkillGateError(GateCode.CONSENT_REQUIRED, f"No consent on record for caller '{caller_id}'.")
        if not capability_hash:
            raise SkillGateError(
                GateCode.STALE_CONSENT,
                f"No capability fingerprint presented by '{caller_id}'; "
                f"consent record '{tail.id}' cannot be confirmed current.")
        resolution = resolve_consent(chain, pub.document, capability_hash, now)
        if resolution.status == ConsentStatus.REJECTED:
            raise SkillGateError(GateCode.CONSENT_REQUIRED, f"Consent record '{tail.id}' rejects the policy.")
        if resolution.status == ConsentStatus.STALE:
            assert resolution.cause is not None
            raise SkillGateError(
                GateCode.STALE_CONSENT,
                f"Consent record '{tail.id}' is stale ({resolution.cause.value}); re-consent is required.")
        record = tail

        blocked = blocked_claims(record)
        blocking = [c for c in skill.policy_claims if c in blocked]
        if blocking:
            raise SkillGateError(
                GateCode.CLAIMS_BLOCKED,
                f"Skill '{skill_name}' is governed by claim(s) the caller disputes or did not understand.",
                blocking)

        if not adherence_event_id:
            raise SkillGateError(GateCode.ADHERENCE_REQUIRED, f"No adherence event presented for '{skill_name}'.")
        trail = self._store.trail(record.id)
        position = next((i for i, e in enumerate(trail.events) if e.id == adherence_event_id), None)
        if position is None:
            raise SkillGateError(
                GateCode.ADHERENCE_REQUIRED,
                f"Adherence event '{adherence_event_id}' is not in the trail of consent record '{record.id}'.")

        event = trail.events[position]
        if (event.action != skill_name or event.decision != AdherenceDecision.PERMIT
                or event.claim_id not in (skill.policy_claims or (NO_GOVERNING_CLAIMS,))):
            raise SkillGateError(
                GateCode.ADHERENCE_REQUIRED,
                f"Adherence event '{adherence_event_id}' is not a permitting evaluation of '{skill_name}'.")

        with self._consumed_lock:
            if adherence_event_id in self._consumed:
                raise SkillGateError(
                    GateCode.ADHERENCE_REQUIRED,
                    f"Adherence event '{adherence_event_id}' has already authorised a call.")
            self._consumed.add(adherence_event_id)

        self._logger.info(
            f"Gate permits '{skill_name}' for '{caller_id}' under consent '{record.id}' "
            f"and adherence event '{adherence_event_id}'.")
        return SkillPermit(skill_name, record, trail.events[position])

    def invoke_skill(self, skill_name: str, caller_id: str, adherence_event_id: str | None,
                     capability_hash: str | None = None, context: Mapping[str, Any] | None = None,
                     payload: Any = None) -> Any:
        permit = self.gate_skill(skill_name, caller_id, adherence_event_id, capability_hash)
        ctx = SkillContext(
            skill_name, caller_id, permit.consent_record.id, permit.authorizing_event.id, context or {})
        return self._executor.execute(skill_name, ctx, payload)

    def serve_audit(self, caller_id: str) -> dict[str, Any]:
        return self._store.export_audit(caller_id, self.publisher_id, self._history.values())


class SkillCallRequest(BaseModel):
    caller: str
    adherence_event_id: str | None = None
    caller_capability_hash: str | None = None
    context: dict[str, Any] = {}
    input: Any = None


def _json_bytes(content: bytes) -> Response:
    return Response(content=content, media_type="application/json")


def create_app(service: CalleeService) -> FastAPI:
    """Builds the FastAPI application exposing the ACAP routes of service."""
    app = FastAPI(title=service.agent_name, description=service.description or "ACAP callee")

    @app.exception_handler(SkillGateError)
    async def _gate_error(_, exc: SkillGateError):
        return JSONResponse(status_code=403, content=exc.to_dict())

    @app.exception_handler(SkillNotRegisteredError)
    async def _unknown_skill(_, exc: SkillNotRegisteredError):
        return JSONResponse(status_code=404, content={"code": "unknown_skill", "detail": str(exc)})

    @app.exception_handler(NoPolicyError)
    async def _no_policy(_, exc: NoPolicyError):
        return JSONResponse(status_code=503, content={"code": "no_policy", "detail": str(exc)})

    @app.exception_handler(RequestValidationError)
    async def _malformed(_, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"code": "malformed_body", "detail": str(exc.errors())})

    @app.get(AGENT_CARD_PATH)
    def agent_card() -> Response:
        return _json_bytes(service.well_known_card())

    @app.get(USAGE_POLICY_PATH)
    def usage_policy() -> Response:
        return _json_bytes(service.well_known_policy())

    @app.post(CONSENT_PATH)
    def consent(body: dict[str, Any] = Body(...)) -> JSONResponse:
        result = service.handle_consent(body)
        return JSONResponse(status_code=result.status_code, content=result.to_dict())

    @app.post(ADHERENCE_PATH)
    def adherence(body: dict[str, Any] = Body(...)) -> JSONResponse:
        result = service.handle_adherence(body)
        return JSONResponse(status_code=result.status_code, content=result.to_dict())

    @app.get(AUDIT_PATH)
    def audit(caller: str = Query(...)) -> JSONResponse:
        return JSONResponse(content=service.serve_audit(caller))

    @app.post(SKILLS_PATH + "/{name}")
    def skill(name: str, request: SkillCallRequest) -> JSONResponse:
        result = service.invoke_skill(
            name, request.caller, request.adherence_event_id, request.caller_capability_hash,
            request.context, request.input)
        return JSONResponse(content={
            "skill": name,
            "adherence_event_id": request.adherence_event_id,
            "result": result,
        })

    return app


def service_from_settings(settings: ServiceSettings, *,
                          log_handler: logging.Handler | None = None,
                          log_formatter: logging.Formatter | None = None) -> CalleeService:
    """Builds a CalleeService from loaded settings: keys, store, skills and the initial policy."""
    if not settings.policy_path:
        raise ConfigError("A callee needs a policy_path to publish.")
    try:
        with open(settings.policy_path, "rb") as f:
            raw = f.read()
    except OSError as ex:
        raise ConfigError(f"Unable to read policy '{settings.policy_path}': {ex}") from ex

    service = CalleeService(
        publisher_id=settings.resolved_publisher_id(),
        base_url=settings.resolved_base_url(),
        agent_name=settings.agent_name,
        description=settings.description,
        adherence_mode=settings.adherence_mode,
        store=ChainStore(settings.store_dir, log_handler=log_handler, log_formatter=log_formatter),
        signing_key=load_signing_key(settings.signing_key_path) if settings.signing_key_path else None,
        trusted_keys={
            caller: [load_verification_key(p) for p in paths] for caller, paths in settings.trusted_keys.items()},
        log_handler=log_handler,
        log_formatter=log_formatter)
    try:
        service.publish_policy(PolicyDocument.model_validate_json(raw))
    except ValidationError as ex:
        raise ConfigError(f"Policy '{settings.policy_path}' is not a policy document: {ex}") from ex
    for skill in settings.skills:
        service.add_named_skill(skill.name, skill.load_handler(), skill.policy_claims, skill.description)
    return service
