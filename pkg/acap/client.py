# Copyright (c) ACAP contributors.
# Licensed under the MIT License.

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from typing import Any, Iterable, Mapping

import httpx
from pydantic import ValidationError

import acap.internal.helpers as helpers
import acap.internal.shared as shared
from acap.card import (ADHERENCE_PATH, AGENT_CARD_PATH, AUDIT_PATH, SKILLS_PATH,
                       AgentCard, SkillGateError, negotiate_version)
from acap.chain import ChainStore
from acap.config import CallerSettings, ConfigError
from acap.model import (AdherenceDecision, AdherenceEvent,
                        CapabilityManifest, ConsentDecision, ConsentRecord,
                        ParsedClaim, PolicyDocument, ReconsentTrigger,
                        ValiditySentinel, compute_capability_hash,
                        compute_policy_hash)
from acap.policy import (ActionContext, ActionEvaluation, CallerIntent,
                         ClaimEvaluation, ClaimParser, RuleBasedClaimParser,
                         diff_policies, evaluate_action, intent_digest)
from acap.signing import SigningKeyPair, load_signing_key, sign


class PolicyIntegrityError(Exception):
    """Raised when a fetched policy does not hash to the value the callee advertises"""
    pass


class VersionNegotiationError(Exception):
    """Raised when the callee advertises no protocol version this client supports"""
    pass


class ConsentRejectedError(Exception):
    """Raised when the callee refuses a consent submission"""

    def __init__(self, message: str, status_code: int, body: Mapping[str, Any]):
        super().__init__(message)
        self.status_code = status_code
        self.body = dict(body)

    @property
    def codes(self) -> list[str]:
        return [v.get("code") for v in self.body.get("violations", [])]


class AdherenceRejectedError(Exception):
    """Raised when the callee refuses an adherence event"""

    def __init__(self, message: str, code: str | None, status_code: int):
        super().__init__(message)
        self.code = code
        self.status_code = status_code


class ConsentExpiredError(Exception):
    """Raised when the bound consent record's valid_until timestamp has passed"""
    pass


class UnknownSkillError(Exception):
    """Raised when the callee's card does not advertise the requested skill"""
    pass


@dataclass
class CallerConfig:
    caller_agent_id: str
    principal_id: str
    capability_manifest: CapabilityManifest
    intent: CallerIntent
    claim_parser: ClaimParser = field(default_factory=RuleBasedClaimParser)
    signing_key: SigningKeyPair | None = None
    valid_until: str = ValiditySentinel.ON_ANY_CHANGE.value
    max_retries: int = 3
    retry_backoff_seconds: float = 0.2

    @property
    def capability_hash(self) -> str:
        return compute_capability_hash(self.capability_manifest)

    @classmethod
    def from_settings(cls, settings: CallerSettings, claim_parser: ClaimParser | None = None) -> CallerConfig:
        if not settings.caller_agent_id or settings.capability_manifest is None or settings.intent is None:
            raise ConfigError("caller_agent_id, capability_manifest and intent are required caller settings.")
        return cls(
            caller_agent_id=settings.caller_agent_id,
            principal_id=settings.principal_id,
            capability_manifest=settings.capability_manifest,
            intent=settings.intent,
            claim_parser=claim_parser or RuleBasedClaimParser(),
            signing_key=load_signing_key(settings.signing_key_path) if settings.signing_key_path else None,
            valid_until=settings.valid_until,
            max_retries=settings.max_retries,
            retry_backoff_seconds=settings.retry_backoff_seconds)


@dataclass
class _Binding:
    card: AgentCard
    policy: PolicyDocument
    record: ConsentRecord
    principal_id: str
    protocol_version: str


@dataclass
class SkillOutcome:
    skill: str
    decision: AdherenceDecision
    consent_record_id: str | None
    evaluations: list[ClaimEvaluation] = field(default_factory=list)
    event: AdherenceEvent | None = None
    authorizing_event_id: str | None = None
    result: Any = None
    reason: str = ""

    @property
    def permitted(self) -> bool:
        return self.decision == AdherenceDecision.PERMIT and self.authorizing_event_id is not None

    def to_dict(self) -> dict[str, Any]:
        return {
            "skill": self.skill,
            "decision": self.decision.value,
            "permitted": self.permitted,
            "consent_record_id": self.consent_record_id,
            "authorizing_event_id": self.authorizing_event_id,
            "event": self.event.model_dump(mode="json") if self.event else None,
            "result": self.result,
            "reason": self.reason,
        }


class AcapCallerClient:
    """Caller-side ACAP middleware.

    Binds to a callee with a consent handshake, keeps a mirror copy of the consent chain
    and adherence trails, re-consents when the policy, the caller's capabilities or its
    principal change, and records an adherence evaluation before every skill call.
    """

    def __init__(self, config: CallerConfig, *,
                 http_client: httpx.Client | None = None,
                 store: ChainStore | None = None,
                 log_handler: logging.Handler | None = None,
                 log_formatter: logging.Formatter | None = None):
        self._logger = shared.get_logger("client", log_handler, log_formatter)
        self.config = config
        self._owns_http = http_client is None
        self._http = http_client if http_client is not None else httpx.Client(timeout=10.0)
        self._store = store if store is not None else ChainStore(log_handler=log_handler, log_formatter=log_formatter)
        self._bindings: dict[str, _Binding] = {}
        self._principals: dict[str, str] = {}
        self._parse_cache: dict[tuple[str, str], ParsedClaim] = {}
        self._lock = threading.Lock()
        self._consent_locks: dict[str, threading.RLock] = {}
        self._trail_locks: dict[str, threading.Lock] = {}

    def __enter__(self):
        return self

    def __exit__(self, type, value, traceback):
        self.close()

    def close(self) -> None:
        if self._owns_http:
            self._http.close()

    @property
    def store(self) -> ChainStore:
        return self._store

    def binding(self, callee_url: str) -> _Binding | None:
        return self._bindings.get(_normalize(callee_url))

    def set_principal(self, principal_id: str) -> None:
        self.config = replace(self.config, principal_id=principal_id)

    def update_capabilities(self, manifest: CapabilityManifest) -> None:
        self.config = replace(self.config, capability_manifest=manifest)

    def _consent_lock(self, callee_url: str) -> threading.RLock:
        with self._lock:
            return self._consent_locks.setdefault(callee_url, threading.RLock())

    def _trail_lock(self, record_id: str) -> threading.Lock:
        with self._lock:
            return self._trail_locks.setdefault(record_id, threading.Lock())

    def _request(self, method: str, url: str, *, retry: bool = True, **kwargs) -> httpx.Response:
        attempts = self.config.max_retries + 1 if retry else 1
        for attempt in range(attempts):
            try:
                return self._http.request(method, url, **kwargs)
            except httpx.TransportError as ex:
                if attempt + 1 >= attempts:
                    raise
                delay = self.config.retry_backoff_seconds * (2 ** attempt)
                self._logger.warning(f"{method} {url} failed ({ex!r}); retrying in {delay:.2f}s.")
                time.sleep(delay)
        raise AssertionError("unreachable")

    def fetch_card(self, callee_url: str) -> AgentCard:
        response = self._request("GET", _normalize(callee_url) + AGENT_CARD_PATH)
        response.raise_for_status()
        return AgentCard.model_validate_json(response.content)

    def fetch_policy(self, card: AgentCard) -> PolicyDocument:
        """Fetches the card's usage policy and verifies it against the advertised hash."""
        if card.usage_policy is None:
            raise PolicyIntegrityError(f"Agent card of '{card.url}' carries no usage_policy block.")
        response = self._request("GET", card.usage_policy.document_uri)
        response.raise_for_status()
        try:
            doc = PolicyDocument.model_validate_json(response.content)
        except ValidationError as ex:
            raise PolicyIntegrityError(f"Policy document at '{card.usage_policy.document_uri}' is unreadable: {ex}") from ex

        computed = compute_policy_hash(doc)
        if computed != doc.hash or computed != card.usage_policy.document_hash:
            raise PolicyIntegrityError(
                f"Policy v{doc.version} hashes to '{computed}' but carries '{doc.hash}' and the card advertises "
                f"'{card.usage_policy.document_hash}'. The document is stale or was tampered with.")
        if doc.version != card.usage_policy.version:
            raise PolicyIntegrityError(
                f"Card advertises policy v{card.usage_policy.version} but the document is v{doc.version}.")
        return doc

    def _negotiate(self, card: AgentCard) -> str:
        version = negotiate_version(card)
        if version is None:
            ext = card.acap_extension()
            offered = f"{ext.params.minVersion}-{ext.params.maxVersion}" if ext and ext.params else "none"
            raise VersionNegotiationError(f"Callee '{card.url}' offers ACAP versions {offered}; no overlap.")
        return version

    def _parse(self, policy: PolicyDocument, reuse: Iterable[str] = ()) -> list[ParsedClaim]:
        """Parses every claim of policy, reusing cached ParsedClaims for the ids in reuse."""
        digest = intent_digest(self.config.intent)
        reusable = set(reuse)
        needed = [c for c in policy.claims if c.id not in reusable or (c.id, digest) not in self._parse_cache]
        if needed:
            fresh = self.config.claim_parser.parse(policy.model_copy(update={"claims": tuple(needed)}),
                                                   self.config.intent)
            if [p.claim_id for p in fresh] != [c.id for c in needed]:
                raise ValueError("The claim parser must return one ParsedClaim per claim, in document order.")
            for p in fresh:
                self._parse_cache[(p.claim_id, digest)] = p
        self._logger.debug(f"Parsed {len(needed)} claim(s), reused {len(policy.claims) - len(needed)}.")
        return [self._parse_cache[(c.id, digest)] for c in policy.claims]

    def _submit_consent(self, callee_url: str, card: AgentCard, version: str, policy: PolicyDocument,
                        parsed: list[ParsedClaim], trigger: ReconsentTrigger | None,
                        decision: ConsentDecision | None = None) -> ConsentRecord:
        assert card.usage_policy is not None
        prev = self._store.chain(self.config.caller_agent_id, policy.publisher).tail
        if (prev is None) != (trigger is None):
            raise ValueError("A re-consent trigger is required exactly when a prior record exists.")
        record = helpers.new_consent_record(
            caller=self.config.caller_agent_id,
            callee=policy.publisher,
            policy_version=policy.version,
            policy_hash=policy.hash,
            parsed_claims=parsed,
            decision=decision or helpers.derive_consent_decision(parsed),
            caller_capability_hash=self.config.capability_hash,
            prev_id=prev.id if prev else None,
            reconsent_trigger=trigger,
            valid_until=self.config.valid_until)
        if self.config.signing_key is not None:
            record = sign(record, self.config.signing_key)

        response = self._request("POST", card.usage_policy.acceptance_endpoint, json=record.model_dump(mode="json"))
        body = _json_or_empty(response)
        if response.status_code != 200:
            raise ConsentRejectedError(
                f"Callee rejected consent record '{record.id}' (HTTP {response.status_code}): {body}",
                response.status_code, body)

        self._store.append_consent(record, policy)
        self._bindings[_normalize(callee_url)] = _Binding(card, policy, record, self.config.principal_id, version)
        self._principals[record.id] = self.config.principal_id
        self._logger.info(
            f"Consent record '{record.id}' ({record.decision.value}) accepted by '{policy.publisher}' for policy "
            f"v{policy.version}" + (f" after {trigger.value}." if trigger else "."))
        return record

    def handshake(self, callee_url: str, *, decision: ConsentDecision | None = None) -> ConsentRecord:
        """Binds to callee_url: fetch card and policy, verify, parse, decide, and submit consent.

        If the mirror already holds a chain for this callee, the cached consent is reused
        when nothing changed and replaced through reconsent() otherwise.
        """
        callee_url = _normalize(callee_url)
        with self._consent_lock(callee_url):
            card = self.fetch_card(callee_url)
            version = self._negotiate(card)
            policy = self.fetch_policy(card)
            prev = self._store.chain(self.config.caller_agent_id, policy.publisher).tail
            if prev is not None:
                self._principals.setdefault(prev.id, self.config.principal_id)
                if callee_url not in self._bindings:
                    self._bindings[callee_url] = _Binding(card, policy, prev, self._principals[prev.id], version)
                trigger = self.detect_staleness(prev, card, self.config.capability_hash, self.config.principal_id)
                if trigger is None and decision is None:
                    return prev
                return self.reconsent(trigger or ReconsentTrigger.PRINCIPAL_CHANGE, callee_url, decision=decision)
            return self._submit_consent(callee_url, card, version, policy, self._parse(policy), None, decision)

    def detect_staleness(self, cached: ConsentRecord, fresh_card: AgentCard, current_cap_hash: str,
                         principal_id: str) -> ReconsentTrigger | None:
        """Returns the re-consent trigger that applies to cached, by precedence principal > capability > policy.

        Capability changes only count when cached.valid_until is on_capability_change or on_any_change.
        """
        if self._principals.get(cached.id, principal_id) != principal_id:
            return ReconsentTrigger.PRINCIPAL_CHANGE
        sentinel = cached.validity_sentinel
        if current_cap_hash != cached.caller_capability_hash and sentinel in (
                ValiditySentinel.ON_CAPABILITY_CHANGE, ValiditySentinel.ON_ANY_CHANGE):
            return ReconsentTrigger.CAPABILITY_CHANGE
        usage = fresh_card.usage_policy
        if usage is not None and (usage.version != cached.policy_version or usage.document_hash != cached.policy_hash):
            return ReconsentTrigger.POLICY_BUMP
        return None

    def reconsent(self, trigger: ReconsentTrigger, callee_url: str, *,
                  decision: ConsentDecision | None = None) -> ConsentRecord:
        """Creates a new consent record linked to the current tail. The old record is kept."""
        callee_url = _normalize(callee_url)
        with self._consent_lock(callee_url):
            card = self.fetch_card(callee_url)
            version = self._negotiate(card)
            policy = self.fetch_policy(card)
            prev = self._store.chain(self.config.caller_agent_id, policy.publisher).tail
            if prev is None:
                raise ValueError(f"No prior consent with '{policy.publisher}' to re-consent from.")

            reuse: list[str] = []
            old = self._bindings.get(callee_url)
            if trigger == ReconsentTrigger.POLICY_BUMP and old is not None and old.policy.hash != policy.hash:
                if shared.compare_semver(old.policy.version, policy.version) < 0:
                    diff = diff_policies(old.policy, policy)
                    reuse = diff.retained
                    self._logger.info(
                        f"Policy v{old.policy.version} -> v{policy.version}: {len(diff.added)} added, "
                        f"{len(diff.removed)} removed, {len(diff.retained)} retained claim(s).")
            parsed = self._parse(policy, reuse)
            return self._submit_consent(callee_url, card, version, policy, parsed, trigger, decision)

    def _ensure_bound(self, callee_url: str) -> _Binding:
        binding = self._bindings.get(callee_url)
        if binding is None:
            self.handshake(callee_url)
            return self._bindings[callee_url]

        card = self.fetch_card(callee_url)
        trigger = self.detect_staleness(
            binding.record, card, self.config.capability_hash, self.config.principal_id)
        if trigger is not None:
            self._logger.info(f"Consent '{binding.record.id}' with '{callee_url}' is stale: {trigger.value}.")
            self.reconsent(trigger, callee_url)
        else:
            binding.card = card
        return self._bindings[callee_url]

    def _record_adherence(self, callee_url: str, record: ConsentRecord, skill: str,
                          evaluation: ActionEvaluation, ctx: ActionContext) -> AdherenceEvent:
        """Posts one adherence event for the evaluated action and mirrors what the callee stored."""
        decisive = evaluation.decisive
        with self._trail_lock(record.id):
            tail = self._store.trail(record.id).tail
            event = helpers.new_adherence_event(
                consent_record_id=record.id,
                action=skill,
                claim_id=decisive.claim_id,
                clause_ref=decisive.clause_ref,
                decision=evaluation.decision,
                reasoning=evaluation.reasoning,
                context=ctx.to_dict(),
                prev_id=tail.id if tail else None)
            if self.config.signing_key is not None:
                event = sign(event, self.config.signing_key)

            # event ids make the resubmission safe
            response = self._request("POST", callee_url + ADHERENCE_PATH, json=event.model_dump(mode="json"))
            body = _json_or_empty(response)
            if response.status_code != 200:
                raise AdherenceRejectedError(
                    f"Callee refused adherence event '{event.id}' (HTTP {response.status_code}): "
                    f"{body.get('detail', '')}", body.get("code"), response.status_code)
            stored = AdherenceEvent.model_validate(body["event"]) if "event" in body else event
            self._store.append_adherence(stored)
        return stored

    def invoke_skill(self, callee_url: str, skill: str, ctx: ActionContext | Mapping[str, Any],
                     payload: Any = None) -> SkillOutcome:
        """Evaluates, records and (when permitted) performs one skill call against callee_url."""
        callee_url = _normalize(callee_url)
        ctx = ActionContext.of(ctx)
        for attempt in range(2):
            binding = self._ensure_bound(callee_url)
            try:
                return self._invoke_bound(callee_url, binding, skill, ctx, payload)
            except AdherenceRejectedError as ex:
                if ex.code != "stale_consent" or attempt:
                    raise
                self._logger.info(f"Callee reports stale consent for '{skill}'; re-checking before retry.")
        raise AssertionError("unreachable")

    def _invoke_bound(self, callee_url: str, binding: _Binding, skill: str, ctx: ActionContext,
                      payload: Any) -> SkillOutcome:
        record = binding.record
        if record.validity_sentinel is None:
            expiry = shared.parse_timestamp(record.valid_until)
            if datetime.now(timezone.utc) > expiry:
                raise ConsentExpiredError(f"Consent record '{record.id}' expired at {record.valid_until}.")
        if record.decision == ConsentDecision.REJECTED:
            self._logger.info(f"Not invoking '{skill}': consent record '{record.id}' rejects the policy.")
            return SkillOutcome(skill, AdherenceDecision.DENY, record.id, reason="consent rejected")

        declared = binding.card.skill(skill)
        if declared is None:
            raise UnknownSkillError(f"Callee '{callee_url}' does not advertise a skill named '{skill}'.")
        parsed = {pc.claim_id: pc for pc in record.parsed_claims}
        governing = []
        for cid in declared.policy_claims:
            claim = binding.policy.claim(cid)
            if claim is None or cid not in parsed:
                raise UnknownSkillError(f"Skill '{skill}' references claim '{cid}' missing from policy v{binding.policy.version}.")
            governing.append((claim, parsed[cid]))

        evaluation = evaluate_action(skill, governing, ctx, binding.policy.version)
        event = self._record_adherence(callee_url, record, skill, evaluation, ctx)
        # in delegated mode the callee's stored decision is authoritative
        decision = event.decision

        if decision != AdherenceDecision.PERMIT:
            self._logger.info(f"Not invoking '{skill}': adherence decision is {decision.value}.")
            return SkillOutcome(skill, decision, record.id, evaluation.evaluations, event, reason=event.reasoning)

        authorizing = event.id
        response = self._request("POST", f"{callee_url}{SKILLS_PATH}/{skill}", retry=False, json={
            "caller": self.config.caller_agent_id,
            "adherence_event_id": authorizing,
            "caller_capability_hash": self.config.capability_hash,
            "context": ctx.to_dict(),
            "input": payload,
        })
        body = _json_or_empty(response)
        if response.status_code == 403:
            raise SkillGateError.from_dict(body)
        if response.status_code == 404:
            raise UnknownSkillError(str(body.get("detail", f"Skill '{skill}' is unknown to the callee.")))
        response.raise_for_status()
        self._logger.info(f"Invoked '{skill}' under adherence event '{authorizing}'.")
        return SkillOutcome(skill, AdherenceDecision.PERMIT, record.id, evaluation.evaluations, event,
                            authorizing_event_id=authorizing, result=body.get("result"))

    def fetch_audit(self, callee_url: str) -> dict[str, Any]:
        response = self._request("GET", _normalize(callee_url) + AUDIT_PATH,
                                 params={"caller": self.config.caller_agent_id})
        response.raise_for_status()
        return response.json()


def _normalize(url: str) -> str:
    return url.rstrip("/")


def _json_or_empty(response: httpx.Response) -> dict[str, Any]:
    try:
        body = response.json()
    except ValueError:
        return {}
    return body if isinstance(body, dict) else {}
