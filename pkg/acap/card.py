# Copyright (c) ACAP contributors.
# Licensed under the MIT License.

from __future__ import annotations

from enum import Enum
from typing import Any, Iterable, Mapping

from pydantic import BaseModel, ConfigDict

from acap import SUPPORTED_PROTOCOL_VERSIONS
from acap.model import AdherenceMode

ACAP_EXTENSION_BASE = "https://acap-protocol.org/extensions/acap"
ACAP_EXTENSION_URI = f"{ACAP_EXTENSION_BASE}/v{SUPPORTED_PROTOCOL_VERSIONS[-1]}"

AGENT_CARD_PATH = "/.well-known/agent-card.json"
USAGE_POLICY_PATH = "/.well-known/usage-policy.json"
CONSENT_PATH = "/acap/consent"
ADHERENCE_PATH = "/acap/adherence"
AUDIT_PATH = "/acap/audit"
SKILLS_PATH = "/skills"


class CardModel(BaseModel):
    # cards are published by other agents; unknown fields are tolerated
    model_config = ConfigDict(frozen=True, extra="ignore")


class ExtensionParams(CardModel):
    minVersion: str
    maxVersion: str


class AgentExtension(CardModel):
    uri: str
    description: str = ""
    required: bool = False
    params: ExtensionParams | None = None


class AgentCapabilities(CardModel):
    extensions: tuple[AgentExtension, ...] = ()


class UsagePolicy(CardModel):
    version: str
    document_uri: str
    document_hash: str
    effective_date: str
    acceptance_required: bool = True
    acceptance_endpoint: str
    natural_language_uri: str
    adherence_mode: AdherenceMode = AdherenceMode.LOCAL


class AgentSkill(CardModel):
    name: str
    description: str = ""
    policy_claims: tuple[str, ...] = ()


class AgentCard(CardModel):
    name: str
    description: str = ""
    url: str
    capabilities: AgentCapabilities = AgentCapabilities()
    usage_policy: UsagePolicy | None = None
    skills: tuple[AgentSkill, ...] = ()

    def skill(self, name: str) -> AgentSkill | None:
        for s in self.skills:
            if s.name == name:
                return s
        return None

    def acap_extension(self) -> AgentExtension | None:
        for ext in self.capabilities.extensions:
            if ext.uri.startswith(ACAP_EXTENSION_BASE + "/"):
                return ext
        return None


class GateCode(str, Enum):
    CONSENT_REQUIRED = "consent_required"
    CLAIMS_BLOCKED = "claims_blocked"
    STALE_CONSENT = "stale_consent"
    ADHERENCE_REQUIRED = "adherence_required"


class SkillGateError(Exception):
    """Raised when a skill call is refused by the consent gate.

    The same error is raised server-side by the gate and client-side when the callee
    answers a skill call with a gate refusal.
    """

    def __init__(self, code: GateCode | str, detail: str, blocking_claims: Iterable[str] = ()):
        self.code = GateCode(code)
        self.blocking_claims = list(blocking_claims)
        self.detail = detail
        if self.code == GateCode.CLAIMS_BLOCKED and not self.blocking_claims:
            raise ValueError("A claims_blocked refusal must name the blocking claims.")
        super().__init__(f"{self.code.value}: {detail}")

    def to_dict(self) -> dict[str, Any]:
        return {"code": self.code.value, "blocking_claims": self.blocking_claims, "detail": self.detail}

    @classmethod
    def from_dict(cls, body: Mapping[str, Any]) -> SkillGateError:
        return cls(body["code"], str(body.get("detail", "")), body.get("blocking_claims") or ())


def _version_key(version: str) -> tuple[int, ...]:
    return tuple(int(p) for p in version.split("."))


def negotiate_version(card: AgentCard, supported: Iterable[str] = SUPPORTED_PROTOCOL_VERSIONS) -> str | None:
    """Highest protocol version both sides support, or None when there is no overlap."""
    ext = card.acap_extension()
    if ext is None:
        return None
    try:
        if ext.params is not None:
            low, high = _version_key(ext.params.minVersion), _version_key(ext.params.maxVersion)
        else:
            # a bare versioned uri advertises exactly that version
            low = high = _version_key(ext.uri.rsplit("/v", 1)[-1])
        candidates = [v for v in supported if low <= _version_key(v) <= high]
    except ValueError:
        return None
    return max(candidates, key=_version_key) if candidates else None
