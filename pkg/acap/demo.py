# Copyright (c) ACAP contributors.
# Licensed under the MIT License.

"""Two-agent demo: a data-analysis callee and a marketing-insights caller over loopback HTTP."""

from __future__ import annotations

import logging
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable

import httpx
import uvicorn

import acap.internal.shared as shared
from acap.card import AGENT_CARD_PATH
from acap.chain import detect_divergence, validate_audit
from acap.client import AcapCallerClient, CallerConfig, SkillOutcome
from acap.model import (AdherenceDecision, CapabilityManifest, ConsentDecision,
                        Constraint, PolicyClaim, PolicyDocument, RuleType,
                        seal_manifest, seal_policy)
from acap.policy import CallerIntent
from acap.service import CalleeService, SkillContext, create_app

DEMO_CALLEE_ID = "urn:acap:demo:data-analysis-agent"
DEMO_CALLER_ID = "urn:acap:demo:marketing-insights-agent"
DEMO_PRINCIPAL_ID = "urn:acap:demo:principal:marketing-team"
DEMO_PORT = 8765
DEMO_SKILL = "analyse_dataset"

DENIED_CONTEXT = {"purpose": "behavioural_profiling", "retention_days": 7}
PERMITTED_CONTEXT = {"purpose": "statistical_analysis", "retention_days": 7}


class DemoError(Exception):
    """Raised when the demo callee cannot be started"""
    pass


def demo_policy(publisher: str = DEMO_CALLEE_ID) -> PolicyDocument:
    """The three-prohibition policy used by the demo."""
    return seal_policy(PolicyDocument(
        version="2.1.0",
        effective_date="2026-02-27T00:00:00Z",
        supersedes="2.0.0",
        claims=(
            PolicyClaim(
                id="claim-data-retention",
                clause_ref="§2.1",
                action="odrl:retain",
                asset="pii:session_data",
                rule_type=RuleType.PROHIBITION,
                constraint=Constraint(left_operand="retention_days", operator="gt", right_operand=30),
                since_version="2.0.0",
                category="retention"),
            PolicyClaim(
                id="claim-aggregation-prohibition",
                clause_ref="§3.4",
                action="odrl:aggregate",
                asset="pii:session_data",
                rule_type=RuleType.PROHIBITION,
                constraint=Constraint(left_operand="purpose", operator="eq", right_operand="behavioural_profiling"),
                since_version="2.1.0",
                category="aggregation"),
            PolicyClaim(
                id="claim-third-party-distribution",
                clause_ref="§4.2",
                action="odrl:distribute",
                asset="pii:session_data",
                rule_type=RuleType.PROHIBITION,
                constraint=Constraint(left_operand="recipient", operator="eq", right_operand="third_party"),
                since_version="2.0.0",
                category="distribution"),
        ),
        publisher=publisher,
        natural_language_uri="https://analysis.example/terms/v2.1.0"))


def demo_intent() -> CallerIntent:
    return CallerIntent(
        purpose_statement=(
            "Produce a marketing insights report that does not engage in behavioural profiling "
            "of individual customers."),
        declared_purposes=("statistical_analysis",))


def demo_manifest() -> CapabilityManifest:
    return seal_manifest(CapabilityManifest(
        model_identifier="acap-rule-based-parser/1",
        tool_manifest=(DEMO_SKILL,),
        reasoning_configuration={"temperature": 0}))


def demo_caller_config() -> CallerConfig:
    return CallerConfig(
        caller_agent_id=DEMO_CALLER_ID,
        principal_id=DEMO_PRINCIPAL_ID,
        capability_manifest=demo_manifest(),
        intent=demo_intent(),
        max_retries=2,
        retry_backoff_seconds=0.05)


def build_demo_service(base_url: str, *,
                       on_skill_call: Callable[[SkillContext], None] | None = None,
                       log_handler: logging.Handler | None = None,
                       log_formatter: logging.Formatter | None = None) -> CalleeService:
    """Builds the data-analysis callee with the demo policy and skills registered."""
    service = CalleeService(
        publisher_id=DEMO_CALLEE_ID,
        base_url=base_url,
        agent_name="data-analysis-agent",
        description="Analyses session datasets and returns qualitative summaries.",
        log_handler=log_handler,
        log_formatter=log_formatter)

    def analyse_dataset(ctx: SkillContext, payload: Any) -> str:
        """Runs a one-shot analysis of a session dataset."""
        if on_skill_call is not None:
            on_skill_call(ctx)
        dataset = (payload or {}).get("dataset", "session data") if isinstance(payload, dict) else "session data"
        return (f"Qualitative summary of {dataset}: engagement peaks mid-week and "
                f"is concentrated in returning cohorts (purpose: {ctx.context.get('purpose')}).")

    def share_report(ctx: SkillContext, payload: Any) -> str:
        """Delivers a finished report to a named recipient."""
        if on_skill_call is not None:
            on_skill_call(ctx)
        return f"Report delivered to {ctx.context.get('recipient')}."

    service.publish_policy(demo_policy())
    service.add_named_skill(DEMO_SKILL, analyse_dataset,
                            ["claim-data-retention", "claim-aggregation-prohibition"])
    service.add_named_skill("share_report", share_report, ["claim-third-party-distribution"])
    return service


@dataclass
class DemoTranscript:
    lines: list[str] = field(default_factory=list)
    checks: dict[str, bool] = field(default_factory=dict)
    audit: dict[str, Any] | None = None
    elapsed_seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return bool(self.checks) and all(self.checks.values())

    def say(self, line: str = "") -> None:
        self.lines.append(line)

    def check(self, name: str, passed: bool) -> None:
        self.checks[name] = passed
        self.say(f"  [{'ok' if passed else 'FAIL'}] {name}")

    def render(self) -> str:
        return "\n".join(self.lines)

    def to_dict(self) -> dict[str, Any]:
        return {
            "ok": self.ok,
            "elapsed_seconds": round(self.elapsed_seconds, 3),
            "checks": self.checks,
            "transcript": self.lines,
            "audit": self.audit,
        }


class _ThreadedCallee:
    def __init__(self, service: CalleeService, host: str, port: int):
        config = uvicorn.Config(create_app(service), host=host, port=port, log_level="warning", lifespan="off")
        self._server = uvicorn.Server(config)
        self._thread = threading.Thread(target=self._run, daemon=True)

    def _run(self) -> None:
        try:
            self._server.run()
        except SystemExit:
            # uvicorn exits when the port cannot be bound
            pass

    def start(self, timeout: float) -> None:
        self._thread.start()
        deadline = time.monotonic() + timeout
        while not self._server.started:
            if not self._thread.is_alive() or time.monotonic() > deadline:
                raise DemoError("The demo callee did not start; is the port already in use?")
            time.sleep(0.02)

    def stop(self) -> None:
        self._server.should_exit = True
        self._thread.join(timeout=5)


class _SubprocessCallee:
    def __init__(self, host: str, port: int):
        self._args = [sys.executable, "-m", "acap", "serve", "--demo", "--host", host, "--port", str(port)]
        self._url = f"http://{host}:{port}"
        self._process: subprocess.Popen | None = None

    def start(self, timeout: float) -> None:
        self._process = subprocess.Popen(self._args)
        deadline = time.monotonic() + timeout
        with httpx.Client(timeout=1.0) as http:
            while True:
                if self._process.poll() is not None:
                    raise DemoError(f"The demo callee exited with code {self._process.returncode}.")
                try:
                    if http.get(self._url + AGENT_CARD_PATH).status_code == 200:
                        return
                except httpx.TransportError:
                    pass
                if time.monotonic() > deadline:
                    self.stop()
                    raise DemoError("The demo callee did not become ready in time.")
                time.sleep(0.05)

    def stop(self) -> None:
        if self._process is not None and self._process.poll() is None:
            self._process.terminate()
            try:
                self._process.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._process.kill()


def _describe_outcome(transcript: DemoTranscript, label: str, outcome: SkillOutcome) -> None:
    transcript.say(f"{label}: {outcome.skill} -> {outcome.decision.value}")
    if outcome.event is not None:
        transcript.say(f"  event {outcome.event.id} on {outcome.event.claim_id}")
        transcript.say(f"  reasoning: {outcome.event.reasoning}")
    if outcome.permitted:
        transcript.say(f"  authorised by {outcome.authorizing_event_id}")
        transcript.say(f"  result: {outcome.result}")


def run_demo(port: int = DEMO_PORT, *, host: str = "127.0.0.1", separate_process: bool = False,
             startup_timeout: float = 10.0,
             log_handler: logging.Handler | None = None,
             log_formatter: logging.Formatter | None = None) -> DemoTranscript:
    """Runs handshake, a denied call, a permitted call and the audit fetch against a live callee."""
    logger = shared.get_logger("demo", log_handler, log_formatter)
    base_url = f"http://{host}:{port}"
    skill_calls: list[SkillContext] = []
    if separate_process:
        callee: _ThreadedCallee | _SubprocessCallee = _SubprocessCallee(host, port)
    else:
        service = build_demo_service(base_url, on_skill_call=skill_calls.append,
                                     log_handler=log_handler, log_formatter=log_formatter)
        callee = _ThreadedCallee(service, host, port)

    transcript = DemoTranscript()
    started = time.monotonic()
    callee.start(startup_timeout)
    logger.info(f"Demo callee listening on {base_url}.")
    try:
        config = demo_caller_config()
        with httpx.Client(timeout=5.0) as http, \
                AcapCallerClient(config, http_client=http, log_handler=log_handler,
                                 log_formatter=log_formatter) as client:
            transcript.say(f"== consent handshake with {base_url}")
            record = client.handshake(base_url)
            for pc in record.parsed_claims:
                state = "disputed" if pc.disputed else ("understood" if pc.understood else "not understood")
                transcript.say(f"  {pc.claim_id}: {state}")
            transcript.say(f"  consent record {record.id}: {record.decision.value}")
            transcript.check("consent accepted", record.decision == ConsentDecision.ACCEPTED)
            transcript.check("three parsed claims", len(record.parsed_claims) == 3)

            transcript.say()
            transcript.say("== skill call with purpose = behavioural_profiling")
            denied = client.invoke_skill(base_url, DEMO_SKILL, DENIED_CONTEXT)
            _describe_outcome(transcript, "denied call", denied)
            transcript.check("profiling call denied", denied.decision == AdherenceDecision.DENY)
            transcript.check("denied before skill execution",
                             not denied.permitted and (separate_process or not skill_calls))

            transcript.say()
            transcript.say("== skill call with purpose = statistical_analysis")
            permitted = client.invoke_skill(base_url, DEMO_SKILL, PERMITTED_CONTEXT, {"dataset": "q3-sessions"})
            _describe_outcome(transcript, "permitted call", permitted)
            transcript.check("analysis call permitted", permitted.permitted and bool(permitted.result))

            transcript.say()
            transcript.say("== audit export")
            audit = client.fetch_audit(base_url)
            transcript.audit = audit
            chain = audit["consent_chain"]
            events = [e for block in audit["adherence_trails"] for e in block["events"]]
            transcript.say(f"  {len(chain)} consent record(s), {len(events)} adherence event(s)")
            for e in events:
                transcript.say(f"  {e['event_id']} <- {e['prev_event_id']}: {e['event']['decision']}")
            transcript.check("one consent record", len(chain) == 1 and chain[0]["prev_record_id"] is None)
            transcript.check(
                "deny then permit, linked",
                len(events) == 2
                and [e["event"]["decision"] for e in events] == ["deny", "permit"]
                and events[0]["prev_event_id"] is None
                and events[1]["prev_event_id"] == events[0]["event_id"])
            transcript.check(
                "reasoning preserved verbatim",
                denied.event is not None and permitted.event is not None
                and [e["event"]["reasoning"] for e in events] == [denied.event.reasoning, permitted.event.reasoning])
            transcript.check("audit re-validates", validate_audit(audit).ok)
            binding = client.binding(base_url)
            mirror = client.store.export_audit(
                config.caller_agent_id, DEMO_CALLEE_ID, [binding.policy] if binding else [])
            transcript.check("caller mirror matches callee audit", not detect_divergence(mirror, audit))
    finally:
        callee.stop()
    transcript.elapsed_seconds = time.monotonic() - started
    logger.info(f"Demo finished in {transcript.elapsed_seconds:.2f}s: {'ok' if transcript.ok else 'FAILED'}.")
    return transcript
