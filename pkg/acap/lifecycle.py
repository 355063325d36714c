# Copyright (c) ACAP contributors.
# Licensed under the MIT License.

"""Executable model of the consent lifecycle and a bounded exhaustive explorer.

The model tracks one caller/callee pair through fetch, decide, invalidate and re-bind.
``explore`` enumerates every reachable state breadth-first, checks the safety properties
S1-S7 on each state (S2 on each edge), and checks eventual re-consent (L1 for policy
bumps, L2 for capability changes) structurally over the finished state graph.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Iterable, NamedTuple

import acap.internal.shared as shared
from acap.model import AdherenceDecision, ConsentDecision


class LifecycleState(str, Enum):
    IDLE = "Idle"
    POLICY_FETCHED = "PolicyFetched"
    GOVERNANCE_REVIEW = "GovernanceReview"
    ACCEPTED = "Accepted"
    REJECTED = "Rejected"
    CONDITIONAL = "Conditional"
    STALE = "Stale"


DECIDED_STATES = (LifecycleState.ACCEPTED, LifecycleState.REJECTED, LifecycleState.CONDITIONAL)
BOUND_STATES = (LifecycleState.ACCEPTED, LifecycleState.CONDITIONAL)


class EventKind(str, Enum):
    FETCH_POLICY = "FetchPolicy"
    SUBMIT_FOR_REVIEW = "SubmitForReview"
    ACCEPT = "Accept"
    REJECT = "Reject"
    CONDITIONAL_ACCEPT = "ConditionalAccept"
    PUBLISH_VERSION = "PublishVersion"
    CAPABILITY_BUMP = "CapabilityBump"
    RECORD_ADHERENCE = "RecordAdherence"
    INVOKE_SKILL = "InvokeSkill"


CONSENT_EVENTS = (EventKind.ACCEPT, EventKind.REJECT, EventKind.CONDITIONAL_ACCEPT)


class StaleCause(str, Enum):
    POLICY_BUMP = "policy_bump"
    CAPABILITY_CHANGE = "capability_change"


@dataclass(frozen=True)
class LifecycleEvent:
    kind: EventKind
    claim_disputed: bool = False
    decision: AdherenceDecision | None = None

    def __str__(self) -> str:
        if self.kind == EventKind.RECORD_ADHERENCE:
            assert self.decision is not None
            return f"{self.kind.value}(disputed={str(self.claim_disputed).lower()}, {self.decision.value})"
        return self.kind.value

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"kind": self.kind.value}
        if self.kind == EventKind.RECORD_ADHERENCE:
            d["claim_disputed"] = self.claim_disputed
            d["decision"] = self.decision.value if self.decision else None
        return d


FETCH_POLICY = LifecycleEvent(EventKind.FETCH_POLICY)
SUBMIT_FOR_REVIEW = LifecycleEvent(EventKind.SUBMIT_FOR_REVIEW)
ACCEPT = LifecycleEvent(EventKind.ACCEPT)
REJECT = LifecycleEvent(EventKind.REJECT)
CONDITIONAL_ACCEPT = LifecycleEvent(EventKind.CONDITIONAL_ACCEPT)
PUBLISH_VERSION = LifecycleEvent(EventKind.PUBLISH_VERSION)
CAPABILITY_BUMP = LifecycleEvent(EventKind.CAPABILITY_BUMP)
INVOKE_SKILL = LifecycleEvent(EventKind.INVOKE_SKILL)


def record_adherence(claim_disputed: bool, decision: AdherenceDecision) -> LifecycleEvent:
    return LifecycleEvent(EventKind.RECORD_ADHERENCE, claim_disputed, decision)


class ConsentEntry(NamedTuple):
    decision: ConsentDecision
    policy_version: int
    capability_version: int
    disputed_claim_present: bool


class AdherenceEntry(NamedTuple):
    decision: AdherenceDecision
    claim_disputed: bool
    consent_index: int


class Invocation(NamedTuple):
    """The most recent skill call: the record and adherence event it ran under."""
    consent_index: int
    adherence_index: int | None
    capability_version: int


@dataclass(frozen=True, slots=True)
class SystemState:
    lifecycle: LifecycleState = LifecycleState.IDLE
    policy_version: int = 1
    capability_version: int = 1
    consent_chain: tuple[ConsentEntry, ...] = ()
    adherence_trail: tuple[AdherenceEntry, ...] = ()
    skill_calls: int = 0
    pending_stale_cause: StaleCause | None = None
    last_invocation: Invocation | None = None

    @property
    def tail_index(self) -> int | None:
        return len(self.consent_chain) - 1 if self.consent_chain else None

    def to_dict(self) -> dict[str, Any]:
        return {
            "lifecycle": self.lifecycle.value,
            "policy_version": self.policy_version,
            "capability_version": self.capability_version,
            "consent_chain": [
                {"decision": c.decision.value, "policy_version": c.policy_version,
                 "capability_version": c.capability_version, "disputed_claim_present": c.disputed_claim_present}
                for c in self.consent_chain],
            "adherence_trail": [
                {"decision": a.decision.value, "claim_disputed": a.claim_disputed, "consent_index": a.consent_index}
                for a in self.adherence_trail],
            "skill_calls": self.skill_calls,
            "pending_stale_cause": self.pending_stale_cause.value if self.pending_stale_cause else None,
            "last_invocation": self.last_invocation._asdict() if self.last_invocation else None,
        }

    def canonical(self) -> bytes:
        return shared.canonicalize(self.to_dict())


@dataclass(frozen=True)
class ExplorationBounds:
    max_versions: int = 3
    max_adherence_events: int = 4
    max_cap_versions: int = 2

    def __post_init__(self):
        for name in ("max_versions", "max_adherence_events", "max_cap_versions"):
            if getattr(self, name) < 1:
                raise ValueError(f"Exploration bound '{name}' must be at least 1.")


class TransitionError(Exception):
    """Raised when stepping the model with an event that is not enabled in the current state"""
    pass


class LifecycleModel:
    """Transition system of the consent lifecycle for one caller/callee pair.

    Subclasses override the guard hooks to model faulty implementations.
    """

    name = "default"

    def __init__(self, bounds: ExplorationBounds | None = None, *, governance_tiering: bool = False):
        self.bounds = bounds or ExplorationBounds()
        self.governance_tiering = governance_tiering

    def initial_state(self) -> SystemState:
        return SystemState()

    def enabled_events(self, s: SystemState) -> tuple[LifecycleEvent, ...]:
        events: list[LifecycleEvent] = []
        if self._can_fetch(s):
            events.append(FETCH_POLICY)
        if self.governance_tiering and s.lifecycle == LifecycleState.POLICY_FETCHED:
            events.append(SUBMIT_FOR_REVIEW)
        if s.lifecycle == LifecycleState.POLICY_FETCHED or (
                self.governance_tiering and s.lifecycle == LifecycleState.GOVERNANCE_REVIEW):
            events.extend((ACCEPT, REJECT, CONDITIONAL_ACCEPT))
        if s.lifecycle in DECIDED_STATES and s.policy_version < self.bounds.max_versions:
            events.append(PUBLISH_VERSION)
        if self._can_bump_capability(s):
            events.append(CAPABILITY_BUMP)
        events.extend(record_adherence(disputed, decision) for disputed, decision in self._adherence_options(s))
        if self._can_invoke(s):
            events.append(INVOKE_SKILL)
        return tuple(events)

    def step(self, s: SystemState, event: LifecycleEvent) -> SystemState:
        if event not in self.enabled_events(s):
            raise TransitionError(f"Event {event} is not enabled in state {s.lifecycle.value}.")
        return self._apply(s, event)

    # guard hooks

    def _can_fetch(self, s: SystemState) -> bool:
        return s.lifecycle in (LifecycleState.IDLE, LifecycleState.STALE)

    def _can_bump_capability(self, s: SystemState) -> bool:
        return s.lifecycle in DECIDED_STATES and s.capability_version < self.bounds.max_cap_versions

    def _tail_is_bound(self, s: SystemState) -> bool:
        tail = s.consent_chain[-1] if s.consent_chain else None
        return (
            s.lifecycle in BOUND_STATES
            and tail is not None
            and tail.decision in (ConsentDecision.ACCEPTED, ConsentDecision.CONDITIONAL)
            and tail.policy_version == s.policy_version
            and tail.capability_version == s.capability_version)

    def _adherence_options(self, s: SystemState) -> list[tuple[bool, AdherenceDecision]]:
        if not self._tail_is_bound(s) or len(s.adherence_trail) >= self.bounds.max_adherence_events:
            return []
        options = [(False, d) for d in AdherenceDecision]
        if s.consent_chain[-1].disputed_claim_present:
            options += [(True, AdherenceDecision.DENY), (True, AdherenceDecision.ESCALATE)]
        return options

    def _governing_permit(self, s: SystemState) -> bool:
        if not s.adherence_trail:
            return False
        last_index = len(s.adherence_trail) - 1
        last = s.adherence_trail[-1]
        consumed = s.last_invocation is not None and s.last_invocation.adherence_index == last_index
        return (
            not consumed
            and last.decision == AdherenceDecision.PERMIT
            and not last.claim_disputed
            and last.consent_index == s.tail_index)

    def _can_invoke(self, s: SystemState) -> bool:
        return self._tail_is_bound(s) and self._governing_permit(s)

    def _apply(self, s: SystemState, event: LifecycleEvent) -> SystemState:
        kind = event.kind
        if kind == EventKind.FETCH_POLICY:
            return replace(s, lifecycle=LifecycleState.POLICY_FETCHED)
        if kind == EventKind.SUBMIT_FOR_REVIEW:
            return replace(s, lifecycle=LifecycleState.GOVERNANCE_REVIEW)
        if kind in CONSENT_EVENTS:
            decision, lifecycle, disputed = {
                EventKind.ACCEPT: (ConsentDecision.ACCEPTED, LifecycleState.ACCEPTED, False),
                EventKind.REJECT: (ConsentDecision.REJECTED, LifecycleState.REJECTED, True),
                EventKind.CONDITIONAL_ACCEPT: (ConsentDecision.CONDITIONAL, LifecycleState.CONDITIONAL, True),
            }[kind]
            entry = ConsentEntry(decision, s.policy_version, s.capability_version, disputed)
            return replace(
                s, lifecycle=lifecycle, consent_chain=s.consent_chain + (entry,), pending_stale_cause=None)
        if kind == EventKind.PUBLISH_VERSION:
            return replace(
                s, lifecycle=LifecycleState.STALE, policy_version=s.policy_version + 1,
                pending_stale_cause=StaleCause.POLICY_BUMP)
        if kind == EventKind.CAPABILITY_BUMP:
            return self._apply_capability_bump(s)
        if kind == EventKind.RECORD_ADHERENCE:
            assert event.decision is not None and s.tail_index is not None
            entry = AdherenceEntry(event.decision, event.claim_disputed, s.tail_index)
            return replace(s, adherence_trail=s.adherence_trail + (entry,))
        if kind == EventKind.INVOKE_SKILL:
            adherence_index = len(s.adherence_trail) - 1 if s.adherence_trail else None
            invocation = Invocation(s.tail_index if s.tail_index is not None else -1,
                                    adherence_index, s.capability_version)
            return replace(s, skill_calls=s.skill_calls + 1, last_invocation=invocation)
        raise TransitionError(f"Unknown event {event}.")

    def _apply_capability_bump(self, s: SystemState) -> SystemState:
        return replace(
            s, lifecycle=LifecycleState.STALE, capability_version=s.capability_version + 1,
            pending_stale_cause=StaleCause.CAPABILITY_CHANGE)


class SkillFromRejected(LifecycleModel):
    """Lets a skill run while the caller sits in Rejected."""
    name = "skill-from-rejected"

    def _can_invoke(self, s: SystemState) -> bool:
        return super()._can_invoke(s) or (s.lifecycle == LifecycleState.REJECTED and s.skill_calls == 0)


class PermitOnDisputed(LifecycleModel):
    """Lets an adherence evaluation permit on a disputed claim."""
    name = "permit-on-disputed"

    def _adherence_options(self, s: SystemState) -> list[tuple[bool, AdherenceDecision]]:
        options = super()._adherence_options(s)
        if any(disputed for disputed, _ in options):
            options.append((True, AdherenceDecision.PERMIT))
        return options

    def _governing_permit(self, s: SystemState) -> bool:
        if not s.adherence_trail:
            return False
        last = s.adherence_trail[-1]
        consumed = s.last_invocation is not None and s.last_invocation.adherence_index == len(s.adherence_trail) - 1
        return not consumed and last.decision == AdherenceDecision.PERMIT and last.consent_index == s.tail_index


class SkillUnderCapabilityDrift(LifecycleModel):
    """Records the capability bump but keeps the consent bound, so skills run under a new fingerprint."""
    name = "skill-under-capability-drift"

    def _tail_is_bound(self, s: SystemState) -> bool:
        tail = s.consent_chain[-1] if s.consent_chain else None
        return (
            s.lifecycle in BOUND_STATES
            and tail is not None
            and tail.decision in (ConsentDecision.ACCEPTED, ConsentDecision.CONDITIONAL)
            and tail.policy_version == s.policy_version)

    def _apply_capability_bump(self, s: SystemState) -> SystemState:
        return replace(s, capability_version=s.capability_version + 1)


class NoRefetchFromStale(LifecycleModel):
    """Never leaves Stale: the caller stops fetching the policy after an invalidation."""
    name = "no-refetch-from-stale"

    def _can_fetch(self, s: SystemState) -> bool:
        return s.lifecycle == LifecycleState.IDLE


MUTANTS: dict[str, type[LifecycleModel]] = {
    m.name: m for m in (SkillFromRejected, PermitOnDisputed, SkillUnderCapabilityDrift, NoRefetchFromStale)}

_DEFAULT_MODEL = LifecycleModel()


def enabled_events(s: SystemState, model: LifecycleModel | None = None) -> tuple[LifecycleEvent, ...]:
    return (model or _DEFAULT_MODEL).enabled_events(s)


def step(s: SystemState, event: LifecycleEvent, model: LifecycleModel | None = None) -> SystemState:
    return (model or _DEFAULT_MODEL).step(s, event)


def replay(trace: Iterable[LifecycleEvent], model: LifecycleModel | None = None) -> SystemState:
    """Replays a trace from the initial state through step(), raising TransitionError on a disabled event."""
    model = model or _DEFAULT_MODEL
    s = model.initial_state()
    for event in trace:
        s = model.step(s, event)
    return s


def check_safety(s: SystemState) -> list[str]:
    """Returns the ids of the state properties among S1 and S3-S7 that s violates."""
    violated: list[str] = []
    chain = s.consent_chain
    binding = (ConsentDecision.ACCEPTED, ConsentDecision.CONDITIONAL)
    inv = s.last_invocation

    # S1: consent before skill
    if s.skill_calls > 0:
        if not any(c.decision in binding for c in chain):
            violated.append("S1")
        elif inv is None or not 0 <= inv.consent_index < len(chain) or chain[inv.consent_index].decision not in binding:
            violated.append("S1")

    # S3: every adherence event anchors to an existing record
    if any(not 0 <= a.consent_index < len(chain) for a in s.adherence_trail):
        violated.append("S3")

    # S4: each skill call follows a permit on an undisputed claim, under the same record
    if inv is not None:
        idx = inv.adherence_index
        if idx is None or not 0 <= idx < len(s.adherence_trail):
            violated.append("S4")
        else:
            governing = s.adherence_trail[idx]
            if (governing.decision != AdherenceDecision.PERMIT or governing.claim_disputed
                    or governing.consent_index != inv.consent_index):
                violated.append("S4")

    # S5/S6: disputed claims never yield permit
    if any(a.claim_disputed and a.decision == AdherenceDecision.PERMIT for a in s.adherence_trail):
        violated.extend(("S5", "S6"))

    # S7: no skill call under a capability fingerprint other than the one consented
    if inv is not None and 0 <= inv.consent_index < len(chain):
        if inv.capability_version != chain[inv.consent_index].capability_version:
            violated.append("S7")
    return violated


def check_edge(before: SystemState, after: SystemState) -> list[str]:
    """S2: chain and trail only grow, and every stored entry is kept unchanged."""
    if (len(after.consent_chain) < len(before.consent_chain)
            or after.consent_chain[:len(before.consent_chain)] != before.consent_chain
            or len(after.adherence_trail) < len(before.adherence_trail)
            or after.adherence_trail[:len(before.adherence_trail)] != before.adherence_trail
            or after.skill_calls < before.skill_calls):
        return ["S2"]
    return []


SAFETY_PROPERTIES = ("S1", "S2", "S3", "S4", "S5", "S6", "S7")
LIVENESS_PROPERTIES = {"L1": StaleCause.POLICY_BUMP, "L2": StaleCause.CAPABILITY_CHANGE}


@dataclass
class PropertyViolation:
    property_id: str
    trace: list[LifecycleEvent]
    state: SystemState

    def to_dict(self) -> dict[str, Any]:
        return {
            "property": self.property_id,
            "trace": [e.to_dict() for e in self.trace],
            "state": self.state.to_dict(),
        }


@dataclass
class ExplorationGraph:
    """The explored transition graph. Node 0 is the initial state."""
    states: list[SystemState]
    edges: list[list[tuple[LifecycleEvent, int]]]
    parents: list[tuple[int, LifecycleEvent] | None] = field(default_factory=list)

    def trace_to(self, node: int) -> list[LifecycleEvent]:
        trace: list[LifecycleEvent] = []
        while self.parents and self.parents[node] is not None:
            parent, event = self.parents[node]  # type: ignore[misc]
            trace.append(event)
            node = parent
        trace.reverse()
        return trace


@dataclass
class LivenessResult:
    property_id: str
    cause: StaleCause
    holds: bool
    pending_states: int
    witness: list[LifecycleEvent] | None = None
    cycle: list[LifecycleEvent] | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "property": self.property_id,
            "cause": self.cause.value,
            "holds": self.holds,
            "pending_states": self.pending_states,
            "witness": [e.to_dict() for e in self.witness] if self.witness is not None else None,
            "cycle": [e.to_dict() for e in self.cycle] if self.cycle is not None else None,
        }


@dataclass
class LivenessReport:
    results: list[LivenessResult]
    terminal_stale_states: int

    @property
    def holds(self) -> bool:
        return self.terminal_stale_states == 0 and all(r.holds for r in self.results)

    def result(self, property_id: str) -> LivenessResult:
        return next(r for r in self.results if r.property_id == property_id)

    def to_dict(self) -> dict[str, Any]:
        return {
            "holds": self.holds,
            "terminal_stale_states": self.terminal_stale_states,
            "properties": [r.to_dict() for r in self.results],
        }


@dataclass
class ExplorationReport:
    bounds: ExplorationBounds
    model: str
    reachable_states: int
    edges: int
    violations: list[PropertyViolation]
    terminal_stale_states: int
    governance_review_reachable: bool
    liveness: LivenessReport | None = None

    @property
    def ok(self) -> bool:
        return not self.violations and (self.liveness is None or self.liveness.holds)

    def property_status(self) -> dict[str, bool]:
        failed = {v.property_id for v in self.violations}
        status = {p: p not in failed for p in SAFETY_PROPERTIES}
        if self.liveness is not None:
            for r in self.liveness.results:
                status[r.property_id] = r.holds
        return status

    def to_dict(self) -> dict[str, Any]:
        return {
            "bounds": {
                "max_versions": self.bounds.max_versions,
                "max_adherence_events": self.bounds.max_adherence_events,
                "max_cap_versions": self.bounds.max_cap_versions,
            },
            "model": self.model,
            "ok": self.ok,
            "reachable_states": self.reachable_states,
            "edges": self.edges,
            "terminal_stale_states": self.terminal_stale_states,
            "governance_review_reachable": self.governance_review_reachable,
            "properties": self.property_status(),
            "violations": [v.to_dict() for v in self.violations],
            "liveness": self.liveness.to_dict() if self.liveness is not None else None,
        }


class ExplorationBudgetExceeded(Exception):
    """Raised when the reachable state space outgrows the exploration budget"""

    def __init__(self, report: ExplorationReport, frontier_size: int):
        super().__init__(
            f"Exploration stopped after {report.reachable_states} states with {frontier_size} "
            f"state(s) still on the frontier.")
        self._report = report
        self._frontier_size = frontier_size

    @property
    def report(self) -> ExplorationReport:
        """The partial report over the states visited before the budget ran out."""
        return self._report

    @property
    def frontier_size(self) -> int:
        return self._frontier_size


def _record_violation(violations: list[PropertyViolation], seen: set[str], prop: str,
                      trace: Callable[[], list[LifecycleEvent]], state: SystemState) -> None:
    # BFS order makes the first trace found for a property a shortest one
    if prop not in seen:
        seen.add(prop)
        violations.append(PropertyViolation(prop, trace(), state))


def build_graph(model: LifecycleModel, *, max_states: int | None = None,
                logger: logging.Logger | None = None) -> tuple[ExplorationGraph, list[PropertyViolation], int]:
    """Breadth-first enumeration of the reachable state graph.

    Returns the graph, the safety violations found (first per property), and the frontier
    size left when max_states was hit (zero when exploration completed).
    """
    initial = model.initial_state()
    graph = ExplorationGraph(states=[initial], edges=[], parents=[None])
    index: dict[SystemState, int] = {initial: 0}
    violations: list[PropertyViolation] = []
    seen_props: set[str] = set()

    for prop in check_safety(initial):
        _record_violation(violations, seen_props, prop, lambda: [], initial)

    queue: deque[int] = deque([0])
    while queue:
        if max_states is not None and len(graph.states) >= max_states:
            return graph, violations, len(queue)
        node = queue.popleft()
        state = graph.states[node]
        out: list[tuple[LifecycleEvent, int]] = []
        for event in model.enabled_events(state):
            target = model._apply(state, event)
            for prop in check_edge(state, target):
                _record_violation(
                    violations, seen_props, prop, lambda: graph.trace_to(node) + [event], target)
            target_node = index.get(target)
            if target_node is None:
                target_node = len(graph.states)
                index[target] = target_node
                graph.states.append(target)
                graph.parents.append((node, event))
                queue.append(target_node)
                for prop in check_safety(target):
                    _record_violation(
                        violations, seen_props, prop, lambda: graph.trace_to(target_node), target)
            out.append((event, target_node))
        while len(graph.edges) <= node:
            graph.edges.append([])
        graph.edges[node] = out
        if logger is not None and len(graph.states) % 50000 == 0:
            logger.debug(f"Explored {len(graph.states)} states, frontier {len(queue)}.")

    while len(graph.edges) < len(graph.states):
        graph.edges.append([])
    return graph, violations, 0


def _is_append_edge(event: LifecycleEvent) -> bool:
    return event.kind in CONSENT_EVENTS


def _strongly_connected_components(nodes: list[int], successors: Callable[[int], Iterable[int]]) -> list[list[int]]:
    """Iterative Tarjan over the subgraph induced by nodes."""
    index_of: dict[int, int] = {}
    low: dict[int, int] = {}
    on_stack: set[int] = set()
    stack: list[int] = []
    components: list[list[int]] = []
    counter = 0

    for root in nodes:
        if root in index_of:
            continue
        work: list[tuple[int, Iterable[int]]] = []
        index_of[root] = low[root] = counter
        counter += 1
        stack.append(root)
        on_stack.add(root)
        work.append((root, iter(successors(root))))
        while work:
            node, it = work[-1]
            advanced = False
            for succ in it:
                if succ not in index_of:
                    index_of[succ] = low[succ] = counter
                    counter += 1
                    stack.append(succ)
                    on_stack.add(succ)
                    work.append((succ, iter(successors(succ))))
                    advanced = True
                    break
                if succ in on_stack:
                    low[node] = min(low[node], index_of[succ])
            if advanced:
                continue
            work.pop()
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[node])
            if low[node] == index_of[node]:
                component = []
                while True:
                    member = stack.pop()
                    on_stack.discard(member)
                    component.append(member)
                    if member == node:
                        break
                components.append(component)
    return components


def _cycle_within(graph: ExplorationGraph, members: set[int], start: int,
                  edge_ok: Callable[[LifecycleEvent, int], bool]) -> list[LifecycleEvent]:
    """Shortest cycle from start back to start inside members, as a list of events."""
    parents: dict[int, tuple[int, LifecycleEvent]] = {}
    queue: deque[int] = deque([start])
    visited = {start}
    while queue:
        node = queue.popleft()
        for event, target in graph.edges[node]:
            if target not in members or not edge_ok(event, target):
                continue
            if target == start:
                cycle = [event]
                while node != start:
                    node, back = parents[node]
                    cycle.append(back)
                cycle.reverse()
                return cycle
            if target not in visited:
                visited.add(target)
                parents[target] = (node, event)
                queue.append(target)
    return []


def check_liveness(graph: ExplorationGraph) -> LivenessReport:
    """Checks eventual re-consent per stale cause over a complete exploration graph.

    Terminal states get an implicit stutter self-loop. For each cause, the states where
    that cause is pending must (a) all reach a consent-append edge and (b) contain no cycle
    that avoids one. Both are checked on the subgraph of pending states with append edges
    removed, via strongly connected components.
    """
    terminal_stale = sum(
        1 for i, s in enumerate(graph.states)
        if s.lifecycle == LifecycleState.STALE and not graph.edges[i])

    results = []
    for prop, cause in LIVENESS_PROPERTIES.items():
        pending = [i for i, s in enumerate(graph.states) if s.pending_stale_cause == cause]
        pending_set = set(pending)

        def keep(event: LifecycleEvent, target: int) -> bool:
            return not _is_append_edge(event) and target in pending_set

        def successors(node: int) -> list[int]:
            if not graph.edges[node]:
                return [node]
            return [t for e, t in graph.edges[node] if keep(e, t)]

        result = LivenessResult(prop, cause, True, len(pending))

        # (a) reverse reachability from states with an outgoing append edge
        can_reconsent = {i for i in pending if any(_is_append_edge(e) for e, _ in graph.edges[i])}
        predecessors: dict[int, list[int]] = {}
        for i in pending:
            for e, t in graph.edges[i]:
                if keep(e, t):
                    predecessors.setdefault(t, []).append(i)
        frontier = deque(can_reconsent)
        while frontier:
            node = frontier.popleft()
            for p in predecessors.get(node, ()):
                if p not in can_reconsent:
                    can_reconsent.add(p)
                    frontier.append(p)
        stuck = [i for i in pending if i not in can_reconsent]

        # (b) a cycle among pending states that never appends a record
        for component in _strongly_connected_components(pending, successors):
            node = component[0]
            if len(component) > 1 or node in successors(node):
                members = set(component)
                result.holds = False
                result.witness = graph.trace_to(node)
                if not graph.edges[node]:
                    result.cycle = []
                else:
                    result.cycle = _cycle_within(graph, members, node, keep)
                break

        if result.holds and stuck:
            result.holds = False
            result.witness = graph.trace_to(stuck[0])
        results.append(result)

    return LivenessReport(results, terminal_stale)


def explore(bounds: ExplorationBounds | None = None,
            model: LifecycleModel | type[LifecycleModel] | None = None,
            *,
            max_states: int | None = 2_000_000,
            liveness: bool = True,
            log_handler: logging.Handler | None = None,
            log_formatter: logging.Formatter | None = None) -> ExplorationReport:
    """Exhaustively explores the lifecycle model within bounds and checks S1-S7, L1 and L2."""
    bounds = bounds or ExplorationBounds()
    if model is None:
        model = LifecycleModel(bounds)
    elif isinstance(model, type):
        model = model(bounds)
    logger = shared.get_logger("explorer", log_handler, log_formatter)
    logger.info(
        f"Exploring model '{model.name}' at bounds ({bounds.max_versions}, {bounds.max_adherence_events}, "
        f"{bounds.max_cap_versions}).")

    graph, violations, frontier = build_graph(model, max_states=max_states, logger=logger)
    report = ExplorationReport(
        bounds=bounds,
        model=model.name,
        reachable_states=len(graph.states),
        edges=sum(len(e) for e in graph.edges),
        violations=violations,
        terminal_stale_states=sum(
            1 for i, s in enumerate(graph.states) if s.lifecycle == LifecycleState.STALE and not graph.edges[i]),
        governance_review_reachable=any(s.lifecycle == LifecycleState.GOVERNANCE_REVIEW for s in graph.states))
    if frontier:
        raise ExplorationBudgetExceeded(report, frontier)

    if liveness:
        report.liveness = check_liveness(graph)
    liveness_status = "skipped" if report.liveness is None else ("holds" if report.liveness.holds else "violated")
    logger.info(
        f"Explored {report.reachable_states} states and {report.edges} edges: "
        f"{len(report.violations)} safety violation(s), liveness {liveness_status}.")
    return report
