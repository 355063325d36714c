# Copyright (c) ACAP contributors.
# Licensed under the MIT License.

"""Micro-benchmarks for policy hashing and chain/trail validation."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

import acap.internal.helpers as helpers
from acap.chain import validate_adherence_trail, validate_consent_chain
from acap.model import (AdherenceDecision, AdherenceEvent, ConsentDecision,
                        ConsentRecord, Constraint, PolicyClaim, PolicyDocument,
                        ReconsentTrigger, RuleType, compute_policy_hash,
                        seal_policy)

DEFAULT_SAMPLES = 300
MIN_SAMPLES = 200
MAX_SAMPLES = 500
WARMUP_ITERATIONS = 50

POLICY_HASH = "compute_policy_hash"
CHAIN_VALIDATION = "validate_consent_chain"
TRAIL_VALIDATION = "validate_adherence_trail"

DEFAULT_GRID: dict[str, tuple[int, ...]] = {
    POLICY_HASH: (10, 50, 200),
    CHAIN_VALIDATION: (1, 5, 20),
    TRAIL_VALIDATION: (10, 100, 1000),
}

_BENCH_TIMESTAMP = "2026-01-01T00:00:00Z"
_CALLER = "urn:acap:bench:caller"
_CALLEE = "urn:acap:bench:callee"


@dataclass(frozen=True)
class BenchRow:
    operation: str
    size: int
    median_us: int
    p99_us: int
    samples: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "operation": self.operation,
            "size": self.size,
            "median_us": self.median_us,
            "p99_us": self.p99_us,
            "samples": self.samples,
        }


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)

    def row(self, operation: str, size: int) -> BenchRow | None:
        return next((r for r in self.rows if r.operation == operation and r.size == size), None)

    def to_dict(self) -> dict[str, Any]:
        return {"rows": [r.to_dict() for r in self.rows]}

    def format_table(self) -> str:
        header = f"{'operation':<26} {'size':>6} {'median (us)':>12} {'p99 (us)':>10} {'samples':>8}"
        lines = [header, "-" * len(header)]
        for r in self.rows:
            lines.append(f"{r.operation:<26} {r.size:>6} {r.median_us:>12} {r.p99_us:>10} {r.samples:>8}")
        return "\n".join(lines)


def synthetic_policy(claims: int, version: str = "1.0.0") -> PolicyDocument:
    """A sealed policy with the given number of purpose-constrained prohibitions."""
    return seal_policy(PolicyDocument(
        version=version,
        effective_date=_BENCH_TIMESTAMP,
        supersedes=None,
        claims=tuple(
            PolicyClaim(
                id=f"claim-{i:04d}",
                rule_type=RuleType.PROHIBITION,
                action="odrl:use",
                asset=f"data:set-{i}",
                constraint=Constraint(left_operand="purpose", operator="eq", right_operand=f"purpose-{i}"),
                clause_ref=f"§{i + 1}",
                since_version=version)
            for i in range(claims)),
        publisher=_CALLEE,
        natural_language_uri="https://example.invalid/terms"))


def synthetic_chain(length: int, policy: PolicyDocument | None = None) -> list[ConsentRecord]:
    """A well-linked consent chain of the given length against one policy."""
    policy = policy or synthetic_policy(10)
    parsed = [helpers.new_parsed_claim(c.id) for c in policy.claims]
    records: list[ConsentRecord] = []
    for i in range(length):
        records.append(helpers.new_consent_record(
            caller=_CALLER,
            callee=_CALLEE,
            policy_version=policy.version,
            policy_hash=policy.hash,
            parsed_claims=parsed,
            decision=ConsentDecision.ACCEPTED,
            caller_capability_hash="sha256:" + "0" * 64,
            prev_id=records[-1].id if records else None,
            reconsent_trigger=ReconsentTrigger.PRINCIPAL_CHANGE if records else None,
            timestamp=_BENCH_TIMESTAMP,
            record_id=f"record-{i:04d}"))
    return records


def synthetic_trail(length: int, record: ConsentRecord) -> list[AdherenceEvent]:
    """A well-linked adherence trail of permits anchored to record."""
    claim_id = record.parsed_claims[0].claim_id if record.parsed_claims else ""
    events: list[AdherenceEvent] = []
    for i in range(length):
        events.append(helpers.new_adherence_event(
            consent_record_id=record.id,
            action="bench_skill",
            claim_id=claim_id,
            clause_ref="§1",
            decision=AdherenceDecision.PERMIT,
            reasoning="Synthetic benchmark evaluation. Permitting.",
            context={"purpose": "statistical_analysis"},
            prev_id=events[-1].id if events else None,
            timestamp=_BENCH_TIMESTAMP,
            event_id=f"event-{i:05d}"))
    return events


def measure(fn: Callable[[], Any], samples: int = DEFAULT_SAMPLES, warmup: int = WARMUP_ITERATIONS) -> tuple[int, int]:
    """Returns (median, p99) of fn's wall time in whole microseconds. Warm-up runs are discarded."""
    if not MIN_SAMPLES <= samples <= MAX_SAMPLES:
        raise ValueError(f"samples must be between {MIN_SAMPLES} and {MAX_SAMPLES}, got {samples}.")
    for _ in range(warmup):
        fn()
    timings = []
    for _ in range(samples):
        start = time.perf_counter_ns()
        fn()
        timings.append((time.perf_counter_ns() - start) / 1000)
    median = statistics.median(timings)
    p99 = statistics.quantiles(timings, n=100, method="inclusive")[98]
    return round(median), max(round(median), round(p99))


def _workload(operation: str, size: int) -> Callable[[], Any]:
    if operation == POLICY_HASH:
        doc = synthetic_policy(size)
        return lambda: compute_policy_hash(doc)
    if operation == CHAIN_VALIDATION:
        policy = synthetic_policy(10)
        chain = synthetic_chain(size, policy)
        documents = {policy.hash: policy}
        return lambda: validate_consent_chain(chain, documents)
    if operation == TRAIL_VALIDATION:
        chain = synthetic_chain(1)
        trail = synthetic_trail(size, chain[0])
        return lambda: validate_adherence_trail(trail, chain)
    raise ValueError(f"Unknown benchmark operation '{operation}'.")


def run_bench(grid: dict[str, Iterable[int]] | None = None,
              samples: int = DEFAULT_SAMPLES,
              warmup: int = WARMUP_ITERATIONS) -> BenchReport:
    report = BenchReport()
    for operation, sizes in (grid or DEFAULT_GRID).items():
        for size in sizes:
            median, p99 = measure(_workload(operation, size), samples, warmup)
            report.rows.append(BenchRow(operation, size, median, p99, samples))
    return report
