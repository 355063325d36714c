# Copyright (c) ACAP contributors.
# Licensed under the MIT License.

"""The ``acap`` command line."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

from pydantic import ValidationError

from acap.bench import (CHAIN_VALIDATION, DEFAULT_GRID, DEFAULT_SAMPLES,
                        POLICY_HASH, TRAIL_VALIDATION, WARMUP_ITERATIONS,
                        run_bench)
from acap.chain import (AuditFormatError, import_audit,
                        validate_adherence_trail, validate_audit,
                        validate_consent_chain)
from acap.config import ConfigError, load_service_settings
from acap.lifecycle import (MUTANTS, ExplorationBounds,
                            ExplorationBudgetExceeded, ExplorationReport,
                            LifecycleModel, explore)
from acap.model import (AdherenceEvent, CapabilityManifest, ConsentRecord,
                        PolicyDocument, ValidationReport,
                        compute_capability_hash, compute_policy_hash,
                        json_schemas, validate_document)
from acap.policy import PolicyVersionError, diff_policies
from acap.signing import generate_signing_key, write_signing_key

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_UNUSABLE = 2


class InputError(Exception):
    """Raised when an input file cannot be read or parsed"""
    pass


def _read_json(path: str) -> Any:
    """Reads a JSON document, or a JSON Lines file (one document per line) as a list."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as ex:
        raise InputError(f"Unable to read '{path}': {ex}") from ex
    try:
        if path.endswith(".jsonl"):
            return [json.loads(line) for line in text.splitlines() if line.strip()]
        return json.loads(text)
    except json.JSONDecodeError as ex:
        raise InputError(f"'{path}' is not valid JSON: {ex}") from ex


def _parse(model: type, data: Any, path: str) -> Any:
    try:
        return model.model_validate(data)
    except ValidationError as ex:
        raise InputError(f"'{path}' is not a valid {model.__name__}: {ex}") from ex


def _load_policy(path: str) -> PolicyDocument:
    return _parse(PolicyDocument, _read_json(path), path)


def _emit(args: argparse.Namespace, payload: dict[str, Any], text: str) -> None:
    if args.json:
        print(json.dumps(payload, indent=2, ensure_ascii=False))
    else:
        print(text)


def _format_report(report: ValidationReport) -> str:
    if report.ok:
        return "ok: no violations"
    return "\n".join(
        f"{v.code}" + (f" at {v.position}" if v.position is not None else "") + f": {v.detail}"
        for v in report.violations)


def cmd_hash(args: argparse.Namespace) -> int:
    data = _read_json(args.file)
    if isinstance(data, dict) and "claims" in data:
        kind, value = "policy", compute_policy_hash(_parse(PolicyDocument, data, args.file))
    elif isinstance(data, dict) and "model_identifier" in data:
        kind, value = "capability_manifest", compute_capability_hash(_parse(CapabilityManifest, data, args.file))
    else:
        raise InputError(f"'{args.file}' is neither a policy document nor a capability manifest.")
    _emit(args, {"kind": kind, "hash": value}, value)
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    documents = [_load_policy(p) for p in args.policy or ()]
    data = _read_json(args.chain)
    report = ValidationReport()

    for doc in documents:
        for v in validate_document(doc).violations:
            report.add(v.code, f"policy v{doc.version}" + (f"[{v.position}]" if v.position is not None else ""),
                       v.detail)

    if isinstance(data, dict) and "consent_chain" in data:
        try:
            import_audit(data)
        except AuditFormatError as ex:
            raise InputError(str(ex)) from ex
        report.extend(validate_audit(data, documents))
    else:
        if not isinstance(data, list):
            raise InputError(f"'{args.chain}' must hold an audit export or a list of consent records.")
        records = [_parse(ConsentRecord, r, args.chain) for r in data]
        report.extend(validate_consent_chain(records, documents or None))
        if args.trail:
            trail_data = _read_json(args.trail)
            if not isinstance(trail_data, list):
                raise InputError(f"'{args.trail}' must hold a list of adherence events.")
            events = [_parse(AdherenceEvent, e, args.trail) for e in trail_data]
            report.extend(validate_adherence_trail(events, records))

    _emit(args, report.to_dict(), _format_report(report))
    return EXIT_OK if report.ok else EXIT_FAILED


def cmd_diff(args: argparse.Namespace) -> int:
    old, new = _load_policy(args.old), _load_policy(args.new)
    try:
        diff = diff_policies(old, new)
    except PolicyVersionError as ex:
        _emit(args, {"error": "version_order", "detail": str(ex)}, f"error: {ex}")
        return EXIT_FAILED
    lines = [f"v{old.version} -> v{new.version}"]
    for label, ids in (("added", diff.added), ("removed", diff.removed), ("retained", diff.retained)):
        lines.append(f"{label}: {', '.join(ids) if ids else '-'}")
    _emit(args, {"old": old.version, "new": new.version, **diff.to_dict()}, "\n".join(lines))
    return EXIT_OK


def _format_exploration(report: ExplorationReport) -> str:
    lines = [
        f"model {report.model}, bounds ({report.bounds.max_versions}, {report.bounds.max_adherence_events}, "
        f"{report.bounds.max_cap_versions})",
        f"{report.reachable_states} reachable states, {report.edges} edges",
    ]
    for prop, holds in report.property_status().items():
        lines.append(f"  {prop}: {'holds' if holds else 'VIOLATED'}")
    for v in report.violations:
        lines.append(f"counterexample for {v.property_id}:")
        lines.extend(f"  {i + 1}. {event}" for i, event in enumerate(v.trace))
    if report.liveness is not None:
        for r in report.liveness.results:
            if not r.holds:
                lines.append(f"liveness counterexample for {r.property_id} ({r.cause.value}):")
                lines.extend(f"  {i + 1}. {event}" for i, event in enumerate(r.witness or ()))
                lines.extend(f"  loop: {event}" for event in r.cycle or ())
    return "\n".join(lines)


def cmd_explore(args: argparse.Namespace, log_handler: logging.Handler) -> int:
    bounds = ExplorationBounds(args.max_versions, args.max_adherence, args.max_cap)
    model: type[LifecycleModel] = MUTANTS[args.inject_bug] if args.inject_bug else LifecycleModel
    try:
        report = explore(bounds, model, max_states=args.max_states, liveness=not args.no_liveness,
                         log_handler=log_handler)
    except ExplorationBudgetExceeded as ex:
        _emit(args, {"error": "budget_exceeded", "frontier": ex.frontier_size, "partial": ex.report.to_dict()},
              f"error: {ex}")
        return EXIT_UNUSABLE
    _emit(args, report.to_dict(), _format_exploration(report))
    return EXIT_OK if report.ok else EXIT_FAILED


def cmd_bench(args: argparse.Namespace) -> int:
    grid = {
        POLICY_HASH: tuple(args.policy_sizes or DEFAULT_GRID[POLICY_HASH]),
        CHAIN_VALIDATION: tuple(args.chain_sizes or DEFAULT_GRID[CHAIN_VALIDATION]),
        TRAIL_VALIDATION: tuple(args.trail_sizes or DEFAULT_GRID[TRAIL_VALIDATION]),
    }
    report = run_bench(grid, samples=args.samples, warmup=args.warmup)
    _emit(args, report.to_dict(), report.format_table())
    return EXIT_OK


def cmd_demo(args: argparse.Namespace, log_handler: logging.Handler) -> int:
    from acap.demo import DemoError, run_demo

    try:
        transcript = run_demo(args.callee_port, host=args.host, separate_process=args.separate_process,
                              log_handler=log_handler)
    except DemoError as ex:
        _emit(args, {"ok": False, "error": str(ex)}, f"error: {ex}")
        return EXIT_FAILED
    _emit(args, transcript.to_dict(),
          transcript.render() + f"\n\n{'ok' if transcript.ok else 'FAILED'} in {transcript.elapsed_seconds:.2f}s")
    return EXIT_OK if transcript.ok else EXIT_FAILED


def cmd_serve(args: argparse.Namespace, log_handler: logging.Handler) -> int:
    import uvicorn

    from acap.service import create_app, service_from_settings

    if args.demo:
        from acap.demo import DEMO_PORT, build_demo_service

        host = args.host or "127.0.0.1"
        port = args.port or DEMO_PORT
        service = build_demo_service(f"http://{host}:{port}", log_handler=log_handler)
    else:
        settings = load_service_settings(args.config)
        if args.host:
            settings.listen_host = args.host
        if args.port:
            settings.listen_port = args.port
        host, port = settings.listen_host, settings.listen_port
        service = service_from_settings(settings, log_handler=log_handler)
    uvicorn.run(create_app(service), host=host, port=port, log_level="info" if args.verbose else "warning")
    return EXIT_OK


def cmd_keygen(args: argparse.Namespace) -> int:
    public_path = write_signing_key(generate_signing_key(args.kid), args.path)
    _emit(args, {"private_key": str(args.path), "public_key": str(public_path)},
          f"wrote {args.path} and {public_path}")
    return EXIT_OK


def cmd_schemas(args: argparse.Namespace) -> int:
    target = Path(args.directory)
    try:
        target.mkdir(parents=True, exist_ok=True)
        written = []
        for name, schema in json_schemas().items():
            path = target / f"{name}.json"
            path.write_text(json.dumps(schema, indent=2) + "\n", encoding="utf-8")
            written.append(str(path))
    except OSError as ex:
        raise InputError(f"Unable to write schemas to '{target}': {ex}") from ex
    _emit(args, {"written": written}, "\n".join(f"wrote {p}" for p in written))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="acap", description="Agent Consent and Adherence Protocol tools")
    parser.add_argument("--json", action="store_true", help="print machine-readable JSON")
    parser.add_argument("--verbose", action="store_true", help="log debug detail to stderr")
    # accepted after the subcommand too; SUPPRESS keeps the subparser from resetting them
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", default=argparse.SUPPRESS)
    common.add_argument("--verbose", action="store_true", default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("hash", parents=[common], help="print the content hash of a policy or capability manifest")
    p.add_argument("file")

    p = sub.add_parser("validate", parents=[common], help="validate a consent chain, trail or audit export")
    p.add_argument("chain", help="audit export, or a JSON/JSONL list of consent records")
    p.add_argument("--trail", help="JSON/JSONL list of adherence events anchored to the chain")
    p.add_argument("--policy", action="append", help="policy document the records cite (repeatable)")

    p = sub.add_parser("diff", parents=[common], help="diff two policy versions by claim id")
    p.add_argument("old")
    p.add_argument("new")

    p = sub.add_parser("explore", parents=[common], help="exhaustively check the consent lifecycle model")
    p.add_argument("--max-versions", type=int, default=3)
    p.add_argument("--max-adherence", type=int, default=4)
    p.add_argument("--max-cap", type=int, default=2)
    p.add_argument("--max-states", type=int, default=2_000_000)
    p.add_argument("--no-liveness", action="store_true")
    p.add_argument("--inject-bug", choices=sorted(MUTANTS), help="explore a deliberately broken model")

    p = sub.add_parser("bench", parents=[common], help="micro-benchmark hashing and validation")
    p.add_argument("--samples", type=int, default=DEFAULT_SAMPLES)
    p.add_argument("--warmup", type=int, default=WARMUP_ITERATIONS)
    p.add_argument("--policy-sizes", type=int, nargs="+")
    p.add_argument("--chain-sizes", type=int, nargs="+")
    p.add_argument("--trail-sizes", type=int, nargs="+")

    p = sub.add_parser("demo", parents=[common], help="run the two-agent demo over loopback HTTP")
    p.add_argument("--callee-port", type=int, default=8765)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--separate-process", action="store_true", help="run the callee in a child process")

    p = sub.add_parser("serve", parents=[common], help="run a callee service")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--config", help="YAML service settings")
    group.add_argument("--demo", action="store_true", help="serve the demo callee")
    p.add_argument("--host")
    p.add_argument("--port", type=int)

    p = sub.add_parser("keygen", parents=[common], help="write a new ES256 signing key pair")
    p.add_argument("path")
    p.add_argument("--kid")

    p = sub.add_parser("schemas", parents=[common], help="write JSON schemas of the wire records")
    p.add_argument("directory", nargs="?", default="docs/schemas")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    log_handler = logging.StreamHandler(sys.stderr)
    if args.verbose:
        log_handler.setLevel(logging.DEBUG)
    else:
        log_handler.setLevel(logging.INFO if args.command == "serve" else logging.WARNING)

    commands: dict[str, Callable[[], int]] = {
        "hash": lambda: cmd_hash(args),
        "validate": lambda: cmd_validate(args),
        "diff": lambda: cmd_diff(args),
        "explore": lambda: cmd_explore(args, log_handler),
        "bench": lambda: cmd_bench(args),
        "demo": lambda: cmd_demo(args, log_handler),
        "serve": lambda: cmd_serve(args, log_handler),
        "keygen": lambda: cmd_keygen(args),
        "schemas": lambda: cmd_schemas(args),
    }
    try:
        return commands[args.command]()
    except InputError as ex:
        _emit(args, {"error": "unreadable_input", "detail": str(ex)}, f"error: {ex}")
        # hash reports unusable input as a plain failure
        return EXIT_FAILED if args.command == "hash" else EXIT_UNUSABLE
    except (ConfigError, ValueError) as ex:
        _emit(args, {"error": "invalid_arguments", "detail": str(ex)}, f"error: {ex}")
        return EXIT_UNUSABLE


if __name__ == "__main__":
    sys.exit(main())
