# Copyright (c) ACAP contributors.
# Licensed under the MIT License.

import hashlib
import logging
import math
import re
from datetime import date, datetime, timezone
from enum import Enum
from typing import Any, Mapping

import rfc8785
from pydantic import BaseModel

HASH_PREFIX = "sha256:"


class CanonicalizationError(ValueError):
    """Raised when a value has no RFC 8785 canonical form (NaN, Infinity, unsupported types)"""
    pass


def get_default_listen_address() -> tuple[str, int]:
    return "127.0.0.1", 8080


def get_logger(
        name: str | None = None,
        log_handler: logging.Handler | None = None,
        log_formatter: logging.Formatter | None = None) -> logging.Logger:
    logger = logging.Logger("acap" if not name else f"acap.{name}")

    # Add a default log handler if none is provided
    if log_handler is None:
        log_handler = logging.StreamHandler()
        log_handler.setLevel(logging.INFO)
    logger.handlers.append(log_handler)

    # Set a default log formatter to our handler if none is provided
    if log_formatter is None:
        log_formatter = logging.Formatter(
            fmt="%(asctime)s.%(msecs)03d %(name)s %(levelname)s: %(message)s",
            datefmt='%Y-%m-%d %H:%M:%S')
    log_handler.setFormatter(log_formatter)
    return logger


def _to_json_value(value: Any) -> Any:
    if isinstance(value, BaseModel):
        return _to_json_value(value.model_dump(mode="json"))
    if isinstance(value, Enum):
        return _to_json_value(value.value)
    if isinstance(value, (datetime, date)):
        return value.isoformat()
    if isinstance(value, Mapping):
        out: dict[str, Any] = {}
        for key, item in value.items():
            if not isinstance(key, str):
                raise CanonicalizationError(f"Object keys must be strings, got {type(key).__name__}.")
            out[key] = _to_json_value(item)
        return out
    if isinstance(value, (list, tuple)):
        return [_to_json_value(item) for item in value]
    if isinstance(value, float) and not math.isfinite(value):
        raise CanonicalizationError(f"Non-finite number {value!r} has no canonical JSON form.")
    if value is None or isinstance(value, (str, int, float, bool)):
        return value
    raise CanonicalizationError(f"Values of type {type(value).__name__} cannot be canonicalized.")


def canonicalize(value: Any) -> bytes:
    """Returns the RFC 8785 (JCS) canonical UTF-8 bytes of a JSON value.

    Pydantic models and enums are lowered to their JSON form first, so a record and
    its parsed wire representation canonicalize identically.
    """
    normalized = _to_json_value(value)
    try:
        return rfc8785.dumps(normalized)
    except (rfc8785.CanonicalizationError, ValueError, TypeError) as ex:
        raise CanonicalizationError(str(ex)) from ex


def content_hash(value: Any) -> str:
    return HASH_PREFIX + hashlib.sha256(canonicalize(value)).hexdigest()


def is_hash_string(value: str) -> bool:
    if not value.startswith(HASH_PREFIX):
        return False
    digest = value[len(HASH_PREFIX):]
    return len(digest) == 64 and all(c in "0123456789abcdef" for c in digest)


TIMESTAMP_FORMAT = "%Y-%m-%dT%H:%M:%SZ"


def utc_now() -> str:
    return datetime.now(timezone.utc).strftime(TIMESTAMP_FORMAT)


def format_timestamp(ts: datetime) -> str:
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc).strftime(TIMESTAMP_FORMAT)


def parse_timestamp(value: str) -> datetime:
    """Parses an ISO 8601 UTC timestamp with a "Z" suffix (fractional seconds allowed)."""
    if not value.endswith("Z"):
        raise ValueError(f"Timestamp '{value}' is not a UTC timestamp with a 'Z' suffix.")
    parsed = datetime.fromisoformat(value[:-1] + "+00:00")
    return parsed.astimezone(timezone.utc)


def parse_semver(value: str) -> tuple[int, int, int, tuple[str, ...]]:
    """Parses MAJOR.MINOR.PATCH[-PRERELEASE][+BUILD] into a sortable key.

    Build metadata is ignored. A version with a prerelease sorts before the release.
    """
    match = _SEMVER_PATTERN.fullmatch(value or "")
    if match is None:
        raise ValueError(f"'{value}' is not a semantic version.")
    prerelease = tuple(match.group(4).split(".")) if match.group(4) else ()
    return int(match.group(1)), int(match.group(2)), int(match.group(3)), prerelease


def semver_key(value: str) -> tuple:
    major, minor, patch, prerelease = parse_semver(value)
    if not prerelease:
        # releases sort after every prerelease of the same version
        return major, minor, patch, 1, ()
    parts = tuple((0, int(p), "") if p.isdigit() else (1, 0, p) for p in prerelease)
    return major, minor, patch, 0, parts


def compare_semver(left: str, right: str) -> int:
    lk, rk = semver_key(left), semver_key(right)
    return (lk > rk) - (lk < rk)


_SEMVER_PATTERN = re.compile(
    r"(0|[1-9]\d*)\.(0|[1-9]\d*)\.(0|[1-9]\d*)"
    r"(?:-((?:0|[1-9]\d*|\d*[A-Za-z-][0-9A-Za-z-]*)(?:\.(?:0|[1-9]\d*|\d*[A-Za-z-][0-9A-Za-z-]*))*))?"
    r"(?:\+([0-9A-Za-z-]+(?:\.[0-9A-Za-z-]+)*))?")
