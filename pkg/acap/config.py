# Copyright (c) ACAP contributors.
# Licensed under the MIT License.

from __future__ import annotations

import importlib
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import yaml
from pydantic import ValidationError

import acap.internal.shared as shared
from acap.model import (AdherenceMode, CapabilityManifest, ValiditySentinel,
                        seal_manifest)
from acap.policy import CallerIntent


class ConfigError(ValueError):
    """Raised when a configuration file or environment override is invalid"""
    pass


@dataclass(frozen=True)
class SkillSettings:
    name: str
    handler: str
    policy_claims: tuple[str, ...] = ()
    description: str | None = None

    def load_handler(self):
        """Imports the handler given as "package.module:function"."""
        module_name, _, attr = self.handler.partition(":")
        if not module_name or not attr:
            raise ConfigError(f"Skill '{self.name}' handler '{self.handler}' must look like 'module:function'.")
        try:
            return getattr(importlib.import_module(module_name), attr)
        except (ImportError, AttributeError) as ex:
            raise ConfigError(f"Unable to load handler '{self.handler}' for skill '{self.name}': {ex}") from ex


@dataclass
class ServiceSettings:
    listen_host: str = field(default_factory=lambda: shared.get_default_listen_address()[0])
    listen_port: int = field(default_factory=lambda: shared.get_default_listen_address()[1])
    base_url: str | None = None
    publisher_id: str | None = None
    agent_name: str = "acap-callee"
    description: str = ""
    policy_path: str | None = None
    adherence_mode: AdherenceMode = AdherenceMode.LOCAL
    signing_key_path: str | None = None
    trusted_keys: dict[str, list[str]] = field(default_factory=dict)
    store_dir: str | None = None
    skills: list[SkillSettings] = field(default_factory=list)

    def resolved_base_url(self) -> str:
        return self.base_url or f"http://{self.listen_host}:{self.listen_port}"

    def resolved_publisher_id(self) -> str:
        return self.publisher_id or self.resolved_base_url()


@dataclass
class CallerSettings:
    caller_agent_id: str = ""
    principal_id: str = ""
    callee_url: str | None = None
    capability_manifest: CapabilityManifest | None = None
    intent: CallerIntent | None = None
    valid_until: str = ValiditySentinel.ON_ANY_CHANGE.value
    signing_key_path: str | None = None
    store_dir: str | None = None
    max_retries: int = 3
    retry_backoff_seconds: float = 0.2


_SERVICE_ENV = {
    "ACAP_LISTEN_HOST": "listen_host",
    "ACAP_LISTEN_PORT": "listen_port",
    "ACAP_BASE_URL": "base_url",
    "ACAP_POLICY_PATH": "policy_path",
    "ACAP_ADHERENCE_MODE": "adherence_mode",
    "ACAP_SIGNING_KEY": "signing_key_path",
    "ACAP_STORE_DIR": "store_dir",
}

_CALLER_ENV = {
    "ACAP_CALLEE_URL": "callee_url",
    "ACAP_CALLER_SIGNING_KEY": "signing_key_path",
    "ACAP_CALLER_STORE_DIR": "store_dir",
}


def _read_yaml(path: str | os.PathLike | None) -> dict[str, Any]:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    except OSError as ex:
        raise ConfigError(f"Unable to read config file '{path}': {ex}") from ex
    except yaml.YAMLError as ex:
        raise ConfigError(f"Config file '{path}' is not valid YAML: {ex}") from ex
    if not isinstance(data, dict):
        raise ConfigError(f"Config file '{path}' must contain a mapping at the top level.")
    return data


def _relative_to(base: Path | None, value: str | None) -> str | None:
    if value is None or base is None or os.path.isabs(value):
        return value
    return str(base / value)


def _apply_env(data: dict[str, Any], environ: Mapping[str, str], mapping: Mapping[str, str]) -> None:
    for var, key in mapping.items():
        if var in environ and environ[var] != "":
            data[key] = environ[var]


def _check_keys(data: Mapping[str, Any], cls: type, path: Any) -> None:
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"Unknown setting(s) in '{path}': {', '.join(unknown)}.")


def load_service_settings(path: str | os.PathLike | None = None,
                          environ: Mapping[str, str] | None = None) -> ServiceSettings:
    """Loads callee settings from a YAML file, then applies ACAP_* environment overrides.

    Relative paths in the file resolve against the file's directory.
    """
    environ = os.environ if environ is None else environ
    data = _read_yaml(path)
    skills = data.pop("skills", None) or []
    _check_keys(data, ServiceSettings, path)
    base = Path(path).parent if path is not None else None
    for key in ("policy_path", "signing_key_path", "store_dir"):
        data[key] = _relative_to(base, data.get(key))
    data["trusted_keys"] = {
        agent: [_relative_to(base, p) for p in ([paths] if isinstance(paths, str) else paths)]
        for agent, paths in (data.get("trusted_keys") or {}).items()}
    _apply_env(data, environ, _SERVICE_ENV)

    try:
        if "listen_port" in data:
            data["listen_port"] = int(data["listen_port"])
        if "adherence_mode" in data:
            data["adherence_mode"] = AdherenceMode(data["adherence_mode"])
    except ValueError as ex:
        raise ConfigError(f"Invalid service setting: {ex}") from ex
    try:
        data["skills"] = [
            SkillSettings(
                name=str(s["name"]), handler=str(s["handler"]),
                policy_claims=tuple(s.get("policy_claims") or ()), description=s.get("description"))
            for s in skills]
    except (KeyError, TypeError, AttributeError) as ex:
        raise ConfigError(f"Invalid skill entry: {ex}") from ex
    return ServiceSettings(**{k: v for k, v in data.items() if v is not None})


def load_caller_settings(path: str | os.PathLike | None = None,
                         environ: Mapping[str, str] | None = None) -> CallerSettings:
    """Loads caller settings from a YAML file, then applies ACAP_* environment overrides."""
    environ = os.environ if environ is None else environ
    data = _read_yaml(path)
    _check_keys(data, CallerSettings, path)
    base = Path(path).parent if path is not None else None
    for key in ("signing_key_path", "store_dir"):
        data[key] = _relative_to(base, data.get(key))
    _apply_env(data, environ, _CALLER_ENV)

    try:
        if data.get("capability_manifest") is not None:
            data["capability_manifest"] = seal_manifest(CapabilityManifest.model_validate(
                {**data["capability_manifest"], "caller_capability_hash": ""}))
        if data.get("intent") is not None:
            raw = data["intent"]
            data["intent"] = CallerIntent(
                purpose_statement=str(raw.get("purpose_statement", "")),
                declared_purposes=tuple(raw.get("declared_purposes") or ()),
                declared_context=dict(raw.get("declared_context") or {}))
        if "max_retries" in data:
            data["max_retries"] = int(data["max_retries"])
        if "retry_backoff_seconds" in data:
            data["retry_backoff_seconds"] = float(data["retry_backoff_seconds"])
    except (ValidationError, ValueError, TypeError, AttributeError) as ex:
        raise ConfigError(f"Invalid caller setting: {ex}") from ex

    settings = CallerSettings(**{k: v for k, v in data.items() if v is not None})
    if settings.valid_until not in {s.value for s in ValiditySentinel}:
        try:
            shared.parse_timestamp(settings.valid_until)
        except ValueError as ex:
            raise ConfigError(f"valid_until must be a sentinel or a UTC timestamp: {ex}") from ex
    return settings
