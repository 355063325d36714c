# Copyright (c) ACAP contributors.
# Licensed under the MIT License.

"""Detached JWS signatures (RFC 7515, ES256) over the canonical form of protocol records."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from authlib.common.encoding import urlsafe_b64encode
from authlib.jose import JsonWebSignature
from authlib.jose.errors import JoseError
from cryptography.exceptions import UnsupportedAlgorithm
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric import ec

import acap.internal.shared as shared
from acap.model import TRecord, with_signature

JWS_ALGORITHM = "ES256"

_jws = JsonWebSignature(algorithms=[JWS_ALGORITHM])


class SigningKeyError(Exception):
    """Raised when key material is missing, malformed, or not an EC P-256 key"""
    pass


@dataclass(frozen=True)
class SigningKeyPair:
    private_pem: bytes
    public_pem: bytes
    kid: str | None = None


SigningKey = SigningKeyPair | bytes | str
VerificationKey = SigningKeyPair | bytes | str


def generate_signing_key(kid: str | None = None) -> SigningKeyPair:
    private_key = ec.generate_private_key(ec.SECP256R1())
    private_pem = private_key.private_bytes(
        encoding=serialization.Encoding.PEM,
        format=serialization.PrivateFormat.PKCS8,
        encryption_algorithm=serialization.NoEncryption())
    public_pem = private_key.public_key().public_bytes(
        encoding=serialization.Encoding.PEM,
        format=serialization.PublicFormat.SubjectPublicKeyInfo)
    return SigningKeyPair(private_pem, public_pem, kid)


def load_signing_key(path: str | os.PathLike, kid: str | None = None) -> SigningKeyPair:
    try:
        private_pem = Path(path).read_bytes()
    except OSError as ex:
        raise SigningKeyError(f"Unable to read signing key '{path}': {ex}") from ex
    private_key = _load_private_key(private_pem)
    public_pem = private_key.public_key().public_bytes(
        encoding=serialization.Encoding.PEM,
        format=serialization.PublicFormat.SubjectPublicKeyInfo)
    return SigningKeyPair(private_pem, public_pem, kid)


def load_verification_key(path: str | os.PathLike) -> bytes:
    try:
        pem = Path(path).read_bytes()
    except OSError as ex:
        raise SigningKeyError(f"Unable to read verification key '{path}': {ex}") from ex
    _load_public_key(pem)
    return pem


def write_signing_key(pair: SigningKeyPair, path: str | os.PathLike) -> Path:
    """Writes the private key to path (mode 0600) and the public key next to it with a .pub suffix."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(pair.private_pem)
    target.chmod(0o600)
    public_path = target.with_name(target.name + ".pub")
    public_path.write_bytes(pair.public_pem)
    return public_path


def _as_bytes(pem: bytes | str) -> bytes:
    return pem.encode("utf-8") if isinstance(pem, str) else pem


def _load_private_key(pem: bytes | str) -> ec.EllipticCurvePrivateKey:
    try:
        key = serialization.load_pem_private_key(_as_bytes(pem), password=None)
    except (ValueError, TypeError, UnsupportedAlgorithm) as ex:
        raise SigningKeyError(f"Invalid private key material: {ex}") from ex
    if not isinstance(key, ec.EllipticCurvePrivateKey) or not isinstance(key.curve, ec.SECP256R1):
        raise SigningKeyError(f"{JWS_ALGORITHM} requires an EC P-256 private key.")
    return key


def _load_public_key(pem: bytes | str) -> ec.EllipticCurvePublicKey:
    try:
        key = serialization.load_pem_public_key(_as_bytes(pem))
    except (ValueError, TypeError, UnsupportedAlgorithm) as ex:
        raise SigningKeyError(f"Invalid public key material: {ex}") from ex
    if not isinstance(key, ec.EllipticCurvePublicKey) or not isinstance(key.curve, ec.SECP256R1):
        raise SigningKeyError(f"{JWS_ALGORITHM} requires an EC P-256 public key.")
    return key


def signing_payload(record: TRecord) -> bytes:
    return shared.canonicalize(record.model_copy(update={"signature": ""}))


def sign_record(record: TRecord, key: SigningKey) -> str:
    """Returns a detached compact JWS (``header..signature``) over the record's canonical form.

    The record's own signature field is blanked before signing, so re-signing a signed
    record yields a signature over the same payload.
    """
    if isinstance(key, SigningKeyPair):
        private_pem, kid = key.private_pem, key.kid
    else:
        private_pem, kid = _as_bytes(key), None
    _load_private_key(private_pem)

    header = {"alg": JWS_ALGORITHM}
    if kid:
        header["kid"] = kid
    token = _jws.serialize_compact(header, signing_payload(record), private_pem)
    if isinstance(token, bytes):
        token = token.decode("ascii")
    protected, _, signature = token.split(".")
    return f"{protected}..{signature}"


def sign(record: TRecord, key: SigningKey) -> TRecord:
    """Signs the record and returns a copy carrying the signature."""
    return with_signature(record, sign_record(record, key))


def verify_record(record: TRecord, key: VerificationKey) -> bool:
    """True iff the record's detached signature verifies under key.

    Malformed or empty signatures verify as False. Unusable key material raises SigningKeyError.
    """
    public_pem = key.public_pem if isinstance(key, SigningKeyPair) else _as_bytes(key)
    _load_public_key(public_pem)

    parts = record.signature.split(".") if record.signature else []
    if len(parts) != 3 or parts[1] != "" or not parts[0] or not parts[2]:
        return False
    payload_segment = urlsafe_b64encode(signing_payload(record)).decode("ascii")
    token = f"{parts[0]}.{payload_segment}.{parts[2]}"
    try:
        _jws.deserialize_compact(token, public_pem)
    except (JoseError, ValueError, TypeError):
        return False
    return True


def verify_with_any(record: TRecord, keys: Iterable[VerificationKey]) -> bool:
    return any(verify_record(record, k) for k in keys)
