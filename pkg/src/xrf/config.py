"""Loading of the server's configuration files.

* offerings: JSON list of offering codes.
* permissions: JSON object ``{offering: {endpoint: ["read", "write"]}}``.
* trust store: JSON object ``{principal uuid: public key PEM}``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

from cryptography.hazmat.primitives.asymmetric import rsa

from .crypto import load_public_key, public_key_to_pem
from .model import PermissionsMatrix, ValidationError, canonical_uuid


class ConfigError(Exception):
    """A configuration file is missing or unusable; the message names it."""


def _read_json(path: str | Path, what: str) -> Any:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"{what} file not found: {path}") from None
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read {what} file {path}: {exc}") from None


def default_data_path(name: str) -> Path:
    return Path(str(resources.files("xrf") / "data" / name))


def load_offerings(path: str | Path | None = None) -> frozenset[str]:
    path = path or default_data_path("offerings.json")
    data = _read_json(path, "offerings")
    if not isinstance(data, list) or not all(isinstance(c, str) and c for c in data):
        raise ConfigError(f"offerings file {path} must be a JSON list of non-empty strings")
    return frozenset(data)


def load_permissions(path: str | Path | None = None, offerings: frozenset[str] | None = None) -> PermissionsMatrix:
    path = path or default_data_path("permissions.json")
    data = _read_json(path, "permissions")
    try:
        matrix = PermissionsMatrix.from_dict(data)
    except (ValidationError, TypeError, AttributeError) as exc:
        raise ConfigError(f"bad permissions file {path}: {exc}") from None
    if offerings is not None:
        unknown = set(matrix.rules) - offerings
        if unknown:
            raise ConfigError(f"permissions file {path} names unknown offerings: {sorted(unknown)}")
    return matrix


def load_trust_store(path: str | Path) -> dict[str, rsa.RSAPublicKey]:
    data = _read_json(path, "trust store")
    if not isinstance(data, dict):
        raise ConfigError(f"trust store {path} must be a JSON object")
    store: dict[str, rsa.RSAPublicKey] = {}
    cache: dict[str, rsa.RSAPublicKey] = {}
    for principal, pem in data.items():
        try:
            canonical_uuid(principal, "principal")
            if pem not in cache:
                cache[pem] = load_public_key(pem.encode("ascii"))
        except Exception as exc:
            raise ConfigError(f"bad trust store entry {principal!r} in {path}: {exc}") from None
        store[principal] = cache[pem]
    return store


def dump_trust_store(store: dict[str, rsa.RSAPublicKey], path: str | Path) -> None:
    pems: dict[int, str] = {}
    out = {}
    for principal, key in store.items():
        if id(key) not in pems:
            pems[id(key)] = public_key_to_pem(key).decode("ascii")
        out[principal] = pems[id(key)]
    Path(path).write_text(json.dumps(out, indent=1), encoding="utf-8")


@dataclass
class ServerConfig:
    listen: str = "127.0.0.1:8080"
    workers: int = 6
    token_ttl: int = 300
    session_ttl: int = 600
    permissions: str | None = None
    trust_store: str | None = None
    offerings: str | None = None
    key: str | None = None
    issuer: str = "xrf"
    key_pool: int = 16
    key_stock: str | None = None

    def __post_init__(self) -> None:
        if self.workers < 1:
            raise ConfigError("worker count must be >= 1")
        if self.token_ttl <= 0:
            raise ConfigError("token TTL must be > 0")
        if self.session_ttl <= 0:
            raise ConfigError("session TTL must be > 0")
        if self.key_pool < 0:
            raise ConfigError("key pool size must be >= 0")
