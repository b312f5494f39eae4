"""Domain values shared by the server, the client sidecar and the harness.

Everything here is pure: no sockets, no clocks, no files.
"""

from __future__ import annotations

import enum
import uuid
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Collection, Iterable, Mapping


class ValidationError(ValueError):
    """A value does not satisfy its type's invariants."""


class NoCandidateError(LookupError):
    """Discovery produced nothing to choose from."""


class Status(str, enum.Enum):
    REGISTERING = "REGISTERING"
    AVAILABLE = "AVAILABLE"
    SUSPENDED = "SUSPENDED"
    DEREGISTERED = "DEREGISTERED"


class Scope(str, enum.Enum):
    READ = "read"
    WRITE = "write"

    @classmethod
    def parse(cls, value: str | Scope) -> Scope:
        if isinstance(value, Scope):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValidationError(f"unknown scope {value!r}") from None


def canonical_uuid(value: Any, what: str = "uuid") -> str:
    """Return the lowercase hyphenated form, rejecting anything else."""
    if not isinstance(value, str):
        raise ValidationError(f"{what} must be a string")
    try:
        parsed = uuid.UUID(value)
    except ValueError:
        raise ValidationError(f"{what} is not a UUID: {value!r}") from None
    if str(parsed) != value:
        raise ValidationError(f"{what} is not in canonical form: {value!r}")
    return value


PROFILE_FIELDS = (
    "xAppInstanceID",
    "xAppInstanceName",
    "xAppOffering",
    "xAppStatus",
    "xAppLocation",
    "xAppLoad",
    "endpointAddress",
)


@dataclass(frozen=True)
class XAppProfile:
    xAppInstanceID: str
    xAppInstanceName: str
    xAppOffering: str
    xAppStatus: Status
    xAppLocation: str
    xAppLoad: int
    endpointAddress: str

    def __post_init__(self) -> None:
        canonical_uuid(self.xAppInstanceID, "xAppInstanceID")
        if not isinstance(self.xAppInstanceName, str) or not 1 <= len(self.xAppInstanceName) <= 128:
            raise ValidationError("xAppInstanceName must be 1-128 characters")
        if not isinstance(self.xAppOffering, str) or not self.xAppOffering:
            raise ValidationError("xAppOffering must be a non-empty code")
        if not isinstance(self.xAppStatus, Status):
            try:
                object.__setattr__(self, "xAppStatus", Status(self.xAppStatus))
            except ValueError:
                raise ValidationError(f"unknown xAppStatus {self.xAppStatus!r}") from None
        if not isinstance(self.xAppLocation, str):
            raise ValidationError("xAppLocation must be text")
        if isinstance(self.xAppLoad, bool) or not isinstance(self.xAppLoad, int) or self.xAppLoad < 0:
            raise ValidationError("xAppLoad must be a non-negative integer")
        if not isinstance(self.endpointAddress, str) or not _is_host_port(self.endpointAddress):
            raise ValidationError(f"endpointAddress must be host:port, got {self.endpointAddress!r}")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["xAppStatus"] = self.xAppStatus.value
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], vocabulary: Collection[str] | None = None) -> XAppProfile:
        if not isinstance(data, Mapping):
            raise ValidationError("profile must be a JSON object")
        missing = [f for f in PROFILE_FIELDS if f not in data]
        if missing:
            raise ValidationError(f"profile is missing {', '.join(missing)}")
        unknown = set(data) - set(PROFILE_FIELDS)
        if unknown:
            raise ValidationError(f"unknown profile fields: {', '.join(sorted(unknown))}")
        profile = cls(**{f: data[f] for f in PROFILE_FIELDS})
        if vocabulary is not None:
            check_offering(profile.xAppOffering, vocabulary)
        return profile

    def evolve(self, **changes: Any) -> XAppProfile:
        return replace(self, **changes)


def _is_host_port(text: str) -> bool:
    host, sep, port = text.rpartition(":")
    return bool(sep and host and port.isdigit() and 0 < int(port) < 65536)


def check_offering(offering: str, vocabulary: Collection[str]) -> None:
    if offering not in vocabulary:
        raise ValidationError(f"offering {offering!r} is not in the configured vocabulary")


def new_profile(
    name: str,
    offering: str,
    location: str,
    endpoint_address: str,
    *,
    vocabulary: Collection[str] | None,
    instance_id: str | None = None,
) -> XAppProfile:
    """Create the local profile an xApp starts with.

    A random UUID is drawn unless ``instance_id`` is given (clients whose
    identity is pre-provisioned in the server trust store pass their own).
    ``vocabulary=None`` skips the offering check; the server re-validates
    on registration anyway.
    """
    if not name:
        raise ValidationError("name must be non-empty")
    if vocabulary is not None:
        check_offering(offering, vocabulary)
    return XAppProfile(
        xAppInstanceID=instance_id or str(uuid.uuid4()),
        xAppInstanceName=name,
        xAppOffering=offering,
        xAppStatus=Status.REGISTERING,
        xAppLocation=location,
        xAppLoad=0,
        endpointAddress=endpoint_address,
    )


@dataclass(frozen=True)
class EndpointRule:
    path: str
    scopes: frozenset[Scope]


@dataclass
class PermissionsMatrix:
    """Offering code -> endpoint rules, plus the live exclusive WRITE grants.

    ``rules`` never changes after construction.  ``exclusive_grants`` maps
    ``(provider, endpoint)`` to ``(consumer, expiry)`` and is only mutated by
    the server while holding its registry lock.
    """

    rules: Mapping[str, tuple[EndpointRule, ...]]
    exclusive_grants: dict[tuple[str, str], tuple[str, int]] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: Mapping[str, Mapping[str, Iterable[str]]]) -> PermissionsMatrix:
        if not isinstance(data, Mapping):
            raise ValidationError("permissions matrix must be a JSON object")
        rules = {}
        for offering, endpoints in data.items():
            if not isinstance(endpoints, Mapping):
                raise ValidationError(f"rules for {offering!r} must map endpoint -> scopes")
            rules[offering] = tuple(
                EndpointRule(path, frozenset(Scope.parse(s) for s in scopes))
                for path, scopes in endpoints.items()
            )
        return cls(rules=rules)

    def to_dict(self) -> dict[str, dict[str, list[str]]]:
        return {
            offering: {r.path: sorted(s.value for s in r.scopes) for r in endpoint_rules}
            for offering, endpoint_rules in self.rules.items()
        }

    def live_grant(self, provider: str, endpoint: str, now: float) -> tuple[str, int] | None:
        grant = self.exclusive_grants.get((provider, endpoint))
        if grant is not None and grant[1] > now:
            return grant
        return None


def scope_allowed(matrix: PermissionsMatrix, offering: str, endpoint: str, scope: Scope) -> bool:
    for rule in matrix.rules.get(offering, ()):
        if rule.path == endpoint and scope in rule.scopes:
            return True
    return False


def select_provider(candidates: Iterable[XAppProfile]) -> XAppProfile:
    """Least-loaded candidate; equal loads go to the smallest instance ID."""
    best = min(candidates, key=lambda p: (p.xAppLoad, p.xAppInstanceID), default=None)
    if best is None:
        raise NoCandidateError("no candidate providers")
    return best


@dataclass(frozen=True)
class TokenHeader:
    kid: str
    alg: str = "RS256"
    typ: str = "JWT"

    def __post_init__(self) -> None:
        if self.alg != "RS256" or self.typ != "JWT":
            raise ValidationError("token header must be alg=RS256, typ=JWT")
        canonical_uuid(self.kid, "kid")

    def to_dict(self) -> dict[str, str]:
        return {"alg": self.alg, "typ": self.typ, "kid": self.kid}


@dataclass(frozen=True)
class TokenClaims:
    iss: str
    sub: str
    aud: str
    scope: Scope
    exp: int
    endpoint: str
    iat: int

    def __post_init__(self) -> None:
        if not isinstance(self.iss, str) or not self.iss:
            raise ValidationError("iss must be non-empty text")
        canonical_uuid(self.sub, "sub")
        canonical_uuid(self.aud, "aud")
        if self.sub == self.aud:
            raise ValidationError("sub and aud must differ")
        if not isinstance(self.scope, Scope):
            object.__setattr__(self, "scope", Scope.parse(self.scope))
        for name in ("exp", "iat"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int):
                raise ValidationError(f"{name} must be integer seconds")
        if self.exp <= self.iat:
            raise ValidationError("exp must be after iat")
        if not isinstance(self.endpoint, str) or not self.endpoint.startswith("/"):
            raise ValidationError("endpoint must be an absolute path")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["scope"] = self.scope.value
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> TokenClaims:
        try:
            return cls(**{k: data[k] for k in ("iss", "sub", "aud", "scope", "exp", "endpoint", "iat")})
        except KeyError as exc:
            raise ValidationError(f"claims missing {exc.args[0]}") from None
        except TypeError as exc:
            raise ValidationError(str(exc)) from None
