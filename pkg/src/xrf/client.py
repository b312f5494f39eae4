"""The XRF client sidecar.

``XRFClient`` walks an xApp from a fresh profile to SERVICE_READY
(authenticate, register, discover, obtain a token) and then calls the chosen
provider with ``Authorization: Bearer <jwt>``.  ``TokenValidator`` guards the
provider side, either verifying tokens locally with keys fetched from the
JWKS endpoint (cached per kid) or by forwarding them to the server's
introspection endpoint.  Both fail closed.
"""

from __future__ import annotations

import enum
import logging
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Callable

from cryptography.hazmat.primitives.asymmetric import rsa

from . import crypto
from .model import (
    NoCandidateError,
    Scope,
    Status,
    TokenClaims,
    ValidationError,
    XAppProfile,
    new_profile,
    select_provider,
)
from .server import SESSION_HEADER
from .web import APIError, PooledHTTPServer, Request, Router, TransportError, call, parse_listen

log = logging.getLogger(__name__)


class ClientState(enum.IntEnum):
    CREATED = 0
    AUTHENTICATED = 1
    REGISTERED = 2
    DISCOVERED = 3
    SERVICE_READY = 4


class ValidationMode(str, enum.Enum):
    SELF_CONTAINED = "self-contained"
    REMOTE_INTROSPECTION = "remote-introspection"


STEPS = ("authentication", "registration", "discovery", "access-token")


class StartupError(Exception):
    def __init__(self, step: str, cause: Any, status: int | None = None) -> None:
        super().__init__(f"{step} failed: {cause}")
        self.step = step
        self.cause = cause
        self.status = status


class ServiceError(Exception):
    def __init__(self, status: int, body: Any) -> None:
        reason = body.get("error") if isinstance(body, dict) else body
        super().__init__(f"provider answered {status}: {reason}")
        self.status = status
        self.body = body


class TokenUnusable(Exception):
    """The held token must not be used (its provider is no longer available)."""


@dataclass(frozen=True)
class StepTiming:
    wall: float
    cpu: float


@dataclass
class ClientConfig:
    server_url: str
    own_key: rsa.RSAPrivateKey
    server_pub: rsa.RSAPublicKey
    profile_seed: dict[str, Any]
    desired_offering: str | None = None
    desired_location: str | None = None
    desired_scope: Scope = Scope.READ
    desired_endpoint: str = "/metrics"
    timeout: float = 30.0
    clock: Callable[[], float] = time.time


class XRFClient:
    def __init__(self, config: ClientConfig) -> None:
        self.config = config
        seed = dict(config.profile_seed)
        seed.setdefault("endpoint_address", "127.0.0.1:9")
        self.profile: XAppProfile = new_profile(vocabulary=None, **seed)
        self.state = ClientState.CREATED
        self.history = [ClientState.CREATED]
        self.session: str | None = None
        self.candidates: list[XAppProfile] = []
        self.provider: XAppProfile | None = None
        self.token: str | None = None
        self.token_exp: int | None = None
        self.token_usable = False
        self.timings: dict[str, StepTiming] = {}
        self.events: list[str] = []
        self.listener: SidecarListener | None = None
        self._lock = threading.Lock()

    @property
    def id(self) -> str:
        return self.profile.xAppInstanceID

    def _url(self, path: str) -> str:
        return self.config.server_url.rstrip("/") + path

    def _advance(self, new: ClientState) -> None:
        if new != self.state + 1:
            raise RuntimeError(f"cannot move from {self.state.name} to {new.name}")
        self.state = new
        self.history.append(new)

    def _expect(self, state: ClientState, step: str) -> None:
        if self.state != state:
            raise StartupError(step, f"client is {self.state.name}, expected {state.name}")

    def _timed(self, step: str, fn: Callable[[], Any]) -> Any:
        t0, c0 = time.perf_counter(), time.thread_time()
        try:
            return fn()
        finally:
            self.timings[step] = StepTiming(time.perf_counter() - t0, time.thread_time() - c0)

    def _server(self, step: str, method: str, path: str, body: Any = None, session: bool = False) -> Any:
        headers = {SESSION_HEADER: self.session} if session and self.session else None
        try:
            status, data = call(method, self._url(path), body, headers, timeout=self.config.timeout)
        except TransportError as exc:
            raise StartupError(step, exc) from exc
        if status != 200:
            reason = data.get("error") if isinstance(data, dict) else data
            raise StartupError(step, f"server answered {status} ({reason})", status)
        return data

    # -- lifecycle (steps 1-4) -------------------------------------------------

    def authenticate(self) -> None:
        self._expect(ClientState.CREATED, "authentication")

        def run() -> None:
            m = crypto.new_nonce()
            env = crypto.build_challenge(m, self.config.own_key, self.config.server_pub)
            data = self._server("authentication", "POST", "/initialAuthentication",
                                {"xAppInstanceID": self.id, "challenge": env})
            try:
                ok = crypto.verify_counter(data["counter"], self.config.own_key, self.config.server_pub, m)
            except (KeyError, TypeError, crypto.MalformedEnvelope) as exc:
                raise StartupError("authentication", f"malformed counter: {exc}") from None
            if not ok:
                raise StartupError("authentication", "server failed the counter-challenge")
            self.session = data.get("session")

        self._timed("authentication", run)
        self._advance(ClientState.AUTHENTICATED)

    def register(self) -> None:
        self._expect(ClientState.AUTHENTICATED, "registration")
        self._timed("registration", lambda: self._server(
            "registration", "PUT", "/registrationHandler", self.profile.to_dict(), session=True))
        self.profile = self.profile.evolve(xAppStatus=Status.AVAILABLE)
        self._advance(ClientState.REGISTERED)

    def discover(self, offering: str | None = None, location: str | None = None) -> XAppProfile:
        self._expect(ClientState.REGISTERED, "discovery")
        offering = offering or self.config.desired_offering
        location = location if location is not None else self.config.desired_location
        if offering is None or location is None:
            raise StartupError("discovery", "no desired offering/location configured")

        def run() -> XAppProfile:
            from urllib.parse import urlencode

            q = urlencode({"xAppOffering": offering, "xAppLocation": location, "requester": self.id})
            data = self._server("discovery", "GET", f"/xAppDiscoveryHandler?{q}")
            try:
                self.candidates = [XAppProfile.from_dict(p) for p in data]
            except (ValidationError, TypeError) as exc:
                raise StartupError("discovery", f"bad discovery response: {exc}") from None
            try:
                return select_provider(self.candidates)
            except NoCandidateError as exc:
                raise StartupError("discovery", exc) from None

        self.provider = self._timed("discovery", run)
        self._advance(ClientState.DISCOVERED)
        return self.provider

    def request_token(self, scope: Scope | str | None = None, endpoint: str | None = None) -> str:
        self._expect(ClientState.DISCOVERED, "access-token")
        assert self.provider is not None
        scope = Scope.parse(scope or self.config.desired_scope)
        endpoint = endpoint or self.config.desired_endpoint
        body = {"consumer": self.id, "provider": self.provider.xAppInstanceID,
                "endpoint": endpoint, "scope": scope.value}
        data = self._timed("access-token", lambda: self._server(
            "access-token", "POST", "/accessTokenRequest", body, session=True))
        try:
            self.token = data["access_token"]
            self.token_exp = crypto.parse_unverified(self.token)[1].exp
        except (KeyError, TypeError, crypto.MalformedToken) as exc:
            raise StartupError("access-token", f"bad token response: {exc}") from None
        self.token_usable = True
        self._advance(ClientState.SERVICE_READY)
        return self.token

    def join(self) -> ClientState:
        """Steps 1-2 only: what a pure provider needs."""
        self.authenticate()
        self.register()
        return self.state

    def startup(self) -> ClientState:
        """Steps 1-4; any failure raises StartupError naming the step."""
        self.authenticate()
        self.register()
        self.discover()
        self.request_token()
        return self.state

    def update_profile(self, **changes: Any) -> dict[str, Any]:
        """Push a change of our own profile to the server (it notifies our consumers)."""
        body = {"xAppInstanceID": self.id, **{k: (v.value if isinstance(v, enum.Enum) else v)
                                               for k, v in changes.items()}}
        data = self._server("profile-update", "PUT", "/profileUpdateHandler", body, session=True)
        self.profile = self.profile.evolve(**changes)
        return data

    # -- consumption (steps 5-7) -----------------------------------------------

    def request_service(
        self,
        endpoint: str | None = None,
        method: str = "GET",
        body: Any = None,
        target: XAppProfile | None = None,
        token: str | None = None,
    ) -> Any:
        if token is None:
            if self.state != ClientState.SERVICE_READY:
                raise TokenUnusable("client is not SERVICE_READY")
            if not self.token_usable:
                raise TokenUnusable("provider is no longer available; token withdrawn")
            token = self.token
        target = target or self.provider
        if target is None:
            raise TokenUnusable("no provider selected")
        endpoint = endpoint or self.config.desired_endpoint
        status, data = call(method, f"http://{target.endpointAddress}{endpoint}", body,
                            {"Authorization": f"Bearer {token}"}, timeout=self.config.timeout)
        if status != 200:
            raise ServiceError(status, data)
        return data

    def handle_profile_update_push(self, update: Any) -> dict[str, Any]:
        """Apply a server notification about a provider we consume."""
        if not isinstance(update, dict):
            raise APIError(400, "malformed", "update must be a JSON object")
        with self._lock:
            if self.provider is None or update.get("xAppInstanceID") != self.provider.xAppInstanceID:
                raise APIError(404, "unknown-provider", str(update.get("xAppInstanceID")))
            try:
                merged = {**self.provider.to_dict(), **update}
                self.provider = XAppProfile.from_dict(merged)
            except (ValidationError, TypeError) as exc:
                raise APIError(400, "invalid-profile", str(exc)) from None
            if self.provider.xAppStatus is not Status.AVAILABLE and self.token_usable:
                self.token_usable = False
                self.events.append(f"provider {self.provider.xAppInstanceID} is {self.provider.xAppStatus.value}")
        return {"status": "OK"}

    # -- inbound side ------------------------------------------------------------

    def start_listener(
        self,
        validator: TokenValidator | None = None,
        mode: ValidationMode = ValidationMode.SELF_CONTAINED,
        listen: str = "127.0.0.1:0",
        workers: int = 4,
    ) -> SidecarListener:
        """Serve /profileUpdate and the demo ServiceRequestAPI; must precede registration."""
        if self.state >= ClientState.REGISTERED:
            raise RuntimeError("start the listener before registering")
        validator = validator or TokenValidator(
            self.config.server_url, self.id, timeout=self.config.timeout, clock=self.config.clock
        )
        self.listener = SidecarListener(self, validator, mode, listen, workers)
        self.profile = self.profile.evolve(endpointAddress=self.listener.address)
        return self.listener

    def close(self) -> None:
        if self.listener is not None:
            self.listener.stop()
            self.listener = None


class UnknownKid(LookupError):
    pass


class KidCache:
    """kid -> (public key, fetch time); a present kid is never fetched again.

    Concurrent misses on the same kid share one fetch.  At ``cap`` entries
    the oldest one is dropped.
    """

    def __init__(self, fetch: Callable[[str], rsa.RSAPublicKey], cap: int = 10_000) -> None:
        self._fetch = fetch
        self.cap = cap
        self._entries: OrderedDict[str, tuple[rsa.RSAPublicKey, float]] = OrderedDict()
        self._inflight: dict[str, threading.Lock] = {}
        self._lock = threading.Lock()
        self.fetches = 0

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, kid: str) -> bool:
        return kid in self._entries

    def get(self, kid: str) -> rsa.RSAPublicKey:
        with self._lock:
            hit = self._entries.get(kid)
            if hit is not None:
                return hit[0]
            gate = self._inflight.setdefault(kid, threading.Lock())
        with gate:
            with self._lock:
                hit = self._entries.get(kid)
                if hit is not None:
                    return hit[0]
                self.fetches += 1
            try:
                key = self._fetch(kid)
            finally:
                with self._lock:
                    self._inflight.pop(kid, None)
            with self._lock:
                self._entries[kid] = (key, time.time())
                while len(self._entries) > self.cap:
                    self._entries.popitem(last=False)
            return key


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    claims: TokenClaims | None = None
    reason: str | None = None


class _Unavailable(Exception):
    pass


@dataclass
class TokenValidator:
    server_url: str
    own_id: str
    cap: int = 10_000
    timeout: float = 10.0
    clock: Callable[[], float] = time.time
    cache: KidCache = field(init=False)
    # wall/CPU spent verifying signatures locally
    verify_wall: float = field(default=0.0, init=False)
    verify_cpu: float = field(default=0.0, init=False)
    verify_count: int = field(default=0, init=False)

    def __post_init__(self) -> None:
        self.cache = KidCache(self._fetch_jwk, self.cap)
        self._stats_lock = threading.Lock()

    def _fetch_jwk(self, kid: str) -> rsa.RSAPublicKey:
        from urllib.parse import quote

        try:
            status, data = call("GET", f"{self.server_url.rstrip('/')}/jwksRequestHandler?kid={quote(kid)}",
                                timeout=self.timeout)
        except TransportError as exc:
            raise _Unavailable(str(exc)) from exc
        if status == 404:
            raise UnknownKid(kid)
        if status != 200 or not isinstance(data, dict):
            raise _Unavailable(f"JWKS endpoint answered {status}")
        for jwk in data.get("keys", ()):
            if isinstance(jwk, dict) and jwk.get("kid") == kid:
                return crypto.public_key_from_jwk(jwk)
        raise UnknownKid(kid)

    def reset_stats(self) -> None:
        with self._stats_lock:
            self.verify_wall = self.verify_cpu = 0.0
            self.verify_count = 0

    def validate_incoming(
        self, auth_header: str | None, mode: ValidationMode, own_id: str | None = None
    ) -> Verdict:
        own_id = own_id or self.own_id
        if not isinstance(auth_header, str) or not auth_header.startswith("Bearer "):
            return Verdict(False, reason="malformed")
        token = auth_header[len("Bearer "):]
        if mode is ValidationMode.SELF_CONTAINED:
            return self._self_contained(token, own_id)
        return self._remote(token, own_id)

    def _self_contained(self, token: str, own_id: str) -> Verdict:
        try:
            header = crypto.parse_header(token)
            pub = self.cache.get(header.kid)
        except crypto.MalformedToken:
            return Verdict(False, reason="malformed")
        except UnknownKid:
            return Verdict(False, reason="unknown-kid")
        except (_Unavailable, crypto.CryptoError):
            return Verdict(False, reason="unavailable")
        t0, c0 = time.perf_counter(), time.thread_time()
        try:
            claims = crypto.verify_jwt(token, pub, own_id, self.clock())
        except crypto.TokenError as exc:
            return Verdict(False, reason=exc.reason)
        finally:
            with self._stats_lock:
                self.verify_wall += time.perf_counter() - t0
                self.verify_cpu += time.thread_time() - c0
                self.verify_count += 1
        return Verdict(True, claims)

    def _remote(self, token: str, own_id: str) -> Verdict:
        try:
            status, data = call("POST", f"{self.server_url.rstrip('/')}/tokenIntrospection",
                                {"token": token}, timeout=self.timeout)
        except TransportError:
            return Verdict(False, reason="unavailable")
        if status == 400:
            return Verdict(False, reason="malformed")
        if status != 200 or not isinstance(data, dict):
            return Verdict(False, reason="unavailable")
        if data.get("active") is not True:
            return Verdict(False, reason="inactive")
        try:
            claims = TokenClaims.from_dict(data)
        except ValidationError:
            return Verdict(False, reason="unavailable")
        if claims.aud != own_id:
            return Verdict(False, reason="audience-mismatch")
        return Verdict(True, claims)


DENY_STATUS = {"audience-mismatch": 403, "unavailable": 503}

_METHOD_SCOPE = {"GET": Scope.READ, "POST": Scope.WRITE}


class SidecarListener:
    """Inbound HTTP side of a client: /profileUpdate plus two demo endpoints.

    GET /metrics needs a read token for /metrics; POST /control needs a
    write token for /control.
    """

    def __init__(
        self,
        client: XRFClient,
        validator: TokenValidator,
        mode: ValidationMode = ValidationMode.SELF_CONTAINED,
        listen: str = "127.0.0.1:0",
        workers: int = 4,
    ) -> None:
        self.client = client
        self.validator = validator
        self.mode = mode
        self.denials: list[str] = []
        self.control_log: list[Any] = []
        r = Router()
        r.add("PUT", "/profileUpdate", lambda req: client.handle_profile_update_push(req.json()))
        r.add("GET", "/metrics", self._metrics)
        r.add("POST", "/control", self._control)
        self.router = r
        self.httpd = PooledHTTPServer(parse_listen(listen), r, workers)
        self.httpd.start()

    @property
    def address(self) -> str:
        return self.httpd.address

    def stop(self) -> None:
        self.httpd.stop()

    def _guard(self, req: Request) -> TokenClaims:
        verdict = self.validator.validate_incoming(req.headers.get("Authorization"), self.mode, self.client.id)
        if not verdict.accepted:
            self.denials.append(verdict.reason or "denied")
            raise APIError(DENY_STATUS.get(verdict.reason or "", 401), verdict.reason or "denied")
        claims = verdict.claims
        assert claims is not None
        if claims.endpoint != req.path or claims.scope is not _METHOD_SCOPE[req.method]:
            self.denials.append("insufficient-scope")
            raise APIError(403, "insufficient-scope", f"token grants {claims.scope.value} on {claims.endpoint}")
        return claims

    def _metrics(self, req: Request) -> Any:
        claims = self._guard(req)
        p = self.client.profile
        return {
            "xAppInstanceID": p.xAppInstanceID,
            "servedTo": claims.sub,
            "metrics": {"prbUtilization": 0.42, "activeUEs": 17, "throughputMbps": 311.5},
        }

    def _control(self, req: Request) -> Any:
        claims = self._guard(req)
        cmd = req.json() if req.raw_body else None
        self.control_log.append((claims.sub, cmd))
        return {"status": "applied", "by": claims.sub}
