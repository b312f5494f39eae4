"""The XRF server: registry, discovery, token issuance and validation.

``XRFServer`` holds all state and exposes one ``handle_*`` method per
endpoint; those raise :class:`~xrf.web.APIError` for non-200 outcomes.
``XRFServer.router()`` binds them to HTTP paths.

Registry mutations happen under a single lock.  Expensive work (challenge
crypto, JWT signing and verification, outbound notifications) happens
outside it so workers overlap.
"""

from __future__ import annotations

import heapq
import logging
import secrets
import threading
import time
import uuid
from collections import deque
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Mapping

from cryptography.hazmat.primitives.asymmetric import rsa

from . import crypto
from .config import ServerConfig, load_offerings, load_permissions, load_trust_store
from .crypto import KeyPair
from .model import (
    PermissionsMatrix,
    Scope,
    Status,
    TokenClaims,
    ValidationError,
    XAppProfile,
    canonical_uuid,
    scope_allowed,
)
from .web import APIError, PooledHTTPServer, Request, Router, TransportError, call, parse_listen

log = logging.getLogger(__name__)

SESSION_HEADER = "X-XRF-Session"
MUTABLE_FIELDS = frozenset({"xAppInstanceName", "xAppStatus", "xAppLocation", "endpointAddress"})


class KeyPool:
    """Pre-generated RSA keys, each handed out at most once.

    Generating a 2048-bit key takes tens of milliseconds, far longer than
    anything else a token request does, so a background thread keeps the
    pool topped up to ``target`` and ``take`` only falls back to generating
    inline when the pool is empty.  ``stock`` seeds the pool with keys made
    elsewhere (the benchmark harness does this to keep runs short).
    """

    def __init__(self, stock: Iterable[rsa.RSAPrivateKey] = (), target: int = 16) -> None:
        self._keys: deque[rsa.RSAPrivateKey] = deque(stock)
        self._target = target
        self._cond = threading.Condition()
        self._running = False
        self._thread: threading.Thread | None = None
        self.generated_inline = 0

    def __len__(self) -> int:
        return len(self._keys)

    def start(self) -> None:
        if self._target <= 0 or self._running:
            return
        self._running = True
        self._thread = threading.Thread(target=self._refill, name="xrf-keypool", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        with self._cond:
            self._running = False
            self._cond.notify_all()

    def _refill(self) -> None:
        while True:
            with self._cond:
                while self._running and len(self._keys) >= self._target:
                    self._cond.wait()
                if not self._running:
                    return
            key = crypto.generate_keypair().private_key
            with self._cond:
                self._keys.append(key)

    def take(self) -> KeyPair:
        with self._cond:
            priv = self._keys.popleft() if self._keys else None
            self._cond.notify()
        if priv is None:
            self.generated_inline += 1
            return crypto.generate_keypair()
        return crypto.KeyPair(str(uuid.uuid4()), priv)

    def give_back(self, key: KeyPair) -> None:
        with self._cond:
            self._keys.appendleft(key.private_key)


def load_key_stock(path: str) -> list[rsa.RSAPrivateKey]:
    marker = b"-----END PRIVATE KEY-----"
    with open(path, "rb") as fh:
        blob = fh.read()
    return [crypto.load_private_key(chunk + marker, trusted=True) for chunk in blob.split(marker) if chunk.strip()]


def write_key_stock(path: str, keys: Iterable[rsa.RSAPrivateKey]) -> None:
    with open(path, "wb") as fh:
        for key in keys:
            fh.write(crypto.private_key_to_pem(key))


@dataclass
class TokenRecord:
    key: KeyPair
    claims: TokenClaims
    released: bool = False


class XRFServer:
    def __init__(
        self,
        server_key: rsa.RSAPrivateKey,
        trust_store: Mapping[str, rsa.RSAPublicKey],
        permissions: PermissionsMatrix,
        offerings: Iterable[str],
        *,
        issuer: str = "xrf",
        token_ttl: int = 300,
        session_ttl: int = 600,
        key_pool: KeyPool | None = None,
        clock: Callable[[], float] = time.time,
        notify: Callable[..., tuple[int, Any]] = call,
    ) -> None:
        if token_ttl <= 0 or session_ttl <= 0:
            raise ValueError("TTLs must be positive")
        self.server_key = server_key
        self.trust_store = dict(trust_store)
        self.permissions = permissions
        self.offerings = frozenset(offerings)
        self.issuer = issuer
        self.token_ttl = token_ttl
        self.session_ttl = session_ttl
        self.keys = key_pool if key_pool is not None else KeyPool(target=0)
        self.clock = clock
        self._notify = notify

        self.lock = threading.Lock()
        self.profiles: dict[str, XAppProfile] = {}
        self.owners: dict[str, str] = {}
        self.consumers_of: dict[str, set[str]] = {}
        self.token_keys: dict[str, TokenRecord] = {}
        self._release_heap: list[tuple[int, str]] = []
        self._purge_heap: list[tuple[int, str]] = []
        self.sessions: dict[str, tuple[str, float]] = {}

        self._timer_lock = threading.Lock()
        self.reset_stats()

    # -- stats for the harness -------------------------------------------------

    def reset_stats(self) -> None:
        with self._timer_lock:
            self.first_arrival: float | None = None
            self.last_done: float | None = None
            self.users_done = 0
            self._cpu0 = time.process_time()
            # signature + claim checks done on behalf of introspecting providers
            self.verify_wall = self.verify_cpu = 0.0
            self.verify_count = 0
        if hasattr(self, "_router"):
            self._router.reset_stats()

    def _mark_arrival(self) -> None:
        if self.first_arrival is None:
            with self._timer_lock:
                if self.first_arrival is None:
                    self.first_arrival = time.perf_counter()

    def _mark_user_done(self) -> None:
        with self._timer_lock:
            self.users_done += 1
            self.last_done = time.perf_counter()

    def stats(self) -> dict[str, Any]:
        with self._timer_lock:
            first, last, users = self.first_arrival, self.last_done, self.users_done
            cpu = time.process_time() - self._cpu0
        wall = (last - first) if first is not None and last is not None else None
        return {
            "users_done": users,
            "wall": wall,
            "process_cpu": cpu,
            "ops": self._router.snapshot() if hasattr(self, "_router") else {},
            "introspection_verify": {"count": self.verify_count, "wall": self.verify_wall, "cpu": self.verify_cpu},
            "key_pool": len(self.keys),
            "keys_generated_inline": self.keys.generated_inline,
        }

    # -- sessions --------------------------------------------------------------

    def _new_session(self, principal: str) -> str:
        cred = secrets.token_urlsafe(24)
        with self.lock:
            self.sessions[cred] = (principal, self.clock() + self.session_ttl)
        return cred

    def session_principal(self, cred: str | None) -> str:
        if not cred:
            raise APIError(401, "unauthenticated", "session credential required")
        with self.lock:
            entry = self.sessions.get(cred)
            if entry is not None and entry[1] <= self.clock():
                del self.sessions[cred]
                entry = None
        if entry is None:
            raise APIError(401, "unauthenticated", "unknown or expired session")
        return entry[0]

    # -- endpoints -------------------------------------------------------------

    def handle_initial_authentication(self, challenge: Any, claimed_client: Any) -> dict[str, Any]:
        """Open the client's challenge and answer with a counter-challenge.

        The response also carries a short-lived session credential that the
        client echoes on registration, profile updates and token requests.
        """
        self._mark_arrival()
        try:
            client = canonical_uuid(claimed_client, "xAppInstanceID")
        except ValidationError as exc:
            raise APIError(400, "malformed", str(exc)) from None
        if not isinstance(challenge, str):
            raise APIError(400, "malformed", "challenge must be Base64 text")
        peer = self.trust_store.get(client)
        if peer is None:
            raise APIError(401, "unknown-principal", client)
        try:
            m = crypto.open_challenge(challenge, self.server_key, peer)
        except crypto.MalformedEnvelope as exc:
            raise APIError(400, "malformed", str(exc)) from None
        except (crypto.DecryptionError, crypto.SignatureInvalid) as exc:
            raise APIError(401, "authentication-failed", str(exc)) from None
        counter = crypto.build_counter(m, self.server_key, peer)
        return {"counter": counter, "session": self._new_session(client), "expires_in": self.session_ttl}

    def handle_registration(self, profile_data: Any, session: str | None) -> dict[str, Any]:
        principal = self.session_principal(session)
        try:
            profile = XAppProfile.from_dict(profile_data, self.offerings)
        except (ValidationError, TypeError) as exc:
            raise APIError(400, "invalid-profile", str(exc)) from None
        pid = profile.xAppInstanceID
        with self.lock:
            owner = self.owners.get(pid)
            if owner is not None and owner != principal:
                raise APIError(409, "id-collision", f"{pid} is registered by another principal")
            current = self.profiles.get(pid)
            # load is server-tracked, never taken from the client
            load = current.xAppLoad if current is not None else 0
            if current is not None and current.xAppOffering != profile.xAppOffering:
                self._drop_grants_of(pid)
            self.profiles[pid] = profile.evolve(xAppStatus=Status.AVAILABLE, xAppLoad=load)
            self.owners[pid] = principal
            self.consumers_of.setdefault(pid, set())
        return {"status": "OK", "xAppInstanceID": pid}

    def _drop_grants_of(self, provider: str) -> None:
        for key in [k for k in self.permissions.exclusive_grants if k[0] == provider]:
            del self.permissions.exclusive_grants[key]

    def handle_profile_update(self, update: Any, session: str | None) -> dict[str, Any]:
        principal = self.session_principal(session)
        if not isinstance(update, dict):
            raise APIError(400, "malformed", "update must be a JSON object")
        try:
            pid = canonical_uuid(update.get("xAppInstanceID"), "xAppInstanceID")
        except ValidationError as exc:
            raise APIError(400, "malformed", str(exc)) from None
        with self.lock:
            current = self.profiles.get(pid)
            if current is None:
                raise APIError(404, "unknown-xapp", pid)
            if self.owners.get(pid) != principal:
                raise APIError(403, "not-owner", pid)
            changes = {k: v for k, v in update.items() if k != "xAppInstanceID"}
            frozen = {k for k, v in changes.items() if k not in MUTABLE_FIELDS and getattr(current, k, None) != v}
            if frozen:
                raise APIError(400, "immutable-field", ", ".join(sorted(frozen)))
            changes = {k: v for k, v in changes.items() if k in MUTABLE_FIELDS}
            try:
                updated = current.evolve(**changes)
            except (ValidationError, TypeError) as exc:
                raise APIError(400, "invalid-profile", str(exc)) from None
            self.profiles[pid] = updated
            targets = [
                self.profiles[c].endpointAddress for c in sorted(self.consumers_of.get(pid, ())) if c in self.profiles
            ]
        delivered = sum(self._deliver(addr, updated) for addr in targets)
        return {"status": "OK", "notified": delivered, "consumers": len(targets)}

    def _deliver(self, address: str, profile: XAppProfile) -> bool:
        body = profile.to_dict()
        for attempt in (1, 2):
            try:
                status, _ = self._notify("PUT", f"http://{address}/profileUpdate", body, timeout=5.0)
            except TransportError as exc:
                log.warning("profile update to %s failed (attempt %d): %s", address, attempt, exc)
                continue
            if status == 200:
                return True
            log.warning("profile update to %s answered %s (attempt %d)", address, status, attempt)
            if status < 500:
                break
        return False

    def handle_discovery(self, offering: Any, location: Any, requester: str | None = None) -> list[dict[str, Any]]:
        if not isinstance(offering, str) or not offering or not isinstance(location, str):
            raise APIError(400, "malformed", "xAppOffering and xAppLocation are required")
        with self.lock:
            self._expire_locked(self.clock())
            return [
                p.to_dict()
                for p in self.profiles.values()
                if p.xAppStatus is Status.AVAILABLE
                and p.xAppOffering == offering
                and p.xAppLocation == location
                and p.xAppInstanceID != requester
            ]

    def handle_access_token_request(
        self, consumer: Any, provider: Any, endpoint: Any, scope: Any, session: str | None
    ) -> dict[str, Any]:
        try:
            consumer = canonical_uuid(consumer, "consumer")
            provider = canonical_uuid(provider, "provider")
            scope = Scope.parse(scope)
        except ValidationError as exc:
            raise APIError(400, "malformed", str(exc)) from None
        if not isinstance(endpoint, str) or not endpoint.startswith("/"):
            raise APIError(400, "malformed", "endpoint must be an absolute path")
        if consumer == provider:
            raise APIError(400, "malformed", "consumer and provider must differ")
        if self.session_principal(session) != consumer:
            raise APIError(401, "unauthenticated", "session does not belong to the consumer")

        key = self.keys.take()
        try:
            with self.lock:
                now = self.clock()
                self._expire_locked(now)
                if consumer not in self.profiles:
                    raise APIError(404, "unknown-consumer", consumer)
                target = self.profiles.get(provider)
                if target is None:
                    raise APIError(404, "unknown-provider", provider)
                if target.xAppStatus is not Status.AVAILABLE:
                    raise APIError(409, "provider-unavailable", target.xAppStatus.value)
                if not scope_allowed(self.permissions, target.xAppOffering, endpoint, scope):
                    raise APIError(403, "scope-not-allowed", f"{scope.value} on {endpoint}")
                if scope is Scope.WRITE and self.permissions.live_grant(provider, endpoint, now):
                    raise APIError(409, "write-conflict", f"{endpoint} already has a write grant")
                iat = int(now)
                claims = TokenClaims(
                    iss=self.issuer, sub=consumer, aud=provider, scope=scope,
                    exp=iat + self.token_ttl, endpoint=endpoint, iat=iat,
                )
                self.token_keys[key.kid] = TokenRecord(key, claims)
                heapq.heappush(self._release_heap, (claims.exp, key.kid))
                if scope is Scope.WRITE:
                    self.permissions.exclusive_grants[(provider, endpoint)] = (consumer, claims.exp)
                self.profiles[provider] = target.evolve(xAppLoad=target.xAppLoad + 1)
                self.consumers_of.setdefault(provider, set()).add(consumer)
        except APIError:
            self.keys.give_back(key)
            raise
        token = crypto.issue_jwt(claims, key)
        self._mark_user_done()
        return {"access_token": token, "token_type": "Bearer", "expires_in": self.token_ttl, "kid": key.kid}

    def handle_token_introspection(self, token: Any) -> dict[str, Any]:
        try:
            header = crypto.parse_header(token)
        except crypto.MalformedToken as exc:
            raise APIError(400, "malformed", str(exc)) from None
        record = self.token_keys.get(header.kid)
        if record is None:
            return {"active": False}
        t0, c0 = time.perf_counter(), time.thread_time()
        try:
            claims = crypto.verify_jwt(token, record.key.public_key, record.claims.aud, self.clock())
        except crypto.MalformedToken as exc:
            raise APIError(400, "malformed", str(exc)) from None
        except crypto.TokenError:
            return {"active": False}
        finally:
            with self._timer_lock:
                self.verify_wall += time.perf_counter() - t0
                self.verify_cpu += time.thread_time() - c0
                self.verify_count += 1
        return {"active": True, "token_type": "Bearer", **claims.to_dict()}

    def handle_jwks_request(self, kid: Any) -> dict[str, Any]:
        try:
            canonical_uuid(kid, "kid")
        except ValidationError as exc:
            raise APIError(400, "malformed", str(exc)) from None
        record = self.token_keys.get(kid)
        if record is None:
            raise APIError(404, "unknown-kid", kid)
        return {"keys": [crypto.jwks_entry(record.key)]}

    # -- expiry ----------------------------------------------------------------

    def expire_grants(self, now: float | None = None) -> int:
        """Release every token with ``exp <= now``; returns how many."""
        with self.lock:
            return self._expire_locked(self.clock() if now is None else now)

    def _expire_locked(self, now: float) -> int:
        released = 0
        heap = self._release_heap
        while heap and heap[0][0] <= now:
            exp, kid = heapq.heappop(heap)
            record = self.token_keys.get(kid)
            if record is None or record.released:
                continue
            record.released = True
            released += 1
            c = record.claims
            p = self.profiles.get(c.aud)
            if p is not None:
                self.profiles[c.aud] = p.evolve(xAppLoad=max(0, p.xAppLoad - 1))
            if c.scope is Scope.WRITE and self.permissions.exclusive_grants.get((c.aud, c.endpoint)) == (c.sub, c.exp):
                del self.permissions.exclusive_grants[(c.aud, c.endpoint)]
            # keep the key around for a while so late introspection says "expired", not "unknown"
            heapq.heappush(self._purge_heap, (exp + self.token_ttl, kid))
        purge = self._purge_heap
        while purge and purge[0][0] <= now:
            _, kid = heapq.heappop(purge)
            self.token_keys.pop(kid, None)
        if released:
            for cred in [c for c, (_, exp) in self.sessions.items() if exp <= now]:
                del self.sessions[cred]
        return released

    # -- HTTP binding ------------------------------------------------------------

    def router(self) -> Router:
        if hasattr(self, "_router"):
            return self._router
        r = Router()

        def session(req: Request) -> str | None:
            return req.headers.get(SESSION_HEADER)

        def body_obj(req: Request) -> dict[str, Any]:
            body = req.json()
            if not isinstance(body, dict):
                raise APIError(400, "malformed", "body must be a JSON object")
            return body

        def initial_auth(req: Request) -> Any:
            b = body_obj(req)
            return self.handle_initial_authentication(b.get("challenge"), b.get("xAppInstanceID"))

        def token_request(req: Request) -> Any:
            b = body_obj(req)
            return self.handle_access_token_request(
                b.get("consumer"), b.get("provider"), b.get("endpoint"), b.get("scope"), session(req)
            )

        def stats_reset(req: Request) -> Any:
            self.reset_stats()
            return {"status": "OK"}

        r.add("POST", "/initialAuthentication", initial_auth)
        r.add("PUT", "/registrationHandler", lambda req: self.handle_registration(req.json(), session(req)))
        r.add("PUT", "/profileUpdateHandler", lambda req: self.handle_profile_update(req.json(), session(req)))
        r.add(
            "GET",
            "/xAppDiscoveryHandler",
            lambda req: self.handle_discovery(
                req.query.get("xAppOffering"), req.query.get("xAppLocation"), req.query.get("requester")
            ),
        )
        r.add("POST", "/accessTokenRequest", token_request)
        r.add("POST", "/tokenIntrospection", lambda req: self.handle_token_introspection(body_obj(req).get("token")))
        r.add("GET", "/jwksRequestHandler", lambda req: self.handle_jwks_request(req.query.get("kid")))
        r.add("GET", "/stats", lambda req: self.stats())
        r.add("POST", "/stats/reset", stats_reset)
        self._router = r
        return r


def build_server(config: ServerConfig, clock: Callable[[], float] = time.time) -> tuple[XRFServer, PooledHTTPServer]:
    """Load every file named by ``config`` and bind (but do not start) the listener."""
    from .config import ConfigError

    offerings = load_offerings(config.offerings)
    permissions = load_permissions(config.permissions, offerings)
    if not config.trust_store:
        raise ConfigError("a trust store file is required")
    trust = load_trust_store(config.trust_store)
    if config.key:
        try:
            with open(config.key, "rb") as fh:
                server_key = crypto.load_private_key(fh.read())
        except (OSError, ValueError, crypto.CryptoError) as exc:
            raise ConfigError(f"cannot load server key {config.key}: {exc}") from None
    else:
        raise ConfigError("a server key file is required")
    stock = load_key_stock(config.key_stock) if config.key_stock else []
    pool = KeyPool(stock, target=config.key_pool)
    app = XRFServer(
        server_key, trust, permissions, offerings,
        issuer=config.issuer, token_ttl=config.token_ttl, session_ttl=config.session_ttl,
        key_pool=pool, clock=clock,
    )
    try:
        httpd = PooledHTTPServer(parse_listen(config.listen), app.router(), config.workers)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot listen on {config.listen}: {exc}") from None
    return app, httpd
