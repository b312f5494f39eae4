from __future__ import annotations

import json
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import pytest

from xrf import crypto
from xrf.client import ClientConfig, XRFClient
from xrf.config import default_data_path, load_offerings, load_permissions
from xrf.server import KeyPool, XRFServer, load_key_stock

STOCK_SIZE = 200


@pytest.fixture(scope="session")
def key_stock(request) -> list:
    """Private keys generated once and cached between test runs (2048-bit keygen is slow)."""
    cache_dir = Path(request.config.cache.mkdir("xrf-keys"))
    path = cache_dir / f"stock-{STOCK_SIZE}.pem"
    if not path.exists():
        pems = [crypto.private_key_to_pem(crypto.generate_keypair().private_key) for _ in range(STOCK_SIZE)]
        path.write_bytes(b"".join(pems))
    return load_key_stock(str(path))


@pytest.fixture(scope="session")
def stock_path(key_stock, request) -> str:
    return str(Path(request.config.cache.mkdir("xrf-keys")) / f"stock-{STOCK_SIZE}.pem")


@pytest.fixture(scope="session")
def server_key(key_stock):
    return key_stock[0]


@pytest.fixture(scope="session")
def principal_keys(key_stock):
    """A handful of client identities' private keys."""
    return key_stock[1:9]


@pytest.fixture(scope="session")
def token_stock(key_stock):
    return key_stock[9:]


class FakeClock:
    def __init__(self, t: float = 1_700_000_000.0) -> None:
        self.t = t

    def __call__(self) -> float:
        return self.t

    def advance(self, dt: float) -> None:
        self.t += dt


@pytest.fixture
def clock() -> FakeClock:
    return FakeClock()


@dataclass
class Principal:
    id: str
    key: object


@dataclass
class Deployment:
    """An XRFServer (optionally behind HTTP) plus provisioned principals."""

    app: XRFServer
    server_key: object
    principals: list[Principal]
    clock: FakeClock
    httpd: object = None
    clients: list[XRFClient] = field(default_factory=list)

    @property
    def url(self) -> str:
        return f"http://{self.httpd.address}"

    def client(self, idx: int, name: str, offering: str, location: str = "edge-A", **kw) -> XRFClient:
        p = self.principals[idx]
        cfg = ClientConfig(
            server_url=self.url,
            own_key=p.key,
            server_pub=self.server_key.public_key(),
            profile_seed={"name": name, "offering": offering, "location": location, "instance_id": p.id},
            clock=self.clock,
            **kw,
        )
        c = XRFClient(cfg)
        self.clients.append(c)
        return c


def make_app(server_key, principal_keys, token_stock, clock, n_principals=None, **kw):
    keys = principal_keys if n_principals is None else [principal_keys[i % len(principal_keys)] for i in range(n_principals)]
    principals = [Principal(str(uuid.uuid4()), k) for k in keys]
    offerings = load_offerings()
    app = XRFServer(
        server_key,
        {p.id: p.key.public_key() for p in principals},
        load_permissions(None, offerings),
        offerings,
        key_pool=KeyPool(list(token_stock), target=0),
        clock=clock,
        **kw,
    )
    return app, principals


@pytest.fixture
def deployment(server_key, principal_keys, token_stock, clock):
    from xrf.web import PooledHTTPServer

    app, principals = make_app(server_key, principal_keys, token_stock, clock)
    httpd = PooledHTTPServer(("127.0.0.1", 0), app.router(), workers=8)
    httpd.start()
    d = Deployment(app, server_key, principals, clock, httpd)
    yield d
    for c in d.clients:
        c.close()
    httpd.stop()


@pytest.fixture
def app_only(server_key, principal_keys, token_stock, clock):
    app, principals = make_app(server_key, principal_keys, token_stock, clock)
    return Deployment(app, server_key, principals, clock)


@pytest.fixture
def config_files(tmp_path, server_key, principal_keys):
    """Server-side files on disk: key, trust store, offerings, permissions."""
    ids = [str(uuid.uuid4()) for _ in principal_keys[:3]]
    (tmp_path / "server.pem").write_bytes(crypto.private_key_to_pem(server_key))
    trust = {i: crypto.public_key_to_pem(k.public_key()).decode() for i, k in zip(ids, principal_keys)}
    (tmp_path / "trust.json").write_text(json.dumps(trust))
    (tmp_path / "offerings.json").write_text(default_data_path("offerings.json").read_text())
    (tmp_path / "permissions.json").write_text(default_data_path("permissions.json").read_text())
    return tmp_path, ids


# -- acceptance reporting ------------------------------------------------------------

ACCEPTANCE: dict[int, str] = {}


class Criterion:
    def __init__(self, number: int, title: str) -> None:
        self.number, self.title = number, title
        self.verdict: tuple[bool, str] | None = None

    def report(self, passed: bool, detail: str) -> bool:
        self.verdict = (bool(passed), detail)
        return bool(passed)


@pytest.fixture
def criterion(request):
    """Records one PASS/FAIL line for the test's ``@pytest.mark.criterion(n, title)``."""
    marker = request.node.get_closest_marker("criterion")
    rec = Criterion(*marker.args)
    yield rec
    passed, detail = rec.verdict or (False, "did not complete (see failure above)")
    line = f"{'PASS' if passed else 'FAIL'}  [{rec.number}] {rec.title}: {detail}"
    ACCEPTANCE[rec.number] = line
    print("\n" + line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
