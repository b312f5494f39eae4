"""Exit criteria.  Each test decides one criterion and records a PASS/FAIL line
(printed in the "acceptance criteria" section of the pytest summary).

Oracles are independent of the code under test: PyJWT for token verdicts,
brute-force scans for discovery and provider selection, and a direct audit of
the server's grant table for exclusivity.
"""

import json
import os
import random
import shutil
import subprocess
import sys
import threading
import time
import uuid
from pathlib import Path

import jwt as pyjwt
import pytest

from conftest import FakeClock, Principal, make_app
from xrf import bench, crypto
from xrf.client import ClientConfig, ValidationMode, XRFClient
from xrf.model import Scope, Status, XAppProfile, select_provider
from xrf.web import APIError, PooledHTTPServer

pytestmark = pytest.mark.acceptance

SELF, REMOTE = ValidationMode.SELF_CONTAINED, ValidationMode.REMOTE_INTROSPECTION


def _mutate(text: str, rnd: random.Random) -> str:
    alphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/=-_.{}\":,"
    i = rnd.randrange(len(text))
    kind = rnd.randrange(5)
    if kind == 0:
        return text[:i] + rnd.choice(alphabet) + text[i + 1:]
    if kind == 1:
        return text[:i] + text[i + 1:]
    if kind == 2:
        return text[:i] + rnd.choice(alphabet) + text[i:]
    if kind == 3:
        return text[:i]
    j = rnd.randrange(len(text))
    lo, hi = sorted((i, j))
    return text[:lo] + text[hi:lo:-1] + text[hi + 1:] if hi > lo else text + "A"


# -- 1 -------------------------------------------------------------------------------

@pytest.mark.criterion(1, "protocol correctness suite")
def test_protocol_correctness(criterion, server_key, principal_keys, token_stock, clock):
    t0 = time.perf_counter()
    client_key, spub = principal_keys[0], server_key.public_key()
    rnd = random.Random(20240601)

    # mutual authentication round trip, both through the raw functions and the server handler
    m = crypto.new_nonce()
    env = crypto.build_challenge(m, client_key, spub)
    recovered = crypto.open_challenge(env, server_key, client_key.public_key())
    counter = crypto.build_counter(recovered, server_key, client_key.public_key())
    round_trip = recovered == m and crypto.verify_counter(counter, client_key, spub, m)
    app, principals = make_app(server_key, principal_keys, token_stock, clock)
    p0 = principals[0]
    m2 = crypto.new_nonce()
    out = app.handle_initial_authentication(crypto.build_challenge(m2, p0.key, spub), p0.id)
    round_trip &= crypto.verify_counter(out["counter"], p0.key, spub, m2)

    # 1000 mutations of a challenge envelope and 1000 of a signed token
    false_accepts = []
    for _ in range(1000):
        bad = _mutate(env, rnd)
        if bad == env:
            continue
        try:
            crypto.open_challenge(bad, server_key, client_key.public_key())
            false_accepts.append(("envelope", bad))
        except crypto.CryptoError:
            pass
    app.handle_registration(
        {"xAppInstanceID": p0.id, "xAppInstanceName": "k", "xAppOffering": "KPIMON", "xAppStatus": "AVAILABLE",
         "xAppLocation": "edge-A", "xAppLoad": 0, "endpointAddress": "127.0.0.1:9"}, out["session"])
    p1 = principals[1]
    s1 = app.handle_initial_authentication(crypto.build_challenge(m2, p1.key, spub), p1.id)["session"]
    app.handle_registration(
        {"xAppInstanceID": p1.id, "xAppInstanceName": "t", "xAppOffering": "TRAFFIC-STEER",
         "xAppStatus": "AVAILABLE", "xAppLocation": "edge-A", "xAppLoad": 0, "endpointAddress": "127.0.0.1:9"}, s1)
    issued = app.handle_access_token_request(p1.id, p0.id, "/metrics", "read", s1)
    tok = issued["access_token"]
    pub = crypto.public_key_from_jwk(app.handle_jwks_request(issued["kid"])["keys"][0])
    for _ in range(1000):
        bad = _mutate(tok, rnd)
        if bad == tok:
            continue
        try:
            crypto.verify_jwt(bad, pub, p0.id, clock())
            false_accepts.append(("token", bad))
        except crypto.TokenError:
            pass
        if _introspect_active(app, bad):
            false_accepts.append(("introspection", bad))

    # issue -> introspect -> JWKS-verify agree (and an outside JWT library agrees too)
    intro = app.handle_token_introspection(tok)
    local = crypto.verify_jwt(tok, pub, p0.id, clock())
    outside = pyjwt.decode(tok, key=pub, algorithms=["RS256"], audience=p0.id, options={"verify_exp": False})
    agree = (intro["active"] is True and {k: intro[k] for k in local.to_dict()} == local.to_dict()
             and outside == local.to_dict())

    elapsed = time.perf_counter() - t0
    ok = round_trip and not false_accepts and agree and elapsed < 60
    criterion.report(ok, f"round trip {'ok' if round_trip else 'BROKEN'}, {len(false_accepts)} false accepts "
                         f"in 2000 mutations, issue/introspect/JWKS agree={agree}, {elapsed:.1f}s (< 60s)")
    assert ok, false_accepts[:3]


def _introspect_active(app, token):
    try:
        return app.handle_token_introspection(token)["active"] is True
    except APIError:
        return False


# -- 2 -------------------------------------------------------------------------------

OFFERINGS = ["KPIMON", "TRAFFIC-STEER", "QOE-PREDICT", "ANOMALY-DETECT"]
LOCATIONS = ["edge-A", "edge-B", "core"]


def _random_registry(rnd, n):
    return [
        XAppProfile(
            xAppInstanceID=str(uuid.UUID(int=rnd.getrandbits(128), version=4)),
            xAppInstanceName=f"x{i}", xAppOffering=rnd.choice(OFFERINGS), xAppStatus=rnd.choice(list(Status)),
            xAppLocation=rnd.choice(LOCATIONS), xAppLoad=rnd.randint(0, 3), endpointAddress="10.0.0.1:80",
        )
        for i in range(n)
    ]


def _brute_filter(reg, offering, location, requester):
    return sorted(p.xAppInstanceID for p in reg
                  if p.xAppStatus is Status.AVAILABLE and p.xAppOffering == offering
                  and p.xAppLocation == location and p.xAppInstanceID != requester)


def _brute_argmin(cands):
    best = None
    for p in cands:
        if best is None or p.xAppLoad < best.xAppLoad or (
                p.xAppLoad == best.xAppLoad and uuid.UUID(p.xAppInstanceID).int < uuid.UUID(best.xAppInstanceID).int):
            best = p
    return best


@pytest.mark.criterion(2, "oracle equivalence for discovery and provider selection")
def test_oracle_equivalence(criterion, app_only):
    t0 = time.perf_counter()
    app = app_only.app
    rnd = random.Random(7)
    mismatches, queries, selections = [], 0, 0
    for _ in range(200):
        reg = _random_registry(rnd, rnd.randint(0, 1000))
        app.profiles = {p.xAppInstanceID: p for p in reg}
        for _ in range(3):
            off, loc = rnd.choice(OFFERINGS), rnd.choice(LOCATIONS)
            requester = rnd.choice(reg).xAppInstanceID if reg and rnd.random() < 0.5 else None
            got = app.handle_discovery(off, loc, requester)
            ids = [p["xAppInstanceID"] for p in got]
            queries += 1
            if sorted(ids) != _brute_filter(reg, off, loc, requester) or len(ids) != len(set(ids)):
                mismatches.append(("discovery", off, loc))
            cands = [XAppProfile.from_dict(p) for p in got]
            if cands:
                selections += 1
                if select_provider(cands) != _brute_argmin(cands):
                    mismatches.append(("select", off, loc))
                # shuffled input must not change the choice
                rnd.shuffle(cands)
                if select_provider(cands) != _brute_argmin(cands):
                    mismatches.append(("select-shuffled", off, loc))
    elapsed = time.perf_counter() - t0
    ok = not mismatches and elapsed < 60
    criterion.report(ok, f"{len(mismatches)} mismatches over 200 registries, {queries} discovery queries, "
                         f"{selections} selections, {elapsed:.1f}s (< 60s)")
    assert ok, mismatches[:5]


# -- 3 -------------------------------------------------------------------------------

@pytest.mark.criterion(3, "write exclusivity under 32 concurrent requests x 100 trials")
def test_exclusivity_stress(criterion, server_key, principal_keys, token_stock):
    clock = FakeClock()
    app, _ = make_app(server_key, principal_keys, token_stock, clock, session_ttl=10 ** 9)
    n = 32
    principals = [Principal(str(uuid.uuid4()), principal_keys[i % len(principal_keys)]) for i in range(n + 1)]
    app.trust_store = {p.id: p.key.public_key() for p in principals}
    httpd = PooledHTTPServer(("127.0.0.1", 0), app.router(), workers=n)
    httpd.start()
    url = f"http://{httpd.address}"
    spub = server_key.public_key()

    def make(i, offering):
        p = principals[i]
        return XRFClient(ClientConfig(url, p.key, spub, {"name": f"c{i}", "offering": offering,
                                                           "location": "edge-A", "instance_id": p.id},
                                      desired_offering="KPIMON", desired_location="edge-A",
                                      desired_scope=Scope.WRITE, desired_endpoint="/control", clock=clock))

    violations, bad_trials = [], []
    try:
        provider = make(0, "KPIMON")
        provider.join()
        racers = [make(i, "TRAFFIC-STEER") for i in range(1, n + 1)]
        for r in racers:
            r.join()
            r.discover()
        from xrf.web import call

        for trial in range(100):
            barrier = threading.Barrier(n)
            statuses = [0] * n

            def race(k):
                r = racers[k]
                body = {"consumer": r.id, "provider": provider.id, "endpoint": "/control", "scope": "write"}
                barrier.wait()
                statuses[k], _ = call("POST", url + "/accessTokenRequest", body, {"X-XRF-Session": r.session})

            threads = [threading.Thread(target=race, args=(k,)) for k in range(n)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
            # audit the grant table directly
            live = [rec for rec in app.token_keys.values()
                    if rec.claims.scope is Scope.WRITE and rec.claims.exp > clock() and not rec.released]
            if len(live) > 1:
                violations.append(trial)
            if sorted(statuses) != [200] + [409] * (n - 1):
                bad_trials.append((trial, sorted(set(statuses))))
            clock.advance(app.token_ttl)  # the grant expires before the next trial
    finally:
        httpd.stop()
    ok = not violations and not bad_trials
    criterion.report(ok, f"{100 - len(bad_trials)}/100 trials with exactly 1 success + 31 conflicts, "
                         f"{len(violations)} exclusivity violations")
    assert ok, (bad_trials[:3], violations[:3])


# -- 4 -------------------------------------------------------------------------------

def _reencode(token, header=None, payload=None, sig=None):
    h, p, s = token.split(".")

    def enc(obj):
        return crypto.b64url_encode(json.dumps(obj, separators=(",", ":")).encode())

    if header is not None:
        h = enc(header(json.loads(crypto.b64url_decode(h))))
    if payload is not None:
        p = enc(payload(json.loads(crypto.b64url_decode(p))))
    if sig is not None:
        s = sig(s)
    return f"{h}.{p}.{s}"


def _flip_sig(s):
    raw = bytearray(crypto.b64url_decode(s))
    raw[len(raw) // 2] ^= 0x10
    return crypto.b64url_encode(bytes(raw))


@pytest.mark.criterion(4, "validation-mode equivalence on a 500-token corpus")
def test_validation_mode_equivalence(criterion, server_key, principal_keys, token_stock):
    clock = FakeClock()
    app, principals = make_app(server_key, principal_keys, token_stock, clock, session_ttl=10 ** 9)
    httpd = PooledHTTPServer(("127.0.0.1", 0), app.router(), workers=8)
    httpd.start()
    url, spub = f"http://{httpd.address}", server_key.public_key()

    def make(i, offering, location="edge-A"):
        p = principals[i]
        return XRFClient(ClientConfig(url, p.key, spub, {"name": f"c{i}", "offering": offering,
                                                           "location": location, "instance_id": p.id},
                                      desired_offering="KPIMON", desired_location="edge-A", clock=clock))

    provider, other = make(0, "KPIMON"), make(1, "KPIMON", "edge-B")
    try:
        provider.start_listener()
        provider.join()
        other.join()
        consumers = [make(i, "TRAFFIC-STEER") for i in range(2, 8)]
        for c in consumers:
            c.join()

        def issue(aud):
            c = consumers[issue.k % len(consumers)]
            issue.k += 1
            return app.handle_access_token_request(c.id, aud, "/metrics", "read", c.session)["access_token"]
        issue.k = 0

        expired = [issue(provider.id) for _ in range(40)]
        clock.advance(app.token_ttl + 1)
        valid = [issue(provider.id) for _ in range(60)]
        wrong_aud = [issue(other.id) for _ in range(40)]
        kids = [crypto.parse_header(t).kid for t in valid]
        tampered = []
        for i, t in enumerate(valid):
            tampered += [
                _reencode(t, sig=_flip_sig),
                _reencode(t, payload=lambda c: {**c, "aud": other.id}),
                _reencode(t, payload=lambda c: {**c, "exp": c["exp"] + 3600}),
                _reencode(t, payload=lambda c: {**c, "scope": "write"}),
                _reencode(t, header=lambda h, i=i: {**h, "kid": kids[(i + 1) % len(kids)]}),
                _reencode(t, header=lambda h: {**h, "alg": "none"}, sig=lambda s: ""),
            ]
        corpus = valid + expired + wrong_aud + tampered
        assert len(corpus) == 500

        # independent oracle: PyJWT against the server's own key for the token's kid
        def oracle(tok):
            try:
                kid = pyjwt.get_unverified_header(tok)["kid"]
                rec = app.token_keys.get(kid)
                if rec is None:
                    return False
                claims = pyjwt.decode(tok, key=rec.key.public_key, algorithms=["RS256"], audience=provider.id,
                                      options={"verify_exp": False})
                return claims["exp"] > clock()
            except (pyjwt.PyJWTError, KeyError, ValueError):
                return False

        expected = [oracle(t) for t in corpus]
        v = provider.listener.validator
        router = app.router()
        router.reset_stats()
        self_v = [v.validate_incoming("Bearer " + t, SELF, provider.id).accepted for t in corpus]
        self_again = [v.validate_incoming("Bearer " + t, SELF, provider.id).accepted for t in corpus]
        jwks_requests = router.snapshot().get("/jwksRequestHandler", {"count": 0})["count"]
        remote_v = [v.validate_incoming("Bearer " + t, REMOTE, provider.id).accepted for t in corpus]
    finally:
        provider.close()
        httpd.stop()

    distinct_kids = {crypto.parse_header(t).kid for t in corpus if t.count(".") == 2 and _kid_ok(t)}
    known = {k for k in distinct_kids if k in app.token_keys}
    disagreements = sum(a != b for a, b in zip(self_v, remote_v))
    oracle_misses = sum(a != b for a, b in zip(self_v, expected))
    ok = (disagreements == 0 and oracle_misses == 0 and self_v == self_again
          and v.cache.fetches == len(known) and jwks_requests == len(known) and sum(self_v) == 60)
    criterion.report(ok, f"{disagreements} mode disagreements, {oracle_misses} oracle disagreements, "
                         f"{sum(self_v)} accepted of 500; {v.cache.fetches} JWKS fetches "
                         f"({jwks_requests} seen by server) for {len(known)} distinct kids")
    assert ok


def _kid_ok(token):
    try:
        crypto.parse_header(token)
        return True
    except crypto.MalformedToken:
        return False


# -- 5 to 8: operational benchmarks ------------------------------------------------------

@pytest.fixture(scope="module")
def harness(tmp_path_factory, stock_path):
    cache_dir = Path(stock_path).parent
    bench_stock = cache_dir / "bench-stock.pem"
    if not bench_stock.exists():
        shutil.copy(stock_path, bench_stock)  # topped up by the harness as needed
    out = tmp_path_factory.mktemp("bench-out")
    cfg = bench.BenchConfig(out_dir=str(out), key_stock=str(bench_stock))
    with bench.Bench(cfg, tmp_path_factory.mktemp("bench-ws")) as b:
        yield b


@pytest.fixture(scope="module")
def load_runs(harness):
    t0 = time.perf_counter()
    records = harness.load()
    return records, time.perf_counter() - t0


@pytest.mark.criterion(5, "micro-benchmark ordering of server CPU (50 clients, median of 5)")
def test_micro_benchmark_ordering(criterion, harness):
    t0 = time.perf_counter()
    records = harness.micro()
    elapsed = time.perf_counter() - t0
    checks = bench.check_micro(records)
    med = {op: bench._median(r.server_cpu_s for r in records if r.operation == op) for op in bench.STEPS}
    order = " > ".join(f"{op} {med[op] * 1e3:.1f}ms" for op in sorted(med, key=med.get, reverse=True))
    ok = checks[0].passed and checks[1].passed and all(c.passed for c in checks) and elapsed < 300
    criterion.report(ok, f"{order}; {len(records) // 4} reps in {elapsed:.0f}s (< 300s)")
    assert ok, [c.line() for c in checks]


@pytest.mark.criterion(6, "token-comparison direction (100 requests, median of 5)")
def test_token_comparison(criterion, harness):
    t0 = time.perf_counter()
    records = harness.token_cmp()
    elapsed = time.perf_counter() - t0
    checks = bench.check_token_cmp(records)
    sc = [r for r in records if r.mode == SELF.value]
    ri = [r for r in records if r.mode == REMOTE.value]
    req = bench._median(r.requester_wall_s for r in ri) / bench._median(r.requester_wall_s for r in sc)
    prov = bench._median(r.provider_wall_s for r in ri) / bench._median(r.provider_wall_s for r in sc)
    ok = all(c.passed for c in checks) and elapsed < 120
    criterion.report(ok, f"requester wall remote/self = {req:.2f} (>= 1.5), provider wall remote/self = "
                         f"{prov:.2f} (within 0.5..2), {elapsed:.0f}s (< 120s)")
    assert ok, [c.line() for c in checks]


@pytest.mark.criterion(7, "concurrency scaling trend (200 clients, workers 2/6/12/20, median of 5)")
def test_concurrency_scaling(criterion, load_runs, harness):
    records, elapsed = load_runs
    checks = {c.name: c for c in bench.check_load(records)}
    t = {w: bench.median_throughput(records, w) for w in (2, 6, 12, 20)}
    r6, r20 = t[6] / t[2], t[20] / t[12]
    ok = all(c.passed for c in checks.values()) and elapsed < 600
    criterion.report(ok, f"median users/s {', '.join(f'{w}w={v:.1f}' for w, v in t.items())}; "
                         f"6w/2w = {r6:.2f} (>= 1.2), 20w/12w = {r20:.2f} (>= 0.9); "
                         f"{elapsed:.0f}s; {os.cpu_count()} logical CPU(s)")
    assert ok, [c.line() for c in checks.values() if not c.passed]


@pytest.mark.criterion(8, "client lightness (client CPU < 0.3 x client wall)")
def test_client_lightness(criterion, load_runs, harness, tmp_path_factory):
    records, _ = load_runs
    cpu, wall = sum(r.client_cpu_s for r in records), sum(r.client_wall_s for r in records)
    ok = all(r.valid for r in records) and wall > 0 and cpu < 0.3 * wall
    criterion.report(ok, f"{cpu:.2f}s CPU / {wall:.1f}s wall = {cpu / wall:.3f} over {len(records)} load runs "
                         f"of {records[0].clients} clients")
    bench.emit_report(harness.config.out_dir, records, (), (), [*bench.check_load(records),
                                                                 bench.check_client_lightness(records)])
    assert ok


# -- 9 -------------------------------------------------------------------------------

@pytest.mark.criterion(9, "end-to-end smoke through the CLI in < 10 s")
def test_end_to_end_smoke(criterion, tmp_path):
    xrf = [sys.executable, "-m", "xrf"]
    t0 = time.perf_counter()
    prov_id, req_id = str(uuid.uuid4()), str(uuid.uuid4())
    keys = tmp_path / "keys"
    subprocess.run([*xrf, "keygen", "--out", str(keys), "--principals", prov_id, req_id, "--with-server"],
                   check=True, capture_output=True, timeout=30)
    srv = subprocess.Popen([*xrf, "serve", "--listen", "127.0.0.1:0", "--trust-store", str(keys / "trust.json"),
                            "--key", str(keys / "server.pem"), "--key-pool", "2", "--no-access-log"],
                           stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    prov = None
    try:
        addr = srv.stdout.readline().split()[-1]
        common = ["--server", f"http://{addr}", "--server-pub", str(keys / "server.pub.pem")]
        prov = subprocess.Popen([*xrf, "client", "--role", "provider", "--key", str(keys / f"{prov_id}.pem"),
                                 *common], stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
        ready = prov.stdout.readline()
        req = subprocess.run([*xrf, "client", "--role", "requester", "--key", str(keys / f"{req_id}.pem"), *common],
                             capture_output=True, text=True, timeout=30)
    finally:
        for p in (prov, srv):
            if p is not None:
                p.send_signal(2)
                p.wait(timeout=10)
    elapsed = time.perf_counter() - t0
    out = req.stdout
    ok = (req.returncode == 0 and "registered" in ready and "SERVICE_READY" in out
          and "authorized GET /metrics -> 200" in out and "unauthorized GET /metrics -> 401" in out
          and elapsed < 10)
    criterion.report(ok, f"requester exit {req.returncode}, SERVICE_READY={'SERVICE_READY' in out}, "
                         f"authorized GET 200, unauthorized GET 401; {elapsed:.2f}s (< 10s)")
    assert ok, (out, req.stderr)
