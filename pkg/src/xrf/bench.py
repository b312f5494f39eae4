"""Desk-scale operational benchmarks.

Each measurement launches a fresh server subprocess (``python -m xrf serve``)
with a given worker count and drives it with in-process client threads over
loopback HTTP.  Four experiments:

* ``run_load``: N concurrent clients each run the full four-step startup;
  the server's own timer spans first arrival to last token issued.
* ``run_micro``: per-step server and client wall/CPU for 50 concurrent
  clients.
* ``run_token_comparison``: one requester sends 100 requests with the same
  token to one provider, once per validation mode.
* client lightness falls out of the load runs (client CPU vs wall).

``emit_report`` writes ``load.csv``, ``micro.csv``, ``token_cmp.csv`` and
``summary.txt``.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import signal
import statistics
import subprocess
import sys
import tempfile
import threading
import time
import uuid
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable, Sequence

from cryptography.hazmat.primitives.asymmetric import rsa

from . import crypto
from .client import STEPS, ClientConfig, KidCache, ServiceError, StartupError, ValidationMode, XRFClient
from .config import dump_trust_store
from .model import Scope
from .server import load_key_stock, write_key_stock
from .web import call

log = logging.getLogger(__name__)

SERVER_ROUTES = {
    "authentication": "/initialAuthentication",
    "registration": "/registrationHandler",
    "discovery": "/xAppDiscoveryHandler",
    "access-token": "/accessTokenRequest",
}
PROVIDER_OFFERING = "KPIMON"
CONSUMER_OFFERING = "TRAFFIC-STEER"
LOCATION = "edge-A"


@dataclass
class BenchConfig:
    client_counts: list[int] = field(default_factory=lambda: [200])
    worker_counts: list[int] = field(default_factory=lambda: [2, 6, 12, 20])
    repetitions: int = 5
    token_comparison_requests: int = 100
    micro_bench_clients: int = 50
    micro_workers: int = 6
    providers: int = 4
    identities: int = 8
    out_dir: str = "bench-out"
    key_stock: str | None = None

    def __post_init__(self) -> None:
        counts = [*self.client_counts, *self.worker_counts, self.repetitions, self.token_comparison_requests,
                  self.micro_bench_clients, self.micro_workers, self.providers, self.identities]
        if any(int(c) < 1 for c in counts):
            raise ValueError("all benchmark counts must be >= 1")


@dataclass
class LoadRecord:
    experiment: str
    rep: int
    clients: int
    workers: int
    wall_s: float
    server_cpu_s: float
    throughput: float
    latency_mean_s: float
    latency_p50_s: float
    latency_p95_s: float
    client_cpu_s: float
    client_wall_s: float
    valid: bool
    failures: int


@dataclass
class MicroRecord:
    rep: int
    operation: str
    count: int
    server_wall_s: float
    server_cpu_s: float
    client_wall_s: float
    client_cpu_s: float


@dataclass
class TokenCmpRecord:
    rep: int
    mode: str
    requests: int
    requester_wall_s: float
    requester_cpu_s: float
    provider_wall_s: float
    provider_cpu_s: float
    provider_handling_wall_s: float
    jwks_fetches: int
    denials: int
    valid: bool


@dataclass
class Check:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


def percentile(values: Sequence[float], q: float) -> float:
    """Linear-interpolated percentile, ``q`` in [0, 100]."""
    if not values:
        raise ValueError("no values")
    xs = sorted(values)
    pos = (len(xs) - 1) * q / 100.0
    lo = int(pos)
    hi = min(lo + 1, len(xs) - 1)
    return xs[lo] + (xs[hi] - xs[lo]) * (pos - lo)


# -- workspace: keys, trust store, server process -----------------------------------

def ensure_key_stock(path: str | Path, count: int) -> list[rsa.RSAPrivateKey]:
    """Load ``path`` and top it up to ``count`` freshly generated keys."""
    path = Path(path)
    keys = load_key_stock(str(path)) if path.exists() else []
    if len(keys) < count:
        log.info("generating %d RSA keys for the key stock", count - len(keys))
        keys += [crypto.generate_keypair().private_key for _ in range(count - len(keys))]
        path.parent.mkdir(parents=True, exist_ok=True)
        write_key_stock(str(path), keys)
    return keys


@dataclass
class Identity:
    id: str
    key: rsa.RSAPrivateKey


class Workspace:
    """Server key, client identities and a token key stock on disk.

    Identities share a few key pairs (round-robin); the trust store maps each
    UUID to its public key, so authentication is still per principal.
    """

    def __init__(self, root: str | Path, n_identities: int, stock: list[rsa.RSAPrivateKey], shared_keys: int = 8):
        if len(stock) < shared_keys + 2:
            raise ValueError("key stock too small")
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.server_key = stock[0]
        key_set = stock[1:1 + shared_keys]
        self.token_stock_path = self.root / "token-stock.pem"
        write_key_stock(str(self.token_stock_path), stock[1 + shared_keys:])
        self.token_keys_available = len(stock) - 1 - shared_keys
        self.identities = [Identity(str(uuid.uuid4()), key_set[i % len(key_set)]) for i in range(n_identities)]
        self.key_path = self.root / "server.pem"
        self.key_path.write_bytes(crypto.private_key_to_pem(self.server_key))
        self.trust_path = self.root / "trust.json"
        dump_trust_store({i.id: i.key.public_key() for i in self.identities}, self.trust_path)
        self._next = 0

    def take(self, n: int) -> list[Identity]:
        if self._next + n > len(self.identities):
            raise ValueError("workspace ran out of identities")
        out = self.identities[self._next:self._next + n]
        self._next += n
        return out

    def reset(self) -> None:
        self._next = 0


class ServerProcess:
    """``python -m xrf serve`` on an ephemeral loopback port."""

    def __init__(self, ws: Workspace, workers: int, token_ttl: int = 300, extra: Sequence[str] = ()) -> None:
        self.ws = ws
        self.workers = workers
        self.log_path = ws.root / f"server-{workers}w-{uuid.uuid4().hex[:6]}.log"
        self.cmd = [
            sys.executable, "-m", "xrf", "serve",
            "--listen", "127.0.0.1:0",
            "--workers", str(workers),
            "--token-ttl", str(token_ttl),
            "--trust-store", str(ws.trust_path),
            "--key", str(ws.key_path),
            "--key-stock", str(ws.token_stock_path),
            "--key-pool", "0",
            "--no-access-log",
            *extra,
        ]
        self.proc: subprocess.Popen | None = None
        self.url = ""

    def __enter__(self) -> ServerProcess:
        self._log = open(self.log_path, "wb")
        self.proc = subprocess.Popen(self.cmd, stdout=subprocess.PIPE, stderr=self._log)
        assert self.proc.stdout is not None
        line = self.proc.stdout.readline().decode().strip()
        if not line.startswith("listening on "):
            self.proc.kill()
            raise RuntimeError(f"server failed to start: {line or self.log_path.read_text()}")
        self.url = "http://" + line.split()[-1]
        return self

    def __exit__(self, *exc: Any) -> None:
        if self.proc is not None and self.proc.poll() is None:
            self.proc.send_signal(signal.SIGINT)
            try:
                self.proc.wait(timeout=10)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()
        self._log.close()

    def stats(self) -> dict[str, Any]:
        status, data = call("GET", self.url + "/stats")
        if status != 200:
            raise RuntimeError(f"/stats answered {status}")
        return data

    def reset(self) -> None:
        call("POST", self.url + "/stats/reset")


def _client(ws: Workspace, url: str, ident: Identity, name: str, offering: str, **kw: Any) -> XRFClient:
    cfg = ClientConfig(
        server_url=url, own_key=ident.key, server_pub=ws.server_key.public_key(),
        profile_seed={"name": name, "offering": offering, "location": LOCATION, "instance_id": ident.id},
        **kw,
    )
    return XRFClient(cfg)


def _seed_providers(ws: Workspace, url: str, n: int) -> list[XRFClient]:
    providers = []
    for k, ident in enumerate(ws.take(n)):
        p = _client(ws, url, ident, f"kpimon-{k}", PROVIDER_OFFERING)
        p.join()
        providers.append(p)
    return providers


@dataclass
class _FlowResult:
    ok: bool
    wall: float
    cpu: float
    timings: dict[str, Any]
    error: str = ""


def _run_flows(ws: Workspace, url: str, n: int) -> list[_FlowResult]:
    """N concurrent consumer startups, released together by a barrier."""
    clients = [
        _client(ws, url, ident, f"consumer-{k}", CONSUMER_OFFERING,
                desired_offering=PROVIDER_OFFERING, desired_location=LOCATION)
        for k, ident in enumerate(ws.take(n))
    ]
    results: list[_FlowResult | None] = [None] * n
    barrier = threading.Barrier(n)

    def flow(i: int) -> None:
        c = clients[i]
        barrier.wait()
        t0, c0 = time.perf_counter(), time.thread_time()
        try:
            c.startup()
            ok, err = True, ""
        except (StartupError, OSError) as exc:
            ok, err = False, str(exc)
        results[i] = _FlowResult(ok, time.perf_counter() - t0, time.thread_time() - c0, dict(c.timings), err)

    threads = [threading.Thread(target=flow, args=(i,), daemon=True) for i in range(n)]
    old = threading.stack_size(256 * 1024)
    try:
        for t in threads:
            t.start()
    finally:
        threading.stack_size(old)
    for t in threads:
        t.join()
    return [r for r in results if r is not None]


def run_load(ws: Workspace, clients: int, workers: int, rep: int = 0, providers: int = 4) -> LoadRecord:
    """One throughput/latency measurement on a fresh server."""
    ws.reset()
    with ServerProcess(ws, workers) as srv:
        _seed_providers(ws, srv.url, providers)
        srv.reset()
        flows = _run_flows(ws, srv.url, clients)
        stats = srv.stats()
    ok = [f for f in flows if f.ok]
    failures = len(flows) - len(ok)
    for f in flows:
        if not f.ok:
            log.warning("client failed: %s", f.error)
    wall = stats["wall"] or float("nan")
    lat = [f.wall for f in ok] or [float("nan")]
    valid = failures == 0 and stats["users_done"] == clients and stats["wall"] is not None
    return LoadRecord(
        experiment="load", rep=rep, clients=clients, workers=workers,
        wall_s=wall, server_cpu_s=stats["process_cpu"], throughput=clients / wall,
        latency_mean_s=statistics.fmean(lat), latency_p50_s=percentile(lat, 50), latency_p95_s=percentile(lat, 95),
        client_cpu_s=sum(f.cpu for f in ok), client_wall_s=sum(f.wall for f in ok),
        valid=valid, failures=failures,
    )


def run_micro(ws: Workspace, clients: int = 50, workers: int = 6, rep: int = 0, providers: int = 4) -> list[MicroRecord]:
    """Server- and client-side wall/CPU per startup step under ``clients`` concurrent flows."""
    ws.reset()
    with ServerProcess(ws, workers) as srv:
        _seed_providers(ws, srv.url, providers)
        srv.reset()
        flows = _run_flows(ws, srv.url, clients)
        ops = srv.stats()["ops"]
    if not all(f.ok for f in flows):
        raise RuntimeError(f"{sum(not f.ok for f in flows)} clients failed during the micro benchmark")
    out = []
    for step in STEPS:
        s = ops.get(SERVER_ROUTES[step], {"count": 0, "wall": 0.0, "cpu": 0.0})
        out.append(MicroRecord(
            rep=rep, operation=step, count=int(s["count"]),
            server_wall_s=s["wall"], server_cpu_s=s["cpu"],
            client_wall_s=sum(f.timings[step].wall for f in flows),
            client_cpu_s=sum(f.timings[step].cpu for f in flows),
        ))
    return out


def run_token_comparison(ws: Workspace, requests: int = 100, rep: int = 0, workers: int = 6) -> list[TokenCmpRecord]:
    """Same requester, same token, ``requests`` calls per validation mode.

    Provider wall/CPU is the time spent verifying the token wherever that
    happens: in the provider's sidecar for self-contained validation, inside
    the server's introspection handler for remote introspection (the same
    ``verify_jwt`` call in both places).
    ``provider_handling_wall_s`` is the provider sidecar's full request time.
    """
    ws.reset()
    records = []
    with ServerProcess(ws, workers) as srv:
        provider = _client(ws, srv.url, ws.take(1)[0], "kpimon", PROVIDER_OFFERING)
        listener = provider.start_listener()
        provider.join()
        requester = _client(ws, srv.url, ws.take(1)[0], "consumer", CONSUMER_OFFERING,
                            desired_offering=PROVIDER_OFFERING, desired_location=LOCATION)
        requester.startup()
        modes = [ValidationMode.SELF_CONTAINED, ValidationMode.REMOTE_INTROSPECTION]
        if rep % 2:
            modes.reverse()
        try:
            for mode in modes:
                v = listener.validator
                v.cache = KidCache(v._fetch_jwk, v.cap)
                v.reset_stats()
                listener.mode = mode
                listener.router.reset_stats()
                listener.denials.clear()
                srv.reset()
                denials = 0
                t0, c0 = time.perf_counter(), time.thread_time()
                for _ in range(requests):
                    try:
                        requester.request_service("/metrics")
                    except ServiceError:
                        denials += 1
                req_wall, req_cpu = time.perf_counter() - t0, time.thread_time() - c0
                handling = listener.router.snapshot().get("/metrics", {"wall": 0.0})["wall"]
                if mode is ValidationMode.SELF_CONTAINED:
                    p_wall, p_cpu = v.verify_wall, v.verify_cpu
                else:
                    intro = srv.stats()["introspection_verify"]
                    p_wall, p_cpu = intro["wall"], intro["cpu"]
                records.append(TokenCmpRecord(
                    rep=rep, mode=mode.value, requests=requests,
                    requester_wall_s=req_wall, requester_cpu_s=req_cpu,
                    provider_wall_s=p_wall, provider_cpu_s=p_cpu, provider_handling_wall_s=handling,
                    jwks_fetches=v.cache.fetches, denials=denials, valid=denials == 0,
                ))
        finally:
            provider.close()
    return records


# -- acceptance-style evaluation ------------------------------------------------

def _median(xs: Iterable[float]) -> float:
    xs = list(xs)
    return statistics.median(xs) if xs else float("nan")


def check_micro(records: Sequence[MicroRecord]) -> list[Check]:
    cpu = {op: _median(r.server_cpu_s for r in records if r.operation == op) for op in STEPS}
    shown = ", ".join(f"{op}={cpu[op] * 1e3:.2f}ms" for op in STEPS)
    return [
        Check("micro: authentication has the highest server CPU", max(cpu, key=cpu.get) == "authentication",
              f"median server CPU {shown}"),
        Check("micro: registration has the lowest server CPU", min(cpu, key=cpu.get) == "registration",
              f"median server CPU {shown}"),
        Check("micro: all timings positive",
              all(r.server_wall_s > 0 and r.server_cpu_s > 0 and r.client_wall_s > 0 for r in records),
              f"{len(records)} records"),
    ]


def check_token_cmp(records: Sequence[TokenCmpRecord], min_ratio: float = 1.5) -> list[Check]:
    sc = [r for r in records if r.mode == ValidationMode.SELF_CONTAINED.value and r.valid]
    ri = [r for r in records if r.mode == ValidationMode.REMOTE_INTROSPECTION.value and r.valid]
    req_ratio = _median(r.requester_wall_s for r in ri) / _median(r.requester_wall_s for r in sc)
    prov_ratio = _median(r.provider_wall_s for r in ri) / _median(r.provider_wall_s for r in sc)
    return [
        Check("token-cmp: no denials", len(sc) + len(ri) == len(records), f"{len(records)} loops"),
        Check(f"token-cmp: remote requester wall >= {min_ratio}x self-contained", req_ratio >= min_ratio,
              f"median ratio {req_ratio:.2f}"),
        Check("token-cmp: provider wall within 2x across modes", 0.5 <= prov_ratio <= 2.0,
              f"median ratio {prov_ratio:.2f}"),
        Check("token-cmp: one JWKS fetch per self-contained loop", all(r.jwks_fetches == 1 for r in sc),
              f"fetches {[r.jwks_fetches for r in sc]}"),
    ]


def median_throughput(records: Sequence[LoadRecord], workers: int) -> float:
    return _median(r.throughput for r in records if r.workers == workers and r.valid)


def check_load(records: Sequence[LoadRecord]) -> list[Check]:
    checks = [
        Check("load: all runs valid", all(r.valid for r in records),
              f"{sum(r.valid for r in records)}/{len(records)} valid"),
        Check("load: throughput == clients / wall",
              all(abs(r.throughput - r.clients / r.wall_s) <= 1e-9 * r.throughput for r in records if r.valid),
              "row self-consistency"),
        Check("load: server CPU <= wall x logical CPUs",
              all(r.server_cpu_s <= r.wall_s * (os.cpu_count() or 1) * 1.05 + 0.05 for r in records if r.valid),
              f"{os.cpu_count()} logical CPUs"),
    ]
    workers = {r.workers for r in records}
    if {2, 6} <= workers:
        t2, t6 = median_throughput(records, 2), median_throughput(records, 6)
        checks.append(Check("load: throughput(6 workers) >= 1.2 x throughput(2 workers)", t6 >= 1.2 * t2,
                            f"{t6:.1f} vs {t2:.1f} users/s (ratio {t6 / t2:.2f})"))
    if {12, 20} <= workers:
        t12, t20 = median_throughput(records, 12), median_throughput(records, 20)
        checks.append(Check("load: throughput(20 workers) >= 0.9 x throughput(12 workers)", t20 >= 0.9 * t12,
                            f"{t20:.1f} vs {t12:.1f} users/s (ratio {t20 / t12:.2f})"))
    return checks


def check_client_lightness(records: Sequence[LoadRecord], ratio: float = 0.3) -> Check:
    top = max(r.workers for r in records)
    rows = [r for r in records if r.workers == top and r.valid]
    cpu, wall = sum(r.client_cpu_s for r in rows), sum(r.client_wall_s for r in rows)
    return Check(f"client: total CPU < {ratio} x total wall", wall > 0 and cpu < ratio * wall,
                 f"{cpu:.2f}s CPU / {wall:.2f}s wall = {cpu / wall if wall else float('nan'):.3f} at {top} workers")


def throughput_cv(records: Sequence[LoadRecord], workers: int) -> float:
    xs = [r.throughput for r in records if r.workers == workers and r.valid]
    if len(xs) < 2:
        return 0.0
    return statistics.stdev(xs) / statistics.fmean(xs)


# -- reporting --------------------------------------------------------------------

def _write_csv(path: Path, rows: Sequence[Any], cls: type) -> None:
    names = [f.name for f in fields(cls)]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=names)
        w.writeheader()
        for r in rows:
            w.writerow(asdict(r))


def emit_report(
    out_dir: str | Path,
    load: Sequence[LoadRecord] = (),
    micro: Sequence[MicroRecord] = (),
    token_cmp: Sequence[TokenCmpRecord] = (),
    checks: Sequence[Check] = (),
) -> Path:
    """Write the three CSVs (always, with headers) and ``summary.txt``."""
    if not (load or micro or token_cmp):
        raise ValueError("nothing to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "load.csv", load, LoadRecord)
    _write_csv(out / "micro.csv", micro, MicroRecord)
    _write_csv(out / "token_cmp.csv", token_cmp, TokenCmpRecord)
    lines = [f"xrf benchmark summary ({time.strftime('%Y-%m-%d %H:%M:%S')}, {os.cpu_count()} logical CPUs)", ""]
    for w in sorted({r.workers for r in load}):
        lines.append(
            f"workers={w:>3}  median throughput {median_throughput(load, w):8.1f} users/s"
            f"  CV {throughput_cv(load, w):.3f}"
        )
    if load:
        lines.append("")
    lines += [c.line() for c in checks]
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    return out


def load_csv(path: str | Path, cls: type) -> list[Any]:
    conv = {f.name: f.type for f in fields(cls)}
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            vals = {}
            for k, v in row.items():
                t = conv[k]
                vals[k] = v == "True" if t in (bool, "bool") else int(v) if t in (int, "int") else (
                    float(v) if t in (float, "float") else v)
            out.append(cls(**vals))
    return out


# -- orchestration -----------------------------------------------------------------

class Bench:
    """Owns the workspace; sized from the config."""

    def __init__(self, config: BenchConfig, workdir: str | Path | None = None) -> None:
        self.config = config
        self._tmp = None
        if workdir is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="xrf-bench-")
            workdir = self._tmp.name
        self.workdir = Path(workdir)
        per_run = max([*config.client_counts, config.micro_bench_clients]) + config.providers + 2
        stock_path = config.key_stock or str(Path(config.out_dir) / "keystock.pem")
        need = 1 + config.identities + per_run
        stock = ensure_key_stock(stock_path, need)
        self.ws = Workspace(self.workdir, per_run, stock, config.identities)

    def close(self) -> None:
        if self._tmp is not None:
            self._tmp.cleanup()

    def __enter__(self) -> Bench:
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()

    def load(self, clients: Sequence[int] | None = None, workers: Sequence[int] | None = None,
             reps: int | None = None) -> list[LoadRecord]:
        cfg = self.config
        out = []
        for rep in range(reps or cfg.repetitions):
            # interleave worker counts so slow drift in machine state hits all of them
            for w in workers or cfg.worker_counts:
                for n in clients or cfg.client_counts:
                    rec = run_load(self.ws, n, w, rep, cfg.providers)
                    log.info("load rep=%d clients=%d workers=%d throughput=%.1f", rep, n, w, rec.throughput)
                    out.append(rec)
        return out

    def micro(self, reps: int | None = None) -> list[MicroRecord]:
        cfg = self.config
        out = []
        for rep in range(reps or cfg.repetitions):
            out += run_micro(self.ws, cfg.micro_bench_clients, cfg.micro_workers, rep, cfg.providers)
        return out

    def token_cmp(self, reps: int | None = None) -> list[TokenCmpRecord]:
        cfg = self.config
        out = []
        for rep in range(reps or cfg.repetitions):
            out += run_token_comparison(self.ws, cfg.token_comparison_requests, rep)
        return out

    def all(self) -> tuple[list[Check], Path]:
        load, micro, tcmp = self.load(), self.micro(), self.token_cmp()
        checks = [*check_load(load), check_client_lightness(load), *check_micro(micro), *check_token_cmp(tcmp)]
        path = emit_report(self.config.out_dir, load, micro, tcmp, checks)
        return checks, path


def records_to_json(records: Iterable[Any]) -> str:
    return json.dumps([asdict(r) for r in records], indent=1)
