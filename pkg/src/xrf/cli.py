"""Command-line entry point: ``xrf serve | client | keygen | bench``.

Every subcommand accepts ``--config FILE``, a JSON object whose keys are the
subcommand's long flag names (with or without the leading dashes, ``-`` or
``_`` both fine).  Precedence is built-in defaults < config file < flags.

Exit codes: 0 success, 1 configuration error, 2 runtime failure,
3 benchmark acceptance check failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
import uuid
from pathlib import Path
from typing import Any, Callable, Sequence

from . import crypto
from .config import ConfigError, ServerConfig, dump_trust_store

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_ACCEPTANCE = 0, 1, 2, 3

log = logging.getLogger("xrf.cli")


class _Parser(argparse.ArgumentParser):
    """Usage errors are configuration errors (exit 1), not argparse's 2."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


# -- flag tables ------------------------------------------------------------------
# (flag, default, argparse kwargs).  Defaults live here rather than in argparse
# so that "was this flag given?" stays answerable for config-file merging.

_SERVE = [
    ("--listen", "127.0.0.1:8080", dict(help="host:port to bind (port 0 picks a free one)")),
    ("--workers", 6, dict(type=int, help="request worker threads")),
    ("--token-ttl", 300, dict(type=int, help="access token lifetime, seconds")),
    ("--session-ttl", 600, dict(type=int, help="authenticated session lifetime, seconds")),
    ("--permissions", None, dict(help="permissions matrix JSON (default: bundled)")),
    ("--trust-store", None, dict(help="trust store JSON {uuid: public key PEM} (required)")),
    ("--offerings", None, dict(help="offering vocabulary JSON (default: bundled)")),
    ("--key", None, dict(help="server private key PEM (required)")),
    ("--key-stock", None, dict(help="PEM bundle of pre-generated token signing keys")),
    ("--key-pool", 16, dict(type=int, help="signing keys to keep pre-generated in the background (0 = off)")),
    ("--issuer", "xrf", dict(help="iss claim of issued tokens")),
    ("--access-log", True, dict(action=argparse.BooleanOptionalAction, help="JSON access log on stderr")),
]

_CLIENT = [
    ("--role", None, dict(choices=["provider", "requester"], help="provider serves /metrics; requester consumes it")),
    ("--server", "http://127.0.0.1:8080", dict(help="XRF server base URL")),
    ("--server-pub", None, dict(help="server public key PEM (required)")),
    ("--key", None, dict(help="this principal's private key PEM (required)")),
    ("--id", None, dict(help="this principal's UUID (default: stem of --key)")),
    ("--name", None, dict(help="instance name (default: role)")),
    ("--offering", None, dict(help="own offering (default: KPIMON / TRAFFIC-STEER by role)")),
    ("--location", "edge-A", dict(help="own location")),
    ("--want-offering", "KPIMON", dict(help="requester: offering to discover")),
    ("--want-location", None, dict(help="requester: location to discover (default: --location)")),
    ("--listen", "127.0.0.1:0", dict(help="provider: sidecar listen address")),
    ("--mode", "self-contained", dict(choices=["self-contained", "remote-introspection"],
                                      help="provider: token validation mode")),
    ("--timeout", 10.0, dict(type=float, help="HTTP timeout, seconds")),
]

_KEYGEN = [
    ("--out", None, dict(help="output directory (required)")),
    ("--principals", [], dict(nargs="*", help="principal UUIDs (new random ones if --count is given)")),
    ("--count", 0, dict(type=int, help="additionally mint this many random principals")),
    ("--with-server", False, dict(action="store_true", help="also write server.pem / server.pub.pem")),
    ("--force", False, dict(action="store_true", help="overwrite existing files")),
]

_BENCH_COMMON = [
    ("--out", "bench-out", dict(help="directory for CSVs and summary.txt")),
    ("--reps", 5, dict(type=int, help="repetitions (medians are taken across them)")),
    ("--key-stock", None, dict(help="PEM bundle of RSA keys reused across runs (default: OUT/keystock.pem)")),
]
_BENCH = {
    "load": [
        ("--clients", [200], dict(type=int, nargs="+", help="concurrent clients per run")),
        ("--workers", [2, 6, 12, 20], dict(type=int, nargs="+", help="server worker counts")),
    ],
    "micro": [
        ("--clients", 50, dict(type=int, help="concurrent clients")),
        ("--workers", 6, dict(type=int, help="server worker count")),
    ],
    "token-cmp": [
        ("--requests", 100, dict(type=int, help="requests per validation mode")),
    ],
    "all": [
        ("--clients", [200], dict(type=int, nargs="+", help="concurrent clients per load run")),
        ("--workers", [2, 6, 12, 20], dict(type=int, nargs="+", help="server worker counts for load runs")),
        ("--micro-clients", 50, dict(type=int, help="concurrent clients in the micro benchmark")),
        ("--requests", 100, dict(type=int, help="requests per validation mode")),
    ],
}


def _add(parser: argparse.ArgumentParser, table: list) -> dict[str, Any]:
    defaults = {}
    for flag, default, kw in table:
        dest = flag[2:].replace("-", "_")
        parser.add_argument(flag, dest=dest, default=argparse.SUPPRESS, **kw)
        defaults[dest] = default
    parser.add_argument("--config", default=argparse.SUPPRESS, help="JSON file of flag values (flags win)")
    parser.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS, help="more logging")
    return defaults


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="xrf", description="xApp repository function: server, demo clients, keys and benchmarks")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("serve", help="run the authorization/registry server")
    s.set_defaults(_defaults=_add(s, _SERVE), _run=cmd_serve)

    c = sub.add_parser("client", help="run a demo provider or requester")
    c.set_defaults(_defaults=_add(c, _CLIENT), _run=cmd_client)

    k = sub.add_parser("keygen", help="generate principal key pairs and a trust store")
    k.set_defaults(_defaults=_add(k, _KEYGEN), _run=cmd_keygen)

    b = sub.add_parser("bench", help="run the benchmark harness")
    bsub = b.add_subparsers(dest="experiment", required=True, parser_class=_Parser)
    for name, table in _BENCH.items():
        e = bsub.add_parser(name, help=f"{name} experiment")
        e.set_defaults(_defaults=_add(e, _BENCH_COMMON + table), _run=cmd_bench)
    return p


def _load_config_file(path: str, known: dict[str, Any]) -> dict[str, Any]:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must be a JSON object")
    out = {}
    for key, value in data.items():
        dest = key.lstrip("-").replace("-", "_")
        if dest not in known:
            raise ConfigError(f"config file {path}: unknown setting {key!r}")
        out[dest] = value
    return out


def resolve(ns: argparse.Namespace) -> dict[str, Any]:
    """defaults < config file < explicit flags."""
    defaults: dict[str, Any] = ns._defaults
    given = {k: v for k, v in vars(ns).items() if not k.startswith("_") and k not in ("command", "experiment")}
    merged = dict(defaults)
    if "config" in given:
        merged.update(_load_config_file(given.pop("config"), defaults))
    given.pop("verbose", None)
    merged.update(given)
    return merged


def _setup_logging(verbose: int) -> None:
    level = logging.DEBUG if verbose >= 2 else logging.INFO if verbose == 1 else logging.WARNING
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _install_stop_handlers() -> threading.Event:
    """SIGINT/SIGTERM set the returned event; install before announcing readiness."""
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    return stop


def _wait(stop: threading.Event) -> None:
    while not stop.wait(3600):
        pass


def _read_pem(path: str | None, what: str, loader: Callable[[bytes], Any]) -> Any:
    if not path:
        raise ConfigError(f"--{what} is required")
    try:
        return loader(Path(path).read_bytes())
    except OSError as exc:
        raise ConfigError(f"cannot read {what} file {path}: {exc}") from None
    except (ValueError, crypto.CryptoError) as exc:
        raise ConfigError(f"bad {what} file {path}: {exc}") from None


# -- serve ----------------------------------------------------------------------

def cmd_serve(opts: dict[str, Any]) -> int:
    from .server import build_server

    access = logging.getLogger("xrf.access")
    if opts["access_log"]:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(message)s"))
        access.addHandler(handler)
        access.setLevel(logging.INFO)
        access.propagate = False
    else:
        access.setLevel(logging.WARNING)
    cfg = ServerConfig(**{k: opts[k] for k in (
        "listen", "workers", "token_ttl", "session_ttl", "permissions", "trust_store", "offerings", "key",
        "issuer", "key_pool", "key_stock")})
    app, httpd = build_server(cfg)
    stop = _install_stop_handlers()
    app.keys.start()
    httpd.start()
    print(f"listening on {httpd.address}", flush=True)
    try:
        _wait(stop)
    finally:
        httpd.stop()
        app.keys.stop()
        st = app.stats()
        print(
            "stats: " + json.dumps({
                "users_done": st["users_done"],
                "process_cpu_s": round(st["process_cpu"], 4),
                "requests": {path: s["count"] for path, s in st["ops"].items()},
                "keys_generated_inline": st["keys_generated_inline"],
            }),
            flush=True,
        )
    return EXIT_OK


# -- client -----------------------------------------------------------------------

def cmd_client(opts: dict[str, Any]) -> int:
    from .client import ClientConfig, ServiceError, StartupError, ValidationMode, XRFClient

    role = opts["role"]
    if role is None:
        raise ConfigError("--role is required")
    own_key = _read_pem(opts["key"], "key", crypto.load_private_key)
    server_pub = _read_pem(opts["server_pub"], "server-pub", crypto.load_public_key)
    principal = opts["id"] or Path(opts["key"]).stem
    try:
        principal = str(uuid.UUID(principal))
    except ValueError:
        raise ConfigError(f"principal id {principal!r} is not a UUID (pass --id)") from None
    offering = opts["offering"] or ("KPIMON" if role == "provider" else "TRAFFIC-STEER")
    cfg = ClientConfig(
        server_url=opts["server"], own_key=own_key, server_pub=server_pub,
        profile_seed={"name": opts["name"] or role, "offering": offering,
                      "location": opts["location"], "instance_id": principal},
        desired_offering=opts["want_offering"],
        desired_location=opts["want_location"] or opts["location"],
        timeout=opts["timeout"],
    )
    client = XRFClient(cfg)
    try:
        if role == "provider":
            stop = _install_stop_handlers()
            listener = client.start_listener(mode=ValidationMode(opts["mode"]), listen=opts["listen"])
            client.join()
            print(f"provider {client.id} registered, serving on {listener.address} ({opts['mode']})", flush=True)
            _wait(stop)
            print("stats: " + json.dumps({"denials": len(listener.denials),
                                          "served": listener.router.snapshot().get("/metrics", {}).get("count", 0)}),
                  flush=True)
            return EXIT_OK

        try:
            client.startup()
        except StartupError as exc:
            print(f"startup failed at {exc.step}: {exc.cause}", file=sys.stderr)
            return EXIT_RUNTIME
        print(f"requester {client.id} {client.state.name}; provider {client.provider.xAppInstanceID}"
              f" at {client.provider.endpointAddress}", flush=True)
        body = client.request_service("/metrics")
        print("authorized GET /metrics -> 200 " + json.dumps(body), flush=True)
        # the same request without a token must be turned away
        try:
            client.request_service("/metrics", token="")
        except ServiceError as exc:
            print(f"unauthorized GET /metrics -> {exc.status} {exc.body.get('error') if isinstance(exc.body, dict) else ''}",
                  flush=True)
        else:
            print("unauthorized GET /metrics was served", file=sys.stderr)
            return EXIT_RUNTIME
        return EXIT_OK
    except (StartupError, ServiceError, OSError) as exc:
        print(f"client error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        client.close()


# -- keygen ---------------------------------------------------------------------

def cmd_keygen(opts: dict[str, Any]) -> int:
    if not opts["out"]:
        raise ConfigError("--out is required")
    out = Path(opts["out"])
    ids = []
    for p in opts["principals"] or []:
        try:
            ids.append(str(uuid.UUID(p)))
        except ValueError:
            raise ConfigError(f"principal {p!r} is not a UUID") from None
    ids += [str(uuid.uuid4()) for _ in range(opts["count"])]
    if not ids and not opts["with_server"]:
        raise ConfigError("nothing to generate: give --principals, --count or --with-server")
    targets = [out / f"{i}.pem" for i in ids] + [out / "trust.json"]
    if opts["with_server"]:
        targets += [out / "server.pem", out / "server.pub.pem"]
    clash = [str(t) for t in targets if t.exists()]
    if clash and not opts["force"]:
        print(f"refusing to overwrite {', '.join(clash)} (use --force)", file=sys.stderr)
        return EXIT_CONFIG
    try:
        out.mkdir(parents=True, exist_ok=True)
        trust = {}
        for principal in ids:
            key = crypto.generate_keypair().private_key
            (out / f"{principal}.pem").write_bytes(crypto.private_key_to_pem(key))
            trust[principal] = key.public_key()
            print(f"{principal} -> {out / (principal + '.pem')}")
        dump_trust_store(trust, out / "trust.json")
        if opts["with_server"]:
            key = crypto.generate_keypair().private_key
            (out / "server.pem").write_bytes(crypto.private_key_to_pem(key))
            (out / "server.pub.pem").write_bytes(crypto.public_key_to_pem(key.public_key()))
            print(f"server key -> {out / 'server.pem'}")
    except OSError as exc:
        print(f"keygen failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"trust store with {len(ids)} entries -> {out / 'trust.json'}")
    return EXIT_OK


# -- bench --------------------------------------------------------------------------

def cmd_bench(opts: dict[str, Any], experiment: str) -> int:
    from . import bench

    kw: dict[str, Any] = {"out_dir": opts["out"], "repetitions": opts["reps"], "key_stock": opts["key_stock"]}
    if experiment in ("load", "all"):
        kw["client_counts"], kw["worker_counts"] = list(opts["clients"]), list(opts["workers"])
    if experiment == "micro":
        kw["micro_bench_clients"], kw["micro_workers"] = opts["clients"], opts["workers"]
    if experiment == "all":
        kw["micro_bench_clients"] = opts["micro_clients"]
    if "requests" in opts:
        kw["token_comparison_requests"] = opts["requests"]
    try:
        cfg = bench.BenchConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad benchmark settings: {exc}") from None

    with bench.Bench(cfg) as b:
        if experiment == "all":
            checks, path = b.all()
        else:
            load = micro = tcmp = []
            if experiment == "load":
                load = b.load()
                checks = [*bench.check_load(load), bench.check_client_lightness(load)]
            elif experiment == "micro":
                micro = b.micro()
                checks = bench.check_micro(micro)
            else:
                tcmp = b.token_cmp()
                checks = bench.check_token_cmp(tcmp)
            path = bench.emit_report(cfg.out_dir, load, micro, tcmp, checks)
    print((path / "summary.txt").read_text(), end="")
    return EXIT_OK if all(c.passed for c in checks) else EXIT_ACCEPTANCE


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    _setup_logging(getattr(ns, "verbose", 0))
    try:
        opts = resolve(ns)
        if ns.command == "bench":
            return cmd_bench(opts, ns.experiment)
        return ns._run(opts)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        return EXIT_OK
    except Exception as exc:  # noqa: BLE001 - last-resort reporting for a CLI
        log.debug("fatal", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
