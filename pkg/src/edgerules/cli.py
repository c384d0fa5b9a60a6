"""Operator CLI: serve the gateway, pack/sign rules, drive a running gateway.

Remote commands talk to the management API over HTTP and exit non-zero with
the API problem message on failure.
"""

from __future__ import annotations

import argparse
import base64
import io
import json
import logging
import signal
import sys
import threading
import zipfile
from pathlib import Path

import requests

from .errors import EngineError
from .lifecycle import (build_package, generate_keypair, load_private_key_pem,
                        private_key_pem, public_key_b64)

DEFAULT_ADDR = "http://127.0.0.1:8470"


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper()),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except EngineError as exc:
        print(f"error: {json.dumps(exc.problem())}", file=sys.stderr)
        return 1
    except requests.ConnectionError:
        print(f"error: gateway not reachable at {getattr(args, 'addr', DEFAULT_ADDR)}",
              file=sys.stderr)
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gw",
                                     description="edge rules gateway operator tool")
    parser.add_argument("--log-level", default="info",
                        choices=["debug", "info", "warning", "error"])
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="run the gateway daemon")
    serve.add_argument("--config", required=True, help="gateway config JSON")
    serve.set_defaults(func=cmd_serve)

    keygen = sub.add_parser("keygen", help="create an Ed25519 signing keypair")
    keygen.add_argument("--out", default="signing-key.pem", help="private key PEM path")
    keygen.set_defaults(func=cmd_keygen)

    pack = sub.add_parser("pack", help="build and sign a rule package")
    pack.add_argument("script", help="RuleScript source file (.rs.sre)")
    pack.add_argument("--name", help="rule name (defaults to the script's rule name)")
    pack.add_argument("--key", required=True, help="Ed25519 private key PEM")
    pack.add_argument("--out", help="output package path (default <name>.zip)")
    pack.add_argument("--version", default="1.0")
    pack.add_argument("--description", default=None)
    pack.add_argument("--param", action="append", default=[], metavar="KEY=VALUE",
                      help="default settable parameter (repeatable); VALUE parses "
                           "as bool/number/string")
    pack.set_defaults(func=cmd_pack)

    def remote(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--addr", default=DEFAULT_ADDR, help="gateway address")
        return p

    install = remote("install", "upload a rule package")
    install.add_argument("package", help="package zip path")
    install.set_defaults(func=cmd_install)

    for action in ("start", "stop"):
        p = remote(action, f"{action} an installed rule")
        p.add_argument("name")
        p.set_defaults(func=cmd_start if action == "start" else cmd_stop)

    rm = remote("rm", "uninstall a rule (must not be started)")
    rm.add_argument("name")
    rm.set_defaults(func=cmd_rm)

    set_cmd = remote("set", "update a settable parameter")
    set_cmd.add_argument("name")
    set_cmd.add_argument("key")
    set_cmd.add_argument("value")
    set_cmd.set_defaults(func=cmd_set)

    query = remote("query", "run a semantic query")
    query.add_argument("text")
    query.set_defaults(func=cmd_query)

    rules = remote("rules", "list installed rules")
    rules.set_defaults(func=cmd_rules)

    things = remote("things", "list registered things")
    things.set_defaults(func=cmd_things)

    events = remote("events", "tail the gateway event stream")
    events.add_argument("--filter", default=None,
                        help="comma list of notify,lifecycle,device")
    events.set_defaults(func=cmd_events)

    bench = sub.add_parser("bench", help="run a benchmark")
    bench.add_argument("metric", choices=["ret", "rlt", "rmu"])
    bench.add_argument("--grid", default=None,
                       help="semicolon-separated key=v1,v2 pairs: rules=100,500;"
                            "rates=5,11;duration=10;repeats=3")
    bench.add_argument("--paper-scale", action="store_true",
                       help="use the full published grids (long)")
    bench.add_argument("--out", default=None, help="raw CSV output path")
    bench.set_defaults(func=cmd_bench)

    return parser


# --- local commands -----------------------------------------------------------------


def cmd_serve(args) -> int:
    from .gateway import Gateway, GatewayConfig
    try:
        config = GatewayConfig.from_file(args.config)
    except EngineError as exc:
        print(f"config error: {exc.message}", file=sys.stderr)
        return 2
    gateway = Gateway(config)
    gateway.start()
    print(f"gateway listening on http://{config.host}:{gateway.port}")
    stop = threading.Event()
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    stop.wait()
    gateway.stop()
    return 0


def cmd_keygen(args) -> int:
    key, pub = generate_keypair()
    path = Path(args.out)
    path.write_bytes(private_key_pem(key))
    pub_b64 = base64.b64encode(pub).decode("ascii")
    path.with_suffix(".pub").write_text(pub_b64 + "\n", encoding="utf-8")
    print(f"private key: {path}")
    print(f"public key (add to trusted_keys): {pub_b64}")
    return 0


def parse_param_value(text: str):
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    try:
        return float(text)
    except ValueError:
        return text


def cmd_pack(args) -> int:
    script = Path(args.script).read_text(encoding="utf-8")
    key = load_private_key_pem(Path(args.key).read_bytes())
    params = {}
    for pair in args.param:
        if "=" not in pair:
            print(f"error: --param needs KEY=VALUE, got {pair!r}", file=sys.stderr)
            return 1
        k, v = pair.split("=", 1)
        params[k] = parse_param_value(v)
    fields = {"version": args.version, "params": params}
    if args.name:
        fields["name"] = args.name
    if args.description:
        fields["description"] = args.description
    package = build_package(script, fields, key)
    manifest = json.loads(zipfile.ZipFile(io.BytesIO(package)).read("rule.json"))
    out = Path(args.out) if args.out else Path(f"{manifest['name']}.zip")
    out.write_bytes(package)
    print(f"packed {manifest['name']} v{manifest['version']} -> {out} "
          f"(signed by {public_key_b64(key)[:12]}…)")
    return 0


# --- remote commands ------------------------------------------------------------------


def _fail(response) -> int:
    try:
        doc = response.json()
        print(f"error {response.status_code}: {doc.get('code')}: {doc.get('message')}",
              file=sys.stderr)
    except ValueError:
        print(f"error {response.status_code}", file=sys.stderr)
    return 1


def cmd_install(args) -> int:
    data = Path(args.package).read_bytes()
    resp = requests.post(f"{args.addr}/rules", data=data,
                         headers={"Content-Type": "application/zip"})
    if resp.status_code != 201:
        return _fail(resp)
    doc = resp.json()
    print(f"{doc['name']} v{doc['version']}: {doc['state']}")
    return 0


def _lifecycle(args, action: str) -> int:
    resp = requests.post(f"{args.addr}/rules/{args.name}/{action}")
    if resp.status_code != 200:
        return _fail(resp)
    doc = resp.json()
    print(f"{doc['name']}: {doc['state']}")
    return 0


def cmd_start(args) -> int:
    return _lifecycle(args, "start")


def cmd_stop(args) -> int:
    return _lifecycle(args, "stop")


def cmd_rm(args) -> int:
    resp = requests.delete(f"{args.addr}/rules/{args.name}")
    if resp.status_code != 204:
        return _fail(resp)
    print(f"{args.name}: removed")
    return 0


def cmd_set(args) -> int:
    resp = requests.put(f"{args.addr}/rules/{args.name}/params/{args.key}",
                        json=parse_param_value(args.value))
    if resp.status_code != 200:
        return _fail(resp)
    doc = resp.json()
    print(f"{doc['name']}.{doc['key']} = {doc['value']} (effective next cycle)")
    return 0


def cmd_query(args) -> int:
    resp = requests.post(f"{args.addr}/query", json={"q": args.text})
    if resp.status_code != 200:
        return _fail(resp)
    doc = resp.json()
    if "things" in doc:
        for thing in doc["things"]:
            print(thing)
    else:
        print(doc["value"])
    return 0


def cmd_rules(args) -> int:
    resp = requests.get(f"{args.addr}/rules")
    if resp.status_code != 200:
        return _fail(resp)
    for rule in resp.json()["rules"]:
        params = " ".join(f"{k}={v}" for k, v in rule["params"].items())
        print(f"{rule['name']}\t{rule['state']}\tv{rule['version']}\t{params}")
    return 0


def cmd_things(args) -> int:
    resp = requests.get(f"{args.addr}/things")
    if resp.status_code != 200:
        return _fail(resp)
    for thing in resp.json()["things"]:
        tags = " ".join(f"{k}:{v}" for k, v in sorted(thing["tags"].items()))
        caps = " ".join(f"{c['name']}={c['value']}" for c in thing["capabilities"])
        print(f"{thing['id']}\t{tags}\t{caps}")
    return 0


def cmd_events(args) -> int:
    params = {"filter": args.filter} if args.filter else {}
    with requests.get(f"{args.addr}/events", params=params, stream=True) as resp:
        if resp.status_code != 200:
            return _fail(resp)
        try:
            for line in resp.iter_lines(decode_unicode=True):
                if line and line.startswith("data: "):
                    print(line[len("data: "):], flush=True)
        except KeyboardInterrupt:
            pass
    return 0


# --- bench ---------------------------------------------------------------------------


def parse_grid(text: str | None) -> dict:
    grid: dict = {}
    if not text:
        return grid
    for part in text.split(";"):
        if not part:
            continue
        if "=" not in part:
            raise EngineError(f"bad grid entry {part!r}; expected key=v1,v2")
        key, values = part.split("=", 1)
        grid[key.strip()] = [float(v) for v in values.split(",") if v]
    return grid


def cmd_bench(args) -> int:
    from . import simbench as sb
    grid = parse_grid(args.grid)
    if args.metric == "ret":
        rules = tuple(int(v) for v in grid.get("rules", [])) or (
            sb.FULL_SCALE_RET_RULES if args.paper_scale else sb.DESK_RET_RULES)
        repeats = int(grid.get("repeats", [3])[0])
        report = sb.run_ret(rules, repeats=repeats, out_csv=args.out)
    elif args.metric == "rlt":
        rules = tuple(int(v) for v in grid.get("rules", [])) or (
            sb.FULL_SCALE_RLT_RULES if args.paper_scale else sb.DESK_RLT_RULES)
        rates = tuple(grid.get("rates", [])) or (
            sb.FULL_SCALE_RLT_RATES if args.paper_scale else sb.DESK_RLT_RATES)
        duration = float(grid.get("duration", [
            sb.FULL_SCALE_RLT_DURATION_S if args.paper_scale else sb.DESK_RLT_DURATION_S])[0])
        report = sb.run_rlt(rules, rates, duration, out_csv=args.out)
    else:
        rules = tuple(int(v) for v in grid.get("rules", [])) or sb.DESK_RMU_RULES
        report = sb.run_rmu(rules, out_csv=args.out)
    print(json.dumps(report.to_json(), indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
