"""The runnable gateway daemon: HTTP management API + SSE event stream.

Read handlers serve snapshots straight off the registry/lifecycle tables;
every mutating handler goes through the lifecycle manager, which serializes
it with rule execution on the scheduler thread, so concurrent conflicting
requests resolve to exactly one winner.
"""

from __future__ import annotations

import base64
import json
import logging
import mimetypes
import queue
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

from .errors import EngineError, ParseError, QuerySyntaxError, UnknownId, VerbMismatch
from .lifecycle import LifecycleManager
from .notifications import NotificationSink
from .ontology import load_ontology_file
from .queries import SEARCH, SUBSCRIBE, eval_query, parse_query
from .registry import ThingRegistry, load_commissioning_file
from .runtime import RuleEngine
from .scheduler import Scheduler, VirtualClock, WallClock

logger = logging.getLogger("edgerules.gateway")

_STATUS_BY_CODE = {
    "SignatureInvalid": 401,
    "UntrustedKey": 401,
    "BadZip": 400,
    "MissingEntry": 400,
    "Base64Error": 400,
    "SourceError": 400,
    "NameMismatch": 400,
    "MissingInit": 400,
    "ParseError": 400,
    "SyntaxError": 400,
    "UnknownVerb": 400,
    "UnknownTarget": 400,
    "VerbMismatch": 400,
    "UnknownRule": 404,
    "UnknownId": 404,
    "UnknownParam": 404,
    "UnknownCapability": 404,
    "InvalidTransition": 409,
    "TypeMismatch": 422,
    "EmptyAggregate": 422,
    "NonNumericCapability": 422,
    "RuntimeError": 422,
    "UnknownFunction": 422,
    "BadTimerArgs": 422,
    "RuleNotStarted": 409,
    "CallDepthExceeded": 422,
}


@dataclass(slots=True)
class GatewayConfig:
    commissioning: str
    ontology: str
    trusted_keys: list[str]
    state_dir: str
    host: str = "127.0.0.1"
    port: int = 8470
    clock: str = "wall"
    notifications: str | None = None
    ui_dir: str | None = None
    sse_heartbeat_ms: int = 1000
    origin: Path = field(default_factory=Path)

    @classmethod
    def from_file(cls, path: str | Path) -> "GatewayConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ParseError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ParseError(f"config {path} is not valid JSON: {exc.msg}",
                             line=exc.lineno) from exc
        return cls.from_dict(doc, origin=path.parent)

    @classmethod
    def from_dict(cls, doc: dict, origin: Path | None = None) -> "GatewayConfig":
        listen = doc.get("listen", {})
        config = cls(
            commissioning=doc.get("commissioning", ""),
            ontology=doc.get("ontology", ""),
            trusted_keys=list(doc.get("trusted_keys", [])),
            state_dir=doc.get("state_dir", "state"),
            host=listen.get("host", "127.0.0.1"),
            port=int(listen.get("port", 8470)),
            clock=doc.get("clock", "wall"),
            notifications=doc.get("notifications"),
            ui_dir=doc.get("ui_dir"),
            sse_heartbeat_ms=int(doc.get("sse_heartbeat_ms", 1000)),
            origin=origin or Path(),
        )
        config.validate()
        return config

    def resolve(self, p: str) -> Path:
        return (self.origin / p).resolve()

    def validate(self) -> None:
        for label, value in (("commissioning", self.commissioning),
                             ("ontology", self.ontology)):
            if not value:
                raise ParseError(f"config is missing the {label} file path")
            if not self.resolve(value).exists():
                raise ParseError(f"{label} path does not exist: {self.resolve(value)}")
        if self.clock not in ("wall", "virtual"):
            raise ParseError(f"clock must be wall or virtual, got {self.clock!r}")
        if not self.trusted_keys:
            raise ParseError("at least one trusted key is required to install rules")
        for key in self.trusted_keys:
            try:
                raw = base64.b64decode(key, validate=True)
            except Exception as exc:
                raise ParseError(f"trusted key is not Base64: {key[:16]}…") from exc
            if len(raw) != 32:
                raise ParseError("trusted keys must be 32-byte Ed25519 public keys")
        if self.ui_dir is not None and not self.resolve(self.ui_dir).is_dir():
            raise ParseError(f"ui_dir does not exist: {self.resolve(self.ui_dir)}")

    def decoded_keys(self) -> list[bytes]:
        return [base64.b64decode(key) for key in self.trusted_keys]


class EventHub:
    """Fan-out of gateway happenings to SSE clients; never blocks producers."""

    def __init__(self, *, client_buffer: int = 1000):
        self._clients: list[queue.Queue] = []
        self._lock = threading.Lock()
        self._buffer = client_buffer

    def subscribe(self) -> queue.Queue:
        q: queue.Queue = queue.Queue(maxsize=self._buffer)
        with self._lock:
            self._clients.append(q)
        return q

    def unsubscribe(self, q: queue.Queue) -> None:
        with self._lock:
            if q in self._clients:
                self._clients.remove(q)

    def publish(self, doc: dict) -> None:
        with self._lock:
            clients = list(self._clients)
        for q in clients:
            try:
                q.put_nowait(doc)
            except queue.Full:
                pass


class Gateway:
    """Wires registry, semantics, runtime, lifecycle, and the HTTP server."""

    def __init__(self, config: GatewayConfig):
        self.config = config
        self.clock = VirtualClock() if config.clock == "virtual" else WallClock()
        self.scheduler = Scheduler(self.clock, error_handler=self._log_rule_error)
        self.registry = ThingRegistry(now_ms=self.clock.now_ms)
        self.ontology = load_ontology_file(str(config.resolve(config.ontology)))
        sink_path = str(config.resolve(config.notifications)) if config.notifications else None
        self.notifications = NotificationSink(file_path=sink_path)
        self.engine = RuleEngine(self.registry, self.ontology, self.scheduler,
                                 notifications=self.notifications)
        self.manager = LifecycleManager(config.resolve(config.state_dir),
                                        config.decoded_keys(), self.engine)
        self.hub = EventHub()
        self.registry.add_listener(
            lambda event: self.hub.publish({"type": "device", **event.to_json()}))
        self.notifications.add_listener(
            lambda note: self.hub.publish({"type": "notify", **note.to_json()}))
        self._server: ThreadingHTTPServer | None = None
        self._server_thread: threading.Thread | None = None
        self._running = False

    @staticmethod
    def _log_rule_error(exc: BaseException) -> None:
        logger.warning("scheduler item failed: %s", exc)

    # -- lifecycle of the daemon itself ------------------------------------------

    def start(self) -> None:
        load_commissioning_file(self.registry,
                                str(self.config.resolve(self.config.commissioning)))
        self.scheduler.start()
        restored = self.manager.restore_on_boot()
        if restored:
            logger.info("restored %d rule(s)", restored)
        handler = _make_handler(self)
        self._server = ThreadingHTTPServer((self.config.host, self.config.port), handler)
        self._server.daemon_threads = True
        self._server_thread = threading.Thread(target=self._server.serve_forever,
                                               name="gateway-http", daemon=True)
        self._running = True
        self._server_thread.start()
        logger.info("gateway listening on %s:%d", *self._server.server_address[:2])

    @property
    def port(self) -> int:
        assert self._server is not None
        return self._server.server_address[1]

    def stop(self) -> None:
        self._running = False
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
        self.scheduler.stop()
        self.notifications.close()

    # -- operations shared by HTTP handlers ------------------------------------------

    def publish_lifecycle(self, action: str, rule: str, state: str | None = None,
                          **extra) -> None:
        doc = {"type": "lifecycle", "action": action, "rule": rule,
               "at": self.clock.now_ms()}
        if state is not None:
            doc["state"] = state
        doc.update(extra)
        self.hub.publish(doc)

    def run_query(self, text: str):
        parsed = parse_query(text)
        if parsed.verb == SUBSCRIBE:
            raise VerbMismatch("subscribe queries need a rule callback; "
                               "use engine.subscribe from a rule")
        result = eval_query(parsed, self.registry, self.ontology)
        if parsed.verb == SEARCH:
            return {"things": result}
        return {"value": result}

    def advance_clock(self, ms: float) -> float:
        if not isinstance(self.clock, VirtualClock):
            raise EngineError("clock advance is only available in virtual clock mode")
        self.scheduler.submit(lambda: self.scheduler.advance(ms), wait=True)
        return self.clock.now_ms()


def _make_handler(gw: Gateway):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"
        server_version = "edgerules"

        def log_message(self, fmt, *args):  # route access logs through logging
            logger.debug("%s %s", self.address_string(), fmt % args)

        # -- plumbing ------------------------------------------------------

        def _body(self) -> bytes:
            length = int(self.headers.get("Content-Length") or 0)
            return self.rfile.read(length) if length else b""

        def _send_json(self, status: int, doc) -> None:
            payload = json.dumps(doc).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

        def _send_problem(self, exc: EngineError) -> None:
            status = _STATUS_BY_CODE.get(exc.code, 400)
            self._send_json(status, exc.problem())

        def _send_empty(self, status: int) -> None:
            self.send_response(status)
            self.send_header("Content-Length", "0")
            self.end_headers()

        def _dispatch(self, method: str) -> None:
            parsed = urlparse(self.path)
            parts = [p for p in parsed.path.split("/") if p]
            try:
                handled = self._route(method, parts, parse_qs(parsed.query))
            except EngineError as exc:
                self._send_problem(exc)
                return
            except Exception:
                logger.exception("handler failed for %s %s", method, self.path)
                self._send_json(500, {"code": "InternalError",
                                      "message": "unexpected gateway error"})
                return
            if not handled:
                self._send_json(404, {"code": "NotFound",
                                      "message": f"no route for {method} {parsed.path}"})

        def do_GET(self):
            self._dispatch("GET")

        def do_POST(self):
            self._dispatch("POST")

        def do_PUT(self):
            self._dispatch("PUT")

        def do_DELETE(self):
            self._dispatch("DELETE")

        # -- routes ------------------------------------------------------------

        def _route(self, method: str, parts: list[str], query: dict) -> bool:
            if method == "GET":
                if parts == ["health"]:
                    self._send_json(200, {"ok": True, "clock": gw.config.clock,
                                          "now_ms": gw.clock.now_ms()})
                    return True
                if parts == ["things"]:
                    self._send_json(200, {"things": gw.registry.snapshot()})
                    return True
                if len(parts) == 2 and parts[0] == "things":
                    thing = gw.registry.get_thing(parts[1])
                    for doc in gw.registry.snapshot():
                        if doc["id"] == thing.id:
                            self._send_json(200, doc)
                            return True
                    raise UnknownId(f"unknown thing: {parts[1]}")
                if parts == ["rules"]:
                    self._send_json(200, {"rules": [r.public_json()
                                                    for r in gw.manager.records()]})
                    return True
                if len(parts) == 2 and parts[0] == "rules":
                    self._send_json(200, gw.manager.record(parts[1]).public_json())
                    return True
                if parts == ["events"]:
                    self._serve_sse(query)
                    return True
                if parts[:1] == ["ui"] and gw.config.ui_dir is not None:
                    self._serve_static(parts[1:])
                    return True
                return False

            if method == "POST":
                if parts == ["rules"]:
                    record = gw.manager.install(self._body())
                    gw.publish_lifecycle("install", record.name, record.state,
                                         version=record.version)
                    self._send_json(201, record.public_json())
                    return True
                if len(parts) == 3 and parts[0] == "rules" and parts[2] in ("start", "stop"):
                    name = parts[1]
                    state = gw.manager.start(name) if parts[2] == "start" \
                        else gw.manager.stop(name)
                    gw.publish_lifecycle(parts[2], name, state)
                    self._send_json(200, {"name": name, "state": state})
                    return True
                if parts == ["query"]:
                    doc = self._json_body()
                    text = doc.get("q") if isinstance(doc, dict) else None
                    if not isinstance(text, str):
                        raise ParseError('body must be {"q": "<query text>"}')
                    self._send_json(200, gw.run_query(text))
                    return True
                if parts == ["clock", "advance"]:
                    doc = self._json_body()
                    ms = doc.get("ms") if isinstance(doc, dict) else None
                    if not isinstance(ms, (int, float)) or isinstance(ms, bool) or ms < 0:
                        raise ParseError('body must be {"ms": <non-negative number>}')
                    now = gw.advance_clock(float(ms))
                    self._send_json(200, {"now_ms": now})
                    return True
                return False

            if method == "PUT":
                if len(parts) == 4 and parts[0] == "rules" and parts[2] == "params":
                    name, key = parts[1], parts[3]
                    value = self._json_body()
                    if not isinstance(value, (bool, int, float, str)):
                        from .errors import TypeMismatch
                        raise TypeMismatch("parameter value must be a JSON scalar")
                    stored = gw.manager.set_param(name, key, value)
                    gw.publish_lifecycle("set_param", name, key=key, value=stored)
                    self._send_json(200, {"name": name, "key": key, "value": stored})
                    return True
                return False

            if method == "DELETE":
                if len(parts) == 2 and parts[0] == "rules":
                    gw.manager.uninstall(parts[1])
                    gw.publish_lifecycle("uninstall", parts[1])
                    self._send_empty(204)
                    return True
                return False
            return False

        def _json_body(self):
            raw = self._body()
            try:
                return json.loads(raw.decode("utf-8")) if raw else None
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise ParseError(f"request body is not valid JSON: {exc}") from exc

        # -- SSE --------------------------------------------------------------------

        def _write_chunk(self, payload: bytes) -> None:
            self.wfile.write(b"%x\r\n" % len(payload) + payload + b"\r\n")
            self.wfile.flush()

        def _serve_sse(self, query: dict) -> None:
            wanted = None
            if "filter" in query:
                wanted = {w for part in query["filter"] for w in part.split(",") if w}
            q = gw.hub.subscribe()
            try:
                self.send_response(200)
                self.send_header("Content-Type", "text/event-stream")
                self.send_header("Cache-Control", "no-cache")
                # Chunked framing so streaming clients see each event promptly.
                self.send_header("Transfer-Encoding", "chunked")
                self.end_headers()
                heartbeat_s = max(gw.config.sse_heartbeat_ms, 50) / 1000.0
                while gw._running:
                    try:
                        doc = q.get(timeout=heartbeat_s)
                    except queue.Empty:
                        self._write_chunk(b": hb\n\n")
                        continue
                    if wanted is not None and doc.get("type") not in wanted:
                        continue
                    payload = json.dumps(doc)
                    self._write_chunk(f"data: {payload}\n\n".encode("utf-8"))
                self.wfile.write(b"0\r\n\r\n")
            except (BrokenPipeError, ConnectionResetError):
                pass
            finally:
                gw.hub.unsubscribe(q)

        # -- console static files --------------------------------------------------------

        def _serve_static(self, rel_parts: list[str]) -> None:
            root = gw.config.resolve(gw.config.ui_dir)
            rel = "/".join(rel_parts) or "index.html"
            target = (root / rel).resolve()
            if not str(target).startswith(str(root)) or not target.is_file():
                self._send_json(404, {"code": "NotFound", "message": f"no file {rel}"})
                return
            payload = target.read_bytes()
            ctype = mimetypes.guess_type(str(target))[0] or "application/octet-stream"
            self.send_response(200)
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

    return Handler
