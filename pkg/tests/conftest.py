import base64
import json
import socket
import threading
import time
from pathlib import Path

import pytest
import requests

from edgerules.gateway import Gateway, GatewayConfig
from edgerules.lifecycle import build_package, generate_keypair

DEMO = Path(__file__).parent.parent / "demo"

KEY, PUB = generate_keypair()


@pytest.fixture(scope="session")
def signing_key():
    return KEY


@pytest.fixture(scope="session")
def trusted_key_b64():
    return base64.b64encode(PUB).decode("ascii")


def free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


def write_gateway_config(tmp_path: Path, *, clock="wall", commissioning=None,
                         ontology=None, trusted_key=None, heartbeat_ms=1000) -> Path:
    commissioning = commissioning or (DEMO / "site1.commissioning.json").read_text()
    ontology = ontology or (DEMO / "site1.ontology.json").read_text()
    (tmp_path / "commissioning.json").write_text(commissioning)
    (tmp_path / "ontology.json").write_text(ontology)
    config = {
        "listen": {"host": "127.0.0.1", "port": free_port()},
        "commissioning": "commissioning.json",
        "ontology": "ontology.json",
        "trusted_keys": [trusted_key or base64.b64encode(PUB).decode("ascii")],
        "state_dir": "state",
        "clock": clock,
        "notifications": "notifications.jsonl",
        "sse_heartbeat_ms": heartbeat_ms,
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config, indent=2))
    return path


@pytest.fixture
def gateway(tmp_path):
    """A running wall-clock gateway over the Site1 demo fixture."""
    config = GatewayConfig.from_file(write_gateway_config(tmp_path))
    gw = Gateway(config)
    gw.start()
    yield gw
    gw.stop()


@pytest.fixture
def addr(gateway):
    return f"http://127.0.0.1:{gateway.port}"


def lightcontrol_package(key=None, version="1.0", params=None):
    script = (DEMO / "lightcontrol.rs.sre").read_text()
    return build_package(script, {"name": "LightControl", "version": version,
                                  "params": params or {}}, key or KEY)


def wait_until(predicate, timeout=5.0, interval=0.02):
    deadline = time.time() + timeout
    while time.time() < deadline:
        if predicate():
            return True
        time.sleep(interval)
    return False


class SSECollector:
    """Background reader for an SSE stream; collects parsed JSON docs."""

    def __init__(self, url: str):
        self.docs = []
        self.heartbeats = 0
        self._resp = requests.get(url, stream=True, timeout=10)
        self._thread = threading.Thread(target=self._read, daemon=True)
        self._thread.start()

    def _read(self):
        try:
            for line in self._resp.iter_lines(decode_unicode=True):
                if line is None:
                    continue
                if line.startswith(": hb"):
                    self.heartbeats += 1
                elif line.startswith("data: "):
                    self.docs.append(json.loads(line[len("data: "):]))
        except Exception:
            pass

    def close(self):
        self._resp.close()
