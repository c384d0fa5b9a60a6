import base64
import concurrent.futures
import json

import pytest
import requests

from edgerules.errors import ParseError
from edgerules.gateway import GatewayConfig

from tests.conftest import (SSECollector, lightcontrol_package, wait_until,
                            write_gateway_config)


def test_things_snapshot(addr):
    resp = requests.get(f"{addr}/things")
    assert resp.status_code == 200
    things = resp.json()["things"]
    assert len(things) == 5
    ids = {t["id"] for t in things}
    assert {"Lum1", "Lum2", "LightA", "LightB", "LightC"} == ids


def test_single_thing_and_404(addr):
    resp = requests.get(f"{addr}/things/Lum1")
    assert resp.status_code == 200
    assert resp.json()["tags"]["usage"] == "LuminositySensor"
    resp = requests.get(f"{addr}/things/Ghost")
    assert resp.status_code == 404
    assert resp.json()["code"] == "UnknownId"


def test_query_endpoint(addr):
    resp = requests.post(f"{addr}/query",
                         json={"q": "Search Device usage:LightActuator and @loc:Site1"})
    assert resp.status_code == 200
    assert resp.json() == {"things": ["LightA", "LightB", "LightC"]}

    resp = requests.post(f"{addr}/query",
                         json={"q": "Avg variable usage:LuminositySensor and @loc:Site1"})
    assert resp.json() == {"value": 400.0}


def test_query_syntax_error_carries_position(addr):
    resp = requests.post(f"{addr}/query", json={"q": "Frobnicate Device a:b"})
    assert resp.status_code == 400
    doc = resp.json()
    assert doc["code"] == "UnknownVerb"
    assert doc["position"] == 0


def test_rule_lifecycle_over_http(addr):
    package = lightcontrol_package()
    resp = requests.post(f"{addr}/rules", data=package,
                         headers={"Content-Type": "application/zip"})
    assert resp.status_code == 201
    assert resp.json()["state"] == "Installed"

    assert requests.get(f"{addr}/rules").json()["rules"][0]["name"] == "LightControl"

    resp = requests.post(f"{addr}/rules/LightControl/start")
    assert resp.status_code == 200 and resp.json()["state"] == "Started"

    resp = requests.delete(f"{addr}/rules/LightControl")
    assert resp.status_code == 409
    assert resp.json()["code"] == "InvalidTransition"

    resp = requests.post(f"{addr}/rules/LightControl/stop")
    assert resp.status_code == 200 and resp.json()["state"] == "Stopped"

    resp = requests.delete(f"{addr}/rules/LightControl")
    assert resp.status_code == 204
    assert requests.get(f"{addr}/rules/LightControl").status_code == 404


def test_tampered_package_rejected_with_401(addr):
    package = bytearray(lightcontrol_package())
    package[len(package) // 2] ^= 0x40
    resp = requests.post(f"{addr}/rules", data=bytes(package))
    assert resp.status_code in (400, 401)
    assert resp.json()["code"] in ("SignatureInvalid", "BadZip")


def test_param_endpoint(addr):
    requests.post(f"{addr}/rules", data=lightcontrol_package(
        params={"threshold": 600.0}))
    resp = requests.put(f"{addr}/rules/LightControl/params/threshold", json=550)
    assert resp.status_code == 200
    assert resp.json()["value"] == 550.0
    resp = requests.put(f"{addr}/rules/LightControl/params/nope", json=1)
    assert resp.status_code == 404
    resp = requests.put(f"{addr}/rules/LightControl/params/threshold", json="high")
    assert resp.status_code == 422


def test_rules_view_matches_state_store(addr, gateway):
    requests.post(f"{addr}/rules", data=lightcontrol_package(params={"threshold": 600.0}))
    requests.post(f"{addr}/rules/LightControl/start")
    requests.put(f"{addr}/rules/LightControl/params/threshold", json=425)
    via_http = requests.get(f"{addr}/rules").json()["rules"]
    on_disk = json.loads(
        (gateway.config.resolve(gateway.config.state_dir) / "state.json").read_text())
    stored = on_disk["rules"]["LightControl"]
    assert via_http[0]["state"] == stored["state"] == "Started"
    assert via_http[0]["params"] == stored["params"] == {"threshold": 425.0}


def test_concurrent_conflicting_requests_linearized(addr):
    requests.post(f"{addr}/rules", data=lightcontrol_package())
    with concurrent.futures.ThreadPoolExecutor(max_workers=2) as pool:
        futures = [pool.submit(requests.post, f"{addr}/rules/LightControl/start")
                   for _ in range(2)]
        codes = sorted(f.result().status_code for f in futures)
    assert codes == [200, 409]


def test_sse_stream_carries_lifecycle_device_and_notify(addr, gateway):
    collector = SSECollector(f"{addr}/events")
    try:
        requests.post(f"{addr}/rules", data=lightcontrol_package())
        requests.post(f"{addr}/rules/LightControl/start")
        assert wait_until(lambda: any(
            d["type"] == "lifecycle" and d["action"] == "start" for d in collector.docs))
        # LightControl's first cycle (timer at 500 ms) raises the setpoints.
        assert wait_until(lambda: any(
            d["type"] == "device" and d.get("capability") == "LuminositySetPoint"
            for d in collector.docs), timeout=5)
    finally:
        collector.close()


def test_sse_heartbeats_flow(tmp_path):
    from edgerules.gateway import Gateway
    config = GatewayConfig.from_file(write_gateway_config(tmp_path, heartbeat_ms=100))
    gw = Gateway(config)
    gw.start()
    try:
        collector = SSECollector(f"http://127.0.0.1:{gw.port}/events")
        assert wait_until(lambda: collector.heartbeats >= 2, timeout=3)
        collector.close()
    finally:
        gw.stop()


def test_restart_restores_rules(tmp_path):
    from edgerules.gateway import Gateway
    config_path = write_gateway_config(tmp_path)
    config = GatewayConfig.from_file(config_path)
    gw = Gateway(config)
    gw.start()
    addr = f"http://127.0.0.1:{gw.port}"
    requests.post(f"{addr}/rules", data=lightcontrol_package(params={"threshold": 600.0}))
    requests.post(f"{addr}/rules/LightControl/start")
    requests.put(f"{addr}/rules/LightControl/params/threshold", json=555)
    gw.stop()  # no clean uninstall: state must survive

    config2 = GatewayConfig.from_dict(
        {**json.loads(config_path.read_text()), "listen": {"host": "127.0.0.1", "port": 0}},
        origin=tmp_path)
    gw2 = Gateway(config2)
    gw2.start()
    try:
        addr2 = f"http://127.0.0.1:{gw2.port}"
        doc = requests.get(f"{addr2}/rules/LightControl").json()
        assert doc["state"] == "Started"
        assert doc["params"]["threshold"] == 555.0
    finally:
        gw2.stop()


def test_serve_building_fixture_exposes_90_things(tmp_path):
    from edgerules.gateway import Gateway
    from edgerules.simbench import Scenario, generate_fixture
    commissioning, ontology = generate_fixture(Scenario(seed=1, actuators_per_room=0))
    config = GatewayConfig.from_file(write_gateway_config(
        tmp_path, commissioning=commissioning, ontology=ontology))
    gw = Gateway(config)
    gw.start()
    try:
        addr = f"http://127.0.0.1:{gw.port}"
        things = requests.get(f"{addr}/things").json()["things"]
        assert len(things) == 90
        resp = requests.post(f"{addr}/query",
                             json={"q": "Count usage:TemperatureSensor and @location:Site1"})
        assert resp.json() == {"value": 90}
    finally:
        gw.stop()


def test_missing_ontology_path_is_config_error(tmp_path):
    (tmp_path / "commissioning.json").write_text("[]")
    config = {
        "commissioning": "commissioning.json",
        "ontology": "missing-ontology.json",
        "trusted_keys": [base64.b64encode(b"\0" * 32).decode()],
        "state_dir": "state",
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config))
    with pytest.raises(ParseError) as exc:
        GatewayConfig.from_file(path)
    assert "missing-ontology.json" in str(exc.value.message)


def test_config_requires_trusted_key(tmp_path):
    (tmp_path / "commissioning.json").write_text("[]")
    (tmp_path / "ontology.json").write_text("{}")
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"commissioning": "commissioning.json",
                                "ontology": "ontology.json",
                                "trusted_keys": [], "state_dir": "state"}))
    with pytest.raises(ParseError):
        GatewayConfig.from_file(path)


def test_clock_advance_rejected_in_wall_mode(addr):
    resp = requests.post(f"{addr}/clock/advance", json={"ms": 100})
    assert resp.status_code == 400


def test_virtual_clock_gateway(tmp_path):
    from edgerules.gateway import Gateway
    config = GatewayConfig.from_file(write_gateway_config(tmp_path, clock="virtual"))
    gw = Gateway(config)
    gw.start()
    try:
        addr = f"http://127.0.0.1:{gw.port}"
        requests.post(f"{addr}/rules", data=lightcontrol_package())
        requests.post(f"{addr}/rules/LightControl/start")
        resp = requests.post(f"{addr}/clock/advance", json={"ms": 600})
        assert resp.status_code == 200 and resp.json()["now_ms"] >= 600
        light_a = requests.get(f"{addr}/things/LightA").json()
        setpoint = next(c for c in light_a["capabilities"]
                        if c["name"] == "LuminositySetPoint")
        assert setpoint["value"] == 600.0
    finally:
        gw.stop()
