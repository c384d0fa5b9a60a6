"""Deterministic device-fabric simulator and the benchmark harness.

Three metrics, measured at desk scale by default:

* rule execution time: install N always-true rules whose conditions span
  five devices, trigger one evaluation sweep, time evaluation + actions;
* rule latency time: N rules each watching one temperature sensor, events
  generated periodically and simultaneously on all sensors at a given
  per-sensor rate, latency taken between event enqueue and dispatch entry
  on one monotonic clock;
* rule memory usage: allocator delta after installing and starting N rules.

``--paper-scale`` restores the full grids (ten rule-set sizes by eight
event rates, two-minute cells).
"""

from __future__ import annotations

import csv
import gc
import json
import random
import statistics
import tempfile
import threading
import time
import tracemalloc
from dataclasses import dataclass, field
from pathlib import Path

from .errors import BadScenario
from .lifecycle import LifecycleManager, build_package, generate_keypair
from .notifications import NotificationSink
from .ontology import load_ontology
from .registry import ThingRegistry
from .runtime import RuleEngine
from .scheduler import Scheduler, VirtualClock, WallClock

FULL_SCALE_RLT_RULES = (1, 10, 30, 50, 70, 90, 100, 200, 300, 400)
FULL_SCALE_RLT_RATES = (5, 10, 11, 15, 20, 30, 100, 200)
FULL_SCALE_RLT_DURATION_S = 120.0
FULL_SCALE_RET_RULES = (100, 200, 300, 400, 500)

DESK_RLT_RULES = (1, 10, 100)
DESK_RLT_RATES = (5, 11, 200)
DESK_RLT_DURATION_S = 10.0
DESK_RET_RULES = (100, 500)
DESK_RMU_RULES = (100, 200, 400)


@dataclass(slots=True)
class Scenario:
    seed: int = 1
    buildings: int = 3
    floors: int = 10
    rooms: int = 3
    sensors_per_room: int = 1
    actuators_per_room: int = 2  # heater and air conditioner
    duration_s: float = DESK_RLT_DURATION_S
    value_process: str = "random-walk"

    def __post_init__(self) -> None:
        if min(self.buildings, self.floors, self.rooms) < 1:
            raise BadScenario("topology dimensions must be >= 1")
        if self.sensors_per_room < 1:
            raise BadScenario("each room needs at least one sensor")
        if self.actuators_per_room not in (0, 1, 2):
            raise BadScenario("actuators per room must be 0, 1, or 2")
        if self.duration_s <= 0:
            raise BadScenario("duration must be > 0")
        if self.value_process not in ("random-walk", "scripted"):
            raise BadScenario(f"unknown value process {self.value_process!r}")

    def room_ids(self) -> list[str]:
        return [f"B{b}F{f}R{r}"
                for b in range(1, self.buildings + 1)
                for f in range(1, self.floors + 1)
                for r in range(1, self.rooms + 1)]


def generate_fixture(scenario: Scenario) -> tuple[str, str]:
    """Commissioning + ontology documents; same seed gives identical bytes."""
    rng = random.Random(scenario.seed)
    things = []
    nodes = {"Site1"}
    edges = []
    for b in range(1, scenario.buildings + 1):
        building = f"B{b}"
        nodes.add(building)
        edges.append({"child": building, "relation": "within", "parent": "Site1"})
        for f in range(1, scenario.floors + 1):
            floor = f"B{b}F{f}"
            nodes.add(floor)
            edges.append({"child": floor, "relation": "within", "parent": building})
            for r in range(1, scenario.rooms + 1):
                room = f"B{b}F{f}R{r}"
                nodes.add(room)
                edges.append({"child": room, "relation": "within", "parent": floor})
                for s in range(1, scenario.sensors_per_room + 1):
                    suffix = "" if scenario.sensors_per_room == 1 else f"-{s}"
                    things.append({
                        "id": f"{room}-TempSensor{suffix}",
                        "tags": {"usage": "TemperatureSensor", "catalog": "sensor",
                                 "location": room},
                        "capabilities": [{"name": "Temperature", "type": "number",
                                          "value": round(rng.uniform(18.0, 26.0), 1),
                                          "unit": "C", "writable": False}],
                    })
                for kind in ("Heater", "AirConditioner")[:scenario.actuators_per_room]:
                    things.append({
                        "id": f"{room}-{kind}",
                        "tags": {"usage": kind, "catalog": "actuator", "location": room},
                        "capabilities": [{"name": "Power", "type": "bool",
                                          "value": False, "writable": True}],
                    })
    commissioning = json.dumps(
        {"measurements": {"TemperatureSensor": "Temperature"}, "things": things},
        indent=2, sort_keys=True)
    ontology = json.dumps(
        {"relations": {"location": "within"}, "nodes": sorted(nodes), "edges": edges},
        indent=2, sort_keys=True)
    return commissioning, ontology


# --- in-process bench core ---------------------------------------------------------


@dataclass(slots=True)
class BenchCore:
    scheduler: Scheduler
    registry: ThingRegistry
    engine: RuleEngine
    manager: LifecycleManager
    signing_key: object
    workdir: object
    sensors: list[str] = field(default_factory=list)
    heaters: list[str] = field(default_factory=list)
    acs: list[str] = field(default_factory=list)

    def close(self) -> None:
        self.scheduler.stop()
        self.workdir.cleanup()


def build_core(scenario: Scenario, *, virtual: bool = False,
               capacity: int = 20_000) -> BenchCore:
    clock = VirtualClock() if virtual else WallClock()
    scheduler = Scheduler(clock, capacity=capacity, error_handler=lambda exc: None)
    registry = ThingRegistry(now_ms=clock.now_ms)
    commissioning, ontology_doc = generate_fixture(scenario)
    engine = RuleEngine(registry, load_ontology(ontology_doc), scheduler,
                        notifications=NotificationSink())
    workdir = tempfile.TemporaryDirectory(prefix="edgerules-bench-")
    key, pub = generate_keypair()
    manager = LifecycleManager(Path(workdir.name), [pub], engine)
    registry.load_commissioning(commissioning)
    scheduler.pump()  # absorb the Appeared burst before measuring anything
    core = BenchCore(scheduler=scheduler, registry=registry, engine=engine,
                     manager=manager, signing_key=key, workdir=workdir)
    for thing in registry.things():
        if thing.tags.get("usage") == "TemperatureSensor":
            core.sensors.append(thing.id)
        elif thing.tags.get("usage") == "Heater":
            core.heaters.append(thing.id)
        elif thing.tags.get("usage") == "AirConditioner":
            core.acs.append(thing.id)
    return core


def install_and_start(core: BenchCore, name: str, script: str,
                      params: dict | None = None) -> None:
    package = build_package(script, {"name": name, "params": params or {}},
                            core.signing_key)
    core.manager.install(package)
    core.manager.start(name)


# --- reports ----------------------------------------------------------------------------


@dataclass(slots=True)
class BenchReport:
    metric: str
    clock_source: str
    grid: dict
    cells: list[dict]
    csv_path: str | None = None

    def to_json(self) -> dict:
        return {"metric": self.metric, "clock_source": self.clock_source,
                "grid": self.grid, "cells": self.cells, "csv_path": self.csv_path}


def _write_csv(path: str | None, header: list[str], rows: list[list]) -> str | None:
    if path is None:
        return None
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def _stats_ms(samples: list[float]) -> dict:
    ordered = sorted(samples)
    p95 = ordered[min(len(ordered) - 1, int(0.95 * (len(ordered) - 1)))]
    return {"mean_ms": statistics.fmean(samples),
            "median_ms": statistics.median(samples),
            "p95_ms": p95,
            "samples": len(samples)}


# --- RET -----------------------------------------------------------------------------


def _ret_rule(name: str, sensors: list[str], actuator: str) -> str:
    condition = " AND ".join(f"[{s}]Temperature > -999999" for s in sensors)
    return f"""
function {name}.init()
  engine.subscribe("{condition}", "act")
end
function {name}.act(thing, cap, value)
  local p = engine.getCapability("{actuator}", "Power")
  engine.setValue(p, not p["value"])
  engine.notify("info", "toggled")
end
"""


def run_ret(rule_counts: tuple[int, ...] = DESK_RET_RULES, *, repeats: int = 3,
            scenario: Scenario | None = None, out_csv: str | None = None) -> BenchReport:
    """Always-true conditions over 5 devices; one sweep evaluates every rule
    and executes its action (toggle an actuator, send a notification)."""
    cells, rows = [], []
    for n_rules in rule_counts:
        scn = scenario or Scenario(seed=7)
        core = build_core(scn)
        try:
            trigger = core.sensors[0]
            pool = core.sensors
            for k in range(n_rules):
                others = [pool[(k * 4 + j) % len(pool)] for j in range(1, 5)]
                actuator = core.heaters[k % len(core.heaters)]
                install_and_start(core, f"Ret{k}",
                                  _ret_rule(f"Ret{k}", [trigger] + others, actuator))
            core.scheduler.pump()
            totals = []
            temp = 30.0
            for rep in range(repeats + 1):  # first sweep is warmup
                temp += 1.0
                start = time.perf_counter()
                core.registry.set_capability_value(trigger, "Temperature", temp)
                core.scheduler.pump()
                elapsed_ms = (time.perf_counter() - start) * 1000.0
                if rep > 0:
                    totals.append(elapsed_ms)
                    rows.append(["ret", n_rules, rep, f"{elapsed_ms:.3f}",
                                 f"{elapsed_ms / n_rules:.5f}"])
            stats = _stats_ms(totals)
            stats.update({"rules": n_rules,
                          "per_rule_mean_ms": stats["mean_ms"] / n_rules})
            cells.append(stats)
        finally:
            core.close()
    csv_path = _write_csv(out_csv, ["metric", "rules", "repeat", "total_ms", "per_rule_ms"],
                          rows)
    return BenchReport(metric="RET", clock_source="perf_counter",
                       grid={"rules": list(rule_counts), "repeats": repeats},
                       cells=cells, csv_path=csv_path)


# --- RLT ----------------------------------------------------------------------------


def _rlt_rule(name: str, sensor: str, heater: str, ac: str) -> str:
    # every event does a fixed amount of real control work: a four-sample
    # smoothing window plus a spread gate so a noisy signal never actuates
    return f"""
function {name}.init()
  engine.subscribe("@change[{sensor}]Temperature == True", "control")
  w1 = 22
  w2 = 22
  w3 = 22
  w4 = 22
end
function {name}.control(thing, cap, value)
  w4 = w3
  w3 = w2
  w2 = w1
  w1 = value
  local avg = (w1 + w2 + w3 + w4) / 4
  local spread = (w1 - avg) * (w1 - avg) + (w2 - avg) * (w2 - avg)
    + (w3 - avg) * (w3 - avg) + (w4 - avg) * (w4 - avg)
  if spread < 25 then
    if avg > 28 then
      local p = engine.getCapability("{ac}", "Power")
      if p["value"] == false then
        engine.setValue(p, true)
      end
    elseif avg < 16 then
      local p = engine.getCapability("{heater}", "Power")
      if p["value"] == false then
        engine.setValue(p, true)
      end
    end
  end
end
"""


def _setup_rlt_rules(core: BenchCore, n_rules: int) -> list[str]:
    sensors = []
    for k in range(n_rules):
        sensor = core.sensors[k % len(core.sensors)]
        heater = core.heaters[k % len(core.heaters)]
        ac = core.acs[k % len(core.acs)]
        install_and_start(core, f"Rlt{k}", _rlt_rule(f"Rlt{k}", sensor, heater, ac))
        if sensor not in sensors:
            sensors.append(sensor)
    return sensors


def run_rlt(rule_counts: tuple[int, ...] = DESK_RLT_RULES,
            event_rates: tuple[float, ...] = DESK_RLT_RATES,
            duration_s: float = DESK_RLT_DURATION_S, *,
            scenario: Scenario | None = None, seed: int = 11,
            out_csv: str | None = None) -> BenchReport:
    """Latency between event enqueue and dispatch entry while all monitored
    sensors receive writes periodically and simultaneously."""
    for rate in event_rates:
        if rate <= 0:
            raise BadScenario(f"event rate must be > 0, got {rate}")
    if duration_s <= 0:
        raise BadScenario("duration must be > 0")
    cells, rows = [], []
    for n_rules in rule_counts:
        for rate in event_rates:
            core = build_core(scenario or Scenario(seed=7))
            try:
                sensors = _setup_rlt_rules(core, n_rules)
                latencies: list[float] = []
                lock = threading.Lock()

                def observe(event, enqueued, started):
                    if event.capability == "Temperature":
                        with lock:
                            latencies.append((started - enqueued) * 1000.0)

                core.engine.dispatch_observer = observe
                core.scheduler.start()
                stop_at = time.perf_counter() + duration_s
                rng = random.Random(seed)
                temps = {s: 22.0 for s in sensors}

                def generate():
                    interval = 1.0 / rate
                    next_tick = time.perf_counter()
                    while time.perf_counter() < stop_at:
                        for sensor in sensors:
                            temps[sensor] = min(32.0, max(10.0, temps[sensor]
                                                          + rng.uniform(-0.5, 0.5)))
                            core.registry.set_capability_value(
                                sensor, "Temperature", round(temps[sensor], 3))
                        next_tick += interval
                        delay = next_tick - time.perf_counter()
                        if delay > 0:
                            time.sleep(delay)

                producer = threading.Thread(target=generate, daemon=True)
                producer.start()
                producer.join(timeout=duration_s * 4 + 30)
                while core.scheduler.queue_depth() > 0:
                    time.sleep(0.05)
                time.sleep(0.1)
                core.engine.dispatch_observer = None
                if not latencies:
                    raise BadScenario("no events were observed; rate too low "
                                      "for the duration")
                stats = _stats_ms(latencies)
                stats.update({"rules": n_rules, "events_per_s": rate})
                cells.append(stats)
                rows.append(["rlt", n_rules, rate, f"{stats['mean_ms']:.3f}",
                             f"{stats['median_ms']:.3f}", f"{stats['p95_ms']:.3f}",
                             stats["samples"]])
            finally:
                core.close()
    csv_path = _write_csv(out_csv, ["metric", "rules", "events_per_s", "mean_ms",
                                    "median_ms", "p95_ms", "samples"], rows)
    return BenchReport(metric="RLT", clock_source="perf_counter",
                       grid={"rules": list(rule_counts), "rates": list(event_rates),
                             "duration_s": duration_s},
                       cells=cells, csv_path=csv_path)


def run_rlt_deterministic(n_rules: int, ticks: int, *, seed: int = 11,
                          scenario: Scenario | None = None) -> dict:
    """Virtual-clock variant: returns the notification-ordered callback log
    and the final capability values.

    Same inputs must give identical results; used by the determinism checks.
    """
    core = build_core(scenario or Scenario(seed=7), virtual=True)
    try:
        sensors = []
        for k in range(n_rules):
            sensor = core.sensors[k % len(core.sensors)]
            name = f"Det{k}"
            heater = core.heaters[k % len(core.heaters)]
            ac = core.acs[k % len(core.acs)]
            script = f"""
function {name}.init()
  engine.subscribe("@change[{sensor}]Temperature == True", "control")
end
function {name}.control(thing, cap, value)
  engine.notify("info", thing)
  if value > 28 then
    engine.setValue(engine.getCapability("{ac}", "Power"), true)
  elseif value < 16 then
    engine.setValue(engine.getCapability("{heater}", "Power"), true)
  end
end
"""
            install_and_start(core, name, script)
            if sensor not in sensors:
                sensors.append(sensor)
        core.scheduler.pump()
        rng = random.Random(seed)
        for _ in range(ticks):
            core.scheduler.advance(100)
            for sensor in sensors:
                core.registry.set_capability_value(
                    sensor, "Temperature", round(rng.uniform(10.0, 32.0), 3))
            core.scheduler.pump()
        log = [f"{n.rule}:{n.message}"
               for n in core.engine.notifications.recent(10 ** 6)]
        return {"log": log, "things": core.registry.snapshot()}
    finally:
        core.close()


# --- RMU -----------------------------------------------------------------------------


_RMU_NOISE_KB = 256.0


def _rmu_rule(name: str) -> str:
    return f"""
function {name}.init()
  x = 0
end
function {name}.tick()
  x = x + 1
end
"""


def run_rmu(rule_counts: tuple[int, ...] = DESK_RMU_RULES, *,
            out_csv: str | None = None) -> BenchReport:
    """Traced-allocation delta after install+start of each rule-set size."""
    cells, rows = [], []
    for n_rules in rule_counts:
        core = build_core(Scenario(seed=7, buildings=1, floors=1, rooms=1))
        try:
            gc.collect()
            tracemalloc.start()
            before = tracemalloc.get_traced_memory()[0]
            for k in range(n_rules):
                install_and_start(core, f"Rmu{k}", _rmu_rule(f"Rmu{k}"))
            gc.collect()
            delta_kb = (tracemalloc.get_traced_memory()[0] - before) / 1024.0
            tracemalloc.stop()
            cells.append({"rules": n_rules, "delta_kb": delta_kb,
                          "noise_bound_kb": _RMU_NOISE_KB})
            rows.append(["rmu", n_rules, f"{delta_kb:.1f}", _RMU_NOISE_KB])
        finally:
            core.close()
    csv_path = _write_csv(out_csv, ["metric", "rules", "delta_kb", "noise_bound_kb"], rows)
    return BenchReport(metric="RMU", clock_source="tracemalloc",
                       grid={"rules": list(rule_counts)}, cells=cells, csv_path=csv_path)
