"""Thing registry: devices, their capabilities, and the event bus.

Every mutation (register, deregister, capability write) turns into a typed
event with a gateway-wide strictly increasing sequence number. Listeners
receive events in emission order; the rule scheduler is the main consumer.
"""

from __future__ import annotations

import json
import struct
import threading
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping

from .errors import DuplicateId, NotWritable, ParseError, TypeMismatch, UnknownCapability, UnknownId

Scalar = bool | float | str

VALUE_CHANGED = "ValueChanged"
APPEARED = "Appeared"
DISAPPEARED = "Disappeared"

_TYPE_NAMES = {"bool": bool, "number": float, "string": str}


def scalar_type_name(value: Scalar) -> str:
    if isinstance(value, bool):
        return "bool"
    if isinstance(value, float):
        return "number"
    return "string"


def coerce_scalar(value) -> Scalar:
    """Normalize a JSON-ish scalar: ints become doubles, others pass through."""
    if isinstance(value, bool):
        return value
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        return value
    raise TypeMismatch(f"not a scalar: {value!r}")


def scalars_equal(a: Scalar, b: Scalar) -> bool:
    """Bitwise equality used for no-change suppression (NaN == NaN, +0.0 != -0.0)."""
    if type(a) is not type(b):
        return False
    if isinstance(a, float) and not isinstance(a, bool):
        return struct.pack("<d", a) == struct.pack("<d", b)
    return a == b


@dataclass(frozen=True, slots=True)
class Capability:
    """Snapshot of a measurable or settable point on a thing."""

    name: str
    value: Scalar
    writable: bool
    unit: str | None = None
    updated_at: float = 0.0


@dataclass(slots=True)
class Thing:
    id: str
    tags: dict[str, str] = field(default_factory=dict)
    capabilities: dict[str, Capability] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.id:
            raise ParseError("thing id must be non-empty")
        self.tags = {normalize_tag_key(k): v for k, v in self.tags.items()}


def normalize_tag_key(key: str) -> str:
    key = key.lower()
    return "location" if key == "loc" else key


@dataclass(frozen=True, slots=True)
class Event:
    """Value-change / appearance / disappearance notification.

    ``tags`` is a snapshot of the thing's tags when the event was generated,
    so semantic subscriptions can match things that have since disappeared;
    ``caps`` (Appeared only) snapshots initial capability values so consumers
    can rebuild world state from the event stream alone.
    """

    kind: str
    thing_id: str
    seq: int
    at: float
    capability: str | None = None
    old_value: Scalar | None = None
    new_value: Scalar | None = None
    tags: Mapping[str, str] = field(default_factory=dict)
    caps: Mapping[str, Scalar] | None = None

    def to_json(self) -> dict:
        doc = {"kind": self.kind, "thing_id": self.thing_id, "seq": self.seq, "at": self.at}
        if self.capability is not None:
            doc["capability"] = self.capability
            doc["old_value"] = self.old_value
            doc["new_value"] = self.new_value
        return doc


class ThingRegistry:
    """Thread-safe store of things; emits a single totally-ordered event stream."""

    def __init__(self, *, now_ms: Callable[[], float] | None = None):
        self._things: dict[str, Thing] = {}
        self._measurements: dict[str, str] = {}
        self._lock = threading.RLock()
        self._listeners: list[Callable[[Event], None]] = []
        self._seq = 0
        self._now_ms = now_ms or (lambda: 0.0)

    # -- listeners -------------------------------------------------------

    def add_listener(self, listener: Callable[[Event], None]) -> None:
        """Listeners are invoked under the registry lock, in add order."""
        with self._lock:
            self._listeners.append(listener)

    def _emit(self, kind: str, thing: Thing, capability: str | None = None,
              old: Scalar | None = None, new: Scalar | None = None) -> Event:
        self._seq += 1
        event = Event(
            kind=kind,
            thing_id=thing.id,
            seq=self._seq,
            at=self._now_ms(),
            capability=capability,
            old_value=old,
            new_value=new,
            tags=dict(thing.tags),
            caps={name: cap.value for name, cap in thing.capabilities.items()}
            if kind == APPEARED else None,
        )
        for listener in self._listeners:
            listener(event)
        return event

    # -- registration ----------------------------------------------------

    def register_thing(self, thing: Thing) -> None:
        with self._lock:
            if thing.id in self._things:
                raise DuplicateId(f"thing already registered: {thing.id}")
            self._things[thing.id] = thing
            self._emit(APPEARED, thing)

    def deregister_thing(self, thing_id: str) -> None:
        with self._lock:
            thing = self._things.pop(thing_id, None)
            if thing is None:
                raise UnknownId(f"unknown thing: {thing_id}")
            self._emit(DISAPPEARED, thing)

    def has_thing(self, thing_id: str) -> bool:
        with self._lock:
            return thing_id in self._things

    def get_thing(self, thing_id: str) -> Thing:
        with self._lock:
            thing = self._things.get(thing_id)
            if thing is None:
                raise UnknownId(f"unknown thing: {thing_id}")
            return thing

    def thing_ids(self) -> list[str]:
        with self._lock:
            return sorted(self._things)

    def things(self) -> list[Thing]:
        with self._lock:
            return [self._things[tid] for tid in sorted(self._things)]

    # -- capabilities ------------------------------------------------------

    def get_capability(self, thing_id: str, cap_name: str) -> Capability:
        with self._lock:
            thing = self.get_thing(thing_id)
            cap = thing.capabilities.get(cap_name)
            if cap is None:
                raise UnknownCapability(f"{thing_id} has no capability {cap_name}")
            return cap

    def value_of(self, thing_id: str, cap_name: str) -> Scalar | None:
        """Current value, or None when the thing or capability is missing."""
        with self._lock:
            thing = self._things.get(thing_id)
            if thing is None:
                return None
            cap = thing.capabilities.get(cap_name)
            return None if cap is None else cap.value

    def set_capability_value(self, thing_id: str, cap_name: str, value,
                             *, external: bool = False) -> None:
        """Write a capability value, emitting ValueChanged when it actually changes.

        ``external=True`` is the engine setValue path and honors the writable
        flag; the simulator writes with external=False (it plays the world).
        """
        value = coerce_scalar(value)
        with self._lock:
            thing = self.get_thing(thing_id)
            cap = thing.capabilities.get(cap_name)
            if cap is None:
                raise UnknownCapability(f"{thing_id} has no capability {cap_name}")
            if external and not cap.writable:
                raise NotWritable(f"{thing_id}.{cap_name} is not writable")
            if scalar_type_name(value) != scalar_type_name(cap.value):
                raise TypeMismatch(
                    f"{thing_id}.{cap_name} is {scalar_type_name(cap.value)}, "
                    f"got {scalar_type_name(value)}")
            old = cap.value
            if scalars_equal(old, value):
                return
            thing.capabilities[cap_name] = replace(cap, value=value, updated_at=self._now_ms())
            self._emit(VALUE_CHANGED, thing, capability=cap_name, old=old, new=value)

    # -- measurement map ----------------------------------------------------

    def measurement_for(self, usage: str) -> str | None:
        """Capability name that aggregate queries read for a given usage tag."""
        with self._lock:
            cap = self._measurements.get(usage)
        if cap is not None:
            return cap
        # Naming-convention fallback: usage FooSensor reads capability Foo.
        if usage.endswith("Sensor") and len(usage) > len("Sensor"):
            return usage[: -len("Sensor")]
        return None

    def set_measurements(self, mapping: Mapping[str, str]) -> None:
        with self._lock:
            self._measurements.update(mapping)

    # -- commissioning ---------------------------------------------------------

    def load_commissioning(self, document: str) -> int:
        """Register every thing in a commissioning document, all-or-nothing."""
        measurements, things = parse_commissioning(document)
        with self._lock:
            for thing in things:
                if thing.id in self._things:
                    raise DuplicateId(f"thing already registered: {thing.id}")
            self._measurements.update(measurements)
            for thing in things:
                self._things[thing.id] = thing
                self._emit(APPEARED, thing)
        return len(things)

    def snapshot(self) -> list[dict]:
        """JSON-friendly dump of the registry, sorted by id."""
        with self._lock:
            out = []
            for tid in sorted(self._things):
                thing = self._things[tid]
                out.append({
                    "id": thing.id,
                    "tags": dict(thing.tags),
                    "capabilities": [
                        {
                            "name": cap.name,
                            "type": scalar_type_name(cap.value),
                            "value": cap.value,
                            "unit": cap.unit,
                            "writable": cap.writable,
                            "updated_at": cap.updated_at,
                        }
                        for cap in thing.capabilities.values()
                    ],
                })
            return out


def parse_commissioning(document: str) -> tuple[dict[str, str], list[Thing]]:
    """Parse a commissioning document into (measurement map, things).

    Accepts either a bare JSON array of thing objects or a wrapper object
    ``{"measurements": {usage: capability}, "things": [...]}``.
    """
    try:
        data = json.loads(document)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", line=exc.lineno) from exc

    measurements: dict[str, str] = {}
    if isinstance(data, dict):
        measurements = data.get("measurements", {})
        if not isinstance(measurements, dict) or not all(
                isinstance(k, str) and isinstance(v, str) for k, v in measurements.items()):
            raise ParseError("measurements must map usage tag values to capability names")
        items = data.get("things", [])
    elif isinstance(data, list):
        items = data
    else:
        raise ParseError("commissioning document must be a JSON array or object")
    if not isinstance(items, list):
        raise ParseError("things must be a JSON array")

    things = []
    seen: set[str] = set()
    for i, item in enumerate(items):
        thing = _parse_thing(item, i)
        if thing.id in seen:
            raise DuplicateId(f"duplicate id in commissioning file: {thing.id}")
        seen.add(thing.id)
        things.append(thing)
    return measurements, things


def _parse_thing(item, index: int) -> Thing:
    where = f"things[{index}]"
    if not isinstance(item, dict):
        raise ParseError(f"{where}: expected an object")
    thing_id = item.get("id")
    if not isinstance(thing_id, str) or not thing_id:
        raise ParseError(f"{where}: id must be a non-empty string")
    tags = item.get("tags", {})
    if not isinstance(tags, dict):
        raise ParseError(f"{where}: tags must be an object")
    for key, value in tags.items():
        if not isinstance(value, str):
            # Lists would make a tag multi-valued, which commissioning rejects.
            raise ParseError(f"{where}: tag {key!r} must have a single string value")
    caps: dict[str, Capability] = {}
    for j, raw in enumerate(item.get("capabilities", [])):
        cap = _parse_capability(raw, f"{where}.capabilities[{j}]")
        if cap.name in caps:
            raise ParseError(f"{where}: duplicate capability {cap.name}")
        caps[cap.name] = cap
    return Thing(id=thing_id, tags=dict(tags), capabilities=caps)


def _parse_capability(raw, where: str) -> Capability:
    if not isinstance(raw, dict):
        raise ParseError(f"{where}: expected an object")
    name = raw.get("name")
    if not isinstance(name, str) or not name:
        raise ParseError(f"{where}: name must be a non-empty string")
    type_name = raw.get("type")
    if type_name not in _TYPE_NAMES:
        raise ParseError(f"{where}: type must be one of bool|number|string")
    value = raw.get("value")
    if type_name == "bool":
        if not isinstance(value, bool):
            raise ParseError(f"{where}: value must be a bool")
    elif type_name == "number":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ParseError(f"{where}: value must be a number")
        value = float(value)
    else:
        if not isinstance(value, str):
            raise ParseError(f"{where}: value must be a string")
    unit = raw.get("unit")
    if unit is not None and not isinstance(unit, str):
        raise ParseError(f"{where}: unit must be a string")
    writable = raw.get("writable", False)
    if not isinstance(writable, bool):
        raise ParseError(f"{where}: writable must be a bool")
    return Capability(name=name, value=value, writable=writable, unit=unit)


def load_commissioning_file(registry: ThingRegistry, path: str) -> int:
    with open(path, "r", encoding="utf-8") as fh:
        return registry.load_commissioning(fh.read())
