import json
import random
from pathlib import Path

import pytest

from edgerules.conditions import parse_condition
from edgerules.errors import (BadTimerArgs, CallDepthExceeded, NotWritable, RuleNotStarted,
                              RuleRuntimeError, UnknownFunction)
from edgerules.notifications import NotificationSink
from edgerules.ontology import OntologyGraph, load_ontology
from edgerules.queries import parse_query
from edgerules.registry import Capability, Thing, ThingRegistry
from edgerules.rulescript import parse_rule
from edgerules.runtime import RuleEngine, evaluate_condition
from edgerules.scheduler import Scheduler, VirtualClock

DEMO = Path(__file__).parent.parent / "demo"


def make_engine(ontology=None):
    clock = VirtualClock()
    sched = Scheduler(clock, error_handler=lambda exc: None)
    reg = ThingRegistry(now_ms=clock.now_ms)
    engine = RuleEngine(reg, ontology or OntologyGraph(), sched,
                        notifications=NotificationSink())
    return engine, reg, sched


def rule(src):
    return parse_rule(src)


def add_sensor(reg, tid="S", cap="Temp", value=20.0, writable=False):
    reg.register_thing(Thing(id=tid, tags={"catalog": "sensor"},
                             capabilities={cap: Capability(cap, value, writable)}))


# --- interpreter basics -----------------------------------------------------------


def test_init_runs_and_globals_persist():
    engine, reg, sched = make_engine()
    engine.start_rule(rule("""
function R.init()
  counter = 10
end
function R.bump()
  counter = counter + 1
  return counter
end
"""))
    assert engine.call_function("R", "bump", []) == 11.0
    assert engine.call_function("R", "bump", []) == 12.0


def test_isolation_between_rules():
    engine, _, _ = make_engine()
    engine.start_rule(rule("function A.init()\n  shared = 1\nend\n"
                           "function A.get()\n  return shared\nend\n"))
    engine.start_rule(rule("function B.init()\n  shared = 99\nend\n"
                           "function B.get()\n  return shared\nend\n"))
    assert engine.call_function("A", "get", []) == 1.0
    assert engine.call_function("B", "get", []) == 99.0


def test_init_failure_tears_down():
    engine, _, sched = make_engine()
    with pytest.raises(RuleRuntimeError) as exc:
        engine.start_rule(rule("function R.init()\n  x = 1 / 0\nend\n"))
    assert exc.value.rule == "R" and exc.value.line == 2
    assert not engine.is_running("R")
    assert sched.timer_spec(1) is None


def test_timer_registration_from_demo_fixture():
    engine, reg, sched = make_engine()
    reg.load_commissioning((DEMO / "site1.commissioning.json").read_text())
    sched.pump()
    ast = rule((DEMO / "lightcontrol.rs.sre").read_text())
    env = engine.start_rule(ast)
    assert len(env.timer_ids) == 1
    spec = sched.timer_spec(env.timer_ids[0])
    assert spec.period == 2000.0 and spec.remaining == -1
    assert spec.due == 500.0


def test_timer_fires_and_stop_cancels():
    engine, _, sched = make_engine()
    engine.start_rule(rule("""
function R.init()
  engine.timer("R", "tick", 0, 100, -1)
  n = 0
end
function R.tick()
  n = n + 1
end
function R.count()
  return n
end
"""))
    sched.advance(250)
    assert engine.call_function("R", "count", []) == 3.0
    engine.stop_rule("R")
    sched.advance(1000)
    assert not engine.is_running("R")


def test_timer_bad_args_and_unknown_fn():
    engine, _, _ = make_engine()
    with pytest.raises(BadTimerArgs):
        engine.start_rule(rule('function R.init()\n  engine.timer("R", "init", 0, 0, -1)\nend\n'))
    with pytest.raises(UnknownFunction):
        engine.start_rule(rule('function R.init()\n  engine.timer("R", "nope", 0, 1, -1)\nend\n'))


def test_step_budget_stops_runaway_rule():
    engine, _, _ = make_engine()
    with pytest.raises(RuleRuntimeError) as exc:
        engine.start_rule(rule("function R.init()\n  while true do\n    x = 1\n  end\nend\n"))
    assert "budget" in str(exc.value)


def test_engine_call_cooperation():
    engine, _, _ = make_engine()
    engine.start_rule(rule("""
function Notifier.init()
end
function Notifier.describe(code)
  return "alert: " + 0 + code
end
""".replace('"alert: " + 0 + code', 'code * 2')))
    engine.start_rule(rule("""
function User.init()
end
function User.run()
  return engine.call("Notifier", "describe", 21)
end
"""))
    assert engine.call_function("User", "run", []) == 42.0


def test_engine_call_into_stopped_rule():
    engine, _, _ = make_engine()
    engine.start_rule(rule("function A.init()\nend\nfunction A.go()\n"
                           "  return engine.call(\"B\", \"f\")\nend\n"))
    with pytest.raises(RuleNotStarted):
        engine.call_function("A", "go", [])


def test_call_depth_budget():
    engine, _, _ = make_engine()
    engine.start_rule(rule("""
function A.init()
end
function A.ping(n)
  return engine.call("B", "pong", n + 1)
end
"""))
    engine.start_rule(rule("""
function B.init()
end
function B.pong(n)
  return engine.call("A", "ping", n + 1)
end
"""))
    with pytest.raises(CallDepthExceeded):
        engine.call_function("A", "ping", [0.0])


def test_get_rule_setting_missing_is_nil_and_cross_rule_readable():
    engine, _, _ = make_engine()
    engine.start_rule(rule("""
function R.init()
end
function R.read(who, key)
  return engine.getRuleSetting(who, key)
end
"""), params={"threshold": 550.0})
    assert engine.call_function("R", "read", ["R", "threshold"]) == 550.0
    assert engine.call_function("R", "read", ["R", "unset"]) is None
    assert engine.call_function("R", "read", ["Other", "x"]) is None
    engine.set_local_param("Other", "x", 7.0)
    assert engine.call_function("R", "read", ["Other", "x"]) == 7.0


def test_set_value_writes_through_registry_and_not_writable():
    engine, reg, sched = make_engine()
    add_sensor(reg, "Act", "Power", 0.0, writable=True)
    add_sensor(reg, "Ro", "Temp", 20.0, writable=False)
    sched.pump()
    engine.start_rule(rule("""
function R.init()
end
function R.set(thing, cap, v)
  local ref = engine.getCapability(thing, cap)
  engine.setValue(ref, v)
end
"""))
    engine.call_function("R", "set", ["Act", "Power", 5.0])
    assert reg.get_capability("Act", "Power").value == 5.0
    with pytest.raises(NotWritable):
        engine.call_function("R", "set", ["Ro", "Temp", 25.0])


def test_query_builtin_success_and_error_pair():
    ontology = load_ontology((DEMO / "site1.ontology.json").read_text())
    engine, reg, sched = make_engine(ontology)
    reg.load_commissioning((DEMO / "site1.commissioning.json").read_text())
    sched.pump()
    engine.start_rule(rule("""
function R.init()
end
function R.avg()
  return engine.query("Avg variable usage:LuminositySensor and @loc:Site1")
end
function R.bad()
  r, err = engine.query("Frobnicate x:y")
  if r == nil then
    return err
  end
  return "unexpected"
end
function R.search()
  local xs = engine.query("Search Device usage:LightActuator and @loc:Site1")
  return len(xs)
end
"""))
    assert engine.call_function("R", "avg", []) == 400.0
    assert "verb" in engine.call_function("R", "bad", [])
    assert engine.call_function("R", "search", []) == 3.0


def test_setvalue_event_enqueued_not_reentrant():
    engine, reg, sched = make_engine()
    add_sensor(reg, "A", "x", 0.0, writable=True)
    add_sensor(reg, "B", "y", 0.0, writable=True)
    sched.pump()
    log = []
    engine.subscribe_condition("@change[A]x == True", lambda e: log.append("A"))
    engine.subscribe_condition("@change[B]y == True", lambda e: log.append("B"))
    engine.start_rule(rule("""
function R.init()
  engine.subscribe("@change[A]x == True", "onA")
end
function R.onA(thing, cap, value)
  local ref = engine.getCapability("B", "y")
  engine.setValue(ref, value + 1)
end
"""))
    reg.set_capability_value("A", "x", 1.0)
    sched.pump()
    # B's change is processed after the item that produced it.
    assert log == ["A", "B"]
    assert reg.get_capability("B", "y").value == 2.0


# --- condition evaluation -----------------------------------------------------


def test_evaluate_condition_examples():
    engine, reg, _ = make_engine()
    add_sensor(reg, "MultiSensorA", "Temp", 26.0)
    reg.register_thing(Thing(id="DoorSensorB", tags={},
                             capabilities={"isOpen": Capability("isOpen", True, False)}))
    cond = parse_condition("[MultiSensorA]Temp > 25 AND [DoorSensorB]isOpen == True")
    assert evaluate_condition(cond, None, reg)
    reg.set_capability_value("MultiSensorA", "Temp", 24.0)
    assert not evaluate_condition(cond, None, reg)


def test_incr_decr_semantics():
    engine, reg, sched = make_engine()
    add_sensor(reg, "S", "Temp", 25.0)
    fired = []
    engine.subscribe_condition("@incr[S]Temp == True", lambda e: fired.append(e.new_value))
    sched.pump()
    reg.set_capability_value("S", "Temp", 24.0)  # decrement: no fire
    reg.set_capability_value("S", "Temp", 25.0)  # increment: fire
    sched.pump()
    assert fired == [25.0]


def test_change_requires_exact_capability():
    engine, reg, sched = make_engine()
    reg.register_thing(Thing(id="D", tags={}, capabilities={
        "State": Capability("State", False, False),
        "Other": Capability("Other", 0.0, False),
    }))
    fired = []
    engine.subscribe_condition("@change[D]State == True", lambda e: fired.append(e.seq))
    sched.pump()
    reg.set_capability_value("D", "Other", 5.0)
    reg.set_capability_value("D", "State", True)
    sched.pump()
    assert len(fired) == 1


def test_exist_fires_on_registration():
    engine, reg, sched = make_engine()
    fired = []
    engine.subscribe_condition("@exist[Sensor11] == True", lambda e: fired.append(e.kind))
    add_sensor(reg, "Sensor11")
    sched.pump()
    assert fired == ["Appeared"]


def test_evaluator_is_level_triggered_per_event():
    engine, reg, sched = make_engine()
    add_sensor(reg, "A", "Temp", 20.0)
    fired = []
    engine.subscribe_condition("[A]Temp > 25", lambda e: fired.append(e.new_value))
    sched.pump()
    reg.set_capability_value("A", "Temp", 26.0)
    reg.set_capability_value("A", "Temp", 27.0)
    reg.set_capability_value("A", "Temp", 24.0)
    sched.pump()
    assert fired == [26.0, 27.0]


def test_cancelled_subscription_stops_firing():
    engine, reg, sched = make_engine()
    add_sensor(reg, "A", "Temp", 20.0)
    fired = []
    sid = engine.subscribe_condition("@change[A]Temp == True", lambda e: fired.append(1))
    sched.pump()
    reg.set_capability_value("A", "Temp", 21.0)
    sched.pump()
    engine.cancel_subscription(sid)
    reg.set_capability_value("A", "Temp", 22.0)
    sched.pump()
    assert fired == [1]


def test_rule_subscribe_receives_event_args():
    engine, reg, sched = make_engine()
    add_sensor(reg, "A", "Temp", 20.0)
    sched.pump()
    engine.start_rule(rule("""
function R.init()
  engine.subscribe("@change[A]Temp == True", "onChange")
  seen = nil
end
function R.onChange(thing, cap, value)
  seen = value
end
function R.get()
  return seen
end
"""))
    reg.set_capability_value("A", "Temp", 33.0)
    sched.pump()
    assert engine.call_function("R", "get", []) == 33.0


def test_semantic_subscription_matching_and_disappear():
    ontology = load_ontology(json.dumps({
        "nodes": ["Room1", "Floor1"],
        "edges": [{"child": "Room1", "relation": "within", "parent": "Floor1"}]}))
    engine, reg, sched = make_engine(ontology)
    events = []
    sid = engine.subscribe_query("subscribe catalog:sensor and location:Room1",
                                 lambda e: events.append(e.kind))
    reg.register_thing(Thing(id="S1", tags={"catalog": "sensor", "location": "Room1"}))
    reg.register_thing(Thing(id="X", tags={"catalog": "actuator", "location": "Room1"}))
    sched.pump()
    assert events == ["Appeared"]
    reg.deregister_thing("S1")
    sched.pump()
    assert events == ["Appeared", "Disappeared"]
    engine.cancel_subscription(sid)
    reg.register_thing(Thing(id="S2", tags={"catalog": "sensor", "location": "Room1"}))
    sched.pump()
    assert events == ["Appeared", "Disappeared"]


def test_replaced_sensor_keeps_semantic_subscription_firing():
    # the rule binds to tags, not ids: a replaced device keeps matching
    engine, reg, sched = make_engine()
    events = []
    engine.subscribe_query("subscribe catalog:sensor and location:Room1",
                           lambda e: events.append((e.kind, e.thing_id)))
    reg.register_thing(Thing(id="SensorA", tags={"catalog": "sensor",
                                                 "location": "Room1"}))
    reg.deregister_thing("SensorA")
    reg.register_thing(Thing(id="SensorA2", tags={"catalog": "sensor",
                                                  "location": "Room1"}))
    sched.pump()
    assert events == [("Appeared", "SensorA"), ("Disappeared", "SensorA"),
                      ("Appeared", "SensorA2")]


def test_isolation_property_random_rules():
    # mutating every global in rule A never changes any observable of rule B
    rng = random.Random(55)
    for case in range(20):
        engine, _, _ = make_engine()
        names = [f"g{i}" for i in range(rng.randint(1, 6))]
        init_a = "\n".join(f"  {n} = {rng.randint(0, 9)}" for n in names)
        init_b = "\n".join(f"  {n} = {rng.randint(10, 19)}" for n in names)
        reads = "\n".join(f"  total = total + {n}" for n in names)
        template = "function %s.init()\n%s\nend\nfunction %s.sum()\n  local total = 0\n" \
                   "%s\n  return total\nend\nfunction %s.smash()\n%s\nend\n"
        engine.start_rule(rule(template % ("A", init_a, "A", reads, "A",
                                           "\n".join(f"  {n} = -1" for n in names))))
        engine.start_rule(rule(template % ("B", init_b, "B", reads, "B",
                                           "\n".join(f"  {n} = -2" for n in names))))
        before = engine.call_function("B", "sum", [])
        engine.call_function("A", "smash", [])
        assert engine.call_function("B", "sum", []) == before, f"case {case}"


def test_subscribe_query_verb_mismatch():
    engine, _, _ = make_engine()
    from edgerules.errors import VerbMismatch
    with pytest.raises(VerbMismatch):
        engine.subscribe_query("Search Device a:b", lambda e: None)


def test_callbacks_run_in_install_order_and_faults_isolated():
    engine, reg, sched = make_engine()
    add_sensor(reg, "A", "Temp", 0.0)
    sched.pump()
    log = []
    engine.start_rule(rule("""
function First.init()
  engine.subscribe("@change[A]Temp == True", "go")
end
function First.go(t, c, v)
  x = 1 / 0
end
"""))
    engine.start_rule(rule("""
function Second.init()
  engine.subscribe("@change[A]Temp == True", "go")
  hits = 0
end
function Second.go(t, c, v)
  hits = hits + 1
end
function Second.count()
  return hits
end
"""))
    engine.subscribe_condition("@change[A]Temp == True", lambda e: log.append("host"))
    reg.set_capability_value("A", "Temp", 1.0)
    sched.pump()
    # First's failure is logged; Second and the host callback still ran.
    assert engine.call_function("Second", "count", []) == 1.0
    assert log == ["host"]
    assert engine.is_running("First")


def test_notify_goes_to_sink():
    engine, _, _ = make_engine()
    engine.start_rule(rule('function R.init()\n  engine.notify("alarm", "energy waste")\nend\n'))
    notes = engine.notifications.recent()
    assert len(notes) == 1
    assert notes[0].rule == "R" and notes[0].level == "alarm"
    assert notes[0].message == "energy waste"


def test_notify_bounded_buffer_drops_oldest():
    sink = NotificationSink(capacity=100)
    for i in range(250):
        sink.emit("R", "info", str(i), 0.0)
    assert len(sink) == 100
    assert sink.dropped == 150
    assert sink.recent(1)[0].message == "249"


# --- arithmetic differential test -------------------------------------------------


class _ModelError(Exception):
    pass


def model_eval(node, names):
    """Independent reference evaluator mirroring the documented semantics."""
    from edgerules import rulescript as rs

    def truthy(v):
        return v is not None and v is not False

    def is_num(v):
        return isinstance(v, float) and not isinstance(v, bool)

    if isinstance(node, rs.Num):
        return node.value
    if isinstance(node, rs.Str):
        return node.value
    if isinstance(node, rs.Bool):
        return node.value
    if isinstance(node, rs.Nil):
        return None
    if isinstance(node, rs.Name):
        return names.get(node.ident)
    if isinstance(node, rs.Unary):
        v = model_eval(node.operand, names)
        if node.op == "not":
            return not truthy(v)
        if not is_num(v):
            raise _ModelError()
        return -v
    if isinstance(node, rs.Len):
        v = model_eval(node.arg, names)
        if isinstance(v, (str, list)):
            return float(len(v))
        raise _ModelError()
    assert isinstance(node, rs.Binary)
    if node.op == "and":
        left = model_eval(node.left, names)
        return model_eval(node.right, names) if truthy(left) else left
    if node.op == "or":
        left = model_eval(node.left, names)
        return left if truthy(left) else model_eval(node.right, names)
    left = model_eval(node.left, names)
    right = model_eval(node.right, names)
    if node.op in ("==", "!="):
        if isinstance(left, bool) or isinstance(right, bool):
            eq = isinstance(left, bool) and isinstance(right, bool) and left == right
        elif left is None or right is None:
            eq = left is None and right is None
        elif type(left) is not type(right):
            eq = False
        else:
            eq = left == right
        return eq if node.op == "==" else not eq
    if node.op in ("<", "<=", ">", ">="):
        if not ((is_num(left) and is_num(right))
                or (isinstance(left, str) and isinstance(right, str))):
            raise _ModelError()
        return {"<": left < right, "<=": left <= right,
                ">": left > right, ">=": left >= right}[node.op]
    if not (is_num(left) and is_num(right)):
        raise _ModelError()
    try:
        return {"+": lambda: left + right, "-": lambda: left - right,
                "*": lambda: left * right, "/": lambda: left / right,
                "%": lambda: left % right}[node.op]()
    except ZeroDivisionError:
        raise _ModelError() from None


def test_interpreter_matches_reference_evaluator():
    from edgerules.rulescript import format_expr
    from tests.test_rulescript import random_expr

    engine, _, _ = make_engine()
    names = {"a": 4.0, "b": -2.5, "xs": None, "value2": True}
    rng = random.Random(77)
    checked = 0
    for _ in range(700):
        expr = random_expr(rng)
        text = format_expr(expr)
        if "xs[" in text or "helper(" in text or "engine." in text:
            continue  # the model covers pure expressions only
        src = ("function Probe2.init()\n  a = 4\n  b = -2.5\n  value2 = true\nend\n"
               f"function Probe2.f()\n  return {text}\nend\n")
        try:
            expected = model_eval(expr, names)
            failed = False
        except _ModelError:
            failed = True
        if not engine.is_running("Probe2"):
            engine.start_rule(rule(src))
        else:
            engine.stop_rule("Probe2")
            engine.start_rule(rule(src))
        if failed:
            with pytest.raises(RuleRuntimeError):
                engine.call_function("Probe2", "f", [])
        else:
            got = engine.call_function("Probe2", "f", [])
            if isinstance(expected, float) and expected != expected:
                assert got != got  # NaN
            else:
                assert got == expected and type(got) is type(expected), text
        checked += 1
    assert checked > 300
