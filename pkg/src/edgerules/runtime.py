"""Rule runtime: isolated execution environments over one scheduler.

Each started rule gets its own global scope; the only cross-rule channels
are ``engine.call`` and the readable settable-parameter store. Events from
the registry are enqueued, never dispatched re-entrantly, and every
callback runs on the scheduler thread.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from time import perf_counter
from typing import Callable, Mapping

from . import rulescript as rs
from .conditions import (CHANGE, DECR, EVALUATOR, EXIST, INCR, CondAnd, CondOr, CondTerm,
                         ConditionExpr, parse_condition, referenced_resources)
from .errors import (CallDepthExceeded, EngineError, InvalidTransition, RuleNotStarted,
                     RuleRuntimeError, UnknownFunction, UnknownRule, VerbMismatch)
from .notifications import NotificationSink
from .ontology import OntologyGraph
from .queries import SEARCH, SUBSCRIBE, Query, eval_query, match_thing, parse_query
from .registry import (APPEARED, DISAPPEARED, VALUE_CHANGED, Event, Scalar, ThingRegistry)
from .scheduler import Scheduler

logger = logging.getLogger("edgerules.runtime")

STEP_BUDGET = 100_000
MAX_CALL_DEPTH = 8
MAX_FRAMES = 64


@dataclass(frozen=True, slots=True)
class CapRef:
    """Capability snapshot handed to rule code; indexable by field name."""

    thing_id: str
    name: str
    value: Scalar
    unit: str | None
    writable: bool

    def lookup(self, key: str):
        if key == "thing":
            return self.thing_id
        if key in ("name", "value", "unit", "writable"):
            return getattr(self, key)
        raise KeyError(key)


@dataclass(slots=True)
class Env:
    """Per-rule execution environment; destroyed on stop."""

    rule_name: str
    ast: rs.RuleScriptAST
    globals: dict = field(default_factory=dict)
    timer_ids: list[int] = field(default_factory=list)
    subscription_ids: list[int] = field(default_factory=list)


CONDITION, SEMANTIC = "condition", "semantic"


@dataclass(slots=True)
class Subscription:
    sid: int
    kind: str
    owner: str | None  # rule name; None for host callbacks
    callback: str | Callable[[Event], None]
    order: int
    condition: ConditionExpr | None = None
    resources: frozenset[str] | None = None
    query: Query | None = None
    active: bool = True


class _Pair:
    """nil+message pair produced by fallible builtins (engine.query)."""

    __slots__ = ("first", "second")

    def __init__(self, first, second):
        self.first = first
        self.second = second


class _Return(Exception):
    def __init__(self, value):
        self.value = value


class _Turn:
    """Execution budget for one top-level callback, shared across engine.call."""

    __slots__ = ("steps", "call_depth", "frames")

    def __init__(self, budget: int = STEP_BUDGET):
        self.steps = budget
        self.call_depth = 0
        self.frames = 0


@dataclass(slots=True)
class _TagsOnly:
    """Minimal thing stand-in for matching disappeared things by their
    tag snapshot."""

    id: str
    tags: Mapping[str, str]


# --- condition evaluation ----------------------------------------------------------


def _compare(value, comparator: str, literal) -> bool:
    if comparator == "==":
        return _scalar_eq(value, literal)
    if comparator == "!=":
        return not _scalar_eq(value, literal)
    if isinstance(value, bool) or isinstance(literal, bool):
        return False
    if isinstance(value, float) and isinstance(literal, float):
        pass
    elif isinstance(value, str) and isinstance(literal, str):
        pass
    else:
        return False
    if comparator == "<":
        return value < literal
    if comparator == "<=":
        return value <= literal
    if comparator == ">":
        return value > literal
    return value >= literal


def _scalar_eq(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    if isinstance(a, bool) or isinstance(b, bool):
        return isinstance(a, bool) and isinstance(b, bool) and a == b
    if type(a) is not type(b):
        return False
    return a == b


class ShadowWorld:
    """World state rebuilt purely from the dispatched event stream.

    Condition evaluation reads this view rather than the live registry so
    that fire logs are a deterministic function of the event trace even when
    producers run ahead of the scheduler.
    """

    def __init__(self):
        self._caps: dict[str, dict[str, Scalar]] = {}

    def seed(self, registry: ThingRegistry) -> None:
        for thing in registry.things():
            self._caps[thing.id] = {n: c.value for n, c in thing.capabilities.items()}

    def apply(self, event: Event) -> None:
        if event.kind == APPEARED:
            self._caps[event.thing_id] = dict(event.caps or {})
        elif event.kind == DISAPPEARED:
            self._caps.pop(event.thing_id, None)
        else:
            caps = self._caps.get(event.thing_id)
            if caps is not None:
                caps[event.capability] = event.new_value

    def has_thing(self, thing_id: str) -> bool:
        return thing_id in self._caps

    def value_of(self, thing_id: str, cap_name: str) -> Scalar | None:
        caps = self._caps.get(thing_id)
        return None if caps is None else caps.get(cap_name)


def evaluate_condition(cond: ConditionExpr, event: Event | None, world) -> bool:
    """Fold a condition tree against a world view and the triggering event.

    ``world`` is anything with ``has_thing`` and ``value_of`` (the registry
    itself, or the engine's event-stream shadow). Evaluator terms read
    current values (missing resource: false). Exist terms reflect the event
    when it is an appearance/disappearance of the referenced resource, else
    current registration. Change/Incr/Decr are edge-triggered on the exact
    resource+capability of a ValueChanged event.
    """
    if isinstance(cond, CondAnd):
        return (evaluate_condition(cond.left, event, world)
                and evaluate_condition(cond.right, event, world))
    if isinstance(cond, CondOr):
        return (evaluate_condition(cond.left, event, world)
                or evaluate_condition(cond.right, event, world))
    term = cond
    if term.kind == EVALUATOR:
        current = world.value_of(term.resource, term.capability)
        if current is None:
            return False
        return _compare(current, term.comparator, term.literal)
    if term.kind == EXIST:
        if event is not None and event.thing_id == term.resource \
                and event.kind in (APPEARED, DISAPPEARED):
            exists = event.kind == APPEARED
        else:
            exists = world.has_thing(term.resource)
        return _compare(exists, term.comparator, term.literal)
    changed = (event is not None and event.kind == VALUE_CHANGED
               and event.thing_id == term.resource
               and event.capability == term.capability)
    if term.kind == CHANGE:
        return _compare(changed, term.comparator, term.literal)
    if changed:
        old, new = event.old_value, event.new_value
        numeric = (isinstance(old, float) and not isinstance(old, bool)
                   and isinstance(new, float) and not isinstance(new, bool))
        if not numeric:
            moved = False
        elif term.kind == INCR:
            moved = new > old
        else:
            moved = new < old
    else:
        moved = False
    return _compare(moved, term.comparator, term.literal)


# --- the engine -----------------------------------------------------------------


class RuleEngine:
    """Executes rules against a registry/ontology pair on one scheduler."""

    def __init__(self, registry: ThingRegistry, ontology: OntologyGraph,
                 scheduler: Scheduler, *, notifications: NotificationSink | None = None,
                 params_provider: Callable[[str], Mapping[str, Scalar] | None] | None = None):
        self.registry = registry
        self.ontology = ontology
        self.scheduler = scheduler
        self.notifications = notifications if notifications is not None else NotificationSink()
        self._envs: dict[str, Env] = {}
        self._local_params: dict[str, dict[str, Scalar]] = {}
        self._params_provider = params_provider
        self._subs: dict[int, Subscription] = {}
        self._subs_by_resource: dict[str, list[Subscription]] = {}
        self._semantic_subs: list[Subscription] = []
        self._ids = itertools.count(1)
        self._order = itertools.count(1)
        self._interp = _Interpreter(self)
        self._world = ShadowWorld()
        self._world.seed(registry)
        # Benchmark hook: called as (event, enqueue_perf_s, dispatch_perf_s).
        self.dispatch_observer: Callable[[Event, float, float], None] | None = None
        registry.add_listener(self._on_registry_event)

    # -- event flow ------------------------------------------------------

    def _on_registry_event(self, event: Event) -> None:
        enqueued = perf_counter()
        self.scheduler.submit(lambda: self._dispatch_event(event, enqueued))

    def _dispatch_event(self, event: Event, enqueued: float = 0.0) -> None:
        if self.dispatch_observer is not None:
            self.dispatch_observer(event, enqueued, perf_counter())
        self._world.apply(event)
        matched: list[Subscription] = []
        for sub in self._subs_by_resource.get(event.thing_id, ()):
            if sub.active and evaluate_condition(sub.condition, event, self._world):
                matched.append(sub)
        if self._semantic_subs:
            carrier = _TagsOnly(id=event.thing_id, tags=event.tags)
            for sub in self._semantic_subs:
                if sub.active and match_thing(carrier, sub.query.filter, self.ontology):
                    matched.append(sub)
        matched.sort(key=lambda s: s.order)
        for sub in matched:
            if sub.active:
                self._invoke(sub, event)

    def _invoke(self, sub: Subscription, event: Event) -> None:
        if callable(sub.callback):
            try:
                sub.callback(event)
            except Exception:
                logger.exception("host callback failed (subscription %d)", sub.sid)
            return
        env = self._envs.get(sub.owner)
        if env is None:
            return
        if event.kind == VALUE_CHANGED:
            args = [event.thing_id, event.capability, event.new_value]
        else:
            args = [event.thing_id, event.kind == APPEARED]
        try:
            self.call_function(sub.owner, sub.callback, args)
        except EngineError as exc:
            logger.warning("rule %s callback %s failed: %s", sub.owner, sub.callback, exc)

    # -- rule lifecycle hooks ------------------------------------------------

    def start_rule(self, ast: rs.RuleScriptAST, params: Mapping[str, Scalar] | None = None) -> Env:
        """Create a fresh environment and run init to completion.

        On init failure every timer/subscription it managed to register is
        torn down and the error propagates (the rule reverts to Stopped).
        """
        name = ast.rule_name
        if name in self._envs:
            raise InvalidTransition(f"rule {name!r} is already running")
        env = Env(rule_name=name, ast=ast)
        self._envs[name] = env
        if params is not None:
            self._local_params[name] = dict(params)
        try:
            init = ast.function("init")
            self._interp.run_function(env, init, [], _Turn())
        except BaseException:
            self.stop_rule(name)
            raise
        return env

    def stop_rule(self, name: str) -> None:
        env = self._envs.pop(name, None)
        if env is None:
            return
        for timer_id in env.timer_ids:
            self.scheduler.cancel_timer(timer_id)
        for sid in env.subscription_ids:
            self.cancel_subscription(sid)

    def is_running(self, name: str) -> bool:
        return name in self._envs

    def running_rules(self) -> list[str]:
        return list(self._envs)

    def env(self, name: str) -> Env | None:
        return self._envs.get(name)

    def call_function(self, rule_name: str, fn_name: str, args: list,
                      turn: _Turn | None = None):
        env = self._envs.get(rule_name)
        if env is None:
            raise UnknownRule(f"no running rule {rule_name!r}")
        fn = env.ast.function(fn_name)
        if fn is None:
            raise UnknownFunction(f"rule {rule_name!r} has no function {fn_name!r}")
        return self._interp.run_function(env, fn, args, turn or _Turn())

    # -- parameters -----------------------------------------------------------

    def set_params_provider(
            self, provider: Callable[[str], Mapping[str, Scalar] | None]) -> None:
        self._params_provider = provider

    def get_rule_setting(self, rule_name: str, key: str):
        if self._params_provider is not None:
            params = self._params_provider(rule_name)
            if params is not None and key in params:
                return params[key]
        return self._local_params.get(rule_name, {}).get(key)

    def set_local_param(self, rule_name: str, key: str, value: Scalar) -> None:
        self._local_params.setdefault(rule_name, {})[key] = value

    # -- subscriptions ------------------------------------------------------------

    def subscribe_condition(self, condition: str | ConditionExpr,
                            callback: str | Callable[[Event], None],
                            *, owner: str | None = None) -> int:
        cond = parse_condition(condition) if isinstance(condition, str) else condition
        sub = Subscription(sid=next(self._ids), kind=CONDITION, owner=owner,
                           callback=callback, order=next(self._order), condition=cond,
                           resources=frozenset(referenced_resources(cond)))
        self._subs[sub.sid] = sub
        for resource in sub.resources:
            self._subs_by_resource.setdefault(resource, []).append(sub)
        if owner is not None:
            self._envs[owner].subscription_ids.append(sub.sid)
        return sub.sid

    def subscribe_query(self, query: str | Query,
                        callback: str | Callable[[Event], None],
                        *, owner: str | None = None) -> int:
        parsed = parse_query(query) if isinstance(query, str) else query
        if parsed.verb != SUBSCRIBE:
            raise VerbMismatch(f"subscribe_query needs a subscribe query, got {parsed.verb}")
        sub = Subscription(sid=next(self._ids), kind=SEMANTIC, owner=owner,
                           callback=callback, order=next(self._order), query=parsed)
        self._subs[sub.sid] = sub
        self._semantic_subs.append(sub)
        if owner is not None:
            self._envs[owner].subscription_ids.append(sub.sid)
        return sub.sid

    def cancel_subscription(self, sid: int) -> None:
        sub = self._subs.pop(sid, None)
        if sub is None:
            return
        sub.active = False
        if sub.kind == CONDITION:
            for resource in sub.resources:
                bucket = self._subs_by_resource.get(resource)
                if bucket is not None:
                    bucket[:] = [s for s in bucket if s.sid != sid]
                    if not bucket:
                        del self._subs_by_resource[resource]
        else:
            self._semantic_subs[:] = [s for s in self._semantic_subs if s.sid != sid]

    # -- builtins (called from the interpreter) ---------------------------------------

    def builtin_timer(self, env: Env, rule_name: str, fn_name: str,
                      delay: float, period: float, count: int) -> int:
        if rule_name != env.rule_name:
            raise RuleRuntimeError(f"timers can only target the owning rule, got {rule_name!r}",
                                   rule=env.rule_name)
        if env.ast.function(fn_name) is None:
            raise UnknownFunction(f"rule {env.rule_name!r} has no function {fn_name!r}")

        def fire(rule=env.rule_name, fn=fn_name):
            if rule in self._envs:
                try:
                    self.call_function(rule, fn, [])
                except EngineError as exc:
                    logger.warning("rule %s timer %s failed: %s", rule, fn, exc)

        timer_id = self.scheduler.add_timer(delay, period, int(count), fire)
        env.timer_ids.append(timer_id)
        return timer_id

    def builtin_query(self, env: Env, text: str, callback: str | None):
        try:
            parsed = parse_query(text)
        except EngineError as exc:
            return _Pair(None, str(exc))
        if parsed.verb == SUBSCRIBE:
            if callback is None:
                raise RuleRuntimeError("subscribe query needs a callback function name",
                                       rule=env.rule_name)
            if env.ast.function(callback) is None:
                raise UnknownFunction(
                    f"rule {env.rule_name!r} has no function {callback!r}")
            return float(self.subscribe_query(parsed, callback, owner=env.rule_name))
        try:
            result = eval_query(parsed, self.registry, self.ontology)
        except EngineError as exc:
            return _Pair(None, str(exc))
        if parsed.verb == SEARCH:
            return list(result)
        return float(result)

    def builtin_get_capability(self, thing_ref, cap_name: str) -> CapRef:
        thing_id = thing_ref.thing_id if isinstance(thing_ref, CapRef) else thing_ref
        cap = self.registry.get_capability(thing_id, cap_name)
        return CapRef(thing_id=thing_id, name=cap.name, value=cap.value,
                      unit=cap.unit, writable=cap.writable)

    def builtin_set_value(self, ref: CapRef, value: Scalar) -> None:
        self.registry.set_capability_value(ref.thing_id, ref.name, value, external=True)

    def builtin_subscribe(self, env: Env, condition_text: str, callback: str) -> float:
        if env.ast.function(callback) is None:
            raise UnknownFunction(f"rule {env.rule_name!r} has no function {callback!r}")
        return float(self.subscribe_condition(condition_text, callback,
                                              owner=env.rule_name))

    def builtin_call(self, turn: _Turn, target_rule: str, fn_name: str, args: list):
        if turn.call_depth >= MAX_CALL_DEPTH:
            raise CallDepthExceeded(f"engine.call depth limit ({MAX_CALL_DEPTH}) reached")
        env = self._envs.get(target_rule)
        if env is None:
            raise RuleNotStarted(f"rule {target_rule!r} is not started")
        fn = env.ast.function(fn_name)
        if fn is None:
            raise UnknownFunction(f"rule {target_rule!r} has no function {fn_name!r}")
        turn.call_depth += 1
        try:
            return self._interp.run_function(env, fn, args, turn)
        finally:
            turn.call_depth -= 1

    def builtin_notify(self, env: Env, level: str, message: str) -> None:
        self.notifications.emit(env.rule_name, level, message,
                                self.scheduler.clock.now_ms())


# --- the interpreter ---------------------------------------------------------------


def _is_number(v) -> bool:
    return isinstance(v, float) and not isinstance(v, bool)


def truthy(v) -> bool:
    return v is not None and v is not False


def type_name(v) -> str:
    if v is None:
        return "nil"
    if isinstance(v, bool):
        return "bool"
    if isinstance(v, float):
        return "number"
    if isinstance(v, str):
        return "string"
    if isinstance(v, list):
        return "list"
    if isinstance(v, CapRef):
        return "capability"
    return type(v).__name__


class _Ctx:
    __slots__ = ("env", "turn", "frame")

    def __init__(self, env: Env, turn: _Turn, frame: dict):
        self.env = env
        self.turn = turn
        self.frame = frame


class _Interpreter:
    def __init__(self, engine: RuleEngine):
        self.engine = engine
        self._exec = {
            rs.Assign: self._exec_assign,
            rs.Local: self._exec_local,
            rs.If: self._exec_if,
            rs.NumericFor: self._exec_for,
            rs.While: self._exec_while,
            rs.CallStmt: self._exec_call_stmt,
            rs.Return: self._exec_return,
        }
        self._eval = {
            rs.Num: lambda c, n: n.value,
            rs.Str: lambda c, n: n.value,
            rs.Bool: lambda c, n: n.value,
            rs.Nil: lambda c, n: None,
            rs.Name: self._eval_name,
            rs.Index: self._eval_index,
            rs.Len: self._eval_len,
            rs.Unary: self._eval_unary,
            rs.Binary: self._eval_binary,
            rs.EngineCall: self._eval_engine_call,
            rs.LocalCall: self._eval_local_call,
        }

    def error(self, ctx: _Ctx, node, message: str) -> RuleRuntimeError:
        return RuleRuntimeError(message, rule=ctx.env.rule_name, line=node.line)

    def _step(self, ctx: _Ctx, node) -> None:
        ctx.turn.steps -= 1
        if ctx.turn.steps < 0:
            raise RuleRuntimeError(f"execution budget exceeded ({STEP_BUDGET} steps)",
                                   rule=ctx.env.rule_name, line=node.line)

    def run_function(self, env: Env, fn: rs.FuncDef, args: list, turn: _Turn):
        turn.frames += 1
        if turn.frames > MAX_FRAMES:
            turn.frames -= 1
            raise RuleRuntimeError("script call stack too deep", rule=env.rule_name,
                                   line=fn.line)
        frame = {}
        for i, param in enumerate(fn.params):
            frame[param] = args[i] if i < len(args) else None
        ctx = _Ctx(env, turn, frame)
        try:
            self._exec_block(ctx, fn.body)
        except _Return as ret:
            return ret.value
        finally:
            turn.frames -= 1
        return None

    # -- statements ------------------------------------------------------

    def _exec_block(self, ctx: _Ctx, block) -> None:
        for stmt in block:
            self._step(ctx, stmt)
            self._exec[type(stmt)](ctx, stmt)

    def _exec_assign(self, ctx: _Ctx, node: rs.Assign) -> None:
        raw = self._eval[type(node.value)](ctx, node.value)
        if isinstance(raw, _Pair):
            value, err = raw.first, raw.second
        else:
            value, err = raw, None
        if node.target in ctx.frame:
            ctx.frame[node.target] = value
        else:
            ctx.env.globals[node.target] = value
        if node.extra_target is not None:
            if node.extra_target in ctx.frame:
                ctx.frame[node.extra_target] = err
            else:
                ctx.env.globals[node.extra_target] = err

    def _exec_local(self, ctx: _Ctx, node: rs.Local) -> None:
        ctx.frame[node.name] = self._eval_expr(ctx, node.value)

    def _exec_if(self, ctx: _Ctx, node: rs.If) -> None:
        for cond, body in node.branches:
            if truthy(self._eval_expr(ctx, cond)):
                self._exec_block(ctx, body)
                return
        if node.orelse is not None:
            self._exec_block(ctx, node.orelse)

    def _exec_for(self, ctx: _Ctx, node: rs.NumericFor) -> None:
        start = self._eval_expr(ctx, node.start)
        limit = self._eval_expr(ctx, node.limit)
        step = self._eval_expr(ctx, node.step) if node.step is not None else 1.0
        for value, what in ((start, "start"), (limit, "limit"), (step, "step")):
            if not _is_number(value):
                raise self.error(ctx, node, f"for {what} must be a number, got {type_name(value)}")
        if step == 0.0:
            raise self.error(ctx, node, "for step must not be zero")
        i = start
        while (i <= limit) if step > 0 else (i >= limit):
            self._step(ctx, node)
            ctx.frame[node.var] = i
            self._exec_block(ctx, node.body)
            i += step

    def _exec_while(self, ctx: _Ctx, node: rs.While) -> None:
        while truthy(self._eval_expr(ctx, node.cond)):
            self._step(ctx, node)
            self._exec_block(ctx, node.body)

    def _exec_call_stmt(self, ctx: _Ctx, node: rs.CallStmt) -> None:
        self._eval[type(node.call)](ctx, node.call)

    def _exec_return(self, ctx: _Ctx, node: rs.Return) -> None:
        value = self._eval_expr(ctx, node.value) if node.value is not None else None
        raise _Return(value)

    # -- expressions ------------------------------------------------------------

    def _eval_expr(self, ctx: _Ctx, node):
        value = self._eval[type(node)](ctx, node)
        if isinstance(value, _Pair):
            return value.first
        return value

    def _eval_name(self, ctx: _Ctx, node: rs.Name):
        if node.ident in ctx.frame:
            return ctx.frame[node.ident]
        return ctx.env.globals.get(node.ident)

    def _eval_index(self, ctx: _Ctx, node: rs.Index):
        self._step(ctx, node)
        obj = self._eval_expr(ctx, node.obj)
        key = self._eval_expr(ctx, node.index)
        if isinstance(obj, list):
            if not _is_number(key) or not float(key).is_integer():
                raise self.error(ctx, node, f"list index must be an integer, got {type_name(key)}")
            i = int(key)
            if i < 1 or i > len(obj):
                raise self.error(ctx, node, f"list index {i} out of range (1..{len(obj)})")
            return obj[i - 1]
        if isinstance(obj, CapRef):
            if not isinstance(key, str):
                raise self.error(ctx, node, "capability index must be a string")
            try:
                return obj.lookup(key)
            except KeyError:
                raise self.error(ctx, node, f"capability has no field {key!r}") from None
        raise self.error(ctx, node, f"cannot index a {type_name(obj)} value")

    def _eval_len(self, ctx: _Ctx, node: rs.Len):
        self._step(ctx, node)
        value = self._eval_expr(ctx, node.arg)
        if isinstance(value, (list, str)):
            return float(len(value))
        raise self.error(ctx, node, f"len expects a list or string, got {type_name(value)}")

    def _eval_unary(self, ctx: _Ctx, node: rs.Unary):
        self._step(ctx, node)
        value = self._eval_expr(ctx, node.operand)
        if node.op == "not":
            return not truthy(value)
        if not _is_number(value):
            raise self.error(ctx, node, f"cannot negate a {type_name(value)} value")
        return -value

    def _eval_binary(self, ctx: _Ctx, node: rs.Binary):
        self._step(ctx, node)
        op = node.op
        if op == "and":
            left = self._eval_expr(ctx, node.left)
            return self._eval_expr(ctx, node.right) if truthy(left) else left
        if op == "or":
            left = self._eval_expr(ctx, node.left)
            return left if truthy(left) else self._eval_expr(ctx, node.right)
        left = self._eval_expr(ctx, node.left)
        right = self._eval_expr(ctx, node.right)
        if op == "==":
            return self._values_equal(left, right)
        if op == "!=":
            return not self._values_equal(left, right)
        if op in ("<", "<=", ">", ">="):
            both_numbers = _is_number(left) and _is_number(right)
            both_strings = isinstance(left, str) and isinstance(right, str)
            if not (both_numbers or both_strings):
                raise self.error(ctx, node,
                                 f"cannot order {type_name(left)} and {type_name(right)}")
            if op == "<":
                return left < right
            if op == "<=":
                return left <= right
            if op == ">":
                return left > right
            return left >= right
        if not (_is_number(left) and _is_number(right)):
            raise self.error(ctx, node,
                             f"arithmetic needs numbers, got {type_name(left)} "
                             f"and {type_name(right)}")
        try:
            if op == "+":
                return left + right
            if op == "-":
                return left - right
            if op == "*":
                return left * right
            if op == "/":
                return left / right
            return left % right
        except ZeroDivisionError:
            raise self.error(ctx, node, "divide by zero") from None

    @staticmethod
    def _values_equal(a, b) -> bool:
        if isinstance(a, (list, CapRef)) or isinstance(b, (list, CapRef)):
            return a is b
        return _scalar_eq(a, b)

    def _eval_local_call(self, ctx: _Ctx, node: rs.LocalCall):
        self._step(ctx, node)
        fn = ctx.env.ast.function(node.name)
        if fn is None:
            raise self.error(ctx, node, f"no function {node.name!r} in this rule")
        args = [self._eval_expr(ctx, a) for a in node.args]
        return self.run_function(ctx.env, fn, args, ctx.turn)

    # -- engine builtins ---------------------------------------------------------

    def _eval_engine_call(self, ctx: _Ctx, node: rs.EngineCall):
        self._step(ctx, node)
        args = [self._eval_expr(ctx, a) for a in node.args]
        name = node.name
        engine = self.engine
        try:
            if name == "timer":
                self._arity(ctx, node, args, 5)
                rule, fn = self._want_str(ctx, node, args[0]), self._want_str(ctx, node, args[1])
                delay = self._want_number(ctx, node, args[2])
                period = self._want_number(ctx, node, args[3])
                count = self._want_number(ctx, node, args[4])
                if not count.is_integer():
                    raise self.error(ctx, node, "timer repeat count must be an integer")
                return float(engine.builtin_timer(ctx.env, rule, fn, delay, period, int(count)))
            if name == "query":
                if len(args) not in (1, 2):
                    raise self.error(ctx, node, "engine.query expects 1 or 2 arguments")
                text = self._want_str(ctx, node, args[0])
                callback = self._want_str(ctx, node, args[1]) if len(args) == 2 else None
                return engine.builtin_query(ctx.env, text, callback)
            if name == "getCapability":
                self._arity(ctx, node, args, 2)
                if not isinstance(args[0], (str, CapRef)):
                    raise self.error(ctx, node, "getCapability expects a thing id or capability")
                return engine.builtin_get_capability(args[0], self._want_str(ctx, node, args[1]))
            if name == "setValue":
                self._arity(ctx, node, args, 2)
                if not isinstance(args[0], CapRef):
                    raise self.error(ctx, node,
                                     "setValue expects a capability from getCapability")
                if not isinstance(args[1], (bool, float, str)):
                    raise self.error(ctx, node, f"cannot write a {type_name(args[1])} value")
                engine.builtin_set_value(args[0], args[1])
                return None
            if name == "getRuleSetting":
                self._arity(ctx, node, args, 2)
                return engine.get_rule_setting(self._want_str(ctx, node, args[0]),
                                               self._want_str(ctx, node, args[1]))
            if name == "subscribe":
                self._arity(ctx, node, args, 2)
                return engine.builtin_subscribe(ctx.env, self._want_str(ctx, node, args[0]),
                                                self._want_str(ctx, node, args[1]))
            if name == "call":
                if len(args) < 2:
                    raise self.error(ctx, node, "engine.call expects rule and function names")
                return engine.builtin_call(ctx.turn, self._want_str(ctx, node, args[0]),
                                           self._want_str(ctx, node, args[1]), args[2:])
            if name == "notify":
                self._arity(ctx, node, args, 2)
                engine.builtin_notify(ctx.env, self._want_str(ctx, node, args[0]),
                                      self._want_str(ctx, node, args[1]))
                return None
            # engine.log
            self._arity(ctx, node, args, 2)
            level = self._want_str(ctx, node, args[0]).lower()
            logger.log(logging.getLevelName(level.upper()) if level in
                       ("debug", "info", "warning", "error") else logging.INFO,
                       "[%s] %s", ctx.env.rule_name, args[1])
            return None
        except RuleRuntimeError:
            raise
        except EngineError as exc:
            exc.rule = getattr(exc, "rule", None) or ctx.env.rule_name
            exc.line = getattr(exc, "line", None) or node.line
            raise

    def _arity(self, ctx: _Ctx, node, args: list, n: int) -> None:
        if len(args) != n:
            raise self.error(ctx, node, f"engine.{node.name} expects {n} arguments, "
                                        f"got {len(args)}")

    def _want_str(self, ctx: _Ctx, node, value) -> str:
        if not isinstance(value, str):
            raise self.error(ctx, node, f"expected a string, got {type_name(value)}")
        return value

    def _want_number(self, ctx: _Ctx, node, value) -> float:
        if not _is_number(value):
            raise self.error(ctx, node, f"expected a number, got {type_name(value)}")
        return value
