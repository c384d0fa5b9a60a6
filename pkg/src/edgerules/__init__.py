"""Edge-gateway semantic rules engine.

Signed rule scripts subscribe to device events, evaluate event-condition-
action logic, and issue tag queries resolved with ontology inference.
"""

from .conditions import ConditionExpr, format_condition, parse_condition
from .lifecycle import LifecycleManager, build_package, validate_package
from .ontology import OntologyGraph, load_ontology
from .queries import Query, eval_query, match_thing, parse_query
from .registry import Capability, Event, Thing, ThingRegistry
from .rulescript import RuleScriptAST, format_ast, parse_rule
from .runtime import RuleEngine, evaluate_condition
from .scheduler import Scheduler, VirtualClock, WallClock

__all__ = [
    "Capability",
    "ConditionExpr",
    "Event",
    "LifecycleManager",
    "OntologyGraph",
    "Query",
    "RuleEngine",
    "RuleScriptAST",
    "Scheduler",
    "Thing",
    "ThingRegistry",
    "VirtualClock",
    "WallClock",
    "build_package",
    "eval_query",
    "evaluate_condition",
    "format_ast",
    "format_condition",
    "load_ontology",
    "match_thing",
    "parse_condition",
    "parse_query",
    "parse_rule",
    "validate_package",
]

__version__ = "0.1.0"
