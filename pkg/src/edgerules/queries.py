"""Semantic query surface: parse, match, evaluate.

Grammar (case-insensitive verbs/targets/connectives)::

    query  := verb [target] filter
    verb   := search | avg | min | max | sum | count | subscribe
    target := device | variable
    filter := or_expr
    or_expr  := and_expr { "or" and_expr }
    and_expr := term { "and" term }
    term     := "(" or_expr ")" | ["@"] key ":" value

The ``@`` prefix marks a term for ontology inference. A word is only taken
as the target when it is not immediately followed by ``:``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .errors import (EmptyAggregate, NonNumericCapability, QuerySyntaxError, UnknownTarget,
                     UnknownVerb)
from .ontology import OntologyGraph
from .registry import Thing, ThingRegistry, normalize_tag_key

SEARCH, AVG, MIN, MAX, SUM, COUNT, SUBSCRIBE = "Search", "Avg", "Min", "Max", "Sum", "Count", "Subscribe"
VERBS = {v.lower(): v for v in (SEARCH, AVG, MIN, MAX, SUM, COUNT, SUBSCRIBE)}
AGGREGATES = (AVG, MIN, MAX, SUM)

DEVICE, VARIABLE = "Device", "Variable"
TARGETS = {t.lower(): t for t in (DEVICE, VARIABLE)}


@dataclass(frozen=True, slots=True)
class FilterTerm:
    key: str
    value: str
    inferred: bool = False


@dataclass(frozen=True, slots=True)
class FilterAnd:
    left: "FilterExpr"
    right: "FilterExpr"


@dataclass(frozen=True, slots=True)
class FilterOr:
    left: "FilterExpr"
    right: "FilterExpr"


FilterExpr = FilterTerm | FilterAnd | FilterOr


@dataclass(frozen=True, slots=True)
class Query:
    verb: str
    target: str
    filter: FilterExpr


_TOKEN = re.compile(r"\s*(?:(?P<lparen>\()|(?P<rparen>\))|(?P<at>@)|(?P<colon>:)|"
                    r"(?P<word>[A-Za-z0-9_][A-Za-z0-9_.-]*))")


class _QueryScanner:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0
        self.tokens: list[tuple[str, str, int]] = []  # (kind, value, position)
        while True:
            if self.pos >= len(text):
                break
            m = _TOKEN.match(text, self.pos)
            if m is None:
                stripped = text[self.pos:].lstrip()
                if not stripped:
                    break
                at = len(text) - len(stripped)
                raise QuerySyntaxError(f"unexpected character {text[at]!r}", position=at)
            kind = m.lastgroup or ""
            self.tokens.append((kind, m.group(kind), m.start(kind)))
            self.pos = m.end()
        self.index = 0

    def peek(self, ahead: int = 0) -> tuple[str, str, int] | None:
        i = self.index + ahead
        return self.tokens[i] if i < len(self.tokens) else None

    def next(self) -> tuple[str, str, int] | None:
        tok = self.peek()
        if tok is not None:
            self.index += 1
        return tok

    def expect(self, kind: str, what: str) -> tuple[str, str, int]:
        tok = self.next()
        if tok is None or tok[0] != kind:
            pos = tok[2] if tok else len(self.text)
            raise QuerySyntaxError(f"expected {what}", position=pos, expected=what)
        return tok


def parse_query(text: str) -> Query:
    sc = _QueryScanner(text)
    tok = sc.next()
    if tok is None:
        raise QuerySyntaxError("empty query", position=0, expected="verb")
    kind, word, pos = tok
    if kind != "word" or word.lower() not in VERBS:
        raise UnknownVerb(f"unknown verb {word if kind == 'word' else text[pos]!r}",
                          position=pos, expected="Search|Avg|Min|Max|Sum|Count|Subscribe")
    verb = VERBS[word.lower()]

    target = DEVICE
    nxt = sc.peek()
    if nxt is not None and nxt[0] == "word":
        follower = sc.peek(1)
        looks_like_term = follower is not None and follower[0] == "colon"
        if not looks_like_term:
            if nxt[1].lower() not in TARGETS:
                raise UnknownTarget(f"unknown target {nxt[1]!r}", position=nxt[2],
                                    expected="Device|Variable")
            target = TARGETS[nxt[1].lower()]
            sc.next()

    if verb in AGGREGATES and target != VARIABLE:
        raise QuerySyntaxError(f"{verb} requires target 'variable'", position=pos,
                               expected="variable")
    if verb == SUBSCRIBE and target != DEVICE:
        raise QuerySyntaxError("subscribe targets devices", position=pos, expected="device")

    filter_expr = _parse_or(sc)
    trailing = sc.peek()
    if trailing is not None:
        raise QuerySyntaxError(f"unexpected {trailing[1]!r} after filter", position=trailing[2])
    return Query(verb=verb, target=target, filter=filter_expr)


def _parse_or(sc: _QueryScanner) -> FilterExpr:
    left = _parse_and(sc)
    while True:
        tok = sc.peek()
        if tok is not None and tok[0] == "word" and tok[1].lower() == "or":
            sc.next()
            left = FilterOr(left, _parse_and(sc))
        else:
            return left


def _parse_and(sc: _QueryScanner) -> FilterExpr:
    left = _parse_term(sc)
    while True:
        tok = sc.peek()
        if tok is not None and tok[0] == "word" and tok[1].lower() == "and":
            sc.next()
            left = FilterAnd(left, _parse_term(sc))
        else:
            return left


def _parse_term(sc: _QueryScanner) -> FilterExpr:
    tok = sc.peek()
    if tok is None:
        raise QuerySyntaxError("expected a filter term", position=len(sc.text),
                               expected="key:value")
    if tok[0] == "lparen":
        sc.next()
        inner = _parse_or(sc)
        sc.expect("rparen", "')'")
        return inner
    inferred = False
    if tok[0] == "at":
        sc.next()
        inferred = True
    kind, key, pos = sc.expect("word", "tag key")
    if key.lower() in ("and", "or"):
        raise QuerySyntaxError(f"{key!r} cannot be a tag key", position=pos, expected="key:value")
    sc.expect("colon", "':'")
    _, value, _ = sc.expect("word", "tag value")
    return FilterTerm(key=normalize_tag_key(key), value=value, inferred=inferred)


# --- matching ------------------------------------------------------------------


def match_thing(thing: Thing, filter_expr: FilterExpr, ontology: OntologyGraph) -> bool:
    if isinstance(filter_expr, FilterAnd):
        return (match_thing(thing, filter_expr.left, ontology)
                and match_thing(thing, filter_expr.right, ontology))
    if isinstance(filter_expr, FilterOr):
        return (match_thing(thing, filter_expr.left, ontology)
                or match_thing(thing, filter_expr.right, ontology))
    term = filter_expr
    tag_value = thing.tags.get(term.key)
    if tag_value is None:
        return False
    if tag_value == term.value:
        return True
    if not term.inferred:
        return False
    relation = ontology.relation_for_key(term.key)
    if relation is None:
        return False
    return term.value in ontology.ancestors(tag_value, relation)


# --- evaluation ------------------------------------------------------------------


def eval_query(query: Query, registry: ThingRegistry, ontology: OntologyGraph):
    """Evaluate a parsed non-subscription query against the registry.

    Search returns the matched thing ids sorted lexicographically; Count an
    integer; aggregates a number over the matched things' measurement
    capability as designated by each thing's usage tag.
    """
    if query.verb == SUBSCRIBE:
        from .errors import VerbMismatch
        raise VerbMismatch("subscribe queries need a callback; use subscribe_query")
    matched = [t for t in registry.things() if match_thing(t, query.filter, ontology)]
    if query.verb == SEARCH:
        return sorted(t.id for t in matched)
    if query.verb == COUNT:
        return len(matched)

    values: list[float] = []
    for thing in matched:
        usage = thing.tags.get("usage")
        if usage is None:
            continue
        cap_name = registry.measurement_for(usage)
        if cap_name is None:
            continue
        cap = thing.capabilities.get(cap_name)
        if cap is None:
            continue
        if isinstance(cap.value, bool) or not isinstance(cap.value, float):
            raise NonNumericCapability(
                f"{thing.id}.{cap_name} is not numeric; cannot aggregate")
        values.append(cap.value)
    if not values:
        raise EmptyAggregate(f"{query.verb} matched no numeric values")
    if query.verb == AVG:
        return sum(values) / len(values)
    if query.verb == MIN:
        return min(values)
    if query.verb == MAX:
        return max(values)
    return sum(values)
