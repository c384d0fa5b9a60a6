"""Condition sub-language for event subscriptions.

A basic block names one resource and optionally a capability, e.g.::

    [MultiSensorA]Temp > 25° C AND [DoorSensorB]isOpen == True
    @exist[SensorA] == True
    @change[DoorSensor1]State == True
    @incr[SensorA]Temp == True

``@exist`` / ``@change`` / ``@incr`` / ``@decr`` select the term kind;
a plain block is an evaluator on the current value. Unit suffixes after
numbers ("25° C") are lexed and discarded; comparison is unit-blind.
AND binds tighter than OR; parentheses group.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import EmptyCondition, InvalidComparator, SourceError
from .registry import Scalar

EVALUATOR, EXIST, CHANGE, INCR, DECR = "Evaluator", "Exist", "Change", "Incr", "Decr"
_PREFIXES = {"exist": EXIST, "change": CHANGE, "incr": INCR, "decr": DECR}

COMPARATORS = ("==", "!=", "<", "<=", ">", ">=")
_EDGE_COMPARATORS = ("==", "!=")


@dataclass(frozen=True, slots=True)
class CondTerm:
    kind: str
    resource: str
    capability: str | None
    comparator: str
    literal: Scalar


@dataclass(frozen=True, slots=True)
class CondAnd:
    left: "ConditionExpr"
    right: "ConditionExpr"


@dataclass(frozen=True, slots=True)
class CondOr:
    left: "ConditionExpr"
    right: "ConditionExpr"


ConditionExpr = CondTerm | CondAnd | CondOr


def referenced_resources(expr: ConditionExpr) -> set[str]:
    if isinstance(expr, CondTerm):
        return {expr.resource}
    return referenced_resources(expr.left) | referenced_resources(expr.right)


class _Scanner:
    """Hand-rolled lexer; positions are 1-based line/column."""

    def __init__(self, text: str):
        self.text = text
        self.pos = 0
        self.line = 1
        self.col = 1

    def error(self, message: str, expected: str | None = None) -> SourceError:
        return SourceError(message, line=self.line, column=self.col, expected=expected)

    def peek_char(self) -> str:
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def advance(self) -> str:
        ch = self.text[self.pos]
        self.pos += 1
        if ch == "\n":
            self.line += 1
            self.col = 1
        else:
            self.col += 1
        return ch

    def skip_ws(self) -> None:
        while self.peek_char() and self.peek_char().isspace():
            self.advance()

    def at_end(self) -> bool:
        self.skip_ws()
        return self.pos >= len(self.text)

    def next_token(self) -> tuple[str, object, int, int]:
        """Returns (kind, value, line, col); kind EOF at end of input."""
        self.skip_ws()
        line, col = self.line, self.col
        ch = self.peek_char()
        if not ch:
            return ("EOF", "", line, col)
        if ch in "()[]":
            self.advance()
            return (ch, ch, line, col)
        if ch == "@":
            self.advance()
            word = self._word()
            if word.lower() not in _PREFIXES:
                raise SourceError(f"unknown prefix @{word}", line=line, column=col,
                                  expected="@exist|@change|@incr|@decr")
            return ("PREFIX", _PREFIXES[word.lower()], line, col)
        if ch in "=!<>":
            op = self.advance()
            if self.peek_char() == "=":
                op += self.advance()
            if op == "=":
                op = "=="  # historical alias, conditions only
            if op == "!":
                raise SourceError("expected '!='", line=line, column=col, expected="!=")
            return ("CMP", op, line, col)
        if ch == '"':
            return ("LIT", self._string(), line, col)
        if ch.isdigit() or (ch == "-" and self._peek_ahead_digit()):
            return ("LIT", self._number(), line, col)
        if ch.isalpha() or ch == "_":
            word = self._word()
            lowered = word.lower()
            if lowered == "and":
                return ("AND", word, line, col)
            if lowered == "or":
                return ("OR", word, line, col)
            if lowered == "true":
                return ("LIT", True, line, col)
            if lowered == "false":
                return ("LIT", False, line, col)
            return ("NAME", word, line, col)
        raise SourceError(f"unexpected character {ch!r}", line=line, column=col)

    def _peek_ahead_digit(self) -> bool:
        return self.pos + 1 < len(self.text) and self.text[self.pos + 1].isdigit()

    def _word(self) -> str:
        out = []
        while self.peek_char() and (self.peek_char().isalnum() or self.peek_char() in "_-"):
            out.append(self.advance())
        if not out:
            raise self.error("expected a name")
        return "".join(out)

    def _string(self) -> str:
        self.advance()  # opening quote
        out = []
        while True:
            ch = self.peek_char()
            if not ch or ch == "\n":
                raise self.error("unterminated string")
            self.advance()
            if ch == '"':
                return "".join(out)
            if ch == "\\":
                esc = self.peek_char()
                if esc == '"':
                    out.append('"')
                elif esc == "\\":
                    out.append("\\")
                elif esc == "n":
                    out.append("\n")
                else:
                    raise self.error(f"bad escape \\{esc}")
                self.advance()
            else:
                out.append(ch)

    def _number(self) -> float:
        out = []
        if self.peek_char() == "-":
            out.append(self.advance())
        while self.peek_char().isdigit():
            out.append(self.advance())
        if self.peek_char() == ".":
            out.append(self.advance())
            if not self.peek_char().isdigit():
                raise self.error("digit expected after '.'")
            while self.peek_char().isdigit():
                out.append(self.advance())
        self._skip_unit_suffix()
        return float("".join(out))

    def _skip_unit_suffix(self) -> None:
        # "25° C", "25°C", "25 °C": degree sign plus an optional unit word.
        save = (self.pos, self.line, self.col)
        self.skip_ws()
        if self.peek_char() != "\u00b0":
            self.pos, self.line, self.col = save
            return
        self.advance()
        self.skip_ws()
        save = (self.pos, self.line, self.col)
        if self.peek_char().isalpha():
            word = self._word()
            if word.lower() in ("and", "or"):
                self.pos, self.line, self.col = save

    def resource_id(self) -> str:
        """Everything up to the closing bracket, trimmed."""
        out = []
        while self.peek_char() and self.peek_char() != "]":
            out.append(self.advance())
        name = "".join(out).strip()
        if not name:
            raise self.error("empty resource id")
        return name


class _ConditionParser:
    def __init__(self, text: str):
        self.sc = _Scanner(text)
        self.tok = self.sc.next_token()

    def advance(self) -> tuple:
        tok = self.tok
        self.tok = self.sc.next_token()
        return tok

    def expect(self, kind: str, what: str) -> tuple:
        if self.tok[0] != kind:
            raise SourceError(f"expected {what}", line=self.tok[2], column=self.tok[3],
                              expected=what)
        return self.advance()

    def parse(self) -> ConditionExpr:
        if self.tok[0] == "EOF":
            raise EmptyCondition("empty condition", line=1, column=1)
        expr = self.or_expr()
        if self.tok[0] != "EOF":
            raise SourceError(f"unexpected {self.tok[1]!r}", line=self.tok[2],
                              column=self.tok[3])
        return expr

    def or_expr(self) -> ConditionExpr:
        left = self.and_expr()
        while self.tok[0] == "OR":
            self.advance()
            left = CondOr(left, self.and_expr())
        return left

    def and_expr(self) -> ConditionExpr:
        left = self.term()
        while self.tok[0] == "AND":
            self.advance()
            left = CondAnd(left, self.term())
        return left

    def term(self) -> ConditionExpr:
        if self.tok[0] == "(":
            self.advance()
            inner = self.or_expr()
            self.expect(")", "')'")
            return inner
        return self.basic_block()

    def basic_block(self) -> CondTerm:
        kind = EVALUATOR
        line, col = self.tok[2], self.tok[3]
        if self.tok[0] == "PREFIX":
            kind = self.advance()[1]
        if self.tok[0] != "[":
            raise SourceError("expected '[resource]'", line=self.tok[2], column=self.tok[3],
                              expected="[")
        # Resource ids may contain arbitrary characters, so read them straight
        # from the scanner instead of through tokens.
        self.advance_bracket()
        capability = None
        if self.tok[0] == "NAME":
            capability = self.advance()[1]
        if kind == EXIST and capability is not None:
            raise SourceError("@exist takes no capability", line=line, column=col)
        if kind in (CHANGE, INCR, DECR) and capability is None:
            raise SourceError(f"@{kind.lower()} needs a capability", line=line, column=col)
        if kind == EVALUATOR and capability is None:
            raise SourceError("evaluator needs a capability", line=line, column=col)

        if self.tok[0] != "CMP":
            raise SourceError("expected a comparator", line=self.tok[2], column=self.tok[3],
                              expected="==|!=|<|<=|>|>=")
        cmp_line, cmp_col = self.tok[2], self.tok[3]
        comparator = self.advance()[1]
        if self.tok[0] != "LIT":
            raise SourceError("expected a literal", line=self.tok[2], column=self.tok[3],
                              expected="number, string, True or False")
        literal = self.advance()[1]
        if isinstance(literal, (int, float)) and not isinstance(literal, bool):
            literal = float(literal)

        if kind != EVALUATOR:
            if comparator not in _EDGE_COMPARATORS:
                raise InvalidComparator(
                    f"@{kind.lower()} only supports == or !=",
                    line=cmp_line, column=cmp_col, expected="==|!=")
            if not isinstance(literal, bool):
                raise SourceError(f"@{kind.lower()} compares against True/False",
                                  line=cmp_line, column=cmp_col, expected="True|False")
        return CondTerm(kind=kind, resource=self.resource, capability=capability,
                        comparator=comparator, literal=literal)

    def advance_bracket(self) -> None:
        # current token is '['; the resource id runs to the next ']'.
        self.resource = self.sc.resource_id()
        closing = self.sc.next_token()
        if closing[0] != "]":
            raise SourceError("expected ']'", line=closing[2], column=closing[3], expected="]")
        self.tok = self.sc.next_token()


def parse_condition(text: str) -> ConditionExpr:
    return _ConditionParser(text).parse()


def format_condition(expr: ConditionExpr) -> str:
    """Canonical text with explicit parentheses around nested groups."""
    if isinstance(expr, CondTerm):
        prefix = "" if expr.kind == EVALUATOR else f"@{expr.kind.lower()}"
        cap = expr.capability or ""
        return f"{prefix}[{expr.resource}]{cap} {expr.comparator} {format_literal(expr.literal)}"
    op = "AND" if isinstance(expr, CondAnd) else "OR"
    return f"{_grouped(expr.left)} {op} {_grouped(expr.right)}"


def _grouped(expr: ConditionExpr) -> str:
    text = format_condition(expr)
    return f"({text})" if isinstance(expr, (CondAnd, CondOr)) else text


def format_literal(value: Scalar) -> str:
    if isinstance(value, bool):
        return "True" if value else "False"
    if isinstance(value, float):
        if value.is_integer() and abs(value) < 1e16:
            return str(int(value))
        return repr(value)
    escaped = value.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n")
    return f'"{escaped}"'
