"""RuleScript: the minimal scripting language rules are written in.

A rule file is a sequence of function definitions, all prefixed with the
rule's name, one of which must be ``init``::

    function LightControl.init()
      engine.timer("LightControl", "Control", 500, 2000, -1)
      defaultThreshold = 600
    end

Everything the language can express is fixed here: single or two-target
assignment, local declarations, if/elseif/else, numeric for, while, calls,
and return; expressions over numbers (doubles), strings, booleans, nil,
lists (1-based indexing) and capability snapshots (string-keyed indexing).
The callable surface is closed: ``engine.*`` builtins, ``len``, and the
rule's own functions. See docs/grammar.ebnf for the full grammar.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Union

from .errors import MissingInit, NameMismatch, SourceError

ENGINE_BUILTINS = frozenset({
    "timer", "query", "getCapability", "setValue", "getRuleSetting",
    "subscribe", "call", "notify", "log",
})

KEYWORDS = frozenset({
    "function", "end", "if", "then", "elseif", "else", "for", "while", "do",
    "local", "return", "and", "or", "not", "true", "false", "nil",
})

RESERVED_NAMES = frozenset({"engine", "len"})

MAX_NESTING = 200


# --- AST ----------------------------------------------------------------------
# `line` is diagnostic only and excluded from structural equality so that
# parse(format(ast)) compares equal to ast.


@dataclass(frozen=True, slots=True)
class Num:
    value: float
    line: int = field(default=0, compare=False)


@dataclass(frozen=True, slots=True)
class Str:
    value: str
    line: int = field(default=0, compare=False)


@dataclass(frozen=True, slots=True)
class Bool:
    value: bool
    line: int = field(default=0, compare=False)


@dataclass(frozen=True, slots=True)
class Nil:
    line: int = field(default=0, compare=False)


@dataclass(frozen=True, slots=True)
class Name:
    ident: str
    line: int = field(default=0, compare=False)


@dataclass(frozen=True, slots=True)
class Index:
    obj: "Expr"
    index: "Expr"
    line: int = field(default=0, compare=False)


@dataclass(frozen=True, slots=True)
class Len:
    arg: "Expr"
    line: int = field(default=0, compare=False)


@dataclass(frozen=True, slots=True)
class Unary:
    op: str  # "not" | "-"
    operand: "Expr"
    line: int = field(default=0, compare=False)


@dataclass(frozen=True, slots=True)
class Binary:
    op: str
    left: "Expr"
    right: "Expr"
    line: int = field(default=0, compare=False)


@dataclass(frozen=True, slots=True)
class EngineCall:
    name: str
    args: tuple["Expr", ...]
    line: int = field(default=0, compare=False)


@dataclass(frozen=True, slots=True)
class LocalCall:
    name: str
    args: tuple["Expr", ...]
    line: int = field(default=0, compare=False)


Expr = Union[Num, Str, Bool, Nil, Name, Index, Len, Unary, Binary, EngineCall, LocalCall]


@dataclass(frozen=True, slots=True)
class Assign:
    target: str
    value: Expr
    extra_target: Optional[str] = None  # `a, b = f()` captures a builtin's error message
    line: int = field(default=0, compare=False)


@dataclass(frozen=True, slots=True)
class Local:
    name: str
    value: Expr
    line: int = field(default=0, compare=False)


@dataclass(frozen=True, slots=True)
class If:
    branches: tuple[tuple[Expr, tuple["Stmt", ...]], ...]
    orelse: Optional[tuple["Stmt", ...]]
    line: int = field(default=0, compare=False)


@dataclass(frozen=True, slots=True)
class NumericFor:
    var: str
    start: Expr
    limit: Expr
    step: Optional[Expr]
    body: tuple["Stmt", ...]
    line: int = field(default=0, compare=False)


@dataclass(frozen=True, slots=True)
class While:
    cond: Expr
    body: tuple["Stmt", ...]
    line: int = field(default=0, compare=False)


@dataclass(frozen=True, slots=True)
class CallStmt:
    call: Union[EngineCall, LocalCall]
    line: int = field(default=0, compare=False)


@dataclass(frozen=True, slots=True)
class Return:
    value: Optional[Expr]
    line: int = field(default=0, compare=False)


Stmt = Union[Assign, Local, If, NumericFor, While, CallStmt, Return]


@dataclass(frozen=True, slots=True)
class FuncDef:
    name: str
    params: tuple[str, ...]
    body: tuple[Stmt, ...]
    line: int = field(default=0, compare=False)


@dataclass(frozen=True, slots=True)
class RuleScriptAST:
    rule_name: str
    functions: tuple[FuncDef, ...]

    def function(self, name: str) -> FuncDef | None:
        for fn in self.functions:
            if fn.name == name:
                return fn
        return None


# --- lexer ---------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class Token:
    kind: str  # NAME KEYWORD NUMBER STRING OP EOF
    value: object
    line: int
    col: int


_TWO_CHAR_OPS = ("==", "!=", "<=", ">=")
_ONE_CHAR_OPS = "+-*/%<>=()[],."


def tokenize(source: str) -> list[Token]:
    tokens: list[Token] = []
    pos, line, col = 0, 1, 1
    n = len(source)

    def error(message: str, expected: str | None = None) -> SourceError:
        return SourceError(message, line=line, column=col, expected=expected)

    while pos < n:
        ch = source[pos]
        if ch == "\n":
            pos += 1
            line += 1
            col = 1
            continue
        if ch.isspace():
            pos += 1
            col += 1
            continue
        if source.startswith("--", pos):
            while pos < n and source[pos] != "\n":
                pos += 1
            continue
        start_line, start_col = line, col
        if ch.isalpha() or ch == "_":
            end = pos
            while end < n and (source[end].isalnum() or source[end] == "_"):
                end += 1
            word = source[pos:end]
            col += end - pos
            pos = end
            kind = "KEYWORD" if word in KEYWORDS else "NAME"
            tokens.append(Token(kind, word, start_line, start_col))
            continue
        if ch.isdigit():
            end = pos
            while end < n and source[end].isdigit():
                end += 1
            if end < n and source[end] == ".":
                end += 1
                if end >= n or not source[end].isdigit():
                    col += end - pos
                    pos = end
                    raise error("digit expected after '.'")
                while end < n and source[end].isdigit():
                    end += 1
            if end < n and source[end] in "eE":
                mark = end
                end += 1
                if end < n and source[end] in "+-":
                    end += 1
                if end >= n or not source[end].isdigit():
                    end = mark  # "10end" style: the e belongs to the next token
                else:
                    while end < n and source[end].isdigit():
                        end += 1
            text = source[pos:end]
            col += end - pos
            pos = end
            value = float(text)
            if math.isinf(value):
                raise error("number literal too large")
            tokens.append(Token("NUMBER", value, start_line, start_col))
            continue
        if ch == '"':
            pos += 1
            col += 1
            out = []
            while True:
                if pos >= n or source[pos] == "\n":
                    raise error("unterminated string")
                c = source[pos]
                pos += 1
                col += 1
                if c == '"':
                    break
                if c == "\\":
                    if pos >= n:
                        raise error("unterminated string")
                    esc = source[pos]
                    pos += 1
                    col += 1
                    if esc == '"':
                        out.append('"')
                    elif esc == "\\":
                        out.append("\\")
                    elif esc == "n":
                        out.append("\n")
                    else:
                        raise error(f"bad escape \\{esc}", expected='\\" \\\\ \\n')
                else:
                    out.append(c)
            tokens.append(Token("STRING", "".join(out), start_line, start_col))
            continue
        two = source[pos:pos + 2]
        if two in _TWO_CHAR_OPS:
            tokens.append(Token("OP", two, start_line, start_col))
            pos += 2
            col += 2
            continue
        if ch in _ONE_CHAR_OPS:
            tokens.append(Token("OP", ch, start_line, start_col))
            pos += 1
            col += 1
            continue
        raise error(f"unexpected character {ch!r}")
    tokens.append(Token("EOF", "", line, col))
    return tokens


# --- parser ---------------------------------------------------------------------


class _Parser:
    def __init__(self, source: str):
        self.tokens = tokenize(source)
        self.pos = 0
        self.depth = 0

    @property
    def tok(self) -> Token:
        return self.tokens[self.pos]

    def advance(self) -> Token:
        tok = self.tok
        if tok.kind != "EOF":
            self.pos += 1
        return tok

    def error(self, message: str, tok: Token | None = None,
              expected: str | None = None) -> SourceError:
        tok = tok or self.tok
        return SourceError(message, line=tok.line, column=tok.col, expected=expected)

    def check(self, kind: str, value=None) -> bool:
        tok = self.tok
        return tok.kind == kind and (value is None or tok.value == value)

    def accept(self, kind: str, value=None) -> Token | None:
        if self.check(kind, value):
            return self.advance()
        return None

    def expect(self, kind: str, value=None, what: str | None = None) -> Token:
        if not self.check(kind, value):
            what = what or (value if value is not None else kind)
            found = self.tok.value if self.tok.kind != "EOF" else "end of input"
            raise self.error(f"expected {what!r}, found {found!r}", expected=str(what))
        return self.advance()

    def _enter(self) -> None:
        self.depth += 1
        if self.depth > MAX_NESTING:
            raise self.error("too deeply nested")

    def _leave(self) -> None:
        self.depth -= 1

    # -- top level ------------------------------------------------------

    def parse_rule(self) -> RuleScriptAST:
        functions: list[FuncDef] = []
        rule_name: str | None = None
        while not self.check("EOF"):
            tok = self.expect("KEYWORD", "function", what="function")
            prefix = self.expect("NAME", what="rule name").value
            self.expect("OP", ".", what=".")
            fn_name = self.expect("NAME", what="function name").value
            if rule_name is None:
                rule_name = prefix
            elif prefix != rule_name:
                raise NameMismatch(
                    f"function prefix {prefix!r} does not match rule name {rule_name!r}")
            params = self.param_list()
            body = self.block()
            self.expect("KEYWORD", "end", what="end")
            for existing in functions:
                if existing.name == fn_name:
                    raise self.error(f"duplicate function {fn_name!r}", tok=tok)
            functions.append(FuncDef(name=fn_name, params=params, body=body, line=tok.line))
        if rule_name is None:
            raise MissingInit("rule file defines no functions")
        ast = RuleScriptAST(rule_name=rule_name, functions=tuple(functions))
        if ast.function("init") is None:
            raise MissingInit(f"rule {rule_name!r} has no init function")
        return ast

    def param_list(self) -> tuple[str, ...]:
        self.expect("OP", "(", what="(")
        params: list[str] = []
        if not self.check("OP", ")"):
            while True:
                name = self.expect("NAME", what="parameter name")
                self._check_bindable(name)
                params.append(name.value)
                if not self.accept("OP", ","):
                    break
        self.expect("OP", ")", what=")")
        if len(set(params)) != len(params):
            raise self.error("duplicate parameter name")
        return tuple(params)

    def _check_bindable(self, tok: Token) -> None:
        if tok.value in RESERVED_NAMES:
            raise self.error(f"{tok.value!r} is reserved", tok=tok)

    # -- statements ------------------------------------------------------

    _BLOCK_ENDS = ("end", "elseif", "else")

    def block(self) -> tuple[Stmt, ...]:
        self._enter()
        stmts: list[Stmt] = []
        while True:
            tok = self.tok
            if tok.kind == "EOF" or (tok.kind == "KEYWORD" and tok.value in self._BLOCK_ENDS):
                self._leave()
                return tuple(stmts)
            if stmts and isinstance(stmts[-1], Return):
                raise self.error("return must be the last statement in a block")
            stmts.append(self.statement())

    def statement(self) -> Stmt:
        tok = self.tok
        if tok.kind == "KEYWORD":
            if tok.value == "local":
                return self.local_stmt()
            if tok.value == "if":
                return self.if_stmt()
            if tok.value == "for":
                return self.for_stmt()
            if tok.value == "while":
                return self.while_stmt()
            if tok.value == "return":
                return self.return_stmt()
            raise self.error(f"unexpected keyword {tok.value!r}")
        if tok.kind == "NAME":
            nxt = self.tokens[self.pos + 1]
            if nxt.kind == "OP" and nxt.value in ("=", ","):
                return self.assign_stmt()
            call = self.expression()
            if not isinstance(call, (EngineCall, LocalCall)):
                raise self.error("expected a statement", tok=tok)
            return CallStmt(call=call, line=tok.line)
        raise self.error(f"expected a statement, found {tok.value!r}")

    def local_stmt(self) -> Local:
        tok = self.advance()
        name = self.expect("NAME", what="variable name")
        self._check_bindable(name)
        self.expect("OP", "=", what="=")
        return Local(name=name.value, value=self.expression(), line=tok.line)

    def assign_stmt(self) -> Assign:
        target = self.advance()
        self._check_bindable(target)
        extra = None
        if self.accept("OP", ","):
            extra_tok = self.expect("NAME", what="second target")
            self._check_bindable(extra_tok)
            extra = extra_tok.value
            if extra == target.value:
                raise self.error("assignment targets must differ", tok=extra_tok)
        self.expect("OP", "=", what="=")
        return Assign(target=target.value, value=self.expression(),
                      extra_target=extra, line=target.line)

    def if_stmt(self) -> If:
        tok = self.advance()
        branches = []
        cond = self.expression()
        self.expect("KEYWORD", "then", what="then")
        branches.append((cond, self.block()))
        orelse = None
        while True:
            if self.accept("KEYWORD", "elseif"):
                cond = self.expression()
                self.expect("KEYWORD", "then", what="then")
                branches.append((cond, self.block()))
                continue
            if self.accept("KEYWORD", "else"):
                orelse = self.block()
            self.expect("KEYWORD", "end", what="end")
            return If(branches=tuple(branches), orelse=orelse, line=tok.line)

    def for_stmt(self) -> NumericFor:
        tok = self.advance()
        var = self.expect("NAME", what="loop variable")
        self._check_bindable(var)
        self.expect("OP", "=", what="=")
        start = self.expression()
        self.expect("OP", ",", what=",")
        limit = self.expression()
        step = self.expression() if self.accept("OP", ",") else None
        self.expect("KEYWORD", "do", what="do")
        body = self.block()
        self.expect("KEYWORD", "end", what="end")
        return NumericFor(var=var.value, start=start, limit=limit, step=step,
                          body=body, line=tok.line)

    def while_stmt(self) -> While:
        tok = self.advance()
        cond = self.expression()
        self.expect("KEYWORD", "do", what="do")
        body = self.block()
        self.expect("KEYWORD", "end", what="end")
        return While(cond=cond, body=body, line=tok.line)

    def return_stmt(self) -> Return:
        tok = self.advance()
        value = None
        if not (self.tok.kind == "EOF"
                or (self.tok.kind == "KEYWORD" and self.tok.value in self._BLOCK_ENDS)):
            value = self.expression()
        return Return(value=value, line=tok.line)

    # -- expressions -------------------------------------------------------
    # precedence: or < and < comparison < + - < * / % < unary < postfix

    def expression(self) -> Expr:
        self._enter()
        try:
            return self.or_expr()
        finally:
            self._leave()

    def or_expr(self) -> Expr:
        left = self.and_expr()
        while self.check("KEYWORD", "or"):
            tok = self.advance()
            left = Binary("or", left, self.and_expr(), line=tok.line)
        return left

    def and_expr(self) -> Expr:
        left = self.cmp_expr()
        while self.check("KEYWORD", "and"):
            tok = self.advance()
            left = Binary("and", left, self.cmp_expr(), line=tok.line)
        return left

    def cmp_expr(self) -> Expr:
        left = self.add_expr()
        while self.tok.kind == "OP" and self.tok.value in ("==", "!=", "<", "<=", ">", ">="):
            tok = self.advance()
            left = Binary(tok.value, left, self.add_expr(), line=tok.line)
        return left

    def add_expr(self) -> Expr:
        left = self.mul_expr()
        while self.tok.kind == "OP" and self.tok.value in ("+", "-"):
            tok = self.advance()
            left = Binary(tok.value, left, self.mul_expr(), line=tok.line)
        return left

    def mul_expr(self) -> Expr:
        left = self.unary_expr()
        while self.tok.kind == "OP" and self.tok.value in ("*", "/", "%"):
            tok = self.advance()
            left = Binary(tok.value, left, self.unary_expr(), line=tok.line)
        return left

    def unary_expr(self) -> Expr:
        self._enter()
        try:
            if self.check("KEYWORD", "not"):
                tok = self.advance()
                return Unary("not", self.unary_expr(), line=tok.line)
            if self.check("OP", "-"):
                tok = self.advance()
                return Unary("-", self.unary_expr(), line=tok.line)
            return self.postfix_expr()
        finally:
            self._leave()

    def postfix_expr(self) -> Expr:
        expr = self.primary()
        while True:
            if self.check("OP", "["):
                tok = self.advance()
                index = self.expression()
                self.expect("OP", "]", what="]")
                expr = Index(obj=expr, index=index, line=tok.line)
                continue
            if self.check("OP", "("):
                raise self.error("only engine builtins, len, and the rule's own "
                                 "functions can be called")
            return expr

    def primary(self) -> Expr:
        tok = self.tok
        if tok.kind == "NUMBER":
            self.advance()
            return Num(value=tok.value, line=tok.line)
        if tok.kind == "STRING":
            self.advance()
            return Str(value=tok.value, line=tok.line)
        if tok.kind == "KEYWORD":
            if tok.value == "true":
                self.advance()
                return Bool(value=True, line=tok.line)
            if tok.value == "false":
                self.advance()
                return Bool(value=False, line=tok.line)
            if tok.value == "nil":
                self.advance()
                return Nil(line=tok.line)
            raise self.error(f"unexpected keyword {tok.value!r}")
        if tok.kind == "OP" and tok.value == "(":
            self.advance()
            self._enter()
            try:
                inner = self.expression()
            finally:
                self._leave()
            self.expect("OP", ")", what=")")
            return inner
        if tok.kind == "NAME":
            if tok.value == "engine":
                self.advance()
                self.expect("OP", ".", what=".")
                name_tok = self.expect("NAME", what="builtin name")
                if name_tok.value not in ENGINE_BUILTINS:
                    raise self.error(f"unknown builtin engine.{name_tok.value}",
                                     tok=name_tok,
                                     expected="|".join(sorted(ENGINE_BUILTINS)))
                return EngineCall(name=name_tok.value, args=self.call_args(),
                                  line=tok.line)
            if tok.value == "len":
                self.advance()
                self.expect("OP", "(", what="(")
                arg = self.expression()
                self.expect("OP", ")", what=")")
                return Len(arg=arg, line=tok.line)
            self.advance()
            if self.check("OP", "("):
                return LocalCall(name=tok.value, args=self.call_args(), line=tok.line)
            if self.check("OP", "."):
                raise self.error("'.' is only valid after 'engine'")
            return Name(ident=tok.value, line=tok.line)
        raise self.error(f"expected an expression, found {tok.value!r}"
                         if tok.kind != "EOF" else "unexpected end of input")

    def call_args(self) -> tuple[Expr, ...]:
        self.expect("OP", "(", what="(")
        args: list[Expr] = []
        if not self.check("OP", ")"):
            while True:
                args.append(self.expression())
                if not self.accept("OP", ","):
                    break
        self.expect("OP", ")", what=")")
        return tuple(args)


def parse_rule(source: str) -> RuleScriptAST:
    """Parse a rule file; raises SourceError / MissingInit / NameMismatch."""
    return _Parser(source).parse_rule()


def parse_expression(source: str) -> Expr:
    """Parse a single expression (testing hook)."""
    parser = _Parser(source)
    expr = parser.expression()
    if not parser.check("EOF"):
        raise parser.error(f"unexpected {parser.tok.value!r} after expression")
    return expr


# --- formatter --------------------------------------------------------------------

_PRECEDENCE = {"or": 1, "and": 2, "==": 3, "!=": 3, "<": 3, "<=": 3, ">": 3, ">=": 3,
               "+": 4, "-": 4, "*": 5, "/": 5, "%": 5}
_UNARY_PRECEDENCE = 6
_POSTFIX_PRECEDENCE = 7
_ATOM_PRECEDENCE = 8


def format_number(value: float) -> str:
    if value.is_integer() and abs(value) < 1e16:
        return str(int(value))
    return repr(value)


def format_string(value: str) -> str:
    escaped = value.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n")
    return f'"{escaped}"'


def _precedence(expr: Expr) -> int:
    if isinstance(expr, Binary):
        return _PRECEDENCE[expr.op]
    if isinstance(expr, Unary):
        return _UNARY_PRECEDENCE
    if isinstance(expr, Index):
        return _POSTFIX_PRECEDENCE
    return _ATOM_PRECEDENCE


def format_expr(expr: Expr) -> str:
    if isinstance(expr, Num):
        return format_number(expr.value)
    if isinstance(expr, Str):
        return format_string(expr.value)
    if isinstance(expr, Bool):
        return "true" if expr.value else "false"
    if isinstance(expr, Nil):
        return "nil"
    if isinstance(expr, Name):
        return expr.ident
    if isinstance(expr, Len):
        return f"len({format_expr(expr.arg)})"
    if isinstance(expr, Index):
        obj = format_expr(expr.obj)
        if _precedence(expr.obj) < _POSTFIX_PRECEDENCE:
            obj = f"({obj})"
        return f"{obj}[{format_expr(expr.index)}]"
    if isinstance(expr, EngineCall):
        args = ", ".join(format_expr(a) for a in expr.args)
        return f"engine.{expr.name}({args})"
    if isinstance(expr, LocalCall):
        args = ", ".join(format_expr(a) for a in expr.args)
        return f"{expr.name}({args})"
    if isinstance(expr, Unary):
        operand = format_expr(expr.operand)
        if _precedence(expr.operand) <= _UNARY_PRECEDENCE:
            operand = f"({operand})"
        return f"not {operand}" if expr.op == "not" else f"-{operand}"
    assert isinstance(expr, Binary)
    prec = _PRECEDENCE[expr.op]
    left = format_expr(expr.left)
    if _precedence(expr.left) < prec:
        left = f"({left})"
    right = format_expr(expr.right)
    if _precedence(expr.right) <= prec:
        right = f"({right})"
    return f"{left} {expr.op} {right}"


def _format_block(stmts: tuple[Stmt, ...], indent: int, out: list[str]) -> None:
    pad = "  " * indent
    for stmt in stmts:
        if isinstance(stmt, Local):
            out.append(f"{pad}local {stmt.name} = {format_expr(stmt.value)}")
        elif isinstance(stmt, Assign):
            targets = stmt.target if stmt.extra_target is None \
                else f"{stmt.target}, {stmt.extra_target}"
            out.append(f"{pad}{targets} = {format_expr(stmt.value)}")
        elif isinstance(stmt, If):
            keyword = "if"
            for cond, body in stmt.branches:
                out.append(f"{pad}{keyword} {format_expr(cond)} then")
                _format_block(body, indent + 1, out)
                keyword = "elseif"
            if stmt.orelse is not None:
                out.append(f"{pad}else")
                _format_block(stmt.orelse, indent + 1, out)
            out.append(f"{pad}end")
        elif isinstance(stmt, NumericFor):
            head = f"{pad}for {stmt.var} = {format_expr(stmt.start)}, {format_expr(stmt.limit)}"
            if stmt.step is not None:
                head += f", {format_expr(stmt.step)}"
            out.append(head + " do")
            _format_block(stmt.body, indent + 1, out)
            out.append(f"{pad}end")
        elif isinstance(stmt, While):
            out.append(f"{pad}while {format_expr(stmt.cond)} do")
            _format_block(stmt.body, indent + 1, out)
            out.append(f"{pad}end")
        elif isinstance(stmt, CallStmt):
            out.append(f"{pad}{format_expr(stmt.call)}")
        else:
            assert isinstance(stmt, Return)
            if stmt.value is None:
                out.append(f"{pad}return")
            else:
                out.append(f"{pad}return {format_expr(stmt.value)}")


def format_ast(ast: RuleScriptAST) -> str:
    """Canonical source text; parse(format_ast(ast)) is structurally equal to ast."""
    out: list[str] = []
    for fn in ast.functions:
        params = ", ".join(fn.params)
        out.append(f"function {ast.rule_name}.{fn.name}({params})")
        _format_block(fn.body, 1, out)
        out.append("end")
        out.append("")
    return "\n".join(out)
