"""Error taxonomy shared by every gateway subsystem.

Each exception carries a stable ``code`` string that surfaces unchanged in
API problem documents and CLI output, so clients can match on it.
"""

from __future__ import annotations


class EngineError(Exception):
    """Base class for all gateway errors."""

    code = "EngineError"

    def __init__(self, message: str, *, detail: str | None = None):
        super().__init__(message)
        self.message = message
        self.detail = detail

    def problem(self) -> dict:
        doc = {"code": self.code, "message": self.message}
        if self.detail is not None:
            doc["detail"] = self.detail
        return doc


# --- thing registry ---------------------------------------------------------

class DuplicateId(EngineError):
    code = "DuplicateId"


class UnknownId(EngineError):
    code = "UnknownId"


class UnknownCapability(EngineError):
    code = "UnknownCapability"


class TypeMismatch(EngineError):
    code = "TypeMismatch"


class NotWritable(EngineError):
    code = "NotWritable"


class ParseError(EngineError):
    """Malformed commissioning/ontology/config document."""

    code = "ParseError"

    def __init__(self, message: str, *, line: int | None = None, detail: str | None = None):
        super().__init__(message, detail=detail)
        self.line = line

    def problem(self) -> dict:
        doc = super().problem()
        if self.line is not None:
            doc["line"] = self.line
        return doc


# --- ontology / semantic queries --------------------------------------------

class CycleDetected(EngineError):
    code = "CycleDetected"


class DanglingEdge(EngineError):
    code = "DanglingEdge"


class QuerySyntaxError(EngineError):
    """Bad semantic query text; ``position`` is a 0-based character offset."""

    code = "SyntaxError"

    def __init__(self, message: str, *, position: int, expected: str | None = None):
        super().__init__(message, detail=expected)
        self.position = position
        self.expected = expected

    def problem(self) -> dict:
        doc = super().problem()
        doc["position"] = self.position
        return doc


class UnknownVerb(QuerySyntaxError):
    code = "UnknownVerb"


class UnknownTarget(QuerySyntaxError):
    code = "UnknownTarget"


class EmptyAggregate(EngineError):
    code = "EmptyAggregate"


class NonNumericCapability(EngineError):
    code = "NonNumericCapability"


class VerbMismatch(EngineError):
    code = "VerbMismatch"


# --- DSL frontend ------------------------------------------------------------

class SourceError(EngineError):
    """First syntax error in RuleScript or condition text; no recovery."""

    code = "SourceError"

    def __init__(self, message: str, *, line: int, column: int, expected: str | None = None):
        super().__init__(message, detail=expected)
        self.line = line
        self.column = column
        self.expected = expected

    def __str__(self) -> str:
        return f"{self.line}:{self.column}: {self.message}"

    def problem(self) -> dict:
        doc = super().problem()
        doc["line"] = self.line
        doc["column"] = self.column
        return doc


class MissingInit(EngineError):
    code = "MissingInit"


class NameMismatch(EngineError):
    code = "NameMismatch"


class InvalidComparator(SourceError):
    code = "InvalidComparator"


class EmptyCondition(SourceError):
    code = "EmptyCondition"


# --- rule runtime -------------------------------------------------------------

class RuleRuntimeError(EngineError):
    """Error raised by rule code at run time; carries rule name and source line."""

    code = "RuntimeError"

    def __init__(self, message: str, *, rule: str | None = None, line: int | None = None):
        super().__init__(message)
        self.rule = rule
        self.line = line

    def __str__(self) -> str:
        where = self.rule or "?"
        if self.line is not None:
            where += f":{self.line}"
        return f"[{where}] {self.message}"

    def problem(self) -> dict:
        doc = super().problem()
        if self.rule is not None:
            doc["rule"] = self.rule
        if self.line is not None:
            doc["line"] = self.line
        return doc


class UnknownFunction(EngineError):
    code = "UnknownFunction"


class BadTimerArgs(EngineError):
    code = "BadTimerArgs"


class UnknownRule(EngineError):
    code = "UnknownRule"


class RuleNotStarted(EngineError):
    code = "RuleNotStarted"


class CallDepthExceeded(EngineError):
    code = "CallDepthExceeded"


# --- lifecycle / packaging ----------------------------------------------------

class BadZip(EngineError):
    code = "BadZip"


class MissingEntry(BadZip):
    """Structurally valid ZIP without the required entries (a kind of bad package)."""

    code = "MissingEntry"


class SignatureInvalid(EngineError):
    code = "SignatureInvalid"


class UntrustedKey(EngineError):
    code = "UntrustedKey"


class Base64Error(EngineError):
    code = "Base64Error"


class InvalidTransition(EngineError):
    code = "InvalidTransition"


class UnknownParam(EngineError):
    code = "UnknownParam"


# --- simulation / benchmarks ---------------------------------------------------

class BadScenario(EngineError):
    code = "BadScenario"
