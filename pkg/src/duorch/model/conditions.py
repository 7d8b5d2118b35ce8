"""Transition condition language.

Grammar (lowest to highest binding)::

    expr := or
    or   := and ("||" and)*
    and  := not ("&&" not)*
    not  := "!" not | cmp
    cmp  := term (("==" | "!=" | "<" | "<=" | ">" | ">=") term)?
    term := number | quoted-string | "true" | "false" | "$" identifier | "(" expr ")"

Numbers are compared exactly: integer literals stay ``int``, decimal literals
become :class:`decimal.Decimal`, and float variables are converted through
their shortest repr so ``0.7`` compares as the decimal ``0.7``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from decimal import Decimal
from typing import Any, Mapping, Union

__all__ = [
    "ConditionSyntaxError",
    "ConditionEvalError",
    "UnboundVariable",
    "TypeMismatch",
    "Literal",
    "Var",
    "Not",
    "Compare",
    "And",
    "Or",
    "ConditionExpr",
    "TRUE",
    "parse_condition",
    "eval_condition",
    "render",
    "variables_of",
]


class ConditionSyntaxError(ValueError):
    def __init__(self, message: str, offset: int, text: str = ""):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset
        self.text = text


class ConditionEvalError(Exception):
    pass


class UnboundVariable(ConditionEvalError):
    def __init__(self, name: str):
        super().__init__(f"unbound variable ${name}")
        self.name = name


class TypeMismatch(ConditionEvalError):
    pass


@dataclass(frozen=True)
class Literal:
    value: Any


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Not:
    operand: "ConditionExpr"


@dataclass(frozen=True)
class Compare:
    op: str
    left: "ConditionExpr"
    right: "ConditionExpr"


@dataclass(frozen=True)
class And:
    left: "ConditionExpr"
    right: "ConditionExpr"


@dataclass(frozen=True)
class Or:
    left: "ConditionExpr"
    right: "ConditionExpr"


ConditionExpr = Union[Literal, Var, Not, Compare, And, Or]
TRUE = Literal(True)

_TOKEN = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>\d+\.\d+|\d+)
  | (?P<str>'(?:[^'\\]|\\.)*'|"(?:[^"\\]|\\.)*")
  | (?P<var>\$[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>\|\||&&|==|!=|<=|>=|<|>|!|\(|\))
  | (?P<word>[A-Za-z_][A-Za-z0-9_]*)
    """,
    re.VERBOSE,
)

_CMP_OPS = ("==", "!=", "<", "<=", ">", ">=")


def _tokenize(text: str) -> list[tuple[str, Any, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise ConditionSyntaxError(f"unexpected character {text[pos]!r}", pos, text)
        kind = m.lastgroup
        raw = m.group()
        if kind == "num":
            tokens.append(("lit", Decimal(raw) if "." in raw else int(raw), pos))
        elif kind == "str":
            body = raw[1:-1]
            tokens.append(("lit", re.sub(r"\\(.)", r"\1", body), pos))
        elif kind == "var":
            tokens.append(("var", raw[1:], pos))
        elif kind == "op":
            tokens.append(("op", raw, pos))
        elif kind == "word":
            if raw == "true":
                tokens.append(("lit", True, pos))
            elif raw == "false":
                tokens.append(("lit", False, pos))
            else:
                raise ConditionSyntaxError(f"unknown word {raw!r}", pos, text)
        pos = m.end()
    tokens.append(("end", None, len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def at_op(self, *ops: str) -> bool:
        kind, value, _ = self.peek()
        return kind == "op" and value in ops

    def fail(self, message: str):
        _, _, pos = self.peek()
        raise ConditionSyntaxError(message, pos, self.text)

    def parse(self) -> ConditionExpr:
        expr = self.or_()
        if self.peek()[0] != "end":
            self.fail(f"unexpected token {self.peek()[1]!r}")
        return expr

    def or_(self):
        left = self.and_()
        while self.at_op("||"):
            self.take()
            left = Or(left, self.and_())
        return left

    def and_(self):
        left = self.not_()
        while self.at_op("&&"):
            self.take()
            left = And(left, self.not_())
        return left

    def not_(self):
        if self.at_op("!"):
            self.take()
            return Not(self.not_())
        return self.cmp()

    def cmp(self):
        left = self.term()
        if self.at_op(*_CMP_OPS):
            op = self.take()[1]
            return Compare(op, left, self.term())
        return left

    def term(self):
        kind, value, _ = self.peek()
        if kind == "lit":
            self.take()
            return Literal(value)
        if kind == "var":
            self.take()
            return Var(value)
        if kind == "op" and value == "(":
            self.take()
            inner = self.or_()
            if not self.at_op(")"):
                self.fail("expected ')'")
            self.take()
            return inner
        if kind == "end":
            self.fail("unexpected end of input")
        self.fail(f"unexpected token {value!r}")


def parse_condition(text: str) -> ConditionExpr:
    """Parse a condition string into an expression tree.

    Raises :class:`ConditionSyntaxError` carrying the character offset of the
    first offending token.
    """
    if text is None or not str(text).strip():
        return TRUE
    return _Parser(str(text)).parse()


def variables_of(expr: ConditionExpr) -> set[str]:
    if isinstance(expr, Var):
        return {expr.name}
    if isinstance(expr, Literal):
        return set()
    if isinstance(expr, Not):
        return variables_of(expr.operand)
    return variables_of(expr.left) | variables_of(expr.right)


def _is_number(v: Any) -> bool:
    return isinstance(v, (int, float, Decimal)) and not isinstance(v, bool)


def _exact(v: Any) -> Any:
    if isinstance(v, float):
        return Decimal(repr(v))
    return v


def _kind(v: Any) -> str:
    if isinstance(v, bool):
        return "boolean"
    if _is_number(v):
        return "number"
    if isinstance(v, str):
        return "string"
    if v is None:
        return "null"
    return type(v).__name__


def _compare(op: str, a: Any, b: Any) -> bool:
    if _is_number(a) and _is_number(b):
        a, b = _exact(a), _exact(b)
    elif op in ("==", "!="):
        if _kind(a) != _kind(b):
            return op == "!="
    elif _kind(a) != _kind(b) or _kind(a) not in ("number", "string"):
        raise TypeMismatch(f"cannot compare {_kind(a)} {op} {_kind(b)}")
    if op == "==":
        return a == b
    if op == "!=":
        return a != b
    if op == "<":
        return a < b
    if op == "<=":
        return a <= b
    if op == ">":
        return a > b
    return a >= b


def _truth(v: Any, where: str) -> bool:
    if not isinstance(v, bool):
        raise TypeMismatch(f"{where} expects boolean, got {_kind(v)}")
    return v


def _value(expr: ConditionExpr, env: Mapping[str, Any]) -> Any:
    if isinstance(expr, Literal):
        return expr.value
    if isinstance(expr, Var):
        return env[expr.name]
    if isinstance(expr, Not):
        return not _truth(_value(expr.operand, env), "!")
    if isinstance(expr, Compare):
        return _compare(expr.op, _value(expr.left, env), _value(expr.right, env))
    # both sides are always evaluated so type errors do not depend on data
    left = _truth(_value(expr.left, env), "&&" if isinstance(expr, And) else "||")
    right = _truth(_value(expr.right, env), "&&" if isinstance(expr, And) else "||")
    return (left and right) if isinstance(expr, And) else (left or right)


def eval_condition(expr: ConditionExpr | str, variables: Mapping[str, Any]) -> bool:
    if isinstance(expr, str):
        expr = parse_condition(expr)
    for name in sorted(variables_of(expr)):
        if name not in variables:
            raise UnboundVariable(name)
    return _truth(_value(expr, variables), "condition")


def _render_term(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return "'" + value.replace("\\", "\\\\").replace("'", "\\'") + "'"
    return str(value)


def render(expr: ConditionExpr) -> str:
    """Inverse of :func:`parse_condition` (fully parenthesised where nested)."""
    if isinstance(expr, Literal):
        return _render_term(expr.value)
    if isinstance(expr, Var):
        return "$" + expr.name
    if isinstance(expr, Not):
        return "!(" + render(expr.operand) + ")"
    if isinstance(expr, Compare):
        return f"({render(expr.left)}) {expr.op} ({render(expr.right)})"
    op = "&&" if isinstance(expr, And) else "||"
    return f"({render(expr.left)}) {op} ({render(expr.right)})"
