"""Small arithmetic expression language for problem coefficients.

Coefficients (drift, volatility, rewards, discount, terminal payoffs) are
declared as strings in config files and parsed into immutable trees.  The
grammar is deliberately closed: a fixed set of variables, a fixed set of
functions, no user definitions, no control flow.

Grammar (whitespace-insensitive)::

    expr   := term  (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' unary)?          # right-associative
    atom   := NUMBER | NAME | NAME '(' expr (',' expr)* ')' | '(' expr ')'

Precedence: '^' > unary minus > '*' '/' > '+' '-'.  There is no implicit
multiplication ("2x" is a parse error).
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np

VARIABLES = frozenset({"t", "x", "a", "y", "s", "z", "tau"})
UNARY_FUNCTIONS = ("exp", "ln", "sin", "cos", "tanh", "arctan", "sqrt", "abs")
BINARY_FUNCTIONS = ("min", "max")


class ParseError(ValueError):
    """Malformed source text.  Carries the byte offset of the offending token."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class UnknownIdentifier(ParseError):
    """A name outside the fixed variable/function set."""


class UnboundVariable(KeyError):
    """eval() was called without a binding for a variable in the tree."""


class DomainError(ArithmeticError):
    """Evaluation left the real domain (log/sqrt of a negative, NaN result)."""


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Unary:
    op: str  # 'neg' or a name from UNARY_FUNCTIONS
    arg: "Expr"


@dataclass(frozen=True)
class Binary:
    op: str  # '+', '-', '*', '/', '^', 'min', 'max'
    lhs: "Expr"
    rhs: "Expr"


Expr = Union[Const, Var, Unary, Binary]

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+(?:\.\d*)?(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),]))"
)


def _byte_offset(source: str, pos: int) -> int:
    return len(source[:pos].encode("utf-8"))


def _tokenize(source: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        if m is None:
            stripped = source[pos:].lstrip()
            if not stripped:
                break
            bad = len(source) - len(stripped)
            raise ParseError(
                f"unexpected character {source[bad]!r}", _byte_offset(source, bad)
            )
        if m.lastgroup == "num":
            tokens.append(("num", m.group("num"), _byte_offset(source, m.start("num"))))
        elif m.lastgroup == "name":
            tokens.append(("name", m.group("name"), _byte_offset(source, m.start("name"))))
        else:
            tokens.append(("op", m.group("op"), _byte_offset(source, m.start("op"))))
        pos = m.end()
    tokens.append(("end", "", _byte_offset(source, len(source))))
    return tokens


class _Parser:
    def __init__(self, source: str):
        self.tokens = _tokenize(source)
        self.i = 0

    def peek(self) -> tuple[str, str, int]:
        return self.tokens[self.i]

    def advance(self) -> tuple[str, str, int]:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect_op(self, op: str) -> None:
        kind, text, off = self.peek()
        if kind != "op" or text != op:
            raise ParseError(f"expected {op!r}, found {text or 'end of input'!r}", off)
        self.advance()

    def parse(self) -> Expr:
        node = self.expr()
        kind, text, off = self.peek()
        if kind != "end":
            raise ParseError(f"trailing input {text!r}", off)
        return node

    def expr(self) -> Expr:
        node = self.term()
        while True:
            kind, text, _ = self.peek()
            if kind == "op" and text in ("+", "-"):
                self.advance()
                node = Binary(text, node, self.term())
            else:
                return node

    def term(self) -> Expr:
        node = self.unary()
        while True:
            kind, text, _ = self.peek()
            if kind == "op" and text in ("*", "/"):
                self.advance()
                node = Binary(text, node, self.unary())
            else:
                return node

    def unary(self) -> Expr:
        kind, text, _ = self.peek()
        if kind == "op" and text == "-":
            self.advance()
            return Unary("neg", self.unary())
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        kind, text, _ = self.peek()
        if kind == "op" and text == "^":
            self.advance()
            return Binary("^", base, self.unary())
        return base

    def atom(self) -> Expr:
        kind, text, off = self.advance()
        if kind == "num":
            return Const(float(text))
        if kind == "name":
            nkind, ntext, _ = self.peek()
            if nkind == "op" and ntext == "(":
                return self.call(text, off)
            if text in VARIABLES:
                return Var(text)
            raise UnknownIdentifier(f"unknown variable {text!r}", off)
        if kind == "op" and text == "(":
            node = self.expr()
            self.expect_op(")")
            return node
        raise ParseError(
            f"expected a number, name, or '(', found {text or 'end of input'!r}", off
        )

    def call(self, name: str, off: int) -> Expr:
        if name not in UNARY_FUNCTIONS and name not in BINARY_FUNCTIONS:
            raise UnknownIdentifier(f"unknown function {name!r}", off)
        self.expect_op("(")
        args = [self.expr()]
        while True:
            kind, text, _ = self.peek()
            if kind == "op" and text == ",":
                self.advance()
                args.append(self.expr())
            else:
                break
        self.expect_op(")")
        wanted = 1 if name in UNARY_FUNCTIONS else 2
        if len(args) != wanted:
            raise ParseError(f"{name}() takes {wanted} argument(s), got {len(args)}", off)
        if wanted == 1:
            return Unary(name, args[0])
        return Binary(name, args[0], args[1])


def parse(source: str) -> Expr:
    """Parse source text into an expression tree."""
    return _Parser(source).parse()


def variables(expr: Expr) -> frozenset[str]:
    """Set of variable names appearing in the tree."""
    if isinstance(expr, Const):
        return frozenset()
    if isinstance(expr, Var):
        return frozenset({expr.name})
    if isinstance(expr, Unary):
        return variables(expr.arg)
    return variables(expr.lhs) | variables(expr.rhs)


def _check_nan(value, op: str):
    if np.any(np.isnan(value)):
        raise DomainError(f"{op} produced NaN")
    return value


_UNARY_IMPL = {
    "neg": np.negative,
    "exp": np.exp,
    "sin": np.sin,
    "cos": np.cos,
    "tanh": np.tanh,
    "arctan": np.arctan,
    "abs": np.abs,
}


def _eval(expr: Expr, bindings: Mapping[str, object]):
    if isinstance(expr, Const):
        return expr.value
    if isinstance(expr, Var):
        try:
            return bindings[expr.name]
        except KeyError:
            raise UnboundVariable(expr.name) from None
    if isinstance(expr, Unary):
        arg = _eval(expr.arg, bindings)
        if expr.op == "ln":
            if np.any(np.less(arg, 0.0)):
                raise DomainError("ln of negative argument")
            with np.errstate(divide="ignore"):
                return np.log(arg)
        if expr.op == "sqrt":
            if np.any(np.less(arg, 0.0)):
                raise DomainError("sqrt of negative argument")
            return np.sqrt(arg)
        return _check_nan(_UNARY_IMPL[expr.op](arg), expr.op)
    lhs = _eval(expr.lhs, bindings)
    rhs = _eval(expr.rhs, bindings)
    op = expr.op
    if op == "+":
        out = np.add(lhs, rhs)
    elif op == "-":
        out = np.subtract(lhs, rhs)
    elif op == "*":
        out = np.multiply(lhs, rhs)
    elif op == "/":
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.divide(lhs, rhs)
    elif op == "^":
        # non-integer exponents of negative bases are rejected rather than
        # left to platform pow semantics
        if np.any(np.logical_and(np.less(lhs, 0.0), np.not_equal(rhs, np.floor(rhs)))):
            raise DomainError("negative base with non-integer exponent")
        with np.errstate(divide="ignore"):
            out = np.power(lhs, rhs)
    elif op == "min":
        out = np.minimum(lhs, rhs)
    else:
        out = np.maximum(lhs, rhs)
    return _check_nan(out, op)


def evaluate(expr: Expr, bindings: Mapping[str, float]) -> float:
    """Evaluate the tree at the given variable bindings.

    IEEE double precision, left-to-right child order; the same tree and
    bindings always give the identical bits.  Raises UnboundVariable for a
    missing binding and DomainError instead of ever returning NaN.
    ndarray bindings broadcast elementwise and return an ndarray.
    """
    with np.errstate(all="ignore"):
        out = _eval(expr, bindings)
    if isinstance(out, np.ndarray):
        return out
    return float(out)


_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3, "^": 4}


def _prec(expr: Expr) -> int:
    if isinstance(expr, (Const, Var)):
        return 5
    if isinstance(expr, Unary):
        return 5 if expr.op != "neg" else _PREC["neg"]
    return 5 if expr.op in BINARY_FUNCTIONS else _PREC[expr.op]


def to_source(expr: Expr) -> str:
    """Pretty-print a tree; to_source . parse is idempotent on accepted input."""
    if isinstance(expr, Const):
        return repr(expr.value)
    if isinstance(expr, Var):
        return expr.name
    if isinstance(expr, Unary):
        if expr.op == "neg":
            inner = to_source(expr.arg)
            if _prec(expr.arg) < _PREC["neg"]:
                inner = f"({inner})"
            return f"-{inner}"
        return f"{expr.op}({to_source(expr.arg)})"
    if expr.op in BINARY_FUNCTIONS:
        return f"{expr.op}({to_source(expr.lhs)}, {to_source(expr.rhs)})"
    p = _PREC[expr.op]
    left = to_source(expr.lhs)
    if _prec(expr.lhs) < p or (_prec(expr.lhs) == p and expr.op == "^"):
        left = f"({left})"
    right = to_source(expr.rhs)
    # '^' is right-associative; everything else associates left, so a
    # same-precedence right child must keep its parentheses
    if _prec(expr.rhs) < p or (_prec(expr.rhs) == p and expr.op != "^"):
        right = f"({right})"
    return f"{left} {expr.op} {right}"
