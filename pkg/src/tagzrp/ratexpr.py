"""A small expression language for rate functions g(k).

Grammar (whitespace is ignored)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' unary)?
    atom   := NUMBER | 'k' | '(' expr ')'
            | ('min' | 'max') '(' expr ',' expr ')'
            | 'ind' '(' 'k' '>=' NUMBER ')'

so ``^`` binds tighter than unary minus, which binds tighter than ``*``
and ``/``; ``^`` is right-associative, everything else left-associative.
In a product, an ``ind(...)`` factor is evaluated first and the other
factor is skipped when the indicator is zero, which makes guarded forms
such as ``ind(k>=1)*(1/k)`` total.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Union

from .errors import ArityError, DomainError, RateSyntaxError, UnknownIdentifier

MAX_LENGTH = 4096


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    pass


@dataclass(frozen=True)
class Neg:
    operand: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple


@dataclass(frozen=True)
class Ind:
    threshold: float


Node = Union[Num, Var, Neg, BinOp, Call, Ind]

_TOKEN = re.compile(
    r"\s*(?:(?P<num>\d+\.?\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>>=|≥|[-+*/^(),]))"
)
_FUNCS = {"min": 2, "max": 2}


def _tokenize(text):
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            col = pos + len(text[pos:]) - len(text[pos:].lstrip())
            raise RateSyntaxError(f"unexpected character {text[col]!r}", col)
        start = m.start(m.lastgroup)
        kind = m.lastgroup
        value = m.group(kind)
        if value == "≥":
            value = ">="
        tokens.append((kind, value, start))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text):
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.toks[self.i]

    def take(self):
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        kind, v, pos = self.take()
        if v != value:
            found = "end of input" if kind == "end" else repr(v)
            raise RateSyntaxError(f"expected {value!r}, found {found}", pos)

    def parse(self):
        node = self.expr()
        kind, v, pos = self.peek()
        if kind != "end":
            raise RateSyntaxError(f"unexpected {v!r}", pos)
        return node

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self):
        if self.peek()[1] == "-" and self.peek()[0] == "op":
            self.take()
            return Neg(self.unary())
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[1] == "^":
            self.take()
            return BinOp("^", base, self.unary())
        return base

    def atom(self):
        kind, v, pos = self.take()
        if kind == "num":
            return Num(float(v))
        if kind == "name":
            if v == "k":
                return Var()
            if v == "ind":
                return self.indicator(pos)
            if v in _FUNCS:
                return self.call(v, pos)
            raise UnknownIdentifier(f"unknown identifier {v!r}", pos)
        if v == "(":
            node = self.expr()
            self.expect(")")
            return node
        found = "end of input" if kind == "end" else repr(v)
        raise RateSyntaxError(f"unexpected {found}", pos)

    def call(self, name, pos):
        self.expect("(")
        args = [self.expr()]
        while self.peek()[1] == ",":
            self.take()
            args.append(self.expr())
        self.expect(")")
        if len(args) != _FUNCS[name]:
            raise ArityError(
                f"{name} takes {_FUNCS[name]} arguments, got {len(args)}", pos
            )
        return Call(name, tuple(args))

    def indicator(self, pos):
        self.expect("(")
        kind, v, p = self.take()
        if v != "k":
            raise RateSyntaxError("indicator condition must read 'k>=c'", p)
        self.expect(">=")
        kind, v, p = self.take()
        if kind != "num":
            raise RateSyntaxError("indicator threshold must be a number", p)
        if self.peek()[1] == ",":
            raise ArityError("ind takes 1 argument", pos)
        self.expect(")")
        return Ind(float(v))


def _fmt_num(x):
    r = repr(x)
    return r[:-2] if r.endswith(".0") else r


def to_text(node: Node) -> str:
    """Print an AST back to source; ``parse_rate_expr(to_text(a)).ast == a``."""
    if isinstance(node, Num):
        return _fmt_num(node.value)
    if isinstance(node, Var):
        return "k"
    if isinstance(node, Ind):
        return f"ind(k>={_fmt_num(node.threshold)})"
    if isinstance(node, Neg):
        return f"(-{to_text(node.operand)})"
    if isinstance(node, Call):
        return f"{node.name}({', '.join(to_text(a) for a in node.args)})"
    return f"({to_text(node.left)} {node.op} {to_text(node.right)})"


def _factors(node):
    if isinstance(node, BinOp) and node.op == "*":
        return _factors(node.left) + _factors(node.right)
    return [node]


def _zero_indicator(node, k):
    # any ind(...) factor of the product chain that is off
    return any(
        isinstance(f, Ind) and k < f.threshold for f in _factors(node)
    )


def _eval(node, k):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        return float(k)
    if isinstance(node, Ind):
        return 1.0 if k >= node.threshold else 0.0
    if isinstance(node, Neg):
        return -_eval(node.operand, k)
    if isinstance(node, Call):
        a, b = (_eval(arg, k) for arg in node.args)
        return min(a, b) if node.name == "min" else max(a, b)
    op = node.op
    if op == "*":
        if _zero_indicator(node, k):
            return 0.0
        return _eval(node.left, k) * _eval(node.right, k)
    a = _eval(node.left, k)
    b = _eval(node.right, k)
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "/":
        if b == 0.0:
            raise DomainError(f"division by zero at k={k}")
        return a / b
    try:
        return math.pow(a, b)
    except (ValueError, ZeroDivisionError):
        raise DomainError(f"{a}^{b} undefined at k={k}") from None
    except OverflowError:
        raise DomainError(f"{a}^{b} overflows at k={k}") from None


@dataclass(frozen=True)
class RateExpr:
    """A parsed rate expression; call it with an occupancy ``k``."""

    text: str
    ast: Node
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def raw(self, k: int) -> float:
        """Evaluate without the sign check (still rejects division by zero)."""
        try:
            return self._cache[k]
        except KeyError:
            pass
        value = _eval(self.ast, k)
        self._cache[k] = value
        return value

    def __call__(self, k: int) -> float:
        return eval_rate(self, k)


def parse_rate_expr(text: str) -> RateExpr:
    if not text or not text.strip():
        raise RateSyntaxError("empty rate expression", 0)
    if len(text) > MAX_LENGTH:
        raise RateSyntaxError(f"rate expression longer than {MAX_LENGTH}", MAX_LENGTH)
    return RateExpr(text, _Parser(text).parse())


def eval_rate(expr: RateExpr, k: int) -> float:
    if k < 0:
        raise DomainError(f"occupancy must be nonnegative, got {k}")
    value = expr.raw(k)
    if not math.isfinite(value):
        raise DomainError(f"non-finite rate {value} at k={k}")
    if value < 0.0:
        raise DomainError(f"negative rate {value} at k={k}")
    return value
