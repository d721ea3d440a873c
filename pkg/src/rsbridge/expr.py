"""A small expression language for model coefficients.

Expressions are parsed with a Pratt parser into an immutable AST and
evaluated on scalars or numpy arrays.  The grammar is documented in
``docs/coefficients.md``.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Mapping, Union

import numpy as np

from .errors import ConfigError, DomainError, ExpressionSyntaxError

Value = Union[float, np.ndarray]

FUNCTIONS: dict[str, int] = {
    "exp": 1,
    "log": 1,
    "sin": 1,
    "cos": 1,
    "tanh": 1,
    "sqrt": 1,
    "abs": 1,
    "min": 2,
    "max": 2,
}


# ---------------------------------------------------------------- AST nodes


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


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
    func: str
    args: tuple["Node", ...]


Node = Union[Num, Var, Neg, BinOp, Call]


# ---------------------------------------------------------------- tokenizer

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),]))"
)


@dataclass(frozen=True)
class _Token:
    kind: str  # "num", "name", "op", "end"
    text: str
    pos: int


def _tokenize(source: str) -> list[_Token]:
    tokens = []
    pos = 0
    n = len(source)
    while pos < n:
        if source[pos:].strip() == "":
            break
        m = _TOKEN_RE.match(source, pos)
        if m is None or m.end() == pos:
            bad = pos + (len(source[pos:]) - len(source[pos:].lstrip()))
            raise ExpressionSyntaxError(f"unexpected character {source[bad]!r}", bad)
        kind = m.lastgroup
        tokens.append(_Token(kind, m.group(kind), m.start(kind)))
        pos = m.end()
    tokens.append(_Token("end", "", len(source)))
    return tokens


# ---------------------------------------------------------------- parser

_BINARY_POWER = {"+": 10, "-": 10, "*": 20, "/": 20, "^": 40}
_UNARY_POWER = 30


class _Parser:
    def __init__(self, source: str):
        self.tokens = _tokenize(source)
        self.index = 0

    def peek(self) -> _Token:
        return self.tokens[self.index]

    def advance(self) -> _Token:
        tok = self.tokens[self.index]
        self.index += 1
        return tok

    def expect(self, text: str) -> _Token:
        tok = self.advance()
        if tok.text != text:
            found = tok.text or "end of input"
            raise ExpressionSyntaxError(f"expected {text!r}, found {found!r}", tok.pos)
        return tok

    def parse(self) -> Node:
        node = self.expression(0)
        tok = self.peek()
        if tok.kind != "end":
            raise ExpressionSyntaxError(f"unexpected token {tok.text!r}", tok.pos)
        return node

    def expression(self, min_power: int) -> Node:
        left = self.prefix()
        while True:
            tok = self.peek()
            if tok.kind != "op" or tok.text not in _BINARY_POWER:
                return left
            power = _BINARY_POWER[tok.text]
            if power <= min_power:
                return left
            self.advance()
            if tok.text == "^":
                # right associative, and the exponent may carry a unary sign
                right = self.expression(_UNARY_POWER - 1)
            else:
                right = self.expression(power)
            left = BinOp(tok.text, left, right)

    def prefix(self) -> Node:
        tok = self.advance()
        if tok.kind == "num":
            value = float(tok.text)
            if not math.isfinite(value):
                raise ExpressionSyntaxError("number out of range", tok.pos)
            return Num(value)
        if tok.kind == "name":
            if self.peek().text == "(":
                return self.call(tok)
            if tok.text in FUNCTIONS:
                raise ExpressionSyntaxError(f"function {tok.text!r} needs arguments", tok.pos)
            return Var(tok.text)
        if tok.text == "(":
            node = self.expression(0)
            self.expect(")")
            return node
        if tok.text == "-":
            return Neg(self.expression(_UNARY_POWER))
        if tok.text == "+":
            return self.expression(_UNARY_POWER)
        found = tok.text or "end of input"
        raise ExpressionSyntaxError(f"unexpected {found!r}", tok.pos)

    def call(self, name_tok: _Token) -> Node:
        if name_tok.text not in FUNCTIONS:
            raise ExpressionSyntaxError(f"unknown function {name_tok.text!r}", name_tok.pos)
        self.expect("(")
        args = [self.expression(0)]
        while self.peek().text == ",":
            self.advance()
            args.append(self.expression(0))
        self.expect(")")
        arity = FUNCTIONS[name_tok.text]
        if len(args) != arity:
            raise ExpressionSyntaxError(
                f"{name_tok.text} takes {arity} argument(s), got {len(args)}", name_tok.pos
            )
        return Call(name_tok.text, tuple(args))


# ---------------------------------------------------------------- printing

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 4}


def _prec(node: Node) -> int:
    if isinstance(node, BinOp):
        return _PREC[node.op]
    if isinstance(node, Neg):
        return 3
    return 5


def pretty(node: Node) -> str:
    """Render an AST with the fewest parentheses that re-parse to the same tree."""
    if isinstance(node, Num):
        return repr(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Call):
        return f"{node.func}({', '.join(pretty(a) for a in node.args)})"
    if isinstance(node, Neg):
        inner = pretty(node.operand)
        return f"-{inner}" if _prec(node.operand) >= 3 else f"-({inner})"
    p = _PREC[node.op]
    left = pretty(node.left)
    right = pretty(node.right)
    if node.op == "^":
        if _prec(node.left) <= p:
            left = f"({left})"
        if _prec(node.right) < 3:
            right = f"({right})"
    else:
        if _prec(node.left) < p:
            left = f"({left})"
        if _prec(node.right) <= p:
            right = f"({right})"
    return f"{left} {node.op} {right}"


# ---------------------------------------------------------------- evaluation


def _check(value: Value, what: str) -> Value:
    if not np.all(np.isfinite(value)):
        raise DomainError(f"non-finite result in {what}")
    return value


def _compile(node: Node) -> Callable[[Mapping[str, Value]], Value]:
    if isinstance(node, Num):
        v = node.value
        return lambda env: v
    if isinstance(node, Var):
        name = node.name

        def var(env):
            try:
                return env[name]
            except KeyError:
                raise DomainError(f"variable {name!r} not bound") from None

        return var
    if isinstance(node, Neg):
        f = _compile(node.operand)
        return lambda env: -f(env)
    if isinstance(node, Call):
        fs = [_compile(a) for a in node.args]
        fn = node.func
        if fn == "log":
            def log(env):
                a = fs[0](env)
                if np.any(np.asarray(a) <= 0):
                    raise DomainError("log of a nonpositive number")
                return np.log(a)
            return log
        if fn == "sqrt":
            def sqrt(env):
                a = fs[0](env)
                if np.any(np.asarray(a) < 0):
                    raise DomainError("sqrt of a negative number")
                return np.sqrt(a)
            return sqrt
        if fn == "exp":
            def exp(env):
                with np.errstate(over="ignore"):
                    return _check(np.exp(fs[0](env)), "exp")
            return exp
        if fn == "min":
            return lambda env: np.minimum(fs[0](env), fs[1](env))
        if fn == "max":
            return lambda env: np.maximum(fs[0](env), fs[1](env))
        ufunc = {"sin": np.sin, "cos": np.cos, "tanh": np.tanh, "abs": np.abs}[fn]
        return lambda env: ufunc(fs[0](env))
    fl = _compile(node.left)
    fr = _compile(node.right)
    if node.op == "+":
        return lambda env: fl(env) + fr(env)
    if node.op == "-":
        return lambda env: fl(env) - fr(env)
    if node.op == "*":
        return lambda env: fl(env) * fr(env)
    if node.op == "/":
        def div(env):
            den = fr(env)
            if np.any(np.asarray(den) == 0):
                raise DomainError("division by zero")
            return fl(env) / den
        return div

    def power(env):
        with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
            return _check(np.power(np.asarray(fl(env), dtype=float), fr(env)), "power")

    return power


def free_variables(node: Node) -> frozenset[str]:
    if isinstance(node, Var):
        return frozenset([node.name])
    if isinstance(node, Num):
        return frozenset()
    if isinstance(node, Neg):
        return free_variables(node.operand)
    if isinstance(node, Call):
        return frozenset().union(*(free_variables(a) for a in node.args))
    return free_variables(node.left) | free_variables(node.right)


def substitute(node: Node, values: Mapping[str, float]) -> Node:
    """Replace variables named in ``values`` by numeric literals."""
    if isinstance(node, Var):
        return Num(float(values[node.name])) if node.name in values else node
    if isinstance(node, Num):
        return node
    if isinstance(node, Neg):
        return Neg(substitute(node.operand, values))
    if isinstance(node, Call):
        return Call(node.func, tuple(substitute(a, values) for a in node.args))
    return BinOp(node.op, substitute(node.left, values), substitute(node.right, values))


class CoefficientExpr:
    """A parsed coefficient expression.

    Parameters
    ----------
    source : str
        Text of the expression.
    ast : Node
        Parsed tree.

    Instances are immutable and evaluation is pure, so they may be shared
    between threads.
    """

    __slots__ = ("source", "ast", "_fn", "_vars")

    def __init__(self, source: str, ast: Node):
        object.__setattr__(self, "source", source)
        object.__setattr__(self, "ast", ast)
        object.__setattr__(self, "_fn", _compile(ast))
        object.__setattr__(self, "_vars", free_variables(ast))

    def __setattr__(self, name, value):
        raise AttributeError("CoefficientExpr is immutable")

    def __repr__(self) -> str:
        return f"CoefficientExpr({pretty(self.ast)!r})"

    def __str__(self) -> str:
        return pretty(self.ast)

    def __eq__(self, other) -> bool:
        return isinstance(other, CoefficientExpr) and self.ast == other.ast

    def __hash__(self) -> int:
        return hash(self.ast)

    @property
    def variables(self) -> frozenset[str]:
        return self._vars

    @property
    def is_constant(self) -> bool:
        return not self._vars

    def depends_on(self, *names: str) -> bool:
        return any(n in self._vars for n in names)

    def evaluate(self, env: Mapping[str, Value] | None = None, **kwargs: Value) -> Value:
        """Evaluate with variables taken from ``env`` and keyword arguments.

        Arrays broadcast with numpy rules.  Raises :class:`DomainError` on log
        of a nonpositive number, division by zero or a non-finite result.
        """
        scope = dict(env or {})
        scope.update(kwargs)
        return self._fn(scope)

    def constant_value(self) -> float:
        if not self.is_constant:
            raise ValueError(f"expression {self} is not constant")
        return float(self._fn({}))

    def bind(self, params: Mapping[str, float]) -> "CoefficientExpr":
        """Return a copy with the named parameters replaced by numbers."""
        if not params or not (self._vars & set(params)):
            return self
        return CoefficientExpr(self.source, substitute(self.ast, params))


def parse_coefficient(
    source: str,
    d: int | None = None,
    jump_dim: int = 0,
    params: Mapping[str, float] | None = None,
    extra: tuple[str, ...] = (),
) -> CoefficientExpr:
    """Parse ``source`` into a :class:`CoefficientExpr`.

    Parameters
    ----------
    source : str
        Expression text, e.g. ``"exp(-t)*x1"``.
    d : int, optional
        Spatial dimension.  When given, identifiers are restricted to
        ``t``, ``x1..xd``, ``z1..z{jump_dim}``, the names in ``params`` and
        ``extra``.  When omitted any identifier is accepted.
    params : mapping, optional
        Named parameters, substituted into the tree after parsing.

    Raises
    ------
    ExpressionSyntaxError
        On a syntax error (the message carries the character position).
    ConfigError
        On an identifier outside the declared set.
    """
    if not isinstance(source, str) or not source.strip():
        raise ExpressionSyntaxError("empty expression", 0)
    ast = _Parser(source).parse()
    expr = CoefficientExpr(source, ast)
    params = dict(params or {})
    if d is not None:
        allowed = {"t", *(f"x{k + 1}" for k in range(d)), *(f"z{k + 1}" for k in range(jump_dim))}
        allowed |= set(params) | set(extra)
        unknown = expr.variables - allowed
        if unknown:
            raise ConfigError(f"unknown identifier(s) {sorted(unknown)} in {source!r}")
    return expr.bind(params)


def constant(value: float) -> CoefficientExpr:
    """Expression for a numeric constant (negative values become a negation node)."""
    value = float(value)
    node: Node = Num(abs(value))
    if value < 0 or (value == 0 and math.copysign(1.0, value) < 0):
        node = Neg(node)
    return CoefficientExpr(repr(value), node)
