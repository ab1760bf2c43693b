"""Arithmetic expressions over ``x1..x4`` and ``t``, and form-valued expressions.

Grammar::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := ('+' | '-') unary | power
    power  := atom ('^' unary)?
    atom   := NUMBER | NAME | FUNC '(' expr ')' | '(' expr ')'

with ``FUNC`` one of sin, cos, exp, log, sqrt, abs. Expressions compile to
numpy evaluators and can be differentiated analytically, which lets a stream
form given as text produce its exact exterior derivative.

A form expression is a sum of terms each carrying exactly one basis symbol
``dxI`` (``dx4`` is dx^4, ``dx34`` is dx^3 ^ dx^4), e.g. ``"x3*dx4"`` or
``"sin(x1)*dx12 - x2*dx34"``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, PreconditionError
from .forms import DiscreteForm, permutation_sign

__all__ = ["Expr", "FormExpression", "ExpressionSyntaxError", "parse_expression", "parse_form"]

FUNCTIONS = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "abs": np.abs,
}
CONSTANTS = {"pi": np.pi}
VARIABLES = ("x1", "x2", "x3", "x4", "t")
_DX = re.compile(r"dx([1-4]+)$")


class ExpressionSyntaxError(ConfigError):
    def __init__(self, message, position, expected):
        super().__init__(f"{message} at position {position} (expected {expected})")
        self.position = position
        self.expected = expected


# -- AST ------------------------------------------------------------------------


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    arg: object


@dataclass(frozen=True)
class Bin:
    op: str
    left: object
    right: object


@dataclass(frozen=True)
class Call:
    fn: str
    arg: object


ZERO, ONE = Num(0.0), Num(1.0)


def _add(a, b):
    if a == ZERO:
        return b
    if b == ZERO:
        return a
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value + b.value)
    return Bin("+", a, b)


def _sub(a, b):
    if b == ZERO:
        return a
    if a == ZERO:
        return _neg(b)
    return Bin("-", a, b)


def _neg(a):
    if isinstance(a, Num):
        return Num(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def _mul(a, b):
    if a == ZERO or b == ZERO:
        return ZERO
    if a == ONE:
        return b
    if b == ONE:
        return a
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value * b.value)
    return Bin("*", a, b)


def _div(a, b):
    if a == ZERO:
        return ZERO
    if b == ONE:
        return a
    return Bin("/", a, b)


def _pow(a, b):
    if b == ONE:
        return a
    if b == ZERO:
        return ONE
    return Bin("^", a, b)


def _evaluate(node, env):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        if node.name in CONSTANTS:
            return CONSTANTS[node.name]
        try:
            return env[node.name]
        except KeyError:
            raise ConfigError(f"variable {node.name!r} is not bound") from None
    if isinstance(node, Neg):
        return -_evaluate(node.arg, env)
    if isinstance(node, Call):
        return FUNCTIONS[node.fn](_evaluate(node.arg, env))
    a, b = _evaluate(node.left, env), _evaluate(node.right, env)
    if node.op == "+":
        return a + b
    if node.op == "-":
        return a - b
    if node.op == "*":
        return a * b
    if node.op == "/":
        return a / b
    return np.power(a, b)


def _diff(node, var):
    if isinstance(node, Num):
        return ZERO
    if isinstance(node, Var):
        return ONE if node.name == var else ZERO
    if isinstance(node, Neg):
        return _neg(_diff(node.arg, var))
    if isinstance(node, Call):
        inner = _diff(node.arg, var)
        if inner == ZERO:
            return ZERO
        u = node.arg
        outer = {
            "sin": lambda: Call("cos", u),
            "cos": lambda: _neg(Call("sin", u)),
            "exp": lambda: node,
            "log": lambda: _div(ONE, u),
            "sqrt": lambda: _div(Num(0.5), node),
            "abs": lambda: _div(u, node),
        }[node.fn]()
        return _mul(outer, inner)
    a, b = node.left, node.right
    da, db = _diff(a, var), _diff(b, var)
    if node.op == "+":
        return _add(da, db)
    if node.op == "-":
        return _sub(da, db)
    if node.op == "*":
        return _add(_mul(da, b), _mul(a, db))
    if node.op == "/":
        return _sub(_div(da, b), _div(_mul(a, db), _mul(b, b)))
    # a^b = exp(b log a)
    if db == ZERO:
        return _mul(_mul(b, _pow(a, _sub(b, ONE))), da)
    return _mul(node, _add(_mul(db, Call("log", a)), _div(_mul(b, da), a)))


def _free(node):
    if isinstance(node, Var):
        return set() if node.name in CONSTANTS else {node.name}
    if isinstance(node, Num):
        return set()
    if isinstance(node, (Neg, Call)):
        return _free(node.arg)
    return _free(node.left) | _free(node.right)


# -- parser -------------------------------------------------------------------------

_TOKEN = re.compile(r"\s*(?:(?P<num>\d+\.?\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_]\w*)|(?P<op>[-+*/^()]))")


def _tokenize(src):
    tokens, pos = [], 0
    while pos < len(src):
        if src[pos:].strip() == "":
            break
        m = _TOKEN.match(src, pos)
        if not m:
            stripped = len(src) - len(src[pos:].lstrip())
            raise ExpressionSyntaxError(f"unexpected character {src[stripped]!r}", stripped, "number, name, operator or parenthesis")
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", len(src)))
    return tokens


class _Parser:
    def __init__(self, src, allow_dx):
        self.src = src
        self.tokens = _tokenize(src)
        self.i = 0
        self.allow_dx = allow_dx

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        kind, text, pos = self.take()
        if text != value:
            raise ExpressionSyntaxError(f"unexpected {text or 'end of input'!r}", pos, repr(value))

    def parse(self):
        node = self.expr()
        kind, text, pos = self.peek()
        if kind != "end":
            raise ExpressionSyntaxError(f"unexpected {text!r}", pos, "operator or end of input")
        return node

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-"):
            op = self.take()[1]
            node = Bin(op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek()[1] in ("*", "/"):
            op = self.take()[1]
            node = Bin(op, node, self.unary())
        return node

    def unary(self):
        if self.peek()[1] in ("+", "-"):
            op = self.take()[1]
            arg = self.unary()
            return Neg(arg) if op == "-" else arg
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[1] == "^":
            self.take()
            return Bin("^", base, self.unary())
        return base

    def atom(self):
        kind, text, pos = self.take()
        if kind == "num":
            return Num(float(text))
        if kind == "name":
            if text in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return Call(text, arg)
            if text in VARIABLES or text in CONSTANTS:
                return Var(text)
            if self.allow_dx and _DX.match(text):
                return Var(text)
            raise ExpressionSyntaxError(f"unknown name {text!r}", pos, "one of " + ", ".join(VARIABLES + tuple(FUNCTIONS)))
        if text == "(":
            node = self.expr()
            self.expect(")")
            return node
        raise ExpressionSyntaxError(f"unexpected {text or 'end of input'!r}", pos, "number, name or '('")


# -- public objects -------------------------------------------------------------------


class Expr:
    """A parsed scalar expression; call with keyword bindings, e.g. ``e(t=0.5)``."""

    def __init__(self, node, source=None):
        self.node = node
        self.source = source

    def __call__(self, **env):
        return _evaluate(self.node, env)

    def __repr__(self):
        return f"Expr({self.source!r})"

    @property
    def variables(self):
        return _free(self.node)

    def diff(self, var):
        return Expr(_diff(self.node, var))

    def of_t(self, t, x=None):
        """Evaluate with ``t`` and optionally coordinates ``x = (x1, .., xn)``."""
        env = {"t": t}
        if x is not None:
            env.update({f"x{i + 1}": xi for i, xi in enumerate(x)})
        return _evaluate(self.node, env)

    def of_x(self, x):
        return _evaluate(self.node, {f"x{i + 1}": xi for i, xi in enumerate(x)})

    def sample(self, grid):
        values = self.of_x(grid.coords)
        return np.broadcast_to(np.asarray(values, dtype=float), grid.shape).copy()


def parse_expression(src):
    """Parse ``src`` into an :class:`Expr`; raises :class:`ExpressionSyntaxError`."""
    return Expr(_Parser(src, allow_dx=False).parse(), src)


class FormExpression:
    """A k-form whose coefficients are expressions in ``x1..xn``.

    ``components`` maps sorted 1-based multi-indices to :class:`Expr`.
    """

    def __init__(self, k, components, source=None):
        self.k = k
        self.components = dict(components)
        self.source = source

    def __repr__(self):
        return f"FormExpression(k={self.k}, {self.source!r})"

    def d(self, n):
        """Analytic exterior derivative in ``n`` dimensions."""
        nodes = {}
        for idx, coeff in self.components.items():
            for j in range(1, n + 1):
                if j in idx:
                    continue
                deriv = _diff(coeff.node, f"x{j}")
                if deriv == ZERO:
                    continue
                if permutation_sign((j,) + idx) < 0:
                    deriv = _neg(deriv)
                key = tuple(sorted((j,) + idx))
                nodes[key] = _add(nodes.get(key, ZERO), deriv)
        return FormExpression(self.k + 1, {key: Expr(node) for key, node in nodes.items()})

    def sample(self, grid):
        for idx in self.components:
            if max(idx, default=0) > grid.n:
                raise PreconditionError(f"component dx{''.join(map(str, idx))} does not exist for n={grid.n}")
        return DiscreteForm.from_components(grid, self.k, {idx: e.sample(grid) for idx, e in self.components.items()})


def _dx_degree(node, src):
    """Degree of ``node`` in the basis symbols; rejects non-linear use."""
    if isinstance(node, Var):
        return 1 if _DX.match(node.name) else 0
    if isinstance(node, Num):
        return 0
    if isinstance(node, Neg):
        return _dx_degree(node.arg, src)
    if isinstance(node, Call):
        if _dx_degree(node.arg, src):
            raise ConfigError(f"basis symbol inside {node.fn}() in {src!r}")
        return 0
    dl, dr = _dx_degree(node.left, src), _dx_degree(node.right, src)
    if node.op in "+-":
        if dl != dr:
            raise ConfigError(f"every term of a form expression needs exactly one dx symbol: {src!r}")
        return dl
    if node.op == "*":
        if dl + dr > 1:
            raise ConfigError(f"product of basis symbols in {src!r}; write dx12 for dx1^dx2")
        return dl + dr
    if node.op == "/":
        if dr:
            raise ConfigError(f"basis symbol in a denominator in {src!r}")
        return dl
    if dl or dr:
        raise ConfigError(f"basis symbol under a power in {src!r}")
    return 0


def _dx_symbols(node):
    return {v for v in _free(node) if _DX.match(v)}


def _substitute(node, env):
    if isinstance(node, Var):
        return Num(env[node.name]) if node.name in env else node
    if isinstance(node, Num):
        return node
    if isinstance(node, Neg):
        return _neg(_substitute(node.arg, env))
    if isinstance(node, Call):
        return Call(node.fn, _substitute(node.arg, env))
    left, right = _substitute(node.left, env), _substitute(node.right, env)
    return {"+": _add, "-": _sub, "*": _mul, "/": _div, "^": _pow}[node.op](left, right)


def parse_form(src, k=None):
    """Parse a form expression such as ``"x3*dx4"``; ``k`` optionally pins the degree.

    A bare scalar expression (no basis symbol) is read as a 0-form.
    """
    node = _Parser(src, allow_dx=True).parse()
    degree_in_dx = _dx_degree(node, src)
    symbols = sorted(_dx_symbols(node))
    if degree_in_dx == 0:
        form = FormExpression(0, {(): Expr(node, src)}, src)
    else:
        components = {}
        degrees = set()
        for sym in symbols:
            digits = tuple(int(c) for c in _DX.match(sym).group(1))
            sign = permutation_sign(digits)
            if sign == 0:
                raise ConfigError(f"repeated index in {sym} in {src!r}")
            degrees.add(len(digits))
            env = {s: (1.0 if s == sym else 0.0) for s in symbols}
            coeff = _substitute(node, env)
            coeff = coeff if sign > 0 else _neg(coeff)
            key = tuple(sorted(digits))
            components[key] = Expr(_add(components[key].node, coeff) if key in components else coeff)
        if len(degrees) != 1:
            raise ConfigError(f"mixed degrees in form expression {src!r}")
        form = FormExpression(degrees.pop(), components, src)
    if k is not None and form.k != k:
        raise ConfigError(f"expected a {k}-form, got a {form.k}-form: {src!r}")
    return form
