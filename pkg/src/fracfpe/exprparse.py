"""Coefficient expressions F(x, t), sigma(x, t), h(x, t).

Grammar (``^`` is right-associative and binds tighter than unary minus, so
``-x^2`` is ``-(x^2)``; there is no implicit multiplication)::

    expr    := term (('+' | '-') term)*
    term    := unary (('*' | '/') unary)*
    unary   := '-' unary | power
    power   := atom ('^' unary)?
    atom    := NUMBER | 'x' | 't' | FUNC '(' expr ')' | '(' expr ')'

Parsing is a Pratt loop over binding powers.  Trees evaluate with numpy
semantics (NaN/inf propagate, nothing raises) and can be compiled to a numba
function for the path simulator.
"""

from __future__ import annotations

import math
import re
import warnings
from dataclasses import dataclass
from typing import Union

import numba
import numpy as np

from .errors import ContractError, FracFpeError

FUNCTIONS = ("sin", "cos", "exp", "tanh", "abs", "sign", "sqrt")
VARIABLES = ("x", "t")

_NP_FUNCS = {
    "sin": np.sin, "cos": np.cos, "exp": np.exp, "tanh": np.tanh,
    "abs": np.abs, "sign": np.sign, "sqrt": np.sqrt,
}

# binding powers: (left, right) for infix operators
_INFIX = {"+": (10, 11), "-": (10, 11), "*": (20, 21), "/": (20, 21), "^": (41, 30)}
_PREFIX_MINUS = 30
_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3, "^": 4, "atom": 5}


class ExprSyntaxError(FracFpeError, ValueError):
    """Syntax error with the byte offset and the set of tokens that would fit."""

    def __init__(self, src, offset, expected, found):
        self.src = src
        self.offset = offset
        self.expected = frozenset(expected)
        self.found = found
        exp = ", ".join(sorted(self.expected))
        super().__init__(
            f"syntax error at offset {offset}: found {found!r}, expected one of {{{exp}}}\n"
            f"  {src}\n  {' ' * offset}^")


# ---------------------------------------------------------------------------
# tree


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    operand: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Call:
    func: str
    arg: "Expr"


Expr = Union[Num, Var, Neg, BinOp, Call]


# ---------------------------------------------------------------------------
# lexer

_TOKEN = re.compile(r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>[-+*/^()])
""", re.VERBOSE)


@dataclass
class _Tok:
    kind: str      # "num", "name", "op", "end"
    text: str
    offset: int


def _tokenize(src: str):
    out = []
    pos = 0
    while pos < len(src):
        m = _TOKEN.match(src, pos)
        if m is None:
            raise ExprSyntaxError(src, len(src[:pos].encode()), {"number", "x", "t", "function", "operator"},
                                  src[pos])
        kind = m.lastgroup
        if kind != "ws":
            out.append(_Tok(kind, m.group(), len(src[:pos].encode())))
        pos = m.end()
    out.append(_Tok("end", "", len(src.encode())))
    return out


_ATOM_START = {"number", "x", "t", "(", "-"} | set(FUNCTIONS)


class _Parser:
    def __init__(self, src):
        self.src = src
        self.toks = _tokenize(src)
        self.i = 0

    @property
    def tok(self):
        return self.toks[self.i]

    def fail(self, expected):
        t = self.tok
        raise ExprSyntaxError(self.src, t.offset, expected, t.text or "end of input")

    def advance(self):
        t = self.tok
        self.i += 1
        return t

    def expect(self, text):
        if self.tok.text != text or self.tok.kind != "op":
            self.fail({text})
        return self.advance()

    def parse(self):
        tree = self.expression(0)
        if self.tok.kind != "end":
            self.fail({"+", "-", "*", "/", "^", "end of input"})
        return tree

    def expression(self, min_bp):
        left = self.prefix()
        while True:
            t = self.tok
            if t.kind != "op" or t.text not in _INFIX:
                break
            lbp, rbp = _INFIX[t.text]
            if lbp < min_bp:
                break
            self.advance()
            right = self.expression(rbp)
            left = BinOp(t.text, left, right)
        return left

    def prefix(self):
        t = self.tok
        if t.kind == "op" and t.text == "-":
            self.advance()
            return Neg(self.expression(_PREFIX_MINUS))
        if t.kind == "num":
            self.advance()
            return Num(float(t.text))
        if t.kind == "name":
            self.advance()
            if t.text in VARIABLES:
                return Var(t.text)
            if t.text in FUNCTIONS:
                self.expect("(")
                arg = self.expression(0)
                self.expect(")")
                return Call(t.text, arg)
            self.i -= 1
            self.fail(_ATOM_START)
        if t.kind == "op" and t.text == "(":
            self.advance()
            inner = self.expression(0)
            self.expect(")")
            return inner
        self.fail(_ATOM_START)


def parse(src: str) -> Expr:
    """Parse ``src`` into an expression tree or raise :class:`ExprSyntaxError`."""
    return _Parser(src).parse()


# ---------------------------------------------------------------------------
# evaluation and printing


def evaluate(e: Expr, x, t):
    """Evaluate with IEEE double semantics; works on scalars and numpy arrays."""
    with np.errstate(all="ignore"):
        return _eval(e, np.float64(x) if np.isscalar(x) else np.asarray(x, dtype=float),
                     np.float64(t) if np.isscalar(t) else np.asarray(t, dtype=float))


# keep the spec-facing name available as well
eval = evaluate  # noqa: A001


def _eval(e, x, t):
    if isinstance(e, Num):
        return np.float64(e.value)
    if isinstance(e, Var):
        return x if e.name == "x" else t
    if isinstance(e, Neg):
        return -_eval(e.operand, x, t)
    if isinstance(e, Call):
        return _NP_FUNCS[e.func](_eval(e.arg, x, t))
    a = _eval(e.left, x, t)
    b = _eval(e.right, x, t)
    if e.op == "+":
        return a + b
    if e.op == "-":
        return a - b
    if e.op == "*":
        return a * b
    if e.op == "/":
        return np.true_divide(a, b)
    return np.power(a, b)


def _prec(e):
    if isinstance(e, BinOp):
        return _PREC[e.op]
    if isinstance(e, Neg):
        return _PREC["neg"]
    return _PREC["atom"]


def pretty(e: Expr) -> str:
    """Shortest parenthesisation that re-parses to the same tree."""
    if isinstance(e, Num):
        v = e.value
        s = str(int(v)) if v.is_integer() and abs(v) < 1e15 else repr(v)
        if s in ("inf", "nan"):
            raise ValueError(f"literal {s} has no source form")
        return s if e.value >= 0 else f"({s})"
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Call):
        return f"{e.func}({pretty(e.arg)})"
    if isinstance(e, Neg):
        inner = pretty(e.operand)
        # the operand of unary minus is parsed at the power level
        if _prec(e.operand) < _PREC["neg"]:
            inner = f"({inner})"
        return f"-{inner}"
    p = _PREC[e.op]
    left, right = pretty(e.left), pretty(e.right)
    if e.op == "^":
        if _prec(e.left) <= p:
            left = f"({left})"
        if _prec(e.right) < _PREC["neg"]:
            right = f"({right})"
        return f"{left}^{right}"
    if _prec(e.left) < p:
        left = f"({left})"
    if _prec(e.right) <= p:
        right = f"({right})"
    return f"{left} {e.op} {right}"


def variables(e: Expr) -> set:
    if isinstance(e, Var):
        return {e.name}
    if isinstance(e, Num):
        return set()
    if isinstance(e, (Neg, Call)):
        return variables(e.operand if isinstance(e, Neg) else e.arg)
    return variables(e.left) | variables(e.right)


def is_zero(e: Expr) -> bool:
    return isinstance(e, Num) and e.value == 0.0


def constant_value(e: Expr):
    """The value of a variable-free expression, else None."""
    if variables(e):
        return None
    return float(evaluate(e, 0.0, 0.0))


# ---------------------------------------------------------------------------
# numba compilation


@numba.njit(cache=True, inline="always")
def _sign(v):
    if v > 0:
        return 1.0
    if v < 0:
        return -1.0
    return v  # keeps 0.0, -0.0 and nan


@numba.njit(cache=True, inline="always")
def _sqrt(v):
    if v < 0:
        return math.nan
    return math.sqrt(v)


@numba.njit(cache=True, inline="always")
def _pow(a, b):
    # C pow semantics: negative base with non-integer exponent gives nan
    if a < 0 and b != math.floor(b):
        return math.nan
    if a == 0.0 and b < 0:
        return math.inf
    return a ** b


_NB_NAMES = {
    "sin": "math.sin", "cos": "math.cos", "exp": "math.exp", "tanh": "math.tanh",
    "abs": "abs", "sign": "_sign", "sqrt": "_sqrt",
}


def _source(e):
    if isinstance(e, Num):
        return repr(float(e.value))
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Neg):
        return f"(-{_source(e.operand)})"
    if isinstance(e, Call):
        return f"{_NB_NAMES[e.func]}({_source(e.arg)})"
    if e.op == "^":
        return f"_pow({_source(e.left)}, {_source(e.right)})"
    if e.op == "/":
        return f"_div({_source(e.left)}, {_source(e.right)})"
    return f"({_source(e.left)} {e.op} {_source(e.right)})"


@numba.njit(cache=True, inline="always")
def _div(a, b):
    if b == 0.0:
        if a == 0.0 or a != a:
            return math.nan
        return math.copysign(math.inf, a) * math.copysign(1.0, b)
    return a / b


_COMPILED: dict = {}


def compile_numba(e: Expr):
    """Compile the tree into an ``njit`` function ``f(x, t) -> float``."""
    src = _source(e)
    fn = _COMPILED.get(src)
    if fn is not None:
        return fn
    ns = {"math": math, "_sign": _sign, "_sqrt": _sqrt, "_pow": _pow, "_div": _div}
    code = f"def _coef(x, t):\n    return float({src})\n"
    exec(code, ns)  # noqa: S102 - source built from a validated tree
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fn = numba.njit(error_model="numpy")(ns["_coef"])
    _COMPILED[src] = fn
    return fn


# ---------------------------------------------------------------------------
# coefficient field


@dataclass(frozen=True)
class CoefficientField:
    """Drift F, diffusion sigma and jump coefficient h as parsed expressions."""

    F: Expr
    sigma: Expr
    h: Expr

    @classmethod
    def from_strings(cls, F="0", sigma="0", h="0"):
        return cls(parse(F), parse(sigma), parse(h))

    def drift(self, x, t):
        return evaluate(self.F, x, t)

    def diffusion(self, x, t):
        s = evaluate(self.sigma, x, t)
        if np.any(np.asarray(s) < 0):
            raise ContractError("sigma(x, t) must be nonnegative on the sampled domain")
        return s

    def jump(self, x, t):
        return evaluate(self.h, x, t)

    def time_dependent(self) -> bool:
        return any("t" in variables(e) for e in (self.F, self.sigma, self.h))

    def compiled(self):
        return compile_numba(self.F), compile_numba(self.sigma), compile_numba(self.h)

    def strings(self):
        return pretty(self.F), pretty(self.sigma), pretty(self.h)
