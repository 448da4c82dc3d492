"""Reward expression language.

A reward is a small arithmetic expression over named step features, e.g.
``0.5 * rate - 0.1 * log10(crb)``. Precedence, tightest first: unary minus,
``^`` (right associative, ``**`` accepted), ``*`` ``/``, ``+`` ``-``.
Functions: log10, ln, exp, abs, tanh (one argument), min, max (two) and
clip(x, lo, hi) with signed numeric bounds.

Expressions are immutable; parsing validates feature names and size limits
so evaluation only ever fails on arithmetic.
"""

import enum
import math
import re
from dataclasses import dataclass, fields
from typing import Mapping, Tuple

FEATURE_NAMES = (
    "rate",
    "crb",
    "log10_crb",
    "min_user_rate",
    "power_used",
    "power_budget",
    "power_ratio",
    "step_frac",
)

FEATURE_DOCS = {
    "rate": "downlink sum rate in bits/s/Hz",
    "crb": "target-angle Cramer-Rao bound in rad^2, clamped to 1e6",
    "log10_crb": "base-10 logarithm of the clamped bound",
    "min_user_rate": "smallest per-user rate in bits/s/Hz",
    "power_used": "executed transmit power in W",
    "power_budget": "transmit power budget in W",
    "power_ratio": "used / budget, in [0, 1]",
    "step_frac": "episode progress in [0, 1]",
}

MAX_SOURCE_LEN = 4096
MAX_DEPTH = 32
MAX_NODES = 512
# Parser recursion allowance; parentheses nest without adding AST depth.
_MAX_NESTING = 3 * MAX_DEPTH

REWARD_CLIP = 100.0
DIV_EPS = 1e-12


class ParseErrorKind(enum.Enum):
    LEX = "lex"
    SYNTAX = "syntax"
    UNKNOWN_FEATURE = "unknown-feature"
    ARITY = "arity"
    LIMIT_EXCEEDED = "limit-exceeded"


class ParseError(Exception):
    def __init__(self, position, kind, message):
        super().__init__("{} error at offset {}: {}".format(kind.value, position, message))
        self.position = position
        self.kind = kind
        self.message = message


class EvalError(Exception):
    """Arithmetic failure; `path` lists child indices from the root."""
    def __init__(self, message, path):
        super().__init__("{} (at node path {})".format(message, list(path)))
        self.message = message
        self.path = tuple(path)


# AST


@dataclass(frozen=True)
class Node:
    def children(self):
        return tuple(getattr(self, f.name) for f in fields(self)
                     if isinstance(getattr(self, f.name), Node))


@dataclass(frozen=True)
class Constant(Node):
    value: float


@dataclass(frozen=True)
class Feature(Node):
    name: str


@dataclass(frozen=True)
class Unary(Node):
    arg: Node


@dataclass(frozen=True)
class Neg(Unary):
    pass


@dataclass(frozen=True)
class Log10(Unary):
    pass


@dataclass(frozen=True)
class Ln(Unary):
    pass


@dataclass(frozen=True)
class Exp(Unary):
    pass


@dataclass(frozen=True)
class Abs(Unary):
    pass


@dataclass(frozen=True)
class Tanh(Unary):
    pass


@dataclass(frozen=True)
class Binary(Node):
    left: Node
    right: Node


@dataclass(frozen=True)
class Add(Binary):
    pass


@dataclass(frozen=True)
class Sub(Binary):
    pass


@dataclass(frozen=True)
class Mul(Binary):
    pass


@dataclass(frozen=True)
class Div(Binary):
    pass


@dataclass(frozen=True)
class Pow(Binary):
    pass


@dataclass(frozen=True)
class Min(Binary):
    pass


@dataclass(frozen=True)
class Max(Binary):
    pass


@dataclass(frozen=True)
class Clip(Node):
    arg: Node
    lo: float
    hi: float


UNARY_FUNCTIONS = {"log10": Log10, "ln": Ln, "exp": Exp, "abs": Abs, "tanh": Tanh}
BINARY_FUNCTIONS = {"min": Min, "max": Max}
FUNCTION_NAMES = tuple(UNARY_FUNCTIONS) + tuple(BINARY_FUNCTIONS) + ("clip",)
_FUNCTION_OF = {cls: name for name, cls in {**UNARY_FUNCTIONS, **BINARY_FUNCTIONS}.items()}

_INFIX = {Add: ("+", 1), Sub: ("-", 1), Mul: ("*", 2), Div: ("/", 2), Pow: ("^", 3)}


def depth(node):
    # Iterative: left-deep chains from the parser's loops can be long.
    best = 0
    stack = [(node, 1)]
    while stack:
        current, d = stack.pop()
        best = max(best, d)
        stack.extend((child, d + 1) for child in current.children())
    return best


def node_count(node):
    count = 0
    stack = [node]
    while stack:
        count += 1
        stack.extend(stack.pop().children())
    return count


def referenced_features(node):
    found = set()
    stack = [node]
    while stack:
        current = stack.pop()
        if isinstance(current, Feature):
            found.add(current.name)
        stack.extend(current.children())
    return found


@dataclass(frozen=True)
class RewardExpr:
    """A validated reward expression; equality is structural."""
    ast: Node

    def canonical(self):
        return print_canonical(self)

    def features(self):
        return frozenset(referenced_features(self.ast))

    def __str__(self):
        return self.canonical()


def validate(expr, feature_names=FEATURE_NAMES):
    """Check the invariants of an expression that did not come from `parse`."""
    ast = expr.ast if isinstance(expr, RewardExpr) else expr
    if depth(ast) > MAX_DEPTH:
        raise ParseError(0, ParseErrorKind.LIMIT_EXCEEDED,
                         "depth exceeds {}".format(MAX_DEPTH))
    if node_count(ast) > MAX_NODES:
        raise ParseError(0, ParseErrorKind.LIMIT_EXCEEDED,
                         "node count exceeds {}".format(MAX_NODES))
    _check_nodes(ast, set(feature_names))
    return RewardExpr(ast)


def _check_nodes(node, names):
    if isinstance(node, Feature) and node.name not in names:
        raise ParseError(0, ParseErrorKind.UNKNOWN_FEATURE,
                         "unknown feature {!r}".format(node.name))
    if isinstance(node, Constant) and not math.isfinite(node.value):
        raise ParseError(0, ParseErrorKind.LEX, "non-finite constant")
    if isinstance(node, Clip):
        if not (math.isfinite(node.lo) and math.isfinite(node.hi)):
            raise ParseError(0, ParseErrorKind.LEX, "non-finite clip bound")
        if node.lo > node.hi:
            raise ParseError(0, ParseErrorKind.SYNTAX, "clip requires lo <= hi")
    for child in node.children():
        _check_nodes(child, names)


# Lexer

_TOKEN_RE = re.compile(r"""
    (?P<ws>\s+)
  | (?P<number>(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>\*\*|[-+*/^(),])
""", re.VERBOSE | re.ASCII)


@dataclass(frozen=True)
class _Token:
    kind: str
    text: str
    pos: int


def _tokenize(source):
    tokens = []
    pos = 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        if m is None:
            raise ParseError(pos, ParseErrorKind.LEX,
                             "unexpected character {!r}".format(source[pos]))
        kind = m.lastgroup
        if kind != "ws":
            text = m.group()
            if kind == "op" and text == "**":
                text = "^"
            tokens.append(_Token(kind, text, pos))
        pos = m.end()
    tokens.append(_Token("end", "", len(source)))
    return tokens


# Parser

class _Parser:
    def __init__(self, tokens, feature_names):
        self.tokens = tokens
        self.i = 0
        self.feature_names = feature_names
        self.nesting = 0

    @property
    def tok(self):
        return self.tokens[self.i]

    def advance(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def accept(self, text):
        if self.tok.kind == "op" and self.tok.text == text:
            return self.advance()
        return None

    def expect(self, text):
        tok = self.accept(text)
        if tok is None:
            raise ParseError(self.tok.pos, ParseErrorKind.SYNTAX,
                             "expected {!r}, found {}".format(text, self._describe(self.tok)))
        return tok

    @staticmethod
    def _describe(tok):
        return "end of input" if tok.kind == "end" else repr(tok.text)

    def enter(self):
        self.nesting += 1
        if self.nesting > _MAX_NESTING:
            raise ParseError(self.tok.pos, ParseErrorKind.LIMIT_EXCEEDED,
                             "nesting exceeds {}".format(_MAX_NESTING))

    def leave(self):
        self.nesting -= 1

    def parse(self):
        node = self.expr()
        if self.tok.kind != "end":
            raise ParseError(self.tok.pos, ParseErrorKind.SYNTAX,
                             "unexpected {}".format(self._describe(self.tok)))
        return node

    def expr(self):
        node = self.term()
        while True:
            if self.accept("+"):
                node = Add(node, self.term())
            elif self.accept("-"):
                node = Sub(node, self.term())
            else:
                return node

    def term(self):
        node = self.power()
        while True:
            if self.accept("*"):
                node = Mul(node, self.power())
            elif self.accept("/"):
                node = Div(node, self.power())
            else:
                return node

    def power(self):
        base = self.unary()
        if not self.accept("^"):
            return base
        self.enter()
        node = Pow(base, self.power())
        self.leave()
        return node

    def unary(self):
        if self.accept("-"):
            self.enter()
            node = Neg(self.unary())
            self.leave()
            return node
        return self.atom()

    def atom(self):
        tok = self.tok
        if tok.kind == "number":
            self.advance()
            return Constant(self._number(tok))
        if tok.kind == "name":
            self.advance()
            if self.tok.kind == "op" and self.tok.text == "(":
                return self.call(tok)
            if tok.text in FUNCTION_NAMES:
                raise ParseError(self.tok.pos, ParseErrorKind.SYNTAX,
                                 "expected '(' after {}".format(tok.text))
            if tok.text not in self.feature_names:
                raise ParseError(tok.pos, ParseErrorKind.UNKNOWN_FEATURE,
                                 "unknown feature {!r}".format(tok.text))
            return Feature(tok.text)
        if self.accept("("):
            self.enter()
            node = self.expr()
            self.expect(")")
            self.leave()
            return node
        raise ParseError(tok.pos, ParseErrorKind.SYNTAX,
                         "expected a value, found {}".format(self._describe(tok)))

    @staticmethod
    def _number(tok):
        value = float(tok.text)
        if not math.isfinite(value):
            raise ParseError(tok.pos, ParseErrorKind.LEX,
                             "literal {} out of range".format(tok.text))
        return value

    def signed_number(self):
        negative = self.accept("-") is not None
        tok = self.tok
        if tok.kind != "number":
            raise ParseError(tok.pos, ParseErrorKind.SYNTAX,
                             "clip bounds must be numeric literals")
        self.advance()
        value = self._number(tok)
        return -value if negative else value

    def call(self, name_tok):
        name = name_tok.text
        if name not in FUNCTION_NAMES:
            raise ParseError(name_tok.pos, ParseErrorKind.SYNTAX,
                             "unknown function {!r}".format(name))
        self.expect("(")
        self.enter()
        if name == "clip":
            arg = self.expr()
            self._arg_separator(name_tok, 3, 1)
            lo = self.signed_number()
            self._arg_separator(name_tok, 3, 2)
            hi = self.signed_number()
            self._close(name_tok, 3, 3)
            if lo > hi:
                raise ParseError(name_tok.pos, ParseErrorKind.SYNTAX,
                                 "clip requires lo <= hi")
            node = Clip(arg, lo, hi)
        elif name in UNARY_FUNCTIONS:
            arg = self.expr()
            self._close(name_tok, 1, 1)
            node = UNARY_FUNCTIONS[name](arg)
        else:
            left = self.expr()
            self._arg_separator(name_tok, 2, 1)
            right = self.expr()
            self._close(name_tok, 2, 2)
            node = BINARY_FUNCTIONS[name](left, right)
        self.leave()
        return node

    def _arg_separator(self, name_tok, arity, seen):
        if self.accept(","):
            return
        if self.tok.kind == "op" and self.tok.text == ")":
            raise ParseError(self.tok.pos, ParseErrorKind.ARITY,
                             "{} takes {} arguments, got {}".format(name_tok.text, arity, seen))
        self.expect(",")

    def _close(self, name_tok, arity, seen):
        if self.accept(")"):
            return
        if self.tok.kind == "op" and self.tok.text == ",":
            raise ParseError(self.tok.pos, ParseErrorKind.ARITY,
                             "{} takes {} argument{}".format(name_tok.text, arity,
                                                             "" if arity == 1 else "s"))
        self.expect(")")


def parse(source, feature_names=FEATURE_NAMES):
    """Parse reward source text (str or bytes) into a RewardExpr.

    Raises ParseError; never anything else for any input.
    """
    if isinstance(source, (bytes, bytearray)):
        if len(source) > MAX_SOURCE_LEN:
            raise ParseError(MAX_SOURCE_LEN, ParseErrorKind.LIMIT_EXCEEDED,
                             "source longer than {}".format(MAX_SOURCE_LEN))
        try:
            source = bytes(source).decode("utf-8")
        except UnicodeDecodeError as e:
            raise ParseError(e.start, ParseErrorKind.LEX, "invalid utf-8") from None
    if len(source) > MAX_SOURCE_LEN:
        raise ParseError(MAX_SOURCE_LEN, ParseErrorKind.LIMIT_EXCEEDED,
                         "source longer than {}".format(MAX_SOURCE_LEN))
    tokens = _tokenize(source)
    ast = _Parser(tokens, frozenset(feature_names)).parse()
    if depth(ast) > MAX_DEPTH:
        raise ParseError(0, ParseErrorKind.LIMIT_EXCEEDED,
                         "depth exceeds {}".format(MAX_DEPTH))
    if node_count(ast) > MAX_NODES:
        raise ParseError(0, ParseErrorKind.LIMIT_EXCEEDED,
                         "node count exceeds {}".format(MAX_NODES))
    return RewardExpr(ast)


# Printer

def format_number(value):
    """Shortest text that parses back to exactly `value`."""
    value = float(value)
    if value.is_integer() and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


def _precedence(node):
    if isinstance(node, (Add, Sub)):
        return 1
    if isinstance(node, (Mul, Div)):
        return 2
    if isinstance(node, Pow):
        return 3
    if isinstance(node, Neg):
        return 4
    return 5


def _print(node, min_prec):
    text = _print_bare(node)
    if _precedence(node) < min_prec:
        return "(" + text + ")"
    return text


def _print_bare(node):
    if isinstance(node, Constant):
        if node.value < 0 or (node.value == 0 and math.copysign(1, node.value) < 0):
            # Only reachable for hand-built ASTs; the parser yields Neg(Constant).
            return "(" + format_number(node.value) + ")"
        return format_number(node.value)
    if isinstance(node, Feature):
        return node.name
    if isinstance(node, Neg):
        return "-" + _print(node.arg, 4)
    if type(node) in _INFIX:
        symbol, prec = _INFIX[type(node)]
        if isinstance(node, Pow):
            return "{} ^ {}".format(_print(node.left, 4), _print(node.right, 3))
        return "{} {} {}".format(_print(node.left, prec), symbol, _print(node.right, prec + 1))
    if isinstance(node, Clip):
        return "clip({}, {}, {})".format(_print(node.arg, 0), format_number(node.lo),
                                         format_number(node.hi))
    if isinstance(node, Unary):
        return "{}({})".format(_FUNCTION_OF[type(node)], _print(node.arg, 0))
    if isinstance(node, Binary):
        return "{}({}, {})".format(_FUNCTION_OF[type(node)], _print(node.left, 0),
                                   _print(node.right, 0))
    raise TypeError("not a reward node: {!r}".format(node))


def print_canonical(expr):
    """Canonical text; `parse` of it rebuilds an identical tree."""
    ast = expr.ast if isinstance(expr, RewardExpr) else expr
    return _print(ast, 0)


# Evaluator

def _log(x, fn, path):
    if not x > 0:
        raise EvalError("logarithm of non-positive value {!r}".format(x), path)
    return fn(x)


def _eval(node, features, path):
    if isinstance(node, Constant):
        return node.value
    if isinstance(node, Feature):
        try:
            value = float(features[node.name])
        except KeyError:
            raise EvalError("missing feature {!r}".format(node.name), path) from None
        if not math.isfinite(value):
            raise EvalError("feature {!r} is not finite".format(node.name), path)
        return value
    if isinstance(node, Clip):
        x = _eval(node.arg, features, path + (0,))
        return min(max(x, node.lo), node.hi)
    if isinstance(node, Unary):
        x = _eval(node.arg, features, path + (0,))
        try:
            if isinstance(node, Neg):
                result = -x
            elif isinstance(node, Log10):
                result = _log(x, math.log10, path)
            elif isinstance(node, Ln):
                result = _log(x, math.log, path)
            elif isinstance(node, Exp):
                result = math.exp(x)
            elif isinstance(node, Abs):
                result = abs(x)
            else:
                result = math.tanh(x)
        except OverflowError:
            raise EvalError("overflow", path) from None
        return result
    left = _eval(node.left, features, path + (0,))
    right = _eval(node.right, features, path + (1,))
    try:
        if isinstance(node, Add):
            result = left + right
        elif isinstance(node, Sub):
            result = left - right
        elif isinstance(node, Mul):
            result = left * right
        elif isinstance(node, Div):
            if abs(right) < DIV_EPS:
                raise EvalError("division by zero", path)
            result = left / right
        elif isinstance(node, Pow):
            result = math.pow(left, right)
        elif isinstance(node, Min):
            result = min(left, right)
        else:
            result = max(left, right)
    except (OverflowError, ValueError, ZeroDivisionError) as e:
        raise EvalError("invalid arithmetic: {}".format(e), path) from None
    if not math.isfinite(result):
        raise EvalError("non-finite result", path)
    return result


def evaluate(expr, features: Mapping[str, float]):
    """Strict real evaluation, clipped to [-100, 100]."""
    ast = expr.ast if isinstance(expr, RewardExpr) else expr
    value = _eval(ast, features, ())
    return min(max(value, -REWARD_CLIP), REWARD_CLIP)


# Built-in rewards

MANUAL_REWARD_SOURCE = "rate / 10 - log10(crb) / 10"


def builtin_manual_reward():
    """Naive scalarization with no magnitude calibration."""
    return parse(MANUAL_REWARD_SOURCE)


def normalized_reward_source(shaping):
    return ("clip((rate / {rate_ref} - 1) - {beta} * (log10(crb) - {c_ref}) / {c_scale}"
            " - {gamma} * max(0, power_ratio - 1), -10, 10)").format(
                rate_ref=format_number(shaping.rate_ref),
                beta=format_number(shaping.beta),
                c_ref=format_number(shaping.c_ref),
                c_scale=format_number(shaping.c_scale),
                gamma=format_number(shaping.gamma))


def builtin_normalized_reward(shaping=None):
    """Rate and log-CRB brought to a common scale, with a power penalty.

    Evaluates to 0 at rate = rate_ref, log10(crb) = c_ref within budget.
    """
    if shaping is None:
        from isaclab.config import RewardShaping
        shaping = RewardShaping()
    return parse(normalized_reward_source(shaping))


def feature_reference() -> Tuple[str, ...]:
    """One `name: description` line per feature."""
    return tuple("{}: {}".format(name, FEATURE_DOCS[name]) for name in FEATURE_NAMES)
