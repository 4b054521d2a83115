"""Reader for the plain-text bilevel problem format.

One directive per line; ``#`` starts a comment; blank lines are ignored.
The first directive must declare variable counts.  A minimal file::

    vars x 1 y 1
    upper.obj  (x1 - 1.5)^2 + y1^2
    upper.ineq x1
    upper.ineq 2*y1 + 1
    lower.obj  (z1 - x1)^2
    lower.ineq z1 + 1          # z1 >= -1
    lower.ineq 1 - z1

Equalities (``upper.eq``/``lower.eq``) mean expression = 0; inequalities mean
expression >= 0.  Upper sections may write the lower variables as y1..yp or
z1..zp; lower sections conventionally use z but both spellings are accepted
everywhere.  Expressions use ``+ - * / ^`` (also ``**``), integer exponents,
parentheses, decimals and scientific notation.  Division by a nonconstant
polynomial is only allowed in ``lower.obj``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Dict, List, Tuple, Union

from .poly import Polynomial, RationalFn, VarSpace

_DIRECTIVES = (
    "vars",
    "upper.obj",
    "upper.eq",
    "upper.ineq",
    "lower.obj",
    "lower.eq",
    "lower.ineq",
)

_VARS_RE = re.compile(r"^vars\s+x\s+(\d+)\s+y\s+(\d+)\s*$")
_HEAD_RE = re.compile(r"^(vars|upper\.(?:obj|eq|ineq)|lower\.(?:obj|eq|ineq))\b\s*:?")

_TOKEN_RE = re.compile(
    r"""(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
      | (?P<var>[xyz]\d+)
      | (?P<pow>\*\*|\^)
      | (?P<op>[+\-*/()])
      | (?P<ws>\s+)
      | (?P<bad>.)""",
    re.VERBOSE,
)


class ParseError(ValueError):
    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"line {line}, col {col}: {message}")
        self.line = line
        self.col = col
        self.message = message


@dataclass
class ParsedSource:
    """Raw parse result: counts plus evaluated section expressions."""

    n_upper: int
    n_lower: int
    upper_obj: Polynomial
    lower_obj: Union[Polynomial, RationalFn]
    upper_eq: List[Polynomial] = field(default_factory=list)
    upper_ineq: List[Polynomial] = field(default_factory=list)
    lower_eq: List[Polynomial] = field(default_factory=list)
    lower_ineq: List[Polynomial] = field(default_factory=list)

    @property
    def space(self) -> VarSpace:
        return VarSpace(self.n_upper, self.n_lower)


@dataclass(frozen=True)
class _Token:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(expr: str, line_no: int, col_base: int) -> List[_Token]:
    out: List[_Token] = []
    for m in _TOKEN_RE.finditer(expr):
        kind = m.lastgroup or "bad"
        if kind == "ws":
            continue
        col = col_base + m.start() + 1
        if kind == "bad":
            raise ParseError(f"unexpected character {m.group()!r}", line_no, col)
        out.append(_Token(kind, m.group(), line_no, col))
    return out


class _ExprParser:
    """Recursive descent over one expression's token list."""

    def __init__(self, tokens: List[_Token], space: VarSpace, line: int, end_col: int):
        self.tokens = tokens
        self.space = space
        self.pos = 0
        self.line = line
        self.end_col = end_col

    def _peek(self) -> _Token | None:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def _next(self) -> _Token:
        tok = self._peek()
        if tok is None:
            raise ParseError("unexpected end of expression", self.line, self.end_col)
        self.pos += 1
        return tok

    def parse(self) -> RationalFn:
        value = self._sum()
        tok = self._peek()
        if tok is not None:
            raise ParseError(f"unexpected token {tok.text!r}", tok.line, tok.col)
        return value

    def _sum(self) -> RationalFn:
        value = self._product()
        while True:
            tok = self._peek()
            if tok is None or tok.text not in ("+", "-"):
                return value
            self._next()
            rhs = self._product()
            value = value + rhs if tok.text == "+" else value - rhs

    def _product(self) -> RationalFn:
        value = self._unary()
        while True:
            tok = self._peek()
            if tok is None or tok.text not in ("*", "/"):
                return value
            self._next()
            rhs = self._unary()
            if tok.text == "*":
                value = value * rhs
            else:
                if rhs.num.is_zero():
                    raise ParseError("division by zero", tok.line, tok.col)
                value = value / rhs

    def _unary(self) -> RationalFn:
        tok = self._peek()
        if tok is not None and tok.text in ("+", "-"):
            self._next()
            value = self._unary()
            return value if tok.text == "+" else -value
        return self._power()

    def _power(self) -> RationalFn:
        base = self._atom()
        tok = self._peek()
        if tok is not None and tok.kind == "pow":
            self._next()
            exp_tok = self._next()
            if exp_tok.kind != "num" or not re.fullmatch(r"\d+", exp_tok.text):
                raise ParseError(
                    "exponent must be a nonnegative integer", exp_tok.line, exp_tok.col
                )
            k = int(exp_tok.text)
            return RationalFn(base.num**k, base.den**k)
        return base

    def _atom(self) -> RationalFn:
        tok = self._next()
        one = Polynomial.const(self.space, 1.0)
        if tok.kind == "num":
            return RationalFn(Polynomial.const(self.space, float(tok.text)), one)
        if tok.kind == "var":
            return RationalFn(self._variable(tok), one)
        if tok.text == "(":
            value = self._sum()
            closing = self._next()
            if closing.text != ")":
                raise ParseError("expected ')'", closing.line, closing.col)
            return value
        raise ParseError(f"unexpected token {tok.text!r}", tok.line, tok.col)

    def _variable(self, tok: _Token) -> Polynomial:
        letter, k = tok.text[0], int(tok.text[1:])
        if k < 1:
            raise ParseError("variable indices start at 1", tok.line, tok.col)
        if letter == "x":
            if k > self.space.n_upper:
                raise ParseError(
                    f"x{k} out of range (declared x count is {self.space.n_upper})",
                    tok.line,
                    tok.col,
                )
            return Polynomial.variable(self.space, k - 1)
        if k > self.space.n_lower:
            raise ParseError(
                f"{tok.text} out of range (declared y count is {self.space.n_lower})",
                tok.line,
                tok.col,
            )
        return Polynomial.variable(self.space, self.space.n_upper + k - 1)


def parse_source(text: str) -> ParsedSource:
    """Parse problem text into evaluated section expressions."""
    space: VarSpace | None = None
    sections: Dict[str, List[Tuple[int, RationalFn]]] = {k: [] for k in _DIRECTIVES}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        stripped = line.lstrip()
        indent = len(line) - len(stripped)
        head = _HEAD_RE.match(stripped)
        if head is None:
            word = stripped.split()[0]
            raise ParseError(f"unknown directive {word!r}", line_no, indent + 1)
        key = head.group(1)
        if key == "vars":
            if space is not None:
                raise ParseError("duplicate vars line", line_no, indent + 1)
            m = _VARS_RE.match(stripped)
            if m is None:
                raise ParseError(
                    "vars line must look like 'vars x <n> y <p>'", line_no, indent + 1
                )
            space = VarSpace(int(m.group(1)), int(m.group(2)))
            continue
        if space is None:
            raise ParseError("first directive must be 'vars x <n> y <p>'", line_no, indent + 1)
        body_start = indent + head.end()
        body = stripped[head.end() :]
        tokens = _tokenize(body, line_no, body_start)
        if not tokens:
            raise ParseError(f"{key} needs an expression", line_no, body_start + 1)
        value = _ExprParser(tokens, space, line_no, indent + len(stripped) + 1).parse()
        if key != "lower.obj" and not value.is_polynomial():
            raise ParseError(
                f"nonconstant denominator is only allowed in lower.obj, not {key}",
                line_no,
                tokens[0].col,
            )
        sections[key].append((line_no, value))

    if space is None:
        raise ParseError("empty problem: no 'vars' line", 1, 1)
    for key in ("upper.obj", "lower.obj"):
        if len(sections[key]) == 0:
            raise ParseError(f"missing {key}", 1, 1)
        if len(sections[key]) > 1:
            dup_line = sections[key][1][0]
            raise ParseError(f"duplicate {key}", dup_line, 1)

    lower_obj = sections["lower.obj"][0][1]
    return ParsedSource(
        n_upper=space.n_upper,
        n_lower=space.n_lower,
        upper_obj=sections["upper.obj"][0][1].as_polynomial(),
        lower_obj=(
            lower_obj.as_polynomial() if lower_obj.is_polynomial() else lower_obj
        ),
        upper_eq=[v.as_polynomial() for _, v in sections["upper.eq"]],
        upper_ineq=[v.as_polynomial() for _, v in sections["upper.ineq"]],
        lower_eq=[v.as_polynomial() for _, v in sections["lower.eq"]],
        lower_ineq=[v.as_polynomial() for _, v in sections["lower.ineq"]],
    )
