"""Sparse multivariate polynomials over a fixed bilevel variable split.

Every polynomial lives in a :class:`VarSpace` describing ``n`` upper-level
variables (x1..xn) followed by ``p`` lower-level variables (y1..yp; problem
files spell the same slots z1..zp inside lower-level sections).  Terms are a
dict from exponent tuples of length ``space.total`` to float coefficients;
zero coefficients are never stored, so the zero polynomial has an empty term
dict.  Arithmetic is exact up to float64 roundoff.

Rational functions are reduced only when the denominator turns out constant;
no gcd cancellation is attempted.  Matrices of polynomials support the small
dense operations needed for Gram-style multiplier expressions, including a
combined adjugate/determinant via memoized cofactor expansion (capped at 8x8,
which is deliberate: beyond that the expression swell is unusable anyway).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, Mapping, Sequence, Tuple, Union

import numpy as np

Exponent = Tuple[int, ...]

ADJUGATE_DIM_CAP = 8


class PolyError(ValueError):
    """Raised for structurally invalid polynomial operations."""


@dataclass(frozen=True)
class VarSpace:
    """Variable layout: ``n_upper`` x-slots followed by ``n_lower`` y/z-slots."""

    n_upper: int
    n_lower: int

    def __post_init__(self) -> None:
        if self.n_upper < 0 or self.n_lower < 0:
            raise PolyError("variable counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.n_upper + self.n_lower

    def upper_indices(self) -> range:
        return range(self.n_upper)

    def lower_indices(self) -> range:
        return range(self.n_upper, self.total)

    def name(self, index: int, lower_name: str = "y") -> str:
        if not 0 <= index < self.total:
            raise PolyError(f"variable index {index} out of range")
        if index < self.n_upper:
            return f"x{index + 1}"
        return f"{lower_name}{index - self.n_upper + 1}"


def _term_key(item: Tuple[Exponent, float]) -> Tuple[int, Exponent]:
    exp = item[0]
    return (sum(exp), exp)


class Polynomial:
    """Immutable sparse polynomial with float64 coefficients."""

    __slots__ = ("space", "_terms", "_degree")

    def __init__(self, space: VarSpace, terms: Mapping[Exponent, float]):
        clean: Dict[Exponent, float] = {}
        width = space.total
        for exp, coeff in terms.items():
            if len(exp) != width:
                raise PolyError(
                    f"exponent width {len(exp)} does not match space width {width}"
                )
            c = float(coeff)
            if c != 0.0:
                clean[tuple(int(e) for e in exp)] = c
        object.__setattr__(self, "space", space)
        object.__setattr__(self, "_terms", clean)
        object.__setattr__(self, "_degree", max((sum(e) for e in clean), default=0))

    def __setattr__(self, name: str, value: object) -> None:
        raise AttributeError("Polynomial is immutable")

    # -- constructors -------------------------------------------------

    @classmethod
    def zero(cls, space: VarSpace) -> "Polynomial":
        return cls(space, {})

    @classmethod
    def const(cls, space: VarSpace, value: float) -> "Polynomial":
        if float(value) == 0.0:
            return cls.zero(space)
        return cls(space, {tuple([0] * space.total): float(value)})

    @classmethod
    def variable(cls, space: VarSpace, index: int) -> "Polynomial":
        if not 0 <= index < space.total:
            raise PolyError(f"variable index {index} out of range")
        exp = [0] * space.total
        exp[index] = 1
        return cls(space, {tuple(exp): 1.0})

    # -- inspection ---------------------------------------------------

    def terms(self) -> Tuple[Tuple[Exponent, float], ...]:
        """Terms in graded-lex order (deterministic)."""
        return tuple(sorted(self._terms.items(), key=_term_key))

    @property
    def degree(self) -> int:
        return self._degree

    def degree_in(self, indices: Iterable[int]) -> int:
        idx = tuple(indices)
        return max((sum(e[i] for i in idx) for e in self._terms), default=0)

    def is_zero(self) -> bool:
        return not self._terms

    def is_constant(self) -> bool:
        return self._degree == 0

    def constant_value(self) -> float:
        if not self.is_constant():
            raise PolyError("polynomial is not constant")
        return next(iter(self._terms.values()), 0.0)

    def max_abs_coeff(self) -> float:
        return max((abs(c) for c in self._terms.values()), default=0.0)

    def coefficient(self, exp: Exponent) -> float:
        return self._terms.get(tuple(exp), 0.0)

    def n_terms(self) -> int:
        return len(self._terms)

    # -- arithmetic ---------------------------------------------------

    def _check_space(self, other: "Polynomial") -> None:
        if self.space != other.space:
            raise PolyError("operands live in different variable spaces")

    def __add__(self, other: Union["Polynomial", float, int]) -> "Polynomial":
        if isinstance(other, (int, float)):
            other = Polynomial.const(self.space, other)
        if isinstance(other, RationalFn):
            return NotImplemented
        self._check_space(other)
        acc = dict(self._terms)
        for exp, c in other._terms.items():
            acc[exp] = acc.get(exp, 0.0) + c
        return Polynomial(self.space, acc)

    __radd__ = __add__

    def __neg__(self) -> "Polynomial":
        return Polynomial(self.space, {e: -c for e, c in self._terms.items()})

    def __sub__(self, other: Union["Polynomial", float, int]) -> "Polynomial":
        if isinstance(other, (int, float)):
            other = Polynomial.const(self.space, other)
        if isinstance(other, RationalFn):
            return NotImplemented
        return self + (-other)

    def __rsub__(self, other: Union[float, int]) -> "Polynomial":
        return Polynomial.const(self.space, other) - self

    def __mul__(self, other: Union["Polynomial", float, int]) -> "Polynomial":
        if isinstance(other, (int, float)):
            c = float(other)
            if c == 0.0:
                return Polynomial.zero(self.space)
            return Polynomial(
                self.space, {e: v * c for e, v in self._terms.items()}
            )
        if isinstance(other, RationalFn):
            return NotImplemented
        self._check_space(other)
        acc: Dict[Exponent, float] = {}
        for e1, c1 in self._terms.items():
            for e2, c2 in other._terms.items():
                key = tuple(a + b for a, b in zip(e1, e2))
                acc[key] = acc.get(key, 0.0) + c1 * c2
        return Polynomial(self.space, acc)

    __rmul__ = __mul__

    def __pow__(self, exponent: int) -> "Polynomial":
        if not isinstance(exponent, int) or exponent < 0:
            raise PolyError("polynomial powers must be nonnegative integers")
        result = Polynomial.const(self.space, 1.0)
        base = self
        k = exponent
        while k:
            if k & 1:
                result = result * base
            base = base * base if k > 1 else base
            k >>= 1
        return result

    def __truediv__(self, other: Union["Polynomial", float, int]) -> Union["Polynomial", "RationalFn"]:
        if isinstance(other, (int, float)):
            if float(other) == 0.0:
                raise ZeroDivisionError("division by zero constant")
            return self * (1.0 / float(other))
        if isinstance(other, Polynomial):
            if other.is_constant():
                return self / other.constant_value()
            return RationalFn(self, other)
        return NotImplemented

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Polynomial):
            return NotImplemented
        return self.space == other.space and self._terms == other._terms

    def __hash__(self) -> int:
        return hash((self.space, tuple(sorted(self._terms.items()))))

    def almost_equal(self, other: "Polynomial", tol: float = 1e-9) -> bool:
        """Coefficient-wise comparison relative to the larger coefficient scale."""
        self._check_space(other)
        scale = max(self.max_abs_coeff(), other.max_abs_coeff(), 1.0)
        keys = set(self._terms) | set(other._terms)
        return all(
            abs(self._terms.get(k, 0.0) - other._terms.get(k, 0.0)) <= tol * scale
            for k in keys
        )

    def chop(self, rel_tol: float = 1e-12) -> "Polynomial":
        """Drop coefficients below ``rel_tol`` times the largest magnitude."""
        scale = self.max_abs_coeff()
        if scale == 0.0:
            return self
        cut = rel_tol * scale
        return Polynomial(
            self.space, {e: c for e, c in self._terms.items() if abs(c) > cut}
        )

    # -- calculus and evaluation ---------------------------------------

    def differentiate(self, index: int) -> "Polynomial":
        if not 0 <= index < self.space.total:
            raise PolyError(f"variable index {index} out of range")
        acc: Dict[Exponent, float] = {}
        for exp, c in self._terms.items():
            k = exp[index]
            if k == 0:
                continue
            new = list(exp)
            new[index] = k - 1
            key = tuple(new)
            acc[key] = acc.get(key, 0.0) + c * k
        return Polynomial(self.space, acc)

    def evaluate(self, point: Sequence[float]) -> float:
        pt = np.asarray(point, dtype=float)
        if pt.shape != (self.space.total,):
            raise PolyError(
                f"point has shape {pt.shape}, expected ({self.space.total},)"
            )
        total = 0.0
        for exp, c in self._terms.items():
            v = c
            for i, e in enumerate(exp):
                if e:
                    v *= pt[i] ** e
            total += v
        return total

    def evaluate_many(self, points: np.ndarray) -> np.ndarray:
        """Evaluate on an (k, total) array of points at once."""
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != self.space.total:
            raise PolyError("points must be (k, total)")
        if not self._terms:
            return np.zeros(pts.shape[0])
        exps = np.array([e for e, _ in self.terms()], dtype=int)
        coeffs = np.array([c for _, c in self.terms()])
        monos = np.prod(pts[:, None, :] ** exps[None, :, :], axis=2)
        return monos @ coeffs

    def substitute(
        self, mapping: Mapping[int, Union["Polynomial", "RationalFn", float, int]]
    ) -> Union["Polynomial", "RationalFn"]:
        """Replace variables by expressions (all operands in one space).

        Returns a plain polynomial whenever the denominator collapses to a
        constant, otherwise a :class:`RationalFn`.
        """
        exprs: Dict[int, Union[Polynomial, RationalFn]] = {}
        target: VarSpace | None = None
        for i, e in mapping.items():
            if isinstance(e, (int, float)):
                continue
            target = e.space
        if target is None:
            target = self.space
        for i, e in mapping.items():
            if isinstance(e, (int, float)):
                exprs[i] = Polynomial.const(target, float(e))
            else:
                exprs[i] = e
        if target == self.space:
            for i in range(self.space.total):
                exprs.setdefault(i, Polynomial.variable(self.space, i))
        else:
            for i in range(self.space.total):
                if i not in exprs and self.degree_in([i]) > 0:
                    raise PolyError(
                        f"substitute into a new space must cover variable {i}"
                    )
        power_cache: Dict[Tuple[int, int], Union[Polynomial, RationalFn]] = {}

        def power(i: int, k: int) -> Union[Polynomial, RationalFn]:
            key = (i, k)
            if key not in power_cache:
                if k == 1:
                    power_cache[key] = exprs[i]
                else:
                    half = power(i, k // 2)
                    out = half * half
                    if k % 2:
                        out = out * exprs[i]
                    power_cache[key] = out
            return power_cache[key]

        acc: Union[Polynomial, RationalFn] = Polynomial.zero(target)
        for exp, c in self.terms():
            term: Union[Polynomial, RationalFn] = Polynomial.const(target, c)
            for i, e in enumerate(exp):
                if e:
                    term = term * power(i, e)
            acc = acc + term
        if isinstance(acc, RationalFn) and acc.den.is_constant():
            return acc.num / acc.den.constant_value()
        return acc

    def fix(self, values: Mapping[int, float]) -> "Polynomial":
        """Numerically pin some variables, staying in the same space."""
        acc: Dict[Exponent, float] = {}
        for exp, c in self._terms.items():
            v = c
            new = list(exp)
            for i, val in values.items():
                e = exp[i]
                if e:
                    v *= float(val) ** e
                    new[i] = 0
            if v != 0.0:
                key = tuple(new)
                acc[key] = acc.get(key, 0.0) + v
        return Polynomial(self.space, acc)

    def remap(self, space: VarSpace, index_map: Mapping[int, int]) -> "Polynomial":
        """Move to another space; unmapped variables must not occur."""
        acc: Dict[Exponent, float] = {}
        for exp, c in self._terms.items():
            new = [0] * space.total
            for i, e in enumerate(exp):
                if not e:
                    continue
                if i not in index_map:
                    raise PolyError(f"variable {i} occurs but is not remapped")
                new[index_map[i]] = e
            key = tuple(new)
            acc[key] = acc.get(key, 0.0) + c
        return Polynomial(space, acc)

    # -- formatting ----------------------------------------------------

    def to_text(self, lower_name: str = "y") -> str:
        if not self._terms:
            return "0"
        parts = []
        for exp, c in self.terms():
            factors = []
            for i, e in enumerate(exp):
                if e == 0:
                    continue
                name = self.space.name(i, lower_name)
                factors.append(name if e == 1 else f"{name}^{e}")
            mag = abs(c)
            coeff_txt = _format_float(mag)
            if factors:
                body = "*".join(factors)
                term = body if mag == 1.0 else f"{coeff_txt}*{body}"
            else:
                term = coeff_txt
            sign = "-" if c < 0 else "+"
            parts.append((sign, term))
        first_sign, first_term = parts[0]
        out = ("-" if first_sign == "-" else "") + first_term
        for sign, term in parts[1:]:
            out += f" {sign} {term}"
        return out

    def __repr__(self) -> str:
        return f"Polynomial({self.to_text()})"


def _format_float(v: float) -> str:
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


class RationalFn:
    """Quotient of two polynomials; the denominator is never the zero polynomial."""

    __slots__ = ("num", "den")

    def __init__(self, num: Polynomial, den: Polynomial):
        if den.is_zero():
            raise ZeroDivisionError("zero denominator polynomial")
        if num.space != den.space:
            raise PolyError("numerator and denominator spaces differ")
        if den.is_constant():
            num = num * (1.0 / den.constant_value())
            den = Polynomial.const(num.space, 1.0)
        object.__setattr__(self, "num", num)
        object.__setattr__(self, "den", den)

    def __setattr__(self, name: str, value: object) -> None:
        raise AttributeError("RationalFn is immutable")

    @property
    def space(self) -> VarSpace:
        return self.num.space

    def is_polynomial(self) -> bool:
        return self.den.is_constant()

    def as_polynomial(self) -> Polynomial:
        if not self.is_polynomial():
            raise PolyError("denominator is not constant")
        return self.num / self.den.constant_value()  # type: ignore[return-value]

    @staticmethod
    def _coerce(space: VarSpace, value: Union["RationalFn", Polynomial, float, int]) -> "RationalFn":
        if isinstance(value, RationalFn):
            return value
        if isinstance(value, Polynomial):
            return RationalFn(value, Polynomial.const(space, 1.0))
        return RationalFn(
            Polynomial.const(space, float(value)), Polynomial.const(space, 1.0)
        )

    def __add__(self, other: Union["RationalFn", Polynomial, float, int]) -> "RationalFn":
        o = self._coerce(self.space, other)
        return RationalFn(self.num * o.den + o.num * self.den, self.den * o.den)

    __radd__ = __add__

    def __neg__(self) -> "RationalFn":
        return RationalFn(-self.num, self.den)

    def __sub__(self, other: Union["RationalFn", Polynomial, float, int]) -> "RationalFn":
        return self + (-self._coerce(self.space, other))

    def __rsub__(self, other: Union[Polynomial, float, int]) -> "RationalFn":
        return self._coerce(self.space, other) - self

    def __mul__(self, other: Union["RationalFn", Polynomial, float, int]) -> "RationalFn":
        o = self._coerce(self.space, other)
        return RationalFn(self.num * o.num, self.den * o.den)

    __rmul__ = __mul__

    def __truediv__(self, other: Union["RationalFn", Polynomial, float, int]) -> "RationalFn":
        o = self._coerce(self.space, other)
        return RationalFn(self.num * o.den, self.den * o.num)

    def differentiate(self, index: int) -> "RationalFn":
        """Quotient rule, left uncancelled: (n' d - n d') / d^2."""
        n, d = self.num, self.den
        return RationalFn(
            n.differentiate(index) * d - n * d.differentiate(index), d * d
        )

    def evaluate(self, point: Sequence[float]) -> float:
        dv = self.den.evaluate(point)
        if dv == 0.0:
            raise ZeroDivisionError("denominator vanishes at evaluation point")
        return self.num.evaluate(point) / dv

    def substitute(
        self, mapping: Mapping[int, Union[Polynomial, "RationalFn", float, int]]
    ) -> Union[Polynomial, "RationalFn"]:
        new_num = self.num.substitute(mapping)
        new_den = self.den.substitute(mapping)
        out = RationalFn._coerce_div(new_num, new_den)
        if isinstance(out, RationalFn) and out.den.is_constant():
            return out.as_polynomial()
        return out

    @staticmethod
    def _coerce_div(a, b):
        ra = a if isinstance(a, RationalFn) else RationalFn(a, Polynomial.const(a.space, 1.0))
        rb = b if isinstance(b, RationalFn) else RationalFn(b, Polynomial.const(b.space, 1.0))
        return ra / rb

    def fix(self, values: Mapping[int, float]) -> Union[Polynomial, "RationalFn"]:
        num = self.num.fix(values)
        den = self.den.fix(values)
        if den.is_constant():
            return num / den.constant_value()
        return RationalFn(num, den)

    def almost_equal(self, other: Union["RationalFn", Polynomial], tol: float = 1e-9) -> bool:
        o = self._coerce(self.space, other)
        lhs = self.num * o.den
        rhs = o.num * self.den
        return lhs.almost_equal(rhs, tol)

    def to_text(self, lower_name: str = "y") -> str:
        if self.is_polynomial():
            return self.as_polynomial().to_text(lower_name)
        return f"({self.num.to_text(lower_name)}) / ({self.den.to_text(lower_name)})"

    def __repr__(self) -> str:
        return f"RationalFn({self.to_text()})"


PolyLike = Union[Polynomial, RationalFn]


class PolyMatrix:
    """Small dense matrix of polynomials sharing one space."""

    __slots__ = ("rows", "space")

    def __init__(self, rows: Sequence[Sequence[Polynomial]]):
        grid = tuple(tuple(r) for r in rows)
        if not grid or not grid[0]:
            raise PolyError("matrix must be nonempty")
        width = len(grid[0])
        space = grid[0][0].space
        for r in grid:
            if len(r) != width:
                raise PolyError("ragged polynomial matrix")
            for p in r:
                if p.space != space:
                    raise PolyError("matrix entries live in different spaces")
        object.__setattr__(self, "rows", grid)
        object.__setattr__(self, "space", space)

    def __setattr__(self, name: str, value: object) -> None:
        raise AttributeError("PolyMatrix is immutable")

    @property
    def shape(self) -> Tuple[int, int]:
        return (len(self.rows), len(self.rows[0]))

    def __getitem__(self, idx: Tuple[int, int]) -> Polynomial:
        return self.rows[idx[0]][idx[1]]

    def transpose(self) -> "PolyMatrix":
        m, n = self.shape
        return PolyMatrix([[self.rows[i][j] for i in range(m)] for j in range(n)])

    @property
    def T(self) -> "PolyMatrix":
        return self.transpose()

    def matmul(self, other: "PolyMatrix") -> "PolyMatrix":
        m, k = self.shape
        k2, n = other.shape
        if k != k2:
            raise PolyError(f"shape mismatch {self.shape} @ {other.shape}")
        zero = Polynomial.zero(self.space)
        out = []
        for i in range(m):
            row = []
            for j in range(n):
                acc = zero
                for t in range(k):
                    acc = acc + self.rows[i][t] * other.rows[t][j]
                row.append(acc)
            out.append(row)
        return PolyMatrix(out)

    def __matmul__(self, other: "PolyMatrix") -> "PolyMatrix":
        return self.matmul(other)

    def matvec(self, vec: Sequence[Polynomial]) -> Tuple[Polynomial, ...]:
        m, k = self.shape
        if len(vec) != k:
            raise PolyError("vector length mismatch")
        zero = Polynomial.zero(self.space)
        out = []
        for i in range(m):
            acc = zero
            for t in range(k):
                acc = acc + self.rows[i][t] * vec[t]
            out.append(acc)
        return tuple(out)

    def evaluate(self, point: Sequence[float]) -> np.ndarray:
        m, n = self.shape
        return np.array(
            [[self.rows[i][j].evaluate(point) for j in range(n)] for i in range(m)]
        )

    def adjugate_det(self) -> Tuple["PolyMatrix", Polynomial]:
        """Adjugate matrix and determinant, via memoized cofactor expansion.

        Capped at 8x8: the closed-form multiplier expressions this feeds are
        already far past practical degree growth at that size.
        """
        m, n = self.shape
        if m != n:
            raise PolyError("adjugate requires a square matrix")
        if m > ADJUGATE_DIM_CAP:
            raise PolyError(
                f"adjugate/determinant supported up to {ADJUGATE_DIM_CAP}x{ADJUGATE_DIM_CAP}, got {m}x{m}"
            )
        space = self.space
        memo: Dict[Tuple[Tuple[int, ...], Tuple[int, ...]], Polynomial] = {}

        def minor_det(rws: Tuple[int, ...], cls_: Tuple[int, ...]) -> Polynomial:
            key = (rws, cls_)
            hit = memo.get(key)
            if hit is not None:
                return hit
            if len(rws) == 1:
                out = self.rows[rws[0]][cls_[0]]
            else:
                out = Polynomial.zero(space)
                r0 = rws[0]
                rest = rws[1:]
                for pos, c in enumerate(cls_):
                    entry = self.rows[r0][c]
                    if entry.is_zero():
                        continue
                    sub = minor_det(rest, cls_[:pos] + cls_[pos + 1 :])
                    piece = entry * sub
                    out = out + (piece if pos % 2 == 0 else -piece)
            memo[key] = out
            return out

        all_idx = tuple(range(m))
        det = minor_det(all_idx, all_idx)
        if m == 1:
            adj = PolyMatrix([[Polynomial.const(space, 1.0)]])
            return adj, det
        adj_rows = []
        for j in range(m):
            row = []
            for i in range(m):
                rws = tuple(r for r in all_idx if r != i)
                cls_ = tuple(c for c in all_idx if c != j)
                cof = minor_det(rws, cls_)
                row.append(cof if (i + j) % 2 == 0 else -cof)
            adj_rows.append(row)
        return PolyMatrix(adj_rows), det

    def __repr__(self) -> str:
        m, n = self.shape
        return f"PolyMatrix({m}x{n})"


def poly_dot(a: Sequence[Polynomial], b: Sequence[Polynomial]) -> Polynomial:
    if len(a) != len(b) or not a:
        raise PolyError("dot product needs equal nonempty lengths")
    acc = Polynomial.zero(a[0].space)
    for u, v in zip(a, b):
        acc = acc + u * v
    return acc
