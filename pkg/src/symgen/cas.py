"""Canonical rational normal form and symbolic equivalence of expression trees.

Every expression is reduced to ``N/D`` where ``N`` and ``D`` are polynomials
over variables and *kernels*.  A kernel is a non-rational subterm (``sin``,
``cos``, ``exp``, ``log`` or a ``q``-th root) whose argument has itself been
canonicalized, so it can be treated as an opaque extra variable.  Coefficients
are exact ``Fraction``s (floating literals are converted exactly).

A few identities are applied while building kernels:

* ``exp(log(a)) -> a``, ``log(exp(a)) -> a``
* ``exp(c0 + n*m + ...) -> e^c0 * exp(m)^n`` for integer ``n``
* ``sin(-a) -> -sin(a)``, ``cos(-a) -> cos(a)``
* ``root_q(a)^q -> a``
* kernels of constant arguments are folded numerically
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from functools import lru_cache
from typing import Sequence

import numpy as np
import sympy

from .expr import ExprError, Node, evaluate, parse_prefix, prefix_text, variables

__all__ = [
    "CanonicalForm", "Equivalence", "canonicalize", "symbolically_equal",
    "canonical_key",
]

Mono = tuple  # tuple of (generator name, positive exponent), sorted by name
Poly = dict  # Mono -> Fraction

_ONE: Poly = {(): Fraction(1)}
_MAX_INT_POWER = 64
_MAX_ROOT_DEGREE = 12


class _Undefined(Exception):
    """Raised when an expression is undefined everywhere (e.g. ``x/0``)."""


# generator name -> (kind, argument as (num, den), root degree)
_KERNELS: dict[str, tuple[str, tuple[Poly, Poly], int]] = {}


def _mono_mul(a: Mono, b: Mono) -> Mono:
    if not a:
        return b
    if not b:
        return a
    d = dict(a)
    for g, e in b:
        d[g] = d.get(g, 0) + e
    return tuple(sorted(d.items()))


def _mono_order(m: Mono):
    return (sum(e for _, e in m), m)


def _padd(p: Poly, q: Poly, sign: int = 1) -> Poly:
    out = dict(p)
    for m, c in q.items():
        v = out.get(m, 0) + sign * c
        if v:
            out[m] = v
        else:
            out.pop(m, None)
    return out


def _pmul(p: Poly, q: Poly) -> Poly:
    if p is _ONE or p == _ONE:
        return dict(q)
    if q is _ONE or q == _ONE:
        return dict(p)
    out: Poly = {}
    for m1, c1 in p.items():
        for m2, c2 in q.items():
            m = _mono_mul(m1, m2)
            out[m] = out.get(m, 0) + c1 * c2
    return {m: c for m, c in out.items() if c}


def _ppow(p: Poly, n: int) -> Poly:
    out: Poly = dict(_ONE)
    base = p
    while n:
        if n & 1:
            out = _pmul(out, base)
        n >>= 1
        if n:
            base = _pmul(base, base)
    return out


def _pscale(p: Poly, c: Fraction) -> Poly:
    return {m: v * c for m, v in p.items()}


def _sympy_cancel(num: Poly, den: Poly) -> tuple[Poly, Poly]:
    gens = sorted({g for m in list(num) + list(den) for g, _ in m})
    index = {g: i for i, g in enumerate(gens)}
    syms = sympy.symbols(f"g0:{len(gens)}")

    def to_sympy(p: Poly) -> sympy.Poly:
        data = {}
        for m, c in p.items():
            exps = [0] * len(gens)
            for g, e in m:
                exps[index[g]] = e
            data[tuple(exps)] = sympy.Rational(c.numerator, c.denominator)
        return sympy.Poly.from_dict(data, syms, domain="QQ")

    def back(p: sympy.Poly) -> Poly:
        out: Poly = {}
        for exps, c in p.as_dict().items():
            m = tuple((gens[i], e) for i, e in enumerate(exps) if e)
            c = sympy.Rational(c)
            out[tuple(sorted(m))] = Fraction(int(c.p), int(c.q))
        return out

    p, q = to_sympy(num).cancel(to_sympy(den), include=True)
    return back(p), back(q)


def _normalize(num: Poly, den: Poly) -> tuple[Poly, Poly]:
    if not den:
        raise _Undefined("division by zero")
    if not num:
        return {}, dict(_ONE)
    # monomial content
    mins: dict[str, int] | None = None
    for m in list(num) + list(den):
        d = dict(m)
        if mins is None:
            mins = d
        else:
            mins = {g: min(e, d[g]) for g, e in mins.items() if g in d}
        if not mins:
            break
    if mins:
        def strip(p: Poly) -> Poly:
            out = {}
            for m, c in p.items():
                nm = tuple((g, e - mins.get(g, 0)) for g, e in m if e - mins.get(g, 0))
                out[nm] = c
            return out
        num, den = strip(num), strip(den)
    if len(num) > 1 and len(den) > 1:
        num, den = _sympy_cancel(num, den)
    # root_q(a)^q -> a
    for part in (num, den):
        for m in part:
            for g, e in m:
                kern = _KERNELS.get(g)
                if kern is not None and kern[0] == "root" and e >= kern[2]:
                    return _reduce_root(num, den, g)
    lead = den[max(den, key=_mono_order)]
    if lead != 1:
        inv = 1 / lead
        num, den = _pscale(num, inv), _pscale(den, inv)
    return num, den


def _reduce_root(num: Poly, den: Poly, g: str) -> tuple[Poly, Poly]:
    _, arg, q = _KERNELS[g]

    def subst(p: Poly) -> tuple[Poly, Poly]:
        acc: tuple[Poly, Poly] = ({}, dict(_ONE))
        for m, c in p.items():
            e = dict(m).get(g, 0)
            rest = tuple((h, k) for h, k in m if h != g)
            if e % q:
                rest = tuple(sorted(rest + ((g, e % q),)))
            term: tuple[Poly, Poly] = ({rest: c}, dict(_ONE))
            if e // q:
                powed = (_ppow(arg[0], e // q), _ppow(arg[1], e // q))
                term = (_pmul(term[0], powed[0]), powed[1])
            acc = (_padd(_pmul(acc[0], term[1]), _pmul(term[0], acc[1])), _pmul(acc[1], term[1]))
        return acc

    n_num, n_den = subst(num)
    d_num, d_den = subst(den)
    return _normalize(_pmul(n_num, d_den), _pmul(n_den, d_num))


RF = tuple  # (num Poly, den Poly), always normalized


def _const(value) -> RF:
    value = Fraction(value)
    return ({(): value}, dict(_ONE)) if value else ({}, dict(_ONE))


def _const_value(a: RF) -> Fraction | None:
    num, den = a
    if all(not m for m in num) and all(not m for m in den):
        return num.get((), Fraction(0)) / den[()]
    return None


def _add(a: RF, b: RF, sign: int = 1) -> RF:
    if a[1] == b[1]:
        return _normalize(_padd(a[0], b[0], sign), a[1])
    return _normalize(_padd(_pmul(a[0], b[1]), _pmul(b[0], a[1]), sign), _pmul(a[1], b[1]))


def _mul(a: RF, b: RF) -> RF:
    return _normalize(_pmul(a[0], b[0]), _pmul(a[1], b[1]))


def _div(a: RF, b: RF) -> RF:
    if not b[0]:
        raise _Undefined("division by zero")
    return _normalize(_pmul(a[0], b[1]), _pmul(a[1], b[0]))


def _ipow(a: RF, n: int) -> RF:
    if n < 0:
        if not a[0]:
            raise _Undefined("zero to a negative power")
        a = (a[1], a[0])
        n = -n
    return _normalize(_ppow(a[0], n), _ppow(a[1], n))


def _fold(fn, c: Fraction) -> RF:
    try:
        value = fn(float(c))
    except (ValueError, OverflowError):
        raise _Undefined(f"{fn.__name__}({float(c)})") from None
    if not math.isfinite(value):
        raise _Undefined(f"{fn.__name__}({float(c)})")
    return _const(Fraction(value))


def _poly_text(p: Poly) -> str:
    if not p:
        return "0"
    terms = []
    for m in sorted(p, key=_mono_order, reverse=True):
        factors = [str(p[m])] + [g if e == 1 else f"{g}^{e}" for g, e in m]
        terms.append("*".join(factors))
    return " + ".join(terms)


def _rf_text(a: RF) -> str:
    if a[1] == _ONE:
        return _poly_text(a[0])
    return f"({_poly_text(a[0])})/({_poly_text(a[1])})"


def _kernel(kind: str, arg: RF, q: int = 0) -> RF:
    label = f"root{q}" if kind == "root" else kind
    name = f"{label}[{_rf_text(arg)}]"
    if name not in _KERNELS:
        _KERNELS[name] = (kind, arg, q)
    return ({((name, 1),): Fraction(1)}, dict(_ONE))


def _is_int(c: Fraction, limit: int = _MAX_INT_POWER) -> bool:
    return c.denominator == 1 and abs(c.numerator) <= limit


def _exact_root(c: Fraction, q: int) -> Fraction | None:
    def iroot(n: int) -> int | None:
        r = round(n ** (1.0 / q))
        for cand in (r - 1, r, r + 1):
            if cand >= 0 and cand**q == n:
                return cand
        return None

    if c.numerator.bit_length() > 900 or c.denominator.bit_length() > 900:
        return None
    a, b = iroot(c.numerator), iroot(c.denominator)
    if a is None or b is None:
        return None
    return Fraction(a, b)


def _root(a: RF, q: int, p: int = 1) -> RF:
    c = _const_value(a)
    if c is not None:
        if c < 0:
            raise _Undefined("root of a negative constant")
        r = _exact_root(c, q)
        if r is None:
            r = Fraction(float(c) ** (1.0 / q))
        return _ipow(_const(r), p)
    return _ipow(_kernel("root", a, q), p)


def _exp(a: RF) -> RF:
    c = _const_value(a)
    if c is not None:
        return _fold(math.exp, c)
    if a[1] != _ONE:
        return _kernel("exp", a)
    out = _const(1)
    for m, coef in a[0].items():
        if not m:
            factor = _fold(math.exp, coef)
        elif _is_int(coef):
            kern = _KERNELS.get(m[0][0]) if len(m) == 1 and m[0][1] == 1 else None
            if kern is not None and kern[0] == "log":
                factor = _ipow(kern[1], int(coef))
            else:
                factor = _ipow(_kernel("exp", ({m: Fraction(1)}, dict(_ONE))), int(coef))
        else:
            factor = _kernel("exp", ({m: coef}, dict(_ONE)))
        out = _mul(out, factor)
    return out


def _log(a: RF) -> RF:
    c = _const_value(a)
    if c is not None:
        if c <= 0:
            raise _Undefined("log of a non-positive constant")
        return _fold(math.log, c)
    if a[1] == _ONE and len(a[0]) == 1:
        (m, coef), = a[0].items()
        kerns = [_KERNELS.get(g) for g, _ in m]
        if coef > 0 and all(k is not None and k[0] in ("exp", "root") for k in kerns):
            out = _fold(math.log, coef)
            for (g, e), kern in zip(m, kerns):
                if kern[0] == "exp":
                    out = _add(out, _mul(_const(e), kern[1]))
                else:
                    out = _add(out, _mul(_const(Fraction(e, kern[2])), _log(kern[1])))
            return out
    return _kernel("log", a)


def _trig(kind: str, a: RF) -> RF:
    c = _const_value(a)
    if c is not None:
        return _fold(math.sin if kind == "sin" else math.cos, c)
    num = a[0]
    if num[max(num, key=_mono_order)] < 0:
        neg = (_pscale(num, Fraction(-1)), a[1])
        k = _kernel(kind, neg)
        return (_pscale(k[0], Fraction(-1)), k[1]) if kind == "sin" else k
    return _kernel(kind, a)


def _power(a: RF, b: RF) -> RF:
    e = _const_value(b)
    if e is not None:
        if _is_int(e):
            return _ipow(a, int(e))
        if e.denominator <= _MAX_ROOT_DEGREE and abs(e.numerator) <= _MAX_INT_POWER:
            return _root(a, e.denominator, e.numerator)
        c = _const_value(a)
        if c is not None:
            if c < 0:
                raise _Undefined("negative base with fractional exponent")
            try:
                return _const(Fraction(float(c) ** float(e)))
            except (OverflowError, ZeroDivisionError):
                raise _Undefined("pow overflow") from None
    return _exp(_mul(b, _log(a)))


def _canon(node: Node) -> RF:
    t = node.token
    kind = t.kind
    if kind == "variable":
        return ({((t.name, 1),): Fraction(1)}, dict(_ONE))
    if kind == "literal":
        return _const(Fraction(t.value))
    if kind == "const":
        raise ExprError("unbound constant placeholder; bind constants before canonicalizing")
    args = [_canon(c) for c in node.children]
    name = t.name
    if name == "add":
        return _add(args[0], args[1])
    if name == "sub":
        return _add(args[0], args[1], -1)
    if name == "mul":
        return _mul(args[0], args[1])
    if name == "div":
        return _div(args[0], args[1])
    if name == "pow":
        return _power(args[0], args[1])
    if name.startswith("pow"):
        return _ipow(args[0], int(name[3:]))
    if name == "sqrt":
        return _root(args[0], 2)
    if name == "exp":
        return _exp(args[0])
    if name == "log":
        return _log(args[0])
    if name in ("sin", "cos"):
        return _trig(name, args[0])
    raise ExprError(f"cannot canonicalize token {name!r}")


def _freeze(p: Poly) -> tuple:
    return tuple((m, (p[m].numerator, p[m].denominator)) for m in sorted(p, key=_mono_order, reverse=True))


def _thaw(terms: tuple) -> Poly:
    return {m: Fraction(a, b) for m, (a, b) in terms}


@dataclass(frozen=True)
class CanonicalForm:
    """``num/den`` with the leading denominator coefficient equal to one."""

    num: tuple
    den: tuple
    undefined: bool = False

    @property
    def kernels(self) -> frozenset[str]:
        gens = {g for part in (self.num, self.den) for m, _ in part for g, _ in m}
        return frozenset(g for g in gens if "[" in g)

    @property
    def key(self) -> str:
        if self.undefined:
            return "undefined"
        return _rf_text((_thaw(self.num), _thaw(self.den)))

    def __str__(self) -> str:
        return self.key


@lru_cache(maxsize=65536)
def _canonicalize_text(text: str) -> CanonicalForm:
    if len(_KERNELS) > 200_000:
        _KERNELS.clear()
        _canonicalize_text.cache_clear()
    try:
        num, den = _canon(parse_prefix(text))
    except (_Undefined, ZeroDivisionError, OverflowError):
        return CanonicalForm((), (), True)
    return CanonicalForm(_freeze(num), _freeze(den))


def canonicalize(tree: Node) -> CanonicalForm:
    return _canonicalize_text(prefix_text(tree))


def canonical_key(tree: Node) -> str:
    return canonicalize(tree).key


class Equivalence(str, Enum):
    EQUAL = "Equal"
    NOT_EQUAL = "NotEqual"
    UNDECIDED = "Undecided"

    def __str__(self) -> str:
        return self.value


def _close_forms(a: CanonicalForm, b: CanonicalForm, rtol: float) -> tuple[bool, bool]:
    """(equal within rtol, cross-multiplied difference is exactly zero)."""
    left = _pmul(_thaw(a.num), _thaw(b.den))
    right = _pmul(_thaw(b.num), _thaw(a.den))
    diff = _padd(left, right, -1)
    if not diff:
        return True, True
    scale = max(abs(c) for c in list(left.values()) + list(right.values()))
    return max(abs(c) for c in diff.values()) <= rtol * scale, False


def symbolically_equal(f: Node, g: Node, domain: tuple[float, float] = (0.5, 2.5),
                       n_points: int = 30, rtol: float = 1e-9, seed: int = 0,
                       X: np.ndarray | None = None) -> Equivalence:
    """Decide equivalence of two constant-free trees.

    Identical canonical forms (or forms equal within ``rtol`` on their
    coefficients) are Equal.  Distinct kernel-free forms are NotEqual.  When
    kernels remain, a numeric falsifier on ``n_points`` random points decides
    NotEqual; agreement there only yields Undecided.
    """
    cf, cg = canonicalize(f), canonicalize(g)
    if cf.undefined or cg.undefined:
        return Equivalence.NOT_EQUAL
    if cf == cg:
        return Equivalence.EQUAL
    close, _ = _close_forms(cf, cg, rtol)
    if close:
        return Equivalence.EQUAL
    if not cf.kernels and not cg.kernels:
        return Equivalence.NOT_EQUAL
    if X is None:
        d = max(variables(f) | variables(g) | {1})
        X = np.random.default_rng(seed).uniform(domain[0], domain[1], size=(n_points, d))
    yf = evaluate(f, X, strict=False)
    yg = evaluate(g, X, strict=False)
    ok = np.isfinite(yf) & np.isfinite(yg)
    if np.any(~np.isclose(yf[ok], yg[ok], rtol=rtol, atol=1e-12)):
        return Equivalence.NOT_EQUAL
    return Equivalence.UNDECIDED


def equal_prefix(a: str | Sequence, b: str | Sequence, **kw) -> Equivalence:
    return symbolically_equal(parse_prefix(a), parse_prefix(b), **kw)
