"""Value semantics shared by both tiers.

Scalar kernels operate on raw Python ``bool``/``int``/``float``; the vector
operations apply the same kernels elementwise, so an unboxed fast path in
tier 2 computes bit-identical results to the boxed path in tier 1.
"""

from __future__ import annotations

import math
from typing import Callable, Dict, Sequence, Tuple

from .bytecode import (ADD, ARITH_OPS, BINOP_NAMES, BUILTIN_NAMES, DIV, EQ, GE, GT, LE, LT,
                       MOD, MUL, NE, POW, SUB)
from .values import DBL, INT, INT_MAX, LGL, Kind, Value

NAN = float("nan")
INF = float("inf")


class MiniDynError(Exception):
    """A runtime error raised by the program being executed."""


class LengthMismatch(MiniDynError):
    pass


# --- boxing -----------------------------------------------------------------

def box(v) -> Value:
    t = type(v)
    if t is Value:
        return v
    if t is int:
        return Value(INT, (v,))
    if t is float:
        return Value(DBL, (v,))
    if t is bool:
        return Value(LGL, (v,))
    raise TypeError(f"cannot box {v!r}")


def truth(v) -> bool:
    t = type(v)
    if t is Value:
        if not v.data:
            raise MiniDynError("argument is of length zero")
        return bool(v.data[0])
    return bool(v)


# --- scalar kernels ---------------------------------------------------------

def clamp(r):
    """Integer results outside the 32-bit range become doubles."""
    return r if -INT_MAX <= r <= INT_MAX else float(r)


def div(a, b):
    try:
        return a / b
    except ZeroDivisionError:
        a = float(a)
        if a == 0 or a != a:
            return NAN
        return math.copysign(INF, a) * math.copysign(1.0, float(b))


def mod(a, b):
    try:
        return a % b
    except ZeroDivisionError:
        return NAN


def power(a, b):
    a, b = float(a), float(b)
    try:
        r = a ** b
    except OverflowError:
        return INF
    except ZeroDivisionError:
        return INF
    if isinstance(r, complex):
        return NAN
    return r


def powk(a, k: int):
    """``a ^ k`` for a literal small exponent, by repeated multiplication."""
    a = float(a)
    r = 1.0
    for _ in range(k):
        r *= a
    return r


def _add(a, b):
    return a + b


def _sub(a, b):
    return a - b


def _mul(a, b):
    return a * b


SCALAR_OPS: Dict[int, Callable] = {
    ADD: _add, SUB: _sub, MUL: _mul, DIV: div, MOD: mod, POW: power,
    LT: lambda a, b: a < b, LE: lambda a, b: a <= b, GT: lambda a, b: a > b,
    GE: lambda a, b: a >= b, EQ: lambda a, b: a == b, NE: lambda a, b: a != b,
}


def result_kind(op: int, ka: Kind, kb: Kind) -> Kind:
    if op in ARITH_OPS:
        if op in (DIV, POW):
            return DBL
        k = ka if ka > kb else kb
        return INT if k is LGL else k
    return LGL


def _finish(kind: Kind, out: list, tag) -> Value:
    if kind is INT:
        for x in out:
            if type(x) is not int:
                return Value(DBL, tuple(float(y) for y in out), tag)
    elif kind is DBL:
        return Value(DBL, tuple(float(y) for y in out), tag)
    return Value(kind, tuple(out), tag)


def direct_binop(op: int, a: Value, b: Value) -> Value:
    """Elementwise binary operation with R recycling of a scalar side."""
    da, db = a.data, b.data
    na, nb = len(da), len(db)
    if na == 1 and nb == 1:
        # Scalar fast path; must agree with the general path below.
        tag = a.tag if a.tag is not None else b.tag
        x = SCALAR_OPS[op](da[0], db[0])
        if op > POW:
            return Value(LGL, (x,), tag)
        if op == DIV or op == POW or a.kind is DBL or b.kind is DBL:
            return Value(DBL, (float(x),), tag)
        if type(x) is int and -INT_MAX <= x <= INT_MAX:
            return Value(INT, (x,), tag)
        return Value(DBL, (float(x),), tag)
    kind = result_kind(op, a.kind, b.kind)
    tag = a.tag if a.tag is not None else b.tag
    f = SCALAR_OPS[op]
    if na != nb and na != 1 and nb != 1:
        raise LengthMismatch(f"vector lengths differ: {na} vs {nb} in '{BINOP_NAMES[op]}'")
    elif na == 0 or nb == 0:
        return Value(kind, (), tag)
    elif na == 1:
        x = da[0]
        out = [f(x, y) for y in db]
    elif nb == 1:
        y = db[0]
        out = [f(x, y) for x in da]
    else:
        out = [f(x, y) for x, y in zip(da, db)]
    if kind is INT:
        out = [clamp(x) if type(x) is int else x for x in out]
    return _finish(kind, out, tag)


# --- dispatch for class-tagged operands ---------------------------------------

# Implicit class chains, as R reports them for untagged values.
IMPLICIT_CLASS = {LGL: ("logical",), INT: ("integer", "numeric"), DBL: ("double", "numeric")}

# Method table: (generic, class) -> implementation. MiniDyn programs cannot
# define methods, so lookups always fall through to the default method, but
# they are performed for real.
METHODS: Dict[Tuple[str, str], Callable] = {}


def _class_chain(v: Value) -> Tuple[str, ...]:
    implicit = IMPLICIT_CLASS[v.kind]
    return (v.tag,) + implicit if v.tag is not None else implicit


def resolve_method(op: int, a: Value, b: Value) -> Callable:
    generic = BINOP_NAMES[op]
    group = "Ops"
    for operand in (a, b):
        for cls in _class_chain(operand):
            for name in (f"{generic}.{cls}", f"{group}.{cls}"):
                m = METHODS.get((name, cls))
                if m is not None:
                    return m
    return METHODS.get((f"{generic}.default", "default"), direct_binop)


def dispatch_binop(op: int, a, b) -> Value:
    """Binary operation through method lookup; used whenever a tag may be present."""
    a, b = box(a), box(b)
    return resolve_method(op, a, b)(op, a, b)


def vector_binop(op: int, a: Value, b: Value) -> Value:
    """Tier-1 entry point: tagged operands take the dispatch slow path."""
    if a.tag is not None or b.tag is not None:
        return dispatch_binop(op, a, b)
    return direct_binop(op, a, b)


def generic_binop(op: int, a, b) -> Value:
    """Tier-2 op on operands known to carry no tag but not known to be scalars."""
    if type(a) is not Value:
        a = box(a)
    if type(b) is not Value:
        b = box(b)
    return direct_binop(op, a, b)


def negate(v) -> Value:
    v = box(v)
    if v.kind is DBL:
        return Value(DBL, tuple(-x for x in v.data), v.tag)
    return Value(INT, tuple(-int(x) for x in v.data), v.tag)


def powk_value(v, k: int) -> Value:
    v = box(v)
    return Value(DBL, tuple(powk(x, k) for x in v.data), v.tag)


# --- loops, indexing --------------------------------------------------------

def for_range(lo, hi) -> Tuple[int, int, int]:
    """(first, stop, step) for ``lo:hi``; iteration ends when cur == stop."""
    lo, hi = box(lo), box(hi)
    if len(lo.data) != 1 or len(hi.data) != 1:
        raise MiniDynError("for-loop bounds must be scalars")
    a, b = lo.data[0], hi.data[0]
    if not (math.isfinite(a) and math.isfinite(b)):
        raise MiniDynError("for-loop bounds must be finite")
    if float(a) != int(a):
        raise MiniDynError("for-loop lower bound must be a whole number")
    a = int(a)
    step = 1 if b >= a else -1
    last = a + int(math.floor(b - a)) if step == 1 else a - int(math.floor(a - b))
    return a, last + step, step


def _position(i, n: int) -> int:
    i = box(i)
    if len(i.data) != 1:
        raise MiniDynError("index must be a scalar")
    x = i.data[0]
    if x != x or float(x) != int(x):
        raise MiniDynError("index must be a whole number")
    return int(x)


def index(x, i) -> Value:
    x = box(x)
    k = _position(i, len(x.data))
    if not 1 <= k <= len(x.data):
        raise MiniDynError(f"subscript {k} out of bounds (length {len(x.data)})")
    return Value(x.kind, (x.data[k - 1],))


def set_index(x, i, v) -> Value:
    x, v = box(x), box(v)
    k = _position(i, len(x.data))
    if len(v.data) != 1:
        raise MiniDynError("replacement has length != 1")
    if not 1 <= k <= len(x.data) + 1:
        raise MiniDynError(f"subscript {k} out of bounds (length {len(x.data)})")
    kind = x.kind if x.kind >= v.kind else v.kind
    conv = {LGL: bool, INT: int, DBL: float}[kind]
    data = [conv(y) for y in x.data] if kind != x.kind else list(x.data)
    elem = conv(v.data[0])
    if k == len(data) + 1:
        data.append(elem)
    else:
        data[k - 1] = elem
    return Value(kind, tuple(data), x.tag)


# --- builtins -----------------------------------------------------------------

def _b_c(*args: Value) -> Value:
    kind = max(a.kind for a in args)
    conv = {LGL: bool, INT: int, DBL: float}[kind]
    return Value(kind, tuple(conv(x) for a in args for x in a.data))


def _b_structure(v: Value, tagger: Value) -> Value:
    return Value(v.kind, v.data, tagger.tag)


def _b_length(v: Value) -> Value:
    return Value(INT, (len(v.data),))


def _b_sum(v: Value) -> Value:
    if v.kind is DBL:
        return Value(DBL, (float(sum(v.data)),))
    return box(clamp(int(sum(v.data))))


def _b_sqrt(v: Value) -> Value:
    return Value(DBL, tuple(math.sqrt(x) if x >= 0 else NAN for x in v.data))


def _b_abs(v: Value) -> Value:
    if v.kind is DBL:
        return Value(DBL, tuple(abs(x) for x in v.data))
    return Value(INT, tuple(abs(int(x)) for x in v.data))


def _b_floor(v: Value) -> Value:
    return Value(DBL, tuple(float(math.floor(x)) if math.isfinite(x) else float(x) for x in v.data))


def _count(n: Value) -> int:
    if len(n.data) != 1 or n.data[0] != n.data[0] or n.data[0] < 0:
        raise MiniDynError("invalid length argument")
    return int(n.data[0])


def _b_rep(v: Value, n: Value) -> Value:
    return Value(v.kind, v.data * _count(n))


def _b_numeric(n: Value) -> Value:
    return Value(DBL, (0.0,) * _count(n))


def _b_integer(n: Value) -> Value:
    return Value(INT, (0,) * _count(n))


def _b_as_integer(v: Value) -> Value:
    out = []
    for x in v.data:
        if x != x or abs(x) > INT_MAX:
            raise MiniDynError("value out of integer range")
        out.append(int(x))
    return Value(INT, tuple(out))


def _b_as_double(v: Value) -> Value:
    return Value(DBL, tuple(float(x) for x in v.data))


_IMPLS = {
    "c": _b_c, "structure": _b_structure, "length": _b_length, "sum": _b_sum, "sqrt": _b_sqrt,
    "abs": _b_abs, "floor": _b_floor, "rep": _b_rep, "numeric": _b_numeric,
    "integer": _b_integer, "as.integer": _b_as_integer, "as.double": _b_as_double,
}
BUILTINS: Tuple[Callable, ...] = tuple(_IMPLS[n] for n in BUILTIN_NAMES)


def call_builtin(bid: int, args: Sequence) -> Value:
    return BUILTINS[bid](*[box(a) for a in args])
