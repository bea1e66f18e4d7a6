"""Runtime values and the type-feedback lattice.

Values are boxed, vectorized and immutable. A scalar is a vector of length one.

Feedback types are kept as small bitmasks so the interpreter can record with a
single ``|=``; :class:`FeedbackType` is the interned, user-facing view of one
mask. The lattice is finite (30 elements) so every element is built once at
import time.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Iterable, NamedTuple, Optional


class Kind(IntEnum):
    """Primitive kinds, ordered by arithmetic promotion."""

    LOGICAL = 0
    INTEGER = 1
    DOUBLE = 2


LGL, INT, DBL = Kind.LOGICAL, Kind.INTEGER, Kind.DOUBLE

INT_MAX = 2147483647  # R integers are 32-bit; -2^31 is reserved for NA

_PY_TYPE = {LGL: bool, INT: int, DBL: float}


class Value(NamedTuple):
    """A boxed vector. ``data`` is a tuple of Python bools, ints or floats."""

    kind: Kind
    data: tuple
    tag: Optional[str] = None

    @property
    def is_scalar(self) -> bool:
        return len(self.data) == 1

    def __repr__(self) -> str:
        return render_value(self)


def make_value(kind: Kind, items: Iterable, tag: Optional[str] = None) -> Value:
    """Checked constructor; coerces every element to the kind's Python type."""
    kind = Kind(kind)
    if tag is not None and (not isinstance(tag, str) or not tag):
        raise ValueError("class tag must be a nonempty string")
    conv = _PY_TYPE[kind]
    return Value(kind, tuple(conv(x) for x in items), tag)


def integer(*xs: int, tag: Optional[str] = None) -> Value:
    return make_value(INT, xs, tag)


def double(*xs: float, tag: Optional[str] = None) -> Value:
    return make_value(DBL, xs, tag)


def logical(*xs: bool, tag: Optional[str] = None) -> Value:
    return make_value(LGL, xs, tag)


NULL = Value(LGL, ())  # stands in for R's NULL (value of loops, empty blocks)


def render_value(v: Value) -> str:
    def fmt(x):
        if v.kind is LGL:
            return "TRUE" if x else "FALSE"
        if v.kind is INT:
            return f"{x}L"
        return repr(x)

    body = ", ".join(fmt(x) for x in v.data)
    core = body if len(v.data) == 1 else f"c({body})"
    if not v.data:
        core = "NULL"
    if v.tag is not None:
        return f'structure({core}, class="{v.tag}")'
    return core


# ---------------------------------------------------------------------------
# Feedback lattice
#
# bit 0..2  kinds seen (LGL, INT, DBL)
# bit 3     some non-scalar value seen      (scalar_only == not bit3)
# bit 4     some class-tagged value seen    (attr_seen)
# bit 5     Top
# mask 0 is Bottom.

KIND_BIT = {LGL: 1, INT: 2, DBL: 4}
KIND_MASK = 7
NONSCALAR_BIT = 8
ATTR_BIT = 16
TOP_BITS = 32
BOTTOM_BITS = 0


class State(Enum):
    BOTTOM = "bottom"
    PARTIAL = "partial"
    TOP = "top"


@dataclass(frozen=True, eq=False, repr=False)
class FeedbackType:
    """Interned lattice element; compare with ``==`` or ``is`` alike."""

    kinds: frozenset
    scalar_only: bool
    attr_seen: bool
    state: State
    bits: int

    @staticmethod
    def of(bits: int) -> "FeedbackType":
        return _BY_BITS[bits]

    @staticmethod
    def partial(kinds: Iterable[Kind], scalar_only: bool = True, attr_seen: bool = False) -> "FeedbackType":
        b = 0
        for k in kinds:
            b |= KIND_BIT[Kind(k)]
        if not b:
            raise ValueError("a Partial feedback type needs at least one kind")
        if not scalar_only:
            b |= NONSCALAR_BIT
        if attr_seen:
            b |= ATTR_BIT
        return _BY_BITS[b]

    @property
    def is_bottom(self) -> bool:
        return self.bits == BOTTOM_BITS

    @property
    def is_top(self) -> bool:
        return self.bits == TOP_BITS

    @property
    def monomorphic(self) -> bool:
        return self.state is State.PARTIAL and len(self.kinds) == 1

    @property
    def unboxable(self) -> bool:
        """Monomorphic scalar Integer or Double without a class tag."""
        return self.bits in (KIND_BIT[INT], KIND_BIT[DBL])

    @property
    def single_kind(self) -> Optional[Kind]:
        return next(iter(self.kinds)) if len(self.kinds) == 1 else None

    def __hash__(self) -> int:
        return self.bits

    def __eq__(self, other) -> bool:
        return isinstance(other, FeedbackType) and other.bits == self.bits

    def __repr__(self) -> str:
        return render_feedback(self)


def _build(bits: int) -> FeedbackType:
    if bits == BOTTOM_BITS:
        return FeedbackType(frozenset(), True, False, State.BOTTOM, bits)
    if bits == TOP_BITS:
        return FeedbackType(frozenset(Kind), False, True, State.TOP, bits)
    kinds = frozenset(k for k, b in KIND_BIT.items() if bits & b)
    return FeedbackType(kinds, not bits & NONSCALAR_BIT, bool(bits & ATTR_BIT), State.PARTIAL, bits)


_BY_BITS = {}
for _b in range(TOP_BITS + 1):
    if _b in (BOTTOM_BITS, TOP_BITS) or _b & KIND_MASK:
        _BY_BITS[_b] = _build(_b)

BOTTOM = _BY_BITS[BOTTOM_BITS]
TOP = _BY_BITS[TOP_BITS]
ALL_FEEDBACK_TYPES = tuple(_BY_BITS.values())
PARTIAL_TYPES = tuple(t for t in ALL_FEEDBACK_TYPES if t.state is State.PARTIAL)


def merge_bits(a: int, b: int) -> int:
    if a == TOP_BITS or b == TOP_BITS:
        return TOP_BITS
    return a | b


def bits_of(v) -> int:
    """Feedback bits of a boxed Value or of a raw Python scalar."""
    t = type(v)
    if t is Value:
        b = KIND_BIT[v.kind]
        if len(v.data) != 1:
            b |= NONSCALAR_BIT
        if v.tag is not None:
            b |= ATTR_BIT
        return b
    if t is int:
        return 2
    if t is float:
        return 4
    if t is bool:
        return 1
    raise TypeError(f"not a MiniDyn value: {v!r}")


def type_of(v) -> FeedbackType:
    return _BY_BITS[bits_of(v)]


def merge(a: FeedbackType, b: FeedbackType) -> FeedbackType:
    return _BY_BITS[merge_bits(a.bits, b.bits)]


def merge_all(types: Iterable[FeedbackType]) -> FeedbackType:
    acc = BOTTOM_BITS
    for t in types:
        acc = merge_bits(acc, t.bits)
    return _BY_BITS[acc]


def is_subtype(a: FeedbackType, b: FeedbackType) -> bool:
    return merge_bits(a.bits, b.bits) == b.bits


class Verdict(Enum):
    EQUAL = "equal"
    NARROWER = "narrower"
    CHANGED = "changed"


@dataclass(frozen=True)
class Comparison:
    verdict: Verdict
    optimizable: bool


def is_optimizable(sampled: FeedbackType, compiled: FeedbackType) -> bool:
    if sampled.unboxable and not compiled.unboxable:
        return True
    return not sampled.attr_seen and compiled.attr_seen


def compare(sampled: FeedbackType, compiled: FeedbackType) -> Comparison:
    if sampled.state is not State.PARTIAL:
        raise ValueError(f"cannot compare a {sampled.state.value} sampled type")
    if sampled == compiled:
        return Comparison(Verdict.EQUAL, False)
    if is_subtype(sampled, compiled):
        verdict = Verdict.NARROWER
    else:
        verdict = Verdict.CHANGED
    return Comparison(verdict, is_optimizable(sampled, compiled))


# ---------------------------------------------------------------------------
# Textual form: [int(s)], [dbl(s), int(s)], [dbl(v)], [dbl(s)+attr], [<?>]

_KIND_NAME = {LGL: "lgl", INT: "int", DBL: "dbl"}
_NAME_KIND = {v: k for k, v in _KIND_NAME.items()}


def render_feedback(t: FeedbackType) -> str:
    if t.is_bottom:
        return "[<?>]"
    if t.is_top:
        return "[*]"
    shape = "(s)" if t.scalar_only else "(v)"
    items = [_KIND_NAME[k] + shape for k in sorted(t.kinds, key=lambda k: _KIND_NAME[k])]
    if t.attr_seen:
        items[-1] += "+attr"
    return "[" + ", ".join(items) + "]"


_ITEM = re.compile(r"^(lgl|int|dbl)\((s|v)\)(\+attr)?$")


def parse_feedback(text: str) -> FeedbackType:
    text = text.strip()
    if text == "[<?>]":
        return BOTTOM
    if text == "[*]":
        return TOP
    if not (text.startswith("[") and text.endswith("]")):
        raise ValueError(f"bad feedback type: {text!r}")
    kinds, shapes, attr = [], set(), False
    for item in text[1:-1].split(","):
        m = _ITEM.match(item.strip())
        if not m:
            raise ValueError(f"bad feedback item: {item!r}")
        kinds.append(_NAME_KIND[m.group(1)])
        shapes.add(m.group(2))
        attr = attr or bool(m.group(3))
    if len(shapes) != 1:
        raise ValueError(f"mixed scalar flags in {text!r}")
    return FeedbackType.partial(kinds, scalar_only=shapes == {"s"}, attr_seen=attr)
