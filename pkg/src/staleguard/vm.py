"""Tier 1: the baseline bytecode interpreter, plus the VM state both tiers share.

Tier-1 code only ever sees boxed :class:`Value` objects. Tier-2 code may hand it
raw Python scalars (call arguments, return values); those are boxed on entry.

The VM is single-threaded. Interruptions from the sampling profiler are only
acted on at instruction boundaries, through :class:`Clock`.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

from . import bytecode as bc
from .bytecode import BaselineFunction, FeedbackOrigin, LoweredProgram
from .runtime import (MiniDynError, box, call_builtin, for_range, index, negate, powk_value,
                      set_index, truth, vector_binop)
from .values import (ATTR_BIT, BOTTOM_BITS, INT, KIND_BIT, NONSCALAR_BIT, TOP_BITS, FeedbackType,
                     Value, bits_of, merge_bits, render_feedback)

TIER_UP_THRESHOLD = 10
INF = float("inf")


class UnboundVariable(MiniDynError):
    pass


class GlobalEnv(dict):
    """Global bindings, name -> boxed Value."""

    def __missing__(self, name):
        raise UnboundVariable(f"object {name!r} not found")


class FeedbackTable:
    """Observed feedback of one baseline function, indexed by record site."""

    def __init__(self, fn: BaselineFunction):
        self.fn = fn
        self.bits: List[int] = [BOTTOM_BITS] * len(fn.record_sites)
        self.hits: List[int] = [0] * len(fn.record_sites)

    def __len__(self) -> int:
        return len(self.bits)

    def origins(self) -> List[FeedbackOrigin]:
        return list(self.fn.record_sites)

    def _site(self, origin: FeedbackOrigin) -> int:
        if origin.function_id != self.fn.id:
            raise KeyError(origin)
        op, arg = self.fn.code[origin.bytecode_offset]
        if op != bc.RECORD:
            raise KeyError(origin)
        return arg

    def observed(self, origin: FeedbackOrigin) -> FeedbackType:
        return FeedbackType.of(self.bits[self._site(origin)])

    def hit_count(self, origin: FeedbackOrigin) -> int:
        return self.hits[self._site(origin)]

    def snapshot(self) -> Dict[FeedbackOrigin, FeedbackType]:
        return {o: FeedbackType.of(b) for o, b in zip(self.fn.record_sites, self.bits)}

    def set(self, origin: FeedbackOrigin, t: FeedbackType) -> None:
        """Explicit assignment, e.g. to Top; never used by recording."""
        self.bits[self._site(origin)] = t.bits


def record_feedback(table: FeedbackTable, origin: FeedbackOrigin, v) -> None:
    k = table._site(origin)
    table.bits[k] = merge_bits(table.bits[k], bits_of(v))
    table.hits[k] += 1


class Clock:
    """Executed instruction units, and the unit count at which to interrupt.

    ``nf`` is infinite when no trigger is armed. Asynchronous trigger backends
    set it to -1 from their signal handler, which makes the next instruction
    boundary call ``fire``.
    """

    __slots__ = ("u", "nf", "fire")

    def __init__(self):
        self.u = 0
        self.nf = INF
        self.fire: Callable[[], None] = _no_fire


def _no_fire():
    pass


@dataclass
class FunctionState:
    base: BaselineFunction
    table: FeedbackTable
    calls: int = 0
    compiled: Optional["object"] = None  # the installed, valid CompiledFunction
    deopts: int = 0
    compile_failed: bool = False
    versions: int = 0


@dataclass
class Event:
    kind: str
    fields: tuple

    def __str__(self) -> str:
        return " ".join([self.kind, *map(str, self.fields)])


class VM:
    """Holds program, feedback, compiled code and the shadow-frame stack."""

    def __init__(self, program: LoweredProgram, *, tier_up_threshold: int = TIER_UP_THRESHOLD,
                 enable_tier2: bool = True, instrument_slots: bool = False):
        self.program = program
        self.globals = GlobalEnv()
        self.states = [FunctionState(f, FeedbackTable(f)) for f in program.functions]
        self.clock = Clock()
        # Activation records, innermost last. Tier-2 frames are lists whose
        # element 0 is the marker (the CompiledFunction) followed by the boxed
        # slots; tier-1 frames are ``(None, state)``.
        self.frames: List = []
        self.tier_up_threshold = tier_up_threshold
        self.enable_tier2 = enable_tier2
        self.instrument_slots = instrument_slots
        self.events: List[Event] = []
        self.log_events = True
        self.profiler = None  # set by Profiler.attach
        self.slot_observer = None  # set in full-instrumentation mode
        if sys.getrecursionlimit() < 20000:
            sys.setrecursionlimit(20000)

    # -- bookkeeping --------------------------------------------------------

    def log(self, kind: str, *fields) -> None:
        if self.log_events:
            self.events.append(Event(kind, fields))

    def state(self, name_or_id) -> FunctionState:
        if isinstance(name_or_id, str):
            return self.states[self.program.by_name[name_or_id]]
        return self.states[name_or_id]

    def invocation_count(self, name_or_id) -> int:
        return self.state(name_or_id).calls

    def deopt_count(self, name_or_id) -> int:
        return self.state(name_or_id).deopts

    def is_blacklisted(self, fid: int) -> bool:
        p = self.profiler
        return p is not None and p.is_blacklisted(fid)

    def tier_up_check(self, name_or_id) -> bool:
        st = self.state(name_or_id)
        return (self.enable_tier2 and st.calls >= self.tier_up_threshold and st.compiled is None
                and not st.compile_failed and st.base.name != bc.TOPLEVEL
                and not self.is_blacklisted(st.base.id))

    # -- entry points -------------------------------------------------------

    def run_toplevel(self) -> Value:
        top = self.states[-1]
        loc = [None] * top.base.nlocals
        return self._interpret(top, loc, [], 0)

    def call_function(self, name: str, args: Sequence = ()) -> Value:
        return box(self.call(self.program.by_name[name], tuple(args)))

    def call(self, fid: int, args) -> object:
        st = self.states[fid]
        st.calls += 1
        cf = st.compiled
        if cf is not None:
            return cf.entry(args)
        if st.calls >= self.tier_up_threshold and self.tier_up_check(fid):
            cf = self.tier_up(st)
            if cf is not None:
                return cf.entry(args)
        return self.interpret(st, args)

    def interpret(self, st: FunctionState, args) -> Value:
        loc = [None] * st.base.nlocals
        for i, a in enumerate(args):
            loc[i] = box(a)
        frames = self.frames
        frames.append((None, st))
        try:
            return self._interpret(st, loc, [], 0)
        finally:
            frames.pop()

    # -- tier transitions ---------------------------------------------------

    def tier_up(self, st: FunctionState):
        from .specializer import SpecializeError, specialize

        try:
            cf = specialize(st.base, st.table, {}, vm=self)
        except SpecializeError:
            st.compile_failed = True
            return None
        self.install(st, cf)
        self.log("TIERUP", st.base.name, cf.version)
        return cf

    def install(self, st: FunctionState, cf) -> None:
        old = st.compiled
        if old is not None:
            old.valid = False
        st.versions += 1
        cf.version = st.versions
        st.compiled = cf
        if self.profiler is not None:
            self.profiler.on_install(cf)

    def invalidate(self, cf) -> None:
        cf.valid = False
        st = self.states[cf.source_id]
        if st.compiled is cf:
            st.compiled = None

    def deopt(self, cf, offset: int, loc: Sequence, stack: Sequence, value) -> Value:
        """Leave optimized code and finish the activation in tier 1.

        ``offset`` is a RECORD (the failing value is the stack top it records)
        or a BINOP whose operand check failed (``value`` is its right operand).
        Called from inside the tier-2 activation, whose frame entry is replaced
        by a tier-1 one (the tier-2 code pops it on return). Re-executing from
        ``offset`` in tier 1 records the offending value in the baseline table.
        """
        st = self.states[cf.source_id]
        if value is None:  # a guarded local load found the variable unbound
            name = st.base.local_names[st.base.code[offset - 1][1]]
            raise UnboundVariable(f"object {name!r} not found")
        st.deopts += 1
        cf.deopted_at = offset
        self.invalidate(cf)
        self.log("DEOPT", st.base.name, offset, render_feedback(FeedbackType.of(bits_of(value))))
        if self.profiler is not None:
            self.profiler.on_deopt(st.base.id)
        nvis = st.base.n_visible
        tloc = [box(x) if (x is not None and i < nvis) else x for i, x in enumerate(loc)]
        tstack = [box(x) for x in stack]
        tstack.append(box(value))
        self.frames[-1] = (None, st)
        return self._interpret(st, tloc, tstack, offset)

    def observe_slot(self, frame: list, slot: int, value) -> None:
        """Full-instrumentation hook: every boxed value written to a slot."""
        obs = self.slot_observer
        if obs is not None:
            obs(frame[0], slot, value)

    # -- the interpreter loop ---------------------------------------------

    def _interpret(self, st: FunctionState, loc: list, stack: list, pc: int) -> Value:
        f = st.base
        code = f.code
        consts = f.constants
        fb = st.table.bits
        hits = st.table.hits
        G = self.globals
        clk = self.clock
        push = stack.append
        pop = stack.pop
        call = self.call
        u = clk.u
        while True:
            op, arg = code[pc]
            pc += 1
            u += 1
            if u >= clk.nf:
                clk.u = u
                clk.fire()
            if op == 6:  # RECORD
                v = stack[-1]
                b = fb[arg]
                if b != TOP_BITS:
                    nb = KIND_BIT[v.kind]
                    if len(v.data) != 1:
                        nb |= NONSCALAR_BIT
                    if v.tag is not None:
                        nb |= ATTR_BIT
                    fb[arg] = b | nb
                hits[arg] += 1
            elif op == 1:  # LDLOC
                v = loc[arg]
                if v is None:
                    raise UnboundVariable(f"object {f.local_names[arg]!r} not found")
                push(v)
            elif op == 2:  # LDGLOB
                push(G[arg])
            elif op == 0:  # CONST
                push(consts[arg])
            elif op == 7:  # BINOP
                b = pop()
                stack[-1] = vector_binop(arg, stack[-1], b)
            elif op == 3:  # STLOC
                loc[arg] = stack[-1]
            elif op == 5:  # POP
                pop()
            elif op == 14:  # JUMP
                pc = arg
            elif op == 17:  # FORNEXT
                h = arg[0]
                cur = loc[h]
                if cur == loc[h + 1]:
                    pc = arg[1]
                else:
                    push(Value(INT, (cur,)))
                    loc[h] = cur + loc[h + 2]
            elif op == 15:  # JUMPF
                if not truth(pop()):
                    pc = arg
            elif op == 10:  # CALL
                fid, n = arg
                args = stack[len(stack) - n:]
                del stack[len(stack) - n:]
                clk.u = u
                r = call(fid, args)
                u = clk.u
                push(r if type(r) is Value else box(r))
            elif op == 4:  # STGLOB
                G[arg] = stack[-1]
            elif op == 18:  # RET
                clk.u = u
                return stack[-1]
            elif op == 11:  # BUILTIN
                bid, n = arg
                args = stack[len(stack) - n:]
                del stack[len(stack) - n:]
                push(call_builtin(bid, args))
            elif op == 12:  # INDEX
                i = pop()
                stack[-1] = index(stack[-1], i)
            elif op == 13:  # SETINDEX
                v = pop()
                i = pop()
                stack[-1] = set_index(stack[-1], i, v)
            elif op == 8:  # NEG
                stack[-1] = negate(stack[-1])
            elif op == 9:  # POWK
                stack[-1] = powk_value(stack[-1], arg)
            elif op == 16:  # FORPREP
                hi = pop()
                lo = pop()
                loc[arg], loc[arg + 1], loc[arg + 2] = for_range(lo, hi)
            else:
                raise AssertionError(f"bad opcode {op}")

    # -- diagnostics --------------------------------------------------------

    def trace_feedback(self) -> List[str]:
        """``origin -> [type] (count)`` lines for every executed record site."""
        lines = []
        for st in self.states:
            for origin, b, n in zip(st.base.record_sites, st.table.bits, st.table.hits):
                if n:
                    lines.append(f"{st.base.name}#{origin.bytecode_offset} -> "
                                 f"{render_feedback(FeedbackType.of(b))} ({n})")
        return lines

