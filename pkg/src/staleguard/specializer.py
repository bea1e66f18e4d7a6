"""Tier 2: type-specialized code generated from baseline bytecode plus feedback.

The specializer walks a baseline function once, tracking for each operand
stack entry a static *representation*:

    I D L   raw Python int / float / bool
    N       raw number of unknown kind (e.g. an Integer add that may overflow)
    B       boxed or raw, but certainly without a class tag
    A       anything

At every RECORD whose input is not statically raw it consults the effective
feedback (baseline feedback with sampled overrides applied) and either

* emits an unboxing guard (monomorphic scalar without a tag), or
* emits a no-attribute guard (tag never seen) so later ops skip dispatch, or
* leaves the value generic.

Values that stay boxed past a RECORD are written to a shadow-stack slot, one
slot per record site; the slot map ties each slot to its feedback origin.

A failing guard deoptimizes: locals and stack are reboxed and the baseline
interpreter resumes at the RECORD, which then records the offending value.

The result is rendered to Python source and ``exec``'d. Structured loops and
conditionals are rebuilt from the fixed lowering shapes, and each straight-line
segment charges its instruction count to the VM clock once its work is done.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import partial
from typing import Dict, List, Mapping, NamedTuple, Optional

from . import bytecode as bc
from . import runtime as rt
from .bytecode import BaselineFunction, FeedbackOrigin
from .values import (DBL, INT, INT_MAX, KIND_BIT, LGL, FeedbackType, Value, render_feedback)

_RAW = frozenset("IDLN")
_KIND_REP = {INT: "I", DBL: "D", LGL: "L"}
_REP_PYTYPE = {"I": "int", "D": "float", "L": "bool"}


class SpecializeError(Exception):
    pass


class SpecInstr(NamedTuple):
    op: str
    arg: object
    offset: int  # baseline offset this instruction was derived from

    def __str__(self) -> str:
        return f"{self.offset:4d}  {self.op}" + ("" if self.arg is None else f" {self.arg}")


@dataclass
class SlotMapEntry:
    slot_index: int
    origin: FeedbackOrigin
    compiled_feedback: FeedbackType


@dataclass(eq=False)
class CompiledFunction:
    source_id: int
    name: str
    code: List[SpecInstr]
    slot_map: List[SlotMapEntry]
    compiled_against: Dict[FeedbackOrigin, FeedbackType]
    overrides: Dict[FeedbackOrigin, FeedbackType]
    frame_size: int
    source: str = ""
    entry: object = None
    valid: bool = True
    version: int = 0
    entries: list = field(default_factory=list)  # profiler rows, one per slot_map entry
    deopted_at: Optional[int] = None

    @property
    def marker_token(self) -> "CompiledFunction":
        """The marker pushed at slot 0 of every activation is the function itself."""
        return self

    def disassemble(self) -> str:
        return "\n".join(map(str, self.code))


class Done(NamedTuple):
    value: Value


class Deopted(NamedTuple):
    value: Value
    origin: FeedbackOrigin


def unboxable_kind(t: FeedbackType):
    """Kind to unbox at a site with feedback ``t``, or None."""
    if t.unboxable or t.bits == KIND_BIT[LGL]:
        return t.single_kind
    return None


def _merge_rep(a: str, b: str) -> str:
    if a == b:
        return a
    if a == "A" or b == "A":
        return "A"
    if a in _RAW and b in _RAW:
        return "N"
    return "B"


def _literal(x) -> Optional[str]:
    if type(x) is float and not math.isfinite(x):
        return None
    return repr(x)


class _Gen:
    def __init__(self, fn: BaselineFunction, eff: List[FeedbackType], instrument: bool):
        self.fn = fn
        self.code = fn.code
        self.eff = eff
        self.instrument = instrument
        self.out: List[str] = []
        self.ind = 2
        self.seg: List[str] = []
        self.seg_units = 0
        self.reps: List[str] = []
        self.instrs: List[SpecInstr] = []
        self.slot_map: List[SlotMapEntry] = []
        self.consts: Dict[str, object] = {}
        self.loop_heads = {arg: k for k, (op, arg) in enumerate(self.code) if op == bc.JUMP and arg < k}
        self.names: Optional[List[str]] = None
        self.loc_tuple = "(" + "".join(f"l{i}, " for i in range(fn.nlocals)) + ")"

    # -- output helpers --------------------------------------------------

    def line(self, text: str, extra: int = 0) -> None:
        self.seg.append("    " * (self.ind + extra) + text)

    def spec(self, op: str, arg, off: int) -> None:
        self.instrs.append(SpecInstr(op, arg, off))
        self.seg_units += 1

    def flush(self, tail: Optional[str] = None) -> None:
        """Close the current segment, charging its units after its work.

        ``tail`` is a control transfer (break/return) that must come last.
        """
        pad = "    " * self.ind
        self.out.extend(self.seg)
        if self.seg_units:
            self.out.append(f"{pad}clk.u += {self.seg_units}")
            self.out.append(f"{pad}if clk.u >= clk.nf: clk.fire()")
        if tail is not None:
            self.out.append(pad + tail)
        self.seg, self.seg_units = [], 0

    def open_block(self, header: str) -> int:
        self.flush()
        self.out.append("    " * self.ind + header)
        self.ind += 1
        return len(self.out)

    def close_block(self, mark: int) -> None:
        self.flush()
        if len(self.out) == mark:
            self.out.append("    " * self.ind + "pass")
        self.ind -= 1

    def deopt_call(self, off: int, top: int) -> str:
        below = "(" + "".join(f"s{j}, " for j in range(top)) + ")"
        return f"return _deopt({off}, {self.loc_tuple}, {below}, s{top})"

    # -- walk ----------------------------------------------------------

    def run(self) -> None:
        self.emit_range(0, len(self.code), None, None)
        self.flush()

    def emit_range(self, i: int, hi: int, loop_exit, entering) -> None:
        code = self.code
        while i < hi:
            if i in self.loop_heads and i != entering:
                i = self.emit_loop(i)
                continue
            entering = None
            op, arg = code[i]
            if op == bc.JUMPF and arg == loop_exit:
                self.spec("jumpf", arg, i)
                self.flush(f"if not {self.cond()}: break")
            elif op == bc.FORNEXT:
                h = arg[0]
                d = len(self.reps)
                self.spec("fornext", arg, i)
                self.flush(f"if l{h} == l{h + 1}: break")
                self.line(f"s{d} = l{h}")
                self.line(f"l{h} = s{d} + l{h + 2}")
                self.reps.append("I")
            elif op == bc.JUMPF:
                i = self.emit_if(i, arg, loop_exit)
                continue
            else:
                self.emit_simple(i, op, arg)
            i += 1

    def emit_loop(self, head: int) -> int:
        back = self.loop_heads[head]
        saved = list(self.reps)
        mark = self.open_block("while True:")
        self.emit_range(head, back, back + 1, head)
        self.spec("jump", head, back)
        self.close_block(mark)
        self.reps = saved
        return back + 1

    def emit_if(self, i: int, else_at: int, loop_exit) -> int:
        join = self.code[else_at - 1][1]
        self.spec("jumpf", else_at, i)
        cond = self.cond()
        saved = list(self.reps)
        mark = self.open_block(f"if {cond}:")
        self.emit_range(i + 1, else_at - 1, loop_exit, None)
        self.spec("jump", join, else_at - 1)
        r_then = self.reps[-1]
        self.close_block(mark)
        self.reps = list(saved)
        mark = self.open_block("else:")
        self.emit_range(else_at, join, loop_exit, None)
        r_else = self.reps[-1]
        self.close_block(mark)
        self.reps = saved + [_merge_rep(r_then, r_else)]
        return join

    def cond(self) -> str:
        r = self.reps.pop()
        d = len(self.reps)
        return f"s{d}" if r in _RAW else f"_truth(s{d})"

    # -- straight-line instructions ----------------------------------------

    def emit_simple(self, i: int, op: int, arg) -> None:
        reps = self.reps
        d = len(reps)
        fn = self.fn
        if op == bc.RECORD:
            self.emit_record(i, arg)
        elif op == bc.CONST:
            v = fn.constants[arg]
            self.spec("const", v, i)
            lit = _literal(v.data[0]) if len(v.data) == 1 and v.tag is None else None
            if lit is not None:
                self.line(f"s{d} = {lit}")
                reps.append(_KIND_REP[v.kind])
            else:
                name = f"_k{arg}"
                self.consts[name] = v.data[0] if len(v.data) == 1 and v.tag is None else v
                self.line(f"s{d} = {name}")
                reps.append(_KIND_REP[v.kind] if len(v.data) == 1 and v.tag is None
                            else ("B" if v.tag is None else "A"))
        elif op == bc.LDLOC:
            self.spec("ldloc", fn.local_names[arg], i)
            self.line(f"s{d} = l{arg}")
            nxt = self.code[i + 1]
            guarded = nxt[0] == bc.RECORD and unboxable_kind(self.eff[nxt[1]]) is not None
            if arg >= len(fn.params) and not guarded:
                self.line(f"if s{d} is None: _unbound({fn.local_names[arg]!r})")
            reps.append("A")
        elif op == bc.LDGLOB:
            self.spec("ldvar", arg, i)
            self.line(f"s{d} = G[{arg!r}]")
            reps.append("A")
        elif op == bc.STLOC:
            self.spec("stloc", fn.local_names[arg], i)
            self.line(f"l{arg} = s{d - 1}")
        elif op == bc.STGLOB:
            self.spec("stvar", arg, i)
            self.line(f"G[{arg!r}] = _box(s{d - 1})")
        elif op == bc.POP:
            self.spec("pop", None, i)
            reps.pop()
        elif op == bc.BINOP:
            self.emit_binop(i, arg)
        elif op == bc.NEG:
            r = reps[-1]
            if r in _RAW:
                self.spec("neg.raw", None, i)
                self.line(f"s{d - 1} = -s{d - 1}")
                reps[-1] = {"D": "D", "N": "N"}.get(r, "I")
            else:
                self.spec("neg", None, i)
                self.line(f"s{d - 1} = _negate(s{d - 1})")
        elif op == bc.POWK:
            r = reps[-1]
            if r in _RAW:
                self.spec("powk.raw", arg, i)
                self.line(f"s{d - 1} = _powk(s{d - 1}, {arg})")
                reps[-1] = "D"
            else:
                self.spec("powk", arg, i)
                self.line(f"s{d - 1} = _powk_value(s{d - 1}, {arg})")
        elif op == bc.CALL:
            fid, n = arg
            self.spec("call", self.fn_name(fid), i)
            args = "".join(f"s{j}, " for j in range(d - n, d))
            self.line(f"s{d - n} = _call({fid}, ({args}))")
            del reps[d - n:]
            reps.append("A")
        elif op == bc.BUILTIN:
            bid, n = arg
            self.spec("builtin", bc.BUILTIN_NAMES[bid], i)
            args = "".join(f"s{j}, " for j in range(d - n, d))
            self.line(f"s{d - n} = _builtin({bid}, ({args}))")
            del reps[d - n:]
            reps.append("A")
        elif op == bc.INDEX:
            self.spec("index", None, i)
            self.line(f"s{d - 2} = _index(s{d - 2}, s{d - 1})")
            del reps[d - 2:]
            reps.append("B")
        elif op == bc.SETINDEX:
            self.spec("setindex", None, i)
            self.line(f"s{d - 3} = _set_index(s{d - 3}, s{d - 2}, s{d - 1})")
            del reps[d - 3:]
            reps.append("A")
        elif op == bc.FORPREP:
            self.spec("forprep", arg, i)
            self.line(f"l{arg}, l{arg + 1}, l{arg + 2} = _range(s{d - 2}, s{d - 1})")
            del reps[d - 2:]
        elif op == bc.JUMP:
            raise SpecializeError(f"unstructured jump at {i}")
        elif op == bc.RET:
            self.spec("ret", None, i)
            self.flush(f"return s{d - 1}")
        else:
            raise SpecializeError(f"unexpected opcode {op} at {i}")

    def fn_name(self, fid: int) -> str:
        return self.names[fid] if self.names else str(fid)

    def emit_binop(self, i: int, op: int) -> None:
        reps = self.reps
        d = len(reps)
        ra, rb = reps[-2], reps[-1]
        a, b = f"s{d - 2}", f"s{d - 1}"
        name = bc.BINOP_NAMES[op]
        del reps[d - 2:]
        if ra in _RAW and rb in _RAW:
            self.spec(f"{name}.raw", None, i)
            dbl = "D" in (ra, rb)
            if op in (bc.ADD, bc.SUB, bc.MUL):
                self.line(f"{a} = {a} {name} {b}")
                if not dbl:
                    self.line(f"if not -{INT_MAX} <= {a} <= {INT_MAX}: {a} = float({a})")
                reps.append("D" if dbl else "N")
            elif op == bc.DIV:
                self.line(f"{a} = {a} / {b} if {b} else _div({a}, {b})")
                reps.append("D")
            elif op == bc.MOD:
                self.line(f"{a} = {a} % {b} if {b} else _NAN")
                reps.append("D" if dbl else "N")
            elif op == bc.POW:
                self.line(f"{a} = _power({a}, {b})")
                reps.append("D")
            else:
                self.line(f"{a} = {a} {name} {b}")
                reps.append("L")
        elif (ra == "A" or rb == "A") and self.result_untagged(i):
            # The result site never saw a tag, and a tagged operand would have
            # tagged the result: check the operands and skip dispatch.
            checks = [f"(type({x}) is Value and {x}.tag is not None)"
                      for x, r in ((a, ra), (b, rb)) if r == "A"]
            self.spec("guard.noattr-operands", render_feedback(self.eff[self.code[i + 1][1]]), i)
            self.line(f"if {' or '.join(checks)}: {self.deopt_call(i, d - 1)}")
            self.spec(f"{name}.direct", None, i)
            self.line(f"{a} = _generic({op}, {a}, {b})")
            reps.append("B")
        elif ra == "A" or rb == "A":
            self.spec(f"{name}.dispatch", None, i)
            self.line(f"{a} = _dispatch({op}, {a}, {b})")
            reps.append("A")
        else:
            self.spec(f"{name}.direct", None, i)
            self.line(f"{a} = _generic({op}, {a}, {b})")
            reps.append("B")

    def result_untagged(self, i: int) -> bool:
        op, k = self.code[i + 1]
        if op != bc.RECORD:
            return False
        f = self.eff[k]
        return not f.is_bottom and not f.is_top and not f.attr_seen

    def emit_record(self, i: int, k: int) -> None:
        reps = self.reps
        t = len(reps) - 1
        r = reps[-1]
        f = self.eff[k]
        kind = unboxable_kind(f)
        if r in "IDL":
            return  # statically known raw scalar: nothing to speculate
        if kind is not None:
            want = _KIND_REP[kind]
            if r == want:
                return
            self.spec(f"guard.{_REP_PYTYPE[want]}", render_feedback(f), i)
            self.line(f"if type(s{t}) is not {_REP_PYTYPE[want]}:")
            self.line(f"_t = _unbox_{want}(s{t})", 1)
            self.line(f"if _t is _FAIL: {self.deopt_call(i, t)}", 1)
            self.line(f"s{t} = _t", 1)
            prev = self.code[i - 1]
            if prev[0] == bc.LDLOC:
                self.line(f"l{prev[1]} = _t", 1)
            reps[-1] = want
            return
        if r == "N":
            return  # raw but polymorphic feedback: stay raw
        if not f.attr_seen and r == "A":
            self.spec("guard.noattr", render_feedback(f), i)
            self.line(f"if type(s{t}) is Value and s{t}.tag is not None: {self.deopt_call(i, t)}")
            r = reps[-1] = "B"
        slot = len(self.slot_map) + 1
        self.slot_map.append(SlotMapEntry(slot, FeedbackOrigin(self.fn.id, i), f))
        self.spec("slot", slot, i)
        self.line(f"fr[{slot}] = s{t}")
        if self.instrument:
            self.line(f"_observe(fr, {slot}, s{t})")


def _unbox(kind, pytype, v):
    if type(v) is Value and v.kind is kind and v.tag is None and len(v.data) == 1:
        x = v.data[0]
        if type(x) is pytype:
            return x
    return _FAIL


_FAIL = object()


def _unbound(name):
    from .vm import UnboundVariable

    raise UnboundVariable(f"object {name!r} not found")


_HELPERS = {
    "Value": Value,
    "_FAIL": _FAIL,
    "_NAN": float("nan"),
    "_box": rt.box,
    "_truth": rt.truth,
    "_div": rt.div,
    "_power": rt.power,
    "_powk": rt.powk,
    "_powk_value": rt.powk_value,
    "_negate": rt.negate,
    "_dispatch": rt.dispatch_binop,
    "_generic": rt.generic_binop,
    "_index": rt.index,
    "_set_index": rt.set_index,
    "_builtin": rt.call_builtin,
    "_range": rt.for_range,
    "_unbound": _unbound,
    "_unbox_I": partial(_unbox, INT, int),
    "_unbox_D": partial(_unbox, DBL, float),
    "_unbox_L": partial(_unbox, LGL, bool),
}


def effective_feedback(f: BaselineFunction, feedback, overrides: Mapping[FeedbackOrigin, FeedbackType]):
    sites = set(f.record_sites)
    for o in overrides:
        if o not in sites:
            raise ValueError(f"override origin {o} is not a record site of {f.name}")
    return [overrides.get(o, FeedbackType.of(b)) for o, b in zip(f.record_sites, feedback.bits)]


def specialize(f: BaselineFunction, feedback, overrides: Mapping[FeedbackOrigin, FeedbackType] = None,
               *, vm=None, instrument: Optional[bool] = None) -> CompiledFunction:
    """Compile ``f`` against ``feedback`` with sampled ``overrides`` applied.

    Without a ``vm`` the result carries code and slot map but no entry point.
    """
    overrides = dict(overrides or {})
    if not f.record_sites:
        raise SpecializeError(f"{f.name} has no record sites")
    eff = effective_feedback(f, feedback, overrides)
    if instrument is None:
        instrument = bool(vm is not None and vm.instrument_slots)
    g = _Gen(f, eff, instrument)
    if vm is not None:
        g.names = [fn.name for fn in vm.program.functions]
    g.run()
    cf = CompiledFunction(
        source_id=f.id, name=f.name, code=g.instrs, slot_map=g.slot_map,
        compiled_against=dict(zip(f.record_sites, eff)), overrides=overrides,
        frame_size=len(g.slot_map) + 1,
    )
    params = "".join(f"l{i}, " for i in range(len(f.params)))
    head = [f"def {_pyname(f.name)}(args):"]
    if params:
        head.append(f"    {params}= args")
    for i in range(len(f.params), f.nlocals):
        head.append(f"    l{i} = None")
    head.append(f"    fr = [cf{', None' * len(g.slot_map)}]")
    head.append("    frames.append(fr)")
    head.append("    try:")
    cf.source = "\n".join(head + g.out + ["    finally:", "        frames.pop()"]) + "\n"
    if vm is not None:
        ns = dict(_HELPERS)
        ns.update(g.consts)
        ns.update(cf=cf, frames=vm.frames, G=vm.globals, clk=vm.clock, _call=vm.call,
                  _deopt=partial(vm.deopt, cf), _observe=vm.observe_slot)
        exec(compile(cf.source, f"<tier2 {f.name} v{vm.states[f.id].versions + 1}>", "exec"), ns)
        cf.entry = ns[_pyname(f.name)]
    return cf


def _pyname(name: str) -> str:
    return "f_" + "".join(c if c.isalnum() else "_" for c in name)


def execute_optimized(vm, cf: CompiledFunction, args) -> Done | Deopted:
    """Run ``cf`` on ``args``; report whether this activation deoptimized."""
    if not cf.valid:
        raise ValueError("compiled function has been invalidated")
    cf.deopted_at = None
    v = rt.box(cf.entry(tuple(args)))
    if cf.deopted_at is not None:
        return Deopted(v, FeedbackOrigin(cf.source_id, cf.deopted_at))
    return Done(v)


def invalidate(vm, cf: CompiledFunction) -> None:
    vm.invalidate(cf)


def render_slot_map(cf: CompiledFunction) -> str:
    """``- #slot->offset: sampled (count), compiled`` per slot."""
    rows = {e.slot_index: e for e in cf.entries}
    lines = []
    for s in cf.slot_map:
        e = rows.get(s.slot_index)
        sampled = render_feedback(FeedbackType.of(e.bits)) if e else "[<?>]"
        count = e.count if e else 0
        lines.append(f"- #{s.slot_index}->{s.origin.bytecode_offset}: {sampled} ({count}), "
                     f"{render_feedback(s.compiled_feedback)}")
    return "\n".join(lines)
