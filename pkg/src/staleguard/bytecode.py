"""Baseline bytecode and the lowering from MiniDyn AST.

Code is a list of ``(opcode, arg)`` pairs; an offset is an index into that list.
Every variable load, every parameter at function entry and every builtin
result is followed by exactly one RECORD, whose argument is the record-site
index. A ``FeedbackOrigin`` is ``(function id, offset of the RECORD)``.

Control flow is emitted in three fixed shapes, which the tier-2 backend relies
on to rebuild structured loops::

    for:    <lo> <hi> FORPREP h ; H: FORNEXT (h, X) ; STORE var ; POP ;
            <body> ; POP ; JUMP H ; X: CONST null
    while:  H: <cond> ; JUMPF X ; <body> ; POP ; JUMP H ; X: CONST null
    if:     <cond> ; JUMPF E ; <then> ; JUMP J ; E: <else or CONST null> ; J:
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

from . import parser as ast
from .values import DBL, INT, LGL, NULL, Kind, Value

# opcodes
CONST = 0
LDLOC = 1
LDGLOB = 2
STLOC = 3
STGLOB = 4
POP = 5
RECORD = 6
BINOP = 7
NEG = 8
POWK = 9
CALL = 10
BUILTIN = 11
INDEX = 12
SETINDEX = 13
JUMP = 14
JUMPF = 15
FORPREP = 16
FORNEXT = 17
RET = 18

OPNAMES = {
    CONST: "const", LDLOC: "ldloc", LDGLOB: "ldvar", STLOC: "stloc", STGLOB: "stvar",
    POP: "pop", RECORD: "record", BINOP: "binop", NEG: "neg", POWK: "powk", CALL: "call",
    BUILTIN: "builtin", INDEX: "index", SETINDEX: "setindex", JUMP: "jump", JUMPF: "jumpf",
    FORPREP: "forprep", FORNEXT: "fornext", RET: "ret",
}

# binary operator codes (BINOP arg)
ADD, SUB, MUL, DIV, MOD, POW, LT, LE, GT, GE, EQ, NE = range(12)
BINOP_CODES = {"+": ADD, "-": SUB, "*": MUL, "/": DIV, "%%": MOD, "^": POW,
               "<": LT, "<=": LE, ">": GT, ">=": GE, "==": EQ, "!=": NE}
BINOP_NAMES = {v: k for k, v in BINOP_CODES.items()}
ARITH_OPS = frozenset({ADD, SUB, MUL, DIV, MOD, POW})

# builtins callable by name (BUILTIN arg = (builtin id, nargs))
BUILTIN_NAMES = (
    "c", "structure", "length", "sum", "sqrt", "abs", "floor", "rep",
    "numeric", "integer", "as.integer", "as.double",
)
BUILTIN_IDS = {n: i for i, n in enumerate(BUILTIN_NAMES)}
BUILTIN_ARITY = {"structure": 1, "length": 1, "sum": 1, "sqrt": 1, "abs": 1, "floor": 1,
                 "rep": 2, "numeric": 1, "integer": 1, "as.integer": 1, "as.double": 1}

POWK_MAX = 31  # literal integer exponents up to this become repeated multiplication

TOPLEVEL = "<toplevel>"


class LoweringError(Exception):
    def __init__(self, msg: str, line: int = 0, col: int = 0):
        self.line, self.col = line, col
        super().__init__(f"{line}:{col}: {msg}" if line else msg)


class FeedbackOrigin(NamedTuple):
    function_id: int
    bytecode_offset: int

    def __str__(self) -> str:
        return f"{self.function_id}@{self.bytecode_offset}"


@dataclass
class BaselineFunction:
    id: int
    name: str
    params: Tuple[str, ...]
    code: List[tuple]
    constants: List[Value]
    local_names: List[str]  # params first, then locals, then hidden loop state
    record_sites: List[FeedbackOrigin] = field(default_factory=list)

    @property
    def nlocals(self) -> int:
        return len(self.local_names)

    @property
    def n_visible(self) -> int:
        """Locals a program can name; hidden loop state follows them."""
        return sum(1 for n in self.local_names if not n.startswith(".for"))

    def site_index(self, origin: FeedbackOrigin) -> int:
        return self.code[origin.bytecode_offset][1]

    def disassemble(self) -> str:
        lines = []
        for off, (op, arg) in enumerate(self.code):
            text = OPNAMES[op]
            if op == CONST:
                text += f" {self.constants[arg]!r}"
            elif op in (LDLOC, STLOC):
                text += f" {self.local_names[arg]}"
            elif op in (LDGLOB, STGLOB):
                text += f" {arg}"
            elif op == RECORD:
                text += f" #{arg}"
            elif op == BINOP:
                text += f" {BINOP_NAMES[arg]}"
            elif op == BUILTIN:
                text += f" {BUILTIN_NAMES[arg[0]]}/{arg[1]}"
            elif arg is not None:
                text += f" {arg}"
            lines.append(f"{off:4d}   {text}")
        return "\n".join(lines)


@dataclass
class LoweredProgram:
    functions: List[BaselineFunction]  # index == function id; last one is the top level
    by_name: Dict[str, int]
    globals: Tuple[str, ...]

    @property
    def toplevel(self) -> BaselineFunction:
        return self.functions[-1]


# --- scope analysis ---------------------------------------------------------

def _assigned_locals(body: ast.Block) -> List[str]:
    """Names bound locally: ``x <- e``, ``x[i] <- e`` and for-loop variables."""
    out: List[str] = []

    def add(n):
        if n not in out:
            out.append(n)

    def walk(node):
        if isinstance(node, ast.Assign):
            if not node.is_global:
                add(node.name)
            walk(node.value)
        elif isinstance(node, ast.IndexAssign):
            if not node.is_global:
                add(node.name)
            walk(node.index)
            walk(node.value)
        elif isinstance(node, ast.For):
            add(node.var)
            walk(node.lo)
            walk(node.hi)
            walk(node.body)
        elif isinstance(node, ast.FunctionExpr):
            raise LoweringError("nested function definitions are not supported", node.line, node.col)
        elif isinstance(node, ast.Node):
            for v in vars(node).values():
                if isinstance(v, ast.Node):
                    walk(v)
                elif isinstance(v, list):
                    for x in v:
                        if isinstance(x, ast.Node):
                            walk(x)

    walk(body)
    return out


def _global_names(program: ast.Program) -> List[str]:
    names: List[str] = []

    def add(n):
        if n not in names:
            names.append(n)

    def walk(node, top: bool):
        if isinstance(node, (ast.Assign, ast.IndexAssign)) and (top or node.is_global):
            add(node.name)
        if isinstance(node, ast.For) and top:
            add(node.var)
        if isinstance(node, ast.Node):
            for v in vars(node).values():
                if isinstance(v, ast.Node):
                    walk(v, top)
                elif isinstance(v, list):
                    for x in v:
                        if isinstance(x, ast.Node):
                            walk(x, top)

    for s in program.top_level:
        walk(s, True)
    for f in program.functions:
        walk(f.body, False)
    return names


# --- code generation ----------------------------------------------------------

class _FunctionLowerer:
    def __init__(self, fid: int, name: str, params: Sequence[str], local_vars: Sequence[str],
                 top: bool, ctx: "_ProgramContext"):
        self.fid, self.name, self.top, self.ctx = fid, name, top, ctx
        self.params = tuple(params)
        self.local_names: List[str] = list(params) + [v for v in local_vars if v not in params]
        self.local_index = {n: i for i, n in enumerate(self.local_names)}
        self.code: List[tuple] = []
        self.constants: List[Value] = []
        self.const_index: Dict[tuple, int] = {}
        self.sites: List[FeedbackOrigin] = []

    def emit(self, op, arg=None) -> int:
        self.code.append((op, arg))
        return len(self.code) - 1

    def record(self) -> None:
        off = len(self.code)
        self.emit(RECORD, len(self.sites))
        self.sites.append(FeedbackOrigin(self.fid, off))

    def const(self, v: Value) -> None:
        key = (v.kind, v.data, v.tag)
        if key not in self.const_index:
            self.const_index[key] = len(self.constants)
            self.constants.append(v)
        self.emit(CONST, self.const_index[key])

    def hidden(self) -> int:
        base = len(self.local_names)
        self.local_names += [f".for{base}.cur", f".for{base}.end", f".for{base}.step"]
        return base

    def patch(self, at: int, arg) -> None:
        op, _ = self.code[at]
        self.code[at] = (op, arg)

    def is_local(self, name: str) -> bool:
        return not self.top and name in self.local_index

    # statements
    def lower_body(self, stmts: Sequence[ast.Stmt]) -> None:
        if not stmts:
            self.const(NULL)
            return
        for i, s in enumerate(stmts):
            self.stmt(s)
            if i != len(stmts) - 1:
                self.emit(POP)

    def store(self, name: str, is_global: bool, node) -> None:
        if not is_global and self.is_local(name):
            self.emit(STLOC, self.local_index[name])
        else:
            self.emit(STGLOB, name)

    def stmt(self, s) -> None:
        if isinstance(s, ast.Assign):
            if isinstance(s.value, ast.FunctionExpr):
                raise LoweringError("functions may only be defined at top level", s.line, s.col)
            self.expr(s.value)
            self.store(s.name, s.is_global, s)
        elif isinstance(s, ast.IndexAssign):
            self.load(s.name, s, force_global=s.is_global)
            self.expr(s.index)
            self.expr(s.value)
            self.emit(SETINDEX)
            self.record()
            self.store(s.name, s.is_global, s)
        elif isinstance(s, ast.For):
            self.expr(s.lo)
            self.expr(s.hi)
            h = self.hidden()
            self.emit(FORPREP, h)
            head = self.emit(FORNEXT, None)
            self.store(s.var, False, s)
            self.emit(POP)
            self.lower_body(s.body.stmts)
            self.emit(POP)
            self.emit(JUMP, head)
            self.patch(head, (h, len(self.code)))
            self.const(NULL)
        elif isinstance(s, ast.While):
            head = len(self.code)
            self.expr(s.cond)
            jf = self.emit(JUMPF, None)
            self.lower_body(s.body.stmts)
            self.emit(POP)
            self.emit(JUMP, head)
            self.patch(jf, len(self.code))
            self.const(NULL)
        elif isinstance(s, ast.ExprStmt):
            self.expr(s.expr)
        else:
            self.expr(s)

    # expressions
    def load(self, name: str, node, force_global: bool = False) -> None:
        if not force_global and self.is_local(name):
            self.emit(LDLOC, self.local_index[name])
        elif name in self.ctx.globals:
            self.emit(LDGLOB, name)
        else:
            raise LoweringError(f"unresolvable identifier {name!r}", node.line, node.col)
        self.record()

    def expr(self, e) -> None:
        if isinstance(e, ast.Num):
            v = e.value
            if isinstance(v, bool):
                self.const(Value(LGL, (v,)))
            elif isinstance(v, int):
                self.const(Value(INT, (v,)))
            else:
                self.const(Value(DBL, (v,)))
        elif isinstance(e, ast.Var):
            self.load(e.name, e)
        elif isinstance(e, ast.BinOp):
            r = e.right
            if e.op == "^" and isinstance(r, ast.Num) and not isinstance(r.value, bool) \
                    and float(r.value).is_integer() and 0 <= r.value <= POWK_MAX:
                self.expr(e.left)
                self.emit(POWK, int(r.value))
            else:
                self.expr(e.left)
                self.expr(e.right)
                self.emit(BINOP, BINOP_CODES[e.op])
            self.record()
        elif isinstance(e, ast.Neg):
            self.expr(e.operand)
            self.emit(NEG)
            self.record()
        elif isinstance(e, ast.Structure):
            self.expr(e.value)
            self.const(Value(LGL, (), e.cls))  # carries the tag only
            self.emit(BUILTIN, (BUILTIN_IDS["structure"], 2))
            self.record()
        elif isinstance(e, ast.Call):
            self.call(e)
        elif isinstance(e, ast.Index):
            self.expr(e.target)
            self.expr(e.index)
            self.emit(INDEX)
            self.record()
        elif isinstance(e, ast.If):
            self.expr(e.cond)
            jf = self.emit(JUMPF, None)
            self.lower_body(e.then.stmts)
            j = self.emit(JUMP, None)
            self.patch(jf, len(self.code))
            if e.orelse is not None:
                self.lower_body(e.orelse.stmts)
            else:
                self.const(NULL)
            self.patch(j, len(self.code))
        elif isinstance(e, ast.Block):
            self.lower_body(e.stmts)
        elif isinstance(e, ast.FunctionExpr):
            raise LoweringError("function values are only supported as top-level definitions", e.line, e.col)
        elif isinstance(e, ast.Str):
            raise LoweringError("strings are only allowed as class= tags", e.line, e.col)
        else:
            self.stmt(e)

    def call(self, e: ast.Call) -> None:
        n = len(e.args)
        if e.name in self.ctx.functions:
            fid, arity = self.ctx.functions[e.name]
            if n != arity:
                raise LoweringError(f"{e.name}() takes {arity} arguments, got {n}", e.line, e.col)
            for a in e.args:
                self.expr(a)
            self.emit(CALL, (fid, n))
            return
        if e.name in BUILTIN_IDS and e.name != "structure":
            want = BUILTIN_ARITY.get(e.name)
            if want is not None and n != want:
                raise LoweringError(f"{e.name}() takes {want} arguments, got {n}", e.line, e.col)
            if e.name == "c" and n == 0:
                raise LoweringError("c() needs at least one argument", e.line, e.col)
            for a in e.args:
                self.expr(a)
            self.emit(BUILTIN, (BUILTIN_IDS[e.name], n))
            self.record()
            return
        raise LoweringError(f"unknown function {e.name!r}", e.line, e.col)

    def finish(self) -> BaselineFunction:
        self.emit(RET)
        return BaselineFunction(self.fid, self.name, self.params, self.code, self.constants,
                                self.local_names, self.sites)


@dataclass
class _ProgramContext:
    functions: Dict[str, Tuple[int, int]]
    globals: frozenset


def lower(program: ast.Program) -> LoweredProgram:
    """Lower a parsed program; deterministic for a given AST."""
    fnames = {f.name: (i, len(f.params)) for i, f in enumerate(program.functions)}
    for name in fnames:
        if name in BUILTIN_IDS:
            raise LoweringError(f"cannot redefine builtin {name!r}")
    gnames = _global_names(program)
    ctx = _ProgramContext(fnames, frozenset(gnames))
    out: List[BaselineFunction] = []
    for i, f in enumerate(program.functions):
        fl = _FunctionLowerer(i, f.name, f.params, _assigned_locals(f.body), False, ctx)
        for p in f.params:  # entry records, one per parameter
            fl.emit(LDLOC, fl.local_index[p])
            fl.record()
            fl.emit(POP)
        fl.lower_body(f.body.stmts)
        out.append(fl.finish())
    for s in program.top_level:
        _assigned_locals(ast.Block(s if isinstance(s, list) else [s]))  # rejects nested functions
    top = _FunctionLowerer(len(out), TOPLEVEL, (), (), True, ctx)
    top.lower_body(program.top_level)
    out.append(top.finish())
    return LoweredProgram(out, {f.name: f.id for f in out[:-1]}, tuple(gnames))


def compile_source(source: str) -> LoweredProgram:
    return lower(ast.parse(source))
