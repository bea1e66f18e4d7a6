"""Lexer and recursive-descent parser for MiniDyn, a small R-like language.

Statements end at a newline or ``;``. Newlines are ignored inside parentheses
and brackets and after a binary operator, as in R.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union


class ParseError(SyntaxError):
    """Syntax error with a 1-based line/column and the set of expected tokens."""

    def __init__(self, msg: str, line: int, col: int, expected: Tuple[str, ...] = ()):
        self.line, self.col, self.expected = line, col, tuple(expected)
        detail = f" (expected one of: {', '.join(expected)})" if expected else ""
        super().__init__(f"{line}:{col}: {msg}{detail}")


# --- AST --------------------------------------------------------------------

@dataclass
class Node:
    line: int = field(default=0, compare=False, repr=False, kw_only=True)
    col: int = field(default=0, compare=False, repr=False, kw_only=True)


@dataclass
class Num(Node):
    value: Union[int, float, bool]


@dataclass
class Str(Node):
    value: str


@dataclass
class Var(Node):
    name: str


@dataclass
class BinOp(Node):
    op: str
    left: "Expr"
    right: "Expr"


@dataclass
class Neg(Node):
    operand: "Expr"


@dataclass
class Call(Node):
    name: str
    args: List["Expr"]


@dataclass
class Structure(Node):
    value: "Expr"
    cls: str


@dataclass
class Index(Node):
    target: "Expr"
    index: "Expr"


@dataclass
class FunctionExpr(Node):
    params: List[str]
    body: "Block"


@dataclass
class Block(Node):
    stmts: List["Stmt"]


@dataclass
class Assign(Node):
    name: str
    value: "Expr"
    is_global: bool = False


@dataclass
class IndexAssign(Node):
    name: str
    index: "Expr"
    value: "Expr"
    is_global: bool = False


@dataclass
class For(Node):
    var: str
    lo: "Expr"
    hi: "Expr"
    body: Block


@dataclass
class While(Node):
    cond: "Expr"
    body: Block


@dataclass
class If(Node):
    cond: "Expr"
    then: Block
    orelse: Optional[Block] = None


@dataclass
class ExprStmt(Node):
    expr: "Expr"


Expr = Union[Num, Var, BinOp, Neg, Call, Structure, Index, FunctionExpr, If, Block]
Stmt = Union[Assign, IndexAssign, For, While, If, ExprStmt]


@dataclass
class FunctionSource:
    name: str
    params: List[str]
    body: Block
    line: int = 0


@dataclass
class Program:
    functions: List[FunctionSource]
    top_level: List[Stmt]

    def function(self, name: str) -> FunctionSource:
        for f in self.functions:
            if f.name == name:
                return f
        raise KeyError(name)


# --- lexer ------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<comment>\#[^\n]*)
  | (?P<nl>\n)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?L?)
  | (?P<str>"[^"\n]*")
  | (?P<id>[A-Za-z.][A-Za-z0-9._]*)
  | (?P<op><<-|<-|%%|==|!=|<=|>=|[-+*/^<>=(){}\[\],:;])
    """,
    re.VERBOSE,
)

KEYWORDS = {"function", "for", "in", "while", "if", "else", "TRUE", "FALSE"}


@dataclass
class Token:
    kind: str  # num, str, id, kw, op, nl, eof
    text: str
    line: int
    col: int


def tokenize(source: str) -> List[Token]:
    toks: List[Token] = []
    pos, line, line_start = 0, 1, 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        if not m:
            raise ParseError(f"unexpected character {source[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        text = m.group()
        col = pos - line_start + 1
        if kind == "nl":
            toks.append(Token("nl", text, line, col))
            line += 1
            line_start = m.end()
        elif kind == "id":
            if text.startswith(".") and len(text) > 1 and text[1].isdigit():
                raise ParseError(f"bad identifier {text!r}", line, col)
            toks.append(Token("kw" if text in KEYWORDS else "id", text, line, col))
        elif kind not in ("ws", "comment"):
            toks.append(Token(kind, text, line, col))
        pos = m.end()
    toks.append(Token("eof", "", line, pos - line_start + 1))
    return toks


# --- parser -----------------------------------------------------------------

# Binary operators by precedence level, loosest first. ^ is handled separately
# (right associative, binds tighter than unary minus).
_LEVELS = [("<", "<=", ">", ">=", "==", "!="), ("+", "-"), ("*", "/"), ("%%",)]


class Parser:
    def __init__(self, source: str):
        self.toks = tokenize(source)
        self.i = 0
        self.depth = 0  # () / [] nesting, where newlines are insignificant

    # token helpers
    @property
    def tok(self) -> Token:
        if self.depth:
            while self.toks[self.i].kind == "nl":
                self.i += 1
        return self.toks[self.i]

    def at(self, text: str) -> bool:
        t = self.tok
        return t.kind in ("op", "kw") and t.text == text

    def advance(self) -> Token:
        t = self.tok
        self.i += 1
        return t

    def expect(self, text: str) -> Token:
        if not self.at(text):
            self.fail(f"unexpected {self.describe(self.tok)}", (repr(text),))
        return self.advance()

    def expect_id(self) -> Token:
        if self.tok.kind != "id":
            self.fail(f"unexpected {self.describe(self.tok)}", ("identifier",))
        return self.advance()

    def skip_nl(self) -> None:
        while self.toks[self.i].kind == "nl" or (self.toks[self.i].kind == "op" and self.toks[self.i].text == ";"):
            self.i += 1

    def skip_newlines_only(self) -> None:
        while self.toks[self.i].kind == "nl":
            self.i += 1

    @staticmethod
    def describe(t: Token) -> str:
        return "end of input" if t.kind == "eof" else "newline" if t.kind == "nl" else repr(t.text)

    def fail(self, msg: str, expected=()):
        t = self.tok
        raise ParseError(msg, t.line, t.col, tuple(expected))

    def open(self, text: str) -> Token:
        t = self.expect(text)
        self.depth += 1
        return t

    def close(self, text: str) -> Token:
        t = self.expect(text)
        self.depth -= 1
        return t

    # grammar
    def parse_program(self) -> List[Stmt]:
        stmts = []
        self.skip_nl()
        while self.tok.kind != "eof":
            stmts.append(self.statement())
            self.end_statement()
        return stmts

    def end_statement(self) -> None:
        t = self.tok
        if t.kind in ("nl", "eof") or (t.kind == "op" and t.text in (";", "}")):
            self.skip_nl()
            return
        self.fail(f"unexpected {self.describe(t)} after statement", ("newline", "';'"))

    def block(self) -> Block:
        t = self.tok
        if self.at("{"):
            saved = self.depth
            self.advance()
            self.depth = 0
            stmts = []
            self.skip_nl()
            while not self.at("}"):
                if self.tok.kind == "eof":
                    self.fail("unterminated block", ("'}'",))
                stmts.append(self.statement())
                self.end_statement()
            self.advance()
            self.depth = saved
            return Block(stmts, line=t.line, col=t.col)
        return Block([self.statement()], line=t.line, col=t.col)

    def statement(self) -> Stmt:
        t = self.tok
        if self.at("for"):
            return self.for_stmt()
        if self.at("while"):
            self.advance()
            self.open("(")
            cond = self.expr()
            self.close(")")
            self.skip_newlines_only()
            return While(cond, self.block(), line=t.line, col=t.col)
        if self.at("if"):
            return self.if_stmt()
        if t.kind == "id":
            nxt = self.toks[self.i + 1]
            if nxt.kind == "op" and nxt.text in ("<-", "<<-", "="):
                self.advance()
                self.advance()
                self.skip_newlines_only()
                return Assign(t.text, self.expr(), nxt.text == "<<-", line=t.line, col=t.col)
            if nxt.kind == "op" and nxt.text == "[":
                save = self.i
                self.advance()
                self.open("[")
                idx = self.expr()
                self.close("]")
                if self.tok.kind == "op" and self.tok.text in ("<-", "<<-", "="):
                    arrow = self.advance().text
                    self.skip_newlines_only()
                    return IndexAssign(t.text, idx, self.expr(), arrow == "<<-", line=t.line, col=t.col)
                self.i = save
        return ExprStmt(self.expr(), line=t.line, col=t.col)

    def for_stmt(self) -> For:
        t = self.advance()
        self.open("(")
        var = self.expect_id().text
        self.expect("in")
        lo = self.expr()
        self.expect(":")
        hi = self.expr()
        self.close(")")
        self.skip_newlines_only()
        return For(var, lo, hi, self.block(), line=t.line, col=t.col)

    def if_stmt(self) -> If:
        t = self.advance()
        self.open("(")
        cond = self.expr()
        self.close(")")
        self.skip_newlines_only()
        then = self.block()
        save = self.i
        self.skip_newlines_only()
        if self.at("else"):
            self.advance()
            self.skip_newlines_only()
            return If(cond, then, self.block(), line=t.line, col=t.col)
        self.i = save
        return If(cond, then, None, line=t.line, col=t.col)

    def expr(self, level: int = 0):
        if level == len(_LEVELS):
            return self.unary()
        left = self.expr(level + 1)
        while self.tok.kind == "op" and self.tok.text in _LEVELS[level]:
            op = self.advance()
            self.skip_newlines_only()
            right = self.expr(level + 1)
            left = BinOp(op.text, left, right, line=op.line, col=op.col)
        return left

    def unary(self):
        if self.at("-"):
            t = self.advance()
            return Neg(self.unary(), line=t.line, col=t.col)
        if self.at("+"):
            self.advance()
            return self.unary()
        return self.power()

    def power(self):
        base = self.postfix()
        if self.at("^"):
            op = self.advance()
            self.skip_newlines_only()
            return BinOp("^", base, self.unary(), line=op.line, col=op.col)
        return base

    def postfix(self):
        e = self.primary()
        while self.at("["):
            t = self.open("[")
            idx = self.expr()
            self.close("]")
            e = Index(e, idx, line=t.line, col=t.col)
        return e

    def primary(self):
        t = self.tok
        if t.kind == "num":
            self.advance()
            return Num(_number(t), line=t.line, col=t.col)
        if t.kind == "str":
            self.advance()
            return Str(t.text[1:-1], line=t.line, col=t.col)
        if t.kind == "kw":
            if t.text in ("TRUE", "FALSE"):
                self.advance()
                return Num(t.text == "TRUE", line=t.line, col=t.col)
            if t.text == "function":
                return self.function_expr()
            if t.text == "if":
                return self.if_stmt()
        if t.kind == "id":
            self.advance()
            if self.at("("):
                return self.call(t)
            return Var(t.text, line=t.line, col=t.col)
        if self.at("("):
            self.open("(")
            e = self.expr()
            self.close(")")
            return e
        if self.at("{"):
            return self.block()
        self.fail(f"unexpected {self.describe(t)}", ("number", "identifier", "'('", "'function'"))

    def call(self, name: Token):
        self.open("(")
        args = []
        if name.text == "structure":
            value = self.expr()
            self.expect(",")
            key = self.expect_id()
            if key.text != "class":
                raise ParseError("structure() only accepts class=", key.line, key.col, ("'class'",))
            self.expect("=")
            if self.tok.kind != "str":
                self.fail("class must be a string literal", ("string",))
            cls = self.advance().text[1:-1]
            if not cls:
                raise ParseError("class tag must be nonempty", name.line, name.col)
            self.close(")")
            return Structure(value, cls, line=name.line, col=name.col)
        if not self.at(")"):
            args.append(self.expr())
            while self.at(","):
                self.advance()
                args.append(self.expr())
        self.close(")")
        return Call(name.text, args, line=name.line, col=name.col)

    def function_expr(self) -> FunctionExpr:
        t = self.advance()
        self.open("(")
        params = []
        if not self.at(")"):
            params.append(self.expect_id().text)
            while self.at(","):
                self.advance()
                params.append(self.expect_id().text)
        self.close(")")
        if len(set(params)) != len(params):
            raise ParseError("duplicate parameter name", t.line, t.col)
        self.skip_newlines_only()
        return FunctionExpr(params, self.block(), line=t.line, col=t.col)


def _number(t: Token):
    text = t.text
    if text.endswith("L"):
        v = float(text[:-1])
        if v != int(v) or abs(v) > 2147483647:
            raise ParseError(f"bad integer literal {text}", t.line, t.col)
        return int(v)
    return float(text)


def parse(source: str) -> Program:
    """Parse MiniDyn source. Top-level ``name <- function(...)`` become functions."""
    stmts = Parser(source).parse_program()
    functions: List[FunctionSource] = []
    top: List[Stmt] = []
    seen = set()
    for s in stmts:
        if isinstance(s, Assign) and isinstance(s.value, FunctionExpr):
            if s.name in seen:
                raise ParseError(f"function {s.name!r} defined twice", s.line, s.col)
            seen.add(s.name)
            functions.append(FunctionSource(s.name, s.value.params, s.value.body, s.line))
        else:
            top.append(s)
    return Program(functions, top)
