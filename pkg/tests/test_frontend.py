import pytest
from hypothesis import given, settings, strategies as st

from staleguard import parser as P
from staleguard.bytecode import (BINOP, LDGLOB, LDLOC, POWK, RECORD, LoweringError, compile_source)
from staleguard.parser import ParseError, parse

BENCH = __import__("pathlib").Path(__file__).resolve().parent.parent / "benchmarks"


def test_listing_one_parses():
    prog = parse("f <- function() x+x+x+x+1L\nx <- 1L\n")
    (f,) = prog.functions
    assert f.name == "f" and f.params == []
    body = f.body.stmts[0].expr
    adds = 0
    while isinstance(body, P.BinOp):
        adds += body.op == "+"
        body = body.left
    assert adds == 4


def test_empty_source():
    prog = parse("")
    assert prog.functions == [] and prog.top_level == []


def test_global_assign_with_modulo():
    prog = parse("state <- 1\nfor (i in 1:3L) state <<- (state * 48271) %% (2^31 - 1)\n")
    loop = prog.top_level[1]
    assert isinstance(loop, P.For)
    (stmt,) = loop.body.stmts
    assert isinstance(stmt, P.Assign) and stmt.is_global
    assert isinstance(stmt.value, P.BinOp) and stmt.value.op == "%%"


@pytest.mark.parametrize("src,line,col", [("x <- (1 + \n", 2, 1), ("x <- 1 +* 2", 1, 9), ("f(1,", 1, 5)])
def test_syntax_error_positions(src, line, col):
    with pytest.raises(ParseError) as ei:
        parse(src)
    assert (ei.value.line, ei.value.col) == (line, col)
    assert ei.value.expected


def test_unresolvable_identifier():
    with pytest.raises(LoweringError, match="unresolvable identifier 'y'"):
        compile_source("g <- function() y\n")


def test_listing_one_lowering_layout():
    prog = compile_source("f <- function() x+x+x+x+1L\nx <- 1L\n")
    f = prog.functions[prog.by_name["f"]]
    ops = [op for op, _ in f.code[:7]]
    assert ops == [LDGLOB, RECORD, LDGLOB, RECORD, BINOP, RECORD, LDGLOB]
    assert [o.bytecode_offset for o in f.record_sites] == [i for i, (op, _) in enumerate(f.code) if op == RECORD]


def test_minimal_function_has_two_sites():
    prog = compile_source("id <- function(a) a\n")
    f = prog.functions[0]
    assert len(f.record_sites) == 2
    assert f.code[0][0] == LDLOC and f.code[1][0] == RECORD


def count_sites(fn: P.FunctionSource) -> int:
    """Independent count: params, variable loads, operators, builtin calls
    and indexing each record once; an indexed store records twice."""
    builtins = {"c", "structure", "length", "sum", "sqrt", "abs", "floor", "rep", "numeric", "integer",
                "as.integer", "as.double"}
    n = len(fn.params)

    def walk(node):
        nonlocal n
        if isinstance(node, list):
            for x in node:
                walk(x)
            return
        if isinstance(node, (P.Var, P.BinOp, P.Neg, P.Structure, P.Index)):
            n += 1
        if isinstance(node, P.IndexAssign):
            n += 2  # loads the target, records the updated vector
        if isinstance(node, P.Call) and node.name in builtins:
            n += 1
        if isinstance(node, P.Node):
            for v in vars(node).values():
                if isinstance(v, (P.Node, list)):
                    walk(v)

    walk(fn.body)
    return n


def test_encrypt_site_count_matches_ast_walk():
    src = (BENCH / "profiler_rsa.mdyn").read_text()
    ast = parse(src)
    prog = compile_source(src)
    enc = prog.functions[prog.by_name["encrypt"]]
    assert len(enc.record_sites) == count_sites(ast.function("encrypt"))
    # msg, p, a1, n1 loads and the * and %% results are all covered
    kinds = {op for op, _ in enc.code}
    assert BINOP in kinds and LDGLOB in kinds


@pytest.mark.parametrize("path", sorted(BENCH.glob("*.mdyn")), ids=lambda p: p.stem)
def test_site_count_all_benchmarks(path):
    src = path.read_text()
    ast = parse(src)
    prog = compile_source(src)
    for f in ast.functions:
        assert len(prog.functions[prog.by_name[f.name]].record_sites) == count_sites(f), f.name


@pytest.mark.parametrize("path", sorted(BENCH.glob("*.mdyn")), ids=lambda p: p.stem)
def test_lowering_deterministic(path):
    src = path.read_text()
    a, b = compile_source(src), compile_source(src)
    for fa, fb in zip(a.functions, b.functions):
        assert fa.code == fb.code and fa.record_sites == fb.record_sites


def test_record_sites_strictly_increasing():
    for path in BENCH.glob("*.mdyn"):
        for f in compile_source(path.read_text()).functions:
            offs = [o.bytecode_offset for o in f.record_sites]
            assert offs == sorted(set(offs))
            assert all(f.code[o][0] == RECORD for o in offs)


def test_small_power_becomes_multiplication():
    f = compile_source("g <- function(x) x^3L\n").functions[0]
    assert (POWK, 3) in f.code
    f = compile_source("g <- function(x) 2^x\n").functions[0]
    assert not any(op == POWK for op, _ in f.code)


def test_comments_and_semicolons():
    prog = parse("# header\nx <- 1; y <- 2 # trailing\n")
    assert len(prog.top_level) == 2


idents = st.sampled_from(["a", "b", "zz"])


@settings(max_examples=60, deadline=None)
@given(st.recursive(idents.map(P.Var) | st.integers(0, 9).map(P.Num),
                    lambda ch: st.builds(P.BinOp, st.sampled_from(["+", "-", "*", "<"]), ch, ch), max_leaves=8))
def test_printed_expressions_reparse(e):
    def show(x):
        if isinstance(x, P.Var):
            return x.name
        if isinstance(x, P.Num):
            return f"{x.value}L"
        return f"({show(x.left)} {x.op} {show(x.right)})"

    back = parse(show(e)).top_level[0].expr

    def norm(x):
        if isinstance(x, P.Num):
            return ("n", x.value)
        if isinstance(x, P.Var):
            return ("v", x.name)
        return (x.op, norm(x.left), norm(x.right))

    assert norm(back) == norm(e)
