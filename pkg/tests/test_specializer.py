import pytest

from conftest import make_vm
from staleguard.bytecode import LDGLOB, compile_source
from staleguard.specializer import (Deopted, Done, SpecializeError, execute_optimized, invalidate,
                                    render_slot_map, specialize)
from staleguard.values import double, integer, parse_feedback, render_feedback
from staleguard.vm import VM

POLLUTED = "f <- function() x+x+x+x+1L\nx <- 1\nf(); f()\nx <- 1L\nfor (i in 1:5L) f()\n"
INT_S = parse_feedback("[int(s)]")


def interp_vm(src):
    return make_vm(src, enable_tier2=False)


def test_polluted_feedback_gives_boxed_chain():
    vm = interp_vm(POLLUTED)
    st = vm.state("f")
    cf = specialize(st.base, st.table, vm=vm)
    assert "_generic(" in cf.source and "_dispatch(" not in cf.source
    assert cf.slot_map and all(render_feedback(s.compiled_feedback) == "[dbl(s), int(s)]" for s in cf.slot_map)
    listing = render_slot_map(cf).splitlines()
    assert listing[1] == "- #2->3: [<?>] (0), [dbl(s), int(s)]"
    assert execute_optimized(vm, cf, ()) == Done(integer(5))


def test_override_gives_unboxed_chain():
    vm = interp_vm(POLLUTED)
    st = vm.state("f")
    ov = {o: INT_S for o in st.base.record_sites}
    cf = specialize(st.base, st.table, ov, vm=vm)
    assert "_generic(" not in cf.source and "_dispatch(" not in cf.source
    assert cf.slot_map == []
    assert cf.compiled_against == ov
    loads = [o for o in st.base.record_sites if st.base.code[o.bytecode_offset - 1][0] == LDGLOB]
    assert sum(1 for ins in cf.code if ins.op == "guard.int") >= len(loads)
    assert execute_optimized(vm, cf, ()) == Done(integer(5))


def test_guard_failure_deopts_and_widens():
    vm = interp_vm("f <- function() x+x+x+x+1L\nx <- 1L\nfor (i in 1:5L) f()\n")
    st = vm.state("f")
    first = st.base.record_sites[0]
    assert render_feedback(st.table.observed(first)) == "[int(s)]"
    cf = specialize(st.base, st.table, vm=vm)
    vm.install(st, cf)
    assert execute_optimized(vm, cf, ()) == Done(integer(5))
    vm.globals["x"] = double(1.0)
    r = execute_optimized(vm, cf, ())
    assert isinstance(r, Deopted) and r.value == double(5.0) and r.origin == first
    assert render_feedback(st.table.observed(first)) == "[dbl(s), int(s)]"
    assert not cf.valid and st.compiled is None
    assert vm.deopt_count("f") == 1


def test_monomorphic_vector_feedback():
    vm = interp_vm("g <- function(v) v * 2 + v\nfor (i in 1:3L) g(c(1, 2))\n")
    st = vm.state("g")
    cf = specialize(st.base, st.table, vm=vm)
    assert "_dispatch(" not in cf.source
    assert cf.slot_map
    assert cf.compiled_against == st.table.snapshot()
    assert execute_optimized(vm, cf, (double(1, 2),)) == Done(double(3, 6))


def test_no_record_sites():
    f = compile_source("k <- function() 1L\n").functions[0]
    assert not f.record_sites
    vm = VM(compile_source("k <- function() 1L\n"))
    with pytest.raises(SpecializeError):
        specialize(f, vm.state("k").table)
    for _ in range(12):
        assert vm.call_function("k") == integer(1)
    assert vm.state("k").compiled is None and vm.state("k").compile_failed


def test_override_must_name_a_record_site():
    vm = interp_vm(POLLUTED)
    st = vm.state("f")
    bad = st.base.record_sites[0]._replace(bytecode_offset=0)
    with pytest.raises(ValueError):
        specialize(st.base, st.table, {bad: INT_S}, vm=vm)


def test_invalidate_then_call_uses_tier1():
    vm = make_vm("g <- function(a) a + 1L\n", tier_up_threshold=10 ** 9)
    st = vm.state("g")
    for i in range(3):
        vm.call_function("g", (integer(i),))
    cf = specialize(st.base, st.table, vm=vm)
    vm.install(st, cf)
    seen = []
    vm.clock.fire = lambda: seen.append(vm.frames[-1][0])
    vm.clock.nf = 0
    vm.call_function("g", (integer(1),))
    assert seen and all(m is cf for m in seen)
    invalidate(vm, cf)
    seen.clear()
    assert vm.call_function("g", (integer(1),)) == integer(2)
    assert seen and all(m is None for m in seen)


def test_deopt_count_cumulative():
    vm = make_vm("g <- function(a) a + 1L\n")
    for _ in range(12):
        vm.call_function("g", (integer(1),))
    vm.call_function("g", (double(1.5),))
    for _ in range(3):
        vm.call_function("g", (double(1.5),))
    # version 2 was compiled for untagged [dbl(s), int(s)]; a tagged value breaks it
    vm.call_function("g", (double(1, tag="k"),))
    assert vm.deopt_count("g") == 2


def test_marker_present_for_whole_activation_only():
    vm = make_vm("g <- function(n) { s = 0; for (i in 1:n) s = s + i; s }\n")
    for _ in range(10):
        vm.call_function("g", (integer(3),))
    cf = vm.state("g").compiled
    assert cf is not None and cf.marker_token is cf
    markers = []
    vm.clock.fire = lambda: markers.append(vm.frames[-1][0] if vm.frames else "empty")
    vm.clock.nf = 0
    vm.call_function("g", (integer(50),))
    assert len(markers) > 50 and all(m is cf for m in markers)
    assert vm.frames == []


def test_slot_fidelity_in_loop():
    # at every interruption point the slots of the loop body obey the dataflow
    # s_result == s_loaded + v, and the final slots hold the last values
    src = "h <- function(v, n) { s = v; for (i in 1:n) s = s + v; s }\n"
    vm = make_vm(src)
    v = double(1.5, 2.5)
    for _ in range(10):
        vm.call_function("h", (v, integer(2)))
    cf = vm.state("h").compiled
    by_origin = {}
    for s in cf.slot_map:
        by_origin.setdefault(s.origin.bytecode_offset, []).append(s.slot_index)
    code = cf.code
    snaps = []
    vm.clock.fire = lambda: snaps.append(list(vm.frames[-1]))
    vm.clock.nf = 0
    out = vm.call_function("h", (v, integer(40)))
    assert out == double(1.5 * 41, 2.5 * 41)
    base = vm.state("h").base
    offs = [o.bytecode_offset for o in base.record_sites]
    # sites inside the loop body: load s, load v, the + result (in code order)
    body = [o for o in offs if any(o == s.origin.bytecode_offset for s in cf.slot_map)]
    slot_of = {s.origin.bytecode_offset: s.slot_index for s in cf.slot_map}
    add_site = next(o for o in body if base.code[o - 1][0] == 7)  # BINOP
    s_load, v_load = [o for o in body if o < add_site][-2:]
    checked = 0
    for fr in snaps:
        a, b, r = fr[slot_of[s_load]], fr[slot_of[v_load]], fr[slot_of[add_site]]
        if r is not None and a is not None:
            assert b == v
            assert r == double(a.data[0] + 1.5, a.data[1] + 2.5)
            checked += 1
    assert checked >= 39
    assert snaps[-1][slot_of[add_site]] == out


def test_disassembly_lists_guards_and_slots():
    vm = interp_vm(POLLUTED)
    st = vm.state("f")
    text = specialize(st.base, st.table, vm=vm).disassemble()
    assert "slot" in text and "guard.noattr" in text
