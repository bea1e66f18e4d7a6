import os
import threading
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from conftest import BENCH, make_vm
from staleguard.bytecode import FeedbackOrigin
from staleguard.harness import BenchmarkSpec, run
from staleguard.profiler import (OsTimer, ProfileEntry, Profiler, ProfilerConfig, SampleOutcome,
                                 VirtualCounter, build_overrides, make_trigger, should_recompile)
from staleguard.values import ALL_FEEDBACK_TYPES, BOTTOM, PARTIAL_TYPES, FeedbackType, double, parse_feedback, render_feedback
from staleguard.vm import Clock

POLLUTED = "f <- function() x+x+x+x+1L\nx <- 1\nf(); f()\nx <- 1L\n"
MICRO = BENCH / "profiler_microbenchmark.mdyn"


def entry(i, bits, count, compiled_bits, origin=None):
    e = ProfileEntry(i, origin or FeedbackOrigin(0, i), FeedbackType.of(compiled_bits))
    e.bits, e.count = bits, count
    return e


# --- configuration -------------------------------------------------------------

@pytest.mark.parametrize("kw", [dict(sample_period=0), dict(threshold=0), dict(clear_interval=0),
                                dict(stale_fraction=0), dict(stale_fraction=Fraction(3, 2)),
                                dict(mode="sometimes"), dict(trigger="sundial")])
def test_config_rejects(kw):
    with pytest.raises(ValueError):
        ProfilerConfig(**kw)


def test_config_defaults():
    c = ProfilerConfig()
    assert (c.sample_period, c.threshold, c.clear_interval, c.stale_fraction) == (500_000, 20, 100, Fraction(1, 2))
    assert ProfilerConfig(stale_fraction="2/3").stale_fraction == Fraction(2, 3)


# --- policy --------------------------------------------------------------------

types = st.sampled_from([t.bits for t in ALL_FEEDBACK_TYPES])
sampled_types = st.sampled_from([t.bits for t in PARTIAL_TYPES])  # samples come from real values


@settings(max_examples=400)
@given(st.lists(st.tuples(sampled_types, st.integers(0, 40), types), min_size=0, max_size=8),
       st.integers(1, 30), st.fractions(min_value=Fraction(1, 10), max_value=1))
def test_should_recompile_matches_formula(rows, threshold, frac):
    entries = [entry(i, b if n else BOTTOM.bits, n, cb) for i, (b, n, cb) in enumerate(rows)]
    cfg = ProfilerConfig(threshold=threshold, stale_fraction=frac)
    # oracle: slots with enough samples whose sampled set differs, over all slots
    stale = sum(1 for b, n, cb in rows if n >= threshold and b != cb)
    want = bool(rows) and Fraction(stale, len(rows)) > frac
    assert should_recompile(entries, cfg) == want
    assert not should_recompile(entries, cfg, blacklisted=True)


def test_unsampled_slots_count_in_denominator():
    int_s, dbl_s = parse_feedback("[int(s)]").bits, parse_feedback("[dbl(s)]").bits
    cfg = ProfilerConfig(threshold=5)
    two_stale = [entry(0, int_s, 9, dbl_s), entry(1, int_s, 9, dbl_s)]
    assert should_recompile(two_stale, cfg)
    assert not should_recompile(two_stale + [entry(2, 0, 0, dbl_s), entry(3, 0, 0, dbl_s)], cfg)
    assert should_recompile(two_stale + [entry(2, 0, 0, dbl_s)], cfg)


def test_build_overrides_merges_shared_origins():
    o = FeedbackOrigin(1, 7)
    int_s, dbl_s = parse_feedback("[int(s)]").bits, parse_feedback("[dbl(s)]").bits
    ov = build_overrides([entry(0, int_s, 20, dbl_s, o), entry(1, dbl_s, 20, dbl_s, o),
                          entry(2, int_s, 3, dbl_s, FeedbackOrigin(1, 9))], threshold=20)
    assert list(ov) == [o]
    assert render_feedback(ov[o]) == "[dbl(s), int(s)]"


# --- triggers ------------------------------------------------------------------

def test_virtual_counter_first_trigger_at_period():
    clk = Clock()
    vc = VirtualCounter(1_000_000)
    vc.arm(clk)
    assert clk.nf == 1_000_000
    clk.u = 999_999
    assert clk.u < clk.nf
    clk.u = 1_000_000
    assert vc.take(clk) == [1_000_000]
    assert clk.nf == 2_000_000


@given(st.integers(1, 10_000), st.integers(0, 50), st.lists(st.integers(1, 5), max_size=30))
def test_virtual_counter_counts_multiples(period, k, steps):
    """k*P units in arbitrary strides give exactly k triggers, at the multiples."""
    clk = Clock()
    vc = VirtualCounter(period)
    vc.arm(clk)
    total = k * period
    got = []
    cuts = sorted({min(total, s * period // 2 * i) for i, s in enumerate(steps, 1)} | {total})
    for c in cuts:
        clk.u = c
        if clk.u >= clk.nf:
            got.extend(vc.take(clk))
    assert got == [m * period for m in range(1, k + 1)]


def test_ten_periods_ten_triggers_in_a_vm():
    vm = make_vm("f <- function(n) { s <- 0L\n for (i in 1:n) s <- s + i\n s }\n")
    p = Profiler(ProfilerConfig(sample_period=1000, mode="record-only")).attach(vm)
    start = vm.clock.u
    while vm.clock.u - start < 10_000:
        vm.call_function("f", [double(3)])
    crossed = (vm.clock.u // 1000) - (start // 1000)
    assert p.triggers == crossed
    assert sum(p.outcomes.values()) == p.triggers


def test_period_one_samples_every_unit():
    vm = make_vm("f <- function() 1L + 2L\n")
    p = Profiler(ProfilerConfig(sample_period=1, mode="record-only")).attach(vm)
    u0 = vm.clock.u
    vm.call_function("f")
    assert p.triggers == vm.clock.u - u0


def test_outcomes_cover_all_cases():
    vm = make_vm("f <- function(v) v * 2 + v\nfor (i in 1:12L) f(c(1, 2))\n")
    p = Profiler(ProfilerConfig(mode="record-only")).attach(vm)
    assert p.sample([]) is SampleOutcome.MISS_NO_FRAME
    st_f = vm.state("f")
    assert p.sample([(None, st_f)]) is SampleOutcome.MISS_NOT_OPTIMIZED
    cf = st_f.compiled
    assert cf is not None and cf.entries
    frame = [cf] + [None] * 40
    frame[cf.entries[0].slot_index] = double(1, 2)
    assert p.sample([frame]) is SampleOutcome.HIT
    assert cf.entries[0].count == 1
    cf.valid = False
    assert p.sample([frame]) is SampleOutcome.MISS_NOT_OPTIMIZED


def test_polluted_function_is_recompiled_once():
    vm = make_vm(POLLUTED + "w <- function() { s <- 0L\n for (i in 1:3000L) s <- f()\n s }\n")
    p = Profiler(ProfilerConfig(sample_period=2000, threshold=5)).attach(vm)
    vm.call_function("w")
    recs = [str(e) for e in vm.events if e.kind == "RECOMPILE"]
    assert len(recs) == 1 and recs[0].startswith("RECOMPILE f {")
    assert "int(s)" in recs[0] and "dbl(s)" not in recs[0]
    after = vm.events[[e.kind for e in vm.events].index("RECOMPILE"):]
    assert not any(e.kind == "DEOPT" for e in after)
    assert vm.state("f").compiled.slot_map == []


def test_clear_after_interval():
    vm = make_vm(POLLUTED + "w <- function() { s <- 0L\n for (i in 1:3000L) s <- f()\n s }\n")
    p = Profiler(ProfilerConfig(sample_period=500, threshold=10_000, clear_interval=7, mode="record-only")).attach(vm)
    vm.call_function("w")
    assert p.triggers >= 14
    clears = [e for e in vm.events if e.kind == "CLEAR"]
    assert len(clears) == p.triggers // 7 == p.window
    # after the last clear only the triggers since then have been merged
    cf = vm.state("f").compiled
    assert max(e.count for e in cf.entries) <= p.triggers % 7


def test_threshold_above_clear_interval_never_recompiles():
    # a slot gathers at most C samples per window, so T = C + 1 is never reached
    vm = make_vm(POLLUTED + "w <- function() { s <- 0L\n for (i in 1:3000L) s <- f()\n s }\n")
    p = Profiler(ProfilerConfig(sample_period=300, threshold=6, clear_interval=5)).attach(vm)
    vm.call_function("w")
    assert p.triggers > 20
    assert p.recompiles == 0


def test_blacklist_after_three_deopts_cleared_with_window():
    vm = make_vm(POLLUTED)
    p = Profiler(ProfilerConfig(sample_period=10**9)).attach(vm)
    fid = vm.state("f").base.id
    for _ in range(2):
        p.on_deopt(fid)
    assert not vm.is_blacklisted(fid)
    p.on_deopt(fid)
    assert vm.is_blacklisted(fid) and not vm.tier_up_check("f")
    p.clear_samples()
    assert not vm.is_blacklisted(fid)


def test_record_only_never_blacklists():
    vm = make_vm(POLLUTED)
    p = Profiler(ProfilerConfig(mode="record-only")).attach(vm)
    for _ in range(5):
        p.on_deopt(0)
    assert not p.blacklist


# --- whole runs ----------------------------------------------------------------

def _micro(mode, **kw):
    cfg = ProfilerConfig(sample_period=200_000, **kw)
    return run(BenchmarkSpec.from_file(MICRO, iterations=2, discard=0, mode=mode, config=cfg))


def test_runs_are_deterministic():
    a, b = _micro("full"), _micro("full")
    assert a.events == b.events and a.results == b.results


def test_off_mode_touches_nothing():
    r = _micro("off")
    assert r.profiler.touches == 0 and r.vm.profiler is None
    assert not any(e.split()[0] in ("TRIGGER", "SAMPLE", "RECOMPILE", "CLEAR") for e in r.events)


def test_record_only_is_pure():
    off, ro = _micro("off"), _micro("record-only")
    assert ro.profiler.triggers > 0 and ro.profiler.recompiles == 0
    strip = [e for e in ro.events if e.split()[0] not in ("TRIGGER", "SAMPLE", "CLEAR")]
    assert strip == off.events
    assert off.results == ro.results
    assert [r.units for r in off.records] == [r.units for r in ro.records]


@settings(max_examples=25, deadline=None)
@given(st.lists(st.sampled_from(["1L", "2.5", "TRUE", "c(1, 2)", 'structure(1, class="k")']),
                min_size=1, max_size=30))
def test_samples_only_widen_within_a_window(values):
    src = "f <- function(v) v * 2 + v\nfor (i in 1:12L) f(c(1, 2))\n"
    vm = make_vm(src)
    p = Profiler(ProfilerConfig(mode="record-only", sample_period=10**9)).attach(vm)
    cf = vm.state("f").compiled
    e = cf.entries[0]
    prev_bits, prev_n = e.bits, e.count
    for lit in values:
        frame = [cf] + [None] * 40
        frame[e.slot_index] = make_vm(f"z <- {lit}\n").globals["z"]
        p.sample([frame])
        assert e.bits & prev_bits == prev_bits and e.count == prev_n + 1
        prev_bits, prev_n = e.bits, e.count


# --- asynchronous backends ------------------------------------------------------

def test_os_timer_interrupts_blocking_read():
    r, w = os.pipe()
    clk = Clock()
    t = OsTimer(0.01)
    t.arm(clk)
    threading.Timer(0.3, os.write, (w, b"x")).start()
    try:
        assert os.read(r, 1) == b"x"  # retried by Python after each EINTR
    finally:
        t.disarm(clk)
        os.close(r)
        os.close(w)
    assert t.delivered > 0
    assert t.pending == 0 and clk.nf == float("inf")


def test_timer_trigger_runs_a_program():
    cfg = ProfilerConfig(trigger="timer", sample_period=5_000, mode="record-only")
    res = run(BenchmarkSpec.from_file(MICRO, iterations=1, discard=0, mode="record-only", config=cfg))
    assert res.profiler.triggers > 0 and res.profiler.recompiles == 0


def test_pmu_request_falls_back_with_warning():
    from staleguard.pmu import available

    if available():
        pytest.skip("a PMU is present here")
    with pytest.warns(RuntimeWarning, match="falling back"):
        trig = make_trigger(ProfilerConfig(trigger="pmu"))
    assert isinstance(trig, VirtualCounter)
