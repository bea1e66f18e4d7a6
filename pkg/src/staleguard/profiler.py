"""Sampling profiler for stale type feedback.

At each trigger the profiler looks at the topmost frame only. If that frame
belongs to valid tier-2 code it merges the type of every value currently held
in the frame's boxed slots into the corresponding :class:`ProfileEntry`. In
``full`` mode it then asks whether more than ``stale_fraction`` of the
function's slots have confidently moved away from the feedback the code was
compiled against, and if so recompiles with the sampled types as overrides.

Samples are cleared every ``clear_interval`` triggers.
"""

from __future__ import annotations

import enum
import signal
import time
import warnings
from collections import defaultdict
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, List, Optional

from .bytecode import FeedbackOrigin
from .specializer import CompiledFunction, SpecializeError, specialize
from .values import (BOTTOM_BITS, FeedbackType, Verdict, bits_of, compare, merge_bits,
                     render_feedback)

MODES = ("off", "record-only", "full")
TRIGGERS = ("virtual", "timer", "pmu")

# Rough tier-1 speed of this implementation, used to turn a unit period into
# a wall-clock interval for the timer backend.
UNITS_PER_SECOND = 5_000_000


@dataclass
class ProfilerConfig:
    sample_period: int = 500_000
    threshold: int = 20
    clear_interval: int = 100
    stale_fraction: Fraction = Fraction(1, 2)
    trigger: str = "virtual"
    mode: str = "full"
    blacklist_deopts: int = 3

    def __post_init__(self):
        self.stale_fraction = Fraction(self.stale_fraction)
        if self.sample_period < 1 or self.threshold < 1 or self.clear_interval < 1:
            raise ValueError("sample_period, threshold and clear_interval must be >= 1")
        if not 0 < self.stale_fraction <= 1:
            raise ValueError("stale_fraction must be in (0, 1]")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.trigger not in TRIGGERS:
            raise ValueError(f"trigger must be one of {TRIGGERS}")


class ProfileEntry:
    """One row of a function's sample table."""

    __slots__ = ("slot_index", "origin", "bits", "count", "compiled_feedback")

    def __init__(self, slot_index: int, origin: FeedbackOrigin, compiled_feedback: FeedbackType):
        self.slot_index = slot_index
        self.origin = origin
        self.compiled_feedback = compiled_feedback
        self.bits = BOTTOM_BITS
        self.count = 0

    @property
    def sampled(self) -> FeedbackType:
        return FeedbackType.of(self.bits)

    @property
    def sample_count(self) -> int:
        return self.count

    def clear(self) -> None:
        self.bits = BOTTOM_BITS
        self.count = 0

    def __repr__(self) -> str:
        return (f"#{self.slot_index}->{self.origin.bytecode_offset}: {render_feedback(self.sampled)} "
                f"({self.count}), {render_feedback(self.compiled_feedback)}")


class SampleOutcome(enum.Enum):
    HIT = "hit"
    MISS_NOT_OPTIMIZED = "miss-not-optimized"
    MISS_NO_FRAME = "miss-no-frame"


def is_stale(e: ProfileEntry, threshold: int) -> bool:
    return e.count >= threshold and compare(e.sampled, e.compiled_feedback).verdict is not Verdict.EQUAL


def should_recompile(entries: List[ProfileEntry], cfg: ProfilerConfig, blacklisted: bool = False) -> bool:
    """More than ``stale_fraction`` of all mapped slots confidently differ.

    Slots without samples count towards the total but never vote.
    """
    if blacklisted or not entries:
        return False
    stale = sum(1 for e in entries if is_stale(e, cfg.threshold))
    return stale > cfg.stale_fraction * len(entries)


def build_overrides(entries: List[ProfileEntry], threshold: int) -> Dict[FeedbackOrigin, FeedbackType]:
    """Confident samples, merged across entries that share an origin."""
    acc: Dict[FeedbackOrigin, int] = {}
    for e in entries:
        if e.count >= threshold:
            acc[e.origin] = merge_bits(acc.get(e.origin, BOTTOM_BITS), e.bits)
    return {o: FeedbackType.of(b) for o, b in acc.items()}


# --- trigger backends ---------------------------------------------------------

class VirtualCounter:
    """Deterministic: one trigger per multiple of P executed units."""

    name = "virtual"

    def __init__(self, period: int):
        self.period = period
        self.fired = 0  # multiples of P already handled

    def arm(self, clk) -> None:
        self.fired = clk.u // self.period
        clk.nf = (self.fired + 1) * self.period

    def take(self, clk) -> List[int]:
        """Crossed multiples since the last call; re-arms the clock."""
        now = clk.u // self.period
        hits = [m * self.period for m in range(self.fired + 1, now + 1)]
        self.fired = now
        clk.nf = (now + 1) * self.period
        return hits

    def disarm(self, clk) -> None:
        clk.nf = float("inf")


class _AsyncTrigger:
    """Signal-driven backends: the handler only raises a pending flag."""

    def __init__(self):
        self.pending = 0
        self.delivered = 0
        self._clk = None

    def _handler(self, signum, frame) -> None:
        self.delivered += 1
        self.pending += 1
        clk = self._clk
        if clk is not None:
            clk.nf = -1

    def take(self, clk) -> List[int]:
        n, self.pending = self.pending, 0
        clk.nf = float("inf")
        return [clk.u] * n


class OsTimer(_AsyncTrigger):
    """Interval-timer interruptions (SIGALRM). Blocking system calls made while
    it is armed see the signal; use only when no such calls happen."""

    name = "timer"

    def __init__(self, interval_s: float):
        super().__init__()
        self.interval = max(interval_s, 1e-4)
        self._old = None

    def arm(self, clk) -> None:
        self._clk = clk
        self._old = signal.signal(signal.SIGALRM, self._handler)
        signal.setitimer(signal.ITIMER_REAL, self.interval, self.interval)

    def disarm(self, clk) -> None:
        signal.setitimer(signal.ITIMER_REAL, 0, 0)
        if self._old is not None:
            signal.signal(signal.SIGALRM, self._old)
            self._old = None
        self._clk = None
        self.pending = 0
        clk.nf = float("inf")


def make_trigger(cfg: ProfilerConfig):
    if cfg.trigger == "virtual":
        return VirtualCounter(cfg.sample_period)
    if cfg.trigger == "timer":
        return OsTimer(cfg.sample_period / UNITS_PER_SECOND)
    from .pmu import PmuConfig, PmuTrigger, PmuUnavailable

    try:
        return PmuTrigger(PmuConfig(sample_period=max(cfg.sample_period, 10_000)))
    except PmuUnavailable as e:
        warnings.warn(f"PMU trigger unavailable ({e}); falling back to the virtual counter",
                      RuntimeWarning, stacklevel=2)
        return VirtualCounter(cfg.sample_period)


# --- the profiler ---------------------------------------------------------------

class Profiler:
    def __init__(self, cfg: Optional[ProfilerConfig] = None):
        self.cfg = cfg or ProfilerConfig()
        self.vm = None
        self.trigger = None
        self.touches = 0  # every entry into profiler code bumps this
        self.triggers = 0
        self.window = 0
        self.outcomes = {o: 0 for o in SampleOutcome}
        self.recompiles = 0
        self.window_deopts: Dict[int, int] = defaultdict(int)
        self.blacklist: set = set()
        self.seconds = 0.0  # time spent inside trigger handling

    # -- wiring -------------------------------------------------------------

    def attach(self, vm) -> "Profiler":
        """Hook into ``vm``. In ``off`` mode nothing is installed at all."""
        self.vm = vm
        if self.cfg.mode == "off":
            return self
        self.touches += 1
        vm.profiler = self
        for st in vm.states:
            if st.compiled is not None:
                self.on_install(st.compiled)
        self.trigger = make_trigger(self.cfg)
        vm.clock.fire = self._fire
        self.trigger.arm(vm.clock)
        return self

    def detach(self) -> None:
        vm = self.vm
        if vm is None or self.trigger is None:
            return
        self.touches += 1
        self.trigger.disarm(vm.clock)
        if hasattr(self.trigger, "teardown"):
            self.trigger.teardown()
        vm.clock.fire = lambda: None
        vm.profiler = None
        self.trigger = None

    def on_install(self, cf: CompiledFunction) -> None:
        self.touches += 1
        cf.entries = [ProfileEntry(s.slot_index, s.origin, s.compiled_feedback) for s in cf.slot_map]

    def on_deopt(self, fid: int) -> None:
        self.touches += 1
        if self.cfg.mode != "full":
            return
        self.window_deopts[fid] += 1
        if self.window_deopts[fid] >= self.cfg.blacklist_deopts:
            self.blacklist.add(fid)

    def is_blacklisted(self, fid: int) -> bool:
        self.touches += 1
        return fid in self.blacklist

    # -- triggers -------------------------------------------------------------

    def _fire(self) -> None:
        t0 = time.perf_counter()
        self.touches += 1
        for unit in self.trigger.take(self.vm.clock):
            self.vm.log("TRIGGER", unit)
            self.on_trigger()
        self.seconds += time.perf_counter() - t0

    def on_trigger(self) -> SampleOutcome:
        """Sample the topmost frame, then apply the recompilation policy."""
        self.touches += 1
        vm = self.vm
        outcome = self.sample(vm.frames)
        self.outcomes[outcome] += 1
        if outcome is SampleOutcome.HIT and self.cfg.mode == "full":
            cf = vm.frames[-1][0]
            if vm.states[cf.source_id].compiled is cf and self.should_recompile(cf):
                self.recompile(cf)
        self.triggers += 1
        if self.triggers % self.cfg.clear_interval == 0:
            self.clear_samples()
        return outcome

    def sample(self, frames) -> SampleOutcome:
        if not frames:
            return SampleOutcome.MISS_NO_FRAME
        top = frames[-1]
        cf = top[0]
        if type(cf) is not CompiledFunction or not cf.valid:
            return SampleOutcome.MISS_NOT_OPTIMIZED
        log = self.vm.log if self.vm is not None else None
        for e in cf.entries:
            v = top[e.slot_index]
            if v is None:
                continue
            b = bits_of(v)
            e.bits = merge_bits(e.bits, b)
            e.count += 1
            if log is not None:
                log("SAMPLE", cf.name, e.slot_index, render_feedback(FeedbackType.of(b)))
        return SampleOutcome.HIT

    def should_recompile(self, cf: CompiledFunction) -> bool:
        self.touches += 1
        return cf.valid and should_recompile(cf.entries, self.cfg, cf.source_id in self.blacklist)

    def recompile(self, cf: CompiledFunction) -> Optional[CompiledFunction]:
        self.touches += 1
        vm = self.vm
        st = vm.states[cf.source_id]
        overrides = build_overrides(cf.entries, self.cfg.threshold)
        vm.invalidate(cf)
        for e in cf.entries:
            e.clear()
        self.recompiles += 1
        rendered = ",".join(f"{o.bytecode_offset}:{render_feedback(t)}" for o, t in sorted(overrides.items()))
        vm.log("RECOMPILE", st.base.name, "{" + rendered + "}")
        try:
            new = specialize(st.base, st.table, overrides, vm=vm)
        except SpecializeError:
            return None
        vm.install(st, new)
        return new

    def clear_samples(self) -> None:
        self.touches += 1
        self.window += 1
        for st in self.vm.states:
            if st.compiled is not None:
                for e in st.compiled.entries:
                    e.clear()
        self.window_deopts.clear()
        self.blacklist.clear()
        self.vm.log("CLEAR", self.window)
