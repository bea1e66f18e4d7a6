"""Benchmark runner and the four experiments.

Iteration convention: if a program defines ``bench``, its top level runs once
as setup and every iteration calls ``bench()``. Otherwise every iteration
re-runs the whole top level. Either way all iterations share one VM, so
feedback, compiled code and profiler state carry over between them.
"""

from __future__ import annotations

import csv
import re
import statistics
import time
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .bytecode import compile_source
from .profiler import Profiler, ProfilerConfig
from .values import FeedbackType, Value, Verdict, bits_of, compare, merge_bits
from .vm import VM

CSV_COLUMNS = ("benchmark", "iteration", "wall_ms", "units", "recompiles", "deopts", "outlier")
OUTLIER_FACTOR = 1.10


@dataclass
class BenchmarkSpec:
    name: str
    source: Path
    iterations: int = 15
    discard: int = 5
    mode: str = "off"
    config: ProfilerConfig = field(default_factory=ProfilerConfig)
    defines: Dict[str, str] = field(default_factory=dict)  # top-level NAME <- literal rewrites
    instrument: bool = False
    tier2: bool = True

    def __post_init__(self):
        self.source = Path(self.source)
        if not 0 <= self.discard < self.iterations:
            raise ValueError("need 0 <= discard < iterations")
        if self.mode != self.config.mode:
            self.config = replace(self.config, mode=self.mode)

    @classmethod
    def from_file(cls, path, **kw) -> "BenchmarkSpec":
        path = Path(path)
        return cls(name=path.stem, source=path, **kw)


@dataclass
class RunRecord:
    benchmark: str
    iteration: int
    wall_ms: float
    units: int
    recompiles: int
    deopts: int
    outlier: bool = False

    def row(self) -> tuple:
        return (self.benchmark, self.iteration, f"{self.wall_ms:.3f}", self.units, self.recompiles,
                self.deopts, int(self.outlier))


@dataclass
class RunResult:
    spec: BenchmarkSpec
    records: List[RunRecord]
    events: List[str]
    results: List[Value]  # value produced by each iteration
    globals: Dict[str, Value]
    vm: VM
    profiler: Profiler
    setup_units: int = 0
    event_iteration: List[int] = field(default_factory=list)  # iteration of each event, -1 = setup
    observations: Dict[int, Dict[tuple, int]] = field(default_factory=dict)
    profiler_seconds: List[float] = field(default_factory=list)  # per iteration

    @property
    def aggregated(self) -> List[RunRecord]:
        return self.records[self.spec.discard:]

    @property
    def mean_ms(self) -> float:
        return statistics.fmean(r.wall_ms for r in self.aggregated)

    @property
    def median_ms(self) -> float:
        return statistics.median(r.wall_ms for r in self.aggregated)

    def count(self, kind: str) -> int:
        return sum(1 for e in self.events if e.split(" ", 1)[0] == kind)

    def last_event_iteration(self, kinds: Sequence[str]) -> int:
        last = -1
        for e, it in zip(self.events, self.event_iteration):
            if e.split(" ", 1)[0] in kinds:
                last = max(last, it)
        return last


def apply_defines(source: str, defines: Dict[str, str]) -> str:
    for name, literal in defines.items():
        pat = re.compile(rf"^(\s*){re.escape(name)}\s*(<-|=)\s*.*$", re.M)
        source, n = pat.subn(lambda m: f"{m.group(1)}{name} <- {literal}", source, count=1)
        if not n:
            raise ValueError(f"no top-level assignment to {name!r} to override")
    return source


class BenchmarkError(RuntimeError):
    pass


class Session:
    """One benchmark execution that can be advanced an iteration at a time,
    so several sessions can be interleaved under the same machine conditions."""

    def __init__(self, spec: BenchmarkSpec):
        self.spec = spec
        source = apply_defines(spec.source.read_text(), spec.defines)
        self.program = compile_source(source)
        self.vm = vm = VM(self.program, enable_tier2=spec.tier2, instrument_slots=spec.instrument)
        self.prof = Profiler(spec.config).attach(vm)
        self.observations: Dict[int, Dict[tuple, int]] = defaultdict(dict)
        self.current = -1
        if spec.instrument:
            obs = self.observations

            def observe(cf, slot, v):
                acc = obs[self.current]
                key = (cf, slot)
                acc[key] = merge_bits(acc.get(key, 0), bits_of(v))

            vm.slot_observer = observe
        self.event_iter: List[int] = []
        self.has_bench = "bench" in self.program.by_name
        self.records: List[RunRecord] = []
        self.results: List[Value] = []
        self.prof_seconds: List[float] = []
        self.setup_units = 0
        try:
            if self.has_bench:
                vm.run_toplevel()
        except Exception as e:
            self.prof.detach()
            raise BenchmarkError(f"{spec.name}: setup failed: {e}") from e
        self._mark(-1)
        self.setup_units = vm.clock.u

    def _mark(self, it: int) -> None:
        self.event_iter.extend([it] * (len(self.vm.events) - len(self.event_iter)))

    def step(self) -> RunRecord:
        vm, prof = self.vm, self.prof
        it = self.current = len(self.records)
        n_events = len(vm.events)
        u0 = vm.clock.u
        s0 = prof.seconds
        try:
            t0 = time.perf_counter()
            r = vm.call_function("bench") if self.has_bench else vm.run_toplevel()
            wall = (time.perf_counter() - t0) * 1000.0
        except Exception as e:
            prof.detach()
            raise BenchmarkError(f"{self.spec.name}: iteration {it} failed: {e}") from e
        new = vm.events[n_events:]
        rec = RunRecord(self.spec.name, it, wall, vm.clock.u - u0,
                        sum(1 for e in new if e.kind == "RECOMPILE"),
                        sum(1 for e in new if e.kind == "DEOPT"))
        self.records.append(rec)
        self.results.append(r)
        self.prof_seconds.append(prof.seconds - s0)
        self._mark(it)
        return rec

    def finish(self) -> RunResult:
        self.prof.detach()
        flag_outliers(self.records, self.spec.discard)
        vm = self.vm
        return RunResult(self.spec, self.records, [str(e) for e in vm.events], self.results, dict(vm.globals),
                         vm, self.prof, self.setup_units, self.event_iter, dict(self.observations),
                         self.prof_seconds)


def run(spec: BenchmarkSpec) -> RunResult:
    """Run ``spec.iterations`` iterations in one VM and time each."""
    session = Session(spec)
    for _ in range(spec.iterations):
        session.step()
    return session.finish()


def run_interleaved(specs: Sequence[BenchmarkSpec]) -> List[RunResult]:
    """Run several specs in lockstep: iteration k of every spec before k+1 of any.

    Paired iterations then share whatever the machine was doing at the time,
    which matters when comparing modes whose difference is a few percent.
    """
    sessions = [Session(s) for s in specs]
    try:
        for k in range(max(s.iterations for s in specs)):
            for sess in sessions:
                if k < sess.spec.iterations:
                    sess.step()
    finally:
        results = [sess.finish() for sess in sessions]
    return results


def flag_outliers(records: List[RunRecord], discard: int, reference_median: Optional[float] = None) -> None:
    """Strictly slower than 110% of the reference median is an outlier."""
    kept = records[discard:]
    if not kept:
        return
    ref = reference_median if reference_median is not None else statistics.median(r.wall_ms for r in kept)
    for r in records:
        r.outlier = is_outlier(r.wall_ms, ref)


def is_outlier(wall_ms: float, median_ms: float) -> bool:
    return wall_ms > OUTLIER_FACTOR * median_ms


def write_csv(records: Iterable[RunRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow(r.row())


def read_csv(path) -> List[RunRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [RunRecord(r["benchmark"], int(r["iteration"]), float(r["wall_ms"]), int(r["units"]),
                      int(r["recompiles"]), int(r["deopts"]), r["outlier"] == "1") for r in rows]


def suite(directory) -> List[Path]:
    return sorted(Path(directory).glob("*.mdyn"))


# --- experiments ------------------------------------------------------------------

PROFILER_BENCHMARKS = ("profiler_microbenchmark", "profiler_rsa", "profiler_shared")


def _spec(path, mode, cfg: ProfilerConfig, iterations, discard, **kw) -> BenchmarkSpec:
    return BenchmarkSpec.from_file(path, iterations=iterations, discard=discard, mode=mode,
                                   config=replace(cfg, mode=mode), **kw)


@dataclass
class OverheadRow:
    benchmark: str
    period: int
    off_ms: float
    record_ms: float
    profiler_ms: float  # mean time per iteration spent handling triggers
    triggers: int

    @property
    def slowdown(self) -> float:
        return self.record_ms / self.off_ms

    @property
    def attributed(self) -> float:
        """Profiler time per iteration relative to the off-mode iteration time."""
        return self.profiler_ms / self.off_ms


def overhead_experiment(paths: Sequence[Path], periods=(100_000, 500_000, 1_000_000), iterations=15,
                        discard=5, base: ProfilerConfig = None) -> List[OverheadRow]:
    """Record-only against off, per benchmark and period; all modes interleaved."""
    base = base or ProfilerConfig()
    rows = []
    for path in paths:
        specs = [_spec(path, "off", base, iterations, discard)]
        specs += [_spec(path, "record-only", replace(base, sample_period=p), iterations, discard) for p in periods]
        off, *profiled = run_interleaved(specs)
        for p, ro in zip(periods, profiled):
            rows.append(OverheadRow(path.stem, p, off.mean_ms, ro.mean_ms,
                                    statistics.fmean(ro.profiler_seconds[discard:]) * 1000.0,
                                    ro.profiler.triggers))
    return rows


def mean_slowdowns(rows: Sequence[OverheadRow]) -> Dict[int, Tuple[float, float]]:
    """period -> (mean wall slowdown, mean attributed overhead) across the suite."""
    by_p: Dict[int, List[OverheadRow]] = defaultdict(list)
    for r in rows:
        by_p[r.period].append(r)
    return {p: (statistics.fmean(r.slowdown for r in rs), statistics.fmean(r.attributed for r in rs))
            for p, rs in sorted(by_p.items())}


def count_cycles(events: Sequence[str]) -> int:
    """RECOMPILE of a function followed by a DEOPT of the same function."""
    armed = set()
    cycles = 0
    for e in events:
        parts = e.split()
        if parts[0] == "RECOMPILE":
            armed.add(parts[1])
        elif parts[0] == "DEOPT" and parts[1] in armed:
            armed.discard(parts[1])
            cycles += 1
    return cycles


def max_deopts_per_window(events: Sequence[str]) -> int:
    worst = 0
    counts: Dict[str, int] = defaultdict(int)
    for e in events:
        parts = e.split()
        if parts[0] == "CLEAR":
            counts.clear()
        elif parts[0] == "DEOPT":
            counts[parts[1]] += 1
            worst = max(worst, counts[parts[1]])
    return worst


@dataclass
class ThresholdRow:
    benchmark: str
    threshold: int
    period: int
    outliers: int
    cycles: int
    recompiles: int
    deopts: int
    max_window_deopts: int
    mean_ms: float
    reference_ms: float  # record-only median at the same period


def threshold_experiment(paths: Sequence[Path], thresholds=(10, 20, 50, 75, 100),
                         periods=(100_000, 500_000, 1_000_000), iterations=15, discard=5,
                         base: ProfilerConfig = None) -> List[ThresholdRow]:
    base = base or ProfilerConfig()
    rows = []
    for path in paths:
        for p in periods:
            specs = [_spec(path, "record-only", replace(base, sample_period=p), iterations, discard)]
            specs += [_spec(path, "full", replace(base, sample_period=p, threshold=t), iterations, discard)
                      for t in thresholds]
            ref, *fulls = run_interleaved(specs)
            for t, res in zip(thresholds, fulls):
                flag_outliers(res.records, discard, ref.median_ms)
                rows.append(ThresholdRow(path.stem, t, p, sum(r.outlier for r in res.aggregated),
                                         count_cycles(res.events), res.count("RECOMPILE"),
                                         res.count("DEOPT"), max_deopts_per_window(res.events),
                                         res.mean_ms, ref.median_ms))
    return rows


@dataclass
class ImproveRow:
    benchmark: str
    polluted_ms: float  # off mode, steady state
    converged_ms: float  # full mode, iterations after the last recompile
    clean_ms: float  # off mode on the *_clean sibling
    recompiles: int
    converged_iterations: int

    @property
    def speedup(self) -> float:
        return self.polluted_ms / self.converged_ms

    @property
    def ceiling(self) -> float:
        return self.polluted_ms / self.clean_ms

    @property
    def gap(self) -> float:
        """How far the converged time is above the clean time (0.1 = 10% slower)."""
        return self.converged_ms / self.clean_ms - 1.0


def converged_mean(res: RunResult) -> Tuple[float, int]:
    """Mean over iterations that start after the run's last RECOMPILE.

    Falls back to the normal aggregate when no recompilation happened.
    """
    last = res.last_event_iteration(("RECOMPILE",))
    if last < 0:
        return res.mean_ms, len(res.aggregated)
    after = [r.wall_ms for r in res.records if r.iteration > last and r.iteration >= res.spec.discard]
    if not after:
        after = [r.wall_ms for r in res.records if r.iteration > last]
    if not after:
        return float("nan"), 0
    return statistics.fmean(after), len(after)


def improve_experiment(bench_dir, names=PROFILER_BENCHMARKS, iterations=15, discard=5,
                       base: ProfilerConfig = None) -> List[ImproveRow]:
    base = base or ProfilerConfig()
    bench_dir = Path(bench_dir)
    rows = []
    for name in names:
        path = bench_dir / f"{name}.mdyn"
        clean = bench_dir / f"{name}_clean.mdyn"
        off, full, cl = run_interleaved([_spec(path, "off", base, iterations, discard),
                                         _spec(path, "full", base, iterations, discard),
                                         _spec(clean, "off", base, iterations, discard)])
        conv, n = converged_mean(full)
        rows.append(ImproveRow(name, off.mean_ms, conv, cl.mean_ms, full.count("RECOMPILE"), n))
    return rows


@dataclass
class ImpactRow:
    benchmark: str
    phase: str  # warmup | stable
    slots: int
    narrower: int
    changed: int
    optimizable: int
    narrower_optimizable: int = 0


def impact_estimation(path, iterations=15, discard=5, **kw) -> List[ImpactRow]:
    """Classify every slot by all values it held, split at the last compile event.

    Runs with full slot instrumentation and without the profiler, so no
    recompilation ever happens.
    """
    spec = BenchmarkSpec.from_file(path, iterations=iterations, discard=discard, mode="off",
                                   instrument=True, **kw)
    res = run(spec)
    boundary = res.last_event_iteration(("TIERUP", "RECOMPILE"))
    phases = {"warmup": lambda it: it <= boundary, "stable": lambda it: it > boundary}
    rows = []
    for phase, member in phases.items():
        acc: Dict[tuple, int] = {}
        for it, obs in res.observations.items():
            if member(it):
                for key, b in obs.items():
                    acc[key] = merge_bits(acc.get(key, 0), b)
        narrower = changed = optimizable = both = 0
        for (cf, slot), b in acc.items():
            compiled = cf.slot_map[slot - 1].compiled_feedback
            c = compare(FeedbackType.of(b), compiled)
            narrower += c.verdict is Verdict.NARROWER
            changed += c.verdict is Verdict.CHANGED
            optimizable += c.optimizable
            both += c.verdict is Verdict.NARROWER and c.optimizable
        rows.append(ImpactRow(Path(path).stem, phase, len(acc), narrower, changed, optimizable, both))
    return rows


def format_table(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    rows = [[str(x) for x in r] for r in rows]
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(header)]
    line = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    return "\n".join([line(header), line(["-" * w for w in widths])] + [line(r) for r in rows])


def impact_table(rows: Sequence[ImpactRow]) -> str:
    """One line per benchmark: narrower / changed / optimizable, warmup then stable."""
    by: Dict[str, Dict[str, ImpactRow]] = defaultdict(dict)
    for r in rows:
        by[r.benchmark][r.phase] = r
    header = ["benchmark", "warmup narrower", "warmup changed", "warmup optimizable",
              "stable narrower", "stable changed", "stable optimizable"]
    body = []
    for name, ph in by.items():
        w, s = ph["warmup"], ph["stable"]
        body.append([name, w.narrower, w.changed, w.optimizable, s.narrower, s.changed, s.optimizable])
    return format_table(header, body)
