"""Command-line entry point: ``staleguard run|bench|experiment``."""

from __future__ import annotations

import argparse
import csv
import sys
from fractions import Fraction
from pathlib import Path
from typing import List, Optional

from . import harness
from .bytecode import LoweringError
from .parser import ParseError
from .profiler import MODES, TRIGGERS, ProfilerConfig
from .runtime import MiniDynError
from .specializer import render_slot_map
from .values import render_value


def _profiler_flags(p: argparse.ArgumentParser, mode_flag: str = "--profiler") -> None:
    g = p.add_argument_group("profiler")
    g.add_argument(mode_flag, dest="mode", choices=MODES, default="off" if mode_flag == "--profiler" else "full")
    g.add_argument("--sample-period", "--period", dest="period", type=int, default=500_000,
                   help="instruction units between triggers (default 500000)")
    g.add_argument("--threshold", type=int, default=20, help="samples a slot needs before it votes")
    g.add_argument("--clear-interval", type=int, default=100, help="triggers between sample resets")
    g.add_argument("--stale-fraction", type=Fraction, default=Fraction(1, 2))
    g.add_argument("--trigger", choices=TRIGGERS, default="virtual")


def _config(a) -> ProfilerConfig:
    return ProfilerConfig(sample_period=a.period, threshold=a.threshold, clear_interval=a.clear_interval,
                          stale_fraction=a.stale_fraction, trigger=a.trigger, mode=a.mode)


def _defines(items: List[str]) -> dict:
    out = {}
    for item in items or ():
        name, sep, literal = item.partition("=")
        if not sep or not name:
            raise SystemExit(f"staleguard: bad --define {item!r}, expected NAME=LITERAL")
        out[name] = literal
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="staleguard",
                                 description="Tiered MiniDyn VM with a sampling profiler for stale type feedback.")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one program")
    r.add_argument("file", type=Path)
    r.add_argument("--iterations", type=int, default=1)
    r.add_argument("--define", "-D", action="append", metavar="NAME=LITERAL",
                   help="replace a top-level assignment before running")
    r.add_argument("--events", action="store_true", help="print the event log")
    r.add_argument("--trace-feedback", action="store_true", help="print baseline type feedback at exit")
    r.add_argument("--dump-slot-map", action="store_true", help="print slot maps of installed tier-2 code")
    r.add_argument("--no-tier2", action="store_true", help="interpret only")
    _profiler_flags(r)

    b = sub.add_parser("bench", help="run every *.mdyn in a directory")
    b.add_argument("suite", type=Path)
    b.add_argument("--iterations", type=int, default=15)
    b.add_argument("--discard", type=int, default=5)
    b.add_argument("--csv", type=Path, help="write per-iteration records here")
    _profiler_flags(b, "--mode")

    e = sub.add_parser("experiment", help="run one of the evaluation experiments")
    e.add_argument("name", choices=("overhead", "threshold", "improve", "impact"))
    e.add_argument("--suite", type=Path, default=Path("benchmarks"))
    e.add_argument("--iterations", type=int, default=15)
    e.add_argument("--discard", type=int, default=5)
    e.add_argument("--periods", type=int, nargs="+", default=[100_000, 500_000, 1_000_000])
    e.add_argument("--thresholds", type=int, nargs="+", default=[10, 20, 50, 75, 100])
    e.add_argument("--csv", type=Path, help="also write the table as CSV")
    return ap


def cmd_run(a) -> int:
    spec = harness.BenchmarkSpec.from_file(a.file, iterations=a.iterations, discard=0, mode=a.mode,
                                           config=_config(a), defines=_defines(a.define), tier2=not a.no_tier2)
    res = harness.run(spec)
    if a.events:
        for line in res.events:
            print(line)
    if a.trace_feedback:
        for line in res.vm.trace_feedback():
            print(line)
    if a.dump_slot_map:
        for st in res.vm.states:
            if st.compiled is not None:
                print(f"{st.base.name} v{st.compiled.version}")
                print(render_slot_map(st.compiled))
    print(render_value(res.results[-1]))
    return 0


def _non_clean(directory: Path) -> List[Path]:
    return [p for p in harness.suite(directory) if not p.stem.endswith("_clean")]


def cmd_bench(a) -> int:
    cfg = _config(a)
    records = []
    rows = []
    for path in harness.suite(a.suite):
        spec = harness.BenchmarkSpec.from_file(path, iterations=a.iterations, discard=a.discard,
                                               mode=a.mode, config=cfg)
        res = harness.run(spec)
        records.extend(res.records)
        rows.append([path.stem, f"{res.mean_ms:.1f}", f"{res.median_ms:.1f}", res.count("RECOMPILE"),
                     res.count("DEOPT"), sum(r.outlier for r in res.aggregated)])
    print(harness.format_table(["benchmark", "mean ms", "median ms", "recompiles", "deopts", "outliers"], rows))
    if a.csv:
        harness.write_csv(records, a.csv)
    return 0


def cmd_experiment(a) -> int:
    base = ProfilerConfig()
    kw = dict(iterations=a.iterations, discard=a.discard, base=base)
    if a.name == "overhead":
        rows = harness.overhead_experiment(_non_clean(a.suite), periods=tuple(a.periods), **kw)
        header = ["benchmark", "period", "off ms", "record-only ms", "slowdown", "profiler ms", "triggers"]
        body = [[r.benchmark, r.period, f"{r.off_ms:.1f}", f"{r.record_ms:.1f}", f"{r.slowdown:.3f}",
                 f"{r.profiler_ms:.2f}", r.triggers] for r in rows]
        print(harness.format_table(header, body))
        print()
        means = harness.mean_slowdowns(rows)
        print(harness.format_table(["period", "mean slowdown", "mean attributed"],
                                   [[p, f"{s:.3f}", f"{t:.4f}"] for p, (s, t) in means.items()]))
    elif a.name == "threshold":
        paths = [a.suite / f"{n}.mdyn" for n in harness.PROFILER_BENCHMARKS]
        rows = harness.threshold_experiment(paths, thresholds=tuple(a.thresholds), periods=tuple(a.periods), **kw)
        header = ["benchmark", "T", "P", "outliers", "cycles", "recompiles", "deopts", "max deopts/window",
                  "mean ms"]
        body = [[r.benchmark, r.threshold, r.period, r.outliers, r.cycles, r.recompiles, r.deopts,
                 r.max_window_deopts, f"{r.mean_ms:.1f}"] for r in rows]
        print(harness.format_table(header, body))
    elif a.name == "improve":
        rows = harness.improve_experiment(a.suite, **kw)
        header = ["benchmark", "polluted ms", "converged ms", "clean ms", "speedup", "ceiling", "gap",
                  "recompiles"]
        body = [[r.benchmark, f"{r.polluted_ms:.1f}", f"{r.converged_ms:.1f}", f"{r.clean_ms:.1f}",
                 f"{r.speedup:.2f}", f"{r.ceiling:.2f}", f"{r.gap:+.1%}", r.recompiles] for r in rows]
        print(harness.format_table(header, body))
    else:
        rows = []
        for p in _non_clean(a.suite):
            rows.extend(harness.impact_estimation(p, iterations=a.iterations, discard=a.discard))
        print(harness.impact_table(rows))
        header = ["benchmark", "phase", "slots", "narrower", "changed", "optimizable"]
        body = [[r.benchmark, r.phase, r.slots, r.narrower, r.changed, r.optimizable] for r in rows]
    if a.csv:
        with open(a.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(body)
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    a = build_parser().parse_args(argv)
    try:
        return {"run": cmd_run, "bench": cmd_bench, "experiment": cmd_experiment}[a.command](a)
    except (harness.BenchmarkError, MiniDynError, ParseError, LoweringError, OSError, ValueError) as e:
        print(f"staleguard: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
