"""A two-tier VM for a small R-like language, with a sampling profiler that
detects and repairs stale type feedback in optimized code."""

from .bytecode import compile_source
from .harness import BenchmarkSpec, RunRecord, run
from .parser import parse
from .profiler import Profiler, ProfilerConfig
from .specializer import CompiledFunction, specialize
from .values import FeedbackType, Value, compare, merge
from .vm import VM

__all__ = [
    "BenchmarkSpec", "CompiledFunction", "FeedbackType", "Profiler", "ProfilerConfig", "RunRecord", "VM",
    "Value", "compare", "compile_source", "merge", "parse", "run", "specialize",
]
__version__ = "0.1.0"
