import math
from pathlib import Path

import pytest

from staleguard.bytecode import compile_source
from staleguard.values import Value
from staleguard.vm import VM

ROOT = Path(__file__).resolve().parent.parent
BENCH = ROOT / "benchmarks"
PROGRAMS = Path(__file__).resolve().parent / "programs"


def make_vm(src: str, **kw) -> VM:
    vm = VM(compile_source(src), **kw)
    vm.run_toplevel()
    return vm


def same_value(a: Value, b: Value) -> bool:
    """Exact equality, except that NaN equals NaN."""
    if a.kind != b.kind or a.tag != b.tag or len(a.data) != len(b.data):
        return False
    for x, y in zip(a.data, b.data):
        if isinstance(x, float) and isinstance(y, float) and math.isnan(x) and math.isnan(y):
            continue
        if x != y or type(x) is not type(y):
            return False
    return True


@pytest.fixture
def vm_of():
    return make_vm


# --- acceptance summary ------------------------------------------------------------

_criteria = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        detail = dict(item.user_properties).get("detail", "")
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        _criteria.append((status, mark.args[0], detail))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for status, name, detail in _criteria:
        terminalreporter.write_line(f"{status}  {name}" + (f": {detail}" if detail else ""))


@pytest.fixture
def detail(request):
    """Call with a short summary string to attach it to the criterion line."""
    def put(text):
        request.node.user_properties.append(("detail", text))
    return put
