import ctypes
import errno

import pytest

from staleguard import pmu
from staleguard.harness import BenchmarkSpec, run
from staleguard.pmu import (AccessDenied, PmuConfig, PmuTrigger, PmuUnavailable, Unsupported, build_attr,
                            configure, teardown)
from staleguard.profiler import ProfilerConfig

from conftest import BENCH

HAVE_PMU = pmu.available()
needs_pmu = pytest.mark.skipif(not HAVE_PMU, reason="no hardware instruction counter in this environment")


def test_attr_layout():
    a = build_attr(PmuConfig(sample_period=250_000))
    assert ctypes.sizeof(a) == a.size == 112
    assert (a.type, a.config, a.sample_type, a.sample_period) == (0, 1, 1, 250_000)
    assert a.flags & 1  # starts disabled
    assert a.flags & (1 << 5) and a.flags & (1 << 6)  # user mode only
    assert (a.flags >> 15) & 3 == 3
    assert a.wakeup_events == 0 and a.config1 == 0 and a.read_format == 0


@pytest.mark.parametrize("precise", [0, 1, 2, 3])
def test_precise_field(precise):
    assert (build_attr(PmuConfig(precise=precise)).flags >> 15) & 3 == precise


def test_config_validation():
    PmuConfig(sample_period=10_000)
    with pytest.raises(ValueError):
        PmuConfig(sample_period=9_999)
    with pytest.raises(ValueError):
        PmuConfig(precise=4)
    c = PmuConfig()
    assert c.exclude_kernel and c.exclude_hypervisor
    with pytest.raises(AttributeError):
        c.exclude_kernel = False
    with pytest.raises(TypeError):
        PmuConfig(exclude_kernel=False)


class FakeSyscall:
    restype = None

    def __init__(self, result):
        self.result = result
        self.calls = 0

    def __call__(self, *args):
        self.calls += 1
        return self.result


class FakeLibc:
    def __init__(self, result):
        self.syscall = FakeSyscall(result)


@pytest.fixture
def fake(monkeypatch):
    def install(result, err=0):
        lib = FakeLibc(result)
        monkeypatch.setattr(pmu, "_libc", lib)
        monkeypatch.setattr(pmu.platform, "machine", lambda: "x86_64")
        monkeypatch.setattr(ctypes, "get_errno", lambda: err)
        return lib.syscall
    return install


@pytest.mark.parametrize("err,exc", [(errno.EACCES, AccessDenied), (errno.EPERM, AccessDenied),
                                     (errno.ENOENT, Unsupported), (errno.ENODEV, Unsupported)])
def test_errno_mapping(fake, err, exc):
    lib = fake(-1, err)
    with pytest.raises(exc) as info:
        pmu._open_with_precise_fallback(PmuConfig())
    assert info.value.errno == err and isinstance(info.value, PmuUnavailable)
    assert lib.calls == 1  # only EINVAL/EOPNOTSUPP retry with less precision


@pytest.mark.parametrize("err", [errno.EINVAL, errno.EOPNOTSUPP])
def test_precise_fallback_steps_down(fake, err):
    lib = fake(-1, err)
    with pytest.raises(Unsupported):
        pmu._open_with_precise_fallback(PmuConfig(precise=3))
    assert lib.calls == 4


def test_fd_zero_is_a_valid_descriptor(fake):
    fake(0)
    assert pmu._perf_event_open(build_attr(PmuConfig())) == 0


def test_unknown_architecture(monkeypatch):
    monkeypatch.setattr(pmu.platform, "machine", lambda: "vax")
    with pytest.raises(Unsupported):
        pmu._perf_event_open(build_attr(PmuConfig()))


@pytest.mark.skipif(HAVE_PMU, reason="a counter is available")
def test_unavailable_raises_typed_error():
    with pytest.raises(PmuUnavailable):
        configure(PmuConfig(), lambda *a: None)
    with pytest.raises(PmuUnavailable):
        PmuTrigger(PmuConfig())


def test_run_degrades_to_virtual_counter():
    cfg = ProfilerConfig(trigger="pmu", sample_period=200_000, threshold=5)
    spec = BenchmarkSpec.from_file(BENCH / "profiler_microbenchmark.mdyn", iterations=1, discard=0,
                                   mode="full", config=cfg)
    if HAVE_PMU:
        res = run(spec)
    else:
        with pytest.warns(RuntimeWarning):
            res = run(spec)
        assert res.profiler.triggers == res.vm.clock.u // 200_000
    assert res.count("RECOMPILE") == 1


# --- real hardware only ---------------------------------------------------------

@needs_pmu
def test_blocking_syscall_is_not_interrupted():
    import os
    import threading

    hits = []
    h = configure(PmuConfig(sample_period=100_000), lambda *a: hits.append(1))
    r, w = os.pipe()
    try:
        threading.Timer(2.0, os.write, (w, b"x")).start()
        before = len(hits)
        assert os.read(r, 1) == b"x"  # an interrupted call would raise or need a retry
        assert len(hits) - before <= 1  # at most the instructions around the call itself
    finally:
        teardown(h)
        os.close(r)
        os.close(w)


@needs_pmu
def test_period_fidelity():
    hits = []
    period = 100_000
    h = configure(PmuConfig(sample_period=period), lambda *a: hits.append(1))
    try:
        x = 0
        for i in range(2_000_000):
            x += i
        counted = h.count()
    finally:
        teardown(h)
    expect = counted / period
    assert abs(len(hits) - expect) <= 0.2 * expect


@needs_pmu
def test_teardown_is_idempotent():
    h = configure(PmuConfig(), lambda *a: None)
    teardown(h)
    teardown(h)
    assert not h.live


@needs_pmu
def test_configure_teardown_stress():
    import os

    before = len(os.listdir("/proc/self/fd"))
    for _ in range(1000):
        teardown(configure(PmuConfig(), lambda *a: None))
    assert len(os.listdir("/proc/self/fd")) == before
