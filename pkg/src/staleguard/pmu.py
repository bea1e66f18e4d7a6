"""Hardware-counter trigger backend (Linux ``perf_event_open``).

The counter counts retired user-mode instructions only (kernel and
hypervisor excluded), so a process blocked in a system call accrues nothing
and is never interrupted there. Each overflow delivers one signal to this
process; the handler only raises a pending flag for the VM.
"""

from __future__ import annotations

import ctypes
import errno
import fcntl
import os
import platform
import signal
import struct
from dataclasses import dataclass
from typing import List, Optional

from .profiler import _AsyncTrigger

PERF_TYPE_HARDWARE = 0
PERF_COUNT_HW_INSTRUCTIONS = 1
PERF_SAMPLE_IP = 1
PERF_ATTR_SIZE_VER5 = 112

PERF_EVENT_IOC_ENABLE = 0x2400
PERF_EVENT_IOC_DISABLE = 0x2401
PERF_EVENT_IOC_REFRESH = 0x2402
PERF_EVENT_IOC_RESET = 0x2403

F_SETSIG = getattr(fcntl, "F_SETSIG", 10)
F_SETOWN = getattr(fcntl, "F_SETOWN", 8)
O_ASYNC = getattr(os, "O_ASYNC", 0o20000)

# attr.flags bit positions
_DISABLED = 1 << 0
_EXCLUDE_KERNEL = 1 << 5
_EXCLUDE_HV = 1 << 6
_PRECISE_IP_SHIFT = 15

_SYSCALL_NR = {"x86_64": 298, "amd64": 298, "aarch64": 241, "arm64": 241, "i686": 336, "i386": 336}

MIN_SAMPLE_PERIOD = 10_000


class PmuUnavailable(OSError):
    pass


class AccessDenied(PmuUnavailable):
    pass


class Unsupported(PmuUnavailable):
    pass


class PerfEventAttr(ctypes.Structure):
    _fields_ = [
        ("type", ctypes.c_uint32),
        ("size", ctypes.c_uint32),
        ("config", ctypes.c_uint64),
        ("sample_period", ctypes.c_uint64),
        ("sample_type", ctypes.c_uint64),
        ("read_format", ctypes.c_uint64),
        ("flags", ctypes.c_uint64),
        ("wakeup_events", ctypes.c_uint32),
        ("bp_type", ctypes.c_uint32),
        ("config1", ctypes.c_uint64),
        ("config2", ctypes.c_uint64),
        ("branch_sample_type", ctypes.c_uint64),
        ("sample_regs_user", ctypes.c_uint64),
        ("sample_stack_user", ctypes.c_uint32),
        ("clockid", ctypes.c_int32),
        ("sample_regs_intr", ctypes.c_uint64),
        ("aux_watermark", ctypes.c_uint32),
        ("sample_max_stack", ctypes.c_uint16),
        ("reserved_2", ctypes.c_uint16),
    ]


assert ctypes.sizeof(PerfEventAttr) == PERF_ATTR_SIZE_VER5


@dataclass(frozen=True)
class PmuConfig:
    sample_period: int = 1_000_000
    precise: int = 3
    signum: int = signal.SIGIO

    # Not configurable: the whole point is that kernel time never triggers.
    @property
    def exclude_kernel(self) -> bool:
        return True

    @property
    def exclude_hypervisor(self) -> bool:
        return True

    def __post_init__(self):
        if self.sample_period < MIN_SAMPLE_PERIOD:
            raise ValueError(f"sample_period must be >= {MIN_SAMPLE_PERIOD}")
        if not 0 <= self.precise <= 3:
            raise ValueError("precise must be in 0..3")


def build_attr(cfg: PmuConfig) -> PerfEventAttr:
    pe = PerfEventAttr()  # zero-initialized
    pe.type = PERF_TYPE_HARDWARE
    pe.size = ctypes.sizeof(pe)
    pe.config = PERF_COUNT_HW_INSTRUCTIONS
    pe.sample_type = PERF_SAMPLE_IP
    pe.sample_period = cfg.sample_period
    pe.flags = _DISABLED | _EXCLUDE_KERNEL | _EXCLUDE_HV | (cfg.precise << _PRECISE_IP_SHIFT)
    return pe


_libc = None


def _perf_event_open(attr: PerfEventAttr) -> int:
    global _libc
    nr = _SYSCALL_NR.get(platform.machine().lower())
    if nr is None or os.name != "posix":
        raise Unsupported("perf_event_open is not available on this platform")
    if _libc is None:
        _libc = ctypes.CDLL(None, use_errno=True)
    _libc.syscall.restype = ctypes.c_long
    fd = _libc.syscall(ctypes.c_long(nr), ctypes.byref(attr), ctypes.c_int(0), ctypes.c_int(-1),
                       ctypes.c_int(-1), ctypes.c_ulong(0))
    if fd < 0:
        err = ctypes.get_errno()
        msg = f"perf_event_open: {os.strerror(err)}"
        if err in (errno.EACCES, errno.EPERM):
            raise AccessDenied(err, msg)
        raise Unsupported(err, msg)
    return fd


def _open_with_precise_fallback(cfg: PmuConfig) -> int:
    # Hardware without precise sampling rejects precise_ip=3 with EINVAL or
    # EOPNOTSUPP; lower the skid requirement step by step.
    last: Optional[PmuUnavailable] = None
    for precise in range(cfg.precise, -1, -1):
        attr = build_attr(PmuConfig(cfg.sample_period, precise, cfg.signum))
        try:
            return _perf_event_open(attr)
        except AccessDenied:
            raise
        except Unsupported as e:
            last = e
            if e.errno not in (errno.EINVAL, errno.EOPNOTSUPP):
                break
    raise last


class TriggerHandle:
    """A configured counter; ``teardown`` is idempotent."""

    def __init__(self, cfg: PmuConfig, fd: int, on_signal):
        self.cfg = cfg
        self.fd = fd
        self._on_signal = on_signal
        self._old = None
        self.live = True

    def start(self) -> None:
        self._old = signal.signal(self.cfg.signum, self._on_signal)
        fcntl.fcntl(self.fd, fcntl.F_SETFL, os.O_NONBLOCK | O_ASYNC)
        fcntl.fcntl(self.fd, F_SETSIG, self.cfg.signum)
        fcntl.fcntl(self.fd, F_SETOWN, os.getpid())
        fcntl.ioctl(self.fd, PERF_EVENT_IOC_RESET, 0)
        try:
            fcntl.ioctl(self.fd, PERF_EVENT_IOC_REFRESH, -1)
        except OSError:
            # Kernels that reject a negative refresh still honour a plain enable,
            # which likewise never needs re-arming.
            fcntl.ioctl(self.fd, PERF_EVENT_IOC_ENABLE, 0)

    def count(self) -> int:
        """Retired user-mode instructions counted so far."""
        return struct.unpack("Q", os.read(self.fd, 8))[0]

    def teardown(self) -> None:
        if not self.live:
            return
        self.live = False
        try:
            fcntl.ioctl(self.fd, PERF_EVENT_IOC_DISABLE, 0)
        finally:
            os.close(self.fd)
            if self._old is not None:
                signal.signal(self.cfg.signum, self._old)
                self._old = None


def configure(cfg: PmuConfig, on_signal) -> TriggerHandle:
    """Open and start a counter delivering ``cfg.signum`` every period."""
    fd = _open_with_precise_fallback(cfg)
    h = TriggerHandle(cfg, fd, on_signal)
    try:
        h.start()
    except OSError as e:
        h.teardown()
        raise Unsupported(e.errno, f"cannot route counter overflow signals: {e}") from e
    return h


def teardown(h: TriggerHandle) -> None:
    h.teardown()


def available() -> bool:
    try:
        os.close(_open_with_precise_fallback(PmuConfig()))
        return True
    except PmuUnavailable:
        return False


class PmuTrigger(_AsyncTrigger):
    """Profiler trigger backend; construction fails fast if there is no PMU."""

    name = "pmu"

    def __init__(self, cfg: PmuConfig):
        super().__init__()
        self.cfg = cfg
        os.close(_open_with_precise_fallback(cfg))  # probe now so callers can fall back
        self.handle: Optional[TriggerHandle] = None

    def arm(self, clk) -> None:
        self._clk = clk
        self.handle = configure(self.cfg, self._handler)

    def disarm(self, clk) -> None:
        self.teardown()
        clk.nf = float("inf")

    def teardown(self) -> None:
        if self.handle is not None:
            self.handle.teardown()
            self.handle = None
        self._clk = None
        self.pending = 0  # drain: nothing sampled after this returns

    def take(self, clk) -> List[int]:
        if self.handle is None:
            self.pending = 0
            return []
        return super().take(clk)
