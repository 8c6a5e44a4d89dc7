"""
Minimal multitasking LibOS: syscall dispatch, pipes, spawn/wait and the cooperative
scheduler that runs SIPs until they trap into it.

Syscall ABI: rax = number, rdi/rsi/rdx = arguments, r13 = return address (a cfi_label of
the caller), result in rax. Errors other than sanity failures come back as negative errno.
"""
import logging
import random
from typing import Dict, List, Optional, Sequence

from mmdsfi.config import settings
from mmdsfi.errors import CapacityExceeded, VerifyRejected
from mmdsfi.models.image import SipbImage
from mmdsfi.models.isa import Reg
from mmdsfi.models.runtime import (
    Counters,
    Fault,
    FaultKind,
    FdKind,
    FileEnd,
    Pipe,
    Region,
    RegionKind,
    RunReport,
    SipReport,
    SipState,
    SipStatus,
    SyscallRequest,
)
from mmdsfi.services.isa import MAGIC
from mmdsfi.services.loader import Loader, slot_base
from mmdsfi.services.machine import Machine, MachineObserver, s64, u64
from mmdsfi.services.memory import Memory

logger = logging.getLogger(__name__)

SYS_EXIT = 0
SYS_WRITE = 1
SYS_READ = 2
SYS_SPAWN = 3
SYS_YIELD = 4
SYS_PIPE = 5
SYS_GETPID = 6
SYS_WAIT = 7
SYS_CLOSE = 8

SYSCALL_NAMES = {
    SYS_EXIT: "exit",
    SYS_WRITE: "write",
    SYS_READ: "read",
    SYS_SPAWN: "spawn",
    SYS_YIELD: "yield",
    SYS_PIPE: "pipe",
    SYS_GETPID: "getpid",
    SYS_WAIT: "wait",
    SYS_CLOSE: "close",
}

ENOENT = 2
EBADF = 9
ECHILD = 10
ENOMEM = 12
EACCES = 13
ENOSYS = 38

STDIN_FD = 0
STDOUT_FD = 1
FIRST_PIPE_FD = 3


def canary_pattern(size: int) -> bytes:
    return bytes((i * 37 + 11) & 0xFF for i in range(size))


class _Blocked(Exception):
    """The syscall cannot complete yet; the SIP retries it when next scheduled."""


class _SanityFailure(Exception):
    pass


class LibOS:
    def __init__(
        self,
        images: Sequence[SipbImage],
        stdin: bytes = b"",
        seed: Optional[int] = None,
        reference: bool = False,
        confine_loads: bool = True,
        verify_images: Optional[bool] = None,
        trace: bool = False,
        observer: Optional[MachineObserver] = None,
        max_steps: Optional[int] = None,
    ):
        self.images = list(images)
        self.reference = reference
        self.memory = Memory()
        self.loader = Loader(
            self.memory,
            verify_images=not reference if verify_images is None else verify_images,
            confine_loads=confine_loads,
            rewrite_labels=not reference,
        )
        self.counters = Counters()
        self.trace: Optional[List[str]] = [] if trace else None
        self.machine = Machine(self.memory, reference=reference, counters=self.counters, trace=self.trace, observer=observer)
        self.rng = random.Random(seed) if seed is not None else None
        self.max_steps = settings.MAX_STEPS if max_steps is None else max_steps
        self.sips: Dict[int, SipState] = {}
        self.syscall_trace: List[str] = []
        self.stdin = Pipe(bytearray(stdin))
        self._last_pid = 0
        self.libos_region = self.memory.map(
            Region(
                slot_base(0) + settings.SLOT_LEADING_GAP,
                bytearray(canary_pattern(settings.LIBOS_REGION_SIZE)),
                RegionKind.LIBOS,
            )
        )

    # -- Processes --

    def spawn(self, image_index: int, parent: Optional[SipState] = None) -> SipState:
        pid = len(self.sips) + 1
        sip = self.loader.load(self.images[image_index], pid, image_index=image_index)
        sip.parent = parent.pid if parent is not None else None
        if parent is not None:
            sip.fds = dict(parent.fds)
        else:
            sip.fds = {STDIN_FD: FileEnd(FdKind.READ, self.stdin), STDOUT_FD: FileEnd(FdKind.STDOUT)}
        self.sips[pid] = sip
        return sip

    def _terminate(self, sip: SipState, status: SipStatus, exit_code: Optional[int] = None, fault: Optional[Fault] = None):
        sip.status = status
        sip.exit_code = exit_code
        sip.fault = fault
        sip.pending = None
        self.memory.unmap_domain(sip.domain.domain_id)
        if fault is not None:
            logger.info(f"pid {sip.pid} faulted: {fault}")
        else:
            logger.info(f"pid {sip.pid} {status.value.lower()} with code {exit_code}")

    def _writers_alive(self, pipe: Pipe) -> bool:
        return any(
            s.live and any(end.kind is FdKind.WRITE and end.pipe is pipe for end in s.fds.values())
            for s in self.sips.values()
        )

    # -- Syscalls --

    def _check_return_address(self, sip: SipState, addr: int):
        if self.reference:
            return
        expected = MAGIC + sip.domain.domain_id.to_bytes(4, "little")
        if not (sip.domain.in_c(addr) and addr + 8 <= sip.domain.trampoline):
            raise _SanityFailure(f"return address {addr:#x} is not in the caller's code")
        if self.memory.peek(addr, 8) != expected:
            raise _SanityFailure(f"return address {addr:#x} is not a cfi_label of domain {sip.domain.domain_id}")

    def _user_buffer(self, sip: SipState, ptr: int, length: int):
        if length > settings.MAX_IO_LEN:
            raise _SanityFailure(f"buffer length {length} exceeds {settings.MAX_IO_LEN}")
        if length and not sip.domain.in_d(ptr, length):
            raise _SanityFailure(f"buffer [{ptr:#x}, {ptr + length:#x}) is not inside the caller's D")

    def _d_bytes(self, sip: SipState, ptr: int, length: int) -> bytes:
        return self.memory.peek(ptr, length) or b""

    def _d_store(self, sip: SipState, ptr: int, data: bytes):
        region = self.memory.region_at(ptr, len(data))
        off = ptr - region.begin
        region.data[off:off + len(data)] = data

    def _fd(self, sip: SipState, fd: int, kind: FdKind) -> Optional[FileEnd]:
        end = sip.fds.get(fd)
        if end is None:
            return None
        if kind is FdKind.WRITE and end.kind in (FdKind.WRITE, FdKind.STDOUT):
            return end
        return end if end.kind is kind else None

    def _next_fd(self, sip: SipState, start: int) -> int:
        fd = start
        while fd in sip.fds:
            fd += 1
        return fd

    def syscall_dispatch(self, sip: SipState, req: SyscallRequest) -> bool:
        """Serve the request; False when the SIP blocked (it stays at the gate)."""
        regs = sip.regs
        number, a0, a1, a2 = regs[Reg.RAX], regs[Reg.RDI], regs[Reg.RSI], regs[Reg.RDX]
        name = SYSCALL_NAMES.get(number, f"sys{number}")
        try:
            self._check_return_address(sip, req.return_address)
            result, note = self._serve(sip, number, a0, a1, a2)
        except _Blocked:
            sip.status = SipStatus.BLOCKED
            sip.pending = req
            return False
        except _SanityFailure as e:
            self._terminate(sip, SipStatus.FAULTED, fault=Fault(FaultKind.SYSCALL_SANITY, req.pc, str(e)))
            self.syscall_trace.append(f"pid={sip.pid} {name} -> fault SyscallSanity")
            return True
        self.counters.syscalls += 1
        self.syscall_trace.append(f"pid={sip.pid} {name}{note} -> {result}")
        if sip.status in (SipStatus.RUNNING, SipStatus.BLOCKED):
            sip.status = SipStatus.RUNNING
            sip.pending = None
            regs[Reg.R10] = 0
            regs[Reg.R11] = 0
            regs[Reg.RAX] = u64(result)
            sip.pc = req.return_address
        return True

    def _serve(self, sip: SipState, number: int, a0: int, a1: int, a2: int):
        if number == SYS_EXIT:
            code = s64(a0)
            self._terminate(sip, SipStatus.EXITED, exit_code=code)
            return code, f"({code})"

        if number == SYS_WRITE:
            self._user_buffer(sip, a1, a2)
            end = self._fd(sip, a0, FdKind.WRITE)
            if end is None:
                return -EBADF, f"(fd={a0})"
            data = self._d_bytes(sip, a1, a2)
            if end.kind is FdKind.STDOUT:
                sip.stdout += data
            else:
                end.pipe.buffer += data
            return len(data), f"(fd={a0}, {data!r})"

        if number == SYS_READ:
            self._user_buffer(sip, a1, a2)
            end = self._fd(sip, a0, FdKind.READ)
            if end is None:
                return -EBADF, f"(fd={a0})"
            pipe = end.pipe
            if not pipe.buffer and a2 and self._writers_alive(pipe):
                raise _Blocked()
            data = bytes(pipe.buffer[:a2])
            del pipe.buffer[:len(data)]
            if data:
                self._d_store(sip, a1, data)
            return len(data), f"(fd={a0}, {data!r})"

        if number == SYS_SPAWN:
            if a0 >= len(self.images):
                return -ENOENT, f"({a0})"
            try:
                child = self.spawn(a0, parent=sip)
            except VerifyRejected as e:
                logger.warning(f"pid {sip.pid} tried to spawn a rejected image: {e}")
                return -EACCES, f"({a0})"
            except CapacityExceeded as e:
                logger.warning(f"pid {sip.pid} spawn failed: {e}")
                return -ENOMEM, f"({a0})"
            return child.pid, f"({a0})"

        if number == SYS_YIELD:
            return 0, "()"

        if number == SYS_PIPE:
            pipe = Pipe()
            rfd = self._next_fd(sip, FIRST_PIPE_FD)
            sip.fds[rfd] = FileEnd(FdKind.READ, pipe)
            wfd = self._next_fd(sip, FIRST_PIPE_FD)
            sip.fds[wfd] = FileEnd(FdKind.WRITE, pipe)
            return rfd | (wfd << 32), f"() = ({rfd}, {wfd})"

        if number == SYS_GETPID:
            return sip.pid, "()"

        if number == SYS_WAIT:
            child = self.sips.get(a0)
            if child is None or child.parent != sip.pid:
                return -ECHILD, f"({a0})"
            if child.live:
                raise _Blocked()
            code = child.exit_code if child.status is SipStatus.EXITED else -1
            return code, f"({a0})"

        if number == SYS_CLOSE:
            if sip.fds.pop(a0, None) is None:
                return -EBADF, f"({a0})"
            return 0, f"({a0})"

        return -ENOSYS, ""

    # -- Scheduling --

    def _live(self) -> List[SipState]:
        return [s for s in self.sips.values() if s.live]

    def _pick(self, live: List[SipState]) -> SipState:
        if self.rng is not None:
            return self.rng.choice(live)
        after = [s for s in live if s.pid > self._last_pid]
        return after[0] if after else live[0]

    def _run_slice(self, sip: SipState) -> bool:
        """Run `sip` until it traps; False when it made no progress (still blocked)."""
        self._last_pid = sip.pid
        if sip.status is SipStatus.BLOCKED:
            if not self.syscall_dispatch(sip, sip.pending):
                return False
            return True
        while sip.status is SipStatus.RUNNING:
            if self.counters.steps >= self.max_steps:
                return True
            outcome = self.machine.step(sip)
            if outcome is None:
                continue
            if isinstance(outcome, Fault):
                self._terminate(sip, SipStatus.FAULTED, fault=outcome)
            else:
                self.syscall_dispatch(sip, outcome)
            return True
        return True

    def run(self, entry_index: int = 0) -> RunReport:
        self.spawn(entry_index)
        exhausted = False
        while True:
            live = self._live()
            if not live:
                break
            if self.counters.steps >= self.max_steps:
                exhausted = True
                logger.warning(f"Step budget of {self.max_steps} exhausted; killing {len(live)} SIPs")
                for sip in live:
                    self._terminate(sip, SipStatus.KILLED)
                break
            if all(s.status is SipStatus.BLOCKED for s in live):
                if not any(self._run_slice(s) for s in live):
                    logger.warning(f"Deadlock: {len(live)} SIPs blocked forever; killing them")
                    for sip in live:
                        self._terminate(sip, SipStatus.KILLED)
                    break
                continue
            self._run_slice(self._pick(live))
        return self.report(exhausted)

    def libos_intact(self) -> bool:
        return bytes(self.libos_region.data) == canary_pattern(settings.LIBOS_REGION_SIZE)

    def report(self, exhausted: bool = False) -> RunReport:
        sips = []
        for sip in self.sips.values():
            sips.append(
                SipReport(
                    pid=sip.pid,
                    parent=sip.parent,
                    image_index=sip.image_index,
                    domain_id=sip.domain.domain_id,
                    status=sip.status.value,
                    exit_code=sip.exit_code,
                    stdout=sip.stdout.decode("latin-1"),
                    fault_kind=sip.fault.kind.value if sip.fault else None,
                    fault_pc=sip.fault.pc if sip.fault else None,
                    fault_detail=sip.fault.detail if sip.fault else None,
                )
            )
        return RunReport(
            sips=sips,
            counters=self.counters.model_copy(),
            syscall_trace=list(self.syscall_trace),
            trace=list(self.trace or []),
            libos_intact=self.libos_intact(),
            budget_exhausted=exhausted,
        )


def run(
    images: Sequence[SipbImage],
    entry_index: int = 0,
    seed: Optional[int] = None,
    stdin: bytes = b"",
    **options,
) -> RunReport:
    """Load `images[entry_index]` as pid 1 and run every SIP to completion."""
    libos = LibOS(images, stdin=stdin, seed=seed, **options)
    report = libos.run(entry_index)
    logger.info(
        f"Run finished: {len(report.sips)} SIPs, {report.counters.steps} steps, "
        f"{report.counters.mem_guards} mem_guards, {report.counters.syscalls} syscalls"
    )
    return report
