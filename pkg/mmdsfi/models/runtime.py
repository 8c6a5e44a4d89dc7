from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional

from pydantic import BaseModel, Field

from mmdsfi.config.settings import GUARD_SIZE
from mmdsfi.models.isa import Instruction
from mmdsfi.services.isa import TRAMPOLINE_SIZE

MASK64 = (1 << 64) - 1


class RegionKind(Enum):
    CODE = "C"
    DATA = "D"
    LIBOS = "LibOS"


@dataclass(eq=False)
class Region:
    """A mapped range of the simulated address space. Everything else is unmapped."""
    begin: int
    data: bytearray
    kind: RegionKind
    domain_id: int = 0
    decoded: Dict[int, Instruction] = field(default_factory=dict, repr=False)

    @property
    def end(self) -> int:
        return self.begin + len(self.data)

    def contains(self, addr: int, size: int = 1) -> bool:
        return self.begin <= addr and addr + size <= self.end


@dataclass(frozen=True)
class DomainLayout:
    domain_id: int
    c_begin: int
    c_end: int  # includes the trampoline
    d_capacity: int

    @property
    def d_begin(self) -> int:
        return self.c_end + GUARD_SIZE

    @property
    def d_end(self) -> int:
        return self.d_begin + self.d_capacity

    @property
    def g1(self):
        return self.c_end, self.c_end + GUARD_SIZE

    @property
    def g2(self):
        return self.d_end, self.d_end + GUARD_SIZE

    @property
    def trampoline(self) -> int:
        return self.c_end - TRAMPOLINE_SIZE

    def in_c(self, addr: int) -> bool:
        return self.c_begin <= addr < self.c_end

    def in_d(self, addr: int, size: int = 1) -> bool:
        return self.d_begin <= addr and addr + size <= self.d_end


class FaultKind(Enum):
    BOUND_LOWER = "BoundLower"
    BOUND_UPPER = "BoundUpper"
    UNMAPPED_ACCESS = "UnmappedAccess"
    PERMISSION_DENIED = "PermissionDenied"
    NON_EXECUTABLE_FETCH = "NonExecutableFetch"
    DANGEROUS_INSTR = "DangerousInstr"
    SYSCALL_SANITY = "SyscallSanity"
    INVALID_OPCODE = "InvalidOpcode"


@dataclass(frozen=True)
class Fault:
    kind: FaultKind
    pc: int
    detail: str = ""

    def __str__(self) -> str:
        return f"{self.kind.value} at {self.pc:#x}: {self.detail}"


@dataclass(frozen=True)
class SyscallRequest:
    pc: int  # address of the gate
    return_address: int


@dataclass
class Bound:
    lb: int = 0
    ub: int = MASK64  # INIT state: checks never fault


@dataclass
class Flags:
    zf: bool = False
    sf: bool = False
    of: bool = False


class SipStatus(Enum):
    RUNNING = "Running"
    BLOCKED = "Blocked"
    EXITED = "Exited"
    FAULTED = "Faulted"
    KILLED = "Killed"


@dataclass(eq=False)
class Pipe:
    buffer: bytearray = field(default_factory=bytearray)


class FdKind(Enum):
    STDOUT = "stdout"
    READ = "read"
    WRITE = "write"


@dataclass(frozen=True)
class FileEnd:
    kind: FdKind
    pipe: Optional[Pipe] = None


@dataclass(eq=False)
class SipState:
    pid: int
    domain: DomainLayout
    image_index: int = 0
    parent: Optional[int] = None
    regs: List[int] = field(default_factory=lambda: [0] * 16)
    pc: int = 0
    bnd: List[Bound] = field(default_factory=lambda: [Bound() for _ in range(4)])
    flags: Flags = field(default_factory=Flags)
    status: SipStatus = SipStatus.RUNNING
    exit_code: Optional[int] = None
    fault: Optional[Fault] = None
    fds: Dict[int, FileEnd] = field(default_factory=dict)
    pending: Optional[SyscallRequest] = None  # the blocked syscall, retried when scheduled
    stdout: bytearray = field(default_factory=bytearray)

    @property
    def live(self) -> bool:
        return self.status in (SipStatus.RUNNING, SipStatus.BLOCKED)


# JSON-facing reports

class Counters(BaseModel):
    steps: int = 0
    mem_guards: int = 0  # executed bndcl bnd0
    cfi_guards: int = 0  # executed bndcl bnd1
    syscalls: int = 0


class SipReport(BaseModel):
    pid: int
    parent: Optional[int] = None
    image_index: int
    domain_id: int
    status: str
    exit_code: Optional[int] = None
    stdout: str = ""  # latin-1 decoded
    fault_kind: Optional[str] = None
    fault_pc: Optional[int] = None
    fault_detail: Optional[str] = None


class RunReport(BaseModel):
    sips: List[SipReport] = Field(default_factory=list)
    counters: Counters = Field(default_factory=Counters)
    syscall_trace: List[str] = Field(default_factory=list)
    trace: List[str] = Field(default_factory=list)
    libos_intact: bool = True
    budget_exhausted: bool = False

    def sip(self, pid: int) -> Optional[SipReport]:
        return next((s for s in self.sips if s.pid == pid), None)

    def faults(self) -> List[SipReport]:
        return [s for s in self.sips if s.fault_kind is not None]


class MonitorAssertion(BaseModel):
    kind: str  # FETCH_OUTSIDE_C, ACCESS_OUTSIDE_D, INDIRECT_NOT_LABEL, FETCH_NOT_IN_R, FACT_UNSOUND, LIBOS_CORRUPTED
    pid: int
    pc: int
    detail: str = ""
    registers: Dict[str, str] = Field(default_factory=dict)


class MonitorReport(BaseModel):
    runs: int = 0
    assertions: List[MonitorAssertion] = Field(default_factory=list)
    report: Optional[RunReport] = None  # the first run

    @property
    def clean(self) -> bool:
        return not self.assertions
