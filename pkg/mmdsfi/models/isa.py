from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from typing import Optional, Tuple, Union


class Reg(IntEnum):
    RAX = 0
    RCX = 1
    RDX = 2
    RBX = 3
    RSP = 4
    RBP = 5
    RSI = 6
    RDI = 7
    R8 = 8
    R9 = 9
    R10 = 10
    R11 = 11
    R12 = 12
    R13 = 13
    R14 = 14
    R15 = 15

    def __str__(self) -> str:
        return self.name.lower()


class InstrClass(Enum):
    ALU = "Alu"
    MOV_REG_IMM = "MovRegImm"
    MOV_REG_REG = "MovRegReg"
    LEA = "Lea"
    LOAD = "Load"
    STORE = "Store"
    PUSH = "Push"
    POP = "Pop"
    DIRECT_JUMP = "DirectJump"
    COND_JUMP = "CondJump"
    DIRECT_CALL = "DirectCall"
    INDIRECT_JUMP_REG = "IndirectJumpReg"
    INDIRECT_CALL_REG = "IndirectCallReg"
    INDIRECT_JUMP_MEM = "IndirectJumpMem"
    INDIRECT_CALL_MEM = "IndirectCallMem"
    RETURN = "Return"
    BND_CHECK_LOWER = "BndCheckLower"
    BND_CHECK_UPPER = "BndCheckUpper"
    CFI_LABEL = "CfiLabel"
    NOP = "Nop"
    SYSCALL_GATE = "SyscallGate"
    DANGEROUS = "Dangerous"
    VECTOR_GATHER = "VectorGather"


class DangerKind(Enum):
    SGX_LEAF = "SgxLeaf"
    MPX_MUTATION = "MpxMutation"
    XSTATE_RESTORE = "XStateRestore"
    SEG_BASE_WRITE = "SegBaseWrite"


class MemForm(Enum):
    BASE_DISP = "BaseDisp"
    BASE_INDEX_DISP = "BaseIndexDisp"
    RIP_RELATIVE = "RipRelative"
    DIRECT_OFFSET = "DirectOffset"
    VSIB = "Vsib"


@dataclass(frozen=True)
class MemOperand:
    form: MemForm
    base: Optional[Reg] = None
    index: Optional[int] = None  # a Reg, or the vector register number for VSIB
    scale: int = 1
    disp: int = 0
    # encoding width of the displacement in bytes (0, 1, 4; 8 for moffs); None = shortest
    disp_size: Optional[int] = field(default=None, compare=False)

    @classmethod
    def at(cls, base: Reg, disp: int = 0, index: Optional[Reg] = None, scale: int = 1) -> "MemOperand":
        form = MemForm.BASE_INDEX_DISP if index is not None else MemForm.BASE_DISP
        return cls(form=form, base=base, index=index, scale=scale, disp=disp)

    @property
    def is_base_disp(self) -> bool:
        return self.form is MemForm.BASE_DISP

    def shifted(self, delta: int) -> "MemOperand":
        return replace(self, disp=self.disp + delta, disp_size=None)

    def __str__(self) -> str:
        if self.form is MemForm.RIP_RELATIVE:
            return f"[rip{_signed(self.disp)}]"
        if self.form is MemForm.DIRECT_OFFSET:
            return f"[{self.disp:#x}]"
        parts = []
        if self.base is not None:
            parts.append(str(self.base))
        if self.index is not None:
            index = f"xmm{self.index}" if self.form is MemForm.VSIB else str(Reg(self.index))
            parts.append(f"{index}*{self.scale}")
        text = "+".join(parts)
        if self.disp or not text:
            text = f"{text}{_signed(self.disp)}" if text else f"{self.disp:#x}"
        return f"[{text}]"


def _signed(value: int) -> str:
    return f"+{value:#x}" if value >= 0 else f"-{-value:#x}"


@dataclass(frozen=True)
class Imm:
    value: int

    def __str__(self) -> str:
        return f"{self.value:#x}" if self.value >= 0 else f"-{-self.value:#x}"


@dataclass(frozen=True)
class Bnd:
    index: int

    def __str__(self) -> str:
        return f"bnd{self.index}"


@dataclass(frozen=True)
class Rel:
    target: int  # absolute code offset
    width: int = field(default=4, compare=False)

    def __str__(self) -> str:
        return f"{self.target:#x}"


@dataclass(frozen=True)
class RawBytes:
    """Opaque encoding kept for forms that are recognized but not fully decoded."""
    data: bytes

    def __str__(self) -> str:
        return self.data.hex(" ")


Operand = Union[Reg, Imm, MemOperand, Bnd, Rel, RawBytes]


@dataclass(frozen=True)
class Instruction:
    address: int
    raw: bytes
    klass: InstrClass
    mnemonic: str
    operands: Tuple[Operand, ...] = ()
    domain_id: Optional[int] = None  # CfiLabel only
    danger: Optional[DangerKind] = None  # Dangerous only

    @property
    def length(self) -> int:
        return len(self.raw)

    @property
    def end(self) -> int:
        return self.address + len(self.raw)

    @property
    def mem(self) -> Optional[MemOperand]:
        for op in self.operands:
            if isinstance(op, MemOperand):
                return op
        return None

    @property
    def rel_target(self) -> Optional[int]:
        for op in self.operands:
            if isinstance(op, Rel):
                return op.target
        return None

    def same_form(self, other: "Instruction") -> bool:
        return (
            self.klass is other.klass
            and self.mnemonic == other.mnemonic
            and self.operands == other.operands
            and self.domain_id == other.domain_id
            and self.danger == other.danger
        )

    def at(self, address: int) -> "Instruction":
        return replace(self, address=address)


class PseudoKind(Enum):
    MEM_GUARD = "MemGuard"
    CFI_GUARD = "CfiGuard"
    CFI_LABEL = "CfiLabel"


@dataclass(frozen=True)
class PseudoInstr:
    kind: PseudoKind
    instrs: Tuple[Instruction, ...]
    guarded_operand: Optional[MemOperand] = None
    target_reg: Optional[Reg] = None
    scratch_reg: Optional[Reg] = None
    id_field_offset: Optional[int] = None

    @property
    def address(self) -> int:
        return self.instrs[0].address

    @property
    def end(self) -> int:
        return self.instrs[-1].end

    @property
    def lower(self) -> Instruction:
        return self.instrs[0] if self.kind is PseudoKind.MEM_GUARD else self.instrs[1]

    @property
    def upper(self) -> Instruction:
        return self.instrs[1] if self.kind is PseudoKind.MEM_GUARD else self.instrs[2]

    @property
    def load(self) -> Optional[Instruction]:
        return self.instrs[0] if self.kind is PseudoKind.CFI_GUARD else None
