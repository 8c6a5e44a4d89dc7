"""
Decoder/encoder for the supported x86-64 subset.

Every accepted byte string is the canonical encoding of its instruction: after decoding,
the instruction is re-encoded and compared with the input, so decode and encode are
exact inverses on everything the subset admits.
"""
import logging
import struct
from dataclasses import replace
from typing import List, Optional, Sequence, Set, Tuple, Union

from mmdsfi.errors import TruncatedInstruction, UnencodableForm, UnknownOpcode
from mmdsfi.models.isa import (
    Bnd,
    DangerKind,
    Imm,
    InstrClass,
    Instruction,
    MemForm,
    MemOperand,
    Operand,
    PseudoInstr,
    PseudoKind,
    RawBytes,
    Reg,
    Rel,
)

logger = logging.getLogger(__name__)

MAGIC = bytes([0x0F, 0x1F, 0x84, 0x24])
CFI_LABEL_SIZE = 8
TRAMPOLINE_SIZE = CFI_LABEL_SIZE + 2  # cfi_label + syscall gate
MAX_INSTR_LEN = 15

ALU_RR = {"add": 0x01, "sub": 0x29, "and": 0x21, "or": 0x09, "xor": 0x31, "cmp": 0x39}
ALU_RR_BY_OPCODE = {v: k for k, v in ALU_RR.items()}
ALU_IMM = {"add": 0, "sub": 5}
ALU_IMM_BY_DIGIT = {v: k for k, v in ALU_IMM.items()}
JCC = {"je": 0x84, "jne": 0x85, "jl": 0x8C, "jge": 0x8D}
JCC_BY_OPCODE = {v: k for k, v in JCC.items()}

DANGER_BY_MNEMONIC = {
    "enclu": DangerKind.SGX_LEAF,
    "xrstor": DangerKind.XSTATE_RESTORE,
    "wrfsbase": DangerKind.SEG_BASE_WRITE,
    "wrgsbase": DangerKind.SEG_BASE_WRITE,
    "bndmk": DangerKind.MPX_MUTATION,
    "bndmov": DangerKind.MPX_MUTATION,
}

UNCONDITIONAL = {
    InstrClass.DIRECT_JUMP,
    InstrClass.INDIRECT_JUMP_REG,
    InstrClass.INDIRECT_JUMP_MEM,
    InstrClass.RETURN,
}
DIRECT_TRANSFERS = {InstrClass.DIRECT_JUMP, InstrClass.COND_JUMP, InstrClass.DIRECT_CALL}
REGISTER_INDIRECT = {InstrClass.INDIRECT_JUMP_REG, InstrClass.INDIRECT_CALL_REG}
MEMORY_INDIRECT = {InstrClass.INDIRECT_JUMP_MEM, InstrClass.INDIRECT_CALL_MEM}
CALLS = {InstrClass.DIRECT_CALL, InstrClass.INDIRECT_CALL_REG, InstrClass.INDIRECT_CALL_MEM}


def _fits(value: int, bits: int) -> bool:
    return -(1 << (bits - 1)) <= value < (1 << (bits - 1))


# ---------------------------------------------------------------------------
#  Encoding
# ---------------------------------------------------------------------------

def _encode_rm(reg_field: int, rm: Union[Reg, MemOperand]) -> Tuple[int, bytes]:
    """Returns (REX.RXB bits, ModRM [+ SIB] [+ disp]) for a reg field and an r/m operand."""
    rex = (reg_field >> 3) << 2
    reg3 = reg_field & 7
    if isinstance(rm, Reg):
        return rex | (rm >> 3), bytes([0xC0 | reg3 << 3 | (rm & 7)])
    if rm.form is MemForm.RIP_RELATIVE:
        return rex, bytes([reg3 << 3 | 5]) + struct.pack("<i", rm.disp)
    if rm.form is MemForm.DIRECT_OFFSET:
        if not _fits(rm.disp, 32):
            raise UnencodableForm(f"absolute displacement {rm.disp:#x} needs the moffs form")
        return rex, bytes([reg3 << 3 | 4, 0x25]) + struct.pack("<i", rm.disp)
    if rm.form not in (MemForm.BASE_DISP, MemForm.BASE_INDEX_DISP) or rm.base is None:
        raise UnencodableForm(f"memory operand {rm} is not encodable")
    base = rm.base
    size = rm.disp_size
    if size is None:
        if rm.disp == 0 and (base & 7) != 5:
            size = 0
        elif _fits(rm.disp, 8):
            size = 1
        else:
            size = 4
    if size == 0 and (rm.disp != 0 or (base & 7) == 5):
        raise UnencodableForm(f"{rm} cannot omit its displacement")
    if size == 1 and not _fits(rm.disp, 8) or size == 4 and not _fits(rm.disp, 32) or size not in (0, 1, 4):
        raise UnencodableForm(f"displacement of {rm} does not fit {size} bytes")
    mod = {0: 0, 1: 1, 4: 2}[size]
    disp = b"" if size == 0 else struct.pack("<b" if size == 1 else "<i", rm.disp)
    rex |= base >> 3
    if rm.index is not None:
        if rm.index == Reg.RSP:
            raise UnencodableForm("rsp cannot be an index register")
        if rm.scale not in (1, 2, 4, 8):
            raise UnencodableForm(f"bad scale {rm.scale}")
        ss = {1: 0, 2: 1, 4: 2, 8: 3}[rm.scale]
        rex |= (rm.index >> 3) << 1
        return rex, bytes([mod << 6 | reg3 << 3 | 4, ss << 6 | (rm.index & 7) << 3 | (base & 7)]) + disp
    if (base & 7) == 4:
        return rex, bytes([mod << 6 | reg3 << 3 | 4, 0x24]) + disp
    return rex, bytes([mod << 6 | reg3 << 3 | (base & 7)]) + disp


def _rex(w: bool, rxb: int) -> bytes:
    if w:
        return bytes([0x48 | rxb])
    return bytes([0x40 | rxb]) if rxb else b""


def _rm_form(opcode: bytes, reg_field: int, rm: Union[Reg, MemOperand], w: bool, prefix: bytes = b"") -> bytes:
    rxb, tail = _encode_rm(reg_field, rm)
    return prefix + _rex(w, rxb) + opcode + tail


def _rel(instr: Instruction, opcode: bytes, width: int) -> bytes:
    target = instr.rel_target
    end = instr.address + len(opcode) + width
    disp = target - end
    if not _fits(disp, width * 8):
        raise UnencodableForm(f"branch displacement {disp} does not fit rel{width * 8}")
    return opcode + struct.pack("<b" if width == 1 else "<i", disp)


def encode(instr: Instruction) -> bytes:
    """Bytes for `instr`; relative targets are resolved against `instr.address`."""
    k = instr.klass
    ops = instr.operands
    m = instr.mnemonic
    if k is InstrClass.NOP:
        if not ops:
            return b"\x90"
        return _rm_form(b"\x0f\x1f", 0, ops[0], w=False)
    if k is InstrClass.CFI_LABEL:
        return MAGIC + struct.pack("<I", (instr.domain_id or 0) & 0xFFFFFFFF)
    if k is InstrClass.MOV_REG_IMM:
        reg, imm = ops
        return bytes([0x48 | (reg >> 3), 0xB8 + (reg & 7)]) + struct.pack("<Q", imm.value & (2**64 - 1))
    if k is InstrClass.MOV_REG_REG:
        dst, src = ops
        return _rm_form(b"\x89", src, dst, w=True)
    if k in (InstrClass.LOAD, InstrClass.STORE):
        reg, mem = (ops[0], ops[1]) if k is InstrClass.LOAD else (ops[1], ops[0])
        if mem.form is MemForm.DIRECT_OFFSET and mem.disp_size == 8:
            if reg != Reg.RAX:
                raise UnencodableForm("moffs forms only move rax")
            return b"\x48" + (b"\xa1" if k is InstrClass.LOAD else b"\xa3") + struct.pack("<Q", mem.disp & (2**64 - 1))
        return _rm_form(b"\x8b" if k is InstrClass.LOAD else b"\x89", reg, mem, w=True)
    if k is InstrClass.LEA:
        dst, mem = ops
        return _rm_form(b"\x8d", dst, mem, w=True)
    if k is InstrClass.ALU:
        dst, src = ops
        if isinstance(src, Imm):
            if m not in ALU_IMM:
                raise UnencodableForm(f"{m} has no immediate form")
            if not _fits(src.value, 32):
                raise UnencodableForm(f"immediate {src.value} does not fit imm32")
            return _rm_form(b"\x81", ALU_IMM[m], dst, w=True) + struct.pack("<i", src.value)
        return _rm_form(bytes([ALU_RR[m]]), src, dst, w=True)
    if k in (InstrClass.PUSH, InstrClass.POP):
        reg = ops[0]
        return _rex(False, reg >> 3) + bytes([(0x50 if k is InstrClass.PUSH else 0x58) + (reg & 7)])
    if k is InstrClass.DIRECT_JUMP:
        width = ops[0].width
        return _rel(instr, b"\xeb" if width == 1 else b"\xe9", width)
    if k is InstrClass.COND_JUMP:
        return _rel(instr, bytes([0x0F, JCC[m]]), 4)
    if k is InstrClass.DIRECT_CALL:
        return _rel(instr, b"\xe8", 4)
    if k in (InstrClass.INDIRECT_JUMP_REG, InstrClass.INDIRECT_JUMP_MEM):
        return _rm_form(b"\xff", 4, ops[0], w=False)
    if k in (InstrClass.INDIRECT_CALL_REG, InstrClass.INDIRECT_CALL_MEM):
        return _rm_form(b"\xff", 2, ops[0], w=False)
    if k is InstrClass.RETURN:
        return b"\xc3"
    if k in (InstrClass.BND_CHECK_LOWER, InstrClass.BND_CHECK_UPPER):
        bnd, rm = ops
        prefix = b"\xf3" if k is InstrClass.BND_CHECK_LOWER else b"\xf2"
        return _rm_form(b"\x0f\x1a", bnd.index, rm, w=False, prefix=prefix)
    if k is InstrClass.SYSCALL_GATE:
        return b"\x0f\x05"
    if k is InstrClass.VECTOR_GATHER:
        return next(op.data for op in ops if isinstance(op, RawBytes))
    if k is InstrClass.DANGEROUS:
        if m == "enclu":
            return b"\x0f\x01\xd7"
        if m == "xrstor":
            return _rm_form(b"\x0f\xae", 5, ops[0], w=False)
        if m in ("wrfsbase", "wrgsbase"):
            return _rm_form(b"\x0f\xae", 2 if m == "wrfsbase" else 3, ops[0], w=True, prefix=b"\xf3")
        if m == "bndmk":
            return _rm_form(b"\x0f\x1b", ops[0].index, ops[1], w=False, prefix=b"\xf3")
        if m == "bndmov":
            src = ops[1]
            rm = Reg(src.index) if isinstance(src, Bnd) else src
            return _rm_form(b"\x0f\x1a", ops[0].index, rm, w=False, prefix=b"\x66")
    raise UnencodableForm(f"no encoding for {m} ({k.value})")


# ---------------------------------------------------------------------------
#  Decoding
# ---------------------------------------------------------------------------

class _Cursor:
    def __init__(self, code: bytes, offset: int):
        self.code = code
        self.start = offset
        self.pos = offset

    def byte(self) -> int:
        if self.pos >= len(self.code):
            raise TruncatedInstruction(self.start, "instruction runs past the end of the code")
        if self.pos - self.start >= MAX_INSTR_LEN:
            raise UnknownOpcode(self.start, "instruction longer than 15 bytes")
        value = self.code[self.pos]
        self.pos += 1
        return value

    def peek(self) -> Optional[int]:
        return self.code[self.pos] if self.pos < len(self.code) else None

    def take(self, n: int) -> bytes:
        return bytes(self.byte() for _ in range(n))

    def signed(self, n: int) -> int:
        return int.from_bytes(self.take(n), "little", signed=True)


def _decode_rm(cur: _Cursor, rex: int, vsib: bool = False) -> Tuple[int, int, Union[Reg, MemOperand]]:
    """Returns (mod, reg field with REX.R, r/m operand)."""
    modrm = cur.byte()
    mod, reg, rm = modrm >> 6, (modrm >> 3) & 7, modrm & 7
    reg |= ((rex >> 2) & 1) << 3
    x_bit = (rex >> 1) & 1
    b_bit = rex & 1
    if mod == 3:
        return mod, reg, Reg(rm | b_bit << 3)
    base: Optional[int]
    index: Optional[int] = None
    scale = 1
    if rm == 4:
        sib = cur.byte()
        ss, idx, sbase = sib >> 6, (sib >> 3) & 7, sib & 7
        scale = 1 << ss
        idx |= x_bit << 3
        if idx != 4 or vsib:
            index = idx
        if sbase == 5 and mod == 0:
            disp = cur.signed(4)
            if vsib:
                return mod, reg, MemOperand(MemForm.VSIB, None, index, scale, disp, disp_size=4)
            if index is not None:
                raise UnknownOpcode(cur.start, "scaled index without a base is outside the subset")
            return mod, reg, MemOperand(MemForm.DIRECT_OFFSET, disp=disp, scale=scale, disp_size=4)
        base = sbase | b_bit << 3
    elif rm == 5 and mod == 0:
        if vsib:
            raise UnknownOpcode(cur.start, "vector SIB requires a SIB byte")
        return mod, reg, MemOperand(MemForm.RIP_RELATIVE, disp=cur.signed(4), disp_size=4)
    else:
        if vsib:
            raise UnknownOpcode(cur.start, "vector SIB requires a SIB byte")
        base = rm | b_bit << 3
    size = {0: 0, 1: 1, 2: 4}[mod]
    disp = cur.signed(size) if size else 0
    if vsib:
        form = MemForm.VSIB
    else:
        form = MemForm.BASE_INDEX_DISP if index is not None else MemForm.BASE_DISP
    return mod, reg, MemOperand(
        form, Reg(base), Reg(index) if index is not None and not vsib else index, scale, disp, disp_size=size
    )


def _instr(cur: _Cursor, klass: InstrClass, mnemonic: str, operands: Sequence[Operand] = (), **extra) -> Instruction:
    return Instruction(
        address=cur.start,
        raw=bytes(cur.code[cur.start:cur.pos]),
        klass=klass,
        mnemonic=mnemonic,
        operands=tuple(operands),
        **extra,
    )


def _unknown(cur: _Cursor, what: str = "") -> UnknownOpcode:
    raw = bytes(cur.code[cur.start:cur.pos]).hex(" ")
    return UnknownOpcode(cur.start, f"bytes {raw} match no subset form{': ' + what if what else ''}")


def _decode_vex(cur: _Cursor, lead: int) -> Instruction:
    if lead == 0xC4:
        p1 = cur.byte()
        cur.byte()
        rex = (((p1 >> 7) & 1) ^ 1) << 2 | (((p1 >> 6) & 1) ^ 1) << 1 | (((p1 >> 5) & 1) ^ 1)
    else:
        p1 = cur.byte()
        rex = (((p1 >> 7) & 1) ^ 1) << 2
    cur.byte()  # opcode
    peek = cur.peek()
    if peek is None:
        raise TruncatedInstruction(cur.start, "instruction runs past the end of the code")
    if peek >> 6 == 3 or peek & 7 != 4:
        raise _unknown(cur, "VEX form without a vector SIB operand")
    _, _, mem = _decode_rm(cur, rex, vsib=True)
    raw = bytes(cur.code[cur.start:cur.pos])
    return _instr(cur, InstrClass.VECTOR_GATHER, "vgather", (mem, RawBytes(raw)))


def _decode_0f(cur: _Cursor, prefix: Optional[int], rex: int) -> Instruction:
    op = cur.byte()
    w = bool(rex & 8)
    if prefix is None:
        if op in JCC_BY_OPCODE:
            disp = cur.signed(4)
            return _instr(cur, InstrClass.COND_JUMP, JCC_BY_OPCODE[op], (Rel(cur.pos + disp),))
        if op == 0x05:
            return _instr(cur, InstrClass.SYSCALL_GATE, "syscall")
        if op == 0x01:
            if cur.byte() == 0xD7:
                return _instr(cur, InstrClass.DANGEROUS, "enclu", danger=DangerKind.SGX_LEAF)
            raise _unknown(cur)
        if op == 0x1F:
            if rex == 0 and cur.peek() == 0x84 and cur.pos + 1 < len(cur.code) and cur.code[cur.pos + 1] == 0x24:
                cur.take(2)
                domain_id = struct.unpack("<I", cur.take(4))[0]
                return _instr(cur, InstrClass.CFI_LABEL, "cfi_label", domain_id=domain_id)
            mod, reg, rm = _decode_rm(cur, rex)
            if reg != 0:
                raise _unknown(cur, "0F 1F requires /0")
            return _instr(cur, InstrClass.NOP, "nop", (rm,))
        if op == 0xAE:
            mod, reg, rm = _decode_rm(cur, rex)
            if reg == 5 and mod != 3:
                return _instr(cur, InstrClass.DANGEROUS, "xrstor", (rm,), danger=DangerKind.XSTATE_RESTORE)
        raise _unknown(cur)
    if prefix in (0xF3, 0xF2) and op == 0x1A:
        mod, reg, rm = _decode_rm(cur, rex)
        if reg > 3:
            raise _unknown(cur, "bound register out of range")
        if prefix == 0xF3:
            return _instr(cur, InstrClass.BND_CHECK_LOWER, "bndcl", (Bnd(reg), rm))
        return _instr(cur, InstrClass.BND_CHECK_UPPER, "bndcu", (Bnd(reg), rm))
    if prefix == 0xF3 and op == 0xAE:
        mod, reg, rm = _decode_rm(cur, rex)
        if mod == 3 and reg & 7 in (2, 3) and w:
            name = "wrfsbase" if reg & 7 == 2 else "wrgsbase"
            return _instr(cur, InstrClass.DANGEROUS, name, (rm,), danger=DangerKind.SEG_BASE_WRITE)
        raise _unknown(cur)
    if prefix == 0xF3 and op == 0x1B:
        mod, reg, rm = _decode_rm(cur, rex)
        if mod != 3 and reg <= 3:
            return _instr(cur, InstrClass.DANGEROUS, "bndmk", (Bnd(reg), rm), danger=DangerKind.MPX_MUTATION)
        raise _unknown(cur)
    if prefix == 0x66 and op == 0x1A:
        mod, reg, rm = _decode_rm(cur, rex)
        if reg <= 3:
            src = Bnd(int(rm)) if isinstance(rm, Reg) else rm
            if isinstance(src, Bnd) and src.index > 3:
                raise _unknown(cur, "bound register out of range")
            return _instr(cur, InstrClass.DANGEROUS, "bndmov", (Bnd(reg), src), danger=DangerKind.MPX_MUTATION)
        raise _unknown(cur)
    raise _unknown(cur)


def _decode_raw(code: bytes, offset: int) -> Instruction:
    cur = _Cursor(code, offset)
    lead = cur.byte()
    prefix: Optional[int] = None
    if lead in (0xC4, 0xC5):
        return _decode_vex(cur, lead)
    if lead in (0x66, 0xF2, 0xF3):
        prefix = lead
        lead = cur.byte()
    rex = 0
    if 0x40 <= lead <= 0x4F:
        rex = lead
        lead = cur.byte()
    if lead == 0x0F:
        return _decode_0f(cur, prefix, rex)
    if prefix is not None:
        raise _unknown(cur, "legacy prefix on a non-0F opcode")
    op = lead
    if op == 0x90:
        return _instr(cur, InstrClass.NOP, "nop")
    if 0xB8 <= op <= 0xBF:
        if not rex & 8:
            raise _unknown(cur, "mov imm32 form is outside the subset")
        reg = Reg((op - 0xB8) | (rex & 1) << 3)
        return _instr(cur, InstrClass.MOV_REG_IMM, "mov", (reg, Imm(cur.signed(8))))
    if op in (0x89, 0x8B, 0x8D):
        mod, reg, rm = _decode_rm(cur, rex)
        if op == 0x89:
            if mod == 3:
                return _instr(cur, InstrClass.MOV_REG_REG, "mov", (rm, Reg(reg)))
            return _instr(cur, InstrClass.STORE, "mov", (rm, Reg(reg)))
        if mod == 3:
            raise _unknown(cur, "register form of 8B/8D is outside the subset")
        if op == 0x8B:
            return _instr(cur, InstrClass.LOAD, "mov", (Reg(reg), rm))
        return _instr(cur, InstrClass.LEA, "lea", (Reg(reg), rm))
    if op in (0xA1, 0xA3):
        mem = MemOperand(MemForm.DIRECT_OFFSET, disp=int.from_bytes(cur.take(8), "little"), disp_size=8)
        if op == 0xA1:
            return _instr(cur, InstrClass.LOAD, "mov", (Reg.RAX, mem))
        return _instr(cur, InstrClass.STORE, "mov", (mem, Reg.RAX))
    if op == 0x81:
        mod, reg, rm = _decode_rm(cur, rex)
        if mod == 3 and reg & 7 in ALU_IMM_BY_DIGIT:
            return _instr(cur, InstrClass.ALU, ALU_IMM_BY_DIGIT[reg & 7], (rm, Imm(cur.signed(4))))
        raise _unknown(cur)
    if op in ALU_RR_BY_OPCODE:
        mod, reg, rm = _decode_rm(cur, rex)
        if mod == 3:
            return _instr(cur, InstrClass.ALU, ALU_RR_BY_OPCODE[op], (rm, Reg(reg)))
        raise _unknown(cur, "memory ALU forms are outside the subset")
    if 0x50 <= op <= 0x5F:
        reg = Reg((op & 7) | (rex & 1) << 3)
        klass = InstrClass.PUSH if op < 0x58 else InstrClass.POP
        return _instr(cur, klass, klass.value.lower(), (reg,))
    if op == 0xEB:
        disp = cur.signed(1)
        return _instr(cur, InstrClass.DIRECT_JUMP, "jmp", (Rel(cur.pos + disp, width=1),))
    if op == 0xE9:
        disp = cur.signed(4)
        return _instr(cur, InstrClass.DIRECT_JUMP, "jmp", (Rel(cur.pos + disp),))
    if op == 0xE8:
        disp = cur.signed(4)
        return _instr(cur, InstrClass.DIRECT_CALL, "call", (Rel(cur.pos + disp),))
    if op == 0xC3:
        return _instr(cur, InstrClass.RETURN, "ret")
    if op == 0xFF:
        mod, reg, rm = _decode_rm(cur, rex)
        if reg & 7 == 4:
            klass = InstrClass.INDIRECT_JUMP_REG if mod == 3 else InstrClass.INDIRECT_JUMP_MEM
            return _instr(cur, klass, "jmp", (rm,))
        if reg & 7 == 2:
            klass = InstrClass.INDIRECT_CALL_REG if mod == 3 else InstrClass.INDIRECT_CALL_MEM
            return _instr(cur, klass, "call", (rm,))
        raise _unknown(cur)
    raise _unknown(cur)


def decode(code: bytes, offset: int) -> Instruction:
    """Decode the instruction starting at `offset`; its address is `offset`."""
    if not 0 <= offset < len(code):
        raise TruncatedInstruction(offset, "offset outside the code")
    instr = _decode_raw(code, offset)
    try:
        canonical = encode(instr)
    except UnencodableForm as e:
        raise UnknownOpcode(offset, f"non-canonical encoding ({e})")
    if canonical != instr.raw:
        raise UnknownOpcode(offset, f"non-canonical encoding of {instr.mnemonic}")
    return instr


def linear_sweep(code: bytes) -> List[Union[Instruction, Tuple[int, str]]]:
    """Decode front to back ignoring control flow; undecodable bytes are reported and skipped."""
    out: List[Union[Instruction, Tuple[int, str]]] = []
    pos = 0
    while pos < len(code):
        try:
            instr = decode(code, pos)
        except (UnknownOpcode, TruncatedInstruction) as e:
            out.append((pos, str(e)))
            pos += 1
            continue
        out.append(instr)
        pos = instr.end
    return out


# ---------------------------------------------------------------------------
#  Building instructions from mnemonics
# ---------------------------------------------------------------------------

def classify(mnemonic: str, operands: Sequence[Operand]) -> InstrClass:
    ops = tuple(operands)
    if mnemonic == "mov":
        dst, src = ops
        if isinstance(dst, Reg) and isinstance(src, Imm):
            return InstrClass.MOV_REG_IMM
        if isinstance(dst, Reg) and isinstance(src, Reg):
            return InstrClass.MOV_REG_REG
        if isinstance(dst, Reg) and isinstance(src, MemOperand):
            return InstrClass.LOAD
        if isinstance(dst, MemOperand) and isinstance(src, Reg):
            return InstrClass.STORE
    elif mnemonic == "lea":
        return InstrClass.LEA
    elif mnemonic in ALU_RR:
        return InstrClass.ALU
    elif mnemonic == "push":
        return InstrClass.PUSH
    elif mnemonic == "pop":
        return InstrClass.POP
    elif mnemonic in ("jmp", "call"):
        target = ops[0]
        jump = mnemonic == "jmp"
        if isinstance(target, Rel):
            return InstrClass.DIRECT_JUMP if jump else InstrClass.DIRECT_CALL
        if isinstance(target, Reg):
            return InstrClass.INDIRECT_JUMP_REG if jump else InstrClass.INDIRECT_CALL_REG
        if isinstance(target, MemOperand):
            return InstrClass.INDIRECT_JUMP_MEM if jump else InstrClass.INDIRECT_CALL_MEM
    elif mnemonic in JCC:
        return InstrClass.COND_JUMP
    elif mnemonic == "ret":
        return InstrClass.RETURN
    elif mnemonic == "nop":
        return InstrClass.NOP
    elif mnemonic == "cfi_label":
        return InstrClass.CFI_LABEL
    elif mnemonic == "bndcl":
        return InstrClass.BND_CHECK_LOWER
    elif mnemonic == "bndcu":
        return InstrClass.BND_CHECK_UPPER
    elif mnemonic == "syscall":
        return InstrClass.SYSCALL_GATE
    elif mnemonic in DANGER_BY_MNEMONIC:
        return InstrClass.DANGEROUS
    raise UnencodableForm(f"no subset form for {mnemonic} {', '.join(map(str, ops))}")


def build(mnemonic: str, *operands: Operand, address: int = 0, domain_id: Optional[int] = None) -> Instruction:
    """Classify and encode an instruction given in Intel operand order."""
    klass = classify(mnemonic, operands)
    instr = Instruction(
        address=address,
        raw=b"",
        klass=klass,
        mnemonic=mnemonic,
        operands=tuple(operands),
        domain_id=(domain_id or 0) if klass is InstrClass.CFI_LABEL else None,
        danger=DANGER_BY_MNEMONIC.get(mnemonic),
    )
    return replace(instr, raw=encode(instr))


def cfi_label(domain_id: int = 0, address: int = 0) -> Instruction:
    return build("cfi_label", address=address, domain_id=domain_id)


# ---------------------------------------------------------------------------
#  Labels and pseudo-instructions
# ---------------------------------------------------------------------------

def scan_cfi_labels(code: bytes) -> List[int]:
    """Every offset where MAGIC starts, byte by byte, ignoring instruction boundaries."""
    found = []
    pos = code.find(MAGIC)
    while pos != -1:
        found.append(pos)
        pos = code.find(MAGIC, pos + 1)
    return found


def _bnd_check(instr: Instruction, klass: InstrClass, bnd: int) -> bool:
    return instr.klass is klass and instr.operands[0] == Bnd(bnd)


def recognize_pseudo(instrs: Sequence[Instruction], idx: int) -> Optional[PseudoInstr]:
    """Match a mem_guard, cfi_guard or cfi_label starting at `instrs[idx]`.

    `instrs` must be address-consecutive from `idx` on for a multi-instruction match.
    """
    first = instrs[idx]
    if first.klass is InstrClass.CFI_LABEL:
        return PseudoInstr(PseudoKind.CFI_LABEL, (first,), id_field_offset=first.address + 4)
    rest = list(instrs[idx:idx + 3])
    for a, b in zip(rest, rest[1:]):
        if a.end != b.address:
            rest = rest[:rest.index(b)]
            break
    if len(rest) >= 2 and _bnd_check(first, InstrClass.BND_CHECK_LOWER, 0):
        second = rest[1]
        operand = first.operands[1]
        if (
            isinstance(operand, MemOperand)
            and _bnd_check(second, InstrClass.BND_CHECK_UPPER, 0)
            and second.operands[1] == operand
        ):
            return PseudoInstr(PseudoKind.MEM_GUARD, (first, second), guarded_operand=operand)
        return None
    if len(rest) == 3 and first.klass is InstrClass.LOAD:
        target_reg, mem = first.operands
        lower, upper = rest[1], rest[2]
        if (
            mem.form is MemForm.BASE_DISP
            and mem.disp == 0
            and mem.base != target_reg
            and _bnd_check(lower, InstrClass.BND_CHECK_LOWER, 1)
            and _bnd_check(upper, InstrClass.BND_CHECK_UPPER, 1)
            and lower.operands[1] == target_reg
            and upper.operands[1] == target_reg
        ):
            return PseudoInstr(
                PseudoKind.CFI_GUARD, (first, lower, upper), target_reg=mem.base, scratch_reg=target_reg
            )
    return None


def written_registers(instr: Instruction) -> Set[Reg]:
    """General-purpose registers an instruction writes (rsp included for stack ops)."""
    k = instr.klass
    if k in (InstrClass.MOV_REG_IMM, InstrClass.MOV_REG_REG, InstrClass.LOAD, InstrClass.LEA):
        return {instr.operands[0]}
    if k is InstrClass.ALU:
        return set() if instr.mnemonic == "cmp" else {instr.operands[0]}
    if k is InstrClass.POP:
        return {instr.operands[0], Reg.RSP}
    if k in (InstrClass.PUSH, InstrClass.RETURN) or k in CALLS:
        return {Reg.RSP}
    return set()


def format_instruction(instr: Instruction) -> str:
    if instr.klass is InstrClass.CFI_LABEL:
        return f"cfi_label<id={instr.domain_id}>"
    ops = [op for op in instr.operands if not isinstance(op, RawBytes)]
    if not ops:
        return instr.mnemonic
    return f"{instr.mnemonic} {', '.join(str(op) for op in ops)}"
