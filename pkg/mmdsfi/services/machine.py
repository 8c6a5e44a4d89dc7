"""
Stepping interpreter for the instruction subset, with MPX bound-check and page-permission
fault semantics.

Every access is checked against the running SIP's view: its own C and D. Other domains'
regions, the LibOS region, guard regions and every other address are unmapped for it.
Within the view, C is executable and never writable; a data read of C is allowed only for
the first load of a cfi_guard sequence. D is readable and writable. The permissive
reference machine runs uninstrumented builds: its syscall gate works anywhere and returns
to the next instruction.
"""
import logging
from typing import List, Optional, Tuple, Union

from mmdsfi.errors import DecodeError
from mmdsfi.models.isa import Imm, InstrClass, Instruction, MemForm, MemOperand, PseudoKind, Reg
from mmdsfi.models.runtime import (
    MASK64,
    Counters,
    Fault,
    FaultKind,
    Region,
    RegionKind,
    SipState,
    SyscallRequest,
)
from mmdsfi.services.isa import CFI_LABEL_SIZE, decode, recognize_pseudo
from mmdsfi.services.memory import Memory

logger = logging.getLogger(__name__)

SIGN64 = 1 << 63

StepOutcome = Optional[Union[Fault, SyscallRequest]]

# ---------------------------------------------------------------------------
#  Helpers
# ---------------------------------------------------------------------------

def u64(v: int) -> int:
    return v & MASK64


def s64(v: int) -> int:
    v = u64(v)
    return v - (1 << 64) if v >= SIGN64 else v


class _Trap(Exception):
    def __init__(self, kind: FaultKind, detail: str):
        self.kind = kind
        self.detail = detail
        super().__init__(f"{kind.value}: {detail}")


class MachineObserver:
    """Hooks for the execution monitor; every method is a no-op here."""

    def before_step(self, sip: SipState, region: Region, instr: Instruction):
        pass

    def after_access(self, sip: SipState, instr: Instruction, addr: int, is_store: bool, carve_out: bool):
        pass

    def after_indirect(self, sip: SipState, instr: Instruction, target: int):
        pass


# ---------------------------------------------------------------------------
#  Machine
# ---------------------------------------------------------------------------

class Machine:
    def __init__(
        self,
        memory: Memory,
        reference: bool = False,
        counters: Optional[Counters] = None,
        trace: Optional[List[str]] = None,
        observer: Optional[MachineObserver] = None,
    ):
        self.memory = memory
        self.reference = reference
        self.counters = counters if counters is not None else Counters()
        self.trace = trace
        self.observer = observer

    def step(self, sip: SipState) -> StepOutcome:
        """Execute one instruction of `sip`: None to continue, a Fault, or a SyscallRequest."""
        pc = sip.pc
        instr: Optional[Instruction] = None
        self.counters.steps += 1
        try:
            region, instr = self._fetch(sip, pc)
            if self.observer is not None:
                self.observer.before_step(sip, region, instr)
            outcome = self._execute(sip, region, instr)
        except _Trap as trap:
            fault = Fault(trap.kind, pc, trap.detail)
            self._trace(pc, instr, fault.kind)
            return fault
        self._trace(pc, instr)
        return outcome

    def _trace(self, pc: int, instr: Optional[Instruction], fault: Optional[FaultKind] = None):
        if self.trace is None:
            return
        line = f"pc={pc:#x} op={instr.mnemonic if instr is not None else '?'}"
        if fault is not None:
            line += f" fault={fault.value}"
        self.trace.append(line)

    # -- Fetch --

    def _decode_in(self, region: Region, offset: int) -> Instruction:
        instr = region.decoded.get(offset)
        if instr is None:
            instr = decode(region.data, offset)
            region.decoded[offset] = instr
        return instr

    def _region_for(self, sip: SipState, addr: int, size: int) -> Optional[Region]:
        """The region holding [addr, addr+size) if it belongs to `sip`'s own domain."""
        region = self.memory.region_at(addr, size)
        if region is None or region.domain_id != sip.domain.domain_id:
            return None
        if region.kind not in (RegionKind.CODE, RegionKind.DATA):
            return None
        return region

    def _fetch(self, sip: SipState, pc: int) -> Tuple[Region, Instruction]:
        region = self._region_for(sip, pc, 1)
        if region is None:
            raise _Trap(FaultKind.UNMAPPED_ACCESS, f"fetch from {pc:#x}, unmapped for domain {sip.domain.domain_id}")
        if region.kind is not RegionKind.CODE:
            raise _Trap(FaultKind.NON_EXECUTABLE_FETCH, f"fetch from {region.kind.value} at {pc:#x}")
        try:
            return region, self._decode_in(region, pc - region.begin)
        except DecodeError as e:
            raise _Trap(FaultKind.INVALID_OPCODE, str(e))

    def _is_cfi_guard_load(self, region: Region, instr: Instruction) -> bool:
        try:
            second = self._decode_in(region, instr.end)
            third = self._decode_in(region, second.end)
        except DecodeError:
            return False
        pseudo = recognize_pseudo([instr, second, third], 0)
        return pseudo is not None and pseudo.kind is PseudoKind.CFI_GUARD

    # -- Operands and memory --

    def _ea(self, sip: SipState, mem: MemOperand, next_pc: int) -> int:
        if mem.form is MemForm.RIP_RELATIVE:
            return u64(next_pc + mem.disp)
        if mem.form is MemForm.DIRECT_OFFSET:
            return u64(mem.disp)
        addr = mem.disp
        if mem.base is not None:
            addr += sip.regs[mem.base]
        if mem.index is not None and mem.form is not MemForm.VSIB:
            addr += sip.regs[mem.index] * mem.scale
        return u64(addr)

    def _load(self, sip: SipState, addr: int, instr: Instruction, code: Region) -> int:
        target = self._region_for(sip, addr, 8)
        if target is None:
            raise _Trap(FaultKind.UNMAPPED_ACCESS, f"read of {addr:#x}, unmapped for domain {sip.domain.domain_id}")
        carve_out = False
        if target.kind is RegionKind.CODE and instr.klass is InstrClass.LOAD and self._is_cfi_guard_load(code, instr):
            carve_out = True
        elif target.kind is not RegionKind.DATA:
            raise _Trap(FaultKind.PERMISSION_DENIED, f"data read of {target.kind.value} at {addr:#x}")
        value = self.memory.read_u64(target, addr)
        if self.observer is not None:
            self.observer.after_access(sip, instr, addr, False, carve_out)
        return value

    def _store(self, sip: SipState, addr: int, value: int, instr: Instruction):
        target = self._region_for(sip, addr, 8)
        if target is None:
            raise _Trap(FaultKind.UNMAPPED_ACCESS, f"write to {addr:#x}, unmapped for domain {sip.domain.domain_id}")
        if target.kind is not RegionKind.DATA:
            raise _Trap(FaultKind.PERMISSION_DENIED, f"write to {target.kind.value} at {addr:#x}")
        self.memory.write_u64(target, addr, u64(value))
        if self.observer is not None:
            self.observer.after_access(sip, instr, addr, True, False)

    def _push(self, sip: SipState, value: int, instr: Instruction):
        rsp = u64(sip.regs[Reg.RSP] - 8)
        self._store(sip, rsp, value, instr)
        sip.regs[Reg.RSP] = rsp

    def _pop(self, sip: SipState, instr: Instruction, code: Region) -> int:
        rsp = sip.regs[Reg.RSP]
        value = self._load(sip, rsp, instr, code)
        sip.regs[Reg.RSP] = u64(rsp + 8)
        return value

    # -- Flags --

    def _set_flags(self, sip: SipState, result: int, overflow: bool = False):
        flags = sip.flags
        flags.zf = u64(result) == 0
        flags.sf = bool(u64(result) & SIGN64)
        flags.of = overflow

    def _alu(self, sip: SipState, instr: Instruction):
        dst, src = instr.operands
        a = sip.regs[dst]
        b = u64(src.value) if isinstance(src, Imm) else sip.regs[src]
        m = instr.mnemonic
        if m == "add":
            result = u64(a + b)
            overflow = (s64(a) >= 0) == (s64(b) >= 0) and (s64(result) >= 0) != (s64(a) >= 0)
        elif m in ("sub", "cmp"):
            result = u64(a - b)
            overflow = (s64(a) >= 0) != (s64(b) >= 0) and (s64(result) >= 0) != (s64(a) >= 0)
        elif m == "and":
            result, overflow = a & b, False
        elif m == "or":
            result, overflow = a | b, False
        else:
            result, overflow = a ^ b, False
        self._set_flags(sip, result, overflow)
        if m != "cmp":
            sip.regs[dst] = result

    def _condition(self, sip: SipState, mnemonic: str) -> bool:
        f = sip.flags
        if mnemonic == "je":
            return f.zf
        if mnemonic == "jne":
            return not f.zf
        if mnemonic == "jl":
            return f.sf != f.of
        return f.sf == f.of  # jge

    def _bound_check(self, sip: SipState, instr: Instruction, next_pc: int):
        bnd, rm = instr.operands
        value = sip.regs[rm] if isinstance(rm, Reg) else self._ea(sip, rm, next_pc)
        bound = sip.bnd[bnd.index]
        if instr.klass is InstrClass.BND_CHECK_LOWER:
            if bnd.index == 0:
                self.counters.mem_guards += 1
            elif bnd.index == 1:
                self.counters.cfi_guards += 1
            if value < bound.lb:
                raise _Trap(FaultKind.BOUND_LOWER, f"{value:#x} < {bnd}.lb {bound.lb:#x}")
        elif value > bound.ub:
            raise _Trap(FaultKind.BOUND_UPPER, f"{value:#x} > {bnd}.ub {bound.ub:#x}")

    # =====================================================================
    #  Execute
    # =====================================================================

    def _execute(self, sip: SipState, region: Region, instr: Instruction) -> StepOutcome:
        regs = sip.regs
        k = instr.klass
        ops = instr.operands
        next_pc = region.begin + instr.end

        if k in (InstrClass.NOP, InstrClass.CFI_LABEL):
            pass
        elif k is InstrClass.MOV_REG_IMM:
            regs[ops[0]] = u64(ops[1].value)
        elif k is InstrClass.MOV_REG_REG:
            regs[ops[0]] = regs[ops[1]]
        elif k is InstrClass.LEA:
            regs[ops[0]] = self._ea(sip, ops[1], next_pc)
        elif k is InstrClass.LOAD:
            regs[ops[0]] = self._load(sip, self._ea(sip, ops[1], next_pc), instr, region)
        elif k is InstrClass.STORE:
            self._store(sip, self._ea(sip, ops[0], next_pc), regs[ops[1]], instr)
        elif k is InstrClass.ALU:
            self._alu(sip, instr)
        elif k is InstrClass.PUSH:
            self._push(sip, regs[ops[0]], instr)
        elif k is InstrClass.POP:
            regs[ops[0]] = self._pop(sip, instr, region)
        elif k is InstrClass.DIRECT_JUMP:
            next_pc = region.begin + instr.rel_target
        elif k is InstrClass.COND_JUMP:
            if self._condition(sip, instr.mnemonic):
                next_pc = region.begin + instr.rel_target
        elif k is InstrClass.DIRECT_CALL:
            self._push(sip, next_pc, instr)
            next_pc = region.begin + instr.rel_target
        elif k in (InstrClass.INDIRECT_JUMP_REG, InstrClass.INDIRECT_JUMP_MEM):
            target = regs[ops[0]] if isinstance(ops[0], Reg) else self._load(sip, self._ea(sip, ops[0], next_pc), instr, region)
            next_pc = self._indirect(sip, instr, target)
        elif k in (InstrClass.INDIRECT_CALL_REG, InstrClass.INDIRECT_CALL_MEM):
            target = regs[ops[0]] if isinstance(ops[0], Reg) else self._load(sip, self._ea(sip, ops[0], next_pc), instr, region)
            self._push(sip, next_pc, instr)
            next_pc = self._indirect(sip, instr, target)
        elif k is InstrClass.RETURN:
            next_pc = self._indirect(sip, instr, self._pop(sip, instr, region))
        elif k in (InstrClass.BND_CHECK_LOWER, InstrClass.BND_CHECK_UPPER):
            self._bound_check(sip, instr, next_pc)
        elif k is InstrClass.SYSCALL_GATE:
            return self._gate(sip, region, instr, next_pc)
        elif k is InstrClass.DANGEROUS:
            raise _Trap(FaultKind.DANGEROUS_INSTR, instr.mnemonic)
        else:
            raise _Trap(FaultKind.INVALID_OPCODE, f"{instr.mnemonic} is not emulated")
        sip.pc = next_pc
        return None

    def _indirect(self, sip: SipState, instr: Instruction, target: int) -> int:
        if self.observer is not None:
            self.observer.after_indirect(sip, instr, target)
        return target

    def _gate(self, sip: SipState, region: Region, instr: Instruction, next_pc: int) -> SyscallRequest:
        pc = region.begin + instr.address
        if self.reference:
            return SyscallRequest(pc, next_pc)
        if pc != sip.domain.trampoline + CFI_LABEL_SIZE:
            raise _Trap(FaultKind.DANGEROUS_INSTR, f"syscall gate outside the trampoline at {pc:#x}")
        return SyscallRequest(pc, sip.regs[Reg.R13])
