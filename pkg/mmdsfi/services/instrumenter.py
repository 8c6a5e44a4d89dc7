"""
Instrumentation passes: cfi_label insertion, lowering of unsafe transfers, mem_guard
insertion, and the end-to-end pipelines for instrumented and reference builds.
"""
import logging
from dataclasses import dataclass, replace
from itertools import count
from typing import Callable, List, Optional

from mmdsfi.config.settings import GUARD_SIZE
from mmdsfi.errors import RspAdjustTooLarge
from mmdsfi.models.isa import Imm, MemForm, MemOperand, Reg
from mmdsfi.models.sasm import (
    ROLE_ACCESS_GUARD,
    ROLE_LOWERING,
    ROLE_RSP_GUARD,
    AddrOf,
    Item,
    Label,
    LabelRef,
    SasmFunction,
    SasmInstr,
    SasmProgram,
)
from mmdsfi.services.assembler import Assembled, assemble, is_rsp_write
from mmdsfi.services.sasm import parse_sasm

logger = logging.getLogger(__name__)

EXIT_STUB = ".exit_stub"
CALL_CLASS = ("call", "syscall")
SCRATCH_TARGET = Reg.R10
SCRATCH = Reg.R11
SYSCALL_RETURN = Reg.R13
TRAMPOLINE_REG = Reg.R14


def _rewrite(p: SasmProgram, fn: Callable[[SasmFunction], List[Item]]) -> SasmProgram:
    functions = [SasmFunction(f.name, fn(f), f.line) for f in p.functions]
    return replace(p, functions=functions, data=list(p.data))


def _is_unconditional(item: SasmInstr) -> bool:
    return item.mnemonic in ("jmp", "ret")


def seal_program(p: SasmProgram) -> SasmProgram:
    """Append an exit stub when control could run off the end of the code."""
    if p.raw:
        return p
    last = p.functions[-1].body
    tail = next((item for item in reversed(last) if isinstance(item, SasmInstr)), None)
    if tail is not None and _is_unconditional(tail) and isinstance(last[-1], SasmInstr):
        return p
    stub = SasmFunction(
        EXIT_STUB,
        [
            SasmInstr("mov", (Reg.RAX, Imm(0))),
            SasmInstr("mov", (Reg.RDI, Imm(0))),
            SasmInstr("syscall"),
            SasmInstr("jmp", (LabelRef(EXIT_STUB),)),
        ],
    )
    return replace(p, functions=list(p.functions) + [stub])


def _address_taken(p: SasmProgram) -> set:
    code = set(p.code_labels())
    taken = set()
    for func in p.functions:
        for item in func.instructions():
            for op in item.operands:
                if isinstance(op, AddrOf) and op.name in code:
                    taken.add(op.name)
    return taken


def insert_cfi_labels(p: SasmProgram) -> SasmProgram:
    """cfi_labels at function entries, address-taken labels, and after call-class instructions."""
    taken = _address_taken(p)

    def one(func: SasmFunction) -> List[Item]:
        out: List[Item] = [SasmInstr("cfi_label", (), func.line)]
        last_was_label = True
        for item in func.body:
            if isinstance(item, Label):
                if last_was_label:
                    # share the preceding cfi_label
                    at = max(i for i, x in enumerate(out) if isinstance(x, SasmInstr))
                    out.insert(at, item)
                    continue
                out.append(item)
                if item.name in taken:
                    out.append(SasmInstr("cfi_label", (), item.line))
                    last_was_label = True
                continue
            out.append(item)
            last_was_label = False
            if item.mnemonic in CALL_CLASS:
                out.append(SasmInstr("cfi_label", (), item.line))
                last_was_label = True
        return out

    result = _rewrite(p, one)
    logger.debug(f"Inserted {result.count('cfi_label')} cfi_labels")
    return result


def lower_unsafe_transfers(p: SasmProgram) -> SasmProgram:
    """Replace ret, memory-indirect transfers and syscalls by guarded register jumps."""
    sites = count()

    def guard_jump(reg: Reg, line: Optional[int]) -> List[Item]:
        return [
            SasmInstr("cfi_guard", (reg, SCRATCH), line, ROLE_LOWERING),
            SasmInstr("jmp", (reg,), line, ROLE_LOWERING),
        ]

    def one(func: SasmFunction) -> List[Item]:
        out: List[Item] = []
        for item in func.body:
            if isinstance(item, Label):
                out.append(item)
                continue
            m, ops, line = item.mnemonic, item.operands, item.line
            if m == "ret":
                out.append(SasmInstr("pop", (SCRATCH_TARGET,), line, ROLE_LOWERING))
                out.extend(guard_jump(SCRATCH_TARGET, line))
            elif m == "jmp" and isinstance(ops[0], MemOperand):
                out.append(SasmInstr("mem_guard", (ops[0],), line, ROLE_LOWERING))
                out.append(SasmInstr("mov", (SCRATCH_TARGET, ops[0]), line, ROLE_LOWERING))
                out.extend(guard_jump(SCRATCH_TARGET, line))
            elif m == "jmp" and isinstance(ops[0], Reg):
                out.extend(guard_jump(ops[0], line))
            elif m == "call" and isinstance(ops[0], (Reg, MemOperand)):
                site = f".Lret{next(sites)}"
                target = ops[0]
                if isinstance(target, MemOperand):
                    out.append(SasmInstr("mem_guard", (target,), line, ROLE_LOWERING))
                    out.append(SasmInstr("mov", (SCRATCH_TARGET, target), line, ROLE_LOWERING))
                    target = SCRATCH_TARGET
                out.append(SasmInstr("mov", (SCRATCH, AddrOf(site)), line, ROLE_LOWERING))
                out.append(SasmInstr("push", (SCRATCH,), line, ROLE_LOWERING))
                out.extend(guard_jump(target, line))
                out.append(Label(site, line))
            elif m == "syscall":
                site = f".Lret{next(sites)}"
                out.append(SasmInstr("mov", (SYSCALL_RETURN, AddrOf(site)), line, ROLE_LOWERING))
                out.extend(guard_jump(TRAMPOLINE_REG, line))
                out.append(Label(site, line))
            else:
                out.append(item)
        return out

    return _rewrite(p, one)


def _is_store(item: SasmInstr) -> bool:
    return item.mnemonic == "mov" and isinstance(item.operands[0], MemOperand)


def _is_load(item: SasmInstr) -> bool:
    return item.mnemonic == "mov" and len(item.operands) == 2 and isinstance(item.operands[1], MemOperand)


RSP_GUARD_OPERAND = MemOperand.at(Reg.RSP)


def insert_mem_guards(p: SasmProgram, confine_loads: bool = True) -> SasmProgram:
    """Guard every store (and load, when confined) and enforce the rsp discipline."""

    def one(func: SasmFunction) -> List[Item]:
        out: List[Item] = []
        body = func.body
        for idx, item in enumerate(body):
            if isinstance(item, Label):
                out.append(item)
                continue
            needs_guard = item.role != ROLE_LOWERING and (_is_store(item) or (confine_loads and _is_load(item)))
            if needs_guard:
                mem = item.operands[0] if _is_store(item) else item.operands[1]
                out.append(SasmInstr("mem_guard", (mem,), item.line, ROLE_ACCESS_GUARD))
            out.append(item)
            if is_rsp_write(item):
                if item.mnemonic in ("add", "sub") and isinstance(item.operands[1], Imm):
                    if abs(item.operands[1].value) > GUARD_SIZE:
                        raise RspAdjustTooLarge(
                            f"{item} moves rsp by more than one guard region ({GUARD_SIZE} bytes)", item.line
                        )
                    nxt = body[idx + 1] if idx + 1 < len(body) else None
                    if isinstance(nxt, SasmInstr) and nxt.mnemonic in ("push", "pop"):
                        continue
                out.append(SasmInstr("mem_guard", (RSP_GUARD_OPERAND,), item.line, ROLE_RSP_GUARD))
        return out

    result = _rewrite(p, one)
    logger.debug(f"{result.count('mem_guard')} mem_guards after insertion (confine_loads={confine_loads})")
    return result


@dataclass
class BuildOptions:
    confine_loads: bool = True
    optimize: bool = True
    d_capacity: Optional[int] = None
    stack_reserve: Optional[int] = None


def instrument_program(p: SasmProgram, options: Optional[BuildOptions] = None) -> Assembled:
    """Full pipeline: labels, lowering, guards, optimization, assembly."""
    from mmdsfi.services.optimizer import optimize

    options = options or BuildOptions()
    if p.raw:
        return assemble(p, options.d_capacity, options.stack_reserve, enforce_magic=False)
    p = seal_program(p)
    p = insert_cfi_labels(p)
    p = lower_unsafe_transfers(p)
    p = insert_mem_guards(p, options.confine_loads)
    if options.optimize:
        p = optimize(p, options)
    asm = assemble(p, options.d_capacity, options.stack_reserve)
    logger.info(
        f"Instrumented {len(p.functions)} functions: {len(asm.image.code)} code bytes, "
        f"{asm.program.count('mem_guard')} mem_guards, {asm.program.count('cfi_label')} cfi_labels"
    )
    return asm


def reference_program(p: SasmProgram, options: Optional[BuildOptions] = None) -> Assembled:
    """Uninstrumented build for the permissive reference machine."""
    options = options or BuildOptions()
    if p.raw:
        return assemble(p, options.d_capacity, options.stack_reserve, enforce_magic=False)
    p = insert_cfi_labels(seal_program(p))
    return assemble(p, options.d_capacity, options.stack_reserve, enforce_magic=False)


def instrument_source(text: str, options: Optional[BuildOptions] = None, raw: bool = False) -> Assembled:
    return instrument_program(parse_sasm(text, raw=raw), options)


def reference_source(text: str, options: Optional[BuildOptions] = None, raw: bool = False) -> Assembled:
    return reference_program(parse_sasm(text, raw=raw), options)
