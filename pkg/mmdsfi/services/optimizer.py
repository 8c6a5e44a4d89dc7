"""
Range-analysis driven guard optimizations.

Both transforms are speculative: the result is assembled and re-verified, and a
transform the verifier rejects is reverted.
"""
import logging
from dataclasses import replace
from typing import Dict, List, Optional, Set, Tuple

from mmdsfi.config.settings import GUARD_SIZE
from mmdsfi.errors import AssemblyError, Stage1Abort
from mmdsfi.models.analysis import RangeFact
from mmdsfi.models.isa import Imm, InstrClass, MemForm, MemOperand, Reg
from mmdsfi.models.sasm import (
    ROLE_ACCESS_GUARD,
    ROLE_HOISTED,
    ROLE_LOWERING,
    Label,
    SasmFunction,
    SasmInstr,
    SasmProgram,
)
from mmdsfi.services.analysis import access_within_guard, natural_loops
from mmdsfi.services.assembler import Assembled, Position, assemble
from mmdsfi.services.isa import written_registers
from mmdsfi.services.verifier import reachable_with_facts, verify

logger = logging.getLogger(__name__)


def _assemble(p: SasmProgram, options) -> Optional[Assembled]:
    try:
        return assemble(p, options.d_capacity, options.stack_reserve)
    except AssemblyError as e:
        logger.warning(f"Optimizer candidate failed to assemble: {e}")
        return None


def _accepted(p: SasmProgram, options) -> bool:
    asm = _assemble(p, options)
    return asm is not None and verify(asm.image, options.confine_loads).accepted


def _analyse(p: SasmProgram, options):
    asm = _assemble(p, options)
    if asm is None:
        return None
    try:
        r, cfg, facts = reachable_with_facts(asm.image, options.confine_loads)
    except Stage1Abort as e:
        logger.warning(f"Optimizer input does not disassemble: {e}")
        return None
    return asm, r, cfg, facts


def _without(p: SasmProgram, positions: Set[Position]) -> SasmProgram:
    functions = [
        SasmFunction(f.name, [item for ii, item in enumerate(f.body) if (fi, ii) not in positions], f.line)
        for fi, f in enumerate(p.functions)
    ]
    return replace(p, functions=functions)


def _guarded_access(p: SasmProgram, pos: Position) -> Optional[SasmInstr]:
    fi, ii = pos
    body = p.functions[fi].body
    if ii + 1 >= len(body):
        return None
    nxt = body[ii + 1]
    if not isinstance(nxt, SasmInstr) or nxt.mnemonic != "mov":
        return None
    guarded = body[ii].operands[0]
    if guarded in nxt.operands and any(isinstance(op, MemOperand) for op in nxt.operands):
        return nxt
    return None


def _redundant(p: SasmProgram, asm: Assembled, facts: Dict[int, RangeFact], confine_loads: bool) -> List[Position]:
    found = []
    for fi, func in enumerate(p.functions):
        for ii, item in enumerate(func.body):
            if not isinstance(item, SasmInstr) or item.mnemonic != "mem_guard":
                continue
            if item.role not in (ROLE_ACCESS_GUARD, ROLE_LOWERING):
                continue
            access = _guarded_access(p, (fi, ii))
            if access is None:
                continue
            is_load = isinstance(access.operands[1], MemOperand)
            if is_load and not confine_loads:
                found.append((fi, ii))
                continue
            mem = item.operands[0]
            fact = facts.get(asm.offsets[(fi, ii)])
            if mem.form is MemForm.BASE_DISP and fact is not None and access_within_guard(fact, mem.base, mem.disp):
                found.append((fi, ii))
    return found


def eliminate_redundant_guards(p: SasmProgram, options) -> SasmProgram:
    analysed = _analyse(p, options)
    if analysed is None:
        return p
    asm, _, _, facts = analysed
    candidates = _redundant(p, asm, facts, options.confine_loads)
    if not candidates:
        return p
    batch = _without(p, set(candidates))
    if _accepted(batch, options):
        logger.debug(f"Removed {len(candidates)} redundant guards in one batch")
        return batch
    logger.warning("Batch guard elimination was rejected; retrying one guard at a time")
    removed = 0
    for pos in sorted(candidates, reverse=True):
        trial = _without(p, {pos})
        if _accepted(trial, options):
            p = trial
            removed += 1
    logger.debug(f"Removed {removed} of {len(candidates)} candidate guards individually")
    return p


def _loop_base_step(asm: Assembled, r, body: Set[int], base: Reg) -> Optional[int]:
    """Total |constant| by which `base` moves per iteration, or None if it changes otherwise."""
    total = 0
    for offset in body:
        instr = r.instrs[offset]
        if base not in written_registers(instr):
            continue
        if instr.klass is InstrClass.ALU and instr.mnemonic in ("add", "sub") and isinstance(instr.operands[1], Imm):
            total += abs(instr.operands[1].value)
        else:
            return None
    return total


def _position_of(asm: Assembled, offset: int) -> Optional[Position]:
    for pos, start in asm.offsets.items():
        if start == offset and asm.sizes[pos]:
            return pos
    return None


def _hoist_candidates(p: SasmProgram, asm: Assembled, r, cfg) -> List[Tuple[Position, Position]]:
    """(in-loop guard, loop header item) pairs worth trying."""
    pairs = []
    for header, body in natural_loops(cfg):
        head_pos = _position_of(asm, header)
        if head_pos is None or r.instrs[header].klass is InstrClass.CFI_LABEL:
            continue
        for fi, func in enumerate(p.functions):
            for ii, item in enumerate(func.body):
                if not isinstance(item, SasmInstr) or item.mnemonic != "mem_guard" or item.role != ROLE_ACCESS_GUARD:
                    continue
                if asm.offsets[(fi, ii)] not in body:
                    continue
                mem = item.operands[0]
                if mem.form is not MemForm.BASE_DISP or mem.base == Reg.RSP:
                    continue
                step = _loop_base_step(asm, r, body, mem.base)
                if step is None or step >= GUARD_SIZE:
                    continue
                pairs.append(((fi, ii), head_pos))
    return pairs


def _hoisted(p: SasmProgram, guard: Position, head: Position) -> SasmProgram:
    gfi, gii = guard
    hfi, hii = head
    guard_item = p.functions[gfi].body[gii]
    functions = [SasmFunction(f.name, list(f.body), f.line) for f in p.functions]
    functions[gfi].body.pop(gii)
    if (hfi, hii) > (gfi, gii) and hfi == gfi:
        hii -= 1
    body = functions[hfi].body
    while hii > 0 and isinstance(body[hii - 1], Label):
        hii -= 1
    body[hii:hii] = [
        replace(guard_item, role=ROLE_HOISTED),
        SasmInstr("nop", (), guard_item.line, ROLE_HOISTED),
    ]
    return replace(p, functions=functions)


def hoist_loop_guards(p: SasmProgram, options) -> SasmProgram:
    tried: Set[Tuple[Optional[int], str]] = set()
    while True:
        analysed = _analyse(p, options)
        if analysed is None:
            return p
        asm, r, cfg, _ = analysed
        progress = False
        for guard, head in _hoist_candidates(p, asm, r, cfg):
            item = p.functions[guard[0]].body[guard[1]]
            key = (item.line, str(item))
            if key in tried:
                continue
            tried.add(key)
            trial = _hoisted(p, guard, head)
            if _accepted(trial, options):
                logger.debug(f"Hoisted {item} (line {item.line}) out of its loop")
                p = trial
                progress = True
                break
            logger.warning(f"Hoisting {item} (line {item.line}) was rejected by the verifier; reverted")
        if not progress:
            return p


def optimize(p: SasmProgram, options) -> SasmProgram:
    before = p.count("mem_guard")
    p = eliminate_redundant_guards(p, options)
    p = hoist_loop_guards(p, options)
    p = eliminate_redundant_guards(p, options)
    logger.info(f"Optimizer: {before} -> {p.count('mem_guard')} static mem_guards")
    return p
