"""
Four-stage static verifier.

Stage 1 disassembles everything reachable from the cfi_labels, Stage 2 rejects dangerous
instructions, Stage 3 checks control transfers and Stage 4 checks memory accesses against
the range facts. A stage only runs when every earlier stage passed.
"""
import heapq
import logging
from typing import Dict, List, Optional, Set, Tuple

import networkx as nx

from mmdsfi.config.settings import GUARD_SIZE
from mmdsfi.errors import DecodeError, Stage1Abort
from mmdsfi.models.analysis import RangeFact, ReachableSet
from mmdsfi.models.image import SipbImage
from mmdsfi.models.isa import DangerKind, Imm, InstrClass, Instruction, MemForm, MemOperand, PseudoKind, Reg
from mmdsfi.models.verdict import Verdict, VerdictStats, Violation
from mmdsfi.services.analysis import access_within_guard, build_cfg, find_pseudos, range_analysis
from mmdsfi.services.isa import (
    CALLS,
    DIRECT_TRANSFERS,
    MAGIC,
    MEMORY_INDIRECT,
    REGISTER_INDIRECT,
    UNCONDITIONAL,
    decode,
    scan_cfi_labels,
    written_registers,
)

logger = logging.getLogger(__name__)

ABORT_OUT_OF_RANGE = "AbortOutOfRange"
ABORT_INVALID = "AbortInvalidInstruction"
ABORT_OVERLAP = "AbortOverlap"
ABORT_ENTRY = "AbortEntryNotLabel"

DANGER_CODES = {
    DangerKind.SGX_LEAF: "E_SGX",
    DangerKind.MPX_MUTATION: "E_MPX_MUT",
    DangerKind.XSTATE_RESTORE: "E_XSTATE",
    DangerKind.SEG_BASE_WRITE: "E_SEGBASE",
}


# ---------------------------------------------------------------------------
#  Stage 1
# ---------------------------------------------------------------------------

def stage1_disassemble(img: SipbImage) -> ReachableSet:
    """Complete disassembly; raises Stage1Abort with the partial set on failure."""
    code = img.code
    instrs: Dict[int, Instruction] = {}
    if img.code[img.entry:img.entry + len(MAGIC)] != MAGIC:
        raise Stage1Abort(ABORT_ENTRY, img.entry, "entry does not start with a cfi_label")

    labels = scan_cfi_labels(code)
    seeds = set(labels) | {img.entry}
    owner: List[Optional[int]] = [None] * len(code)
    worklist = sorted(seeds)
    heapq.heapify(worklist)

    def abort(kind: str, offset: int, detail: str):
        return Stage1Abort(kind, offset, detail, partial=dict(instrs))

    while worklist:
        addr = heapq.heappop(worklist)
        if addr in instrs:
            continue
        if not 0 <= addr < len(code):
            raise abort(ABORT_OUT_OF_RANGE, addr, "address is not within C")
        if owner[addr] is not None:
            raise abort(ABORT_OVERLAP, addr, f"starts inside the instruction at {owner[addr]:#x}")
        try:
            instr = decode(code, addr)
        except DecodeError as e:
            raise abort(ABORT_INVALID, addr, str(e))
        for pos in range(instr.address, instr.end):
            if owner[pos] is not None:
                raise abort(ABORT_OVERLAP, addr, f"overlaps the instruction at {owner[pos]:#x}")
        for pos in range(instr.address, instr.end):
            owner[pos] = addr
        instrs[addr] = instr

        successors = []
        if instr.klass not in UNCONDITIONAL:
            successors.append(instr.end)
        if instr.klass in DIRECT_TRANSFERS:
            successors.append(instr.rel_target)
        for succ in successors:
            if not 0 <= succ < len(code):
                raise abort(ABORT_OUT_OF_RANGE, succ, f"successor of {addr:#x} is not within C")
            if succ not in instrs:
                heapq.heappush(worklist, succ)

    r = ReachableSet(instrs=instrs, code_size=len(code))
    r.entry_labels = {o for o in seeds if o in instrs and instrs[o].klass is InstrClass.CFI_LABEL}
    r.pseudos = find_pseudos(instrs)
    return r


# ---------------------------------------------------------------------------
#  Stage 2
# ---------------------------------------------------------------------------

def stage2_instruction_set(r: ReachableSet) -> List[Violation]:
    violations = []
    for offset in r.offsets():
        instr = r.instrs[offset]
        if instr.klass is InstrClass.DANGEROUS:
            code = DANGER_CODES[instr.danger]
            violations.append(Violation(stage=2, offset=offset, code=code, detail=instr.mnemonic))
        elif instr.klass is InstrClass.SYSCALL_GATE:
            violations.append(
                Violation(stage=2, offset=offset, code="E_SYSCALL_IN_USER", detail="syscall gate outside the trampoline")
            )
    return violations


# ---------------------------------------------------------------------------
#  Stage 3
# ---------------------------------------------------------------------------

def _is_rsp_mutation(instr: Instruction) -> bool:
    if instr.klass in (InstrClass.PUSH, InstrClass.RETURN) or instr.klass in CALLS:
        return False
    if instr.klass is InstrClass.POP:
        return instr.operands[0] == Reg.RSP
    return Reg.RSP in written_registers(instr)


def _is_small_rsp_adjust(instr: Instruction) -> bool:
    return (
        instr.klass is InstrClass.ALU
        and instr.mnemonic in ("add", "sub")
        and instr.operands[0] == Reg.RSP
        and isinstance(instr.operands[1], Imm)
        and abs(instr.operands[1].value) <= GUARD_SIZE
    )


def _rsp_guard_at(r: ReachableSet, offset: int) -> bool:
    pseudo = r.pseudos.get(offset)
    if pseudo is None or pseudo.kind is not PseudoKind.MEM_GUARD:
        return False
    mem = pseudo.guarded_operand
    return mem.form is MemForm.BASE_DISP and mem.base == Reg.RSP and abs(mem.disp) <= GUARD_SIZE


def interior_set(r: ReachableSet) -> Set[int]:
    """Offsets no control transfer may target."""
    interior = set()
    for pseudo in r.pseudos.values():
        if pseudo.kind is PseudoKind.CFI_LABEL:
            continue
        interior.update(i.address for i in pseudo.instrs[1:])
        if pseudo.end in r.instrs:
            interior.add(pseudo.end)
    for offset, instr in r.instrs.items():
        if _is_rsp_mutation(instr) and _rsp_guard_at(r, instr.end):
            interior.add(instr.end)
    return interior


def stage3_control(r: ReachableSet) -> List[Violation]:
    violations = []
    interior = interior_set(r)
    guard_ends = {
        p.end: p for p in r.pseudos.values() if p.kind is PseudoKind.CFI_GUARD
    }
    for offset in r.offsets():
        instr = r.instrs[offset]
        k = instr.klass
        if k in DIRECT_TRANSFERS:
            target = instr.rel_target
            if target not in r.instrs:
                violations.append(Violation(stage=3, offset=offset, code="E_CT_TARGET", detail=f"target {target:#x} not in R"))
            elif target in interior or r.instrs[target].klass in REGISTER_INDIRECT:
                violations.append(
                    Violation(stage=3, offset=offset, code="E_CT_INTERIOR", detail=f"target {target:#x} is inside an atomic sequence")
                )
        elif k in REGISTER_INDIRECT:
            guard = guard_ends.get(offset)
            if guard is None or guard.target_reg != instr.operands[0]:
                violations.append(
                    Violation(stage=3, offset=offset, code="E_CT_UNGUARDED", detail=f"{instr.mnemonic} {instr.operands[0]} has no cfi_guard")
                )
        elif k in MEMORY_INDIRECT:
            violations.append(Violation(stage=3, offset=offset, code="E_CT_MEM", detail="memory-based indirect transfer"))
        elif k is InstrClass.RETURN:
            violations.append(Violation(stage=3, offset=offset, code="E_CT_RET", detail="return-based transfer"))
    return violations


# ---------------------------------------------------------------------------
#  Stage 4
# ---------------------------------------------------------------------------

def _rsp_followup_ok(r: ReachableSet, instr: Instruction) -> bool:
    nxt = r.instrs.get(instr.end)
    if nxt is None:
        return False
    if _rsp_guard_at(r, nxt.address):
        return True
    if not _is_small_rsp_adjust(instr):
        return False
    if nxt.klass in (InstrClass.PUSH, InstrClass.POP) or nxt.klass in CALLS:
        return True
    if nxt.klass in (InstrClass.LOAD, InstrClass.STORE):
        mem = nxt.mem
        return mem.form is MemForm.BASE_DISP and mem.base == Reg.RSP and abs(mem.disp) <= GUARD_SIZE
    return False


def _adjacent_guard(r: ReachableSet, guard_ends: Dict[int, MemOperand], instr: Instruction, mem: MemOperand) -> bool:
    guarded = guard_ends.get(instr.address)
    return guarded is not None and guarded == mem


def stage4_memory(
    r: ReachableSet,
    facts: Dict[int, RangeFact],
    confine_loads: bool = True,
    stats: Optional[VerdictStats] = None,
) -> List[Violation]:
    violations = []
    guard_ends = {p.end: p.guarded_operand for p in r.pseudos.values() if p.kind is PseudoKind.MEM_GUARD}
    guard_loads = {p.load.address for p in r.pseudos.values() if p.kind is PseudoKind.CFI_GUARD}
    eliminated = 0

    for offset in r.offsets():
        instr = r.instrs[offset]
        k = instr.klass
        if k is InstrClass.VECTOR_GATHER:
            violations.append(Violation(stage=4, offset=offset, code="E_MEM_VSIB", detail="vector SIB access"))
            continue
        if _is_rsp_mutation(instr) and not _rsp_followup_ok(r, instr):
            violations.append(
                Violation(stage=4, offset=offset, code="E_MEM_RSP", detail="rsp write not followed by a stack guard or access")
            )
        if k not in (InstrClass.LOAD, InstrClass.STORE):
            continue
        mem = instr.mem
        if mem.form in (MemForm.DIRECT_OFFSET, MemForm.RIP_RELATIVE):
            violations.append(Violation(stage=4, offset=offset, code="E_MEM_DIRECT", detail=f"fixed address {mem}"))
            continue
        if k is InstrClass.LOAD and (not confine_loads or offset in guard_loads):
            continue
        if _adjacent_guard(r, guard_ends, instr, mem):
            continue
        fact = facts.get(offset)
        if mem.form is MemForm.BASE_DISP and fact is not None and access_within_guard(fact, mem.base, mem.disp):
            eliminated += 1
            continue
        violations.append(Violation(stage=4, offset=offset, code="E_MEM_UNPROVEN", detail=f"{instr.mnemonic} {mem} not confined"))

    if stats is not None:
        stats.eliminated_guard_equiv = eliminated
    return violations


# ---------------------------------------------------------------------------
#  Driver
# ---------------------------------------------------------------------------

def reachable_with_facts(img: SipbImage, confine_loads: bool = True) -> Tuple[ReachableSet, nx.DiGraph, Dict[int, RangeFact]]:
    """Stage 1 plus the analysis; raises Stage1Abort."""
    r = stage1_disassemble(img)
    cfg = build_cfg(r)
    return r, cfg, range_analysis(cfg, r, confine_loads=confine_loads)


def verify(img: SipbImage, confine_loads: bool = True) -> Verdict:
    verdict = Verdict(accepted=False, confine_loads=confine_loads)
    verdict.stages_run.append(1)
    try:
        r = stage1_disassemble(img)
    except Stage1Abort as e:
        verdict.violations.append(Violation(stage=1, offset=e.offset, code=e.code, detail=e.detail))
        logger.info(f"Stage 1 aborted: {e}")
        return verdict

    verdict.reachable_offsets = r.offsets()
    verdict.stats = VerdictStats(
        reachable_count=len(r.instrs),
        cfi_label_count=sum(1 for i in r.instrs.values() if i.klass is InstrClass.CFI_LABEL),
        guard_count=len(r.pseudos_of(PseudoKind.MEM_GUARD)),
        cfi_guard_count=len(r.pseudos_of(PseudoKind.CFI_GUARD)),
    )

    for stage, check in ((2, stage2_instruction_set), (3, stage3_control)):
        verdict.stages_run.append(stage)
        verdict.violations.extend(check(r))
        if verdict.violations:
            logger.info(f"Stage {stage} rejected the image: {', '.join(verdict.codes())}")
            return verdict

    verdict.stages_run.append(4)
    cfg = build_cfg(r)
    facts = range_analysis(cfg, r, confine_loads=confine_loads)
    verdict.violations.extend(stage4_memory(r, facts, confine_loads, verdict.stats))
    verdict.accepted = not verdict.violations
    logger.info(
        f"Verdict: {'accepted' if verdict.accepted else 'rejected'} "
        f"({len(r.instrs)} reachable, {verdict.stats.guard_count} guards, "
        f"{verdict.stats.eliminated_guard_equiv} fact-justified)"
    )
    return verdict
