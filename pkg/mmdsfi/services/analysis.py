"""
Control-flow graph and interval range analysis over a reachable-instruction set.

Facts are deviations of a register from the executing domain's region D:
Dev(lo, hi) means D.begin + lo <= value <= (D.end - 1) + hi.
"""
import logging
import random
from collections import deque
from typing import Dict, List, Mapping, Optional, Set, Tuple

import networkx as nx

from mmdsfi.config.settings import GUARD_SIZE
from mmdsfi.models.analysis import ROOT, RangeFact, ReachableSet, join_all
from mmdsfi.models.isa import Imm, InstrClass, Instruction, MemForm, PseudoInstr, PseudoKind, Reg
from mmdsfi.services.isa import CALLS, DIRECT_TRANSFERS, UNCONDITIONAL, recognize_pseudo, written_registers

logger = logging.getLogger(__name__)


def find_pseudos(instrs: Mapping[int, Instruction]) -> Dict[int, PseudoInstr]:
    """Recognize every mem_guard / cfi_guard / cfi_label that starts at a member of `instrs`."""
    pseudos = {}
    for offset in sorted(instrs):
        run = [instrs[offset]]
        while len(run) < 3 and run[-1].end in instrs:
            run.append(instrs[run[-1].end])
        pseudo = recognize_pseudo(run, 0)
        if pseudo is not None:
            pseudos[offset] = pseudo
    return pseudos


def build_cfg(r: ReachableSet) -> nx.DiGraph:
    """Nodes are instruction offsets plus ROOT; edges carry kind fall / branch / entry."""
    g = nx.DiGraph()
    g.add_node(ROOT)
    for offset, instr in r.instrs.items():
        g.add_node(offset)
        if instr.klass is InstrClass.CFI_LABEL:
            g.add_edge(ROOT, offset, kind="entry")
        if instr.klass in DIRECT_TRANSFERS and instr.rel_target in r.instrs:
            g.add_edge(offset, instr.rel_target, kind="branch")
        if instr.klass not in UNCONDITIONAL and instr.end in r.instrs:
            # a branch target equal to the fallthrough keeps the fall kind
            g.add_edge(offset, instr.end, kind="fall")
    return g


class _Context:
    """Per-image lookups the transfer function needs."""

    def __init__(self, r: ReachableSet, confine_loads: bool):
        self.confine_loads = confine_loads
        self.guard_uppers = {}
        self.guard_loads: Set[int] = set()
        for pseudo in r.pseudos.values():
            if pseudo.kind is PseudoKind.MEM_GUARD:
                self.guard_uppers[pseudo.upper.address] = pseudo.guarded_operand
            elif pseudo.kind is PseudoKind.CFI_GUARD:
                self.guard_loads.add(pseudo.load.address)

    def polices(self, instr: Instruction) -> bool:
        if instr.klass is InstrClass.STORE:
            return True
        return instr.klass is InstrClass.LOAD and self.confine_loads and instr.address not in self.guard_loads


def transfer(instr: Instruction, fact: RangeFact, ctx: _Context) -> RangeFact:
    k = instr.klass
    if k is InstrClass.CFI_LABEL:
        return RangeFact.top()

    guarded = ctx.guard_uppers.get(instr.address)
    if guarded is not None:
        if guarded.form is MemForm.BASE_DISP:
            fact = fact.meet_reg(guarded.base, (-guarded.disp, -guarded.disp))
        return fact

    if k in (InstrClass.LOAD, InstrClass.STORE):
        mem = instr.mem
        if ctx.polices(instr) and mem.form is MemForm.BASE_DISP and abs(mem.disp) <= GUARD_SIZE:
            fact = fact.set(mem.base, (-mem.disp, -mem.disp))
        if k is InstrClass.LOAD:
            fact = fact.set(instr.operands[0], None)
        return fact
    if k is InstrClass.PUSH or k in CALLS:
        return fact.set(Reg.RSP, (0, 0))
    if k is InstrClass.POP:
        return fact.set(Reg.RSP, (8, 8)).set(instr.operands[0], None)
    if k is InstrClass.ALU and instr.mnemonic in ("add", "sub") and isinstance(instr.operands[1], Imm):
        dst, imm = instr.operands
        return fact.shift(dst, imm.value if instr.mnemonic == "add" else -imm.value)
    if k is InstrClass.LEA:
        dst, mem = instr.operands
        if mem.form is MemForm.BASE_DISP:
            src = fact[mem.base]
            return fact.set(dst, None if src is None else (src[0] + mem.disp, src[1] + mem.disp))
        return fact.set(dst, None)
    if k is InstrClass.MOV_REG_REG:
        dst, src = instr.operands
        return fact.set(dst, fact[src])

    for reg in written_registers(instr):
        fact = fact.set(reg, None)
    return fact


def _successors(cfg: nx.DiGraph, node: int) -> List[int]:
    return sorted(cfg.successors(node))


def range_analysis(
    cfg: nx.DiGraph,
    r: ReachableSet,
    confine_loads: bool = True,
    order_seed: Optional[int] = None,
) -> Dict[int, RangeFact]:
    """Least fixpoint of the transfer functions; returns the fact holding BEFORE each instruction.

    With `order_seed` the worklist is drained in a seeded random order instead of FIFO.
    """
    ctx = _Context(r, confine_loads)
    rng = random.Random(order_seed) if order_seed is not None else None
    in_facts: Dict[int, RangeFact] = {}
    out_facts: Dict[int, RangeFact] = {ROOT: RangeFact.top()}

    worklist = deque(_successors(cfg, ROOT))
    queued = set(worklist)
    steps = 0
    while worklist:
        if rng is not None:
            idx = rng.randrange(len(worklist))
            worklist.rotate(-idx)
        node = worklist.popleft()
        queued.discard(node)
        steps += 1
        new_in = join_all(out_facts[p] for p in cfg.predecessors(node) if p in out_facts)
        if new_in is None:
            continue
        if node in in_facts and in_facts[node] == new_in:
            continue
        in_facts[node] = new_in
        new_out = transfer(r.instrs[node], new_in, ctx)
        if out_facts.get(node) == new_out:
            continue
        out_facts[node] = new_out
        for succ in _successors(cfg, node):
            if succ not in queued:
                worklist.append(succ)
                queued.add(succ)
    logger.debug(f"Range analysis converged after {steps} node visits over {len(r.instrs)} instructions")
    return in_facts


def range_analysis_exhaustive(cfg: nx.DiGraph, r: ReachableSet, confine_loads: bool = True) -> Dict[int, RangeFact]:
    """Round-robin iteration over every node until nothing changes."""
    ctx = _Context(r, confine_loads)
    in_facts: Dict[int, RangeFact] = {}
    out_facts: Dict[int, RangeFact] = {ROOT: RangeFact.top()}
    nodes = sorted(n for n in cfg.nodes if n != ROOT)
    changed = True
    while changed:
        changed = False
        for node in nodes:
            new_in = join_all(out_facts[p] for p in cfg.predecessors(node) if p in out_facts)
            if new_in is None or in_facts.get(node) == new_in:
                continue
            in_facts[node] = new_in
            out_facts[node] = transfer(r.instrs[node], new_in, ctx)
            changed = True
    return in_facts


def access_within_guard(fact: RangeFact, base: Reg, disp: int) -> bool:
    """True when [base+disp] is provably inside D or one guard size around it."""
    dev = fact[base]
    if dev is None:
        return False
    return dev[0] + disp >= -GUARD_SIZE and dev[1] + disp <= GUARD_SIZE


def natural_loops(cfg: nx.DiGraph) -> List[Tuple[int, Set[int]]]:
    """(header, body) for every back edge whose target dominates its source."""
    idom = nx.immediate_dominators(cfg, ROOT)
    loops: Dict[int, Set[int]] = {}
    for src, dst in cfg.edges:
        if ROOT in (src, dst) or src not in idom or dst not in idom:
            continue
        if _dominates(idom, dst, src):
            body = loops.setdefault(dst, {dst})
            stack = [src]
            while stack:
                node = stack.pop()
                if node in body:
                    continue
                body.add(node)
                stack.extend(p for p in cfg.predecessors(node) if p != ROOT)
    return sorted(loops.items())


def _dominates(idom: Mapping[int, int], a: int, b: int) -> bool:
    node = b
    while True:
        if node == a:
            return True
        parent = idom.get(node)
        if parent is None or parent == node:
            return False
        node = parent
