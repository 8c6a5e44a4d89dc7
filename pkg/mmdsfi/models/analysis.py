from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Set, Tuple

from mmdsfi.config.settings import GUARD_SIZE
from mmdsfi.models.isa import Instruction, PseudoInstr, PseudoKind, Reg

# Dev(lo, hi) is a (lo, hi) pair; None is Top
Dev = Tuple[int, int]

NUM_REGS = 16
ROOT = -1  # virtual CFG root


def dev_ok(lo: int, hi: int) -> bool:
    return -GUARD_SIZE <= lo <= hi <= GUARD_SIZE


def clamp(dev: Optional[Dev]) -> Optional[Dev]:
    """Widen to Top anything that leaves one guard size."""
    if dev is None or not dev_ok(*dev):
        return None
    return dev


@dataclass(frozen=True)
class RangeFact:
    regs: Tuple[Optional[Dev], ...] = (None,) * NUM_REGS

    @classmethod
    def top(cls) -> "RangeFact":
        return cls()

    def __getitem__(self, reg: Reg) -> Optional[Dev]:
        return self.regs[reg]

    def set(self, reg: Reg, dev: Optional[Dev]) -> "RangeFact":
        regs = list(self.regs)
        regs[reg] = clamp(dev)
        return replace(self, regs=tuple(regs))

    def shift(self, reg: Reg, delta: int) -> "RangeFact":
        dev = self.regs[reg]
        return self.set(reg, None if dev is None else (dev[0] + delta, dev[1] + delta))

    def meet_reg(self, reg: Reg, dev: Dev) -> "RangeFact":
        """Intersect; an empty intersection falls back to `dev` (the code after it is dead)."""
        prior = self.regs[reg]
        if prior is None:
            return self.set(reg, dev)
        lo, hi = max(prior[0], dev[0]), min(prior[1], dev[1])
        return self.set(reg, (lo, hi) if lo <= hi else dev)

    def join(self, other: "RangeFact") -> "RangeFact":
        regs = []
        for a, b in zip(self.regs, other.regs):
            if a is None or b is None:
                regs.append(None)
            else:
                regs.append(clamp((min(a[0], b[0]), max(a[1], b[1]))))
        return RangeFact(tuple(regs))

    def leq(self, other: "RangeFact") -> bool:
        for a, b in zip(self.regs, other.regs):
            if b is None:
                continue
            if a is None or a[0] < b[0] or a[1] > b[1]:
                return False
        return True

    def known(self) -> Dict[Reg, Dev]:
        return {Reg(i): dev for i, dev in enumerate(self.regs) if dev is not None}

    def __str__(self) -> str:
        known = self.known()
        if not known:
            return "{}"
        return "{" + ", ".join(f"{reg}: Dev({lo},{hi})" for reg, (lo, hi) in known.items()) + "}"


def join_all(facts: Iterable[RangeFact]) -> Optional[RangeFact]:
    out: Optional[RangeFact] = None
    for fact in facts:
        out = fact if out is None else out.join(fact)
    return out


@dataclass
class ReachableSet:
    """Instructions reachable from the cfi_labels, plus recognized pseudo-instructions."""
    instrs: Dict[int, Instruction] = field(default_factory=dict)
    pseudos: Dict[int, PseudoInstr] = field(default_factory=dict)
    entry_labels: Set[int] = field(default_factory=set)
    code_size: int = 0

    def offsets(self) -> List[int]:
        return sorted(self.instrs)

    def next_of(self, instr: Instruction) -> Optional[Instruction]:
        return self.instrs.get(instr.end)

    def pseudos_of(self, kind: PseudoKind) -> List[PseudoInstr]:
        return [p for _, p in sorted(self.pseudos.items()) if p.kind is kind]
