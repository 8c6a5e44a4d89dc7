"""
Execution monitor: runs an image under the LibOS and asserts the two security policies
on every step, as a runtime oracle for the verifier.
"""
import logging
import random
from typing import Dict, List, Optional, Sequence, Set

from mmdsfi.models.analysis import RangeFact
from mmdsfi.models.image import SipbImage
from mmdsfi.models.isa import Instruction, Reg
from mmdsfi.models.runtime import MonitorAssertion, MonitorReport, Region, SipState
from mmdsfi.models.verdict import Verdict
from mmdsfi.services.isa import MAGIC
from mmdsfi.services.libos import LibOS
from mmdsfi.services.machine import MachineObserver
from mmdsfi.services.verifier import reachable_with_facts, verify

logger = logging.getLogger(__name__)

FETCH_OUTSIDE_C = "FETCH_OUTSIDE_C"
ACCESS_OUTSIDE_D = "ACCESS_OUTSIDE_D"
INDIRECT_NOT_LABEL = "INDIRECT_NOT_LABEL"
FETCH_NOT_IN_R = "FETCH_NOT_IN_R"
FACT_UNSOUND = "FACT_UNSOUND"
LIBOS_CORRUPTED = "LIBOS_CORRUPTED"

# stop recording after this many assertions in one run
MAX_ASSERTIONS = 100


def _registers(sip: SipState) -> Dict[str, str]:
    state = {str(Reg(i)): f"{v:#x}" for i, v in enumerate(sip.regs)}
    state["pc"] = f"{sip.pc:#x}"
    return state


class PolicyMonitor(MachineObserver):
    def __init__(
        self,
        confine_loads: bool = True,
        reachable: Optional[Set[int]] = None,
        facts: Optional[Dict[int, RangeFact]] = None,
        image_index: int = 0,
    ):
        self.confine_loads = confine_loads
        self.reachable = reachable
        self.facts = facts
        self.image_index = image_index
        self.assertions: List[MonitorAssertion] = []
        self.memory = None

    def _fail(self, kind: str, sip: SipState, detail: str):
        if len(self.assertions) < MAX_ASSERTIONS:
            self.assertions.append(MonitorAssertion(kind=kind, pid=sip.pid, pc=sip.pc, detail=detail, registers=_registers(sip)))

    def before_step(self, sip: SipState, region: Region, instr: Instruction):
        layout = sip.domain
        pc = sip.pc
        if not layout.in_c(pc):
            self._fail(FETCH_OUTSIDE_C, sip, f"fetch at {pc:#x} outside [{layout.c_begin:#x}, {layout.c_end:#x})")
            return
        if sip.image_index != self.image_index or pc >= layout.trampoline:
            return
        offset = pc - layout.c_begin
        if self.reachable is not None and offset not in self.reachable:
            self._fail(FETCH_NOT_IN_R, sip, f"offset {offset:#x} is not in R")
        if self.facts is not None and offset in self.facts:
            for reg, (lo, hi) in self.facts[offset].known().items():
                value = sip.regs[reg]
                if not layout.d_begin + lo <= value <= layout.d_end - 1 + hi:
                    self._fail(FACT_UNSOUND, sip, f"{reg}={value:#x} violates Dev({lo},{hi}) at offset {offset:#x}")

    def after_access(self, sip: SipState, instr: Instruction, addr: int, is_store: bool, carve_out: bool):
        if carve_out or not (is_store or self.confine_loads):
            return
        if not sip.domain.in_d(addr, 8):
            kind = "store" if is_store else "load"
            self._fail(ACCESS_OUTSIDE_D, sip, f"{kind} at {addr:#x} outside D of domain {sip.domain.domain_id}")

    def after_indirect(self, sip: SipState, instr: Instruction, target: int):
        expected = MAGIC + sip.domain.domain_id.to_bytes(4, "little")
        landed = self.memory.peek(target, 8) if self.memory is not None else None
        if landed != expected:
            self._fail(INDIRECT_NOT_LABEL, sip, f"{instr.mnemonic} to {target:#x} which is not a cfi_label of this domain")


def _analysis_for(image: SipbImage, confine_loads: bool, verdict: Optional[Verdict]):
    """R and range facts, only for images the verifier accepts."""
    own = verify(image, confine_loads)
    if not own.accepted:
        reachable = set(verdict.reachable_offsets) if verdict is not None and verdict.accepted else None
        return reachable, None
    _, _, facts = reachable_with_facts(image, confine_loads)
    reachable = set(verdict.reachable_offsets if verdict is not None else own.reachable_offsets)
    return reachable, facts


def monitor_run(
    image: SipbImage,
    inputs: bytes = b"",
    extra_images: Sequence[SipbImage] = (),
    verdict: Optional[Verdict] = None,
    confine_loads: bool = True,
    seed: Optional[int] = None,
    trace: bool = False,
    max_steps: Optional[int] = None,
    analysis=None,
) -> MonitorReport:
    """Run `image` (verified or not) with every policy assertion armed."""
    reachable, facts = analysis if analysis is not None else _analysis_for(image, confine_loads, verdict)
    observer = PolicyMonitor(confine_loads, reachable, facts)
    libos = LibOS(
        [image, *extra_images],
        stdin=inputs,
        seed=seed,
        confine_loads=confine_loads,
        verify_images=False,
        trace=trace,
        observer=observer,
        max_steps=max_steps,
    )
    observer.memory = libos.memory
    report = libos.run(0)
    if not report.libos_intact:
        observer.assertions.append(MonitorAssertion(kind=LIBOS_CORRUPTED, pid=0, pc=0, detail="LibOS canary changed"))
    if observer.assertions:
        logger.warning(f"Monitor recorded {len(observer.assertions)} policy assertions; first: {observer.assertions[0].kind}")
    return MonitorReport(runs=1, assertions=observer.assertions, report=report)


def fuzz_inputs(count: int, seed: int = 0, max_len: int = 64) -> List[bytes]:
    rng = random.Random(seed)
    return [bytes(rng.randrange(256) for _ in range(rng.randrange(max_len + 1))) for _ in range(count)]


def monitor_fuzz(
    image: SipbImage,
    count: int,
    seed: int = 0,
    inputs: bytes = b"",
    extra_images: Sequence[SipbImage] = (),
    verdict: Optional[Verdict] = None,
    confine_loads: bool = True,
    max_steps: Optional[int] = None,
) -> MonitorReport:
    """The given inputs first, then `count` seeded random stdin vectors."""
    analysis = _analysis_for(image, confine_loads, verdict)
    total = monitor_run(image, inputs, extra_images, verdict, confine_loads, seed, max_steps=max_steps, analysis=analysis)
    for vector in fuzz_inputs(count, seed):
        run = monitor_run(image, vector, extra_images, verdict, confine_loads, seed, max_steps=max_steps, analysis=analysis)
        total.runs += 1
        total.assertions.extend(run.assertions)
    logger.info(f"Fuzzed {count} input vectors: {len(total.assertions)} assertions")
    return total
