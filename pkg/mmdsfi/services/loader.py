import logging
import struct
from typing import Optional

from mmdsfi.config import settings
from mmdsfi.errors import CapacityExceeded, VerifyRejected
from mmdsfi.models.image import SipbImage
from mmdsfi.models.isa import Reg
from mmdsfi.models.runtime import Bound, DomainLayout, Region, RegionKind, SipState
from mmdsfi.models.verdict import Verdict
from mmdsfi.services.isa import MAGIC, TRAMPOLINE_SIZE, cfi_label, scan_cfi_labels
from mmdsfi.services.memory import Memory
from mmdsfi.services.verifier import verify

logger = logging.getLogger(__name__)

SYSCALL_GATE = b"\x0f\x05"


def slot_base(domain_id: int) -> int:
    return settings.SLOT_BASE + domain_id * settings.SLOT_SIZE


def label_value(domain_id: int) -> int:
    """The 8-byte little-endian value of a cfi_label carrying `domain_id` (bnd1's bounds)."""
    return struct.unpack("<Q", MAGIC + struct.pack("<I", domain_id))[0]


class Loader:
    """Places images into fresh domain slots and builds their initial SIP state.

    Slot 0 belongs to the LibOS; domain ids start at 1 and are never reused.
    """

    def __init__(self, memory: Memory, verify_images: bool = True, confine_loads: bool = True, rewrite_labels: bool = True):
        self.memory = memory
        self.verify_images = verify_images
        self.rewrite_labels = rewrite_labels
        self.confine_loads = confine_loads
        self.next_domain = 1

    def layout_for(self, img: SipbImage, domain_id: int) -> DomainLayout:
        c_size = len(img.code) + TRAMPOLINE_SIZE
        if c_size > settings.C_CAPACITY:
            raise CapacityExceeded(f"code needs {c_size} bytes, C capacity is {settings.C_CAPACITY}")
        needed = settings.SLOT_LEADING_GAP + c_size + img.d_capacity + 3 * settings.GUARD_SIZE
        if needed > settings.SLOT_SIZE:
            raise CapacityExceeded(f"domain needs {needed} bytes, a slot holds {settings.SLOT_SIZE}")
        c_begin = slot_base(domain_id) + settings.SLOT_LEADING_GAP
        return DomainLayout(domain_id=domain_id, c_begin=c_begin, c_end=c_begin + c_size, d_capacity=img.d_capacity)

    def allocate_domain(self) -> int:
        if self.next_domain >= settings.MAX_DOMAINS:
            raise CapacityExceeded(f"all {settings.MAX_DOMAINS - 1} domain slots are in use")
        domain_id = self.next_domain
        self.next_domain += 1
        return domain_id

    def load(self, img: SipbImage, pid: int, domain_id: Optional[int] = None, image_index: int = 0) -> SipState:
        verdict: Optional[Verdict] = None
        if self.verify_images:
            verdict = verify(img, self.confine_loads)
            if not verdict.accepted:
                raise VerifyRejected(verdict)
        domain_id = self.allocate_domain() if domain_id is None else domain_id
        layout = self.layout_for(img, domain_id)

        code = bytearray(img.code)
        id_bytes = struct.pack("<I", domain_id)
        for offset in scan_cfi_labels(img.code) if self.rewrite_labels else ():
            if offset + 8 <= len(code):
                code[offset + 4:offset + 8] = id_bytes
        code += cfi_label(domain_id).raw + SYSCALL_GATE
        data = bytearray(img.d_capacity)
        data[:len(img.data)] = img.data

        self.memory.map(Region(layout.c_begin, code, RegionKind.CODE, domain_id))
        self.memory.map(Region(layout.d_begin, data, RegionKind.DATA, domain_id))

        sip = SipState(pid=pid, domain=layout, image_index=image_index)
        sip.regs[Reg.RSP] = layout.d_end - 16
        sip.regs[Reg.R14] = layout.trampoline
        sip.pc = layout.c_begin + img.entry
        sip.bnd[0] = Bound(layout.d_begin, layout.d_end - 1)
        value = label_value(domain_id)
        sip.bnd[1] = Bound(value, value)
        logger.info(
            f"Loaded image {image_index} as pid {pid} in domain {domain_id}: "
            f"C=[{layout.c_begin:#x},{layout.c_end:#x}) D=[{layout.d_begin:#x},{layout.d_end:#x})"
        )
        return sip
