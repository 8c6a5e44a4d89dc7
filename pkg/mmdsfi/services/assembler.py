"""
Lays out a SASM program, encodes it and packs it into a SIPB image.

Every instruction form has a fixed size (branches are always rel32, label addresses are
RIP-relative disp32), so one sizing pass fixes every offset. Data labels resolve through
the fixed distance between C and D: the loader places D one guard region after the
trampoline that follows the code.
"""
import logging
import struct
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

from mmdsfi.config import settings
from mmdsfi.errors import ImageTooLarge, MagicCollisionUnresolvable, UnencodableForm, SasmSyntaxError
from mmdsfi.models.image import SipbImage
from mmdsfi.models.isa import Bnd, Imm, MemForm, MemOperand, Reg, Rel
from mmdsfi.models.sasm import AddrOf, Label, LabelRef, SasmFunction, SasmInstr, SasmProgram
from mmdsfi.services.image import check_image
from mmdsfi.services.isa import MAGIC, TRAMPOLINE_SIZE, build, scan_cfi_labels

logger = logging.getLogger(__name__)

DATA_ALIGN = 8

# instructions that must stay glued to the instruction after them
_RSP_WRITERS = {"mov", "lea", "add", "sub", "and", "or", "xor", "pop"}

Position = Tuple[int, int]  # (function index, item index)


@dataclass
class Assembled:
    image: SipbImage
    program: SasmProgram  # after any MAGIC rewrites
    offsets: Dict[Position, int] = field(default_factory=dict)
    sizes: Dict[Position, int] = field(default_factory=dict)
    labels: Dict[str, int] = field(default_factory=dict)
    data_labels: Dict[str, int] = field(default_factory=dict)  # offsets inside D
    magic_rewrites: int = 0

    def position_at(self, offset: int) -> Optional[Position]:
        """The item whose bytes cover `offset`."""
        for pos, start in self.offsets.items():
            if start <= offset < start + self.sizes[pos]:
                return pos
        return None

    def line_map(self) -> Dict[int, Optional[int]]:
        """Code offset -> source line, for items that came from the source."""
        out = {}
        for (fi, ii), offset in sorted(self.offsets.items(), key=lambda kv: kv[1]):
            item = self.program.functions[fi].body[ii]
            if isinstance(item, SasmInstr) and self.sizes[(fi, ii)]:
                out[offset] = item.line
        return out


def data_distance(code_len: int) -> int:
    """D.begin - C.begin for an image with `code_len` bytes of code."""
    return code_len + TRAMPOLINE_SIZE + settings.GUARD_SIZE


def layout_data(program: SasmProgram) -> Tuple[bytes, Dict[str, int]]:
    out = bytearray()
    offsets = {}
    for blob in program.data:
        out += bytes(-len(out) % DATA_ALIGN)
        offsets[blob.name] = len(out)
        out += blob.data
    return bytes(out), offsets


def is_rsp_write(item: SasmInstr) -> bool:
    return item.mnemonic in _RSP_WRITERS and bool(item.operands) and item.operands[0] == Reg.RSP


class _Encoder:
    def __init__(self, labels: Dict[str, int], data_labels: Dict[str, int], code_len: int):
        self.labels = labels
        self.data_labels = data_labels
        self.code_len = code_len

    def _target(self, name: str) -> int:
        if name in self.labels:
            return self.labels[name]
        return data_distance(self.code_len) + self.data_labels[name]

    def encode(self, item: SasmInstr, address: int) -> bytes:
        m, ops = item.mnemonic, item.operands
        if m == ".byte":
            return bytes(op.value for op in ops)
        if m == "mem_guard":
            return build("bndcl", Bnd(0), ops[0]).raw + build("bndcu", Bnd(0), ops[0]).raw
        if m == "cfi_guard":
            target, scratch = ops
            return (
                build("mov", scratch, MemOperand.at(target)).raw
                + build("bndcl", Bnd(1), scratch).raw
                + build("bndcu", Bnd(1), scratch).raw
            )
        if m == "cfi_label":
            return build("cfi_label", domain_id=ops[0].value if ops else 0).raw
        if m == "mov" and isinstance(ops[1], AddrOf):
            # lea reg, [rip+rel32]: 7 bytes
            rel = self._target(ops[1].name) - (address + 7)
            return build("lea", ops[0], MemOperand(MemForm.RIP_RELATIVE, disp=rel, disp_size=4), address=address).raw
        resolved = tuple(Rel(self.labels[op.name]) if isinstance(op, LabelRef) else op for op in ops)
        try:
            return build(m, *resolved, address=address).raw
        except UnencodableForm as e:
            raise SasmSyntaxError(f"{item}: {e}", item.line)


def _encode_program(program: SasmProgram, data_labels: Dict[str, int]):
    # sizing pass: every size is independent of the addresses
    sizer = _Encoder({name: 0 for name in program.code_labels()}, data_labels, 0)
    offsets: Dict[Position, int] = {}
    sizes: Dict[Position, int] = {}
    labels: Dict[str, int] = {}
    pos = 0
    for fi, func in enumerate(program.functions):
        labels[func.name] = pos
        for ii, item in enumerate(func.body):
            offsets[(fi, ii)] = pos
            if isinstance(item, Label):
                labels[item.name] = pos
                sizes[(fi, ii)] = 0
                continue
            size = len(sizer.encode(item, pos))
            sizes[(fi, ii)] = size
            pos += size
    code_len = pos

    encoder = _Encoder(labels, data_labels, code_len)
    code = bytearray()
    for fi, func in enumerate(program.functions):
        for ii, item in enumerate(func.body):
            if isinstance(item, SasmInstr):
                code += encoder.encode(item, offsets[(fi, ii)])
    assert len(code) == code_len
    return bytes(code), offsets, sizes, labels


def _split_constant(value: int) -> Optional[Tuple[int, int]]:
    for i in range(1, 256):
        k = (0x0101010101010101 * i) & (2**64 - 1)
        hi = (value - k) & (2**64 - 1)
        if MAGIC not in struct.pack("<Q", hi) and MAGIC not in struct.pack("<Q", k):
            return hi, k
    return None


def _sticky(item) -> bool:
    if isinstance(item, Label):
        return True
    return item.mnemonic in ("mem_guard", "cfi_guard", "call") or is_rsp_write(item)


def _resolve_collision(program: SasmProgram, asm: "Assembled", offset: int) -> SasmProgram:
    start = asm.position_at(offset)
    end = asm.position_at(offset + len(MAGIC) - 1)
    fi, ii = end if end is not None and end != start else start
    item = program.functions[fi].body[ii]
    functions = [SasmFunction(f.name, list(f.body), f.line) for f in program.functions]
    body = functions[fi].body

    if (fi, ii) == start and isinstance(item, SasmInstr) and item.mnemonic == "mov" and isinstance(item.operands[1], Imm):
        split = _split_constant(item.operands[1].value)
        if split is not None:
            dst = item.operands[0]
            hi, k = split
            body[ii:ii + 1] = [
                SasmInstr("mov", (Reg.R10, Imm(hi)), item.line, item.role),
                SasmInstr("mov", (Reg.R11, Imm(k)), item.line, item.role),
                SasmInstr("lea", (dst, MemOperand.at(Reg.R10, 0, Reg.R11, 1)), item.line, item.role),
            ]
            logger.warning(f"MAGIC inside the constant of line {item.line}; split the immediate")
            return replace(program, functions=functions)

    idx = ii
    while idx > 0 and _sticky(body[idx - 1]):
        idx -= 1
    body.insert(idx, SasmInstr("nop", (), item.line if isinstance(item, SasmInstr) else None, "padding"))
    logger.warning(f"MAGIC at code offset {offset:#x}; inserted a padding nop")
    return replace(program, functions=functions)


def assemble(
    program: SasmProgram,
    d_capacity: Optional[int] = None,
    stack_reserve: Optional[int] = None,
    c_capacity: Optional[int] = None,
    enforce_magic: bool = True,
) -> Assembled:
    """Encode `program`; with `enforce_magic`, MAGIC may appear only at inserted cfi_labels."""
    d_capacity = settings.D_CAPACITY if d_capacity is None else d_capacity
    stack_reserve = settings.STACK_RESERVE if stack_reserve is None else stack_reserve
    c_capacity = settings.C_CAPACITY if c_capacity is None else c_capacity

    data, data_labels = layout_data(program)
    if len(data) + stack_reserve > d_capacity:
        raise ImageTooLarge(f"data ({len(data)}) plus stack ({stack_reserve}) exceeds D capacity {d_capacity}")

    rewrites = 0
    for attempt in range(settings.MAGIC_REWRITE_ATTEMPTS + 1):
        code, offsets, sizes, labels = _encode_program(program, data_labels)
        if len(code) + TRAMPOLINE_SIZE > c_capacity:
            raise ImageTooLarge(f"code ({len(code)} bytes + trampoline) exceeds C capacity {c_capacity}")
        image = SipbImage(
            code=code,
            data=data,
            entry=labels.get(program.entry, 0),
            d_capacity=d_capacity,
            stack_reserve=stack_reserve,
        )
        asm = Assembled(image, program, offsets, sizes, labels, data_labels, rewrites)
        if not enforce_magic:
            return asm
        allowed = {
            offsets[(fi, ii)]
            for fi, func in enumerate(program.functions)
            for ii, item in enumerate(func.body)
            if isinstance(item, SasmInstr) and item.mnemonic == "cfi_label"
        }
        stray = [o for o in scan_cfi_labels(code) if o not in allowed]
        if not stray:
            check_image(image)
            return asm
        if attempt == settings.MAGIC_REWRITE_ATTEMPTS:
            break
        program = _resolve_collision(program, asm, stray[0])
        rewrites += 1
    raise MagicCollisionUnresolvable(f"MAGIC still present after {settings.MAGIC_REWRITE_ATTEMPTS} rewrites")
