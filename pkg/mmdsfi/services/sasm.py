"""
Parser for SASM, the line-oriented assembly dialect fed to the instrumenter.

Source mode (.sasm) accepts only what a compiler would emit for the subset; raw mode (.s)
additionally allows the scratch registers, bound registers, pseudo-ops, fixed addresses,
dangerous instructions and `.byte` inside code, and assembles exactly what is written.
"""
import ast
import logging
import re
import struct
from typing import Dict, List, Optional, Set, Tuple

from mmdsfi.errors import (
    DuplicateLabel,
    ReservedRegister,
    SasmSyntaxError,
    UndefinedLabel,
    UnknownMnemonic,
)
from mmdsfi.models.isa import Bnd, Imm, MemForm, MemOperand, Reg
from mmdsfi.models.sasm import (
    AddrOf,
    DataBlob,
    Label,
    LabelRef,
    SasmFunction,
    SasmInstr,
    SasmOperand,
    SasmProgram,
)

logger = logging.getLogger(__name__)

RESERVED = {Reg.R10, Reg.R11}

_IDENT = r"[A-Za-z_][A-Za-z0-9_]*"
_NUM = r"-?(?:0[xX][0-9a-fA-F]+|[0-9]+)"
_FUNC_RE = re.compile(rf"^func\s+({_IDENT})\s*:$")
_LABEL_RE = re.compile(rf"^({_IDENT})\s*:$")
_ENTRY_RE = re.compile(rf"^\.entry\s+({_IDENT})$")
_DATA_RE = re.compile(rf"^\.data\s+({_IDENT})\s*:\s*(quad|bytes|zero)\b\s*(.*)$")
_NUM_RE = re.compile(rf"^{_NUM}$")
_BND_RE = re.compile(r"^bnd([0-3])$")
_TERM_RE = re.compile(r"([+-]?)\s*([^+-]+)")

SCALES = {1, 2, 4, 8}

# operand kinds: R register, I immediate, M memory, L label, A address-of, B bound register
SHAPES: Dict[str, Set[Tuple[str, ...]]] = {
    "mov": {("R", "R"), ("R", "I"), ("R", "M"), ("M", "R"), ("R", "A")},
    "lea": {("R", "M")},
    "add": {("R", "R"), ("R", "I")},
    "sub": {("R", "R"), ("R", "I")},
    "and": {("R", "R")},
    "or": {("R", "R")},
    "xor": {("R", "R")},
    "cmp": {("R", "R")},
    "push": {("R",)},
    "pop": {("R",)},
    "jmp": {("L",), ("R",), ("M",)},
    "call": {("L",), ("R",), ("M",)},
    "je": {("L",)},
    "jne": {("L",)},
    "jl": {("L",)},
    "jge": {("L",)},
    "ret": {()},
    "nop": {()},
    "syscall": {()},
}

RAW_SHAPES: Dict[str, Set[Tuple[str, ...]]] = {
    "nop": {(), ("M",)},
    "bndcl": {("B", "R"), ("B", "M")},
    "bndcu": {("B", "R"), ("B", "M")},
    "mem_guard": {("M",)},
    "cfi_guard": {("R", "R")},
    "cfi_label": {(), ("I",)},
    "enclu": {()},
    "xrstor": {("M",)},
    "wrfsbase": {("R",)},
    "wrgsbase": {("R",)},
    "bndmk": {("B", "M")},
    "bndmov": {("B", "B"), ("B", "M")},
}


def _kind(op: SasmOperand) -> str:
    if isinstance(op, Reg):
        return "R"
    if isinstance(op, Imm):
        return "I"
    if isinstance(op, MemOperand):
        return "M"
    if isinstance(op, LabelRef):
        return "L"
    if isinstance(op, AddrOf):
        return "A"
    return "B"


def parse_int(text: str, line: int) -> int:
    if not _NUM_RE.match(text):
        raise SasmSyntaxError(f"bad number {text!r}", line)
    return int(text, 0)


def _strip_comment(text: str) -> str:
    quoted = False
    for i, ch in enumerate(text):
        if ch == '"' and (i == 0 or text[i - 1] != "\\"):
            quoted = not quoted
        elif ch == "#" and not quoted:
            return text[:i]
    return text


def _split_operands(text: str, line: int) -> List[str]:
    parts, depth, current = [], 0, ""
    quoted = False
    for i, ch in enumerate(text):
        if ch == '"' and (i == 0 or text[i - 1] != "\\"):
            quoted = not quoted
        if not quoted:
            if ch == "[":
                depth += 1
            elif ch == "]":
                depth -= 1
            if depth < 0:
                raise SasmSyntaxError("unbalanced ']'", line)
        if ch == "," and depth == 0 and not quoted:
            parts.append(current.strip())
            current = ""
        else:
            current += ch
    if depth != 0:
        raise SasmSyntaxError("unbalanced '['", line)
    if current.strip():
        parts.append(current.strip())
    elif parts:
        raise SasmSyntaxError("empty operand", line)
    return parts


class SasmParser:
    """One parse of one program text."""

    def __init__(self, text: str, raw: bool = False):
        self.text = text
        self.raw = raw
        self.program = SasmProgram(raw=raw)
        self.current: Optional[SasmFunction] = None
        self.entry: Optional[Tuple[str, int]] = None
        self.definitions: Dict[str, int] = {}

    # operands ------------------------------------------------------------

    def _register(self, name: str, line: int) -> Optional[Reg]:
        try:
            reg = Reg[name.upper()]
        except KeyError:
            return None
        if reg in RESERVED and not self.raw:
            raise ReservedRegister(f"{name} is reserved for the toolchain", line)
        return reg

    def _memory(self, inner: str, line: int) -> MemOperand:
        inner = inner.strip()
        if not inner:
            raise SasmSyntaxError("empty memory operand", line)
        lowered = inner.lower().replace(" ", "")
        fixed = lowered.startswith("rip") or lowered.startswith("moffs") or _NUM_RE.match(lowered)
        if fixed and not self.raw:
            raise SasmSyntaxError(f"fixed address [{inner}] is not expressible in source", line)
        if lowered.startswith("moffs"):
            return MemOperand(MemForm.DIRECT_OFFSET, disp=parse_int(inner.strip()[5:].strip(), line), disp_size=8)
        if _NUM_RE.match(lowered):
            return MemOperand(MemForm.DIRECT_OFFSET, disp=parse_int(lowered, line), disp_size=4)
        if lowered.startswith("rip"):
            rest = lowered[3:]
            disp = parse_int(rest.lstrip("+"), line) if rest else 0
            return MemOperand(MemForm.RIP_RELATIVE, disp=disp, disp_size=4)

        base: Optional[Reg] = None
        index: Optional[Reg] = None
        scale = 1
        disp = 0
        for sign, term in _TERM_RE.findall(lowered):
            term = term.strip()
            if _NUM_RE.match(term):
                disp += -parse_int(term, line) if sign == "-" else parse_int(term, line)
                continue
            if sign == "-":
                raise SasmSyntaxError(f"register {term} cannot be subtracted", line)
            if "*" in term:
                name, _, factor = term.partition("*")
                reg = self._register(name, line)
                if reg is None or index is not None:
                    raise SasmSyntaxError(f"bad index term {term!r}", line)
                scale = parse_int(factor, line)
                if scale not in SCALES:
                    raise SasmSyntaxError(f"scale must be 1, 2, 4 or 8, not {scale}", line)
                index = reg
                continue
            reg = self._register(term, line)
            if reg is None:
                raise SasmSyntaxError(f"bad memory term {term!r}", line)
            if base is None:
                base = reg
            elif index is None:
                index = reg
            else:
                raise SasmSyntaxError(f"too many registers in [{inner}]", line)
        if base is None:
            raise SasmSyntaxError(f"memory operand [{inner}] needs a base register", line)
        if index == Reg.RSP:
            raise SasmSyntaxError("rsp cannot be an index register", line)
        if not -(1 << 31) <= disp < (1 << 31):
            raise SasmSyntaxError(f"displacement {disp} does not fit 32 bits", line)
        return MemOperand.at(base, disp, index, scale)

    def _operand(self, text: str, line: int) -> SasmOperand:
        if text.startswith("[") and text.endswith("]"):
            return self._memory(text[1:-1], line)
        if text.startswith("&"):
            name = text[1:].strip()
            if not re.match(rf"^{_IDENT}$", name):
                raise SasmSyntaxError(f"bad label {name!r}", line)
            return AddrOf(name)
        if _NUM_RE.match(text):
            value = int(text, 0)
            if not -(1 << 63) <= value < (1 << 64):
                raise SasmSyntaxError(f"immediate {text} does not fit 64 bits", line)
            return Imm(value - (1 << 64) if value >= 1 << 63 else value)
        bnd = _BND_RE.match(text.lower())
        if bnd:
            if not self.raw:
                raise ReservedRegister(f"{text} is reserved for the toolchain", line)
            return Bnd(int(bnd.group(1)))
        reg = self._register(text, line)
        if reg is not None:
            return reg
        if re.match(rf"^{_IDENT}$", text):
            return LabelRef(text)
        raise SasmSyntaxError(f"bad operand {text!r}", line)

    # lines ---------------------------------------------------------------

    def _define(self, name: str, line: int) -> None:
        if name in self.definitions:
            raise DuplicateLabel(f"{name} already defined on line {self.definitions[name]}", line)
        self.definitions[name] = line

    def _data(self, name: str, kind: str, rest: str, line: int) -> None:
        self._define(name, line)
        if kind == "zero":
            size = parse_int(rest.strip(), line)
            if size < 0:
                raise SasmSyntaxError("negative size", line)
            data = bytes(size)
        elif kind == "quad":
            out = bytearray()
            for item in _split_operands(rest, line):
                if item.startswith("&"):
                    raise SasmSyntaxError("addresses cannot be stored in .data", line)
                value = parse_int(item, line)
                out += struct.pack("<Q", value & (2**64 - 1))
            data = bytes(out)
        else:
            out = bytearray()
            for item in _split_operands(rest, line):
                if item.startswith('"'):
                    try:
                        out += ast.literal_eval(item).encode("latin-1")
                    except (ValueError, SyntaxError):
                        raise SasmSyntaxError(f"bad string {item}", line)
                else:
                    value = parse_int(item, line)
                    if not 0 <= value <= 255:
                        raise SasmSyntaxError(f"byte {value} out of range", line)
                    out.append(value)
            data = bytes(out)
        self.program.data.append(DataBlob(name, data, line))

    def _instruction(self, text: str, line: int) -> SasmInstr:
        mnemonic, _, rest = text.partition(" ")
        mnemonic = mnemonic.lower()
        if mnemonic == ".byte":
            if not self.raw:
                raise SasmSyntaxError(".byte is only allowed in raw assembly", line)
            values = [parse_int(v, line) for v in _split_operands(rest, line)]
            if not values or any(not 0 <= v <= 255 for v in values):
                raise SasmSyntaxError(".byte needs values in 0..255", line)
            return SasmInstr(".byte", tuple(Imm(v) for v in values), line)
        shapes = SHAPES.get(mnemonic, set())
        if self.raw:
            shapes = shapes | RAW_SHAPES.get(mnemonic, set())
        if not shapes:
            raise UnknownMnemonic(f"unknown mnemonic {mnemonic!r}", line)
        operands = tuple(self._operand(o, line) for o in _split_operands(rest.strip(), line))
        shape = tuple(_kind(op) for op in operands)
        if shape not in shapes:
            raise SasmSyntaxError(f"bad operands for {mnemonic}: {rest.strip() or '(none)'}", line)
        if mnemonic in ("add", "sub") and shape == ("R", "I") and not -(1 << 31) <= operands[1].value < (1 << 31):
            raise SasmSyntaxError(f"immediate {operands[1].value} does not fit 32 bits", line)
        return SasmInstr(mnemonic, operands, line)

    def parse(self) -> SasmProgram:
        for line, raw_line in enumerate(self.text.splitlines(), start=1):
            text = _strip_comment(raw_line).strip()
            if not text:
                continue
            m = _FUNC_RE.match(text)
            if m:
                self._define(m.group(1), line)
                self.current = SasmFunction(m.group(1), line=line)
                self.program.functions.append(self.current)
                continue
            m = _ENTRY_RE.match(text)
            if m:
                self.entry = (m.group(1), line)
                continue
            if text.startswith(".data"):
                m = _DATA_RE.match(text)
                if not m:
                    raise SasmSyntaxError(f"bad data directive {text!r}", line)
                self._data(m.group(1), m.group(2), m.group(3), line)
                continue
            m = _LABEL_RE.match(text)
            if m:
                if self.current is None:
                    raise SasmSyntaxError("label outside a function", line)
                self._define(m.group(1), line)
                self.current.body.append(Label(m.group(1), line))
                continue
            if self.current is None:
                raise SasmSyntaxError("instruction outside a function", line)
            self.current.body.append(self._instruction(text, line))

        if not self.program.functions:
            raise SasmSyntaxError("program has no functions")
        self._resolve()
        return self.program

    def _resolve(self) -> None:
        code = set(self.program.code_labels())
        data = set(self.program.data_labels())
        for func in self.program.functions:
            for item in func.instructions():
                for op in item.operands:
                    if isinstance(op, LabelRef):
                        if op.name in data:
                            raise SasmSyntaxError(f"{op.name} is data, not a branch target", item.line)
                        if op.name not in code:
                            raise UndefinedLabel(f"undefined label {op.name}", item.line)
                    elif isinstance(op, AddrOf) and op.name not in code and op.name not in data:
                        raise UndefinedLabel(f"undefined label {op.name}", item.line)
        if self.entry is not None:
            name, line = self.entry
            valid = code if self.raw else {f.name for f in self.program.functions}
            if name not in valid:
                raise UndefinedLabel(f"entry {name} is not a {'label' if self.raw else 'function'}", line)
            self.program.entry = name
        elif self.program.function("main") is not None:
            self.program.entry = "main"
        else:
            self.program.entry = self.program.functions[0].name


def parse_sasm(text: str, raw: bool = False) -> SasmProgram:
    program = SasmParser(text, raw=raw).parse()
    logger.debug(
        f"Parsed {len(program.functions)} functions and {len(program.data)} data blobs (entry {program.entry})"
    )
    return program
