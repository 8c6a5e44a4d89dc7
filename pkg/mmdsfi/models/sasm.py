from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

from mmdsfi.models.isa import Operand


@dataclass(frozen=True)
class LabelRef:
    """A code label used as a branch target."""
    name: str

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class AddrOf:
    """`&name`: the address of a code or data label."""
    name: str

    def __str__(self) -> str:
        return f"&{self.name}"


SasmOperand = Union[Operand, LabelRef, AddrOf]

# roles of toolchain-inserted instructions
ROLE_ACCESS_GUARD = "access"  # mem_guard protecting the next access
ROLE_RSP_GUARD = "rsp"  # mandatory guard after an rsp write
ROLE_LOWERING = "lowering"  # part of a lowered transfer
ROLE_HOISTED = "hoisted"  # guard moved in front of a loop


@dataclass(frozen=True)
class SasmInstr:
    mnemonic: str  # subset mnemonic or mem_guard / cfi_guard / cfi_label / .byte
    operands: Tuple[SasmOperand, ...] = ()
    line: Optional[int] = None
    role: Optional[str] = None

    def __str__(self) -> str:
        if not self.operands:
            return self.mnemonic
        return f"{self.mnemonic} {', '.join(str(op) for op in self.operands)}"


@dataclass(frozen=True)
class Label:
    name: str
    line: Optional[int] = None

    def __str__(self) -> str:
        return f"{self.name}:"


Item = Union[Label, SasmInstr]


@dataclass
class SasmFunction:
    name: str
    body: List[Item] = field(default_factory=list)
    line: Optional[int] = None

    def instructions(self) -> List[SasmInstr]:
        return [item for item in self.body if isinstance(item, SasmInstr)]


@dataclass(frozen=True)
class DataBlob:
    name: str
    data: bytes
    line: Optional[int] = None


@dataclass
class SasmProgram:
    functions: List[SasmFunction] = field(default_factory=list)
    data: List[DataBlob] = field(default_factory=list)
    entry: str = "main"
    raw: bool = False  # assembled exactly as written

    def function(self, name: str) -> Optional[SasmFunction]:
        return next((f for f in self.functions if f.name == name), None)

    def code_labels(self) -> List[str]:
        names = []
        for func in self.functions:
            names.append(func.name)
            names.extend(item.name for item in func.body if isinstance(item, Label))
        return names

    def data_labels(self) -> List[str]:
        return [blob.name for blob in self.data]

    def count(self, mnemonic: str) -> int:
        return sum(1 for f in self.functions for i in f.instructions() if i.mnemonic == mnemonic)
