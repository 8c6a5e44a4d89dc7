import pytest

from mmdsfi.errors import (
    DuplicateLabel,
    ReservedRegister,
    SasmSyntaxError,
    UndefinedLabel,
    UnknownMnemonic,
)
from mmdsfi.models.isa import Imm, MemForm, MemOperand, Reg
from mmdsfi.models.sasm import AddrOf, Label, LabelRef
from mmdsfi.services.assembler import layout_data
from mmdsfi.services.sasm import parse_sasm


def test_parses_functions_labels_and_operands():
    p = parse_sasm(
        """
# a comment
func main:
    mov rax, 1            # trailing comment
    mov [r8+rcx*8-16], rax
    mov rbx, &helper
loop:
    jne loop
func helper:
    ret
"""
    )
    assert p.entry == "main"
    assert [f.name for f in p.functions] == ["main", "helper"]
    body = p.functions[0].body
    assert body[0].operands == (Reg.RAX, Imm(1))
    mem = body[1].operands[0]
    assert mem == MemOperand.at(Reg.R8, -16, Reg.RCX, 8)
    assert mem.form is MemForm.BASE_INDEX_DISP
    assert body[2].operands[1] == AddrOf("helper")
    assert body[3] == Label("loop", 7)
    assert body[4].operands == (LabelRef("loop"),)


def test_data_directives_are_laid_out_aligned():
    p = parse_sasm(
        """
.data msg: bytes "a#b\\n", 0
.data nums: quad 1, -1
.data buf: zero 3
func main:
    mov rsi, &msg
"""
    )
    data, offsets = layout_data(p)
    assert offsets == {"msg": 0, "nums": 8, "buf": 24}
    assert data[:5] == b"a#b\n\x00"
    assert data[16:24] == b"\xff" * 8
    assert len(data) == 27


def test_entry_directive():
    p = parse_sasm("func a:\n    nop\nfunc b:\n    nop\n.entry b\n")
    assert p.entry == "b"
    assert parse_sasm("func a:\n    nop\nfunc b:\n    nop\n").entry == "a"


@pytest.mark.parametrize(
    "text, error",
    [
        ("func main:\n    mov r10, 1\n", ReservedRegister),
        ("func main:\n    bndcl bnd0, rax\n", UnknownMnemonic),
        ("func main:\n    hlt\n", UnknownMnemonic),
        ("func main:\nx:\nx:\n    nop\n", DuplicateLabel),
        ("func main:\n    jmp nowhere\n", UndefinedLabel),
        ("func main:\n    mov rax, [rip+8]\n", SasmSyntaxError),
        ("func main:\n    .byte 0x90\n", SasmSyntaxError),
        ("func main:\n    and rax, 1\n", SasmSyntaxError),
        ("func main:\n    add rax, 0x100000000\n", SasmSyntaxError),
        ("func main:\n    mov rax, [rsp*2+rbx]\n", SasmSyntaxError),
        ("    nop\n", SasmSyntaxError),
        (".data d: quad &main\nfunc main:\n    nop\n", SasmSyntaxError),
        ("func main:\n    nop\nfunc other:\n    nop\n.entry inner\n", UndefinedLabel),
    ],
)
def test_source_mode_rejections(text, error):
    with pytest.raises(error):
        parse_sasm(text)


def test_errors_carry_the_line_number():
    with pytest.raises(UnknownMnemonic) as info:
        parse_sasm("func main:\n    nop\n    frobnicate rax\n")
    assert info.value.line == 3
    assert "line 3" in str(info.value)


def test_raw_mode_allows_toolchain_forms():
    p = parse_sasm(
        """
func main:
    cfi_label 5
    mem_guard [r10+8]
    cfi_guard r10, r11
    bndcl bnd1, r11
    mov rax, [moffs 0x1000]
    .byte 0x90, 0x90
inner:
    nop
.entry inner
""",
        raw=True,
    )
    assert p.raw
    assert p.entry == "inner"
    mnemonics = [i.mnemonic for i in p.functions[0].instructions()]
    assert mnemonics == ["cfi_label", "mem_guard", "cfi_guard", "bndcl", "mov", ".byte", "nop"]
    moffs = p.functions[0].instructions()[4].operands[1]
    assert moffs.form is MemForm.DIRECT_OFFSET and moffs.disp == 0x1000
