import pytest

from mmdsfi.errors import RspAdjustTooLarge
from mmdsfi.models.isa import MemOperand, Reg
from mmdsfi.models.sasm import ROLE_ACCESS_GUARD, ROLE_RSP_GUARD, AddrOf, Label
from mmdsfi.services.assembler import data_distance
from mmdsfi.services.instrumenter import (
    EXIT_STUB,
    insert_cfi_labels,
    insert_mem_guards,
    lower_unsafe_transfers,
    seal_program,
)
from mmdsfi.services.isa import TRAMPOLINE_SIZE, decode, scan_cfi_labels
from mmdsfi.services.sasm import parse_sasm
from mmdsfi.services.verifier import verify

from tests.conftest import EXIT0


def mnemonics(func):
    return [i.mnemonic for i in func.instructions()]


def mnemonics_of(items):
    return [i.mnemonic for i in items]


def test_cfi_labels_at_entries_and_after_calls():
    p = insert_cfi_labels(parse_sasm("func main:\n    call helper\n    syscall\nfunc helper:\n    ret\n"))
    assert mnemonics(p.function("main")) == ["cfi_label", "call", "cfi_label", "syscall", "cfi_label"]
    assert mnemonics(p.function("helper")) == ["cfi_label", "ret"]


def test_labels_share_a_preceding_cfi_label():
    p = insert_cfi_labels(
        parse_sasm("func main:\nstart:\n    mov rbx, &target\n    nop\ntarget:\n    jmp start\n")
    )
    body = p.function("main").body
    assert body[0] == Label("start", 2)
    assert body[1].mnemonic == "cfi_label"
    idx = body.index(Label("target", 5))
    assert body[idx + 1].mnemonic == "cfi_label"
    assert p.count("cfi_label") == 2


def test_lowering_of_ret_and_indirect_jumps():
    p = lower_unsafe_transfers(parse_sasm("func main:\n    jmp [rbx+8]\n    jmp rax\n    ret\n"))
    body = p.function("main").instructions()
    assert [str(i) for i in body] == [
        "mem_guard [rbx+0x8]",
        "mov r10, [rbx+0x8]",
        "cfi_guard r10, r11",
        "jmp r10",
        "cfi_guard rax, r11",
        "jmp rax",
        "pop r10",
        "cfi_guard r10, r11",
        "jmp r10",
    ]


def test_lowering_of_indirect_call_and_syscall():
    p = lower_unsafe_transfers(parse_sasm("func main:\n    call rax\n    syscall\n"))
    body = p.function("main").body
    assert [str(i) for i in body] == [
        "mov r11, &.Lret0",
        "push r11",
        "cfi_guard rax, r11",
        "jmp rax",
        ".Lret0:",
        "mov r13, &.Lret1",
        "cfi_guard r14, r11",
        "jmp r14",
        ".Lret1:",
    ]
    assert body[0].operands[1] == AddrOf(".Lret0")


def test_stores_and_confined_loads_get_access_guards():
    text = "func main:\n    mov [r8+16], rax\n    mov rbx, [r9]\n"
    confined = insert_mem_guards(parse_sasm(text)).function("main").instructions()
    assert [str(i) for i in confined] == ["mem_guard [r8+0x10]", "mov [r8+0x10], rax", "mem_guard [r9]", "mov rbx, [r9]"]
    assert all(i.role == ROLE_ACCESS_GUARD for i in confined if i.mnemonic == "mem_guard")

    stores_only = insert_mem_guards(parse_sasm(text), confine_loads=False).function("main").instructions()
    assert mnemonics_of(stores_only) == ["mem_guard", "mov", "mov"]


def test_rsp_guard_discipline():
    p = insert_mem_guards(
        parse_sasm("func main:\n    sub rsp, 16\n    push rax\n    sub rsp, 4096\n    mov rax, 1\n    mov rsp, rbx\n")
    )
    body = p.function("main").instructions()
    assert mnemonics_of(body) == ["sub", "push", "sub", "mem_guard", "mov", "mov", "mem_guard"]
    rsp_guards = [i for i in body if i.mnemonic == "mem_guard"]
    assert all(i.role == ROLE_RSP_GUARD and i.operands[0] == MemOperand.at(Reg.RSP) for i in rsp_guards)


def test_rsp_adjust_beyond_one_guard_region_is_refused():
    with pytest.raises(RspAdjustTooLarge):
        insert_mem_guards(parse_sasm("func main:\n    sub rsp, 4104\n    push rax\n"))


def test_exit_stub_only_when_control_can_fall_off():
    sealed = seal_program(parse_sasm("func main:\n    nop\n"))
    assert sealed.functions[-1].name == EXIT_STUB
    assert mnemonics(sealed.functions[-1]) == ["mov", "mov", "syscall", "jmp"]
    assert seal_program(parse_sasm("func main:\nx:\n    jmp x\n")).functions[-1].name == "main"


@pytest.mark.parametrize("optimize", [True, False])
@pytest.mark.parametrize("confine_loads", [True, False])
def test_instrumented_programs_verify(build, corpus_dir, optimize, confine_loads):
    for name in ("hello", "struct8", "loop1000", "recursion", "indirect_call", "jmp_mem"):
        asm = build((corpus_dir / "benign" / f"{name}.sasm").read_text(), optimize=optimize, confine_loads=confine_loads)
        verdict = verify(asm.image, confine_loads=confine_loads)
        assert verdict.accepted, (name, verdict.codes())


def test_data_address_is_rip_relative_into_d(build):
    asm = build(".data msg: bytes \"x\"\n.data buf: zero 8\nfunc main:\n    mov rsi, &buf\n" + EXIT0)
    lea_at = asm.labels["main"] + 8
    lea = decode(asm.image.code, lea_at)
    assert lea.mnemonic == "lea" and lea.length == 7
    assert lea.end + lea.mem.disp == data_distance(len(asm.image.code)) + asm.data_labels["buf"]
    assert data_distance(len(asm.image.code)) == len(asm.image.code) + TRAMPOLINE_SIZE + 4096


def test_magic_inside_a_constant_is_split(build):
    asm = build("func main:\n    mov rax, 0x24841F0F41\n" + EXIT0)
    assert asm.magic_rewrites == 1
    assert "lea" in mnemonics(asm.program.function("main"))
    labels = {asm.offsets[pos] for pos in asm.offsets if str(asm.program.functions[pos[0]].body[pos[1]]) == "cfi_label"}
    assert set(scan_cfi_labels(asm.image.code)) <= labels
    assert verify(asm.image).accepted


def test_reference_build_keeps_returns_and_skips_guards(build_reference):
    asm = build_reference("func main:\n    call f\n" + EXIT0 + "func f:\n    mov [rsp+8], rax\n    ret\n")
    assert asm.program.count("mem_guard") == 0
    assert asm.program.count("ret") == 1
    assert asm.program.count("cfi_label") == 4
