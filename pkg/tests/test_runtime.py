import pytest

from mmdsfi.errors import VerifyRejected
from mmdsfi.models.runtime import RegionKind, SipStatus
from mmdsfi.services.libos import LibOS, run
from mmdsfi.services.loader import Loader
from mmdsfi.services.memory import Memory

from tests.conftest import EXIT0


def image(build, corpus_dir, name):
    return build((corpus_dir / "benign" / f"{name}.sasm").read_text()).image


def test_hello_output_and_syscall_trace(build, corpus_dir):
    report = run([image(build, corpus_dir, "hello")])
    sip = report.sip(1)
    assert sip.stdout == "hello\n"
    assert sip.status == SipStatus.EXITED.value
    assert sip.exit_code == 0
    assert report.syscall_trace == ["pid=1 write(fd=1, b'hello\\n') -> 6", "pid=1 exit(0) -> 0"]
    assert report.counters.syscalls == 2
    assert report.counters.cfi_guards == 2
    assert report.libos_intact


def test_exit_code_and_stdin(build, corpus_dir):
    assert run([image(build, corpus_dir, "exit_code")]).sip(1).exit_code == 3
    report = run([image(build, corpus_dir, "echo")], stdin=b"line one\nline two\n")
    assert report.sip(1).stdout == "line one\nline two\n"


def test_spawn_and_wait(build, corpus_dir):
    images = [image(build, corpus_dir, "spawn_wait"), image(build, corpus_dir, "child_exit5")]
    report = run(images)
    assert report.sip(1).stdout == "5"
    child = report.sip(2)
    assert child.parent == 1
    assert child.exit_code == 5
    assert child.domain_id == 2


def test_pipe_between_parent_and_child(build, corpus_dir):
    images = [image(build, corpus_dir, "pipe_child"), image(build, corpus_dir, "child_pipe_writer")]
    for seed in (None, 1, 2, 3):
        assert run(images, seed=seed).sip(1).stdout == "hi"


def test_seeded_schedules_are_reproducible(build, corpus_dir):
    images = [image(build, corpus_dir, "pipe_child"), image(build, corpus_dir, "child_pipe_writer")]
    assert run(images, seed=7).syscall_trace == run(images, seed=7).syscall_trace


def test_reference_machine_matches_instrumented_trace(build, build_reference, corpus_dir):
    for name in ("hello", "recursion", "jump_table", "push_pop"):
        text = (corpus_dir / "benign" / f"{name}.sasm").read_text()
        reference = run([build_reference(text).image], reference=True)
        instrumented = run([build(text).image])
        assert reference.syscall_trace == instrumented.syscall_trace, name
        assert reference.counters.mem_guards == 0


@pytest.mark.parametrize(
    "text, kind",
    [
        ("func main:\n    cfi_label\n    mov rax, &main\n    mov [rax], rbx\nstop:\n    jmp stop\n", "PermissionDenied"),
        ("func main:\n    cfi_label\n    mov rax, 16\n    mov rbx, [rax]\nstop:\n    jmp stop\n", "UnmappedAccess"),
        (".data buf: zero 8\nfunc main:\n    cfi_label\n    mov rax, &buf\n    jmp rax\n", "NonExecutableFetch"),
        ("func main:\n    cfi_label\n    enclu\n", "DangerousInstr"),
        ("func main:\n    cfi_label\n    syscall\n", "DangerousInstr"),
        ("func main:\n    cfi_label\n    .byte 0xf4\n", "InvalidOpcode"),
    ],
)
def test_unverified_code_traps(build, text, kind):
    report = run([build(text, raw=True).image], verify_images=False)
    sip = report.sip(1)
    assert sip.status == SipStatus.FAULTED.value
    assert sip.fault_kind == kind
    assert report.libos_intact


@pytest.mark.parametrize(
    "body, kind",
    [
        ("    mov r8, &buf\n    add r8, 65536\n    mov [r8], rax\n", "BoundUpper"),
        ("    mov r8, &buf\n    sub r8, 8\n    mov [r8], rax\n", "BoundLower"),
        ("    mov rax, 1\n    mov rdi, 1\n    mov rsi, &main\n    mov rdx, 4\n    syscall\n", "SyscallSanity"),
    ],
)
def test_instrumented_code_faults_instead_of_escaping(build, body, kind):
    report = run([build(".data buf: zero 8\nfunc main:\n" + body + EXIT0).image])
    assert report.sip(1).fault_kind == kind
    assert report.faults()[0].pid == 1


def test_sanity_failure_is_traced(build):
    report = run([build("func main:\n    mov rax, 1\n    mov rdi, 1\n    mov rsi, &main\n    mov rdx, 4\n    syscall\n").image])
    assert report.syscall_trace == ["pid=1 write -> fault SyscallSanity"]


def test_step_budget_kills_runaway_sips(build):
    report = run([build("func main:\nspin:\n    jmp spin\n").image], max_steps=1000)
    assert report.budget_exhausted
    assert report.sip(1).status == SipStatus.KILLED.value


def test_deadlock_kills_blocked_sips(build):
    text = """
.data buf: zero 8
func main:
    mov rax, 5
    syscall
    mov rax, 2
    mov rdi, 3
    mov rsi, &buf
    mov rdx, 1
    syscall
""" + EXIT0
    report = run([build(text).image])
    assert report.sip(1).status == SipStatus.KILLED.value
    assert report.syscall_trace == ["pid=1 pipe() = (3, 4) -> 17179869187"]


def test_rejected_images_are_not_loaded(build, corpus_dir):
    bad = build((corpus_dir / "adversarial" / "unguarded_store.s").read_text(), raw=True).image
    with pytest.raises(VerifyRejected):
        LibOS([bad]).spawn(0)


def test_trace_records_each_step(build, corpus_dir):
    report = run([image(build, corpus_dir, "exit_code")], trace=True)
    assert len(report.trace) == report.counters.steps
    assert report.trace[0].startswith("pc=0x")


def _sibling_d(child) -> int:
    return Loader(Memory()).layout_for(child, 2).d_begin


SECRET_CHILD = """
.data secret: bytes "SECRET!!"
func main:
    mov rax, 4
    syscall
""" + EXIT0


def test_unconfined_load_cannot_read_a_sibling(build):
    child = build(SECRET_CHILD).image
    parent = build(
        f"""
.data out: zero 8
func main:
    mov rax, 3
    mov rdi, 1
    syscall
    mov r8, {_sibling_d(child):#x}
    mov rax, [r8]
    mov r9, &out
    mov [r9], rax
    mov rax, 1
    mov rdi, 1
    mov rsi, &out
    mov rdx, 8
    syscall
"""
        + EXIT0,
        confine_loads=False,
    ).image
    report = run([parent, child], confine_loads=False)
    assert report.sip(1).fault_kind == "UnmappedAccess"
    assert report.sip(1).stdout == ""
    assert report.sip(2).exit_code == 0


def test_raw_store_into_a_sibling_faults(build):
    child = build(SECRET_CHILD).image
    attacker = build(
        "func main:\n    cfi_label\n    mov rax, 3\n    mov rdi, 1\n    mov r13, &back\n    jmp r14\n"
        f"back:\n    cfi_label\n    mov rbx, {_sibling_d(child):#x}\n    mov [rbx], rax\nstop:\n    jmp stop\n",
        raw=True,
    ).image
    report = run([attacker, child], verify_images=False, max_steps=5000)
    assert report.sip(1).fault_kind == "UnmappedAccess"
    assert not report.budget_exhausted
    assert report.sip(2).exit_code == 0


def test_libos_region_is_unmapped_for_sips(build):
    libos = LibOS([])
    target = libos.libos_region.begin
    report = run([build(f"func main:\n    cfi_label\n    mov rax, {target:#x}\n    mov rbx, [rax]\n", raw=True).image], verify_images=False)
    assert report.sip(1).fault_kind == "UnmappedAccess"
    assert report.libos_intact


def test_finished_domains_are_unmapped(build, corpus_dir):
    images = [image(build, corpus_dir, "spawn_wait"), image(build, corpus_dir, "child_exit5")]
    libos = LibOS(images)
    libos.run()
    assert [r.kind for r in libos.memory.regions()] == [RegionKind.LIBOS]
