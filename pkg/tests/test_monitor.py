from mmdsfi.services.loader import Loader
from mmdsfi.services.memory import Memory
from mmdsfi.services.monitor import INDIRECT_NOT_LABEL, fuzz_inputs, monitor_fuzz, monitor_run

from tests.conftest import EXIT0

# raw code that enters the LibOS through the trampoline
SPAWN_IMAGE_1 = """
    mov rax, 3
    mov rdi, 1
    mov r13, &back
    jmp r14
back:
    cfi_label
"""


def test_benign_program_is_clean(build, corpus_dir):
    result = monitor_run(build((corpus_dir / "benign" / "hello.sasm").read_text()).image)
    assert result.clean
    assert result.runs == 1
    assert result.report.sip(1).stdout == "hello\n"


def test_store_into_another_domain_faults_before_the_monitor_sees_it(build):
    victim = build("func main:\n" + EXIT0).image
    victim_d = Loader(Memory()).layout_for(victim, 2).d_begin
    attacker = build(
        "func main:\n    cfi_label\n" + SPAWN_IMAGE_1 + f"    mov rbx, {victim_d:#x}\n    mov [rbx], rax\nstop:\n    jmp stop\n",
        raw=True,
    ).image
    result = monitor_run(attacker, extra_images=[victim], max_steps=5000)
    assert result.clean
    assert result.report.sip(1).fault_kind == "UnmappedAccess"
    assert result.report.sip(2).exit_code == 0


def test_indirect_jump_to_a_non_label_is_caught(build):
    attacker = build(
        "func main:\n    cfi_label\n    mov rax, &target\n    jmp rax\ntarget:\n    nop\nstop:\n    jmp stop\n",
        raw=True,
    ).image
    result = monitor_run(attacker, max_steps=1000)
    assert [a.kind for a in result.assertions] == [INDIRECT_NOT_LABEL]
    assert "rax" in result.assertions[0].registers


def test_fuzzing_runs_every_vector(build, corpus_dir):
    image = build((corpus_dir / "benign" / "echo.sasm").read_text()).image
    result = monitor_fuzz(image, 20, seed=3, inputs=b"abc")
    assert result.runs == 21
    assert result.clean
    assert result.report.sip(1).stdout == "abc"


def test_fuzz_inputs_are_seeded():
    vectors = fuzz_inputs(50, seed=1)
    assert vectors == fuzz_inputs(50, seed=1)
    assert vectors != fuzz_inputs(50, seed=2)
    assert all(len(v) <= 64 for v in vectors)
