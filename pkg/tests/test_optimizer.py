import pytest

from mmdsfi.services.instrumenter import BuildOptions, instrument_program
from mmdsfi.services.libos import run
from mmdsfi.services.optimizer import eliminate_redundant_guards, hoist_loop_guards
from mmdsfi.services.sasm import parse_sasm
from mmdsfi.services.verifier import verify


def source(corpus_dir, name):
    return (corpus_dir / "benign" / f"{name}.sasm").read_text()


def guard_counts(build, text, **options):
    asm = build(text, **options)
    report = run([asm.image])
    assert not report.faults()
    return asm.program.count("mem_guard"), report.counters.mem_guards


def test_one_guard_covers_a_whole_record(build, corpus_dir):
    text = source(corpus_dir, "struct8")
    assert guard_counts(build, text, optimize=False) == (8, 8)
    assert guard_counts(build, text) == (1, 1)


def test_loop_guard_is_hoisted(build, corpus_dir):
    text = source(corpus_dir, "loop1000")
    assert guard_counts(build, text, optimize=False) == (1, 1000)
    static, dynamic = guard_counts(build, text)
    assert static == 1
    assert dynamic <= 2


def test_loads_are_only_counted_when_confined(build, corpus_dir):
    text = source(corpus_dir, "loads_sum")
    assert build(text, optimize=False).program.count("mem_guard") == 4
    assert build(text).program.count("mem_guard") == 2
    assert build(text, confine_loads=False).program.count("mem_guard") == 1


def test_syscall_inside_a_loop_blocks_hoisting(build, corpus_dir):
    assert guard_counts(build, source(corpus_dir, "countdown")) == (1, 4)


@pytest.mark.parametrize("name", ["struct8", "loop1000", "loads_sum", "memcpy_index", "big_frame", "push_pop"])
def test_optimized_output_still_verifies_and_behaves(build, corpus_dir, name):
    text = source(corpus_dir, name)
    plain = build(text, optimize=False)
    optimized = build(text)
    assert verify(optimized.image).accepted
    assert optimized.program.count("mem_guard") <= plain.program.count("mem_guard")
    assert run([optimized.image]).sip(1).stdout == run([plain.image]).sip(1).stdout


def test_passes_are_usable_on_their_own(corpus_dir):
    options = BuildOptions(optimize=False)
    base = instrument_program(parse_sasm(source(corpus_dir, "struct8")), options).program
    assert eliminate_redundant_guards(base, options).count("mem_guard") == 1
    base = instrument_program(parse_sasm(source(corpus_dir, "loop1000")), options).program
    hoisted = hoist_loop_guards(base, options)
    assert any(i.role == "hoisted" for f in hoisted.functions for i in f.instructions())
