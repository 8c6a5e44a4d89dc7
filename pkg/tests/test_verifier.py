import pytest

from mmdsfi.models.corpus import CaseKind
from mmdsfi.services.corpus import load_manifest
from mmdsfi.services.verifier import interior_set, stage1_disassemble, verify

from tests.conftest import CORPUS_DIR

ADVERSARIAL = [c for c in load_manifest(CORPUS_DIR) if c.kind is CaseKind.ADVERSARIAL]


@pytest.mark.parametrize("case", ADVERSARIAL, ids=lambda c: c.name)
def test_adversarial_images_are_rejected_with_their_code(build, corpus_dir, case):
    asm = build((corpus_dir / case.source_path).read_text(), raw=True)
    verdict = verify(asm.image)
    assert not verdict.accepted
    assert set(verdict.codes()) == {case.expected}


def test_accepted_image_runs_every_stage(build, corpus_dir):
    asm = build((corpus_dir / "benign" / "hello.sasm").read_text())
    verdict = verify(asm.image)
    assert verdict.accepted
    assert verdict.stages_run == [1, 2, 3, 4]
    assert verdict.violations == []
    assert verdict.stats.cfi_label_count == asm.program.count("cfi_label")
    assert verdict.stats.cfi_guard_count == asm.program.count("cfi_guard")
    assert verdict.reachable_offsets == sorted(verdict.reachable_offsets)


def test_stage1_abort_stops_the_pipeline(build, corpus_dir):
    asm = build((corpus_dir / "adversarial" / "magic_overlap.s").read_text(), raw=True)
    verdict = verify(asm.image)
    assert verdict.stages_run == [1]
    assert verdict.violations[0].stage == 1


def test_an_earlier_stage_hides_later_findings(build):
    asm = build("func main:\n    cfi_label\n    enclu\n    mov [r8], rax\nstop:\n    jmp stop\n", raw=True)
    verdict = verify(asm.image)
    assert verdict.codes() == ["E_SGX"]
    assert verdict.stages_run == [1, 2]


def test_unconfined_loads_are_not_policed(build, corpus_dir):
    asm = build((corpus_dir / "adversarial" / "unguarded_load.s").read_text(), raw=True)
    assert verify(asm.image, confine_loads=False).accepted
    assert not verify(asm.image, confine_loads=True).accepted


def test_fact_justified_accesses_are_counted(build, corpus_dir):
    asm = build((corpus_dir / "benign" / "struct8.sasm").read_text())
    verdict = verify(asm.image)
    assert verdict.accepted
    assert verdict.stats.guard_count == 1
    assert verdict.stats.eliminated_guard_equiv == 7


def test_guard_interiors_cannot_be_targeted(build):
    asm = build(
        "func main:\n    cfi_label\n    mem_guard [r8]\n    mov [r8], rax\nstop:\n    jmp stop\n",
        raw=True,
    )
    r = stage1_disassemble(asm.image)
    guard_at = asm.labels["main"] + 8
    upper_at = guard_at + 5
    store_at = guard_at + 10
    assert upper_at in interior_set(r)
    assert store_at in interior_set(r)
    assert verify(asm.image).accepted


def test_verdict_json_round_trips(build, corpus_dir):
    from mmdsfi.models.verdict import Verdict

    asm = build((corpus_dir / "adversarial" / "ret.s").read_text(), raw=True)
    verdict = verify(asm.image)
    assert Verdict.model_validate_json(verdict.model_dump_json()) == verdict
