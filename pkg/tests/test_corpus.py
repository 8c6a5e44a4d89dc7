import json

import pytest

from mmdsfi.errors import MmdsfiError
from mmdsfi.models.corpus import CaseKind, CorpusCase
from mmdsfi.services.corpus import load_manifest, run_case, run_corpus
from mmdsfi.services.libos import run

from tests.conftest import CORPUS_DIR


def test_manifest_covers_every_kind(corpus_dir):
    cases = load_manifest(corpus_dir)
    by_kind = {kind: [c for c in cases if c.kind is kind] for kind in CaseKind}
    assert len(by_kind[CaseKind.BENIGN]) >= 25
    assert len(by_kind[CaseKind.ADVERSARIAL]) >= 15
    assert len(by_kind[CaseKind.ATTACK]) >= 5
    assert len({c.name for c in cases}) == len(cases)
    for case in cases:
        assert (corpus_dir / case.source_path).is_file()
        assert all((corpus_dir / p).is_file() for p in case.images + case.baseline_images)


def test_expectation_must_match_kind():
    with pytest.raises(ValueError):
        CorpusCase(name="x", kind="benign", expected="E_SGX", source_path="x.sasm")
    with pytest.raises(ValueError):
        CorpusCase(name="x", kind="attack", source_path="x.sasm")
    assert CorpusCase(name="x", kind="adversarial", expected="E_SGX", source_path="x.s").raw


def test_bad_manifest_line_names_the_line(tmp_path):
    entry = {"name": "ok", "kind": "adversarial", "expected": "E_SGX", "source_path": "a.s"}
    (tmp_path / "manifest.jsonl").write_text(
        "# comment\n" + json.dumps(entry) + "\n\n" + json.dumps({"name": "bad", "kind": "benign"}) + "\n"
    )
    with pytest.raises(MmdsfiError, match="manifest.jsonl:4"):
        load_manifest(tmp_path)


@pytest.mark.parametrize("case", load_manifest(CORPUS_DIR), ids=lambda c: c.name)
def test_every_case_passes(case, corpus_dir):
    result = run_case(case, corpus_dir, fuzz_limit=20)
    assert result.passed, result.problems
    if case.kind is CaseKind.BENIGN:
        assert result.observed == "accepted"
    else:
        assert result.observed == case.expected


@pytest.mark.full_fuzz
def test_full_fuzz_budget_is_clean(corpus_dir):
    cases = [c for c in load_manifest(corpus_dir) if c.fuzz]
    assert sum(c.fuzz for c in cases) >= 10_000
    for case in cases:
        result = run_case(case, corpus_dir)
        assert result.passed, result.problems


def _scenario(build, corpus_dir, attacker):
    paths = ["isolation", "pipe_worker", attacker]
    return [build((corpus_dir / "attack" / f"{name}.sasm").read_text()).image for name in paths]


@pytest.mark.parametrize("attacker, kind", [("cross_store", "BoundLower"), ("cross_write", "SyscallSanity")])
def test_attacker_leaves_its_siblings_untouched(build, corpus_dir, attacker, kind):
    baseline = run(_scenario(build, corpus_dir, "quiet_child"))
    attacked = run(_scenario(build, corpus_dir, attacker))
    assert [s.pid for s in attacked.faults()] == [3]
    assert attacked.sip(3).fault_kind == kind
    assert attacked.libos_intact
    for pid in (1, 2):
        prefix = f"pid={pid} "
        own = [line for line in attacked.syscall_trace if line.startswith(prefix)]
        assert own == [line for line in baseline.syscall_trace if line.startswith(prefix)]
        assert attacked.sip(pid).exit_code == 0
    assert attacked.sip(1).stdout == "ok\ndone\n"


def test_baseline_must_mirror_images():
    with pytest.raises(ValueError):
        CorpusCase(name="x", kind="attack", expected="BoundLower", source_path="x.sasm", images=["a"], baseline_images=["a", "b"])
    with pytest.raises(ValueError):
        CorpusCase(name="x", kind="benign", source_path="x.sasm", images=["a"], baseline_images=["b"])


def test_filter_by_name(corpus_dir):
    results = run_corpus(corpus_dir, name="isolation", fuzz_limit=0)
    assert sorted(r.name for r in results) == ["isolation_store", "isolation_write"]
    assert all(r.passed for r in results)


def test_failing_case_is_reported_not_raised(tmp_path):
    (tmp_path / "ok.s").write_text("func main:\n    cfi_label\nstop:\n    jmp stop\n")
    case = CorpusCase(name="wrong", kind="adversarial", expected="E_SGX", source_path="ok.s")
    result = run_case(case, tmp_path)
    assert not result.passed
    assert result.observed == "accepted"
    assert result.problems == ["image was accepted"]
