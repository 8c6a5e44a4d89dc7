import pytest

from mmdsfi.models.analysis import ROOT, RangeFact
from mmdsfi.models.isa import Reg
from mmdsfi.services.analysis import (
    access_within_guard,
    build_cfg,
    natural_loops,
    range_analysis,
    range_analysis_exhaustive,
)
from mmdsfi.services.instrumenter import instrument_source
from mmdsfi.services.verifier import stage1_disassemble

FIXTURES = ["loop.s", "diamond.s", "nested.s", "calls.s", "stack.s"]


def analyse(fixtures_dir, name):
    asm = instrument_source((fixtures_dir / name).read_text(), raw=True)
    r = stage1_disassemble(asm.image)
    cfg = build_cfg(r)
    return asm, r, cfg, range_analysis(cfg, r)


@pytest.mark.parametrize("name", FIXTURES)
def test_worklist_order_does_not_change_the_fixpoint(fixtures_dir, name):
    asm, r, cfg, facts = analyse(fixtures_dir, name)
    expected = range_analysis_exhaustive(cfg, r)
    assert facts == expected
    for seed in range(20):
        assert range_analysis(cfg, r, order_seed=seed) == expected


def test_loop_pointer_fact_joins_both_iterations(fixtures_dir):
    asm, r, cfg, facts = analyse(fixtures_dir, "loop.s")
    assert facts[asm.labels["top"]][Reg.R8] == (0, 8)
    assert access_within_guard(facts[asm.labels["top"]], Reg.R8, 0)


def test_diamond_join_covers_both_branches(fixtures_dir):
    asm, r, cfg, facts = analyse(fixtures_dir, "diamond.s")
    assert facts[asm.labels["join"]][Reg.R9] == (16, 64)


def test_cfi_label_resets_every_fact(fixtures_dir):
    asm, r, cfg, facts = analyse(fixtures_dir, "calls.s")
    assert facts[asm.labels["after"]][Reg.R8] is None
    call_site = asm.labels["main"] + 8 + 10  # cfi_label, then the 10-byte mem_guard
    assert facts[call_site][Reg.R8] == (0, 0)


def test_stack_ops_track_rsp(fixtures_dir):
    asm, r, cfg, facts = analyse(fixtures_dir, "stack.s")
    assert facts[asm.labels["reload"]][Reg.RSP] == (8, 8)


def test_natural_loops(fixtures_dir):
    asm, r, cfg, _ = analyse(fixtures_dir, "loop.s")
    loops = dict(natural_loops(cfg))
    # the trailing `stop: jmp stop` is a self-loop
    assert sorted(loops) == [asm.labels["top"], asm.labels["stop"]]
    assert asm.labels["stop"] not in loops[asm.labels["top"]]
    assert loops[asm.labels["stop"]] == {asm.labels["stop"]}

    asm, r, cfg, _ = analyse(fixtures_dir, "nested.s")
    headers = [header for header, _ in natural_loops(cfg)]
    assert headers == [asm.labels["outer"], asm.labels["inner"], asm.labels["stop"]]


def test_cfg_root_reaches_every_label(fixtures_dir):
    asm, r, cfg, _ = analyse(fixtures_dir, "calls.s")
    entries = set(cfg.successors(ROOT))
    assert asm.labels["main"] in entries
    assert asm.labels["helper"] in entries


def test_facts_widen_to_top_beyond_one_guard():
    fact = RangeFact.top().set(Reg.RAX, (0, 0)).shift(Reg.RAX, 4096)
    assert fact[Reg.RAX] == (4096, 4096)
    assert fact.shift(Reg.RAX, 1)[Reg.RAX] is None
    joined = RangeFact.top().set(Reg.RBX, (-4096, -4096)).join(RangeFact.top().set(Reg.RBX, (4096, 4096)))
    assert joined[Reg.RBX] == (-4096, 4096)
    assert not access_within_guard(joined, Reg.RBX, 8)
