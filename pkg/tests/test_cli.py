import json

import pytest

from mmdsfi.cli import EXIT_BAD_INPUT, EXIT_NEGATIVE, EXIT_OK, main
from mmdsfi.services.image import load_image_file


@pytest.fixture
def hello_image(tmp_path, corpus_dir):
    out = tmp_path / "hello.sipb"
    assert main(["instrument", str(corpus_dir / "benign" / "hello.sasm"), "-o", str(out), "--map"]) == EXIT_OK
    return out


def test_instrument_verify_run(hello_image, capsys):
    assert hello_image.is_file()
    assert hello_image.with_suffix(".sipb.map.json").is_file()
    capsys.readouterr()

    assert main(["verify", str(hello_image)]) == EXIT_OK
    assert capsys.readouterr().out.startswith("accepted")

    assert main(["run", str(hello_image)]) == EXIT_OK
    assert capsys.readouterr().out == "hello\n"


def test_verify_json_and_rejection(tmp_path, corpus_dir, capsys):
    out = tmp_path / "store.sipb"
    assert main(["instrument", str(corpus_dir / "adversarial" / "unguarded_store.s"), "-o", str(out)]) == EXIT_OK
    capsys.readouterr()
    assert main(["verify", "--json", str(out)]) == EXIT_NEGATIVE
    verdict = json.loads(capsys.readouterr().out)
    assert verdict["accepted"] is False
    assert [v["code"] for v in verdict["violations"]] == ["E_MEM_UNPROVEN"]


def test_disasm_lists_cfi_labels(hello_image, capsys):
    capsys.readouterr()
    assert main(["disasm", str(hello_image)]) == EXIT_OK
    listing = capsys.readouterr().out
    assert "cfi_label<id=0>" in listing
    assert "bndcl bnd1, r11" in listing


def test_monitor_and_verdict_file(hello_image, tmp_path, capsys):
    capsys.readouterr()
    main(["verify", "--json", str(hello_image)])
    verdict = tmp_path / "verdict.json"
    verdict.write_text(capsys.readouterr().out)
    assert main(["monitor", str(hello_image), "--verdict", str(verdict), "--fuzz", "3"]) == EXIT_OK
    assert capsys.readouterr().out.startswith("4 runs, 0 assertions")


def test_faulting_run_is_negative(tmp_path, capsys):
    src = tmp_path / "oob.sasm"
    src.write_text(".data buf: zero 8\nfunc main:\n    mov r8, &buf\n    sub r8, 8\n    mov [r8], rax\n")
    out = tmp_path / "oob.sipb"
    assert main(["instrument", str(src), "-o", str(out)]) == EXIT_OK
    capsys.readouterr()
    assert main(["run", "--json", str(out)]) == EXIT_NEGATIVE
    report = json.loads(capsys.readouterr().out)
    assert report["sips"][0]["fault_kind"] == "BoundLower"


def test_bad_input_exit_code(tmp_path):
    src = tmp_path / "bad.sasm"
    src.write_text("func main:\n    mov r10, 1\n")
    assert main(["instrument", str(src)]) == EXIT_BAD_INPUT
    assert main(["verify", str(tmp_path / "missing.sipb")]) == EXIT_BAD_INPUT
    (tmp_path / "junk.sipb").write_bytes(b"nope")
    assert main(["run", str(tmp_path / "junk.sipb")]) == EXIT_BAD_INPUT


def test_corpus_subset(corpus_dir, capsys):
    assert main(["corpus", "--dir", str(corpus_dir), "--filter", "adversarial", "--name", "enclu"]) == EXIT_OK
    assert capsys.readouterr().out.strip().endswith("1/1 passed")


def test_disasm_marks_guard_groups(hello_image, capsys):
    capsys.readouterr()
    main(["disasm", str(hello_image)])
    lines = capsys.readouterr().out.splitlines()
    markers = [i for i, line in enumerate(lines) if line.split()[1:2] == ["cfi_guard"]]
    assert markers
    first = markers[0]
    assert lines[first + 1].split()[0] == lines[first].split()[0]


def test_disasm_prints_partial_listing_on_abort(tmp_path, corpus_dir, capsys):
    out = tmp_path / "overlap.sipb"
    assert main(["instrument", str(corpus_dir / "adversarial" / "magic_overlap.s"), "-o", str(out)]) == EXIT_OK
    capsys.readouterr()
    assert main(["disasm", str(out)]) == EXIT_NEGATIVE
    listing = capsys.readouterr().out
    assert "cfi_label<id=0>" in listing
    assert listing.strip().splitlines()[-1].startswith("abort: AbortOverlap at 0xa")


def test_instrument_sizes_d(tmp_path, corpus_dir):
    out = tmp_path / "small.sipb"
    args = ["instrument", str(corpus_dir / "benign" / "hello.sasm"), "-o", str(out), "--d-capacity", "32768", "--stack", "4096"]
    assert main(args) == EXIT_OK
    image = load_image_file(out)
    assert image.d_capacity == 32768
    assert image.stack_reserve == 4096


def test_run_counters_are_json(hello_image, capsys):
    capsys.readouterr()
    assert main(["run", "--counters", str(hello_image)]) == EXIT_OK
    captured = capsys.readouterr()
    assert captured.out == "hello\n"
    counters = json.loads(captured.err.strip().splitlines()[-1])
    assert counters["syscalls"] == 2
    assert counters["cfi_guards"] == 2
    assert counters["steps"] > 0


def test_verify_confine_loads_switch(tmp_path, corpus_dir, capsys):
    out = tmp_path / "load.sipb"
    assert main(["instrument", str(corpus_dir / "adversarial" / "unguarded_load.s"), "-o", str(out)]) == EXIT_OK
    assert main(["verify", str(out)]) == EXIT_NEGATIVE
    assert main(["verify", "--confine-loads", "off", str(out)]) == EXIT_OK
    assert main(["verify", "--confine-loads", "on", str(out)]) == EXIT_NEGATIVE
