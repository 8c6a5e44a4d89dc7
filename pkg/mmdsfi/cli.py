"""
Command line entry: mmdsfi instrument | verify | disasm | run | monitor | corpus

Exit codes: 0 success, 1 the operation's answer was negative (rejected image, fault,
monitor assertion, failing corpus case), 2 usage or malformed input.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

from mmdsfi import __version__
from mmdsfi.config import settings
from mmdsfi.errors import ImageFormatError, MmdsfiError, SasmError, Stage1Abort
from mmdsfi.models.isa import PseudoKind
from mmdsfi.models.verdict import Verdict
from mmdsfi.services.analysis import find_pseudos
from mmdsfi.services.image import load_image_file, save_image_file
from mmdsfi.services.instrumenter import BuildOptions, instrument_source, reference_source
from mmdsfi.services.isa import format_instruction, linear_sweep
from mmdsfi.services.libos import run
from mmdsfi.services.monitor import monitor_fuzz
from mmdsfi.services.verifier import stage1_disassemble, verify

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_NEGATIVE = 1
EXIT_BAD_INPUT = 2


def _map_path(image_path: Path) -> Path:
    return image_path.with_suffix(image_path.suffix + ".map.json")


def _load_line_map(path: Optional[str]) -> Dict[int, int]:
    if not path:
        return {}
    return {int(k): v for k, v in json.loads(Path(path).read_text()).items() if v is not None}


def _line_for(line_map: Dict[int, int], offset: int) -> Optional[int]:
    starts = [o for o in line_map if o <= offset]
    return line_map[max(starts)] if starts else None


def cmd_instrument(args) -> int:
    source = Path(args.source)
    options = BuildOptions(
        confine_loads=not args.no_confine_loads,
        optimize=not args.no_optimize,
        d_capacity=args.d_capacity,
        stack_reserve=args.stack,
    )
    build = reference_source if args.reference else instrument_source
    asm = build(source.read_text(), options, raw=args.raw or source.suffix == ".s")
    out = Path(args.output or source.with_suffix(".sipb"))
    save_image_file(asm.image, out)
    if args.map:
        _map_path(out).write_text(json.dumps({str(k): v for k, v in asm.line_map().items()}, indent=1))
    print(f"{out}: {len(asm.image.code)} code bytes, {asm.program.count('mem_guard')} mem_guards")
    return EXIT_OK


def cmd_verify(args) -> int:
    image = load_image_file(args.image)
    verdict = verify(image, confine_loads=args.confine_loads == "on")
    if args.json:
        print(verdict.model_dump_json(indent=2))
    else:
        line_map = _load_line_map(args.map)
        print("accepted" if verdict.accepted else "rejected")
        for v in verdict.violations:
            line = _line_for(line_map, v.offset)
            where = f" (line {line})" if line is not None else ""
            print(f"  stage {v.stage} {v.code} at {v.offset:#x}{where}: {v.detail}")
        stats = verdict.stats
        print(
            f"  {stats.reachable_count} reachable, {stats.cfi_label_count} cfi_labels, "
            f"{stats.guard_count} mem_guards, {stats.cfi_guard_count} cfi_guards, "
            f"{stats.eliminated_guard_equiv} accesses proven by range facts"
        )
    return EXIT_OK if verdict.accepted else EXIT_NEGATIVE


PSEUDO_NAMES = {PseudoKind.MEM_GUARD: "mem_guard", PseudoKind.CFI_GUARD: "cfi_guard"}


def _print_listing(image, listing):
    """One line per instruction; mem_guard and cfi_guard members are indented under a marker."""
    instrs = {item.address: item for item in listing if not isinstance(item, tuple)}
    pseudos = {o: p for o, p in find_pseudos(instrs).items() if p.kind in PSEUDO_NAMES}
    members = set()
    for item in listing:
        if isinstance(item, tuple):
            offset, error = item
            print(f"{offset:08x}  {image.code[offset]:02x}  (bad) {error}")
            continue
        pseudo = pseudos.get(item.address)
        if pseudo is not None and item.address not in members:
            if pseudo.kind is PseudoKind.MEM_GUARD:
                what = str(pseudo.guarded_operand)
            else:
                what = f"{pseudo.target_reg}, {pseudo.scratch_reg}"
            print(f"{item.address:08x}  {'':<30}  {PSEUDO_NAMES[pseudo.kind]} {what}")
            members.update(i.address for i in pseudo.instrs)
        indent = "  " if item.address in members else ""
        print(f"{item.address:08x}  {item.raw.hex(' '):<30}  {indent}{format_instruction(item)}")


def cmd_disasm(args) -> int:
    image = load_image_file(args.image)
    if args.raw:
        _print_listing(image, linear_sweep(image.code))
        return EXIT_OK
    try:
        r = stage1_disassemble(image)
    except Stage1Abort as e:
        _print_listing(image, [e.partial[o] for o in sorted(e.partial)])
        print(f"abort: {e}")
        return EXIT_NEGATIVE
    _print_listing(image, [r.instrs[offset] for offset in sorted(r.instrs)])
    return EXIT_OK


def _load_images(main: str, extra: Optional[List[str]]):
    return [load_image_file(p) for p in [main, *(extra or [])]]


def cmd_run(args) -> int:
    images = _load_images(args.image, args.extra)
    report = run(
        images,
        seed=args.seed,
        stdin=args.input.encode("latin-1"),
        reference=args.reference,
        confine_loads=not args.no_confine_loads,
        trace=args.trace,
    )
    if args.json:
        print(report.model_dump_json(indent=2))
        return EXIT_NEGATIVE if report.faults() else EXIT_OK
    for sip in report.sips:
        sys.stdout.write(sip.stdout)
    if args.trace:
        for line in report.trace:
            print(line, file=sys.stderr)
    for line in report.syscall_trace:
        logger.debug(line)
    for sip in report.sips:
        if sip.fault_kind:
            print(f"pid {sip.pid}: fault {sip.fault_kind} at {sip.fault_pc:#x}: {sip.fault_detail}", file=sys.stderr)
    if args.counters:
        print(json.dumps(report.counters.model_dump()), file=sys.stderr)
    return EXIT_NEGATIVE if report.faults() or report.budget_exhausted else EXIT_OK


def cmd_monitor(args) -> int:
    images = _load_images(args.image, args.extra)
    verdict = Verdict.model_validate_json(Path(args.verdict).read_text()) if args.verdict else None
    result = monitor_fuzz(
        images[0],
        args.fuzz,
        seed=args.seed,
        inputs=args.input.encode("latin-1"),
        extra_images=images[1:],
        verdict=verdict,
        confine_loads=not args.no_confine_loads,
    )
    if args.json:
        print(result.model_dump_json(indent=2))
    else:
        print(f"{result.runs} runs, {len(result.assertions)} assertions")
        for a in result.assertions:
            print(f"  {a.kind} pid={a.pid} pc={a.pc:#x}: {a.detail}")
    return EXIT_OK if result.clean else EXIT_NEGATIVE


def cmd_corpus(args) -> int:
    from mmdsfi.services.corpus import run_corpus

    results = run_corpus(args.dir, kind=args.filter, name=args.name, jobs=args.jobs, fuzz_limit=args.fuzz_limit)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.kind.value:<11} {r.name:<28} expected={r.expected or '-'} observed={r.observed}")
        for problem in r.problems:
            print(f"     {problem}")
    failed = sum(1 for r in results if not r.passed)
    print(f"{len(results) - failed}/{len(results)} passed")
    return EXIT_NEGATIVE if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmdsfi", description="MPX-based multi-domain SFI toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("instrument", help="instrument and assemble a SASM program into a .sipb image")
    p.add_argument("source")
    p.add_argument("-o", "--output")
    p.add_argument("--no-optimize", action="store_true")
    p.add_argument("--no-confine-loads", action="store_true")
    p.add_argument("--d-capacity", type=int, help="size of D in bytes")
    p.add_argument("--stack", type=int, help="bytes of D reserved for the stack")
    p.add_argument("--raw", action="store_true", help="assemble as written, no instrumentation")
    p.add_argument("--reference", action="store_true", help="uninstrumented build for the reference machine")
    p.add_argument("--map", action="store_true", help="also write <output>.map.json (code offset -> source line)")
    p.set_defaults(func=cmd_instrument)

    p = sub.add_parser("verify", help="run the four-stage verifier on an image")
    p.add_argument("image")
    p.add_argument("--json", action="store_true")
    p.add_argument("--map", help="line map written by instrument --map")
    p.add_argument("--confine-loads", choices=["on", "off"], default="on", help="police loads as well as stores")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("disasm", help="list an image's instructions")
    p.add_argument("image")
    p.add_argument("--raw", action="store_true", help="linear sweep instead of complete disassembly")
    p.set_defaults(func=cmd_disasm)

    for name, func, help_text in (
        ("run", cmd_run, "run an image as pid 1 under the LibOS"),
        ("monitor", cmd_monitor, "run an image with the policy monitor armed"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("image")
        p.add_argument("--image", dest="extra", action="append", help="spawn table entry (repeatable)")
        p.add_argument("--seed", type=int, default=None if name == "run" else 0)
        p.add_argument("--input", default="", help="stdin contents")
        p.add_argument("--no-confine-loads", action="store_true")
        p.add_argument("--json", action="store_true")
        p.set_defaults(func=func)
        if name == "run":
            p.add_argument("--trace", action="store_true")
            p.add_argument("--counters", action="store_true")
            p.add_argument("--reference", action="store_true", help="permissive reference machine")
        else:
            p.add_argument("--fuzz", type=int, default=0, help="extra random stdin vectors")
            p.add_argument("--verdict", help="verdict JSON from verify --json")

    p = sub.add_parser("corpus", help="run the program corpus")
    p.add_argument("--dir", default=settings.CORPUS_DIR)
    p.add_argument("--filter", choices=["benign", "adversarial", "attack"])
    p.add_argument("--name", help="only cases whose name contains this")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--fuzz-limit", type=int, default=None, help="cap the per-case fuzz count")
    p.set_defaults(func=cmd_corpus)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=settings.LOG_LEVEL, format="%(levelname)s %(name)s: %(message)s")
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    try:
        return args.func(args)
    except (SasmError, ImageFormatError, OSError, ValueError) as e:
        logger.error(f"{args.command}: {e}")
        return EXIT_BAD_INPUT
    except MmdsfiError as e:
        logger.error(f"{args.command}: {e}", exc_info=args.verbose)
        return EXIT_NEGATIVE
    except Exception as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True)
        return EXIT_NEGATIVE
