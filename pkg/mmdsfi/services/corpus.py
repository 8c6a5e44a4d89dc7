"""
Corpus runner: builds every program listed in corpus/manifest.jsonl and checks it
against its expected outcome.

benign       accepted in all four build variants, clean under the monitor, and the same
             syscall trace as the uninstrumented build on the reference machine
adversarial  rejected with the expected code and nothing else
attack       accepted, then the expected fault (or "success") with a clean monitor and an
             intact LibOS; with baseline_images, every other SIP matches a run without
             the attacker
"""
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from itertools import product
from pathlib import Path
from typing import List, Optional, Union

from mmdsfi.config import settings
from mmdsfi.errors import MmdsfiError
from mmdsfi.models.corpus import SUCCESS, CaseKind, CaseResult, CorpusCase
from mmdsfi.models.runtime import SipStatus
from mmdsfi.services.assembler import Assembled
from mmdsfi.services.instrumenter import BuildOptions, instrument_source, reference_source
from mmdsfi.services.libos import run
from mmdsfi.services.monitor import monitor_fuzz, monitor_run
from mmdsfi.services.verifier import verify

logger = logging.getLogger(__name__)

MANIFEST = "manifest.jsonl"


def load_manifest(corpus_dir: Union[str, Path, None] = None) -> List[CorpusCase]:
    path = Path(corpus_dir or settings.CORPUS_DIR) / MANIFEST
    cases = []
    for number, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        try:
            cases.append(CorpusCase.model_validate(json.loads(line)))
        except ValueError as e:
            raise MmdsfiError(f"{path}:{number}: bad manifest entry: {e}") from e
    return cases


def _build(path: Path, options: BuildOptions, reference: bool = False) -> Assembled:
    raw = path.suffix == ".s"
    text = path.read_text()
    if reference:
        return reference_source(text, options, raw=raw)
    return instrument_source(text, options, raw=raw)


def _stdin_vectors(case: CorpusCase) -> List[bytes]:
    return [s.encode("latin-1") for s in case.inputs] or [b""]


def _check_benign(case: CorpusCase, corpus_dir: Path, result: CaseResult, fuzz_limit: Optional[int]):
    main_path = corpus_dir / case.source_path
    extra_paths = [corpus_dir / p for p in case.images]
    reference = [_build(p, BuildOptions(), reference=True).image for p in (main_path, *extra_paths)]
    expected_traces = {}
    for vector in _stdin_vectors(case):
        ref = run(reference, stdin=vector, reference=True)
        expected_traces[vector] = ref.syscall_trace
        if case.expect_stdout is not None and ref.sip(1).stdout != case.expect_stdout:
            result.problems.append(f"reference stdout {ref.sip(1).stdout!r} != {case.expect_stdout!r}")

    fuzz = case.fuzz if fuzz_limit is None else min(case.fuzz, fuzz_limit)
    for optimize, confine in product((True, False), (True, False)):
        variant = f"optimize={optimize} confine_loads={confine}"
        options = BuildOptions(confine_loads=confine, optimize=optimize)
        main = _build(main_path, options).image
        extras = [_build(p, options).image for p in extra_paths]
        verdict = verify(main, confine)
        if not verdict.accepted:
            result.problems.append(f"{variant}: rejected ({', '.join(verdict.codes())})")
            continue
        for vector, trace in expected_traces.items():
            monitored = monitor_run(main, vector, extras, verdict, confine)
            report = monitored.report
            if not monitored.clean:
                result.problems.append(f"{variant}: monitor {monitored.assertions[0].kind}: {monitored.assertions[0].detail}")
            for sip in report.faults():
                result.problems.append(f"{variant}: pid {sip.pid} faulted {sip.fault_kind}: {sip.fault_detail}")
            if report.syscall_trace != trace:
                result.problems.append(f"{variant}: syscall trace differs from the reference build")
        if fuzz and optimize and confine:
            fuzzed = monitor_fuzz(main, fuzz, seed=0, extra_images=extras, verdict=verdict, confine_loads=confine)
            if not fuzzed.clean:
                result.problems.append(f"fuzz: monitor {fuzzed.assertions[0].kind} in {fuzzed.runs} runs")
    result.observed = "accepted" if not result.problems else "mismatch"


def _check_adversarial(case: CorpusCase, corpus_dir: Path, result: CaseResult):
    image = _build(corpus_dir / case.source_path, BuildOptions()).image
    verdict = verify(image)
    codes = verdict.codes()
    result.observed = ",".join(codes) if codes else "accepted"
    if verdict.accepted:
        result.problems.append("image was accepted")
    elif any(code != case.expected for code in codes):
        result.problems.append(f"expected only {case.expected}, got {result.observed}")


def _sip_trace(report, pid: int) -> List[str]:
    prefix = f"pid={pid} "
    return [line for line in report.syscall_trace if line.startswith(prefix)]


def _compare_with_baseline(case: CorpusCase, corpus_dir: Path, main, verdict, vector: bytes, report, result: CaseResult):
    """Every SIP not started from a swapped-in attacker image behaves exactly as without the attack."""
    options = BuildOptions()
    baseline_extras = [_build(corpus_dir / p, options).image for p in case.baseline_images]
    baseline = monitor_run(main, vector, baseline_extras, verdict).report
    if baseline.faults():
        result.problems.append(f"baseline run faulted: {baseline.faults()[0].fault_kind}")
    attacker_images = {i + 1 for i, (a, b) in enumerate(zip(case.images, case.baseline_images)) if a != b}
    for sip in report.sips:
        if sip.image_index in attacker_images:
            continue
        expected = baseline.sip(sip.pid)
        if expected is None or expected.image_index != sip.image_index:
            result.problems.append(f"pid {sip.pid} has no counterpart in the baseline run")
            continue
        if _sip_trace(report, sip.pid) != _sip_trace(baseline, sip.pid):
            result.problems.append(f"pid {sip.pid} syscall trace differs from the baseline run")
        if (sip.status, sip.exit_code, sip.stdout) != (expected.status, expected.exit_code, expected.stdout):
            result.problems.append(f"pid {sip.pid} ended {sip.status}/{sip.exit_code}, baseline {expected.status}/{expected.exit_code}")


def _check_attack(case: CorpusCase, corpus_dir: Path, result: CaseResult):
    options = BuildOptions()
    main = _build(corpus_dir / case.source_path, options).image
    extras = [_build(corpus_dir / p, options).image for p in case.images]
    verdict = verify(main)
    if not verdict.accepted:
        result.observed = "rejected"
        result.problems.append(f"attack image was rejected ({', '.join(verdict.codes())})")
        return
    for vector in _stdin_vectors(case):
        monitored = monitor_run(main, vector, extras, verdict)
        report = monitored.report
        faults = sorted({s.fault_kind for s in report.faults()})
        result.observed = ",".join(faults) if faults else SUCCESS
        if not monitored.clean:
            result.problems.append(f"monitor {monitored.assertions[0].kind}: {monitored.assertions[0].detail}")
        if not report.libos_intact:
            result.problems.append("LibOS state was corrupted")
        if case.expected == SUCCESS:
            if faults or any(s.status != SipStatus.EXITED.value for s in report.sips):
                result.problems.append(f"expected every SIP to exit, got {result.observed}")
        elif faults != [case.expected]:
            result.problems.append(f"expected fault {case.expected}, got {result.observed}")
        if case.expect_stdout is not None and report.sip(1).stdout != case.expect_stdout:
            result.problems.append(f"stdout {report.sip(1).stdout!r} != {case.expect_stdout!r}")
        if case.baseline_images:
            _compare_with_baseline(case, corpus_dir, main, verdict, vector, report, result)


def run_case(case: CorpusCase, corpus_dir: Union[str, Path, None] = None, fuzz_limit: Optional[int] = None) -> CaseResult:
    corpus_dir = Path(corpus_dir or settings.CORPUS_DIR)
    result = CaseResult(name=case.name, kind=case.kind, expected=case.expected)
    try:
        if case.kind is CaseKind.BENIGN:
            _check_benign(case, corpus_dir, result, fuzz_limit)
        elif case.kind is CaseKind.ADVERSARIAL:
            _check_adversarial(case, corpus_dir, result)
        else:
            _check_attack(case, corpus_dir, result)
    except MmdsfiError as e:
        result.observed = type(e).__name__
        result.problems.append(str(e))
    result.passed = not result.problems
    log = logger.info if result.passed else logger.warning
    log(f"[{case.kind.value}] {case.name}: {'ok' if result.passed else '; '.join(result.problems)}")
    return result


def _run_case_args(args) -> CaseResult:
    return run_case(*args)


def run_corpus(
    corpus_dir: Union[str, Path, None] = None,
    kind: Optional[str] = None,
    name: Optional[str] = None,
    jobs: int = 1,
    fuzz_limit: Optional[int] = None,
) -> List[CaseResult]:
    """Run every matching case; `kind` and `name` filter the manifest (name is a substring)."""
    corpus_dir = Path(corpus_dir or settings.CORPUS_DIR)
    cases = [
        c for c in load_manifest(corpus_dir)
        if (kind is None or c.kind.value == kind) and (name is None or name in c.name)
    ]
    logger.info(f"Running {len(cases)} corpus cases from {corpus_dir} with {jobs} jobs")
    work = [(c, corpus_dir, fuzz_limit) for c in cases]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_case_args, work))
    else:
        results = [_run_case_args(w) for w in work]
    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.warning(f"{len(failed)} of {len(results)} corpus cases failed: {', '.join(failed)}")
    else:
        logger.info(f"All {len(results)} corpus cases passed")
    return results
