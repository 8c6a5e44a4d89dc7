from pathlib import Path

import pytest

from mmdsfi.services.instrumenter import BuildOptions, instrument_source, reference_source

ROOT = Path(__file__).resolve().parent.parent
CORPUS_DIR = ROOT / "corpus"
FIXTURES_DIR = Path(__file__).resolve().parent / "fixtures"

EXIT0 = """
    mov rax, 0
    mov rdi, 0
    syscall
"""


@pytest.fixture
def corpus_dir() -> Path:
    return CORPUS_DIR


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES_DIR


@pytest.fixture
def build():
    """Instrument SASM text; keyword arguments become BuildOptions."""

    def _build(text: str, raw: bool = False, **options):
        return instrument_source(text, BuildOptions(**options), raw=raw)

    return _build


@pytest.fixture
def build_reference():
    def _build(text: str, raw: bool = False, **options):
        return reference_source(text, BuildOptions(**options), raw=raw)

    return _build
