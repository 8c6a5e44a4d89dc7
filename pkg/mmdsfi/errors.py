from typing import Optional


class MmdsfiError(Exception):
    """Root of every toolkit error."""


# isa

class DecodeError(MmdsfiError):
    def __init__(self, offset: int, message: str):
        self.offset = offset
        super().__init__(f"{message} at offset {offset:#x}")


class UnknownOpcode(DecodeError):
    pass


class TruncatedInstruction(DecodeError):
    pass


class UnencodableForm(MmdsfiError):
    pass


# image

class ImageFormatError(MmdsfiError):
    pass


class BadMagic(ImageFormatError):
    pass


class BadVersion(ImageFormatError):
    pass


class TruncatedSection(ImageFormatError):
    pass


class InvariantViolation(ImageFormatError):
    pass


# instrumenter

class SasmError(MmdsfiError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")


class SasmSyntaxError(SasmError):
    pass


class UnknownMnemonic(SasmError):
    pass


class ReservedRegister(SasmError):
    pass


class DuplicateLabel(SasmError):
    pass


class UndefinedLabel(SasmError):
    pass


class RspAdjustTooLarge(SasmError):
    pass


class AssemblyError(MmdsfiError):
    pass


class MagicCollisionUnresolvable(AssemblyError):
    pass


class ImageTooLarge(AssemblyError):
    pass


# verifier

class Stage1Abort(MmdsfiError):
    """Complete disassembly gave up; `partial` holds the instructions collected so far."""

    def __init__(self, code: str, offset: int, detail: str, partial=None):
        self.code = code
        self.offset = offset
        self.detail = detail
        self.partial = partial or {}
        super().__init__(f"{code} at {offset:#x}: {detail}")


# runtime

class LoaderError(MmdsfiError):
    pass


class VerifyRejected(LoaderError):
    def __init__(self, verdict):
        self.verdict = verdict
        codes = ", ".join(v.code for v in verdict.violations)
        super().__init__(f"image rejected by the verifier: {codes}")


class CapacityExceeded(LoaderError):
    pass
