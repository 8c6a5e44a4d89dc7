from dataclasses import dataclass

SIPB_MAGIC = b"SIPB"
SIPB_VERSION = 1


@dataclass(frozen=True)
class SipbImage:
    code: bytes
    data: bytes
    entry: int  # code offset of the entry cfi_label
    d_capacity: int
    stack_reserve: int
    version: int = SIPB_VERSION
