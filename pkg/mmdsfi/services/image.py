import logging
import struct
from pathlib import Path
from typing import Union

from mmdsfi.errors import BadMagic, BadVersion, InvariantViolation, TruncatedSection
from mmdsfi.models.image import SIPB_MAGIC, SIPB_VERSION, SipbImage
from mmdsfi.services.isa import MAGIC

logger = logging.getLogger(__name__)

# magic, version, entry, code_size, data_size, d_capacity, stack_reserve, reserved
HEADER = struct.Struct("<4sIIIIQQI")
HEADER_SIZE = HEADER.size  # 40


def check_image(img: SipbImage) -> None:
    """Raise InvariantViolation unless the image is well formed."""
    if img.version != SIPB_VERSION:
        raise InvariantViolation(f"unsupported version {img.version}")
    if not 0 <= img.entry < len(img.code):
        raise InvariantViolation(f"entry {img.entry:#x} outside code of {len(img.code)} bytes")
    if img.code[img.entry:img.entry + len(MAGIC)] != MAGIC:
        raise InvariantViolation(f"entry {img.entry:#x} is not a cfi_label")
    if len(img.data) > img.d_capacity:
        raise InvariantViolation(f"data ({len(img.data)} bytes) exceeds d_capacity {img.d_capacity}")
    if img.stack_reserve > img.d_capacity - len(img.data):
        raise InvariantViolation("stack_reserve does not fit between data and the end of D")
    if len(img.code) >= 1 << 32 or len(img.data) >= 1 << 32:
        raise InvariantViolation("section larger than a u32 size field")


def write_image(img: SipbImage) -> bytes:
    check_image(img)
    header = HEADER.pack(
        SIPB_MAGIC,
        img.version,
        img.entry,
        len(img.code),
        len(img.data),
        img.d_capacity,
        img.stack_reserve,
        0,
    )
    return header + img.code + img.data


def read_image(raw: bytes) -> SipbImage:
    if bytes(raw[:4]) != SIPB_MAGIC:
        raise BadMagic(f"bad magic {bytes(raw[:4])!r}")
    if len(raw) < HEADER_SIZE:
        raise TruncatedSection(f"header needs {HEADER_SIZE} bytes, file has {len(raw)}")
    _, version, entry, code_size, data_size, d_capacity, stack_reserve, reserved = HEADER.unpack_from(raw)
    if version != SIPB_VERSION:
        raise BadVersion(f"unsupported version {version}")
    code_end = HEADER_SIZE + code_size
    if code_end > len(raw):
        raise TruncatedSection(f"code section needs {code_size} bytes, {len(raw) - HEADER_SIZE} available")
    data_end = code_end + data_size
    if data_end > len(raw):
        raise TruncatedSection(f"data section needs {data_size} bytes, {len(raw) - code_end} available")
    if data_end != len(raw):
        raise InvariantViolation(f"{len(raw) - data_end} trailing bytes after the data section")
    if reserved != 0:
        raise InvariantViolation(f"reserved header word is {reserved:#x}, expected 0")
    img = SipbImage(
        code=bytes(raw[HEADER_SIZE:code_end]),
        data=bytes(raw[code_end:data_end]),
        entry=entry,
        d_capacity=d_capacity,
        stack_reserve=stack_reserve,
        version=version,
    )
    check_image(img)
    return img


def load_image_file(path: Union[str, Path]) -> SipbImage:
    return read_image(Path(path).read_bytes())


def save_image_file(img: SipbImage, path: Union[str, Path]) -> None:
    Path(path).write_bytes(write_image(img))
    logger.info(f"Wrote {path} ({len(img.code)} code bytes, {len(img.data)} data bytes)")
