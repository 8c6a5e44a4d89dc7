import struct

import pytest

from mmdsfi.errors import BadMagic, BadVersion, InvariantViolation, TruncatedSection
from mmdsfi.models.image import SipbImage
from mmdsfi.services.image import HEADER_SIZE, check_image, load_image_file, read_image, save_image_file, write_image
from mmdsfi.services.isa import cfi_label


def sample_image(**changes) -> SipbImage:
    fields = dict(
        code=cfi_label(0).raw + b"\xeb\xfe",
        data=b"hello",
        entry=0,
        d_capacity=65536,
        stack_reserve=16384,
    )
    fields.update(changes)
    return SipbImage(**fields)


def test_header_layout():
    raw = write_image(sample_image())
    assert HEADER_SIZE == 40
    assert raw[:4] == b"SIPB"
    version, entry, code_size, data_size = struct.unpack_from("<IIII", raw, 4)
    assert (version, entry, code_size, data_size) == (1, 0, 10, 5)
    assert raw[HEADER_SIZE:HEADER_SIZE + 10] == sample_image().code
    assert raw.endswith(b"hello")


def test_file_round_trip(tmp_path):
    path = tmp_path / "prog.sipb"
    save_image_file(sample_image(), path)
    assert load_image_file(path) == sample_image()


def test_bad_magic():
    raw = b"ELF!" + write_image(sample_image())[4:]
    with pytest.raises(BadMagic):
        read_image(raw)


def test_bad_version():
    raw = bytearray(write_image(sample_image()))
    raw[4:8] = struct.pack("<I", 2)
    with pytest.raises(BadVersion):
        read_image(bytes(raw))


def test_truncated_sections():
    raw = write_image(sample_image())
    with pytest.raises(TruncatedSection):
        read_image(raw[:20])
    with pytest.raises(TruncatedSection):
        read_image(raw[:HEADER_SIZE + 4])
    with pytest.raises(TruncatedSection):
        read_image(raw[:-1])


def test_trailing_bytes_are_rejected():
    with pytest.raises(InvariantViolation):
        read_image(write_image(sample_image()) + b"\x00")


def test_entry_must_be_a_cfi_label():
    with pytest.raises(InvariantViolation):
        check_image(sample_image(entry=8))


def test_data_and_stack_must_fit_capacity():
    with pytest.raises(InvariantViolation):
        check_image(sample_image(data=bytes(70000)))
    with pytest.raises(InvariantViolation):
        check_image(sample_image(d_capacity=16384))
