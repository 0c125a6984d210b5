# Copyright (c) 2026 The diffcomp authors
# This file is part of the diffcomp project which is released under the MIT license.

"""Tests for the bit-level reader and writer and the integer codes."""

import pytest

from diffcomp.bitio import (BitReader, BitWriter, elias_gamma_length, read_elias_gamma, unzigzag,
                            write_elias_gamma, zigzag)
from diffcomp.errors import DecodeError


def test_bits_are_packed_most_significant_first():
    """Bits fill each byte from the top and the last byte is zero-padded."""
    writer = BitWriter()
    writer.write_bits(0b101, 3)
    writer.write_bits(0xFF, 8)
    assert len(writer) == 11
    assert writer.to_bytes() == bytes((0b10111111, 0b11100000))


def test_reader_returns_written_bits():
    """Reading gives back what was written."""
    writer = BitWriter()
    writer.write_bits(0x2A, 6)
    writer.write_bit(1)
    reader = BitReader(writer.to_bytes())
    assert reader.read_bits(6) == 0x2A
    assert reader.read_bit() == 1
    reader.check_padding()


def test_reading_past_the_end():
    """Reading beyond the data raises DecodeError."""
    reader = BitReader(b"\x80")
    reader.read_bits(8)
    with pytest.raises(DecodeError):
        reader.read_bit()


@pytest.mark.parametrize("data", [b"\x01", b"\x00\x00"])
def test_check_padding_rejects_trailing_data(data):
    """Non-zero padding or a whole unread byte is an error."""
    reader = BitReader(data)
    reader.read_bits(1)
    with pytest.raises(DecodeError):
        reader.check_padding()


@pytest.mark.parametrize("value,code", [(0, 0), (-1, 1), (1, 2), (-2, 3), (2, 4), (-1000, 1999)])
def test_zigzag(value, code):
    """Signed integers interleave onto the naturals."""
    assert zigzag(value) == code
    assert unzigzag(code) == value


class TestEliasGamma:
    """The Elias-gamma code of positive integers."""

    @pytest.mark.parametrize("value,bits", [(1, "1"), (2, "010"), (3, "011"), (4, "00100"), (9, "0001001")])
    def test_code_words(self, value, bits):
        """The code is the binary value preceded by one zero per extra digit."""
        writer = BitWriter()
        write_elias_gamma(writer, value)
        assert len(writer) == len(bits) == elias_gamma_length(value)
        assert writer.to_bytes() == int(bits.ljust(8 * ((len(bits) + 7) // 8), "0"), 2).to_bytes(
            (len(bits) + 7) // 8, "big")

    def test_sequence_decodes(self):
        """Concatenated code words decode in order."""
        values = [1, 7, 1 << 20, 3, 12345]
        writer = BitWriter()
        for value in values:
            write_elias_gamma(writer, value)
        reader = BitReader(writer.to_bytes())
        assert [read_elias_gamma(reader) for _ in values] == values

    @pytest.mark.parametrize("value", [0, -3])
    def test_non_positive_values_are_rejected(self, value):
        """Only positive integers have a code word."""
        with pytest.raises(ValueError):
            write_elias_gamma(BitWriter(), value)

    def test_runaway_prefix(self):
        """A prefix of more than 64 zeros is corrupt data."""
        with pytest.raises(DecodeError):
            read_elias_gamma(BitReader(bytes(16)))
