#  Copyright (c) 2026. The diffcomp authors
#  This file is part of the diffcomp project which is released under the MIT license.

"""
Bit-level writers and readers, and the universal integer codes built on them.

Bits are packed most significant bit first; the final byte is padded with zero bits.

.. autoclass:: BitWriter
   :members:
.. autoclass:: BitReader
   :members:
.. autofunction:: zigzag
.. autofunction:: unzigzag
.. autofunction:: write_elias_gamma
.. autofunction:: read_elias_gamma
.. autofunction:: elias_gamma_length
"""

from typing import List

from .errors import DecodeError


class BitWriter:
    """Collects bits and packs them into bytes."""

    def __init__(self) -> None:
        self._bits: List[int] = []

    def __len__(self) -> int:
        return len(self._bits)

    def write_bit(self, bit: int) -> None:
        """Appends a single bit."""
        self._bits.append(1 if bit else 0)

    def write_bits(self, value: int, count: int) -> None:
        """Appends the `count` low bits of `value`, most significant first."""
        for shift in range(count - 1, -1, -1):
            self._bits.append((value >> shift) & 1)

    def to_bytes(self) -> bytes:
        """The collected bits, zero-padded to whole bytes."""
        out = bytearray()
        for start in range(0, len(self._bits), 8):
            byte = 0
            chunk = self._bits[start:start + 8]
            for bit in chunk:
                byte = (byte << 1) | bit
            out.append(byte << (8 - len(chunk)))
        return bytes(out)


class BitReader:
    """Reads bits from a byte string.

    Raises:
        DecodeError: when reading past the end of the data.
    """

    def __init__(self, data: bytes) -> None:
        self._data = bytes(data)
        self._position = 0

    @property
    def remaining(self) -> int:
        """The number of unread bits, padding included."""
        return 8 * len(self._data) - self._position

    def read_bit(self) -> int:
        """Reads a single bit."""
        if self._position >= 8 * len(self._data):
            raise DecodeError(self._data)
        byte = self._data[self._position >> 3]
        bit = (byte >> (7 - (self._position & 7))) & 1
        self._position += 1
        return bit

    def read_bits(self, count: int) -> int:
        """Reads `count` bits as an unsigned integer, most significant first."""
        value = 0
        for _ in range(count):
            value = (value << 1) | self.read_bit()
        return value

    def check_padding(self) -> None:
        """Verifies that only zero padding of less than a byte is left.

        Raises:
            DecodeError: if unread data remains.
        """
        if self.remaining >= 8 or self.read_bits(self.remaining) != 0:
            raise DecodeError(self._data)


def zigzag(value: int) -> int:
    """Maps 0, -1, 1, -2, ... to 0, 1, 2, 3, ..."""
    return 2 * value if value >= 0 else -2 * value - 1


def unzigzag(code: int) -> int:
    """Inverse of :func:`zigzag`."""
    return code // 2 if code % 2 == 0 else -(code + 1) // 2


def elias_gamma_length(value: int) -> int:
    """The Elias-gamma code length of a positive integer."""
    return 2 * (value.bit_length() - 1) + 1


def write_elias_gamma(writer: BitWriter, value: int) -> None:
    """Writes a positive integer in the Elias-gamma code.

    Raises:
        ValueError: if `value` is not positive.
    """
    if value < 1:
        raise ValueError("Elias-gamma codes positive integers only, got {}".format(value))
    width = value.bit_length()
    writer.write_bits(0, width - 1)
    writer.write_bits(value, width)


def read_elias_gamma(reader: BitReader) -> int:
    """Reads an integer written by :func:`write_elias_gamma`."""
    zeros = 0
    while reader.read_bit() == 0:
        zeros += 1
        if zeros > 64:
            raise DecodeError("Elias-gamma prefix too long")
    return (1 << zeros) | reader.read_bits(zeros)
