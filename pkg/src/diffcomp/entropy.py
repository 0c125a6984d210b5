#  Copyright (c) 2026. The diffcomp authors
#  This file is part of the diffcomp project which is released under the MIT license.

"""
Bit-exact entropy coding of quantization indices.

Reference densities are discretized on the dithered quantization grid
into fixed-point tables (:class:`DiscretizedPMF`) and symbols are
coded with a carry-less range coder with a 32-bit state.
Symbols outside a table's support are coded through an escape symbol
followed by an Elias-gamma payload, so every integer is representable.

Classes
-------

.. autoclass:: DiscretizedPMF
   :members:
.. autoclass:: RangeEncoder
   :members:
.. autoclass:: RangeDecoder
   :members:
.. autoclass:: UniformNoisyNormal
   :members:

Functions
---------

.. autofunction:: quantize_probabilities
.. autofunction:: discretize_density
.. autofunction:: range_encode
.. autofunction:: range_decode
.. autofunction:: information_bits
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
import scipy.special
from scipy.stats import norm

from .bitio import elias_gamma_length
from .errors import DecodeError

logger = logging.getLogger(__name__)

#: Bits of the fixed-point probability tables.
PRECISION_BITS = 16
#: The fixed-point total of every table.
TOTAL = 1 << PRECISION_BITS

TOP = 1 << 24
BOT = 1 << 16
MASK = 0xFFFFFFFF


def quantize_probabilities(probabilities: np.ndarray, total: int = TOTAL) -> np.ndarray:
    """Rounds probabilities to positive integers summing exactly to `total`.

    Every entry gets at least one unit. The rounding excess is removed from the entries
    where one unit less costs the least expected code length, and a deficit is
    given to the entries where one unit more saves the most.

    Raises:
        ValueError: if there are more entries than units, or the mass is not positive.
    """
    probabilities = np.asarray(probabilities, dtype=float)
    mass = probabilities.sum()
    if not mass > 0.0 or not np.all(np.isfinite(probabilities)):
        raise ValueError("probabilities must have positive finite mass")
    if probabilities.size > total:
        raise ValueError("{} symbols do not fit a total of {}".format(probabilities.size, total))
    probabilities = np.maximum(probabilities, 0.0) / mass
    counts = np.maximum(np.round(probabilities * total).astype(np.int64), 1)
    while True:
        excess = int(counts.sum()) - total
        if excess == 0:
            return counts
        if excess > 0:
            with np.errstate(divide="ignore"):
                penalty = np.where(counts > 1, probabilities * np.log2(1.0 + 1.0 / (counts - 1)), np.inf)
            eligible = int(np.count_nonzero(counts > 1))
            chosen = np.argsort(penalty, kind="stable")[:min(excess, eligible)]
            counts[chosen] -= 1
        else:
            gain = probabilities * np.log2(1.0 + 1.0 / counts)
            chosen = np.argsort(-gain, kind="stable")[:min(-excess, counts.size)]
            counts[chosen] += 1


@dataclass(frozen=True, eq=False)
class DiscretizedPMF:
    """A fixed-point probability table over the integer range ``[lo, hi]`` plus an escape symbol.

    :attr:`frequencies` and :attr:`escape` are positive and sum to :data:`TOTAL`.
    """

    lo: int
    frequencies: np.ndarray
    escape: int
    cumulative: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        frequencies = self.frequencies
        if frequencies.ndim != 1 or frequencies.size < 1:
            raise ValueError("a table needs at least one symbol")
        if np.any(frequencies < 1) or self.escape < 1:
            raise ValueError("every symbol needs a non-zero mass")
        if int(frequencies.sum()) + self.escape != TOTAL:
            raise ValueError("table does not sum to the fixed-point total")
        object.__setattr__(self, "cumulative", np.concatenate(([0], np.cumsum(frequencies))).astype(np.int64))

    @classmethod
    def from_probabilities(cls, lo: int, probabilities: Sequence[float],
                           escape_probability: float = 0.0) -> "DiscretizedPMF":
        """Quantizes in-range probabilities and an escape probability into a table."""
        counts = quantize_probabilities(np.append(np.asarray(probabilities, dtype=float), escape_probability))
        return cls(int(lo), counts[:-1], int(counts[-1]))

    @property
    def hi(self) -> int:
        """The largest in-range symbol."""
        return self.lo + self.frequencies.size - 1

    @property
    def in_range_total(self) -> int:
        """The cumulative frequency where the escape symbol starts."""
        return TOTAL - self.escape

    def probability(self, symbol: int) -> float:
        """The quantized probability of an in-range `symbol`, or the escape probability."""
        if self.lo <= symbol <= self.hi:
            return float(self.frequencies[symbol - self.lo]) / TOTAL
        return self.escape / TOTAL

    def code_length(self, symbol: int) -> float:
        """The ideal code length in bits of `symbol`, escape payload included."""
        if self.lo <= symbol <= self.hi:
            return PRECISION_BITS - math.log2(int(self.frequencies[symbol - self.lo]))
        return PRECISION_BITS - math.log2(self.escape) + elias_gamma_length(self._escape_code(symbol) + 1)

    def _escape_code(self, symbol: int) -> int:
        if symbol > self.hi:
            return 2 * (symbol - self.hi - 1)
        return 2 * (self.lo - 1 - symbol) + 1

    def _escaped_symbol(self, code: int) -> int:
        if code % 2 == 0:
            return self.hi + 1 + code // 2
        return self.lo - 1 - code // 2


class RangeEncoder:
    """A carry-less range coder with a 32-bit state.

    Ranges are renormalized a byte at a time; when the range gets small
    without settling the top byte, it is cut down instead of propagating a carry.
    The coder is a single-use state machine.
    """

    def __init__(self) -> None:
        self.low = 0
        self.range = MASK
        self._out = bytearray()

    def _normalize(self) -> None:
        while True:
            if (self.low ^ (self.low + self.range)) < TOP:
                pass
            elif self.range < BOT:
                self.range = -self.low & (BOT - 1)
            else:
                break
            self._out.append((self.low >> 24) & 0xFF)
            self.range = (self.range << 8) & MASK
            self.low = (self.low << 8) & MASK

    def encode(self, cumulative: int, frequency: int, total_bits: int = PRECISION_BITS) -> None:
        """Narrows the range to ``[cumulative, cumulative + frequency)`` out of ``2**total_bits``."""
        step = self.range >> total_bits
        self.low += cumulative * step
        self.range = frequency * step
        self._normalize()

    def encode_bit(self, bit: int) -> None:
        """Codes an equiprobable bit."""
        self.encode(1 if bit else 0, 1, 1)

    def finish(self) -> bytes:
        """Flushes the fewest bytes that identify a value in the final range.

        The decoder reads zero bytes past the end of the data.
        """
        count = _flush_length(self.low, self.range)
        unit = 1 << (8 * (4 - count))
        value = -(-self.low // unit) * unit
        for index in range(count):
            self._out.append((value >> (24 - 8 * index)) & 0xFF)
        return bytes(self._out)


def _flush_length(low: int, width: int) -> int:
    """The fewest bytes whose zero-padded value falls in ``[low, low + width)``."""
    for count in range(5):
        unit = 1 << (8 * (4 - count))
        if -(-low // unit) * unit < low + width:
            return count
    return 4


class RangeDecoder:
    """Decoder for :class:`RangeEncoder` output.

    Raises:
        DecodeError: when the data is inconsistent with the decoded symbols,
            including truncated or overlong data (checked by :meth:`finish`).
    """

    def __init__(self, data: bytes) -> None:
        self._data = bytes(data)
        self._position = 0
        self.low = 0
        self.range = MASK
        self.code = 0
        self._step = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._read_byte()
        self._shifts = 0

    def _read_byte(self) -> int:
        position = self._position
        self._position += 1
        return self._data[position] if position < len(self._data) else 0

    def _normalize(self) -> None:
        while True:
            if (self.low ^ (self.low + self.range)) < TOP:
                pass
            elif self.range < BOT:
                self.range = -self.low & (BOT - 1)
            else:
                break
            self.code = ((self.code << 8) | self._read_byte()) & MASK
            self.range = (self.range << 8) & MASK
            self.low = (self.low << 8) & MASK
            self._shifts += 1

    def target(self, total_bits: int = PRECISION_BITS) -> int:
        """The cumulative frequency of the next symbol, to be followed by :meth:`consume`."""
        self._step = self.range >> total_bits
        value = (self.code - self.low) // self._step
        if not 0 <= value < (1 << total_bits):
            raise DecodeError(self._data)
        return value

    def consume(self, cumulative: int, frequency: int) -> None:
        """Removes the symbol found from :meth:`target` from the state."""
        self.low += cumulative * self._step
        self.range = frequency * self._step
        self._normalize()

    def decode_bit(self) -> int:
        """Decodes a bit written by :meth:`RangeEncoder.encode_bit`."""
        bit = self.target(1)
        self.consume(bit, 1)
        return bit

    def finish(self) -> None:
        """Checks that exactly the encoder's bytes were consumed.

        Raises:
            DecodeError: on truncated or overlong data.
        """
        expected = self._shifts + _flush_length(self.low, self.range)
        if expected != len(self._data):
            raise DecodeError("range-coded data has {} bytes, decoding needs {}".format(len(self._data), expected))


PMFs = Union[DiscretizedPMF, Sequence[DiscretizedPMF]]


def _tables(pmfs: PMFs, count: int) -> Sequence[DiscretizedPMF]:
    if isinstance(pmfs, DiscretizedPMF):
        return [pmfs] * count
    if len(pmfs) != count:
        raise ValueError("need one table per symbol, got {} for {}".format(len(pmfs), count))
    return pmfs


def range_encode(symbols: Sequence[int], pmfs: PMFs) -> bytes:
    """Range-codes integer `symbols`, each under its own table.

    Args:
        symbols: The symbols.
        pmfs: One table per symbol, or a single table for all.

    Returns:
        The coded bytes; an empty sequence codes to an empty byte string.
    """
    symbols = [int(symbol) for symbol in symbols]
    encoder = RangeEncoder()
    for symbol, pmf in zip(symbols, _tables(pmfs, len(symbols))):
        if pmf.lo <= symbol <= pmf.hi:
            offset = symbol - pmf.lo
            encoder.encode(int(pmf.cumulative[offset]), int(pmf.frequencies[offset]))
            continue
        logger.warning("escape-coding symbol %d outside [%d, %d]", symbol, pmf.lo, pmf.hi)
        encoder.encode(pmf.in_range_total, pmf.escape)
        payload = pmf._escape_code(symbol) + 1  # pylint: disable=protected-access
        width = payload.bit_length()
        for _ in range(width - 1):
            encoder.encode_bit(0)
        for shift in range(width - 1, -1, -1):
            encoder.encode_bit((payload >> shift) & 1)
    return encoder.finish()


def range_decode(data: bytes, pmfs: PMFs, count: Optional[int] = None) -> np.ndarray:
    """Recovers symbols coded by :func:`range_encode` with identical tables.

    Args:
        data: The coded bytes.
        pmfs: One table per symbol, or a single table together with `count`.
        count: The number of symbols when a single table is given.

    Raises:
        DecodeError: for truncated or corrupted data.
    """
    if isinstance(pmfs, DiscretizedPMF):
        tables = _tables(pmfs, count or 0)
    else:
        tables = pmfs
    decoder = RangeDecoder(data)
    symbols: List[int] = []
    for pmf in tables:
        value = decoder.target()
        if value >= pmf.in_range_total:
            decoder.consume(pmf.in_range_total, pmf.escape)
            zeros = 0
            while decoder.decode_bit() == 0:
                zeros += 1
                if zeros > 62:
                    raise DecodeError(data)
            payload = 1
            for _ in range(zeros):
                payload = (payload << 1) | decoder.decode_bit()
            symbols.append(pmf._escaped_symbol(payload - 1))  # pylint: disable=protected-access
            continue
        offset = int(np.searchsorted(pmf.cumulative, value, side="right")) - 1
        decoder.consume(int(pmf.cumulative[offset]), int(pmf.frequencies[offset]))
        symbols.append(pmf.lo + offset)
    decoder.finish()
    return np.asarray(symbols, dtype=np.int64)


def information_bits(symbols: Sequence[int], pmfs: PMFs) -> float:
    """The ideal code length in bits of `symbols` under the quantized tables."""
    symbols = [int(symbol) for symbol in symbols]
    return float(sum(pmf.code_length(symbol) for symbol, pmf in zip(symbols, _tables(pmfs, len(symbols)))))


def discretize_density(logdensity: Callable[[np.ndarray], np.ndarray], width: float, offset: float,
                       lo: int, hi: int, cdf: Optional[Callable[[np.ndarray], np.ndarray]] = None
                       ) -> DiscretizedPMF:
    """Discretizes a density on the dithered grid of cell centres ``width * k - offset``.

    Symbol `k` gets the mass of the cell ``[width*k - offset - width/2, width*k - offset + width/2]``.
    With a `cdf` the masses are exact differences of the CDF and the mass outside
    ``[lo, hi]`` goes to the escape symbol; otherwise the mass is the density at the cell
    centre times the width and the escape symbol gets the minimum mass.

    Raises:
        ValueError: for a non-positive width, ``lo >= hi``, or zero mass on the range.
    """
    if not width > 0.0:
        raise ValueError("cell width must be positive")
    if not lo < hi:
        raise ValueError("need lo < hi, got {} and {}".format(lo, hi))
    centres = width * np.arange(lo, hi + 1, dtype=float) - offset
    if cdf is not None:
        edges = np.append(centres - 0.5 * width, centres[-1] + 0.5 * width)
        cumulative = np.asarray(cdf(edges), dtype=float)
        masses = np.maximum(np.diff(cumulative), 0.0)
        escape = max(cumulative[0], 0.0) + max(1.0 - cumulative[-1], 0.0)
    else:
        masses = np.exp(np.asarray(logdensity(centres), dtype=float)) * width
        escape = 0.0
    if not masses.sum() > 0.0:
        raise ValueError("the density has no mass on [{}, {}]".format(lo, hi))
    return DiscretizedPMF.from_probabilities(lo, masses, escape)


class UniformNoisyNormal:
    """The law of :math:`N(\\mu, s^2) + U(-w/2, w/2)`, coordinate-wise.

    With :math:`G(z) = z\\Phi(z) + \\varphi(z)` the CDF is
    :math:`F(y) = \\frac{s}{w}[G(\\frac{y + w/2 - \\mu}{s}) - G(\\frac{y - w/2 - \\mu}{s})]`.
    A zero `std` degenerates to the uniform law.
    """

    def __init__(self, mean: np.ndarray, std: np.ndarray, width: float) -> None:
        if not width > 0.0:
            raise ValueError("uniform width must be positive")
        self.mean = np.asarray(mean, dtype=float)
        self.std = np.asarray(std, dtype=float)
        self.width = float(width)

    @staticmethod
    def _g(z: np.ndarray) -> np.ndarray:
        return z * scipy.special.ndtr(z) + norm.pdf(z)

    def cdf(self, y: np.ndarray) -> np.ndarray:
        """The CDF at `y` (broadcast against the parameters)."""
        y = np.asarray(y, dtype=float)
        half = 0.5 * self.width
        uniform = np.clip((y - self.mean + half) / self.width, 0.0, 1.0)
        std = np.where(self.std > 0.0, self.std, 1.0)
        upper = self._g((y + half - self.mean) / std)
        lower = self._g((y - half - self.mean) / std)
        smooth = np.clip(std / self.width * (upper - lower), 0.0, 1.0)
        return np.where(self.std > 0.0, smooth, uniform)

    def pdf(self, y: np.ndarray) -> np.ndarray:
        """The density at `y`."""
        y = np.asarray(y, dtype=float)
        half = 0.5 * self.width
        std = np.where(self.std > 0.0, self.std, 1.0)
        smooth = (scipy.special.ndtr((y + half - self.mean) / std)
                  - scipy.special.ndtr((y - half - self.mean) / std)) / self.width
        inside = (np.abs(y - self.mean) <= half) / self.width
        return np.where(self.std > 0.0, smooth, inside)

    def logpdf(self, y: np.ndarray) -> np.ndarray:
        """The log-density at `y`."""
        with np.errstate(divide="ignore"):
            return np.log(self.pdf(y))

    def cell_masses(self, offsets: np.ndarray, width: float) -> np.ndarray:
        """The masses of cells of `width` centred on ``offsets`` (broadcast)."""
        offsets = np.asarray(offsets, dtype=float)
        return np.maximum(self.cdf(offsets + 0.5 * width) - self.cdf(offsets - 0.5 * width), 0.0)

    def kl_from_uniform(self, centre: np.ndarray, nodes: int = 64) -> np.ndarray:
        """Per-coordinate KL divergence in nats from :math:`U(centre \\pm w/2)` to this law.

        Evaluated with Gauss-Legendre quadrature over the uniform's support.
        """
        points, weights = np.polynomial.legendre.leggauss(nodes)
        centre = np.asarray(centre, dtype=float)
        y = centre[..., np.newaxis] + 0.5 * self.width * points
        expanded = UniformNoisyNormal(self.mean[..., np.newaxis], self.std[..., np.newaxis], self.width)
        cross = -0.5 * np.sum(weights * expanded.logpdf(y), axis=-1)
        return cross - math.log(self.width)
