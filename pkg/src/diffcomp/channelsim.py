#  Copyright (c) 2026. The diffcomp authors
#  This file is part of the diffcomp project which is released under the MIT license.

"""
One-shot channel simulation.

Sender and receiver share a seed. From it they derive identical random streams,
and with those streams they make the receiver's output :math:`Y` follow a prescribed
conditional law :math:`P_{Y|X=x}` while only a short message is sent.

* Dithered quantization simulates an additive uniform channel exactly:
  the index :math:`K = \\lfloor (x + W)/\\Delta \\rceil` is sent and :math:`Y = \\Delta K - W`.
* The Poisson functional representation simulates any channel whose density
  ratio to a shared reference is bounded. Candidates drawn from the reference race
  with exponential arrival times, and the index of the winner is sent.

Classes
-------

.. autoclass:: SyncedRandomness
   :members:
.. autoclass:: ChannelKind
.. autoclass:: GaussianReference
   :members:
.. autoclass:: ChannelSpec
   :members:
.. autoclass:: SimResult

Functions
---------

.. autofunction:: shared_uniform
.. autofunction:: round_half_away
.. autofunction:: dq_encode
.. autofunction:: dq_decode
.. autofunction:: pfr_encode
.. autofunction:: pfr_decode
.. autofunction:: encode_index
.. autofunction:: decode_index
.. autofunction:: index_length
.. autofunction:: chunk_plan
"""

import enum
import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .bitio import BitReader, BitWriter, elias_gamma_length, read_elias_gamma, unzigzag, write_elias_gamma, zigzag
from .errors import DecodeError, TruncationError

logger = logging.getLogger(__name__)

#: Default cap on the number of candidates a race may examine.
DEFAULT_MAX_CANDIDATES = 1 << 24
#: Candidates are generated in blocks of this size, on both sides.
CANDIDATE_BLOCK = 1024
#: Default chunk target in bits.
DEFAULT_CHUNK_BITS = 16.0

_MASK64 = (1 << 64) - 1
_LN2 = math.log(2.0)


def _splitmix64(value: int) -> int:
    value = (value + 0x9E3779B97F4A7C15) & _MASK64
    value = ((value ^ (value >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    value = ((value ^ (value >> 27)) * 0x94D049BB133111EB) & _MASK64
    return value ^ (value >> 31)


def _label_value(label: Union[int, str]) -> int:
    if isinstance(label, str):
        value = 0
        for byte in label.encode("utf-8"):
            value = _splitmix64(value ^ byte)
        return value
    return int(label) & _MASK64


@dataclass(frozen=True)
class SyncedRandomness:
    """A position in the shared randomness: ``(seed, stream, counter)``.

    Draws come from a Philox counter-based generator keyed with the seed and stream id,
    with the counter in the high word of the Philox counter. Equal triples give
    identical draws; distinct streams are independent. Streams are addressed in O(1)
    with :meth:`derive` and positions with :meth:`advance`.
    """

    seed: int
    stream: int = 0
    counter: int = 0

    def __post_init__(self) -> None:
        for name in ("seed", "stream", "counter"):
            value = getattr(self, name)
            if not 0 <= value <= _MASK64:
                raise ValueError("{} must be a 64-bit unsigned integer, got {}".format(name, value))

    def generator(self) -> np.random.Generator:
        """A fresh generator positioned at this triple."""
        bit_generator = np.random.Philox(key=self.seed | (self.stream << 64), counter=self.counter << 192)
        return np.random.Generator(bit_generator)

    def derive(self, *labels: Union[int, str]) -> "SyncedRandomness":
        """The sub-stream named by `labels` (integers or strings), at counter 0."""
        stream = self.stream
        for label in labels:
            stream = _splitmix64(stream ^ _splitmix64(_label_value(label)))
        return SyncedRandomness(self.seed, stream, 0)

    def advance(self, count: int = 1) -> "SyncedRandomness":
        """The same stream `count` positions further."""
        return replace(self, counter=(self.counter + count) & _MASK64)


def shared_uniform(randomness: SyncedRandomness, k: int, width: float) -> np.ndarray:
    """The shared dither :math:`W \\sim U[-\\Delta/2, \\Delta/2]^k`.

    Raises:
        ValueError: if `width` is not positive.
    """
    if not width > 0.0:
        raise ValueError("dither width must be positive, got {}".format(width))
    return (randomness.generator().random(k) - 0.5) * width


def round_half_away(value: np.ndarray) -> np.ndarray:
    """Rounds to the nearest integer, ties away from zero."""
    value = np.asarray(value, dtype=float)
    return np.sign(value) * np.floor(np.abs(value) + 0.5)


def dq_encode(x: np.ndarray, width: Union[float, np.ndarray], w: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Dithered quantization of `x`.

    Args:
        x: The input vector.
        width: The quantization step :math:`\\Delta`, scalar or per coordinate.
        w: The dither from :func:`shared_uniform` with the same width.

    Returns:
        ``(indices, y)`` with ``y = width * indices - w``; over the dither,
        ``y - x`` is uniform on :math:`[-\\Delta/2, \\Delta/2]^k`.

    Raises:
        ValueError: for non-finite `x`.
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("dithered quantization needs a finite input")
    indices = round_half_away((x + w) / width).astype(np.int64)
    return indices, dq_decode(indices, width, w)


def dq_decode(indices: np.ndarray, width: Union[float, np.ndarray], w: np.ndarray) -> np.ndarray:
    """The receiver side of :func:`dq_encode`: ``width * indices - w``."""
    return width * np.asarray(indices, dtype=float) - w


class ChannelKind(str, enum.Enum):
    """The supported additive channels."""

    UNIFORM_ADDITIVE = "uniform-additive"
    GAUSSIAN_ADDITIVE = "gaussian-additive"


@dataclass(frozen=True, eq=False)
class GaussianReference:
    """A product Gaussian reference law :math:`P^\\theta_Y`."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "mean", np.atleast_1d(np.asarray(self.mean, dtype=float)))
        object.__setattr__(self, "std", np.broadcast_to(np.asarray(self.std, dtype=float), self.mean.shape).copy())
        if not np.all(self.std > 0.0):
            raise ValueError("reference standard deviations must be positive")

    @property
    def dim(self) -> int:
        """The dimension."""
        return self.mean.size

    def logpdf(self, y: np.ndarray) -> np.ndarray:
        """The joint log-density, summed over the last axis."""
        z = (np.asarray(y, dtype=float) - self.mean) / self.std
        return -0.5 * np.sum(z * z + 2.0 * np.log(self.std) + math.log(2.0 * math.pi), axis=-1)

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """`count` draws, shape ``(count, dim)``."""
        return self.mean + self.std * rng.standard_normal((count, self.dim))


@dataclass(frozen=True, eq=False)
class ChannelSpec:
    """A target channel :math:`P_{Y|X}` with a reference law for simulation.

    For :attr:`ChannelKind.UNIFORM_ADDITIVE` the :attr:`scale` is the width :math:`\\Delta`
    per coordinate, for :attr:`ChannelKind.GAUSSIAN_ADDITIVE` the noise standard deviation.

    Raises:
        ValueError: for non-positive scales, a reference of the wrong dimension, or a
            Gaussian reference narrower than the channel, whose density ratio is unbounded.
    """

    kind: ChannelKind
    scale: np.ndarray
    reference: GaussianReference
    _log_norm: float = field(init=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", ChannelKind(self.kind))
        scale = np.broadcast_to(np.asarray(self.scale, dtype=float), self.reference.mean.shape).copy()
        object.__setattr__(self, "scale", scale)
        if not np.all(scale > 0.0):
            raise ValueError("channel scales must be positive")
        if self.kind is ChannelKind.GAUSSIAN_ADDITIVE:
            if np.any(self.reference.std < scale):
                raise ValueError("reference narrower than the channel: the density ratio is unbounded")
            log_norm = -float(np.sum(np.log(scale))) - 0.5 * self.dim * math.log(2.0 * math.pi)
        else:
            log_norm = -float(np.sum(np.log(scale)))
        object.__setattr__(self, "_log_norm", log_norm)

    @property
    def dim(self) -> int:
        """The dimension :math:`k`."""
        return self.reference.dim

    def log_target(self, y: np.ndarray, x: np.ndarray) -> np.ndarray:
        """The log-density of :math:`P_{Y|X=x}` at `y`, summed over the last axis."""
        offset = np.asarray(y, dtype=float) - x
        if self.kind is ChannelKind.GAUSSIAN_ADDITIVE:
            z = offset / self.scale
            return self._log_norm - 0.5 * np.sum(z * z, axis=-1)
        inside = np.all(np.abs(offset) <= 0.5 * self.scale, axis=-1)
        return np.where(inside, self._log_norm, -np.inf)

    def log_ratio(self, y: np.ndarray, x: np.ndarray) -> np.ndarray:
        """The log density ratio :math:`\\log dP_{Y|X=x}/dP^\\theta_Y` at `y`."""
        return self.log_target(y, x) - self.reference.logpdf(y)

    def log_sup(self, x: np.ndarray) -> float:
        """The supremum over `y` of :meth:`log_ratio`.

        Raises:
            ValueError: if the ratio is unbounded at `x`.
        """
        x = np.asarray(x, dtype=float)
        m, r, s = self.reference.mean, self.reference.std, self.scale
        if self.kind is ChannelKind.UNIFORM_ADDITIVE:
            far = np.abs(x - m) + 0.5 * s
            return float(self._log_norm + np.sum(np.log(r) + 0.5 * (far / r) ** 2)
                         + 0.5 * self.dim * math.log(2.0 * math.pi))
        gap = r * r - s * s
        equal = gap <= 0.0
        if np.any(equal & (x != m)):
            raise ValueError("density ratio unbounded: equal widths with shifted mean")
        quadratic = np.where(equal, 0.0, (x - m) ** 2 / (2.0 * np.where(equal, 1.0, gap)))
        return float(np.sum(np.log(r / s) + quadratic))

    def kl_bits(self, x: np.ndarray) -> float:
        """The divergence :math:`D(P_{Y|X=x} \\| P^\\theta_Y)` in bits."""
        x = np.asarray(x, dtype=float)
        m, r, s = self.reference.mean, self.reference.std, self.scale
        if self.kind is ChannelKind.GAUSSIAN_ADDITIVE:
            nats = np.log(r / s) + (s * s + (x - m) ** 2) / (2.0 * r * r) - 0.5
        else:
            nats = (-np.log(s) + np.log(r) + 0.5 * math.log(2.0 * math.pi)
                    + ((x - m) ** 2 + s * s / 12.0) / (2.0 * r * r))
        return float(np.sum(nats) / _LN2)

    def sample_target(self, x: np.ndarray, rng: np.random.Generator, count: int) -> np.ndarray:
        """Direct draws from :math:`P_{Y|X=x}`, for comparisons."""
        shape = (count, self.dim)
        if self.kind is ChannelKind.GAUSSIAN_ADDITIVE:
            return x + self.scale * rng.standard_normal(shape)
        return x + self.scale * (rng.random(shape) - 0.5)


@dataclass(frozen=True, eq=False)
class SimResult:
    """The outcome of a simulation.

    Attributes:
        y: The simulated output.
        index: The transmitted index (1-based for races).
        message: The coded index, zero-padded to whole bytes.
        nats_cost: The divergence :math:`D(P_{Y|X=x} \\| P^\\theta_Y)` in nats.
        bits_used: The exact length of the index code in bits.
        candidates: The number of candidates examined by the race.
    """

    y: np.ndarray
    index: int
    message: bytes
    nats_cost: float
    bits_used: int
    candidates: int = 0


def index_centre(expected_bits: Optional[float]) -> int:
    """The exponent the index code is centred on, from a receiver-known expected cost."""
    if expected_bits is None:
        return 0
    return max(0, int(round(expected_bits - 1.33)))


def index_length(index: int, expected_bits: Optional[float] = None) -> int:
    """The length in bits of :func:`encode_index` output."""
    exponent = index.bit_length() - 1
    return elias_gamma_length(zigzag(exponent - index_centre(expected_bits)) + 1) + exponent


def encode_index(writer: BitWriter, index: int, expected_bits: Optional[float] = None) -> None:
    """Writes a positive race index with a prefix-free code.

    The wire format is a log-Elias-gamma code centred on the expected cost, not plain Elias-gamma.
    The exponent :math:`\\lfloor \\log_2 K \\rfloor` is written as an Elias-gamma code
    of its zig-zagged offset from :func:`index_centre`, followed by the remaining
    low bits of the index verbatim. The expected length is close to the expected
    cost plus two bits; a plain Elias-gamma code would pay twice the cost.

    Raises:
        ValueError: if `index` is not positive.
    """
    if index < 1:
        raise ValueError("race indices are positive, got {}".format(index))
    exponent = index.bit_length() - 1
    write_elias_gamma(writer, zigzag(exponent - index_centre(expected_bits)) + 1)
    writer.write_bits(index, exponent)


def decode_index(reader: BitReader, expected_bits: Optional[float] = None) -> int:
    """Reads an index written by :func:`encode_index`."""
    exponent = unzigzag(read_elias_gamma(reader) - 1) + index_centre(expected_bits)
    if exponent < 0 or exponent > 62:
        raise DecodeError("race index exponent {} out of range".format(exponent))
    return (1 << exponent) | reader.read_bits(exponent)


def _candidates(randomness: SyncedRandomness) -> np.random.Generator:
    return randomness.derive("candidates").generator()


def pfr_encode(channel: ChannelSpec, x: np.ndarray, randomness: SyncedRandomness,
               max_candidates: int = DEFAULT_MAX_CANDIDATES,
               expected_bits: Optional[float] = None) -> SimResult:
    """Simulates :math:`P_{Y|X=x}` with the Poisson functional representation.

    Candidates :math:`\\bar Y_i \\sim P^\\theta_Y` and arrival times
    :math:`T_i` (cumulative standard exponentials) come from two sub-streams of
    `randomness`. The winner minimizes :math:`\\log T_i - \\log r(\\bar Y_i)`.
    The race is settled once no later candidate can win, which the ratio
    supremum certifies: later scores are at least :math:`\\log T_n - \\log \\sup r`.

    Args:
        channel: The channel and reference.
        x: The channel input.
        randomness: The shared randomness of this race.
        max_candidates: The number of candidates after which an unsettled race fails.
        expected_bits: Receiver-known expected cost, centring the index code.

    Returns:
        The simulation result; ``result.y`` follows :math:`P_{Y|X=x}` exactly.

    Raises:
        ValueError: if `max_candidates` is less than 1 or the ratio is unbounded at `x`.
        TruncationError: if the race is not settled within `max_candidates`.
    """
    if max_candidates < 1:
        raise ValueError("max_candidates must be at least 1")
    x = np.asarray(x, dtype=float)
    log_sup = channel.log_sup(x)
    candidates = _candidates(randomness)
    arrivals = randomness.derive("arrivals").generator()
    best_score = math.inf
    best_index = 0
    best_y = None
    arrival = 0.0
    drawn = 0
    bound = -math.inf
    while drawn < max_candidates:
        ys = channel.reference.sample(candidates, CANDIDATE_BLOCK)
        times = arrival + np.cumsum(arrivals.exponential(size=CANDIDATE_BLOCK))
        usable = min(CANDIDATE_BLOCK, max_candidates - drawn)
        scores = np.log(times[:usable]) - channel.log_ratio(ys[:usable], x)
        winner = int(np.argmin(scores))
        if scores[winner] < best_score:
            best_score = float(scores[winner])
            best_index = drawn + winner + 1
            best_y = ys[winner]
        arrival = float(times[usable - 1])
        drawn += usable
        bound = math.log(arrival) - log_sup
        if bound >= best_score:
            break
    else:
        raise TruncationError("race not settled within {} candidates".format(max_candidates),
                              drawn, best_score, bound)
    writer = BitWriter()
    encode_index(writer, best_index, expected_bits)
    kl_nats = channel.kl_bits(x) * _LN2
    logger.debug("race settled after %d candidates at index %d", drawn, best_index)
    return SimResult(np.array(best_y), best_index, writer.to_bytes(), kl_nats, len(writer), drawn)


def pfr_decode(index: int, channel: ChannelSpec, randomness: SyncedRandomness) -> np.ndarray:
    """Regenerates the shared candidates up to `index` and returns that candidate.

    The work is linear in `index`.

    Raises:
        ValueError: if `index` is not positive.
    """
    if index < 1:
        raise ValueError("race indices are positive, got {}".format(index))
    candidates = _candidates(randomness)
    remaining = index
    while True:
        ys = channel.reference.sample(candidates, CANDIDATE_BLOCK)
        if remaining <= CANDIDATE_BLOCK:
            return np.array(ys[remaining - 1])
        remaining -= CANDIDATE_BLOCK


def chunk_plan(k: int, per_step_cost: Union[float, Sequence[float]],
               target_chunk_bits: float = DEFAULT_CHUNK_BITS) -> List[slice]:
    """Splits `k` coordinates into contiguous chunks of roughly `target_chunk_bits` each.

    Args:
        k: The number of coordinates.
        per_step_cost: The step's total cost in bits, split evenly over the coordinates,
            or one cost per coordinate.
        target_chunk_bits: The target cost per chunk.

    Returns:
        Contiguous slices covering ``range(k)``. Coordinates are added to a chunk
        while its cost stays within the target; every chunk has at least one coordinate.

    Raises:
        ValueError: if `k` is less than 1.
    """
    if k < 1:
        raise ValueError("need at least one coordinate")
    costs = np.broadcast_to(np.asarray(per_step_cost, dtype=float) / (k if np.ndim(per_step_cost) == 0 else 1), (k,))
    chunks: List[slice] = []
    start = 0
    running = 0.0
    for index in range(k):
        cost = max(float(costs[index]), 0.0)
        if index > start and running + cost > target_chunk_bits + 1e-9:
            chunks.append(slice(start, index))
            start = index
            running = 0.0
        running += cost
    chunks.append(slice(start, k))
    return chunks
