#  Copyright (c) 2026. The diffcomp authors
#  This file is part of the diffcomp project which is released under the MIT license.

"""
Progressive compression with an unconditional diffusion process.

The sender simulates the forward posterior :math:`X_s \\mid X_t, X_0`
step by step down the :class:`~diffcomp.schedule.TimeGrid`, against
reference kernels that the receiver can evaluate from :math:`X_t` alone.
Every step is one frame, so each frame boundary is a valid preview.

Two backends are provided:

``gaussian-pfr``
   Gaussian forward posteriors, simulated in chunks with the Poisson functional
   representation against the oracle's Gaussian reverse kernel.
   :math:`X_T` itself is sent first, against a standard normal reference.

``uqdm-dq``
   Uniform forward posteriors of the same variance, simulated exactly with
   dithered quantization; the indices are range-coded under the reverse kernel
   convolved with the step's uniform law. :math:`X_T` is not transmitted but drawn
   from the shared randomness.

Stream layout (little-endian)::

    magic "DFC1" | version u16 | config digest (32 bytes) | seed u64 | dim u32 |
    grid length u16 | grid times f64 ... | frames ...

Each frame is length-prefixed (see :mod:`diffcomp.framing`).

Classes
-------

.. autoclass:: BackendKind
.. autoclass:: ReconstructionKind
.. autoclass:: CodecConfig
   :members: digest, description
.. autoclass:: Bitstream
   :members:
.. autoclass:: CostLedger
   :members:
.. autoclass:: ProgressiveDecoder
   :members:

Functions
---------

.. autofunction:: encode_progressive
.. autofunction:: decode_progressive
.. autofunction:: reconstruct
.. autofunction:: reconstruct_sde
.. autofunction:: reconstruct_ode
.. autofunction:: reconstruct_posterior_mean
.. autofunction:: lossless_tail_encode
.. autofunction:: lossless_tail_decode
.. autofunction:: cost_estimate
.. autofunction:: negative_elbo_bits
.. autofunction:: trajectory_logdensity
.. autofunction:: joint_reference_logdensity
"""

import enum
import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from typing import IO, Any, Dict, List, NamedTuple, Optional, Tuple, Union

import numpy as np
from scipy.stats import norm

from .bitio import BitReader, BitWriter
from .channelsim import (DEFAULT_CHUNK_BITS, DEFAULT_MAX_CANDIDATES, ChannelKind, ChannelSpec, GaussianReference,
                         SyncedRandomness, chunk_plan, decode_index, dq_decode, dq_encode, encode_index,
                         pfr_decode, pfr_encode, round_half_away, shared_uniform)
from .entropy import DiscretizedPMF, UniformNoisyNormal, discretize_density, information_bits, range_decode, \
    range_encode
from .errors import ProtocolError, TruncationError
from .framing import LENGTH_PREFIX, FrameStream, encode_frame, split_frames
from .schedule import NoiseSchedule, TimeGrid, posterior_coefficients
from .sources import GaussianSource, PatchBankSource, SourceOracle, _check_finite, posterior_mean, velocity

logger = logging.getLogger(__name__)

#: Magic bytes of a bitstream.
FORMAT_MAGIC = b"DFC1"
#: Bitstream format version.
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sH32sQIH")

#: Default number of ancestral steps of the stochastic reconstruction.
DEFAULT_SDE_STEPS = 16
#: Default number of RK4 steps of the deterministic reconstruction.
DEFAULT_ODE_STEPS = 64
#: The deterministic reconstruction integrates down to this fraction of T.
ODE_END_FRACTION = 1e-4

# Reference spreads are floored relative to the channel, keeping density ratios bounded.
_SPREAD_FLOOR = 1e-6
# Symbol tables of the uniform backend cover this many reference deviations around the mean.
_TABLE_SPAN = 10.0
_MAX_TABLE_HALF = 2048

_LN2 = math.log(2.0)


class BackendKind(str, enum.Enum):
    """The channel simulation backend of the codec."""

    GAUSSIAN_PFR = "gaussian-pfr"
    UQDM_DQ = "uqdm-dq"


class ReconstructionKind(str, enum.Enum):
    """How a decoded state is turned into a reconstruction of :math:`X_0`."""

    SDE = "sde"
    ODE = "ode"
    POSTERIOR_MEAN = "posterior-mean"


@dataclass(frozen=True, eq=False)
class CodecConfig:
    """Everything sender and receiver must agree on.

    Raises:
        ValueError: if the grid does not start at the schedule's end time, for a lossless
            tail on a continuous source, or for out-of-range numeric settings.
    """

    schedule: NoiseSchedule
    grid: TimeGrid
    backend: BackendKind
    oracle: SourceOracle
    seed: int = 0
    chunk_target_bits: float = DEFAULT_CHUNK_BITS
    lossless_tail: bool = False
    reconstruction: ReconstructionKind = ReconstructionKind.SDE
    max_candidates: int = DEFAULT_MAX_CANDIDATES
    ode_steps: int = DEFAULT_ODE_STEPS
    sde_steps: int = DEFAULT_SDE_STEPS
    digest_override: Optional[bytes] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "backend", BackendKind(self.backend))
        object.__setattr__(self, "reconstruction", ReconstructionKind(self.reconstruction))
        if abs(self.grid.T - self.schedule.T) > 1e-9 * self.schedule.T:
            raise ValueError("grid starts at {} but the schedule ends at {}".format(self.grid.T, self.schedule.T))
        if self.lossless_tail and not isinstance(self.oracle, PatchBankSource):
            raise ValueError("a lossless tail needs a discrete (image-patches) source")
        if not 0 <= self.seed < 1 << 64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if not self.chunk_target_bits > 0.0:
            raise ValueError("chunk_target_bits must be positive")
        if self.max_candidates < 1 or self.ode_steps < 1 or self.sde_steps < 1:
            raise ValueError("max_candidates, ode_steps and sde_steps must be at least 1")
        if self.digest_override is not None and len(self.digest_override) != 32:
            raise ValueError("a config digest has 32 bytes")

    @property
    def dim(self) -> int:
        """The source dimension."""
        return self.oracle.dim

    def description(self) -> Dict[str, Any]:
        """The settings that determine the bitstream, as a JSON-serializable dictionary."""
        return {
            "backend": self.backend.value,
            "chunk_target_bits": self.chunk_target_bits,
            "grid": list(self.grid.steps),
            "lossless_tail": self.lossless_tail,
            "max_candidates": self.max_candidates,
            "oracle": self.oracle.describe(),
            "schedule": {
                "kind": self.schedule.kind.value,
                "T": self.schedule.T,
                "beta_min": self.schedule.beta_min,
                "beta_max": self.schedule.beta_max,
            },
        }

    @property
    def digest(self) -> bytes:
        """The SHA-256 digest written into stream headers.

        This is :attr:`digest_override` when given (the run configuration's digest),
        otherwise the digest of :meth:`description`.
        """
        if self.digest_override is not None:
            return self.digest_override
        text = json.dumps(self.description(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).digest()

    @property
    def step_frames(self) -> int:
        """The number of frames carrying grid steps."""
        if self.backend is BackendKind.GAUSSIAN_PFR:
            return len(self.grid)
        return len(self.grid) - 1

    @property
    def frame_offset(self) -> int:
        """Grid step ``j`` travels in frame ``j - frame_offset``."""
        return 0 if self.backend is BackendKind.GAUSSIAN_PFR else 1


def _read_exactly(stream: IO[bytes], size: int) -> bytes:
    chunks = []
    while size > 0:
        chunk = stream.read(size)
        if not chunk:
            break
        chunks.append(chunk)
        size -= len(chunk)
    return b"".join(chunks)


@dataclass(frozen=True)
class Bitstream:
    """A header and the ordered frame payloads."""

    digest: bytes
    seed: int
    dim: int
    times: Tuple[float, ...]
    frames: Tuple[bytes, ...] = ()
    version: int = FORMAT_VERSION

    def header_bytes(self) -> bytes:
        """The serialized header."""
        return (_HEADER.pack(FORMAT_MAGIC, self.version, self.digest, self.seed, self.dim, len(self.times))
                + struct.pack("<{}d".format(len(self.times)), *self.times))

    def to_bytes(self) -> bytes:
        """The serialized stream: header followed by the framed payloads."""
        return self.header_bytes() + b"".join(encode_frame(payload) for payload in self.frames)

    def prefix(self, frames: int) -> "Bitstream":
        """The stream cut after the first `frames` frames."""
        if frames < 0:
            raise ValueError("frame count must be non-negative")
        return replace(self, frames=self.frames[:frames])

    @property
    def frame_boundaries(self) -> List[int]:
        """Byte offsets in :meth:`to_bytes` at which a prefix ends on a frame boundary."""
        offsets = [len(self.header_bytes())]
        for payload in self.frames:
            offsets.append(offsets[-1] + LENGTH_PREFIX + len(payload))
        return offsets

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        """Parses a serialized stream, or a prefix of one ending at a frame boundary.

        Raises:
            ProtocolError: for a malformed header or a truncated frame.
        """
        data = bytes(data)
        if len(data) < _HEADER.size:
            raise ProtocolError(data)
        magic, version, digest, seed, dim, count = _HEADER.unpack_from(data)
        if magic != FORMAT_MAGIC:
            raise ProtocolError(magic)
        if version != FORMAT_VERSION:
            raise ProtocolError("unsupported bitstream version {}".format(version))
        end = _HEADER.size + 8 * count
        if len(data) < end or count == 0:
            raise ProtocolError("truncated grid in header")
        times = struct.unpack_from("<{}d".format(count), data, _HEADER.size)
        return cls(digest, seed, dim, tuple(times), tuple(split_frames(data[end:])), version)

    @classmethod
    def read_header(cls, stream: IO[bytes]) -> "Bitstream":
        """Reads only the header from a binary stream, which is left at the first frame.

        Returns:
            A stream without frames.

        Raises:
            ProtocolError: for a malformed or truncated header.
        """
        head = _read_exactly(stream, _HEADER.size)
        if len(head) < _HEADER.size:
            raise ProtocolError(head)
        magic = _HEADER.unpack_from(head)[0]
        if magic != FORMAT_MAGIC:
            raise ProtocolError(magic)
        count = _HEADER.unpack_from(head)[-1]
        return cls.from_bytes(head + _read_exactly(stream, 8 * count))

    def write_to(self, stream: IO[bytes]) -> None:
        """Writes the header, then every payload as a frame."""
        stream.write(self.header_bytes())
        frames = FrameStream(stream)
        for payload in self.frames:
            frames.send_msg(payload)


@dataclass
class CostLedger:
    """Per-step costs in bits.

    ``theoretical`` holds the step divergences :math:`C_t` of the realized trajectory
    (or their expectation, from :func:`cost_estimate`), ``measured`` the payload bits
    the step's code actually writes, ``overhead`` the remaining frame bits
    (byte padding of an index code and the length prefix) and ``ideal`` the code
    length of the step under its quantized tables, before the range coder's flush.
    """

    times: List[float] = field(default_factory=list)
    theoretical: List[float] = field(default_factory=list)
    measured: List[float] = field(default_factory=list)
    overhead: List[float] = field(default_factory=list)
    ideal: List[float] = field(default_factory=list)
    reference_bits: Optional[float] = None

    def add(self, time: float, theoretical: float, measured: float = 0.0, overhead: float = 0.0,
            ideal: Optional[float] = None) -> None:
        """Appends one step; `ideal` defaults to `measured`."""
        if measured < 0.0:
            raise ValueError("measured bits cannot be negative")
        self.times.append(float(time))
        self.theoretical.append(float(theoretical))
        self.measured.append(float(measured))
        self.overhead.append(float(overhead))
        self.ideal.append(float(measured if ideal is None else ideal))

    @property
    def total(self) -> float:
        """The total theoretical cost :math:`C^\\theta`."""
        return float(sum(self.theoretical))

    @property
    def measured_total(self) -> float:
        """The total measured code length."""
        return float(sum(self.measured))

    @property
    def ideal_total(self) -> float:
        """The total ideal code length under the coding tables."""
        return float(sum(self.ideal))

    @property
    def stream_bits(self) -> float:
        """All frame bits, overhead included."""
        return float(sum(self.measured) + sum(self.overhead))

    def to_json(self) -> str:
        """Serializes the ledger."""
        return json.dumps({
            "times": self.times,
            "theoretical": self.theoretical,
            "measured": self.measured,
            "overhead": self.overhead,
            "ideal": self.ideal,
            "reference_bits": self.reference_bits,
            "total": self.total,
            "measured_total": self.measured_total,
            "ideal_total": self.ideal_total,
            "stream_bits": self.stream_bits,
        }, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CostLedger":
        """Restores a ledger written by :meth:`to_json`."""
        record = json.loads(text)
        return cls(record["times"], record["theoretical"], record["measured"], record["overhead"],
                   record.get("ideal", list(record["measured"])), record.get("reference_bits"))


class _GaussianKernel(NamedTuple):
    """A Gaussian forward posterior and the Gaussian reference for it."""

    xt_coefficient: float
    x0_coefficient: float
    scale: float
    mean: np.ndarray
    std: np.ndarray
    expected: np.ndarray

    def target(self, x_t: np.ndarray, x0: np.ndarray) -> np.ndarray:
        return self.xt_coefficient * x_t + self.x0_coefficient * x0

    def channel(self, chunk: slice) -> ChannelSpec:
        reference = GaussianReference(self.mean[..., chunk], self.std[..., chunk])
        return ChannelSpec(ChannelKind.GAUSSIAN_ADDITIVE, self.scale, reference)

    def kl_bits(self, target: np.ndarray) -> np.ndarray:
        variance = self.std * self.std
        spread = self.scale ** 2 + (target - self.mean) ** 2
        nats = 0.5 * (np.log(variance / self.scale ** 2) + spread / variance - 1.0)
        return np.sum(nats, axis=-1) / _LN2


class _UniformKernel(NamedTuple):
    """A uniform forward posterior and the Gaussian-convolved-with-uniform reference for it."""

    xt_coefficient: float
    x0_coefficient: float
    width: float
    mean: np.ndarray
    std: np.ndarray

    def target(self, x_t: np.ndarray, x0: np.ndarray) -> np.ndarray:
        return self.xt_coefficient * x_t + self.x0_coefficient * x0

    def reference(self) -> UniformNoisyNormal:
        return UniformNoisyNormal(self.mean, self.std, self.width)

    def kl_bits(self, target: np.ndarray) -> np.ndarray:
        return np.sum(self.reference().kl_from_uniform(target), axis=-1) / _LN2

    def tables(self, dither: np.ndarray) -> List[DiscretizedPMF]:
        """One symbol table per coordinate; symbol ``k`` stands for ``width * k - dither``."""
        tables = []
        for mean, std, offset in zip(self.mean, self.std, dither):
            centre = int(round_half_away((mean + offset) / self.width))
            half = min(int(math.ceil(_TABLE_SPAN * std / self.width)) + 2, _MAX_TABLE_HALF)
            tables.append(discretize_density(lambda y, m=mean, s=std: norm.logpdf(y, m, s), self.width, float(offset),
                                             centre - half, centre + half,
                                             cdf=lambda y, m=mean, s=std: norm.cdf(y, m, s)))
        return tables


def _oracle_moments(oracle: SourceOracle, schedule: NoiseSchedule, x_t: np.ndarray,
                    t: float) -> Tuple[np.ndarray, np.ndarray]:
    alpha = float(schedule.alpha(t))
    sigma = float(schedule.sigma(t))
    x_t = _check_finite(x_t)
    return oracle.denoise(x_t, alpha, sigma), oracle.posterior_variance(x_t, alpha, sigma)


def _gaussian_step(config: CodecConfig, x_t: np.ndarray, t: float, s: float) -> _GaussianKernel:
    a, c, variance = posterior_coefficients(config.schedule, t, s)
    x_hat, v = _oracle_moments(config.oracle, config.schedule, x_t, t)
    spread = np.maximum(c * c * v, _SPREAD_FLOOR * variance)
    expected = 0.5 * np.log2(1.0 + spread / variance)
    return _GaussianKernel(a, c, math.sqrt(variance), a * x_t + c * x_hat, np.sqrt(variance + spread), expected)


def _gaussian_prior(config: CodecConfig) -> _GaussianKernel:
    schedule = config.schedule
    alpha = float(schedule.alpha(schedule.T))
    sigma2 = float(schedule.sigma2(schedule.T))
    k = config.dim
    second = config.oracle.second_moment()
    expected = np.maximum(0.5 * (-math.log(sigma2) + sigma2 + alpha * alpha * second - 1.0) / _LN2, 0.0)
    return _GaussianKernel(0.0, alpha, math.sqrt(sigma2), np.zeros(k), np.ones(k), expected)


def _uniform_step(config: CodecConfig, x_t: np.ndarray, t: float, s: float) -> _UniformKernel:
    a, c, variance = posterior_coefficients(config.schedule, t, s)
    width = math.sqrt(12.0 * variance)
    x_hat, v = _oracle_moments(config.oracle, config.schedule, x_t, t)
    std = np.maximum(c * np.sqrt(v), _SPREAD_FLOOR * width)
    return _UniformKernel(a, c, width, a * x_t + c * x_hat, std)


def _shared_prior(randomness: SyncedRandomness, dim: int) -> np.ndarray:
    """The shared draw of :math:`X_T` from the standard normal reference."""
    return randomness.derive("prior").generator().standard_normal(dim)


def _frame_overhead(payload: bytes, measured: float) -> float:
    return 8.0 * (len(payload) + LENGTH_PREFIX) - measured


def _encode_race(config: CodecConfig, kernel: _GaussianKernel, target: np.ndarray,
                 randomness: SyncedRandomness, step: int) -> Tuple[np.ndarray, bytes, int]:
    writer = BitWriter()
    y = np.empty(config.dim)
    for chunk_index, chunk in enumerate(chunk_plan(config.dim, kernel.expected, config.chunk_target_bits)):
        expected = float(np.sum(kernel.expected[chunk]))
        try:
            result = pfr_encode(kernel.channel(chunk), target[chunk],
                                randomness.derive("step", step, "chunk", chunk_index), config.max_candidates, expected)
        except TruncationError as error:
            raise TruncationError("step {} chunk {}: {}".format(step, chunk_index, error), error.candidates,
                                  error.best_score, error.bound, step, chunk_index) from error
        encode_index(writer, result.index, expected)
        y[chunk] = result.y
    return y, writer.to_bytes(), len(writer)


def _decode_race(config: CodecConfig, kernel: _GaussianKernel, payload: bytes,
                 randomness: SyncedRandomness, step: int) -> np.ndarray:
    reader = BitReader(payload)
    y = np.empty(config.dim)
    for chunk_index, chunk in enumerate(chunk_plan(config.dim, kernel.expected, config.chunk_target_bits)):
        index = decode_index(reader, float(np.sum(kernel.expected[chunk])))
        y[chunk] = pfr_decode(index, kernel.channel(chunk), randomness.derive("step", step, "chunk", chunk_index))
    reader.check_padding()
    return y


def _check_input(x0: np.ndarray, config: CodecConfig) -> np.ndarray:
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (config.dim,):
        raise ValueError("input of shape {} does not match dimension {}".format(x0.shape, config.dim))
    return _check_finite(x0)


def encode_progressive(x0: np.ndarray, config: CodecConfig) -> Tuple[Bitstream, CostLedger, np.ndarray]:
    """Encodes `x0` into a progressive bitstream.

    Args:
        x0: The source vector, of the oracle's dimension. For a lossless tail
            it must be an atom of the patch bank.
        config: The codec configuration.

    Returns:
        ``(bitstream, ledger, trajectory)``; the trajectory holds the state at every
        grid step, as the decoder will reproduce it, shape ``(len(grid), dim)``.

    Raises:
        ValueError: for a wrongly shaped or non-finite input, a non-finite intermediate state,
            or a lossless tail for a value outside the patch bank.
        TruncationError: when a race is not settled; the error names step and chunk.
    """
    x0 = _check_input(x0, config)
    schedule = config.schedule
    root = SyncedRandomness(config.seed)
    ledger = CostLedger(reference_bits=_reference_bits(config))
    frames: List[bytes] = []
    if config.backend is BackendKind.GAUSSIAN_PFR:
        kernel = _gaussian_prior(config)
        target = kernel.target(np.zeros(config.dim), x0)
        x_t, payload, bits = _encode_race(config, kernel, target, root, 0)
        ledger.add(schedule.T, float(kernel.kl_bits(target)), bits, _frame_overhead(payload, bits))
        frames.append(payload)
    else:
        x_t = _shared_prior(root, config.dim)
    states = [x_t]
    for step, (t, s) in enumerate(config.grid.transitions(), start=1):
        if config.backend is BackendKind.GAUSSIAN_PFR:
            kernel = _gaussian_step(config, x_t, t, s)
            target = kernel.target(x_t, x0)
            theoretical = float(kernel.kl_bits(target))
            x_t, payload, bits = _encode_race(config, kernel, target, root, step)
            measured = ideal = float(bits)
        else:
            uniform = _uniform_step(config, x_t, t, s)
            target = uniform.target(x_t, x0)
            theoretical = float(uniform.kl_bits(target))
            dither = shared_uniform(root.derive("step", step, "dither"), config.dim, uniform.width)
            indices, x_t = dq_encode(target, uniform.width, dither)
            tables = uniform.tables(dither)
            payload = range_encode(indices, tables)
            ideal = information_bits(indices, tables)
            measured = 8.0 * len(payload)
        x_t = _check_finite(x_t)
        ledger.add(s, theoretical, measured, _frame_overhead(payload, measured), ideal)
        frames.append(payload)
        states.append(x_t)
        logger.info("step %d at t=%.6g: %d bytes, %.2f ideal bits for a cost of %.2f bits",
                    step, s, len(payload), ideal, theoretical)
    if config.lossless_tail:
        payload, bits = lossless_tail_encode(x0, x_t, config.grid.tau, config.oracle, schedule)
        ledger.add(0.0, bits, 8.0 * len(payload), _frame_overhead(payload, 8.0 * len(payload)), bits)
        frames.append(payload)
    bitstream = Bitstream(config.digest, config.seed, config.dim, config.grid.steps, tuple(frames))
    return bitstream, ledger, np.stack(states)


def _check_header(bitstream: Bitstream, config: CodecConfig) -> None:
    if bitstream.digest != config.digest:
        raise ProtocolError("config digest mismatch")
    if bitstream.dim != config.dim:
        raise ProtocolError("stream dimension {} does not match {}".format(bitstream.dim, config.dim))
    if tuple(bitstream.times) != tuple(config.grid.steps):
        raise ProtocolError("stream grid does not match the configured grid")
    allowed = config.step_frames + (1 if config.lossless_tail else 0)
    if len(bitstream.frames) > allowed:
        raise ProtocolError("stream has {} frames, at most {} expected".format(len(bitstream.frames), allowed))


class ProgressiveDecoder:
    """Decodes a stream one frame at a time.

    Args:
        header: The stream header; any frames it carries are not decoded.
        config: The codec configuration.

    Raises:
        ProtocolError: for a digest, dimension or grid mismatch.
    """

    def __init__(self, header: Bitstream, config: CodecConfig) -> None:
        _check_header(header, config)
        self.config = config
        self._root = SyncedRandomness(header.seed)
        self.state = _shared_prior(self._root, config.dim)
        self.step = -1 if config.backend is BackendKind.GAUSSIAN_PFR else 0
        self.frames = 0

    @property
    def capacity(self) -> int:
        """Number of frames a complete stream carries."""
        return self.config.step_frames + (1 if self.config.lossless_tail else 0)

    def push(self, payload: bytes) -> Tuple[np.ndarray, int]:
        """Decodes the next frame.

        Returns:
            ``(x, step)`` after this frame, as for :func:`decode_progressive`.

        Raises:
            ProtocolError: when the stream has more frames than the configuration allows.
            DecodeError: for corrupted frame contents.
        """
        config = self.config
        if self.frames >= self.capacity:
            raise ProtocolError("stream has more than {} frames".format(self.capacity))
        step = self.step + 1
        if step == 0:
            x_t = _decode_race(config, _gaussian_prior(config), payload, self._root, 0)
        elif step < len(config.grid):
            t, s = config.grid.transitions()[step - 1]
            if config.backend is BackendKind.GAUSSIAN_PFR:
                x_t = _decode_race(config, _gaussian_step(config, self.state, t, s), payload, self._root, step)
            else:
                uniform = _uniform_step(config, self.state, t, s)
                dither = shared_uniform(self._root.derive("step", step, "dither"), config.dim, uniform.width)
                x_t = dq_decode(range_decode(payload, uniform.tables(dither)), uniform.width, dither)
        else:
            x_t = lossless_tail_decode(payload, self.state, config.grid.tau, config.oracle, config.schedule)
        self.state = _check_finite(x_t)
        self.step = step
        self.frames += 1
        return self.state, self.step


def decode_progressive(stream: Union[bytes, Bitstream], config: CodecConfig,
                       frames: Optional[int] = None) -> Tuple[np.ndarray, int]:
    """Decodes a stream, or its first `frames` frames.

    The seed is taken from the header.

    Returns:
        ``(x, step)``: the state at grid step ``step``. Step -1 is a preview
        before :math:`X_T` arrived (the shared prior draw); step ``len(grid)`` is the exact
        :math:`X_0` recovered by the lossless tail.

    Raises:
        ProtocolError: for a digest, dimension or grid mismatch, or a truncated frame.
        DecodeError: for corrupted frame contents.
    """
    bitstream = stream if isinstance(stream, Bitstream) else Bitstream.from_bytes(stream)
    decoder = ProgressiveDecoder(bitstream, config)
    for payload in bitstream.frames if frames is None else bitstream.frames[:frames]:
        decoder.push(payload)
    return decoder.state, decoder.step


def _tail_table(x_tau: np.ndarray, tau: float, oracle: SourceOracle, schedule: NoiseSchedule) -> DiscretizedPMF:
    if not isinstance(oracle, PatchBankSource):
        raise ValueError("continuous sources have no lossless tail")
    weights = oracle.posterior_weights(x_tau, float(schedule.alpha(tau)), float(schedule.sigma(tau)))
    return DiscretizedPMF.from_probabilities(0, weights)


def lossless_tail_encode(x0: np.ndarray, x_tau: np.ndarray, tau: float, oracle: SourceOracle,
                         schedule: NoiseSchedule) -> Tuple[bytes, float]:
    """Entropy-codes the atom `x0` under the oracle posterior given :math:`X_\\tau`.

    Returns:
        ``(payload, bits)`` where ``bits`` is the ideal code length under the quantized table.

    Raises:
        ValueError: for a continuous source, or `x0` outside the bank.
    """
    table = _tail_table(x_tau, tau, oracle, schedule)
    index = oracle.atom_index(x0)  # type: ignore[attr-defined]
    return range_encode([index], table), information_bits([index], table)


def lossless_tail_decode(payload: bytes, x_tau: np.ndarray, tau: float, oracle: SourceOracle,
                         schedule: NoiseSchedule) -> np.ndarray:
    """Recovers the atom coded by :func:`lossless_tail_encode`.

    Raises:
        ValueError: for a continuous source.
        DecodeError: for a corrupted payload.
    """
    table = _tail_table(x_tau, tau, oracle, schedule)
    index = int(range_decode(payload, table, 1)[0])
    if index >= oracle.count:  # type: ignore[attr-defined]
        raise ProtocolError("tail index {} outside the bank".format(index))
    return oracle.atoms[index].copy()  # type: ignore[attr-defined]


def reconstruct_posterior_mean(x_t: np.ndarray, t: float, oracle: SourceOracle,
                               schedule: NoiseSchedule) -> np.ndarray:
    """The MMSE reconstruction :math:`E[X_0 \\mid X_t = x_t]`; identity at ``t = 0``."""
    if t <= 0.0:
        return np.array(x_t, dtype=float)
    return posterior_mean(oracle, schedule, x_t, t)


def reconstruct_sde(x_t: np.ndarray, t: float, oracle: SourceOracle, schedule: NoiseSchedule,
                    randomness: Union[SyncedRandomness, np.random.Generator],
                    steps: int = DEFAULT_SDE_STEPS) -> np.ndarray:
    """Ancestral sampling of the reverse process from `t` down to 0.

    Each step draws :math:`\\hat x_0` from the oracle posterior and then :math:`x_s`
    from the forward posterior given :math:`(x_t, \\hat x_0)`, which is an exact draw
    from the reverse kernel. The output is a draw from :math:`P_{X_0 \\mid X_t = x_t}`.

    Raises:
        ValueError: if `steps` is less than 1.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    x = _check_finite(np.array(x_t, dtype=float))
    if t <= 0.0:
        return x
    rng = randomness.derive("reconstruction").generator() if isinstance(randomness, SyncedRandomness) else randomness
    times = np.linspace(t, 0.0, steps + 1)
    for current, following in zip(times[:-1], times[1:]):
        alpha = float(schedule.alpha(current))
        sigma = float(schedule.sigma(current))
        x_hat = oracle.posterior_sample(x, alpha, sigma, rng)
        a, c, variance = posterior_coefficients(schedule, float(current), float(following))
        x = a * x + c * x_hat + math.sqrt(variance) * rng.standard_normal(x.shape)
    return x


def reconstruct_ode(x_t: np.ndarray, t: float, oracle: SourceOracle, schedule: NoiseSchedule,
                    steps: int = DEFAULT_ODE_STEPS) -> np.ndarray:
    """Deterministic reconstruction by integrating the probability-flow velocity.

    Classic RK4 with `steps` uniform steps from `t` down to ``ODE_END_FRACTION * T``,
    where the flow is finished with the posterior mean.

    Raises:
        ValueError: if `steps` is less than 1, or the state becomes non-finite.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    x = _check_finite(np.array(x_t, dtype=float))
    end = ODE_END_FRACTION * schedule.T
    if t <= end:
        return reconstruct_posterior_mean(x, t, oracle, schedule)
    h = (end - t) / steps
    current = t
    for _ in range(steps):
        k1 = velocity(oracle, schedule, x, current)
        k2 = velocity(oracle, schedule, x + 0.5 * h * k1, current + 0.5 * h)
        k3 = velocity(oracle, schedule, x + 0.5 * h * k2, current + 0.5 * h)
        k4 = velocity(oracle, schedule, x + h * k3, current + h)
        x = _check_finite(x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
        current += h
    return posterior_mean(oracle, schedule, x, end)


def reconstruct(x: np.ndarray, step: int, config: CodecConfig,
                kind: Optional[ReconstructionKind] = None, seed: Optional[int] = None) -> np.ndarray:
    """Reconstructs :math:`X_0` from the state :func:`decode_progressive` returned.

    Args:
        x: The decoded state.
        step: The decoded step index.
        config: The codec configuration.
        kind: The reconstruction mode, :attr:`CodecConfig.reconstruction` by default.
        seed: Seed of the stochastic reconstruction, the config seed by default.
    """
    if step >= len(config.grid):
        return np.array(x, dtype=float)
    t = config.grid.steps[max(step, 0)]
    kind = ReconstructionKind(kind or config.reconstruction)
    if kind is ReconstructionKind.SDE:
        randomness = SyncedRandomness(config.seed if seed is None else seed)
        return reconstruct_sde(x, t, config.oracle, config.schedule, randomness, config.sde_steps)
    if kind is ReconstructionKind.ODE:
        return reconstruct_ode(x, t, config.oracle, config.schedule, config.ode_steps)
    return reconstruct_posterior_mean(x, t, config.oracle, config.schedule)


def _reference_bits(config: CodecConfig) -> Optional[float]:
    if isinstance(config.oracle, GaussianSource):
        return config.oracle.mutual_information(float(config.schedule.snr(config.grid.tau)))
    return None


def _draw_sources(oracle: SourceOracle, rng: np.random.Generator,
                  trials: int) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    if isinstance(oracle, PatchBankSource):
        indices = rng.choice(oracle.count, size=trials, p=oracle.weights)
        return oracle.atoms[indices], indices
    return oracle.sample(rng, trials), None


def _simulate_costs(config: CodecConfig, trials: int,
                    rng: np.random.Generator) -> Tuple[List[float], np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """Runs the forward process for `trials` sources at once.

    Returns:
        ``(times, costs, x_tau, atom_indices)`` with ``costs`` of shape ``(trials, steps)``.
    """
    x0, indices = _draw_sources(config.oracle, rng, trials)
    times: List[float] = []
    costs = []
    if config.backend is BackendKind.GAUSSIAN_PFR:
        kernel = _gaussian_prior(config)
        target = kernel.target(np.zeros_like(x0), x0)
        costs.append(kernel.kl_bits(target))
        times.append(config.schedule.T)
        x_t = target + kernel.scale * rng.standard_normal(x0.shape)
    else:
        x_t = rng.standard_normal(x0.shape)
    for t, s in config.grid.transitions():
        if config.backend is BackendKind.GAUSSIAN_PFR:
            kernel = _gaussian_step(config, x_t, t, s)
            target = kernel.target(x_t, x0)
            costs.append(kernel.kl_bits(target))
            x_t = target + kernel.scale * rng.standard_normal(x0.shape)
        else:
            uniform = _uniform_step(config, x_t, t, s)
            target = uniform.target(x_t, x0)
            costs.append(uniform.kl_bits(target))
            x_t = target + uniform.width * (rng.random(x0.shape) - 0.5)
        times.append(s)
    table = np.stack(costs, axis=-1) if costs else np.zeros((trials, 0))
    return times, table, x_t, indices


def cost_estimate(config: CodecConfig, trials: int = 1000, seed: int = 0) -> CostLedger:
    """Monte Carlo estimate of the expected per-step costs :math:`C_t`.

    Gaussian steps use the closed-form divergence between Gaussians, uniform
    steps the quadrature of :meth:`~diffcomp.entropy.UniformNoisyNormal.kl_from_uniform`.
    For Gaussian sources :attr:`CostLedger.reference_bits` holds the closed-form
    :math:`I(X_0; X_\\tau)`.

    Raises:
        ValueError: if `trials` is less than 1.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    times, costs, _, _ = _simulate_costs(config, trials, np.random.default_rng(seed))
    ledger = CostLedger(reference_bits=_reference_bits(config))
    for time, cost in zip(times, costs.mean(axis=0)):
        ledger.add(time, float(cost))
    logger.info("estimated cost %.4f bits over %d steps from %d trials", ledger.total, len(times), trials)
    return ledger


def negative_elbo_bits(config: CodecConfig, trials: int = 1000, seed: int = 0) -> float:
    """Monte Carlo negative ELBO in bits of the codec's reference model.

    The sum of the step divergences plus, for patch banks, the code length
    :math:`-\\log_2 p(x_0 \\mid x_\\tau)` of the lossless tail.

    Raises:
        ValueError: if `trials` is less than 1.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    _, costs, x_tau, indices = _simulate_costs(config, trials, np.random.default_rng(seed))
    total = costs.sum(axis=-1)
    if indices is not None:
        tau = config.grid.tau
        weights = config.oracle.posterior_weights(  # type: ignore[attr-defined]
            x_tau, float(config.schedule.alpha(tau)), float(config.schedule.sigma(tau)))
        with np.errstate(divide="ignore"):
            total = total - np.log2(weights[np.arange(trials), indices])
    return float(np.mean(total))


def _step_kernels(trajectory: np.ndarray, config: CodecConfig) -> List[Union[_GaussianKernel, _UniformKernel]]:
    kernels: List[Union[_GaussianKernel, _UniformKernel]] = []
    for (t, s), x_t in zip(config.grid.transitions(), trajectory[:-1]):
        if config.backend is BackendKind.GAUSSIAN_PFR:
            kernels.append(_gaussian_step(config, x_t, t, s))
        else:
            kernels.append(_uniform_step(config, x_t, t, s))
    return kernels


def _check_trajectory(trajectory: np.ndarray, config: CodecConfig) -> np.ndarray:
    trajectory = np.asarray(trajectory, dtype=float)
    if trajectory.shape != (len(config.grid), config.dim):
        raise ValueError("trajectory of shape {} does not match the grid".format(trajectory.shape))
    return trajectory


def trajectory_logdensity(trajectory: np.ndarray, config: CodecConfig) -> np.ndarray:
    """The log-density of each factor of the reference model along `trajectory`.

    Returns:
        ``len(grid)`` terms: the standard normal prior at :math:`x_T`,
        then each step reference at :math:`x_s` given :math:`x_t`.
    """
    trajectory = _check_trajectory(trajectory, config)
    prior = GaussianReference(np.zeros(config.dim), np.ones(config.dim))
    terms = [float(prior.logpdf(trajectory[0]))]
    for kernel, x_s in zip(_step_kernels(trajectory, config), trajectory[1:]):
        if isinstance(kernel, _GaussianKernel):
            terms.append(float(GaussianReference(kernel.mean, kernel.std).logpdf(x_s)))
        else:
            terms.append(float(np.sum(kernel.reference().logpdf(x_s))))
    return np.asarray(terms)


def joint_reference_logdensity(trajectory: np.ndarray, config: CodecConfig) -> float:
    """The joint log-density :math:`\\log p_\\theta(x_T) + \\sum \\log p_\\theta(x_s \\mid x_t)` in one pass."""
    trajectory = _check_trajectory(trajectory, config)
    kernels = _step_kernels(trajectory, config)
    total = float(np.sum(norm.logpdf(trajectory[0])))
    if not kernels:
        return total
    means = np.stack([kernel.mean for kernel in kernels])
    stds = np.stack([kernel.std for kernel in kernels])
    if config.backend is BackendKind.GAUSSIAN_PFR:
        return total + float(np.sum(norm.logpdf(trajectory[1:], means, stds)))
    widths = np.asarray([kernel.width for kernel in kernels])[:, np.newaxis]
    upper = norm.cdf((trajectory[1:] + 0.5 * widths - means) / stds)
    lower = norm.cdf((trajectory[1:] - 0.5 * widths - means) / stds)
    with np.errstate(divide="ignore"):
        return total + float(np.sum(np.log(upper - lower) - np.log(widths)))
