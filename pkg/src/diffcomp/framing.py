#  Copyright (c) 2026. The diffcomp authors
#  This file is part of the diffcomp project which is released under the MIT license.

"""
Frames carry the progressive bitstream, one frame per transmitted step.

A frame is the payload preceded by its length as an unsigned 16-bit
little-endian integer. Frames are byte-aligned, so any byte string that
ends at a frame boundary can be split back into complete frames.

Constants
---------

.. data:: LENGTH_PREFIX
.. data:: MAX_PAYLOAD

Functions
---------

.. autofunction:: encode_frame
.. autofunction:: decode_frame
.. autofunction:: is_valid
.. autofunction:: split_frames

Classes
-------

.. autoclass:: FrameDriver

   Class :class:`FrameDriver` offers the following methods:

   .. automethod:: send
   .. automethod:: receive

   To enable recovery from a :exc:`~diffcomp.errors.ProtocolError`, the
   :class:`FrameDriver` class offers the following attribute and method:

   .. autoattribute:: frames
   .. automethod:: flush

.. autoclass:: FrameStream(stream, [chunk_size])

   .. automethod:: send_msg
   .. automethod:: recv_msg
"""

import collections
import io
import logging
import struct
import sys
from types import TracebackType
from typing import Any, Deque, Iterator, List, Optional, Union

try:
    from typing import Protocol
except ImportError:
    from typing_extensions import Protocol  # type: ignore

from .errors import ProtocolError

logger = logging.getLogger(__name__)

_PREFIX = struct.Struct("<H")

#: Size of the length prefix in bytes.
LENGTH_PREFIX = _PREFIX.size
#: Largest payload a single frame can carry.
MAX_PAYLOAD = (1 << 16) - 1


def encode_frame(payload: bytes) -> bytes:
    """Wraps a payload into a frame.

    Args:
        payload: The bytes to frame.

    Returns:
        The length-prefixed frame.

    Raises:
        ValueError: if the payload exceeds :const:`MAX_PAYLOAD` bytes.
    """
    payload = bytes(payload)
    if len(payload) > MAX_PAYLOAD:
        raise ValueError("frame payload of {} bytes exceeds {}".format(len(payload), MAX_PAYLOAD))
    return _PREFIX.pack(len(payload)) + payload


def is_valid(packet: bytes) -> bool:
    """Indicates if `packet` is exactly one complete frame.

    Args:
        packet: The packet to inspect.

    Returns:
        :const:`True` if the length prefix matches the payload, :const:`False` otherwise.
    """
    if len(packet) < LENGTH_PREFIX:
        return False
    (length,) = _PREFIX.unpack_from(packet)
    valid = len(packet) == LENGTH_PREFIX + length
    if not valid:
        logger.info("is_valid: %d byte packet announces %d payload bytes", len(packet), length)
    return valid


def decode_frame(packet: bytes) -> bytes:
    """Retrieves the payload from a single complete frame.

    Raises:
        ProtocolError: if `packet` is not exactly one frame.
    """
    packet = bytes(packet)
    if not is_valid(packet):
        raise ProtocolError(packet)
    return packet[LENGTH_PREFIX:]


def split_frames(data: bytes) -> List[bytes]:
    """Splits a concatenation of frames into their payloads.

    Raises:
        ProtocolError: if `data` does not end at a frame boundary.
    """
    driver = FrameDriver()
    payloads = driver.receive(data)
    payloads.extend(driver.receive(b""))
    return payloads


class FrameDriver:
    """Buffers received bytes and cuts them into frames.

    Bytes may arrive in arbitrary pieces; incomplete frames are kept until
    the rest arrives. An empty :meth:`receive` marks the end of the data.
    """

    def __init__(self) -> None:
        self._buffer = bytearray()
        self._packets: Deque[bytes] = collections.deque()
        self._frames: List[bytes] = []

    def send(self, payload: bytes) -> bytes:  # pylint: disable=no-self-use
        """Encodes a payload into a frame."""
        return encode_frame(payload)

    def receive(self, data: Union[bytes, int]) -> List[bytes]:
        """Processes `data` and gives the payloads of all frames it completes.

        Args:
            data: A bytes-like object. An integer in ``range(256)`` is accepted as a single byte.
                An empty `data` marks the end of the input; a buffered partial
                frame then raises a :exc:`~diffcomp.errors.ProtocolError`.

        Returns:
            A (possibly empty) list of payloads.

        Raises:
            ProtocolError: when the input ends inside a frame.
        """
        if isinstance(data, int):
            data = bytes((data,))
        if data == b"":
            if self._buffer:
                logger.info("FrameDriver.receive: input ends inside a %d byte partial frame", len(self._buffer))
                self._packets.append(bytes(self._buffer))
                self._buffer.clear()
        else:
            self._buffer.extend(data)
            while len(self._buffer) >= LENGTH_PREFIX:
                (length,) = _PREFIX.unpack_from(self._buffer)
                end = LENGTH_PREFIX + length
                if len(self._buffer) < end:
                    break
                self._packets.append(bytes(self._buffer[:end]))
                del self._buffer[:end]
            logger.debug("FrameDriver.receive: %d frames queued, %d bytes pending",
                         len(self._packets), len(self._buffer))
        return self.flush()

    def flush(self) -> List[bytes]:
        """Decodes the queued frames.

        This enables processing to continue after a
        :exc:`~diffcomp.errors.ProtocolError` has been handled.

        Raises:
            ProtocolError: when a queued packet is not a complete frame.
        """
        payloads: List[bytes] = []
        while self._packets:
            packet = self._packets.popleft()
            try:
                payloads.append(decode_frame(packet))
            except ProtocolError:
                self._frames = payloads
                raise
        return payloads

    @property
    def frames(self) -> List[bytes]:
        """The payloads decoded before the last :exc:`~diffcomp.errors.ProtocolError`.

        This attribute is cleared after it has been read.
        """
        try:
            return self._frames
        finally:
            self._frames = []


class _ProtoStream(Protocol):
    """Protocol class for wrappable streams"""

    def read(self, chunksize: int) -> bytes:
        """Read `chunksize` bytes from the stream"""

    def write(self, data: bytes) -> int:
        """Write data to the stream."""


class FrameStream:
    """Reads and writes frames on a binary stream.

    Streams with an :attr:`encoding` attribute (text streams) are rejected.
    A :class:`FrameStream` can be iterated over; each iteration yields the next payload.

    Example:

    .. code::

        with open('stream.dfc', mode='rb') as f:
            for payload in FrameStream(f):
                ...
    """

    def __init__(self, stream: _ProtoStream, chunk_size: int = io.DEFAULT_BUFFER_SIZE) -> None:
        # pylint: disable=missing-raises-doc
        """
        Args:
            stream: An open byte stream.
            chunk_size: The number of bytes to read per read operation.

        Raises:
            TypeError: if `stream` lacks ``read`` or ``write``, or is a text stream.
        """
        for method in ("read", "write"):
            if not callable(getattr(stream, method, None)):
                raise TypeError("{} object has no method {}".format(stream.__class__.__name__, method))
        if hasattr(stream, "encoding"):
            raise TypeError("{} object is not a byte stream".format(stream.__class__.__name__))
        self.stream = stream
        self.driver = FrameDriver()
        self._chunk_size = chunk_size if chunk_size > 0 else io.DEFAULT_BUFFER_SIZE
        self._payloads: Deque[bytes] = collections.deque()
        self._protocol_error: Optional[ProtocolError] = None
        self._traceback: Optional[TracebackType] = None
        self._ended = False

    def send_msg(self, payload: bytes) -> None:
        """Frames `payload` and writes it to the stream."""
        packet = self.driver.send(payload)
        while packet:
            written = self.stream.write(packet)
            packet = packet[written:]

    def recv_msg(self) -> Optional[bytes]:
        """Reads the next payload.

        Returns:
            The payload, or :const:`None` at the end of the stream.

        Raises:
            ProtocolError: when the stream ends inside a frame. Payloads completed
                before the error are returned by later calls.
        """
        if self._payloads:
            return self._payloads.popleft()
        self._raise_pending()
        while not self._payloads and not self._ended:
            data: Any = self.stream.read(self._chunk_size)
            if isinstance(data, int):
                data = bytes((data,))
            if not data:
                self._ended = True
            try:
                self._payloads.extend(self.driver.receive(data or b""))
            except ProtocolError as protocol_error:
                self._payloads.extend(self.driver.frames)
                self._protocol_error = protocol_error
                self._traceback = sys.exc_info()[2]
                break
        if self._payloads:
            return self._payloads.popleft()
        self._raise_pending()
        return None

    def _raise_pending(self) -> None:
        if self._protocol_error:
            try:
                raise self._protocol_error.with_traceback(self._traceback)
            finally:
                self._protocol_error = None
                self._traceback = None

    def __iter__(self) -> Iterator[bytes]:
        while True:
            payload = self.recv_msg()
            if payload is None:
                break
            yield payload
