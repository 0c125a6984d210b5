#  Copyright (c) 2026. The diffcomp authors
#  This file is part of the diffcomp project which is released under the MIT license.

"""
Exceptions
----------

All exceptions raised deliberately by :mod:`diffcomp` derive from :exc:`DiffCompError`.
Plain precondition violations on arguments raise :exc:`ValueError` or :exc:`TypeError`.

.. autoexception:: DiffCompError
.. autoexception:: ProtocolError
.. autoexception:: DecodeError
.. autoexception:: TruncationError
.. autoexception:: ConvergenceError
.. autoexception:: ConfigError
"""

from typing import Any, Optional


class DiffCompError(Exception):
    """Base class for all diffcomp errors."""


class ProtocolError(DiffCompError, ValueError):
    """Exception to indicate that a bitstream does not conform to the format.

    This exception is raised for malformed frames and headers,
    for config digest mismatches, and for malformed patch-bank files.
    The offending data (or field name) is carried
    as the first element in its :attr:`args` tuple.
    """


class DecodeError(ProtocolError):
    """The entropy decoder met truncated or inconsistent data."""


class TruncationError(DiffCompError, RuntimeError):
    """A Poisson functional representation race could not be settled.

    The race is abandoned when ``max_candidates`` candidates have been drawn
    and the running minimum could still be beaten by a later candidate.
    Emitting the running winner would give a biased sample, so this is an error.

    Attributes:
        candidates: Number of candidates examined.
        best_score: The running minimum of the race.
        bound: The lower bound on scores still to come.
        step: Codec step index, if raised by the codec.
        chunk: Chunk index within the step, if raised by the codec.
    """

    def __init__(self, message: str, candidates: int, best_score: float, bound: float,
                 step: Optional[int] = None, chunk: Optional[int] = None) -> None:
        super().__init__(message)
        self.candidates = candidates
        self.best_score = best_score
        self.bound = bound
        self.step = step
        self.chunk = chunk

    def diagnostics(self) -> dict:
        """The diagnostics as a JSON-serializable dictionary."""
        return {
            "candidates": self.candidates,
            "best_score": self.best_score,
            "bound": self.bound,
            "step": self.step,
            "chunk": self.chunk,
        }


class ConvergenceError(DiffCompError, RuntimeError):
    """An iterative or numerical procedure did not converge.

    Attributes:
        residual: The last residual (change or error estimate).
    """

    def __init__(self, message: str, residual: Any) -> None:
        super().__init__(message)
        self.residual = residual


class ConfigError(DiffCompError, ValueError):
    """Exception to indicate an invalid run configuration.

    Attributes:
        key: The offending ``section.key``, or the section name alone.
    """

    def __init__(self, message: str, key: str = "") -> None:
        super().__init__(message)
        self.key = key
