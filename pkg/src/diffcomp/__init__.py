#  Copyright (c) 2026. The diffcomp authors
#  This file is part of the diffcomp project which is released under the MIT license.


"""
Introduction
------------

The :mod:`diffcomp` package compresses data progressively with an unconditional
diffusion model. The sender reveals the forward-noised trajectory
:math:`X_T, X_{T-\\Delta}, \\dots, X_\\tau` one step at a time. Each step is transmitted
with a channel simulation against the reverse kernel of the model, so it costs about the
divergence between the forward posterior and that kernel. Summed over all steps this is
the model's negative ELBO, up to a small per-step overhead.

Any prefix of the stream that ends at a frame boundary is a usable
description: the receiver knows :math:`X_t` for the last received step and can
reconstruct :math:`X_0` by

* ancestral sampling (``sde``), a draw from the posterior with perfect realism,
* the probability-flow ODE (``ode``), a deterministic map at lower distortion, or
* the posterior mean (``posterior-mean``), the MMSE estimate.

Two channel simulation backends are provided:

================= ====================================================================
Backend           Steps
================= ====================================================================
``gaussian-pfr``  Gaussian forward posteriors, simulated in chunks with the Poisson
                  functional representation
``uqdm-dq``       uniform forward posteriors of the same variance, simulated exactly with
                  dithered quantization and range-coded under the reverse kernel
================= ====================================================================

Since real diffusion models are out of scope here, the reverse kernels come from
analytic sources (:mod:`diffcomp.sources`) whose denoisers are exact.

Noise schedules and grids
-------------------------

.. automodule:: diffcomp.schedule

Sources
-------

.. automodule:: diffcomp.sources

Channel simulation
------------------

.. automodule:: diffcomp.channelsim

Entropy coding
--------------

.. automodule:: diffcomp.bitio
.. automodule:: diffcomp.entropy

Framing
-------

.. automodule:: diffcomp.framing

The codec
---------

.. automodule:: diffcomp.codec

Rate, distortion and realism
----------------------------

.. automodule:: diffcomp.rdp

Configuration and command line
------------------------------

.. automodule:: diffcomp.config
.. automodule:: diffcomp.cli

Exceptions
----------

.. automodule:: diffcomp.errors
"""

import logging

from .channelsim import ChannelKind, ChannelSpec, GaussianReference, SyncedRandomness, pfr_decode, pfr_encode
from .codec import (BackendKind, Bitstream, CodecConfig, CostLedger, ProgressiveDecoder, ReconstructionKind,
                    cost_estimate, decode_progressive, encode_progressive, reconstruct)
from .config import RunConfig
from .errors import ConfigError, ConvergenceError, DecodeError, DiffCompError, ProtocolError, TruncationError
from .framing import FrameDriver, FrameStream
from .schedule import NoiseSchedule, TimeGrid, make_schedule, make_time_grid
from .sources import GaussianMixtureSource, GaussianSource, PatchBankSource, SourceOracle
from .version import __version__

logging.getLogger(__name__).addHandler(logging.NullHandler())

__all__ = [
    "BackendKind",
    "Bitstream",
    "ChannelKind",
    "ChannelSpec",
    "CodecConfig",
    "ConfigError",
    "ConvergenceError",
    "CostLedger",
    "DecodeError",
    "DiffCompError",
    "FrameDriver",
    "FrameStream",
    "GaussianMixtureSource",
    "GaussianReference",
    "GaussianSource",
    "NoiseSchedule",
    "PatchBankSource",
    "ProgressiveDecoder",
    "ProtocolError",
    "ReconstructionKind",
    "RunConfig",
    "SourceOracle",
    "SyncedRandomness",
    "TimeGrid",
    "TruncationError",
    "cost_estimate",
    "decode_progressive",
    "encode_progressive",
    "make_schedule",
    "make_time_grid",
    "pfr_decode",
    "pfr_encode",
    "reconstruct",
    "__version__",
]
