# Copyright (c) 2026 The diffcomp authors
# This file is part of the diffcomp project which is released under the MIT license.

# pylint: disable=attribute-defined-outside-init

"""
This module contains the tests for the shared randomness and the channel simulators.
"""

import math

import numpy as np
import pytest
from scipy.stats import kstest, norm, uniform

from diffcomp.bitio import BitReader, BitWriter, elias_gamma_length
from diffcomp.channelsim import (CANDIDATE_BLOCK, ChannelKind, ChannelSpec, GaussianReference, SyncedRandomness,
                                 chunk_plan, decode_index, dq_decode, dq_encode, encode_index, index_length,
                                 pfr_decode, pfr_encode, round_half_away, shared_uniform)
from diffcomp.errors import TruncationError


class TestSyncedRandomness:
    """Addressable shared randomness."""

    def test_equal_positions_give_equal_draws(self):
        """Two parties at the same position draw the same numbers."""
        first = SyncedRandomness(42).derive("step", 3, "chunk", 0)
        second = SyncedRandomness(42).derive("step", 3, "chunk", 0)
        assert first == second
        assert np.array_equal(first.generator().random(8), second.generator().random(8))

    def test_labels_separate_streams(self):
        """Different labels, seeds or counters give different draws."""
        base = SyncedRandomness(42)
        draws = {
            tuple(base.derive("step", 3).generator().random(4)),
            tuple(base.derive("step", 4).generator().random(4)),
            tuple(base.derive(3, "step").generator().random(4)),
            tuple(SyncedRandomness(43).derive("step", 3).generator().random(4)),
            tuple(base.derive("step", 3).advance().generator().random(4)),
        }
        assert len(draws) == 5

    def test_derive_is_relative(self):
        """Deriving in two hops equals deriving with both labels."""
        base = SyncedRandomness(7, stream=11)
        assert base.derive("a").derive("b") == base.derive("a", "b")
        assert base.derive("a").counter == 0

    def test_advance_wraps(self):
        """Counters are 64-bit and wrap around."""
        assert SyncedRandomness(1, counter=(1 << 64) - 1).advance().counter == 0

    @pytest.mark.parametrize("seed,stream", [(-1, 0), (1 << 64, 0), (0, -5)])
    def test_out_of_range(self, seed, stream):
        """Seeds and streams are 64-bit unsigned integers."""
        with pytest.raises(ValueError):
            SyncedRandomness(seed, stream)


class TestDitheredQuantization:
    """Exact simulation of the uniform channel."""

    def test_round_half_away(self):
        """Ties are rounded away from zero."""
        assert round_half_away(np.array([0.5, -0.5, 1.5, -2.5, 2.4, -0.2])).tolist() == [1, -1, 2, -3, 2, 0]

    def test_shared_dither_range(self):
        """The dither lies in [-width/2, width/2)."""
        w = shared_uniform(SyncedRandomness(3), 10000, 0.4)
        assert w.shape == (10000,)
        assert np.all(w >= -0.2)
        assert np.all(w < 0.2)

    def test_invalid_width(self):
        """The dither needs a positive width."""
        with pytest.raises(ValueError):
            shared_uniform(SyncedRandomness(3), 4, 0.0)

    def test_decoder_agrees(self):
        """The receiver reconstructs the sender's output from the indices."""
        x = np.array([0.31, -1.7, 4.2])
        w = shared_uniform(SyncedRandomness(5), 3, 0.25)
        indices, y = dq_encode(x, 0.25, w)
        assert indices.dtype == np.int64
        assert np.array_equal(dq_decode(indices, 0.25, w), y)
        assert np.all(np.abs(y - x) <= 0.125 + 1e-12)

    def test_error_is_uniform(self):
        """Over the dither the error is uniform and independent of the input."""
        width = 0.5
        base = SyncedRandomness(9)
        x = np.full(20000, 0.123)
        w = shared_uniform(base, x.size, width)
        _, y = dq_encode(x, width, w)
        assert kstest(y - x, uniform(loc=-width / 2, scale=width).cdf).pvalue > 1e-3

    def test_per_coordinate_widths(self):
        """Widths may differ per coordinate."""
        widths = np.array([0.1, 1.0])
        w = shared_uniform(SyncedRandomness(1), 2, 1.0) * widths
        _, y = dq_encode(np.array([0.33, 0.33]), widths, w)
        assert np.all(np.abs(y - 0.33) <= widths / 2 + 1e-12)

    def test_non_finite_input(self):
        """Infinite inputs cannot be quantized."""
        with pytest.raises(ValueError):
            dq_encode(np.array([np.inf]), 1.0, np.zeros(1))


class TestChannelSpec:
    """Target channels and their density ratios."""

    def test_gaussian_divergence(self):
        """The Gaussian divergence follows the closed form."""
        channel = ChannelSpec(ChannelKind.GAUSSIAN_ADDITIVE, 0.5, GaussianReference(np.zeros(1), 2.0))
        nats = math.log(4.0) + (0.25 + 0.49) / 8.0 - 0.5
        assert channel.kl_bits(np.array([0.7])) == pytest.approx(nats / math.log(2.0))

    @pytest.mark.parametrize("kind,scale", [("gaussian-additive", 0.5), ("uniform-additive", 0.8)])
    def test_supremum_bounds_the_ratio(self, kind, scale):
        """The log ratio never exceeds its supremum."""
        channel = ChannelSpec(kind, scale, GaussianReference(np.array([0.2, -0.1]), np.array([1.0, 1.5])))
        x = np.array([0.9, -0.4])
        ys = channel.sample_target(x, np.random.default_rng(0), 5000)
        assert np.max(channel.log_ratio(ys, x)) <= channel.log_sup(x) + 1e-9

    def test_narrow_reference(self):
        """A reference narrower than the channel gives an unbounded ratio."""
        with pytest.raises(ValueError):
            ChannelSpec(ChannelKind.GAUSSIAN_ADDITIVE, 2.0, GaussianReference(np.zeros(1), 1.0))

    def test_equal_widths_with_shift(self):
        """Equal widths are only bounded at the reference mean."""
        channel = ChannelSpec(ChannelKind.GAUSSIAN_ADDITIVE, 1.0, GaussianReference(np.zeros(1), 1.0))
        assert channel.log_sup(np.zeros(1)) == pytest.approx(0.0)
        with pytest.raises(ValueError):
            channel.log_sup(np.ones(1))

    def test_uniform_target_support(self):
        """The uniform target has no density outside its box."""
        channel = ChannelSpec(ChannelKind.UNIFORM_ADDITIVE, 1.0, GaussianReference(np.zeros(1), 1.0))
        assert channel.log_target(np.array([[0.4], [0.6]]), np.zeros(1)).tolist() == [0.0, -np.inf]


class TestIndexCode:
    """The code for race indices."""

    @pytest.mark.parametrize("expected_bits", [None, 0.0, 5.0, 20.0])
    def test_round_trip(self, expected_bits):
        """Indices of every magnitude decode under the same expectation."""
        indices = [1, 2, 3, 17, 1000, 1 << 20, (1 << 40) + 5]
        writer = BitWriter()
        for index in indices:
            encode_index(writer, index, expected_bits)
        assert len(writer) == sum(index_length(index, expected_bits) for index in indices)
        reader = BitReader(writer.to_bytes())
        assert [decode_index(reader, expected_bits) for _ in indices] == indices

    def test_centring_shortens_typical_indices(self):
        """An index near the expected cost is cheaper with the centred code."""
        assert index_length(1 << 12, 13.0) < index_length(1 << 12)
        assert index_length(1 << 12, 13.0) <= 12 + 3

    def test_wire_layout(self):
        """The exponent offset is Elias-gamma coded, the low index bits follow verbatim."""
        writer = BitWriter()
        encode_index(writer, 0b1000000000101, 13.0)
        assert len(writer) == 1 + 12 < elias_gamma_length(0b1000000000101)
        assert writer.to_bytes() == bytes((0b10000000, 0b00101000))

    def test_non_positive_index(self):
        """Race indices start at one."""
        with pytest.raises(ValueError):
            encode_index(BitWriter(), 0)


class TestPoissonFunctionalRepresentation:
    """Channel simulation by a race over shared candidates."""

    @pytest.fixture(autouse=True)
    def setup(self):
        """Prepare the test."""
        self.channel = ChannelSpec(ChannelKind.GAUSSIAN_ADDITIVE, 1.0, GaussianReference(np.zeros(1), 2.0))
        self.x = np.array([0.5])
        yield

    def test_decoder_regenerates_the_output(self):
        """The receiver finds the winning candidate from the index."""
        randomness = SyncedRandomness(17).derive("race")
        result = pfr_encode(self.channel, self.x, randomness)
        assert np.array_equal(pfr_decode(result.index, self.channel, randomness), result.y)
        assert result.bits_used == index_length(result.index)
        assert len(result.message) == (result.bits_used + 7) // 8
        assert result.candidates % CANDIDATE_BLOCK == 0
        assert result.nats_cost == pytest.approx(self.channel.kl_bits(self.x) * math.log(2.0))

    def test_output_follows_the_target(self):
        """Outputs over independent races follow P(Y | X = x)."""
        base = SyncedRandomness(23)
        ys = [float(pfr_encode(self.channel, self.x, base.derive("race", i)).y[0]) for i in range(600)]
        assert kstest(ys, norm(loc=0.5, scale=1.0).cdf).pvalue > 1e-3

    def test_index_cost_tracks_divergence(self):
        """The average index is cheap when the divergence is small."""
        base = SyncedRandomness(29)
        lengths = [pfr_encode(self.channel, self.x, base.derive("race", i)).bits_used for i in range(300)]
        assert np.mean(lengths) < self.channel.kl_bits(self.x) + 8.0

    def test_truncation(self):
        """An unsettled race raises TruncationError with its diagnostics."""
        channel = ChannelSpec(ChannelKind.UNIFORM_ADDITIVE, 0.01, GaussianReference(np.zeros(1), 1.0))
        with pytest.raises(TruncationError) as exc_info:
            pfr_encode(channel, np.array([2.5]), SyncedRandomness(1), max_candidates=1)
        assert exc_info.value.candidates == 1
        assert exc_info.value.bound < exc_info.value.best_score

    def test_invalid_arguments(self):
        """Candidate caps and indices must be positive."""
        with pytest.raises(ValueError):
            pfr_encode(self.channel, self.x, SyncedRandomness(1), max_candidates=0)
        with pytest.raises(ValueError):
            pfr_decode(0, self.channel, SyncedRandomness(1))


class TestChunkPlan:
    """Splitting a step into races of bounded cost."""

    def test_even_costs(self):
        """Equal coordinate costs give equal chunks and a remainder."""
        assert chunk_plan(10, 40.0, 16.0) == [slice(0, 4), slice(4, 8), slice(8, 10)]

    def test_expensive_coordinate(self):
        """A coordinate above the target gets a chunk of its own."""
        assert chunk_plan(3, [30.0, 1.0, 1.0], 16.0) == [slice(0, 1), slice(1, 3)]

    def test_cheap_step(self):
        """A cheap step is a single chunk."""
        assert chunk_plan(5, 2.0) == [slice(0, 5)]

    def test_no_coordinates(self):
        """A step needs at least one coordinate."""
        with pytest.raises(ValueError):
            chunk_plan(0, 1.0)
