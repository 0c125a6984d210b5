# Copyright (c) 2026 The diffcomp authors
# This file is part of the diffcomp project which is released under the MIT license.

# pylint: disable=attribute-defined-outside-init

"""Tests for the rate, distortion and realism tools."""

import csv
import io
import math

import numpy as np
import pytest

from diffcomp.channelsim import SyncedRandomness
from diffcomp.rdp import (CSV_COLUMNS, DiscreteLaw, DPParams, FailedPoint, RDPPoint, ScalarQuantizer, dp_value,
                          gaussian_channel_testbed, gaussian_fit_w2, immse_mutual_information, interpolate_estimator,
                          lloyd_max, mutual_information_mc, quantizer_posterior_sample, stochastic_code_bound,
                          w2_distance, write_rdp_csv)
from diffcomp.schedule import make_schedule
from diffcomp.sources import GaussianMixtureSource, GaussianSource


class TestDistortionPerception:
    """The distortion-perception function and its estimators."""

    def test_dp_value(self):
        """The distortion falls quadratically until gamma reaches gamma_star."""
        params = DPParams(0.5, 0.3)
        assert dp_value(params, 0.0) == pytest.approx(0.59)
        assert dp_value(params, 0.1) == pytest.approx(0.54)
        assert dp_value(params, 0.3) == 0.5
        assert dp_value(params, 2.0) == 0.5

    def test_invalid_values(self):
        """Negative parameters and realism levels are rejected."""
        with pytest.raises(ValueError):
            DPParams(-0.1, 0.2)
        with pytest.raises(ValueError):
            dp_value(DPParams(0.5, 0.3), -0.1)

    def test_interpolation_endpoints(self):
        """The interpolation runs from the realistic to the MMSE estimate."""
        realistic, mmse = np.array([1.0, 2.0]), np.array([0.0, 1.0])
        assert np.allclose(interpolate_estimator(realistic, mmse, 0.0, 0.5), realistic)
        assert np.allclose(interpolate_estimator(realistic, mmse, 0.5, 0.5), mmse)
        assert np.allclose(interpolate_estimator(realistic, mmse, 0.25, 0.5), [0.5, 1.5])

    @pytest.mark.parametrize("gamma,gamma_star", [(0.6, 0.5), (-0.1, 0.5), (0.0, 0.0)])
    def test_interpolation_range(self, gamma, gamma_star):
        """Only 0 <= gamma <= gamma_star > 0 is accepted."""
        with pytest.raises(ValueError):
            interpolate_estimator(np.zeros(1), np.zeros(1), gamma, gamma_star)


class TestGaussianChannelTestbed:
    """The scalar testbed where the distortion-perception function is known."""

    @pytest.fixture(autouse=True)
    def setup(self):
        """Prepare the test."""
        self.testbed = gaussian_channel_testbed(1.0)
        self.x, self.y = self.testbed.sample(np.random.default_rng(12), 200000)
        yield

    def test_parameters(self):
        """D(inf) = 1 - a and gamma_star = 1 - sqrt(a)."""
        assert self.testbed.gain == 0.5
        assert self.testbed.params.d_inf == pytest.approx(0.5)
        assert self.testbed.params.gamma_star == pytest.approx(1.0 - math.sqrt(0.5))

    @pytest.mark.parametrize("fraction", [0.0, 0.5, 1.0])
    def test_estimator_traces_the_function(self, fraction):
        """The interpolated estimator attains D(gamma) at realism gamma."""
        gamma = fraction * self.testbed.params.gamma_star
        estimate = self.testbed.estimate(self.y, gamma)
        assert np.mean((estimate - self.x) ** 2) == pytest.approx(dp_value(self.testbed.params, gamma), rel=1e-2)
        assert np.std(estimate) == pytest.approx(1.0 - gamma, rel=1e-2)

    def test_realism_estimate_has_the_source_law(self):
        """The perfect-realism estimate is standard normal."""
        assert w2_distance(GaussianSource.standard(), self.testbed.realism_estimate(self.y)) < 1e-2

    def test_invalid_noise(self):
        """The channel needs noise."""
        with pytest.raises(ValueError):
            gaussian_channel_testbed(0.0)


class TestLloydMax:
    """Scalar quantizer design."""

    def test_one_bit_gaussian(self):
        """One bit splits at the mean with centroids at +-sqrt(2/pi)."""
        quantizer = lloyd_max(GaussianSource.standard(), 1)
        assert quantizer.thresholds == pytest.approx([0.0], abs=1e-9)
        assert quantizer.centroids == pytest.approx([-math.sqrt(2.0 / math.pi), math.sqrt(2.0 / math.pi)])
        assert quantizer.distortion == pytest.approx(1.0 - 2.0 / math.pi)
        assert quantizer.rate == 1.0

    def test_two_bit_gaussian(self):
        """The classic four-level quantizer."""
        quantizer = lloyd_max(GaussianSource.standard(), 2)
        assert quantizer.thresholds == pytest.approx([-0.9816, 0.0, 0.9816], abs=1e-3)
        assert quantizer.centroids == pytest.approx([-1.5104, -0.4528, 0.4528, 1.5104], abs=1e-3)
        assert quantizer.distortion == pytest.approx(0.1175, abs=1e-3)

    def test_scaling(self):
        """Quantizers of scaled sources are scaled."""
        quantizer = lloyd_max(GaussianSource([1.0], [[4.0]]), 1)
        assert quantizer.centroids == pytest.approx([1.0 - 2.0 * math.sqrt(2.0 / math.pi),
                                                     1.0 + 2.0 * math.sqrt(2.0 / math.pi)])

    def test_distortion_falls_with_rate(self):
        """Every extra bit lowers the distortion."""
        mixture = GaussianMixtureSource([0.5, 0.5], [GaussianSource([-1.0], [[0.3]]), GaussianSource([1.0], [[0.3]])])
        distortions = [lloyd_max(mixture, rate).distortion for rate in (1, 2, 3)]
        assert distortions[0] > distortions[1] > distortions[2] > 0.0

    @pytest.mark.parametrize("rate", [0, 9])
    def test_invalid_rate(self, rate):
        """Rates run from 1 to 8 bits."""
        with pytest.raises(ValueError):
            lloyd_max(GaussianSource.standard(), rate)

    def test_vector_source(self):
        """Scalar quantizers need scalar sources."""
        with pytest.raises(ValueError):
            lloyd_max(GaussianSource.standard(2), 1)


class TestScalarQuantizer:
    """Quantizing, reconstructing and posterior sampling."""

    @pytest.fixture(autouse=True)
    def setup(self):
        """Prepare the test."""
        self.source = GaussianSource.standard()
        self.quantizer = lloyd_max(self.source, 1)
        yield

    def test_quantize_and_dequantize(self):
        """Values map to their cell's centroid."""
        cells = self.quantizer.quantize(np.array([-2.0, -0.1, 0.1, 3.0]))
        assert cells.tolist() == [0, 0, 1, 1]
        assert self.quantizer.dequantize(cells)[0] == pytest.approx(-math.sqrt(2.0 / math.pi))

    def test_output_law(self):
        """Both cells of the symmetric quantizer are equally likely."""
        law = self.quantizer.output_law(self.source)
        assert law.weights == pytest.approx([0.5, 0.5])

    def test_posterior_samples_stay_in_the_cell(self):
        """Posterior draws are the source restricted to the cell."""
        draws = quantizer_posterior_sample(self.quantizer, np.ones(50000, dtype=int), self.source,
                                           SyncedRandomness(4))
        assert np.all(draws >= 0.0)
        assert np.mean(draws) == pytest.approx(math.sqrt(2.0 / math.pi), abs=1e-2)

    def test_posterior_samples_of_a_mixture(self):
        """Mixture components are chosen by their mass inside the cell."""
        mixture = GaussianMixtureSource([0.5, 0.5], [GaussianSource([-1.0], [[0.3]]), GaussianSource([1.0], [[0.3]])])
        quantizer = lloyd_max(mixture, 2)
        cells = np.random.default_rng(1).integers(0, 4, 2000)
        draws = quantizer_posterior_sample(quantizer, cells, mixture, np.random.default_rng(2))
        assert np.array_equal(quantizer.quantize(draws), cells)

    def test_posterior_sampling_realism(self):
        """Posterior sampling reproduces the source law at twice the quantizer distortion."""
        rng = np.random.default_rng(6)
        x = rng.standard_normal(100000)
        draws = quantizer_posterior_sample(self.quantizer, self.quantizer.quantize(x), self.source, rng)
        assert w2_distance(self.source, draws) < 2e-2
        assert np.mean((draws - x) ** 2) == pytest.approx(2.0 * self.quantizer.distortion, rel=3e-2)

    def test_invalid_cell(self):
        """Cell indices must exist."""
        with pytest.raises(ValueError):
            quantizer_posterior_sample(self.quantizer, 2, self.source, np.random.default_rng(0))

    @pytest.mark.parametrize("thresholds,centroids", [([0.0, 1.0], [0.0, 1.0]), ([0.0], [1.0, -1.0])])
    def test_invalid_quantizers(self, thresholds, centroids):
        """Thresholds and centroids must fit together and be ordered."""
        with pytest.raises(ValueError):
            ScalarQuantizer(np.array(thresholds), np.array(centroids))


class TestWassersteinDistance:
    """W2 between laws given in closed form, as atoms or as samples."""

    def test_gaussians(self):
        """The closed form combines mean and spread differences."""
        assert w2_distance(GaussianSource.standard(), GaussianSource([1.0], [[4.0]])) == pytest.approx(math.sqrt(2.0))
        a = GaussianSource([0.0, 0.0], [[1.0, 0.3], [0.3, 1.0]])
        assert w2_distance(a, a) == pytest.approx(0.0, abs=1e-6)

    def test_discrete_laws(self):
        """Point masses are one unit apart."""
        assert w2_distance(DiscreteLaw(np.zeros(1), np.ones(1)), DiscreteLaw(np.ones(1), np.ones(1))) == 1.0
        law = DiscreteLaw(np.array([0.0, 1.0]), np.array([0.5, 0.5]))
        assert w2_distance(law, DiscreteLaw(np.array([1.0, 0.0]), np.array([0.5, 0.5]))) == 0.0

    def test_gaussian_against_its_quantization(self):
        """The quantile coupling of a source and its quantizer output is the quantizer itself."""
        source = GaussianSource.standard()
        quantizer = lloyd_max(source, 1)
        law = quantizer.output_law(source)
        assert w2_distance(source, law) == pytest.approx(math.sqrt(quantizer.distortion), rel=1e-6)
        assert w2_distance(law, source) == pytest.approx(math.sqrt(quantizer.distortion), rel=1e-6)

    def test_samples(self):
        """Samples of the same law are close, shifted samples a shift apart."""
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal(50000), rng.standard_normal(50000)
        assert w2_distance(a, b) < 2e-2
        assert w2_distance(a, a + 0.5) == pytest.approx(0.5)

    def test_dimension_mismatch(self):
        """Laws must live in the same space."""
        with pytest.raises(ValueError):
            w2_distance(GaussianSource.standard(2), np.zeros(10))
        with pytest.raises(ValueError):
            w2_distance(GaussianSource.standard(2), GaussianSource.standard(3))

    def test_gaussian_fit(self):
        """The Gaussian-fit proxy sees a mean shift in every coordinate."""
        rng = np.random.default_rng(3)
        a = rng.standard_normal((40000, 2))
        b = rng.standard_normal((40000, 2)) + 1.0
        assert gaussian_fit_w2(a, b) == pytest.approx(math.sqrt(2.0), rel=2e-2)
        with pytest.raises(ValueError):
            gaussian_fit_w2(a, b[:, :1])


class TestMutualInformation:
    """The I-MMSE integral and its Monte Carlo check."""

    def test_gaussian_closed_form(self):
        """For a Gaussian the integral is half the log of the snr gain."""
        schedule = make_schedule("variance-preserving")
        source = GaussianSource.diagonal([0.0, 0.0], [2.0, 0.5])
        expected = source.mutual_information(float(schedule.snr(0.05))) - source.mutual_information(
            float(schedule.snr(1.0)))
        assert immse_mutual_information(source, schedule, 0.05) == pytest.approx(expected, rel=1e-6)

    def test_flow_matching_end(self):
        """A zero terminal snr starts the integral at zero."""
        schedule = make_schedule("flow-matching-linear")
        source = GaussianSource.standard()
        expected = source.mutual_information(float(schedule.snr(0.2)))
        assert immse_mutual_information(source, schedule, 0.2) == pytest.approx(expected, rel=1e-6)

    def test_mixture_agrees_with_monte_carlo(self):
        """The integral matches the direct estimate for a mixture."""
        schedule = make_schedule("variance-preserving")
        mixture = GaussianMixtureSource([0.3, 0.7], [GaussianSource([-1.5], [[0.2]]), GaussianSource([1.0], [[0.4]])])
        direct = mutual_information_mc(mixture, float(schedule.snr(0.3)), samples=200000) \
            - mutual_information_mc(mixture, float(schedule.snr(1.0)), samples=200000)
        assert immse_mutual_information(mixture, schedule, 0.3) == pytest.approx(direct, abs=5e-2)

    def test_tau_at_the_end(self):
        """Nothing is gathered when tau equals T."""
        assert immse_mutual_information(GaussianSource.standard(), make_schedule("variance-preserving"), 1.0) == 0.0

    @pytest.mark.parametrize("tau", [0.0, 1.5])
    def test_invalid_tau(self, tau):
        """tau must be in (0, T]."""
        with pytest.raises(ValueError):
            immse_mutual_information(GaussianSource.standard(), make_schedule("variance-preserving"), tau)


def test_stochastic_code_bound():
    """The bound adds a logarithmic and a constant overhead."""
    assert stochastic_code_bound(0.0) == 4.0
    assert stochastic_code_bound(3.0) == pytest.approx(9.0)
    with pytest.raises(ValueError):
        stochastic_code_bound(-1.0)


class TestResultFiles:
    """RDP points and their CSV form."""

    @pytest.fixture(autouse=True)
    def setup(self):
        """Prepare the test."""
        self.points = [RDPPoint("codec-sde", 3.5, 0.25, 0.01, 100, 7), FailedPoint("codec-ode", 100, 7, "boom")]
        yield

    def test_write_to_stream(self):
        """Failed settings keep their row with empty numeric fields."""
        stream = io.StringIO()
        write_rdp_csv(stream, self.points)
        rows = list(csv.reader(io.StringIO(stream.getvalue())))
        assert tuple(rows[0]) == CSV_COLUMNS
        assert rows[1] == ["codec-sde", "3.5", "0.25", "0.01", "100", "7"]
        assert rows[2] == ["codec-ode", "", "", "", "100", "7"]

    def test_write_to_path(self, tmp_path):
        """A path is opened and written."""
        path = tmp_path / "rdp.csv"
        write_rdp_csv(path, [])
        assert path.read_text(encoding="utf-8") == ",".join(CSV_COLUMNS) + "\n"

    @pytest.mark.parametrize("fields", [
        ("x", -1.0, 0.0, 0.0, 1, 0),
        ("x", 1.0, math.nan, 0.0, 1, 0),
        ("x", 1.0, 0.0, math.inf, 1, 0),
        ("x", 1.0, 0.0, 0.0, 0, 0),
        ("x", 1.0, 0.0, 0.0, 1, -1),
    ])
    def test_invalid_points(self, fields):
        """Measurements must be finite and non-negative."""
        with pytest.raises(ValueError):
            RDPPoint(*fields)
