# Copyright (c) 2026 The diffcomp authors
# This file is part of the diffcomp project which is released under the MIT license.

# pylint: disable=attribute-defined-outside-init

"""Tests for the analytic sources and their oracles."""

import math

import numpy as np
import pytest
from scipy.stats import norm

from diffcomp.errors import ProtocolError
from diffcomp.schedule import make_schedule
from diffcomp.sources import (PATCH_BANK_MAGIC, GaussianMixtureSource, GaussianSource, PatchBankSource,
                              SourceOracle, denoiser_from_score, denoiser_from_velocity, gaussian_rd,
                              load_patch_bank, marginal_logdensity, oracle_field, perturbed_field, posterior_mean,
                              sample_source, save_patch_bank, score, score_from_denoiser, synthetic_patch_bank,
                              training_objective, velocity, velocity_from_denoiser)


class TestGaussianSource:
    """Closed forms of the Gaussian oracle."""

    @pytest.fixture(autouse=True)
    def setup(self):
        """Prepare the test."""
        self.source = GaussianSource([0.5], [[2.0]])
        self.x = np.array([[-1.0], [0.0], [0.3], [2.5]])
        yield

    def test_denoiser(self):
        """The posterior mean shrinks towards the source mean."""
        alpha, sigma = 0.8, 0.6
        gain = alpha * 2.0 / (alpha * alpha * 2.0 + sigma * sigma)
        expected = 0.5 + gain * (self.x - alpha * 0.5)
        assert np.allclose(self.source.denoise(self.x, alpha, sigma), expected)

    def test_logpdf(self):
        """The noisy marginal is Gaussian."""
        alpha, sigma = 0.8, 0.6
        expected = norm.logpdf(self.x[:, 0], alpha * 0.5, math.sqrt(alpha * alpha * 2.0 + sigma * sigma))
        assert np.allclose(self.source.logpdf(self.x, alpha, sigma), expected)

    def test_score_is_the_gradient_of_the_logpdf(self):
        """The score matches a finite difference of the log-density."""
        alpha, sigma, h = 0.8, 0.6, 1e-6
        upper = self.source.logpdf(self.x + h, alpha, sigma)
        numeric = (upper - self.source.logpdf(self.x - h, alpha, sigma)) / (2 * h)
        assert np.allclose(self.source.score_at(self.x, alpha, sigma)[:, 0], numeric, atol=1e-6)

    def test_posterior_samples(self):
        """Posterior draws have the posterior mean and variance."""
        rng = np.random.default_rng(5)
        x = np.full((100000, 1), 0.4)
        draws = self.source.posterior_sample(x, 0.8, 0.6, rng)
        assert np.mean(draws) == pytest.approx(float(self.source.denoise(x[:1], 0.8, 0.6)[0, 0]), abs=5e-3)
        assert np.var(draws) == pytest.approx(float(self.source.posterior_variance(x[:1], 0.8, 0.6)[0, 0]),
                                              rel=2e-2)

    def test_mmse_and_mutual_information(self):
        """The mmse and the mutual information follow the eigenvalues."""
        source = GaussianSource.diagonal([0.0, 1.0], [4.0, 0.25])
        assert source.mmse(2.0) == pytest.approx(4.0 / 9.0 + 0.25 / 1.5)
        assert source.mmse(math.inf) == 0.0
        assert source.mutual_information(2.0) == pytest.approx(0.5 * math.log2(9.0) + 0.5 * math.log2(1.5))

    def test_monte_carlo_mmse_agrees_with_closed_form(self):
        """The generic estimate is close to the exact value."""
        source = GaussianSource.standard(2)
        assert SourceOracle.mmse(source, 1.5) == pytest.approx(source.mmse(1.5), rel=3e-2)

    def test_correlated_covariance(self):
        """A non-diagonal covariance is handled in its eigenbasis."""
        covariance = np.array([[2.0, 0.8], [0.8, 1.0]])
        source = GaussianSource([0.0, 0.0], covariance)
        assert np.allclose(np.sort(source.variances()), np.linalg.eigvalsh(covariance))
        draws = source.sample(np.random.default_rng(1), 100000)
        assert np.allclose(np.cov(draws.T), covariance, atol=3e-2)

    @pytest.mark.parametrize("mean,covariance", [
        ([0.0, 0.0], [[1.0]]),
        ([0.0], [[-1.0]]),
        ([0.0, 0.0], [[1.0, 0.5], [0.4, 1.0]]),
    ])
    def test_invalid_parameters(self, mean, covariance):
        """Mismatched, non-symmetric or indefinite covariances are rejected."""
        with pytest.raises(ValueError):
            GaussianSource(mean, covariance)


class TestGaussianMixtureSource:
    """The mixture oracle."""

    @pytest.fixture(autouse=True)
    def setup(self):
        """Prepare the test."""
        self.mixture = GaussianMixtureSource([0.3, 0.7], [GaussianSource([-2.0], [[0.5]]),
                                                          GaussianSource([1.0], [[0.2]])])
        self.x = np.linspace(-3.0, 3.0, 13)[:, np.newaxis]
        yield

    def test_responsibilities_sum_to_one(self):
        """Responsibilities are probabilities and favour the nearer component."""
        r = self.mixture.responsibilities(self.x, 0.9, 0.4)
        assert np.allclose(r.sum(axis=-1), 1.0)
        assert r[0, 0] > 0.99
        assert r[-1, 1] > 0.99

    def test_identical_components_reduce_to_a_gaussian(self):
        """A mixture of equal components behaves like the component."""
        component = GaussianSource([0.3], [[1.5]])
        mixture = GaussianMixtureSource([0.5, 0.5], [component, component])
        for method in ("denoise", "score_at", "posterior_variance"):
            assert np.allclose(getattr(mixture, method)(self.x, 0.7, 0.7), getattr(component, method)(self.x, 0.7, 0.7))
        assert np.allclose(mixture.logpdf(self.x, 0.7, 0.7), component.logpdf(self.x, 0.7, 0.7))

    def test_moments(self):
        """The mixture mean and covariance follow the law of total variance."""
        assert self.mixture.mean()[0] == pytest.approx(0.3 * -2.0 + 0.7 * 1.0)
        expected = 0.3 * (0.5 + 4.0) + 0.7 * (0.2 + 1.0) - 0.1 ** 2
        assert self.mixture.covariance()[0, 0] == pytest.approx(expected)

    def test_sampling(self):
        """Samples have the mixture mean."""
        draws = self.mixture.sample(np.random.default_rng(2), 100000)
        assert draws.shape == (100000, 1)
        assert np.mean(draws) == pytest.approx(0.1, abs=2e-2)
        assert self.mixture.sample(np.random.default_rng(2)).shape == (1,)

    def test_score_is_the_gradient_of_the_logpdf(self):
        """The mixture score matches a finite difference of the log-density."""
        h = 1e-6
        numeric = (self.mixture.logpdf(self.x + h, 0.9, 0.4) - self.mixture.logpdf(self.x - h, 0.9, 0.4)) / (2 * h)
        assert np.allclose(self.mixture.score_at(self.x, 0.9, 0.4)[:, 0], numeric, rtol=1e-5, atol=1e-5)

    @pytest.mark.parametrize("weights", [[0.5], [0.6, 0.6], [-0.2, 1.2]])
    def test_invalid_weights(self, weights):
        """Weights must match the components and form a distribution."""
        with pytest.raises(ValueError):
            GaussianMixtureSource(weights, [GaussianSource.standard(), GaussianSource.standard()])


class TestPatchBankSource:
    """The finite patch-bank source."""

    @pytest.fixture(autouse=True)
    def setup(self):
        """Prepare the test."""
        self.codes = synthetic_patch_bank(count=32, rows=2, cols=2, seed=4)
        self.bank = PatchBankSource.from_codes(self.codes)
        yield

    def test_from_codes(self):
        """Codes are scaled to the unit interval with an 8-bit dequantization width."""
        assert self.bank.count == 32
        assert self.bank.dim == 4
        assert self.bank.shape == (2, 2)
        assert self.bank.dequantization_width == pytest.approx(1.0 / 256.0)
        assert np.allclose(self.bank.atoms * 255.0, self.codes.reshape(32, 4))

    def test_synthetic_bank_is_deterministic(self):
        """The same seed gives the same 8-bit patches."""
        assert self.codes.dtype == np.uint8
        assert np.array_equal(synthetic_patch_bank(count=32, rows=2, cols=2, seed=4), self.codes)
        assert not np.array_equal(synthetic_patch_bank(count=32, rows=2, cols=2, seed=5), self.codes)

    def test_posterior_concentrates_at_low_noise(self):
        """At low noise the posterior picks the atom that generated the state."""
        atom = self.bank.atoms[7]
        weights = self.bank.posterior_weights(0.999 * atom, 0.999, 1e-4)
        assert weights.shape == (32,)
        assert int(np.argmax(weights)) == self.bank.atom_index(atom)
        assert np.allclose(self.bank.denoise(0.999 * atom, 0.999, 1e-4), atom, atol=1e-6)

    def test_posterior_at_high_noise_is_the_prior(self):
        """Without signal the posterior mean is the bank mean."""
        assert np.allclose(self.bank.denoise(np.zeros(4), 1e-6, 1.0), self.bank.mean(), atol=1e-5)

    def test_logpdf_matches_mixture_of_gaussians(self):
        """The noisy marginal is a uniform mixture over the atoms."""
        x = np.array([0.2, 0.4, 0.5, 0.6])
        alpha, sigma = 0.7, 0.3
        expected = np.log(np.mean(np.prod(norm.pdf(x, alpha * self.bank.atoms, sigma), axis=1)))
        assert float(self.bank.logpdf(x[np.newaxis], alpha, sigma)[0]) == pytest.approx(expected)

    def test_posterior_samples_are_atoms(self):
        """Posterior draws are always members of the bank."""
        rng = np.random.default_rng(8)
        draws = self.bank.posterior_sample(rng.standard_normal((20, 4)), 0.5, 0.5, rng)
        for draw in draws:
            self.bank.atom_index(draw)

    def test_dequantized_samples(self):
        """Dequantized draws stay within one cell above an atom."""
        draws = sample_source(self.bank, np.random.default_rng(3), 200)
        nearest = np.floor(draws * 255.0 + 1e-9) / 255.0
        assert np.all(draws - nearest < self.bank.dequantization_width + 1e-12)
        assert not np.all(np.isin(draws, self.bank.atoms))

    def test_atom_index_of_a_foreign_value(self):
        """A value outside the bank has no index."""
        with pytest.raises(ValueError):
            self.bank.atom_index(np.full(4, -1.0))

    def test_save_and_load(self, tmp_path):
        """The patch-bank file format preserves the codes."""
        path = tmp_path / "bank.dfpb"
        save_patch_bank(path, self.codes)
        assert path.read_bytes()[:4] == PATCH_BANK_MAGIC
        loaded = load_patch_bank(path)
        assert np.array_equal(loaded.atoms, self.bank.atoms)
        assert loaded.describe()["digest"] == self.bank.describe()["digest"]

    def test_wide_codes(self, tmp_path):
        """Codes above 255 are stored as 16-bit values."""
        path = tmp_path / "wide.dfpb"
        save_patch_bank(path, np.arange(8, dtype=np.uint16).reshape(2, 2, 2) * 1000)
        loaded = load_patch_bank(path)
        assert loaded.atoms.max() == pytest.approx(7000.0 / 65535.0)

    @pytest.mark.parametrize("data", [b"", b"XXXX" + bytes(9), PATCH_BANK_MAGIC + bytes(9)])
    def test_malformed_files(self, tmp_path, data):
        """Files with a bad header are rejected."""
        path = tmp_path / "bad.dfpb"
        path.write_bytes(data)
        with pytest.raises(ProtocolError):
            load_patch_bank(path)

    def test_truncated_body(self, tmp_path):
        """A body shorter than the header announces is rejected."""
        path = tmp_path / "short.dfpb"
        save_patch_bank(path, self.codes)
        path.write_bytes(path.read_bytes()[:-1])
        with pytest.raises(ProtocolError):
            load_patch_bank(path)


class TestScheduleFunctions:
    """Oracles evaluated along a schedule."""

    @pytest.fixture(autouse=True)
    def setup(self):
        """Prepare the test."""
        self.schedule = make_schedule("variance-preserving")
        self.source = GaussianSource([0.2, -0.4], [[1.0, 0.3], [0.3, 0.5]])
        self.x = np.random.default_rng(9).standard_normal((6, 2))
        self.t = 0.4
        yield

    def test_conversions_are_consistent(self):
        """Denoiser, score and velocity describe the same field."""
        alpha, sigma = float(self.schedule.alpha(self.t)), float(self.schedule.sigma(self.t))
        x_hat = posterior_mean(self.source, self.schedule, self.x, self.t)
        s = score(self.source, self.schedule, self.x, self.t)
        v = velocity(self.source, self.schedule, self.x, self.t)
        assert np.allclose(s, score_from_denoiser(x_hat, self.x, alpha, sigma))
        assert np.allclose(denoiser_from_score(s, self.x, alpha, sigma), x_hat)
        assert np.allclose(v, velocity_from_denoiser(x_hat, self.x, self.schedule, self.t))
        assert np.allclose(denoiser_from_velocity(v, self.x, self.schedule, self.t), x_hat)

    def test_per_row_times(self):
        """An array of times applies one time per state."""
        times = np.linspace(0.1, 0.9, 6)
        batch = posterior_mean(self.source, self.schedule, self.x, times)
        single = np.stack([posterior_mean(self.source, self.schedule, row, t) for row, t in zip(self.x, times)])
        assert np.allclose(batch, single)
        assert marginal_logdensity(self.source, self.schedule, self.x, times).shape == (6,)

    def test_score_is_singular_at_zero(self):
        """The score is undefined at t = 0."""
        with pytest.raises(ValueError):
            score(self.source, self.schedule, self.x, 0.0)

    def test_non_finite_states(self):
        """Non-finite states are rejected."""
        with pytest.raises(ValueError):
            posterior_mean(self.source, self.schedule, np.array([np.nan, 0.0]), self.t)


class TestTrainingObjective:
    """The denoising objective that a trained network would minimize."""

    @pytest.fixture(autouse=True)
    def setup(self):
        """Prepare the test."""
        self.schedule = make_schedule("variance-preserving")
        self.source = GaussianSource.standard()
        yield

    def test_oracle_objective_is_the_mutual_information(self):
        """With the ELBO weighting the oracle loss is the information gathered down to t_min."""
        t_min = 0.2
        objective = training_objective(self.source, self.schedule, trials=400000, rng=np.random.default_rng(1),
                                       t_min=t_min)
        expected = 0.5 * math.log1p(float(self.schedule.snr(t_min))) - 0.5 * math.log1p(
            float(self.schedule.snr(1.0)))
        assert objective == pytest.approx(expected, rel=5e-2)

    @pytest.mark.parametrize("target", ["denoiser", "velocity"])
    def test_oracle_minimizes_the_objective(self, target):
        """Shifting the oracle increases the loss."""
        field = oracle_field(self.source, self.schedule)
        exact = training_objective(field, self.schedule, trials=20000, rng=np.random.default_rng(3), target=target,
                                   t_min=0.05)
        shifted = training_objective(perturbed_field(field, 0.5), self.schedule, trials=20000,
                                     rng=np.random.default_rng(3), target=target, t_min=0.05)
        assert shifted > exact

    def test_invalid_arguments(self):
        """Bad trial counts and targets are rejected."""
        with pytest.raises(ValueError):
            training_objective(self.source, self.schedule, trials=0)
        with pytest.raises(ValueError):
            training_objective(self.source, self.schedule, target="noise")


class TestGaussianRateDistortion:
    """Reverse water-filling."""

    def test_single_component(self):
        """A unit Gaussian at distortion 1/4 needs one bit."""
        assert gaussian_rd([1.0], 0.25) == pytest.approx(1.0)

    def test_water_filling(self):
        """The water level splits the distortion across components."""
        assert gaussian_rd([4.0, 1.0], 1.5) == pytest.approx(0.5 * math.log2(4.0 / 0.75) + 0.5 * math.log2(1.0 / 0.75))
        assert gaussian_rd([4.0, 0.1], 1.1) == pytest.approx(0.5 * math.log2(4.0))

    def test_large_distortion(self):
        """A distortion above the total variance is free."""
        assert gaussian_rd([1.0, 2.0], 3.0) == 0.0

    @pytest.mark.parametrize("distortion", [0.0, -1.0])
    def test_invalid_distortion(self, distortion):
        """The distortion must be positive."""
        with pytest.raises(ValueError):
            gaussian_rd([1.0], distortion)
