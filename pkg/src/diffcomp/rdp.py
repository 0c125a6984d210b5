#  Copyright (c) 2026. The diffcomp authors
#  This file is part of the diffcomp project which is released under the MIT license.

"""
Rate, distortion and perception evaluators.

Distortion is mean squared error. Realism is measured with the Wasserstein-2
distance :math:`W_2` in linear (not squared) units, so that the distortion-perception
function reads :math:`D(\\gamma) = D(\\infty) + \\max(\\gamma^* - \\gamma, 0)^2`.

Classes
-------

.. autoclass:: DPParams
.. autoclass:: ScalarQuantizer
   :members:
.. autoclass:: DiscreteLaw
.. autoclass:: GaussianChannelTestbed
   :members:
.. autoclass:: RDPPoint
   :members:
.. autoclass:: FailedPoint
   :members:

Functions
---------

.. autofunction:: dp_value
.. autofunction:: interpolate_estimator
.. autofunction:: lloyd_max
.. autofunction:: quantizer_posterior_sample
.. autofunction:: w2_distance
.. autofunction:: gaussian_fit_w2
.. autofunction:: gaussian_channel_testbed
.. autofunction:: immse_mutual_information
.. autofunction:: mutual_information_mc
.. autofunction:: stochastic_code_bound
.. autofunction:: write_rdp_csv
"""

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import IO, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.integrate
import scipy.linalg
from scipy.stats import norm, truncnorm

from .channelsim import SyncedRandomness
from .errors import ConvergenceError
from .schedule import NoiseSchedule
from .sources import GaussianMixtureSource, GaussianSource, SourceOracle

logger = logging.getLogger(__name__)

#: Column order of RDP result files.
CSV_COLUMNS = ("method", "rate_bits", "mse", "w2", "trials", "seed")

_LN2 = math.log(2.0)


@dataclass(frozen=True)
class DPParams:
    """The two numbers that fix the distortion-perception function.

    Attributes:
        d_inf: The MMSE distortion :math:`D(\\infty)`, in squared units.
        gamma_star: :math:`W_2` between the source and the MMSE estimate, in linear units.
    """

    d_inf: float
    gamma_star: float

    def __post_init__(self) -> None:
        if not (self.d_inf >= 0.0 and self.gamma_star >= 0.0):
            raise ValueError("d_inf and gamma_star must be non-negative")


def dp_value(params: DPParams, gamma: float) -> float:
    """The least distortion at realism :math:`W_2 \\le \\gamma`.

    Raises:
        ValueError: if `gamma` is negative.
    """
    if gamma < 0.0:
        raise ValueError("gamma must be non-negative, got {}".format(gamma))
    return params.d_inf + max(params.gamma_star - gamma, 0.0) ** 2


def interpolate_estimator(x_hat0: np.ndarray, x_star: np.ndarray, gamma: float, gamma_star: float) -> np.ndarray:
    """The estimator that traverses the distortion-perception function.

    Interpolates between the perfect-realism estimate `x_hat0` (at ``gamma = 0``)
    and the MMSE estimate `x_star` (at ``gamma = gamma_star``).

    Raises:
        ValueError: unless ``0 <= gamma <= gamma_star`` and ``gamma_star > 0``.
    """
    if not gamma_star > 0.0:
        raise ValueError("interpolation needs gamma_star > 0")
    if not 0.0 <= gamma <= gamma_star:
        raise ValueError("need 0 <= gamma <= gamma_star, got {} and {}".format(gamma, gamma_star))
    weight = gamma / gamma_star
    return (1.0 - weight) * np.asarray(x_hat0, dtype=float) + weight * np.asarray(x_star, dtype=float)


@dataclass(frozen=True)
class DiscreteLaw:
    """A scalar law with finitely many atoms."""

    values: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        values = np.atleast_1d(np.asarray(self.values, dtype=float))
        weights = np.broadcast_to(np.asarray(self.weights, dtype=float), values.shape)
        if values.ndim != 1 or np.any(weights < 0.0) or not weights.sum() > 0.0:
            raise ValueError("a discrete law needs 1-D values and non-negative weights")
        order = np.argsort(values, kind="stable")
        object.__setattr__(self, "values", values[order])
        object.__setattr__(self, "weights", weights[order] / weights.sum())

    @classmethod
    def empirical(cls, samples: np.ndarray) -> "DiscreteLaw":
        """The empirical law of 1-D `samples`."""
        samples = np.asarray(samples, dtype=float)
        if samples.ndim != 1:
            raise ValueError("empirical laws take 1-D samples, got shape {}".format(samples.shape))
        return cls(samples, np.ones(samples.size))


def _scalar_gaussian(source: SourceOracle) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Weights, means and deviations of a scalar Gaussian or Gaussian mixture."""
    if source.dim != 1:
        raise ValueError("scalar quantizers need a 1-D source")
    if isinstance(source, GaussianSource):
        return np.ones(1), source.mean(), np.sqrt(np.diag(source.covariance()))
    if isinstance(source, GaussianMixtureSource):
        means = np.array([component.mean()[0] for component in source.components])
        stds = np.array([math.sqrt(component.covariance()[0, 0]) for component in source.components])
        return source.weights, means, stds
    raise ValueError("scalar quantizer design needs a Gaussian or Gaussian-mixture source")


def _cell_moments(source: SourceOracle, edges: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mass, first and second moment of the source on each cell between consecutive `edges`."""
    weights, means, stds = _scalar_gaussian(source)
    z = (edges[:, np.newaxis] - means) / stds
    cdf = norm.cdf(z)
    pdf = np.where(np.isfinite(z), norm.pdf(z), 0.0)
    zpdf = np.where(np.isfinite(z), z * pdf, 0.0)
    mass = np.diff(cdf, axis=0)
    first = means * mass - stds * np.diff(pdf, axis=0)
    second = (means * means + stds * stds) * mass - 2.0 * means * stds * np.diff(pdf, axis=0) \
        - stds * stds * np.diff(zpdf, axis=0)
    return mass @ weights, first @ weights, second @ weights


@dataclass(frozen=True)
class ScalarQuantizer:
    """A scalar quantizer with reconstruction points.

    Cell ``i`` is ``[thresholds[i-1], thresholds[i])`` with the outer cells unbounded.

    Attributes:
        thresholds: The sorted cell boundaries.
        centroids: One reconstruction point per cell, strictly increasing.
        distortion: The mean squared error on the design source, when known.
    """

    thresholds: np.ndarray
    centroids: np.ndarray
    distortion: Optional[float] = None

    def __post_init__(self) -> None:
        thresholds = np.asarray(self.thresholds, dtype=float)
        centroids = np.asarray(self.centroids, dtype=float)
        if centroids.ndim != 1 or thresholds.shape != (centroids.size - 1,):
            raise ValueError("need exactly one centroid more than thresholds")
        if np.any(np.diff(centroids) <= 0.0) or np.any(np.diff(thresholds) < 0.0):
            raise ValueError("centroids must increase strictly and thresholds must be sorted")
        object.__setattr__(self, "thresholds", thresholds)
        object.__setattr__(self, "centroids", centroids)

    @property
    def cells(self) -> int:
        """The number of cells."""
        return self.centroids.size

    @property
    def rate(self) -> float:
        """The fixed-length rate :math:`\\log_2` (number of cells)."""
        return math.log2(self.cells)

    @property
    def edges(self) -> np.ndarray:
        """The cell edges, including :math:`\\pm\\infty`."""
        return np.concatenate(([-np.inf], self.thresholds, [np.inf]))

    def quantize(self, x: np.ndarray) -> np.ndarray:
        """The cell index of each value."""
        return np.searchsorted(self.thresholds, np.asarray(x, dtype=float), side="right")

    def dequantize(self, cells: np.ndarray) -> np.ndarray:
        """The reconstruction points of cell indices."""
        return self.centroids[np.asarray(cells)]

    def output_law(self, source: SourceOracle) -> DiscreteLaw:
        """The law of the reconstruction when quantizing `source`."""
        mass, _, _ = _cell_moments(source, self.edges)
        return DiscreteLaw(self.centroids, mass)


def lloyd_max(source: SourceOracle, rate: int, iterations: int = 100000, tolerance: float = 1e-10) -> ScalarQuantizer:
    """Designs the MMSE scalar quantizer with ``2**rate`` cells.

    The Lloyd iteration alternates midpoint thresholds and conditional-mean
    centroids, with cell moments from truncated Gaussians. It starts from the
    quantiles of a Gaussian three times wider than the source, close to the
    high-rate optimum.

    Args:
        source: A scalar Gaussian or Gaussian-mixture source.
        rate: Bits per sample, 1 to 8.
        iterations: Iteration limit.
        tolerance: Largest centroid change at the fixed point.

    Raises:
        ValueError: for a rate outside 1 to 8 or an unsupported source.
        ConvergenceError: if the centroids still move after `iterations`.
    """
    if rate not in range(1, 9):
        raise ValueError("rate must be between 1 and 8 bits, got {}".format(rate))
    _scalar_gaussian(source)
    cells = 1 << rate
    mean = float(source.mean()[0])
    std = math.sqrt(float(source.covariance()[0, 0]))
    centroids = mean + math.sqrt(3.0) * std * norm.ppf((np.arange(cells) + 0.5) / cells)
    residual = math.inf
    for iteration in range(iterations):
        thresholds = 0.5 * (centroids[1:] + centroids[:-1])
        mass, first, _ = _cell_moments(source, np.concatenate(([-np.inf], thresholds, [np.inf])))
        updated = np.where(mass > 0.0, first / np.where(mass > 0.0, mass, 1.0), centroids)
        residual = float(np.max(np.abs(updated - centroids)))
        centroids = updated
        if residual < tolerance:
            logger.info("Lloyd-Max at %d bits converged after %d iterations", rate, iteration + 1)
            break
    else:
        raise ConvergenceError("Lloyd-Max did not converge in {} iterations".format(iterations), residual)
    thresholds = 0.5 * (centroids[1:] + centroids[:-1])
    mass, first, second = _cell_moments(source, np.concatenate(([-np.inf], thresholds, [np.inf])))
    distortion = float(np.sum(second - 2.0 * centroids * first + centroids * centroids * mass))
    return ScalarQuantizer(thresholds, centroids, distortion)


def quantizer_posterior_sample(quantizer: ScalarQuantizer, cell: Union[int, np.ndarray], source: SourceOracle,
                               randomness: Union[SyncedRandomness, np.random.Generator]) -> np.ndarray:
    """Draws from the source restricted to the quantizer cell(s).

    This is the posterior-sampling decoder of the quantizer: exact draws of
    :math:`X \\mid X \\in \\text{cell}`, by inverse-CDF sampling of truncated Gaussians.
    A cell collapsed to a point returns that point.

    Raises:
        ValueError: for an invalid cell index or an unsupported source.
    """
    rng = randomness.generator() if isinstance(randomness, SyncedRandomness) else randomness
    cells = np.asarray(cell)
    if np.any(cells < 0) or np.any(cells >= quantizer.cells):
        raise ValueError("cell index out of range")
    weights, means, stds = _scalar_gaussian(source)
    edges = quantizer.edges
    lower = edges[cells]
    upper = edges[cells + 1]
    if weights.size == 1:
        component = np.zeros(cells.shape, dtype=int)
    else:
        masses = weights * (norm.cdf((upper[..., np.newaxis] - means) / stds)
                            - norm.cdf((lower[..., np.newaxis] - means) / stds))
        probabilities = masses / masses.sum(axis=-1, keepdims=True)
        u = np.asarray(rng.random(cells.shape))
        component = np.minimum(np.sum(np.cumsum(probabilities, axis=-1) < u[..., np.newaxis], axis=-1),
                               weights.size - 1)
    mu = means[component]
    sd = stds[component]
    point = upper <= lower
    a = np.where(point, -1.0, (lower - mu) / sd)
    b = np.where(point, 1.0, (upper - mu) / sd)
    draw = truncnorm.rvs(a, b, loc=mu, scale=sd, size=cells.shape, random_state=rng)
    return np.where(point, lower, draw)


def _gaussian_w2(mean_a: np.ndarray, cov_a: np.ndarray, mean_b: np.ndarray, cov_b: np.ndarray) -> float:
    if mean_a.shape != mean_b.shape:
        raise ValueError("dimension mismatch: {} and {}".format(mean_a.shape, mean_b.shape))
    root_b = scipy.linalg.sqrtm(cov_b)
    cross = scipy.linalg.sqrtm(root_b @ cov_a @ root_b)
    squared = float(np.sum((mean_a - mean_b) ** 2) + np.trace(cov_a + cov_b - 2.0 * np.real(cross)))
    return math.sqrt(max(squared, 0.0))


def _discrete_w2(a: DiscreteLaw, b: DiscreteLaw) -> float:
    levels = np.union1d(np.cumsum(a.weights), np.cumsum(b.weights))
    levels = levels[levels < 1.0 - 1e-15]
    width = np.diff(np.concatenate(([0.0], levels, [1.0])))
    index_a = np.searchsorted(np.cumsum(a.weights), np.concatenate(([0.0], levels)) + 0.5 * width, side="right")
    index_b = np.searchsorted(np.cumsum(b.weights), np.concatenate(([0.0], levels)) + 0.5 * width, side="right")
    index_a = np.minimum(index_a, a.values.size - 1)
    index_b = np.minimum(index_b, b.values.size - 1)
    return math.sqrt(float(np.sum(width * (a.values[index_a] - b.values[index_b]) ** 2)))


def _gaussian_discrete_w2(source: GaussianSource, law: DiscreteLaw) -> float:
    """Quantile coupling of a scalar Gaussian with a discrete law, in closed form."""
    levels = np.clip(np.cumsum(law.weights)[:-1], 0.0, 1.0)
    edges = np.concatenate(([-np.inf], source.mean()[0] + math.sqrt(source.covariance()[0, 0]) * norm.ppf(levels),
                            [np.inf]))
    mass, first, second = _cell_moments(source, edges)
    values = law.values
    return math.sqrt(max(float(np.sum(second - 2.0 * values * first + values * values * mass)), 0.0))


Law = Union[np.ndarray, DiscreteLaw, GaussianSource]


def w2_distance(a: Law, b: Law) -> float:
    """The Wasserstein-2 distance between two laws.

    Each law is a 1-D sample array, a :class:`DiscreteLaw`, or a
    :class:`~diffcomp.sources.GaussianSource`. Scalar laws are coupled
    through their quantile functions (exactly, also for a Gaussian against a discrete law);
    two Gaussians of any dimension use the closed form
    :math:`\\|\\mu_a-\\mu_b\\|^2 +
    \\mathrm{tr}(\\Sigma_a + \\Sigma_b - 2(\\Sigma_b^{1/2}\\Sigma_a\\Sigma_b^{1/2})^{1/2})`.

    Raises:
        ValueError: for mismatched dimensions or multi-dimensional samples.
    """
    if isinstance(a, GaussianSource) and isinstance(b, GaussianSource):
        return _gaussian_w2(a.mean(), a.covariance(), b.mean(), b.covariance())
    if isinstance(b, GaussianSource):
        a, b = b, a
    if not isinstance(b, DiscreteLaw):
        b = DiscreteLaw.empirical(b)
    if isinstance(a, GaussianSource):
        if a.dim != 1:
            raise ValueError("dimension mismatch: {}-D Gaussian against a scalar law".format(a.dim))
        return _gaussian_discrete_w2(a, b)
    if not isinstance(a, DiscreteLaw):
        a = DiscreteLaw.empirical(a)
    return _discrete_w2(a, b)


def gaussian_fit_w2(samples_a: np.ndarray, samples_b: np.ndarray) -> float:
    """:math:`W_2` between Gaussians fitted to two sample sets of shape ``(n, d)``.

    The Fréchet-distance proxy used for multi-dimensional realism.

    Raises:
        ValueError: for mismatched dimensions.
    """
    samples_a = np.atleast_2d(np.asarray(samples_a, dtype=float))
    samples_b = np.atleast_2d(np.asarray(samples_b, dtype=float))
    if samples_a.shape[1] != samples_b.shape[1]:
        raise ValueError("dimension mismatch: {} and {}".format(samples_a.shape[1], samples_b.shape[1]))
    cov_a = np.atleast_2d(np.cov(samples_a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(samples_b, rowvar=False))
    return _gaussian_w2(samples_a.mean(axis=0), cov_a, samples_b.mean(axis=0), cov_b)


@dataclass(frozen=True)
class GaussianChannelTestbed:
    """A standard normal :math:`X` observed as :math:`Y = X + N(0, s^2)`.

    With :math:`a = 1/(1 + s^2)` the MMSE estimate is :math:`X^* = aY`,
    the optimal-transport perfect-realism estimate is :math:`\\hat X_0 = X^*/\\sqrt{a}`,
    :math:`D(\\infty) = 1 - a` and :math:`\\gamma^* = 1 - \\sqrt{a}`.
    """

    noise_var: float

    @property
    def gain(self) -> float:
        """The MMSE gain :math:`a`."""
        return 1.0 / (1.0 + self.noise_var)

    @property
    def params(self) -> DPParams:
        """The distortion-perception parameters."""
        return DPParams(1.0 - self.gain, 1.0 - math.sqrt(self.gain))

    def sample(self, rng: np.random.Generator, count: int) -> Tuple[np.ndarray, np.ndarray]:
        """`count` pairs ``(x, y)``."""
        x = rng.standard_normal(count)
        return x, x + math.sqrt(self.noise_var) * rng.standard_normal(count)

    def mmse_estimate(self, y: np.ndarray) -> np.ndarray:
        """:math:`X^* = aY`."""
        return self.gain * np.asarray(y, dtype=float)

    def realism_estimate(self, y: np.ndarray) -> np.ndarray:
        """:math:`\\hat X_0 = \\sqrt{a} Y`, distributed as the source."""
        return math.sqrt(self.gain) * np.asarray(y, dtype=float)

    def estimate(self, y: np.ndarray, gamma: float) -> np.ndarray:
        """The interpolated estimator at realism `gamma`."""
        return interpolate_estimator(self.realism_estimate(y), self.mmse_estimate(y), gamma, self.params.gamma_star)


def gaussian_channel_testbed(noise_var: float) -> GaussianChannelTestbed:
    """The scalar Gaussian-channel testbed.

    Raises:
        ValueError: if `noise_var` is not positive.
    """
    if not noise_var > 0.0:
        raise ValueError("noise variance must be positive")
    return GaussianChannelTestbed(float(noise_var))


#: Below this snr the I-MMSE integrand is integrated in the snr itself.
_LINEAR_SNR = 1e-4


def _checked_quad(function, lower: float, upper: float, limit: int) -> float:
    if upper <= lower:
        return 0.0
    result = scipy.integrate.quad(function, lower, upper, limit=limit, full_output=1)
    value, error = result[0], result[1]
    if len(result) > 3:
        if error > 1e-6 * max(1.0, abs(value)):
            raise ConvergenceError("I-MMSE quadrature failed: {}".format(result[3]), error)
        logger.warning("I-MMSE quadrature reported %r with residual %.3g", result[3], error)
    return value


def immse_mutual_information(oracle: SourceOracle, schedule: NoiseSchedule, tau: float, limit: int = 200) -> float:
    """:math:`I(X_0; X_\\tau) - I(X_0; X_T)` in bits from the I-MMSE relation.

    Integrates :math:`\\tfrac12 \\mathrm{mmse}(\\xi)` over :math:`[\\xi_T, \\xi_\\tau]`
    with adaptive Gauss-Kronrod quadrature in :math:`\\log \\xi`; the tiny-snr end
    is integrated in :math:`\\xi` directly.

    Args:
        oracle: The source; its :meth:`~diffcomp.sources.SourceOracle.mmse` supplies the integrand.
        schedule: The noise schedule.
        tau: The end of transmission, in (0, T].
        limit: Subinterval limit of the quadrature.

    Raises:
        ValueError: if `tau` is outside (0, T].
        ConvergenceError: if the quadrature reports a large residual.
    """
    if not 0.0 < tau <= schedule.T:
        raise ValueError("tau must be in (0, T], got {}".format(tau))
    low = float(schedule.snr(schedule.T))
    high = float(schedule.snr(tau))
    if not high > low:
        return 0.0
    split = min(max(low, _LINEAR_SNR), high)
    nats = _checked_quad(lambda xi: 0.5 * oracle.mmse(xi), low, split, limit)
    nats += _checked_quad(lambda log_xi: 0.5 * oracle.mmse(math.exp(log_xi)) * math.exp(log_xi),
                          math.log(split), math.log(high), limit)
    return nats / _LN2


def mutual_information_mc(oracle: SourceOracle, xi: float, samples: int = 100000, seed: int = 0) -> float:
    """Direct Monte Carlo estimate of :math:`I(X_0; \\sqrt{\\xi} X_0 + N)` in bits.

    Averages :math:`\\log p(y \\mid x_0) - \\log p(y)` with the oracle's marginal density.
    """
    if xi <= 0.0:
        return 0.0
    rng = np.random.default_rng(seed)
    x0 = oracle.sample(rng, samples)
    noise = rng.standard_normal(x0.shape)
    alpha = math.sqrt(xi / (1.0 + xi))
    sigma = math.sqrt(1.0 / (1.0 + xi))
    y = alpha * x0 + sigma * noise
    conditional = -0.5 * np.sum(noise * noise, axis=-1) - oracle.dim * (math.log(sigma) + 0.5 * math.log(2.0 * math.pi))
    return float(np.mean(conditional - oracle.logpdf(y, alpha, sigma)) / _LN2)


def stochastic_code_bound(rate: float) -> float:
    """The expected code length :math:`R + \\log_2(R + 1) + 4` of a stochastic code at rate `rate`.

    Raises:
        ValueError: if `rate` is negative.
    """
    if rate < 0.0:
        raise ValueError("rate must be non-negative")
    return rate + math.log2(rate + 1.0) + 4.0


@dataclass(frozen=True)
class RDPPoint:
    """One rate, distortion, perception measurement. :attr:`w2` is in linear units."""

    method: str
    rate_bits: float
    mse: float
    w2: float
    trials: int
    seed: int

    def __post_init__(self) -> None:
        for name in ("rate_bits", "mse", "w2"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0.0):
                raise ValueError("{} must be finite and non-negative, got {}".format(name, value))
        if self.trials < 1 or self.seed < 0:
            raise ValueError("trials must be positive and the seed non-negative")

    def as_row(self) -> List[str]:
        """The CSV fields in :data:`CSV_COLUMNS` order."""
        return [self.method, repr(float(self.rate_bits)), repr(float(self.mse)), repr(float(self.w2)),
                str(self.trials), str(self.seed)]


class FailedPoint(NamedTuple):
    """A sweep setting whose measurement failed; its numeric fields stay empty in CSV."""

    method: str
    trials: int
    seed: int
    error: str = ""

    def as_row(self) -> List[str]:
        """The CSV fields in :data:`CSV_COLUMNS` order."""
        return [self.method, "", "", "", str(self.trials), str(self.seed)]


def write_rdp_csv(target: Union[str, Path, IO[str]], points: Sequence[Union[RDPPoint, FailedPoint]]) -> None:
    """Writes `points` as CSV with a header row, to a path or an open text stream."""
    if isinstance(target, (str, Path)):
        with open(target, "w", newline="", encoding="utf-8") as stream:
            write_rdp_csv(stream, points)
        return
    writer = csv.writer(target, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for point in points:
        writer.writerow(point.as_row())
