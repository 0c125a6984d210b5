#  Copyright (c) 2026. The diffcomp authors
#  This file is part of the diffcomp project which is released under the MIT license.

"""
Forward diffusion processes.

A forward process perturbs data as :math:`X_t = \\alpha_t X_0 + \\sigma_t N`.
Two noise schedules are supported: the variance-preserving schedule with a
linear :math:`\\beta(t)`, and the linear flow-matching schedule with
:math:`\\alpha_t = 1 - t/T` and :math:`\\sigma_t = t/T`.

Classes
-------

.. autoclass:: ScheduleKind
.. autoclass:: NoiseSchedule
   :members:
.. autoclass:: ForwardPosterior
.. autoclass:: TimeGrid
   :members:

Functions
---------

.. autofunction:: make_schedule
.. autofunction:: forward_sample
.. autofunction:: ancestral_posterior
.. autofunction:: make_time_grid
.. autofunction:: gaussian_step_cost
"""

import enum
import logging
import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]

#: The largest signal-to-noise ratio accepted at the end time.
MAX_TERMINAL_SNR = 1e-4

#: Relative tolerance when checking that times are multiples of the step size.
GRID_TOLERANCE = 1e-9


class ScheduleKind(str, enum.Enum):
    """The supported noise schedules."""

    VARIANCE_PRESERVING = "variance-preserving"
    FLOW_MATCHING_LINEAR = "flow-matching-linear"


@dataclass(frozen=True)
class NoiseSchedule:
    """The functions :math:`\\alpha_t`, :math:`\\sigma_t` and their derivatives.

    All methods accept scalars or numpy arrays of times.
    Time is measured in units of the end time :attr:`T`; the variance-preserving
    :math:`\\beta` is linear in :math:`t/T` between :attr:`beta_min` and :attr:`beta_max`,
    so the terminal signal-to-noise ratio does not depend on :attr:`T`.

    Use :func:`make_schedule` to obtain a validated schedule.
    """

    kind: ScheduleKind
    T: float = 1.0
    beta_min: float = 0.1
    beta_max: float = 20.0

    @property
    def variance_preserving(self) -> bool:
        """True for the variance-preserving kind."""
        return self.kind is ScheduleKind.VARIANCE_PRESERVING

    def _u(self, t: ArrayLike) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if np.any(t < 0.0) or np.any(t > self.T * (1.0 + 1e-12)):
            raise ValueError("time {} outside [0, {}]".format(t, self.T))
        return np.minimum(t / self.T, 1.0)

    def integrated_beta(self, t: ArrayLike) -> np.ndarray:
        """The integral of :math:`\\beta` from 0 to `t` (variance-preserving only)."""
        u = self._u(t)
        return self.beta_min * u + 0.5 * (self.beta_max - self.beta_min) * u * u

    def beta(self, t: ArrayLike) -> np.ndarray:
        """The drift coefficient :math:`\\beta(t)` of the variance-preserving SDE.

        Raises:
            ValueError: for schedules that are not variance preserving.
        """
        if not self.variance_preserving:
            raise ValueError("beta(t) is only defined for variance-preserving schedules")
        u = self._u(t)
        return (self.beta_min + (self.beta_max - self.beta_min) * u) / self.T

    def alpha(self, t: ArrayLike) -> np.ndarray:
        """The signal scale :math:`\\alpha_t`."""
        if self.variance_preserving:
            return np.exp(-0.5 * self.integrated_beta(t))
        return 1.0 - self._u(t)

    def sigma2(self, t: ArrayLike) -> np.ndarray:
        """The noise variance :math:`\\sigma_t^2`."""
        if self.variance_preserving:
            return -np.expm1(-self.integrated_beta(t))
        u = self._u(t)
        return u * u

    def sigma(self, t: ArrayLike) -> np.ndarray:
        """The noise standard deviation :math:`\\sigma_t`."""
        return np.sqrt(self.sigma2(t))

    def snr(self, t: ArrayLike) -> np.ndarray:
        """The signal-to-noise ratio :math:`\\xi(t) = (\\alpha_t/\\sigma_t)^2`, infinite at 0."""
        alpha = self.alpha(t)
        with np.errstate(divide="ignore"):
            return np.divide(alpha * alpha, self.sigma2(t))

    def log_snr(self, t: ArrayLike) -> np.ndarray:
        """The natural logarithm of :meth:`snr`."""
        with np.errstate(divide="ignore"):
            return 2.0 * np.log(self.alpha(t)) - np.log(self.sigma2(t))

    def alpha_dot(self, t: ArrayLike) -> np.ndarray:
        """The time derivative of :math:`\\alpha_t`."""
        if self.variance_preserving:
            return -0.5 * self.beta(t) * self.alpha(t)
        return np.full_like(self._u(t), -1.0 / self.T)

    def sigma2_dot(self, t: ArrayLike) -> np.ndarray:
        """The time derivative of :math:`\\sigma_t^2`."""
        if self.variance_preserving:
            alpha = self.alpha(t)
            return self.beta(t) * alpha * alpha
        return 2.0 * self._u(t) / self.T

    def sigma_dot(self, t: ArrayLike) -> np.ndarray:
        """The time derivative of :math:`\\sigma_t`, infinite at 0 for variance-preserving schedules."""
        with np.errstate(divide="ignore"):
            return np.divide(self.sigma2_dot(t), 2.0 * self.sigma(t))

    def snr_dot(self, t: ArrayLike) -> np.ndarray:
        """The time derivative of :meth:`snr` (negative on (0, T])."""
        alpha = self.alpha(t)
        sigma2 = self.sigma2(t)
        numerator = 2.0 * alpha * self.alpha_dot(t) * sigma2 - alpha * alpha * self.sigma2_dot(t)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.divide(numerator, sigma2 * sigma2)

    def drift(self, t: ArrayLike) -> np.ndarray:
        """The linear drift coefficient :math:`f(t) = \\dot\\alpha_t / \\alpha_t` of the forward SDE."""
        with np.errstate(divide="ignore"):
            return np.divide(self.alpha_dot(t), self.alpha(t))

    def g2(self, t: ArrayLike) -> np.ndarray:
        """The squared diffusion coefficient :math:`g^2(t) = \\dot{\\sigma^2_t} - 2 f(t) \\sigma_t^2`.

        For the variance-preserving schedule this equals :math:`\\beta(t)`.
        """
        if self.variance_preserving:
            return self.beta(t)
        return self.sigma2_dot(t) - 2.0 * self.drift(t) * self.sigma2(t)

    def transition_variance(self, s: float, t: float) -> float:
        """The variance :math:`\\sigma^2_{t|s}` of :math:`X_t` given :math:`X_s`, for ``s <= t``."""
        if self.variance_preserving:
            return float(-np.expm1(-(self.integrated_beta(t) - self.integrated_beta(s))))
        ratio = float(self.alpha(t) / self.alpha(s))
        return float(self.sigma2(t) - ratio * ratio * self.sigma2(s))

    def time_for_snr(self, xi: float) -> float:
        """The time at which :meth:`snr` equals `xi`, clamped to [0, T]."""
        if xi <= 0.0:
            return self.T
        if math.isinf(xi):
            return 0.0
        if self.variance_preserving:
            target = math.log1p(1.0 / xi)
            slope = self.beta_max - self.beta_min
            if slope == 0.0:
                u = target / self.beta_min
            else:
                u = (-self.beta_min + math.sqrt(self.beta_min ** 2 + 2.0 * slope * target)) / slope
        else:
            u = 1.0 / (1.0 + math.sqrt(xi))
        return min(max(u, 0.0), 1.0) * self.T


def make_schedule(kind: Union[str, ScheduleKind], T: float = 1.0,
                  params: Optional[Mapping[str, float]] = None) -> NoiseSchedule:
    """Creates a validated noise schedule.

    Args:
        kind: ``variance-preserving`` or ``flow-matching-linear``.
        T: The end time.
        params: ``beta_min`` and ``beta_max`` for the variance-preserving kind
            (defaults 0.1 and 20). The flow-matching kind takes no parameters.

    Returns:
        A schedule with :math:`\\alpha_0 = 1`, :math:`\\sigma_0 = 0`
        and a terminal signal-to-noise ratio of at most :data:`MAX_TERMINAL_SNR`.

    Raises:
        ValueError: for an unknown kind, unknown parameters, a non-positive end time
            or beta, or a schedule whose terminal signal-to-noise ratio is too large.
    """
    kind = ScheduleKind(kind)
    params = dict(params or {})
    if not (T > 0.0 and math.isfinite(T)):
        raise ValueError("end time T must be positive and finite, got {}".format(T))
    if kind is ScheduleKind.FLOW_MATCHING_LINEAR:
        if params:
            raise ValueError("flow-matching-linear takes no parameters, got {}".format(sorted(params)))
        return NoiseSchedule(kind, float(T))
    unknown = set(params) - {"beta_min", "beta_max"}
    if unknown:
        raise ValueError("unknown variance-preserving parameters {}".format(sorted(unknown)))
    beta_min = float(params.get("beta_min", 0.1))
    beta_max = float(params.get("beta_max", 20.0))
    if not beta_min > 0.0 or not beta_max >= beta_min:
        raise ValueError("need 0 < beta_min <= beta_max, got {} and {}".format(beta_min, beta_max))
    schedule = NoiseSchedule(kind, float(T), beta_min, beta_max)
    terminal = float(schedule.snr(T))
    if terminal > MAX_TERMINAL_SNR:
        raise ValueError("terminal snr {:.3g} exceeds {:g}; increase beta_max".format(terminal, MAX_TERMINAL_SNR))
    return schedule


def forward_sample(schedule: NoiseSchedule, x0: np.ndarray, t: float,
                   rng: np.random.Generator) -> np.ndarray:
    """Draws :math:`X_t = \\alpha_t x_0 + \\sigma_t N` with :math:`N` from `rng`.

    Args:
        schedule: The noise schedule.
        x0: The clean data, of any shape.
        t: The time, in [0, T].
        rng: The randomness stream.

    Returns:
        The perturbed data, with the shape of `x0`.

    Raises:
        ValueError: if `t` is outside [0, T].
    """
    x0 = np.asarray(x0, dtype=float)
    alpha = float(schedule.alpha(t))
    sigma = float(schedule.sigma(t))
    return alpha * x0 + sigma * rng.standard_normal(x0.shape)


@dataclass(frozen=True)
class ForwardPosterior:
    """The forward posterior :math:`X_s \\mid X_t, X_0`.

    The mean is ``xt_coefficient * x_t + x0_coefficient * x0``;
    the posterior is isotropic with variance :attr:`variance`.
    :attr:`uniform_width` is the width of a uniform law with the same variance.
    """

    mean: np.ndarray
    variance: float
    uniform_width: float
    xt_coefficient: float
    x0_coefficient: float


def posterior_coefficients(schedule: NoiseSchedule, t: float, s: float) -> Tuple[float, float, float]:
    """The coefficients of the forward posterior of `s` given `t`.

    Returns:
        ``(xt_coefficient, x0_coefficient, variance)``.

    Raises:
        ValueError: unless ``0 <= s < t <= T``.
    """
    if not 0.0 <= s < t:
        raise ValueError("need 0 <= s < t, got s={} t={}".format(s, t))
    alpha_s = float(schedule.alpha(s))
    alpha_t = float(schedule.alpha(t))
    sigma2_s = float(schedule.sigma2(s))
    sigma2_t = float(schedule.sigma2(t))
    alpha_ts = alpha_t / alpha_s
    sigma2_ts = schedule.transition_variance(s, t)
    xt_coefficient = alpha_ts * sigma2_s / sigma2_t
    x0_coefficient = alpha_s * sigma2_ts / sigma2_t
    variance = sigma2_s * sigma2_ts / sigma2_t
    return xt_coefficient, x0_coefficient, max(variance, 0.0)


def ancestral_posterior(schedule: NoiseSchedule, x0: np.ndarray, x_t: np.ndarray,
                        t: float, s: float) -> ForwardPosterior:
    """The exact Gaussian forward posterior :math:`p(x_s \\mid x_t, x_0)`.

    Args:
        schedule: The noise schedule.
        x0: The clean data.
        x_t: The state at time `t`.
        t: The later time.
        s: The earlier time, ``0 <= s < t``.

    Returns:
        The posterior moments, with the width of the variance-matched uniform law.

    Raises:
        ValueError: unless ``0 <= s < t <= T``.
    """
    a, c, variance = posterior_coefficients(schedule, t, s)
    mean = a * np.asarray(x_t, dtype=float) + c * np.asarray(x0, dtype=float)
    return ForwardPosterior(mean, variance, math.sqrt(12.0 * variance), a, c)


@dataclass(frozen=True)
class TimeGrid:
    """The decreasing sequence of transmission times from T down to :attr:`tau`."""

    delta: float
    tau: float
    steps: Tuple[float, ...]

    def __post_init__(self) -> None:
        steps = self.steps
        if not self.delta > 0.0:
            raise ValueError("delta must be positive")
        if not steps or steps[-1] != self.tau:
            raise ValueError("the grid must end at tau")
        if any(step <= 0.0 for step in steps):
            raise ValueError("grid times must be positive")
        gaps = np.diff(np.asarray(steps))
        if np.any(-gaps < self.delta * (1.0 - GRID_TOLERANCE)):
            raise ValueError("grid times must decrease by at least delta")

    @property
    def T(self) -> float:
        """The first grid time."""
        return self.steps[0]

    @property
    def times(self) -> np.ndarray:
        """The grid times as an array."""
        return np.asarray(self.steps)

    def __len__(self) -> int:
        return len(self.steps)

    def transitions(self) -> Tuple[Tuple[float, float], ...]:
        """The consecutive ``(t, s)`` pairs of the grid."""
        return tuple(zip(self.steps[:-1], self.steps[1:]))


def gaussian_step_cost(schedule: NoiseSchedule, t: float, s: float,
                       variances: Sequence[float]) -> float:
    """Mutual-information increment in bits between `t` and `s` for independent Gaussians.

    This is the expected cost of transmitting :math:`X_s` given :math:`X_t`
    with exact kernels, for a Gaussian source with the given variances.
    """
    lam = np.asarray(variances, dtype=float)
    xi_s = float(schedule.snr(s))
    xi_t = float(schedule.snr(t))
    return float(0.5 * np.sum(np.log2((1.0 + xi_s * lam) / (1.0 + xi_t * lam))))


def _grid_index(value: float, delta: float, name: str) -> int:
    count = int(round(value / delta))
    if count < 1 or abs(count * delta - value) > GRID_TOLERANCE * max(value, delta):
        raise ValueError("{} = {} is not a positive multiple of delta = {}".format(name, value, delta))
    return count


def make_time_grid(schedule: NoiseSchedule, delta: float, tau: float,
                   skip_threshold_bits: Optional[float] = 0.5,
                   variances: Sequence[float] = (1.0,)) -> TimeGrid:
    """Builds the transmission grid with step skipping.

    Starting from T, consecutive steps of the uniform `delta` grid are merged
    as long as the merged step's proxy cost stays below `skip_threshold_bits`.
    The proxy is :func:`gaussian_step_cost` for a Gaussian with the given
    `variances`, which the receiver can evaluate as well.
    Steps whose individual cost reaches the threshold are kept as they are,
    so in practice the thinning happens near T where the costs are small.

    Args:
        schedule: The noise schedule.
        delta: The base step size.
        tau: The end-of-transmission time, a multiple of `delta` in (0, T].
        skip_threshold_bits: Merge threshold; ``None`` or 0 disables skipping.
        variances: Source variances used by the cost proxy.

    Returns:
        The grid, starting at T and ending at `tau`.

    Raises:
        ValueError: if T or `tau` are not multiples of `delta`, or `tau` is outside (0, T].
    """
    if not delta > 0.0:
        raise ValueError("delta must be positive, got {}".format(delta))
    total = _grid_index(schedule.T, delta, "T")
    last = _grid_index(tau, delta, "tau")
    if last > total:
        raise ValueError("tau = {} exceeds T = {}".format(tau, schedule.T))
    base = [schedule.T] + [k * delta for k in range(total - 1, last - 1, -1)]
    base[-1] = float(tau) if last < total else schedule.T
    if not skip_threshold_bits or len(base) < 3:
        return TimeGrid(delta, base[-1], tuple(base))

    steps = [base[0]]
    position = 0
    while position < len(base) - 1:
        t = base[position]
        chosen = position + 1
        for candidate in range(position + 2, len(base)):
            if gaussian_step_cost(schedule, t, base[candidate], variances) >= skip_threshold_bits:
                break
            chosen = candidate
        steps.append(base[chosen])
        position = chosen
    logger.info("time grid: %d base steps thinned to %d", len(base), len(steps))
    return TimeGrid(delta, steps[-1], tuple(steps))
