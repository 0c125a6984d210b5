#  Copyright (c) 2026. The diffcomp authors
#  This file is part of the diffcomp project which is released under the MIT license.

"""
Analytic sources with closed-form oracles.

An oracle stands in for a trained diffusion network: it knows the source law
exactly, so the denoiser :math:`E[X_0 \\mid X_t]`, the score, the marginal
density of :math:`X_t` and the posterior of :math:`X_0` are all available in closed form.

Oracle methods take the signal scale ``alpha`` and noise level ``sigma`` directly,
so they also serve step kernels that are not tied to a schedule.
``alpha`` and ``sigma`` are scalars or arrays broadcasting against ``x[..., :1]``.
The module-level functions take a schedule and a time instead.

Classes
-------

.. autoclass:: SourceKind
.. autoclass:: SourceOracle
   :members:
.. autoclass:: GaussianSource
.. autoclass:: GaussianMixtureSource
.. autoclass:: PatchBankSource
   :members: atom_index, posterior_weights, from_codes
.. autoclass:: DenoiserField
   :members:

Functions
---------

.. autofunction:: sample_source
.. autofunction:: posterior_mean
.. autofunction:: score
.. autofunction:: velocity
.. autofunction:: marginal_logdensity
.. autofunction:: gaussian_rd
.. autofunction:: training_objective
.. autofunction:: training_losses
.. autofunction:: elbo_weighting
.. autofunction:: oracle_field
.. autofunction:: perturbed_field
.. autofunction:: load_patch_bank
.. autofunction:: save_patch_bank
.. autofunction:: synthetic_patch_bank
"""

import enum
import hashlib
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.optimize
import scipy.special

from .errors import ProtocolError
from .schedule import ArrayLike, NoiseSchedule

logger = logging.getLogger(__name__)

#: Magic bytes of a patch-bank file.
PATCH_BANK_MAGIC = b"DFPB"
_PATCH_BANK_HEADER = struct.Struct("<4sIHHB")

#: Rows processed at once when evaluating patch-bank kernels.
BANK_BLOCK_ROWS = 2048

_LOG_2PI = math.log(2.0 * math.pi)


class SourceKind(str, enum.Enum):
    """The supported source families."""

    GAUSSIAN = "gaussian"
    GAUSSIAN_MIXTURE = "gaussian-mixture"
    IMAGE_PATCHES = "image-patches"


def _column(value: ArrayLike) -> np.ndarray:
    """Shapes `value` to broadcast against the trailing vector axis."""
    value = np.asarray(value, dtype=float)
    return value[..., np.newaxis] if value.ndim else value


def _check_finite(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("state contains non-finite values")
    return x


class SourceOracle:
    """Base class of all oracles.

    Derived classes implement :meth:`sample`, :meth:`denoise`, :meth:`logpdf`,
    :meth:`posterior_variance`, :meth:`posterior_sample`, :meth:`mean`,
    :meth:`covariance` and :meth:`describe`.
    """

    kind: SourceKind
    dim: int

    def sample(self, rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
        """Draws i.i.d. samples, of shape ``(dim,)`` or ``(size, dim)``."""
        raise NotImplementedError

    def denoise(self, x: np.ndarray, alpha: ArrayLike, sigma: ArrayLike) -> np.ndarray:
        """The posterior mean :math:`E[X_0 \\mid \\alpha X_0 + \\sigma N = x]`."""
        raise NotImplementedError

    def score_at(self, x: np.ndarray, alpha: ArrayLike, sigma: ArrayLike) -> np.ndarray:
        """The gradient of :meth:`logpdf` with respect to `x`."""
        sigma2 = np.asarray(sigma, dtype=float) ** 2
        if np.any(sigma2 == 0.0):
            raise ValueError("the score is singular at zero noise")
        return (np.asarray(alpha) * self.denoise(x, alpha, sigma) - x) / sigma2

    def logpdf(self, x: np.ndarray, alpha: ArrayLike, sigma: ArrayLike) -> np.ndarray:
        """The log-density of :math:`\\alpha X_0 + \\sigma N` at `x`."""
        raise NotImplementedError

    def posterior_variance(self, x: np.ndarray, alpha: ArrayLike, sigma: ArrayLike) -> np.ndarray:
        """The per-coordinate posterior variance of :math:`X_0` given `x`."""
        raise NotImplementedError

    def posterior_sample(self, x: np.ndarray, alpha: ArrayLike, sigma: ArrayLike,
                         rng: np.random.Generator) -> np.ndarray:
        """Draws :math:`X_0` from its posterior given `x`."""
        raise NotImplementedError

    def mean(self) -> np.ndarray:
        """The source mean."""
        raise NotImplementedError

    def covariance(self) -> np.ndarray:
        """The source covariance matrix."""
        raise NotImplementedError

    def describe(self) -> dict:
        """A JSON-serializable description, used in configuration digests."""
        raise NotImplementedError

    def variances(self) -> np.ndarray:
        """The eigenvalues of :meth:`covariance`."""
        return np.linalg.eigvalsh(self.covariance())

    def second_moment(self) -> np.ndarray:
        """The per-coordinate second moment :math:`E[X_{0,i}^2]`."""
        mean = self.mean()
        return np.diag(self.covariance()) + mean * mean

    def mmse(self, xi: float, samples: int = 20000, seed: int = 0) -> float:
        """The total minimum mean squared error at signal-to-noise ratio `xi`.

        The generic implementation is a Monte Carlo estimate that reuses the same
        random numbers for every `xi` (the stream is seeded with `seed`),
        so that the estimate is a smooth function of `xi`.
        """
        if xi < 0.0:
            raise ValueError("snr must be non-negative")
        rng = np.random.default_rng(seed)
        x0 = self.sample(rng, samples)
        noise = rng.standard_normal(x0.shape)
        if math.isinf(xi):
            return 0.0
        alpha = math.sqrt(xi / (1.0 + xi))
        sigma = math.sqrt(1.0 / (1.0 + xi))
        error = x0 - self.denoise(alpha * x0 + sigma * noise, alpha, sigma)
        return float(np.mean(np.sum(error * error, axis=-1)))


class GaussianSource(SourceOracle):
    """A multivariate Gaussian source.

    All oracles are evaluated in the eigenbasis of the covariance.
    """

    kind = SourceKind.GAUSSIAN

    def __init__(self, mean: Sequence[float], covariance: Union[Sequence, np.ndarray]) -> None:
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        covariance = np.atleast_2d(np.asarray(covariance, dtype=float))
        if mean.ndim != 1 or covariance.shape != (mean.size, mean.size):
            raise ValueError("mean of shape {} does not match covariance of shape {}".format(
                mean.shape, covariance.shape))
        if not np.allclose(covariance, covariance.T, rtol=0.0, atol=1e-12):
            raise ValueError("covariance must be symmetric")
        eigenvalues, eigenvectors = np.linalg.eigh(covariance)
        if not np.all(eigenvalues > 0.0):
            raise ValueError("covariance must be positive definite")
        self.dim = mean.size
        self._mean = mean
        self._covariance = covariance
        self._lambda = eigenvalues
        self._basis = eigenvectors

    @classmethod
    def diagonal(cls, mean: Sequence[float], variances: Sequence[float]) -> "GaussianSource":
        """A Gaussian with independent coordinates."""
        return cls(mean, np.diag(np.asarray(variances, dtype=float)))

    @classmethod
    def standard(cls, dim: int = 1) -> "GaussianSource":
        """The standard normal source in `dim` dimensions."""
        return cls(np.zeros(dim), np.eye(dim))

    def _whitened(self, x: np.ndarray, alpha: ArrayLike, sigma: ArrayLike) -> Tuple[np.ndarray, np.ndarray]:
        alpha = np.asarray(alpha, dtype=float)
        sigma = np.asarray(sigma, dtype=float)
        z = (np.asarray(x, dtype=float) - alpha * self._mean) @ self._basis
        d = alpha * alpha * self._lambda + sigma * sigma
        return z, d

    def sample(self, rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
        shape = (self.dim,) if size is None else (size, self.dim)
        eps = rng.standard_normal(shape)
        return self._mean + (eps * np.sqrt(self._lambda)) @ self._basis.T

    def denoise(self, x: np.ndarray, alpha: ArrayLike, sigma: ArrayLike) -> np.ndarray:
        z, d = self._whitened(x, alpha, sigma)
        gain = np.asarray(alpha) * self._lambda / d
        return self._mean + (gain * z) @ self._basis.T

    def score_at(self, x: np.ndarray, alpha: ArrayLike, sigma: ArrayLike) -> np.ndarray:
        z, d = self._whitened(x, alpha, sigma)
        return -(z / d) @ self._basis.T

    def logpdf(self, x: np.ndarray, alpha: ArrayLike, sigma: ArrayLike) -> np.ndarray:
        z, d = self._whitened(x, alpha, sigma)
        return -0.5 * np.sum(z * z / d + np.log(d) + _LOG_2PI, axis=-1)

    def _posterior_eigenvalues(self, alpha: ArrayLike, sigma: ArrayLike) -> np.ndarray:
        alpha = np.asarray(alpha, dtype=float)
        sigma2 = np.asarray(sigma, dtype=float) ** 2
        return self._lambda * sigma2 / (alpha * alpha * self._lambda + sigma2)

    def posterior_variance(self, x: np.ndarray, alpha: ArrayLike, sigma: ArrayLike) -> np.ndarray:
        variance = self._posterior_eigenvalues(alpha, sigma) @ (self._basis * self._basis).T
        return np.broadcast_to(variance, np.shape(x)).copy()

    def posterior_sample(self, x: np.ndarray, alpha: ArrayLike, sigma: ArrayLike,
                         rng: np.random.Generator) -> np.ndarray:
        eps = rng.standard_normal(np.shape(x))
        spread = np.sqrt(self._posterior_eigenvalues(alpha, sigma))
        return self.denoise(x, alpha, sigma) + (eps * spread) @ self._basis.T

    def mean(self) -> np.ndarray:
        return self._mean.copy()

    def covariance(self) -> np.ndarray:
        return self._covariance.copy()

    def variances(self) -> np.ndarray:
        return self._lambda.copy()

    def mmse(self, xi: float, samples: int = 0, seed: int = 0) -> float:
        """The closed form :math:`\\sum_i \\lambda_i / (1 + \\xi \\lambda_i)`."""
        if math.isinf(xi):
            return 0.0
        return float(np.sum(self._lambda / (1.0 + xi * self._lambda)))

    def mutual_information(self, xi: float) -> float:
        """The mutual information in bits between :math:`X_0` and :math:`\\sqrt{\\xi} X_0 + N`."""
        return float(0.5 * np.sum(np.log2(1.0 + xi * self._lambda)))

    def describe(self) -> dict:
        return {
            "kind": self.kind.value,
            "mean": self._mean.tolist(),
            "covariance": self._covariance.tolist(),
        }


class GaussianMixtureSource(SourceOracle):
    """A finite mixture of Gaussian sources.

    Responsibilities are evaluated in log space with max subtraction.
    """

    kind = SourceKind.GAUSSIAN_MIXTURE

    def __init__(self, weights: Sequence[float], components: Sequence[GaussianSource]) -> None:
        weights = np.asarray(weights, dtype=float)
        if weights.ndim != 1 or weights.size != len(components) or not components:
            raise ValueError("need one weight per component")
        if np.any(weights < 0.0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be non-negative and sum to 1")
        dims = {component.dim for component in components}
        if len(dims) != 1:
            raise ValueError("all components must have the same dimension")
        self.dim = dims.pop()
        self.weights = weights
        self.components = tuple(components)
        with np.errstate(divide="ignore"):
            self._log_weights = np.log(weights)

    def _log_joint(self, x: np.ndarray, alpha: ArrayLike, sigma: ArrayLike) -> np.ndarray:
        return np.stack([log_weight + component.logpdf(x, alpha, sigma)
                         for log_weight, component in zip(self._log_weights, self.components)], axis=-1)

    def responsibilities(self, x: np.ndarray, alpha: ArrayLike, sigma: ArrayLike) -> np.ndarray:
        """The posterior component probabilities, shape ``x.shape[:-1] + (K,)``."""
        log_joint = self._log_joint(x, alpha, sigma)
        return np.exp(log_joint - scipy.special.logsumexp(log_joint, axis=-1, keepdims=True))

    def _weighted(self, r: np.ndarray, values: Sequence[np.ndarray]) -> np.ndarray:
        return sum(r[..., k, np.newaxis] * value for k, value in enumerate(values))

    def sample(self, rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
        choice = rng.choice(len(self.components), size=size, p=self.weights)
        draws = np.stack([component.sample(rng, size) for component in self.components], axis=-2)
        return np.take_along_axis(draws, np.asarray(choice)[..., np.newaxis, np.newaxis], axis=-2)[..., 0, :]

    def denoise(self, x: np.ndarray, alpha: ArrayLike, sigma: ArrayLike) -> np.ndarray:
        r = self.responsibilities(x, alpha, sigma)
        return self._weighted(r, [component.denoise(x, alpha, sigma) for component in self.components])

    def score_at(self, x: np.ndarray, alpha: ArrayLike, sigma: ArrayLike) -> np.ndarray:
        r = self.responsibilities(x, alpha, sigma)
        return self._weighted(r, [component.score_at(x, alpha, sigma) for component in self.components])

    def logpdf(self, x: np.ndarray, alpha: ArrayLike, sigma: ArrayLike) -> np.ndarray:
        return scipy.special.logsumexp(self._log_joint(x, alpha, sigma), axis=-1)

    def posterior_variance(self, x: np.ndarray, alpha: ArrayLike, sigma: ArrayLike) -> np.ndarray:
        r = self.responsibilities(x, alpha, sigma)
        means = [component.denoise(x, alpha, sigma) for component in self.components]
        second = self._weighted(r, [component.posterior_variance(x, alpha, sigma) + mean * mean
                                    for component, mean in zip(self.components, means)])
        first = self._weighted(r, means)
        return np.maximum(second - first * first, 0.0)

    def posterior_sample(self, x: np.ndarray, alpha: ArrayLike, sigma: ArrayLike,
                         rng: np.random.Generator) -> np.ndarray:
        r = self.responsibilities(x, alpha, sigma)
        u = np.asarray(rng.random(r.shape[:-1]))
        choice = np.minimum(np.sum(np.cumsum(r, axis=-1) < u[..., np.newaxis], axis=-1), len(self.components) - 1)
        draws = np.stack([component.posterior_sample(x, alpha, sigma, rng) for component in self.components], axis=-2)
        return np.take_along_axis(draws, choice[..., np.newaxis, np.newaxis], axis=-2)[..., 0, :]

    def mean(self) -> np.ndarray:
        return sum(weight * component.mean() for weight, component in zip(self.weights, self.components))

    def covariance(self) -> np.ndarray:
        mean = self.mean()
        second = sum(weight * (component.covariance() + np.outer(component.mean(), component.mean()))
                     for weight, component in zip(self.weights, self.components))
        return second - np.outer(mean, mean)

    def describe(self) -> dict:
        return {
            "kind": self.kind.value,
            "weights": self.weights.tolist(),
            "components": [component.describe() for component in self.components],
        }


class PatchBankSource(SourceOracle):
    """A finite bank of quantized image patches.

    The source law is uniform (or weighted) over the bank's atoms,
    so :math:`X_t` is a Gaussian mixture with one component per atom.
    Sampling adds uniform dequantization noise of width
    :attr:`dequantization_width` only when asked to.
    """

    kind = SourceKind.IMAGE_PATCHES

    def __init__(self, atoms: np.ndarray, dequantization_width: float = 0.0,
                 weights: Optional[Sequence[float]] = None, shape: Optional[Tuple[int, int]] = None) -> None:
        atoms = np.asarray(atoms, dtype=float)
        if atoms.ndim != 2 or atoms.shape[0] < 1:
            raise ValueError("atoms must be a non-empty (count, dim) array")
        if weights is None:
            weights = np.full(atoms.shape[0], 1.0 / atoms.shape[0])
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (atoms.shape[0],) or abs(weights.sum() - 1.0) > 1e-12 or np.any(weights < 0.0):
            raise ValueError("bank weights must be non-negative and sum to 1")
        if dequantization_width < 0.0:
            raise ValueError("dequantization width must be non-negative")
        self.atoms = atoms
        self.weights = weights
        self.dim = atoms.shape[1]
        self.shape = shape or (1, self.dim)
        self.dequantization_width = float(dequantization_width)
        with np.errstate(divide="ignore"):
            self._log_weights = np.log(weights)
        self._norms = np.sum(atoms * atoms, axis=1)

    @classmethod
    def from_codes(cls, codes: np.ndarray, bits: int = 8,
                   dequantization_width: Optional[float] = None) -> "PatchBankSource":
        """Creates a bank from integer pixel codes of shape ``(count, rows, cols)``.

        Codes are mapped to ``code / (2**bits - 1)``; the default dequantization
        width is ``2**-bits``.
        """
        codes = np.asarray(codes)
        levels = (1 << bits) - 1
        width = 1.0 / (1 << bits) if dequantization_width is None else dequantization_width
        count = codes.shape[0]
        shape = tuple(codes.shape[1:]) if codes.ndim == 3 else (1, int(np.prod(codes.shape[1:])))
        return cls(codes.reshape(count, -1).astype(float) / levels, width, shape=shape)  # type: ignore[arg-type]

    @property
    def count(self) -> int:
        """The number of atoms."""
        return self.atoms.shape[0]

    def _logits(self, x: np.ndarray, alpha: ArrayLike, sigma: ArrayLike) -> np.ndarray:
        alpha = np.asarray(alpha, dtype=float)
        sigma2 = np.asarray(sigma, dtype=float) ** 2
        if np.any(sigma2 <= 0.0):
            raise ValueError("patch-bank kernels need positive noise")
        x = np.asarray(x, dtype=float)
        distance = (np.sum(x * x, axis=-1, keepdims=True) - 2.0 * alpha * (x @ self.atoms.T)
                    + alpha * alpha * self._norms)
        return self._log_weights - np.maximum(distance, 0.0) / (2.0 * sigma2)

    def _blocks(self, x: np.ndarray, alpha: ArrayLike, sigma: ArrayLike):
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, self.dim)
        alpha = np.broadcast_to(np.asarray(alpha, dtype=float), x.shape[:-1] + (1,)).reshape(-1, 1)
        sigma = np.broadcast_to(np.asarray(sigma, dtype=float), x.shape[:-1] + (1,)).reshape(-1, 1)
        for start in range(0, flat.shape[0], BANK_BLOCK_ROWS):
            block = slice(start, start + BANK_BLOCK_ROWS)
            yield flat[block], alpha[block], sigma[block]

    def posterior_weights(self, x: np.ndarray, alpha: ArrayLike, sigma: ArrayLike) -> np.ndarray:
        """The posterior probabilities of the atoms, shape ``x.shape[:-1] + (count,)``."""
        x = np.asarray(x, dtype=float)
        rows = [scipy.special.softmax(self._logits(*block), axis=-1) for block in self._blocks(x, alpha, sigma)]
        return np.concatenate(rows, axis=0).reshape(x.shape[:-1] + (self.count,))

    def sample(self, rng: np.random.Generator, size: Optional[int] = None, dequantize: bool = False) -> np.ndarray:
        index = rng.choice(self.count, size=size, p=self.weights)
        draw = self.atoms[index]
        if dequantize:
            draw = draw + self.dequantization_width * rng.random(draw.shape)
        return draw

    def denoise(self, x: np.ndarray, alpha: ArrayLike, sigma: ArrayLike) -> np.ndarray:
        return self.posterior_weights(x, alpha, sigma) @ self.atoms

    def logpdf(self, x: np.ndarray, alpha: ArrayLike, sigma: ArrayLike) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        parts = []
        for block_x, block_alpha, block_sigma in self._blocks(x, alpha, sigma):
            logits = self._logits(block_x, block_alpha, block_sigma)
            normalizer = 0.5 * self.dim * (_LOG_2PI + np.log(block_sigma[:, 0] ** 2))
            parts.append(scipy.special.logsumexp(logits, axis=-1) - normalizer)
        return np.concatenate(parts).reshape(x.shape[:-1])

    def posterior_variance(self, x: np.ndarray, alpha: ArrayLike, sigma: ArrayLike) -> np.ndarray:
        weights = self.posterior_weights(x, alpha, sigma)
        first = weights @ self.atoms
        return np.maximum(weights @ (self.atoms * self.atoms) - first * first, 0.0)

    def posterior_sample(self, x: np.ndarray, alpha: ArrayLike, sigma: ArrayLike,
                         rng: np.random.Generator) -> np.ndarray:
        weights = self.posterior_weights(x, alpha, sigma)
        u = np.asarray(rng.random(weights.shape[:-1]))
        index = np.minimum(np.sum(np.cumsum(weights, axis=-1) < u[..., np.newaxis], axis=-1), self.count - 1)
        return self.atoms[index]

    def atom_index(self, x0: np.ndarray) -> int:
        """The index of the first atom equal to `x0`.

        Raises:
            ValueError: if `x0` is not an atom of the bank.
        """
        matches = np.flatnonzero(np.all(self.atoms == np.asarray(x0, dtype=float), axis=1))
        if matches.size == 0:
            raise ValueError("value is not an atom of the patch bank")
        return int(matches[0])

    def mean(self) -> np.ndarray:
        return self.weights @ self.atoms

    def covariance(self) -> np.ndarray:
        centred = self.atoms - self.mean()
        return (centred * self.weights[:, np.newaxis]).T @ centred

    def variances(self) -> np.ndarray:
        # Tiny eigenvalues of a degenerate bank would make the grid proxy meaningless.
        return np.maximum(super().variances(), 1e-12)

    def describe(self) -> dict:
        digest = hashlib.sha256(self.atoms.tobytes() + self.weights.tobytes()).hexdigest()
        return {
            "kind": self.kind.value,
            "count": self.count,
            "dim": self.dim,
            "dequantization_width": self.dequantization_width,
            "digest": digest,
        }


def synthetic_patch_bank(count: int = 1024, rows: int = 4, cols: int = 4, seed: int = 0) -> np.ndarray:
    """Generates a deterministic bank of smooth 8-bit grayscale patches.

    Each patch is a random brightness plane with a random gradient and a
    little texture, quantized to 8 bits.

    Returns:
        An ``uint8`` array of shape ``(count, rows, cols)``.
    """
    rng = np.random.default_rng(seed)
    grid_r, grid_c = np.meshgrid(np.arange(rows) - 0.5 * (rows - 1), np.arange(cols) - 0.5 * (cols - 1),
                                 indexing="ij")
    base = rng.uniform(0.15, 0.85, size=(count, 1, 1))
    gradient = rng.normal(0.0, 0.06, size=(count, 2, 1, 1))
    texture = rng.normal(0.0, 0.02, size=(count, rows, cols))
    values = base + gradient[:, 0] * grid_r + gradient[:, 1] * grid_c + texture
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_patch_bank(path: Union[str, Path], codes: np.ndarray) -> None:
    """Writes patches of shape ``(count, rows, cols)`` in the patch-bank format.

    Values wider than 8 bits are stored as little-endian 16-bit integers.
    """
    codes = np.asarray(codes)
    if codes.ndim != 3:
        raise ValueError("patch codes must have shape (count, rows, cols)")
    width = 1 if codes.max(initial=0) < 256 else 2
    header = _PATCH_BANK_HEADER.pack(PATCH_BANK_MAGIC, codes.shape[0], codes.shape[1], codes.shape[2], width)
    body = codes.astype("<u1" if width == 1 else "<u2").tobytes(order="C")
    Path(path).write_bytes(header + body)


def load_patch_bank(path: Union[str, Path], dequantization_width: Optional[float] = None) -> PatchBankSource:
    """Reads a patch-bank file.

    Raises:
        ProtocolError: if the file is not a well-formed patch bank.
    """
    data = Path(path).read_bytes()
    if len(data) < _PATCH_BANK_HEADER.size:
        raise ProtocolError(data)
    magic, count, rows, cols, width = _PATCH_BANK_HEADER.unpack_from(data)
    if magic != PATCH_BANK_MAGIC or width not in (1, 2) or count == 0:
        raise ProtocolError(data[:_PATCH_BANK_HEADER.size])
    body = data[_PATCH_BANK_HEADER.size:]
    if len(body) != count * rows * cols * width:
        raise ProtocolError("patch bank body has {} bytes, expected {}".format(len(body), count * rows * cols * width))
    codes = np.frombuffer(body, dtype="<u1" if width == 1 else "<u2").reshape(count, rows, cols)
    logger.info("loaded %d patches of %dx%d from %s", count, rows, cols, path)
    return PatchBankSource.from_codes(codes, bits=8 * width, dequantization_width=dequantization_width)


def sample_source(oracle: SourceOracle, rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
    """Draws from the source law; deterministic given `rng`.

    Patch banks are dequantized, so the draw has a continuous law.
    """
    if isinstance(oracle, PatchBankSource):
        return oracle.sample(rng, size, dequantize=True)
    return oracle.sample(rng, size)


def _schedule_coefficients(schedule: NoiseSchedule, t: ArrayLike) -> Tuple[np.ndarray, np.ndarray]:
    return _column(schedule.alpha(t)), _column(schedule.sigma(t))


def posterior_mean(oracle: SourceOracle, schedule: NoiseSchedule, x_t: np.ndarray, t: ArrayLike) -> np.ndarray:
    """The MMSE denoiser :math:`E[X_0 \\mid X_t = x_t]`.

    Args:
        oracle: The source.
        schedule: The noise schedule.
        x_t: States, shape ``(..., dim)``.
        t: A time, or an array of times with shape ``x_t.shape[:-1]``.

    Raises:
        ValueError: if `x_t` is not finite.
    """
    alpha, sigma = _schedule_coefficients(schedule, t)
    return oracle.denoise(_check_finite(x_t), alpha, sigma)


def score(oracle: SourceOracle, schedule: NoiseSchedule, x_t: np.ndarray, t: ArrayLike) -> np.ndarray:
    """The score :math:`\\nabla \\log p_t(x_t) = (\\alpha_t E[X_0 \\mid x_t] - x_t) / \\sigma_t^2`.

    Raises:
        ValueError: at ``t = 0``, or for non-finite `x_t`.
    """
    if np.any(np.asarray(t) <= 0.0):
        raise ValueError("the score is singular at t = 0")
    alpha, sigma = _schedule_coefficients(schedule, t)
    return score_from_denoiser(oracle.denoise(_check_finite(x_t), alpha, sigma), x_t, alpha, sigma)


def velocity(oracle: SourceOracle, schedule: NoiseSchedule, x_t: np.ndarray, t: ArrayLike) -> np.ndarray:
    """The probability-flow velocity :math:`E[\\dot\\alpha_t X_0 + \\dot\\sigma_t N \\mid x_t]`."""
    return velocity_from_denoiser(posterior_mean(oracle, schedule, x_t, t), x_t, schedule, t)


def marginal_logdensity(oracle: SourceOracle, schedule: NoiseSchedule, x_t: np.ndarray, t: ArrayLike) -> np.ndarray:
    """The log-density of :math:`X_t` at `x_t`.

    Raises:
        ValueError: at ``t = 0`` for patch banks, which have no density there.
    """
    alpha, sigma = _schedule_coefficients(schedule, t)
    return oracle.logpdf(_check_finite(x_t), alpha, sigma)


def score_from_denoiser(x_hat: np.ndarray, x_t: np.ndarray, alpha: ArrayLike, sigma: ArrayLike) -> np.ndarray:
    """Converts a denoiser output into a score."""
    return (np.asarray(alpha) * x_hat - x_t) / np.asarray(sigma) ** 2


def denoiser_from_score(score_value: np.ndarray, x_t: np.ndarray, alpha: ArrayLike, sigma: ArrayLike) -> np.ndarray:
    """Converts a score into a denoiser output."""
    return (x_t + np.asarray(sigma) ** 2 * score_value) / np.asarray(alpha)


def velocity_from_denoiser(x_hat: np.ndarray, x_t: np.ndarray, schedule: NoiseSchedule, t: ArrayLike) -> np.ndarray:
    """Converts a denoiser output into the velocity :math:`\\dot\\alpha \\hat x_0 + \\dot\\sigma \\hat n`."""
    alpha, sigma = _schedule_coefficients(schedule, t)
    noise = (x_t - alpha * x_hat) / sigma
    return _column(schedule.alpha_dot(t)) * x_hat + _column(schedule.sigma_dot(t)) * noise


def denoiser_from_velocity(v: np.ndarray, x_t: np.ndarray, schedule: NoiseSchedule, t: ArrayLike) -> np.ndarray:
    """Converts a velocity into a denoiser output (inverse of :func:`velocity_from_denoiser`)."""
    alpha, sigma = _schedule_coefficients(schedule, t)
    alpha_dot = _column(schedule.alpha_dot(t))
    sigma_dot = _column(schedule.sigma_dot(t))
    return (v - sigma_dot * x_t / sigma) / (alpha_dot - sigma_dot * alpha / sigma)


class Provenance(str, enum.Enum):
    """Where a denoiser field comes from."""

    ORACLE = "oracle"
    PERTURBED = "perturbed-for-testing"


@dataclass(frozen=True)
class DenoiserField:
    """A denoiser :math:`(x_t, t) \\mapsto \\hat x_0` bound to a schedule.

    The score and velocity fields are derived from the denoiser
    with the schedule algebra.
    """

    function: Callable[[np.ndarray, ArrayLike], np.ndarray]
    schedule: NoiseSchedule
    provenance: Provenance
    source: Optional[SourceOracle] = None

    def __call__(self, x_t: np.ndarray, t: ArrayLike) -> np.ndarray:
        return self.function(x_t, t)

    def score(self, x_t: np.ndarray, t: ArrayLike) -> np.ndarray:
        """The score field implied by the denoiser."""
        alpha, sigma = _schedule_coefficients(self.schedule, t)
        return score_from_denoiser(self(x_t, t), x_t, alpha, sigma)

    def velocity(self, x_t: np.ndarray, t: ArrayLike) -> np.ndarray:
        """The velocity field implied by the denoiser."""
        return velocity_from_denoiser(self(x_t, t), x_t, self.schedule, t)


def oracle_field(oracle: SourceOracle, schedule: NoiseSchedule) -> DenoiserField:
    """The exact denoiser of `oracle` under `schedule`."""
    return DenoiserField(lambda x_t, t: posterior_mean(oracle, schedule, x_t, t), schedule, Provenance.ORACLE, oracle)


def perturbed_field(field: DenoiserField, offset: ArrayLike) -> DenoiserField:
    """`field` shifted by a constant `offset`, for optimality tests."""
    offset = np.asarray(offset, dtype=float)
    return DenoiserField(lambda x_t, t: field(x_t, t) + offset, field.schedule, Provenance.PERTURBED, field.source)


def elbo_weighting(schedule: NoiseSchedule, t_min: float = 1e-3) -> Callable[[ArrayLike], np.ndarray]:
    """The weighting :math:`\\lambda(t) = -\\tfrac12 \\dot\\xi(t) (T - t_{min})`.

    With times drawn uniformly from :math:`[t_{min}, T]`, the weighted denoising loss of
    the oracle equals :math:`I(X_0; X_{t_{min}})` in nats, the diffusion negative ELBO
    without its reconstruction term.
    """
    span = schedule.T - t_min
    return lambda t: -0.5 * schedule.snr_dot(t) * span


def training_losses(field: Union[SourceOracle, DenoiserField], schedule: NoiseSchedule,
                    weighting: Optional[Callable[[ArrayLike], ArrayLike]] = None, trials: int = 10000,
                    rng: Optional[np.random.Generator] = None, target: str = "denoiser",
                    t_min: float = 1e-3) -> np.ndarray:
    """Per-trial weighted regression losses of a denoiser field.

    Each trial draws :math:`t \\sim U[t_{min}, T]`, :math:`x_0` from the source and noise,
    and scores the field's prediction of :math:`x_0` (``target="denoiser"``) or of the
    velocity :math:`\\dot\\alpha_t x_0 + \\dot\\sigma_t n` (``target="velocity"``).

    Raises:
        ValueError: for ``trials < 1``, an unknown target, or a field without source.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    if isinstance(field, SourceOracle):
        field = oracle_field(field, schedule)
    if field.source is None:
        raise ValueError("the denoiser field has no source to draw training data from")
    if target not in ("denoiser", "velocity"):
        raise ValueError("unknown regression target {!r}".format(target))
    weighting = weighting or elbo_weighting(schedule, t_min)
    rng = rng if rng is not None else np.random.default_rng()
    t = rng.uniform(t_min, schedule.T, size=trials)
    x0 = field.source.sample(rng, trials)
    noise = rng.standard_normal(x0.shape)
    alpha, sigma = _schedule_coefficients(schedule, t)
    x_t = alpha * x0 + sigma * noise
    if target == "denoiser":
        error = field(x_t, t) - x0
    else:
        truth = _column(schedule.alpha_dot(t)) * x0 + _column(schedule.sigma_dot(t)) * noise
        error = field.velocity(x_t, t) - truth
    weights = np.broadcast_to(np.asarray(weighting(t), dtype=float), t.shape)
    return weights * np.sum(error * error, axis=-1)


def training_objective(field: Union[SourceOracle, DenoiserField], schedule: NoiseSchedule,
                       weighting: Optional[Callable[[ArrayLike], ArrayLike]] = None, trials: int = 10000,
                       rng: Optional[np.random.Generator] = None, target: str = "denoiser",
                       t_min: float = 1e-3) -> float:
    """Monte Carlo estimate of the time-averaged weighted regression loss.

    See :func:`training_losses` for the arguments.
    """
    return float(np.mean(training_losses(field, schedule, weighting, trials, rng, target, t_min)))


def gaussian_rd(variances: Sequence[float], distortion: float) -> float:
    """The rate-distortion function in bits of independent Gaussians (reverse water-filling).

    Args:
        variances: The coordinate variances.
        distortion: The total squared-error distortion, summed over coordinates.

    Raises:
        ValueError: if `distortion` is not positive.
    """
    if not distortion > 0.0:
        raise ValueError("distortion must be positive, got {}".format(distortion))
    lam = np.asarray(variances, dtype=float)
    if distortion >= lam.sum():
        return 0.0
    level = scipy.optimize.brentq(lambda theta: np.minimum(theta, lam).sum() - distortion,
                                  0.0, float(lam.max()), xtol=1e-15)
    active = lam > level
    return float(0.5 * np.sum(np.log2(lam[active] / level)))
