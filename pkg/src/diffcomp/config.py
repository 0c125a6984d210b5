#  Copyright (c) 2026. The diffcomp authors
#  This file is part of the diffcomp project which is released under the MIT license.

"""
Run configuration.

A run is described by an INI document with the sections
``[source]``, ``[schedule]``, ``[grid]``, ``[backend]``, ``[eval]`` and ``[output]``.
Unknown sections and keys are rejected; missing keys take the defaults in :data:`SCHEMA`.

Lists are comma-separated; matrices (covariances, mixture means and variances)
separate their rows with ``;``.

The digest of the canonical form of the document goes into every bitstream
header, so a stream only decodes under the configuration it was made with.
The canonical form sorts sections and keys, strips whitespace and writes numbers
with ``repr(float(value))`` (integers stay integers).

.. autoclass:: RunConfig
   :members:

.. data:: SCHEMA
.. data:: SEED_VARIABLE
"""

import configparser
import hashlib
import logging
import os
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from .codec import DEFAULT_ODE_STEPS, DEFAULT_SDE_STEPS, BackendKind, CodecConfig, ReconstructionKind
from .channelsim import DEFAULT_CHUNK_BITS, DEFAULT_MAX_CANDIDATES
from .errors import ConfigError
from .schedule import NoiseSchedule, ScheduleKind, TimeGrid, make_schedule, make_time_grid
from .sources import (GaussianMixtureSource, GaussianSource, PatchBankSource, SourceKind, SourceOracle,
                      load_patch_bank, synthetic_patch_bank)

logger = logging.getLogger(__name__)

#: Environment variable overriding the default seed when ``[eval] seed`` is absent.
SEED_VARIABLE = "DIFFCOMP_SEED"

_SYNTHETIC_BANK = "synthetic"


def _boolean(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError("not a boolean: {!r}".format(text))


def _floats(text: str) -> List[float]:
    return [float(item) for item in text.split(",") if item.strip()]


def _matrix(text: str) -> List[List[float]]:
    return [_floats(row) for row in text.split(";") if row.strip()]


def _words(text: str) -> List[str]:
    return [item.strip() for item in text.split(",") if item.strip()]


def _canonical_number(value: float) -> str:
    return str(int(value)) if isinstance(value, int) else repr(float(value))


def _canonical(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return _canonical_number(value)
    if isinstance(value, list):
        if value and isinstance(value[0], list):
            return ";".join(_canonical(row) for row in value)
        return ",".join(_canonical(item) for item in value)
    return str(value)


class _Key:
    """How one configuration key is parsed, and its default."""

    def __init__(self, parse: Callable[[str], Any], default: Any = None) -> None:
        self.parse = parse
        self.default = default


#: Known sections and keys with their parsers and defaults.
SCHEMA: Dict[str, Dict[str, _Key]] = {
    "source": {
        "kind": _Key(lambda text: SourceKind(text.lower()).value, SourceKind.GAUSSIAN.value),
        "mean": _Key(_floats, [0.0]),
        "variances": _Key(_matrix, [[1.0]]),
        "covariance": _Key(_matrix),
        "weights": _Key(_floats),
        "means": _Key(_matrix),
        "bank": _Key(str, _SYNTHETIC_BANK),
        "count": _Key(int, 256),
        "patch_rows": _Key(int, 2),
        "patch_cols": _Key(int, 2),
        "dequantization_width": _Key(float),
        "bank_seed": _Key(int, 0),
    },
    "schedule": {
        "kind": _Key(lambda text: ScheduleKind(text.lower()).value, ScheduleKind.VARIANCE_PRESERVING.value),
        "T": _Key(float, 1.0),
        "beta_min": _Key(float),
        "beta_max": _Key(float),
    },
    "grid": {
        "delta": _Key(float, 0.01),
        "tau": _Key(float),
        "skip_threshold_bits": _Key(float, 0.5),
    },
    "backend": {
        "kind": _Key(lambda text: BackendKind(text.lower()).value, BackendKind.UQDM_DQ.value),
        "chunk_target_bits": _Key(float, DEFAULT_CHUNK_BITS),
        "max_candidates": _Key(int, DEFAULT_MAX_CANDIDATES),
        "lossless_tail": _Key(_boolean, False),
        "reconstruction": _Key(lambda text: ReconstructionKind(text.lower()).value, ReconstructionKind.SDE.value),
        "ode_steps": _Key(int, DEFAULT_ODE_STEPS),
        "sde_steps": _Key(int, DEFAULT_SDE_STEPS),
    },
    "eval": {
        "trials": _Key(int, 100),
        "seed": _Key(int),
        "metrics": _Key(_words, ["mse", "w2"]),
        "n_jobs": _Key(int, 1),
    },
    "output": {
        "directory": _Key(str, "."),
    },
}

_METRICS = ("mse", "w2")


class RunConfig:
    """A validated run configuration.

    Args:
        text: The INI document.
        base: Directory that relative paths in the document (patch banks, output) refer to.

    Raises:
        ConfigError: for syntax errors, unknown sections or keys, and invalid values;
            :attr:`ConfigError.key` names the offending ``section.key``.
    """

    def __init__(self, text: str, base: Union[str, Path, None] = None) -> None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str  # type: ignore[assignment]
        try:
            parser.read_string(text)
        except configparser.Error as error:
            raise ConfigError("unreadable configuration: {}".format(error)) from error
        self.base = Path(base) if base is not None else Path(".")
        self._values: Dict[str, Dict[str, Any]] = {}
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError("unknown section [{}]".format(section), section)
            values = self._values.setdefault(section, {})
            for key, raw in parser.items(section):
                if key not in SCHEMA[section]:
                    raise ConfigError("unknown key {}.{}".format(section, key), "{}.{}".format(section, key))
                try:
                    values[key] = SCHEMA[section][key].parse(raw.strip())
                except ValueError as error:
                    raise ConfigError("invalid value {!r} for {}.{}: {}".format(raw, section, key, error),
                                      "{}.{}".format(section, key)) from error
        self._validate()

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "RunConfig":
        """Reads a configuration file; relative paths in it refer to its directory.

        Raises:
            ConfigError: if the file cannot be read or is invalid.
        """
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as error:
            raise ConfigError("cannot read configuration {}: {}".format(path, error)) from error
        return cls(text, path.parent)

    def get(self, section: str, key: str) -> Any:
        """The parsed value of ``section.key``, or its default."""
        return self._values.get(section, {}).get(key, SCHEMA[section][key].default)

    def has(self, section: str, key: str) -> bool:
        """Whether ``section.key`` is set explicitly."""
        return key in self._values.get(section, {})

    def with_values(self, overrides: Mapping[Tuple[str, str], Any]) -> "RunConfig":
        """A copy with the given ``(section, key)`` values replaced, revalidated."""
        lines: List[str] = []
        merged: Dict[str, Dict[str, Any]] = {section: dict(values) for section, values in self._values.items()}
        for (section, key), value in overrides.items():
            merged.setdefault(section, {})[key] = value
        for section in sorted(merged):
            lines.append("[{}]".format(section))
            lines.extend("{} = {}".format(key, _canonical(value)) for key, value in sorted(merged[section].items()))
        return RunConfig("\n".join(lines), self.base)

    def canonical(self) -> str:
        """The canonical text of the document.

        A patch bank read from a file adds the SHA-256 of its bytes,
        so editing the bank in place changes the digest.

        Raises:
            ConfigError: if the patch bank file cannot be read.
        """
        lines: List[str] = []
        for section in sorted(self._values):
            lines.append("[{}]".format(section))
            lines.extend("{} = {}".format(key, _canonical(value))
                         for key, value in sorted(self._values[section].items()))
        bank = self._bank_file()
        if bank is not None:
            try:
                contents = hashlib.sha256(bank.read_bytes()).hexdigest()
            except OSError as error:
                raise ConfigError("cannot read patch bank {}: {}".format(bank, error), "source.bank") from error
            lines.extend(("[source.bank]", "sha256 = {}".format(contents)))
        return "\n".join(lines) + "\n"

    def _bank_file(self) -> Optional[Path]:
        if self.get("source", "kind") != SourceKind.IMAGE_PATCHES.value:
            return None
        bank = self.get("source", "bank")
        return None if bank == _SYNTHETIC_BANK else self.base / bank

    @property
    def digest(self) -> bytes:
        """The SHA-256 digest of :meth:`canonical`."""
        return hashlib.sha256(self.canonical().encode("utf-8")).digest()

    @property
    def seed(self) -> int:
        """``[eval] seed``, else :data:`SEED_VARIABLE` from the environment, else 0.

        Raises:
            ConfigError: if the environment variable is not a non-negative integer.
        """
        if self.has("eval", "seed"):
            return int(self.get("eval", "seed"))
        text = os.environ.get(SEED_VARIABLE)
        if text is None:
            return 0
        try:
            seed = int(text)
        except ValueError as error:
            raise ConfigError("{} is not an integer: {!r}".format(SEED_VARIABLE, text), SEED_VARIABLE) from error
        if not 0 <= seed < 1 << 64:
            raise ConfigError("{} out of range".format(SEED_VARIABLE), SEED_VARIABLE)
        return seed

    @property
    def output_directory(self) -> Path:
        """The directory commands write into."""
        return self.base / self.get("output", "directory")

    def _validate(self) -> None:
        for key in ("count", "patch_rows", "patch_cols"):
            if self.get("source", key) < 1:
                raise ConfigError("source.{} must be positive".format(key), "source." + key)
        for key in ("max_candidates", "ode_steps", "sde_steps"):
            if self.get("backend", key) < 1:
                raise ConfigError("backend.{} must be positive".format(key), "backend." + key)
        if not self.get("backend", "chunk_target_bits") > 0.0:
            raise ConfigError("backend.chunk_target_bits must be positive", "backend.chunk_target_bits")
        if self.get("eval", "trials") < 1:
            raise ConfigError("eval.trials must be positive", "eval.trials")
        if self.has("eval", "seed") and not 0 <= self.get("eval", "seed") < 1 << 64:
            raise ConfigError("eval.seed must be a 64-bit unsigned integer", "eval.seed")
        unknown = [metric for metric in self.get("eval", "metrics") if metric not in _METRICS]
        if unknown:
            raise ConfigError("unknown metrics {}".format(unknown), "eval.metrics")
        if self.get("schedule", "kind") == ScheduleKind.FLOW_MATCHING_LINEAR.value:
            for key in ("beta_min", "beta_max"):
                if self.has("schedule", key):
                    raise ConfigError("flow-matching-linear takes no schedule.{}".format(key), "schedule." + key)
        lossless = self.get("backend", "lossless_tail")
        if lossless and self.get("source", "kind") != SourceKind.IMAGE_PATCHES.value:
            raise ConfigError("a lossless tail needs an image-patches source", "backend.lossless_tail")

    def build_oracle(self) -> SourceOracle:
        """The source oracle described by ``[source]``.

        Raises:
            ConfigError: for inconsistent or missing source parameters.
        """
        kind = SourceKind(self.get("source", "kind"))
        try:
            if kind is SourceKind.GAUSSIAN:
                return self._gaussian()
            if kind is SourceKind.GAUSSIAN_MIXTURE:
                return self._mixture()
            return self._patch_bank()
        except ValueError as error:
            if isinstance(error, ConfigError):
                raise
            raise ConfigError("invalid source: {}".format(error), "source") from error

    def _gaussian(self) -> GaussianSource:
        mean = np.asarray(self.get("source", "mean"), dtype=float)
        if self.has("source", "covariance"):
            covariance = np.asarray(self.get("source", "covariance"), dtype=float)
            if mean.size == 1 and covariance.shape[0] > 1:
                mean = np.full(covariance.shape[0], mean[0])
            return GaussianSource(mean, covariance)
        rows = self.get("source", "variances")
        if len(rows) != 1:
            raise ConfigError("a Gaussian source takes one row of variances", "source.variances")
        variances = np.asarray(rows[0], dtype=float)
        if mean.size == 1 and variances.size > 1:
            mean = np.full(variances.size, mean[0])
        elif variances.size == 1 and mean.size > 1:
            variances = np.full(mean.size, variances[0])
        return GaussianSource.diagonal(mean, variances)

    def _mixture(self) -> GaussianMixtureSource:
        if not (self.has("source", "weights") and self.has("source", "means")):
            raise ConfigError("a Gaussian mixture needs source.weights and source.means", "source.means")
        weights = self.get("source", "weights")
        means = self.get("source", "means")
        variances = self.get("source", "variances")
        if len(variances) == 1:
            variances = variances * len(means)
        if not len(weights) == len(means) == len(variances):
            raise ConfigError("need one mean and one variance row per mixture weight", "source.weights")
        components = []
        for mean, variance in zip(means, variances):
            variance = np.broadcast_to(np.asarray(variance, dtype=float), (len(mean),))
            components.append(GaussianSource.diagonal(mean, variance))
        return GaussianMixtureSource(weights, components)

    def _patch_bank(self) -> PatchBankSource:
        width = self.get("source", "dequantization_width")
        bank = self.get("source", "bank")
        if bank == _SYNTHETIC_BANK:
            codes = synthetic_patch_bank(self.get("source", "count"), self.get("source", "patch_rows"),
                                         self.get("source", "patch_cols"), self.get("source", "bank_seed"))
            return PatchBankSource.from_codes(codes, dequantization_width=width)
        try:
            return load_patch_bank(self.base / bank, width)
        except OSError as error:
            raise ConfigError("cannot read patch bank {}: {}".format(bank, error), "source.bank") from error

    def build_schedule(self) -> NoiseSchedule:
        """The noise schedule described by ``[schedule]``.

        Raises:
            ConfigError: for invalid schedule parameters.
        """
        params = {key: self.get("schedule", key) for key in ("beta_min", "beta_max") if self.has("schedule", key)}
        try:
            return make_schedule(self.get("schedule", "kind"), self.get("schedule", "T"), params)
        except ValueError as error:
            raise ConfigError("invalid schedule: {}".format(error), "schedule") from error

    def build_grid(self, schedule: NoiseSchedule, oracle: Optional[SourceOracle] = None) -> TimeGrid:
        """The time grid described by ``[grid]``; tau defaults to delta.

        Raises:
            ConfigError: if T or tau are not multiples of delta.
        """
        delta = self.get("grid", "delta")
        tau = self.get("grid", "tau") if self.has("grid", "tau") else delta
        variances = oracle.variances() if oracle is not None else (1.0,)
        try:
            return make_time_grid(schedule, delta, tau, self.get("grid", "skip_threshold_bits"), variances)
        except ValueError as error:
            raise ConfigError("invalid grid: {}".format(error), "grid.tau") from error

    def codec_config(self, seed: Optional[int] = None) -> CodecConfig:
        """The codec configuration, carrying this document's digest.

        Raises:
            ConfigError: if the parts do not fit together.
        """
        oracle = self.build_oracle()
        schedule = self.build_schedule()
        grid = self.build_grid(schedule, oracle)
        try:
            return CodecConfig(
                schedule, grid, self.get("backend", "kind"), oracle,
                seed=self.seed if seed is None else seed,
                chunk_target_bits=self.get("backend", "chunk_target_bits"),
                lossless_tail=self.get("backend", "lossless_tail"),
                reconstruction=self.get("backend", "reconstruction"),
                max_candidates=self.get("backend", "max_candidates"),
                ode_steps=self.get("backend", "ode_steps"),
                sde_steps=self.get("backend", "sde_steps"),
                digest_override=self.digest,
            )
        except ValueError as error:
            raise ConfigError("inconsistent configuration: {}".format(error), "backend") from error
