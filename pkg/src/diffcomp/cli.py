#  Copyright (c) 2026. The diffcomp authors
#  This file is part of the diffcomp project which is released under the MIT license.

"""
The ``diffcomp`` command.

.. code::

    diffcomp [-v] compress CONFIG [--input X.npy] [--output OUT] [--ledger LEDGER] [--seed SEED]
    diffcomp [-v] decompress CONFIG STREAM [--frames K] [--output OUT.npz] [--reconstruction KIND]
    diffcomp [-v] sweep CONFIG [--taus T1,T2,...] [--rates R1,R2,...] [--output OUT.csv] [--trials N] [--n-jobs J]
    diffcomp [-v] eval-rdp CONFIG [--trials N] [--seed SEED]
    diffcomp [-v] simulate-channel --mode {dq,pfr} --x X1,X2,... --scale S [--reference-mean M] [--reference-std R]

Results go to stdout as JSON (CSV for a sweep without ``--output``), logs go to stderr.
Relative output paths are resolved in the ``[output] directory`` of the configuration.

Exit status is 0 on success, 2 for an invalid configuration or argument,
3 for a malformed or mismatched bitstream and 1 for any other failure.
Failures print a JSON object ``{"error": ..., "message": ...}`` to stderr
and leave no output files behind.

.. autofunction:: main
"""

import argparse
import dataclasses
import io
import itertools
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
from joblib import Parallel, delayed

from .channelsim import (ChannelKind, ChannelSpec, GaussianReference, SyncedRandomness, dq_encode, pfr_encode,
                         shared_uniform)
from .codec import (Bitstream, CodecConfig, ProgressiveDecoder, ReconstructionKind, cost_estimate,
                    encode_progressive, negative_elbo_bits, reconstruct)
from .config import RunConfig
from .errors import ConfigError, DiffCompError, ProtocolError
from .framing import FrameStream
from .rdp import (FailedPoint, RDPPoint, gaussian_fit_w2, immse_mutual_information, lloyd_max,
                  quantizer_posterior_sample, stochastic_code_bound, w2_distance, write_rdp_csv)
from .sources import GaussianSource, PatchBankSource, SourceOracle, gaussian_rd, sample_source
from .version import __version__

logger = logging.getLogger(__name__)

_CODEC_METHODS = (
    ("codec-sde", ReconstructionKind.SDE),
    ("codec-ode", ReconstructionKind.ODE),
    ("posterior-mean", ReconstructionKind.POSTERIOR_MEAN),
)
_LLOYD_METHODS = ("lloyd-posterior-sample", "lloyd-mean")

Point = Union[RDPPoint, FailedPoint]


def _float_list(text: str) -> List[float]:
    try:
        return [float(item) for item in text.split(",") if item.strip()]
    except ValueError as error:
        raise argparse.ArgumentTypeError(str(error)) from error


def _int_list(text: str) -> List[int]:
    try:
        return [int(item) for item in text.split(",") if item.strip()]
    except ValueError as error:
        raise argparse.ArgumentTypeError(str(error)) from error


def _output_path(run: RunConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    return path if path.is_absolute() else run.output_directory / path


def _write_outputs(outputs: Dict[Path, bytes]) -> None:
    """Writes all files or none."""
    written: List[Path] = []
    try:
        for path, data in outputs.items():
            path.parent.mkdir(parents=True, exist_ok=True)
            written.append(path)
            with open(path, "wb") as stream:
                stream.write(data)
    except BaseException:
        for path in written:
            path.unlink()
        raise


def _draw_inputs(config: CodecConfig, rng: np.random.Generator, count: Optional[int] = None) -> np.ndarray:
    """Source draws; atoms of the bank when the stream ends losslessly."""
    oracle = config.oracle
    if config.lossless_tail and isinstance(oracle, PatchBankSource):
        return oracle.sample(rng, count)
    return sample_source(oracle, rng, count)


def _load_input(path: Path, config: CodecConfig) -> np.ndarray:
    with open(path, "rb") as stream:
        x0 = np.load(stream, allow_pickle=False)
    if x0.size != config.dim:
        raise ValueError("input {} has {} values, the source has dimension {}".format(path, x0.size, config.dim))
    return np.asarray(x0, dtype=float).reshape(config.dim)


def _compress(args: argparse.Namespace) -> Dict[str, Any]:
    run = RunConfig.from_file(args.config)
    config = run.codec_config(args.seed)
    if args.input is not None:
        x0 = _load_input(Path(args.input), config)
    else:
        x0 = _draw_inputs(config, SyncedRandomness(config.seed).derive("source").generator())
    bitstream, ledger, _ = encode_progressive(x0, config)
    output = _output_path(run, args.output)
    ledger_path = _output_path(run, args.ledger) if args.ledger else output.with_name(output.name + ".ledger.json")
    buffer = io.BytesIO()
    bitstream.write_to(buffer)
    data = buffer.getvalue()
    _write_outputs({output: data, ledger_path: ledger.to_json().encode("utf-8")})
    return {
        "output": str(output),
        "ledger": str(ledger_path),
        "bytes": len(data),
        "frames": len(bitstream.frames),
        "theoretical_bits": ledger.total,
        "measured_bits": ledger.measured_total,
        "ideal_bits": ledger.ideal_total,
        "stream_bits": ledger.stream_bits,
        "seed": config.seed,
    }


def _decompress(args: argparse.Namespace) -> Dict[str, Any]:
    if args.frames is not None and args.frames < 0:
        raise ValueError("--frames must be non-negative")
    run = RunConfig.from_file(args.config)
    with open(args.stream, "rb") as stream:
        header = Bitstream.read_header(stream)
        config = run.codec_config(header.seed)
        decoder = ProgressiveDecoder(header, config)
        for payload in itertools.islice(FrameStream(stream), args.frames):
            decoder.push(payload)
    x, step = decoder.state, decoder.step
    kind = ReconstructionKind(args.reconstruction or config.reconstruction)
    x_hat = reconstruct(x, step, config, kind)
    if step >= len(config.grid):
        time = 0.0
    else:
        time = config.grid.steps[max(step, 0)]
    output = _output_path(run, args.output)
    buffer = _npz_bytes(state=x, reconstruction=x_hat)
    _write_outputs({output: buffer})
    return {
        "output": str(output),
        "step": step,
        "time": time,
        "frames": decoder.frames,
        "reconstruction": kind.value,
    }


def _npz_bytes(**arrays: np.ndarray) -> bytes:
    buffer = io.BytesIO()
    np.savez(buffer, **arrays)
    return buffer.getvalue()


def _realism(samples: np.ndarray, reference: np.ndarray, oracle: SourceOracle) -> float:
    """:math:`W_2` between reconstructions and the source (exact law when scalar Gaussian)."""
    if samples.shape[1] == 1:
        law = oracle if isinstance(oracle, GaussianSource) else reference[:, 0]
        return w2_distance(samples[:, 0], law)
    return gaussian_fit_w2(samples, reference)


def _measure(method: str, rate: float, x0: np.ndarray, x_hat: np.ndarray, oracle: SourceOracle,
             metrics: Sequence[str], trials: int, seed: int) -> RDPPoint:
    mse = float(np.mean((x_hat - x0) ** 2)) if "mse" in metrics else 0.0
    w2 = _realism(x_hat, x0, oracle) if "w2" in metrics else 0.0
    logger.info("%s at %.4f bits: mse %.6g, w2 %.6g", method, rate, mse, w2)
    return RDPPoint(method, rate, mse, w2, trials, seed)


def _tau_rows(run: RunConfig, position: int, tau: float, trials: int, seed: int) -> List[Point]:
    """Codec rows for one tau; every trial encodes its own stream."""
    try:
        config = run.with_values({("grid", "tau"): tau}).codec_config(seed)
        root = SyncedRandomness(seed).derive("sweep", "tau", position)
        x0 = np.atleast_2d(_draw_inputs(config, root.derive("source").generator(), trials))
        reconstructions: Dict[str, List[np.ndarray]] = {method: [] for method, _ in _CODEC_METHODS}
        bits = []
        for trial, x in enumerate(x0):
            trial_config = dataclasses.replace(config, seed=root.derive("trial", trial).stream)
            bitstream, ledger, trajectory = encode_progressive(x, trial_config)
            bits.append(ledger.stream_bits)
            if config.lossless_tail:
                state, step = x, len(config.grid)
            else:
                state, step = trajectory[-1], len(config.grid) - 1
            logger.debug("trial %d: %d frames", trial, len(bitstream.frames))
            for method, kind in _CODEC_METHODS:
                reconstructions[method].append(reconstruct(state, step, trial_config, kind))
        rate = float(np.mean(bits))
        metrics = run.get("eval", "metrics")
        return [_measure(method, rate, x0, np.stack(reconstructions[method]), config.oracle, metrics, trials, seed)
                for method, _ in _CODEC_METHODS]
    except (DiffCompError, ValueError) as error:
        logger.warning("sweep row tau=%s failed: %s", tau, error)
        return [FailedPoint(method, trials, seed, str(error)) for method, _ in _CODEC_METHODS]


def _rate_rows(run: RunConfig, rate: int, trials: int, seed: int) -> List[Point]:
    """Lloyd-Max rows for one rate."""
    try:
        oracle = run.build_oracle()
        quantizer = lloyd_max(oracle, rate)
        rng = SyncedRandomness(seed).derive("sweep", "rate", rate).generator()
        x0 = oracle.sample(rng, trials)
        cells = quantizer.quantize(x0[:, 0])
        estimates = {
            "lloyd-posterior-sample": quantizer_posterior_sample(quantizer, cells, oracle, rng)[:, np.newaxis],
            "lloyd-mean": quantizer.dequantize(cells)[:, np.newaxis],
        }
        metrics = run.get("eval", "metrics")
        return [_measure(method, quantizer.rate, x0, estimates[method], oracle, metrics, trials, seed)
                for method in _LLOYD_METHODS]
    except (DiffCompError, ValueError) as error:
        logger.warning("sweep row rate=%s failed: %s", rate, error)
        return [FailedPoint(method, trials, seed, str(error)) for method in _LLOYD_METHODS]


def _sweep(args: argparse.Namespace) -> Optional[Dict[str, Any]]:
    run = RunConfig.from_file(args.config)
    if args.taus is not None:
        taus = args.taus
    elif args.rates is None:
        taus = [run.codec_config().grid.tau]
    else:
        taus = []
    rates = args.rates or []
    trials = args.trials or run.get("eval", "trials")
    n_jobs = args.n_jobs or run.get("eval", "n_jobs")
    seed = run.seed if args.seed is None else args.seed
    jobs = [delayed(_tau_rows)(run, position, tau, trials, seed) for position, tau in enumerate(taus)]
    jobs.extend(delayed(_rate_rows)(run, rate, trials, seed) for rate in rates)
    rows: List[Point] = [point for result in Parallel(n_jobs=n_jobs)(jobs) for point in result]
    failed = sum(isinstance(point, FailedPoint) for point in rows)
    if args.output is None:
        write_rdp_csv(sys.stdout, rows)
        return None
    output = _output_path(run, args.output)
    text = io.StringIO()
    write_rdp_csv(text, rows)
    _write_outputs({output: text.getvalue().encode("utf-8")})
    return {"output": str(output), "rows": len(rows), "failed": failed, "seed": seed}


def _eval_rdp(args: argparse.Namespace) -> Dict[str, Any]:
    run = RunConfig.from_file(args.config)
    config = run.codec_config(args.seed)
    oracle, schedule, tau = config.oracle, config.schedule, config.grid.tau
    trials = args.trials or run.get("eval", "trials")
    ledger = cost_estimate(config, trials, config.seed)
    immse = immse_mutual_information(oracle, schedule, tau)
    report: Dict[str, Any] = {
        "tau": tau,
        "steps": len(config.grid),
        "backend": config.backend.value,
        "immse_bits": immse,
        "cost_estimate_bits": ledger.total,
        "cost_to_immse_ratio": ledger.total / immse if immse > 0.0 else None,
        "stochastic_code_bound_bits": stochastic_code_bound(ledger.total),
        "trials": trials,
        "seed": config.seed,
    }
    if isinstance(oracle, GaussianSource):
        snr_tau = float(schedule.snr(tau))
        report["closed_form_bits"] = (oracle.mutual_information(snr_tau)
                                      - oracle.mutual_information(float(schedule.snr(schedule.T))))
        mmse = oracle.mmse(snr_tau)
        report["posterior_sampling_mse"] = 2.0 * mmse
        report["rd_at_half_distortion_bits"] = gaussian_rd(oracle.variances(), mmse) if mmse > 0.0 else None
    if config.lossless_tail:
        report["negative_elbo_bits"] = negative_elbo_bits(config, trials, config.seed)
    return report


def _simulate_channel(args: argparse.Namespace) -> Dict[str, Any]:
    x = np.asarray(args.x, dtype=float)
    if x.size == 0:
        raise ValueError("--x needs at least one value")
    randomness = SyncedRandomness(args.seed)
    if args.mode == "dq":
        dither = shared_uniform(randomness, x.size, args.scale)
        indices, y = dq_encode(x, args.scale, dither)
        return {"mode": "dq", "index": indices.tolist(), "y": y.tolist(),
                "dither": dither.tolist(), "seed": args.seed}
    reference = GaussianReference(np.broadcast_to(args.reference_mean, x.shape), args.reference_std)
    channel = ChannelSpec(ChannelKind(args.kind), args.scale, reference)
    result = pfr_encode(channel, x, randomness)
    return {"mode": "pfr", "kind": channel.kind.value, "index": result.index, "y": result.y.tolist(),
            "bits": result.bits_used, "kl_bits": channel.kl_bits(x), "candidates": result.candidates,
            "seed": args.seed}


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffcomp",
                                     description="Progressive lossy compression with diffusion models.")
    parser.add_argument("--version", action="version", version="%(prog)s " + __version__)
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="log more (repeat for debug output); logs go to stderr")
    commands = parser.add_subparsers(dest="command", metavar="COMMAND")
    commands.required = True

    compress = commands.add_parser("compress", help="encode one source vector into a progressive stream")
    compress.add_argument("config", help="run configuration (INI)")
    compress.add_argument("--input", help="source vector as .npy; a seeded source draw when omitted")
    compress.add_argument("--output", default="compressed.dfc", help="bitstream file (default: %(default)s)")
    compress.add_argument("--ledger", help="cost ledger JSON (default: OUTPUT.ledger.json)")
    compress.add_argument("--seed", type=int, help="shared-randomness seed (default: eval.seed or $DIFFCOMP_SEED)")
    compress.set_defaults(handler=_compress)

    decompress = commands.add_parser("decompress", help="decode a stream or a prefix of it")
    decompress.add_argument("config", help="run configuration (INI)")
    decompress.add_argument("stream", help="bitstream file")
    decompress.add_argument("--frames", type=int, help="decode only the first FRAMES frames")
    decompress.add_argument("--output", default="decompressed.npz",
                            help="npz file with arrays 'state' and 'reconstruction' (default: %(default)s)")
    decompress.add_argument("--reconstruction", choices=[kind.value for kind in ReconstructionKind],
                            help="reconstruction mode (default: backend.reconstruction)")
    decompress.set_defaults(handler=_decompress)

    sweep = commands.add_parser("sweep", help="rate, distortion and realism over tau or quantizer rates")
    sweep.add_argument("config", help="run configuration (INI)")
    sweep.add_argument("--taus", type=_float_list, help="comma-separated tau values (default: grid.tau)")
    sweep.add_argument("--rates", type=_int_list, help="comma-separated Lloyd-Max rates in bits")
    sweep.add_argument("--output", help="CSV file; stdout when omitted")
    sweep.add_argument("--trials", type=int, help="trials per row (default: eval.trials)")
    sweep.add_argument("--n-jobs", type=int, help="parallel rows (default: eval.n_jobs)")
    sweep.add_argument("--seed", type=int, help="sweep seed (default: eval.seed or $DIFFCOMP_SEED)")
    sweep.set_defaults(handler=_sweep)

    evaluate = commands.add_parser("eval-rdp", help="rate report: I-MMSE, cost estimate and bounds")
    evaluate.add_argument("config", help="run configuration (INI)")
    evaluate.add_argument("--trials", type=int, help="Monte Carlo trials (default: eval.trials)")
    evaluate.add_argument("--seed", type=int, help="seed (default: eval.seed or $DIFFCOMP_SEED)")
    evaluate.set_defaults(handler=_eval_rdp)

    simulate = commands.add_parser("simulate-channel", help="run one dithered-quantization or PFR simulation")
    simulate.add_argument("--mode", choices=("dq", "pfr"), default="dq")
    simulate.add_argument("--kind", choices=[kind.value for kind in ChannelKind],
                          default=ChannelKind.GAUSSIAN_ADDITIVE.value, help="PFR channel kind")
    simulate.add_argument("--x", type=_float_list, required=True,
                          help="comma-separated input vector; write --x=-1,2 for a leading minus")
    simulate.add_argument("--scale", type=float, default=1.0, help="quantizer width or channel noise scale")
    simulate.add_argument("--reference-mean", type=float, default=0.0)
    simulate.add_argument("--reference-std", type=float, default=2.0)
    simulate.add_argument("--seed", type=int, default=0)
    simulate.set_defaults(handler=_simulate_channel)
    return parser


def _exit_status(error: Exception) -> int:
    if isinstance(error, ProtocolError):
        return 3
    if isinstance(error, ValueError):
        return 2
    return 1


def _report_error(error: Exception) -> None:
    record: Dict[str, Any] = {"error": error.__class__.__name__, "message": str(error)}
    if isinstance(error, ConfigError):
        record["key"] = error.key
    print(json.dumps(record, sort_keys=True), file=sys.stderr)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Runs the command line and returns the exit status."""
    args = _parser().parse_args(argv)
    logging.basicConfig(level=max(logging.WARNING - 10 * args.verbose, logging.DEBUG), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.handler(args)
    except (DiffCompError, ValueError, OSError) as error:
        logger.debug("%s failed", args.command, exc_info=True)
        _report_error(error)
        return _exit_status(error)
    if result is not None:
        print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
