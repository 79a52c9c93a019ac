"""Command-line harness for the ASIR / SIR toolkit.

Usage:
    asir verify --config configs/verify_uniform3.toml --out out/verify
    asir failure-mode --config configs/failure_mode.toml --workers 8
    asir stationary --config configs/grid_walk.toml --verbose

Exit codes: 0 success (or verification pass), 1 verification fail,
2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import asyncio
import hashlib
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import pandas as pd

from asir import __version__
from asir.bridge import deduce_asir
from asir.config import MODES, ExperimentConfig, load_config
from asir.engine import RNG_ALGORITHM, AsirConfig, check_transitions, simulate_replicate
from asir.ensemble import (
    EnsembleReport,
    equivalence_report,
    failure_mode_experiment,
    run_ensemble,
    run_ensemble_remote,
)
from asir.errors import AsirError, ConfigurationError, InvalidParameter
from asir.markov import ergodicity, meetup_probability, mixing_time, stationary_distribution
from asir.sir import discretization_gap, simulate_sir_euler, simulate_sir_rk4

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_CONFIG_ERROR = 2
EXIT_RUNTIME_ERROR = 3

FLOAT_FORMAT = "%.17g"
# all-pairs mixing time keeps an n x n distribution matrix; above this only location 0 starts
MIXING_ALL_STARTS_LIMIT = 1000


def write_csv(frame: pd.DataFrame, path: Path) -> Path:
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    logger.info(f"wrote {path}")
    return path


def write_metadata(out: Path, mode: str, config_bytes: bytes, master_seed: int) -> Path:
    """metadata.json; created_at is the only field that changes between identical runs."""
    metadata = {
        "mode": mode,
        "config_sha256": hashlib.sha256(config_bytes).hexdigest(),
        "master_seed": master_seed,
        "tool_version": __version__,
        "rng_algorithm": RNG_ALGORITHM,
        "created_at": datetime.now(timezone.utc).isoformat(),
    }
    path = out / "metadata.json"
    path.write_text(json.dumps(metadata, indent=2) + "\n", encoding="utf-8")
    return path


def run_sir(config: ExperimentConfig, out: Path) -> int:
    params = config.sir.params
    euler = simulate_sir_euler(params)
    rk4 = simulate_sir_rk4(params, substeps=config.sir.substeps)
    euler.write_csv(out / "sir_euler.csv")
    rk4.write_csv(out / "sir_rk4.csv")

    gap = discretization_gap(euler, rk4)
    write_csv(pd.DataFrame([gap]), out / "discretization_gap.csv")

    t_peak, peak = euler.peak()
    print(f"R0 (alpha / beta):   {params.basic_reproduction_number:.6g}")
    print(f"Euler peak I:        {peak:.6g} at t = {t_peak}")
    print(f"Final R (Euler):     {euler.r[-1]:.6g}")
    print(
        "Max |Euler - RK4|:   "
        + "  ".join(f"{name}={value:.6g}" for name, value in gap.items())
    )
    return EXIT_OK


def run_stationary(config: ExperimentConfig, out: Path) -> int:
    T = config.map.matrix
    report = ergodicity(T)
    print(f"Locations:           {T.n_locations}")
    print(
        f"Ergodic:             {report.ergodic} (classes = {report.communicating_class_count}, "
        f"period = {report.period})"
    )
    row = {
        "irreducible": report.irreducible,
        "aperiodic": report.aperiodic,
        "communicating_class_count": report.communicating_class_count,
        "period": report.period,
        "meetup_probability": None,
        "iterations": None,
        "residual": None,
        "mixing_time": None,
    }
    # written again below once pi is known; a non-ergodic map stops after this write
    write_csv(pd.DataFrame([row]), out / "ergodicity.csv")

    pi = stationary_distribution(T)
    meetup = meetup_probability(pi)

    starts = range(T.n_locations) if T.n_locations <= MIXING_ALL_STARTS_LIMIT else [0]
    t_mix = mixing_time(T, pi, starts=starts)

    write_csv(
        pd.DataFrame({"location": np.arange(T.n_locations), "pi": pi.probabilities}),
        out / "stationary.csv",
    )
    row.update(meetup_probability=meetup, iterations=pi.iterations, residual=pi.residual, mixing_time=t_mix)
    write_csv(pd.DataFrame([row]), out / "ergodicity.csv")
    print(f"P(meetup):           {meetup:.12g}")
    print(f"Power iterations:    {pi.iterations} (residual {pi.residual:.3e})")
    print(f"Mixing time (1/4):   {t_mix if t_mix is not None else 'not reached'}")
    return EXIT_OK


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return json.dumps(value)
    return repr(value)


def render_asir_toml(experiment: ExperimentConfig, asir: AsirConfig) -> str:
    """Ready-to-run `asir` mode document with explicit alpha_prime / beta_prime."""
    lines = ['mode = "asir"', "", "[map]"]
    if experiment.map.is_grid:
        lines += [
            "",
            "[map.grid]",
            f"side = {experiment.map.side}",
            f"stay_prob = {experiment.map.stay_prob!r}",
        ]
    else:
        rows = ",\n".join(
            "  [" + ", ".join(repr(float(x)) for x in row) + "]" for row in asir.map.to_rows()
        )
        lines.append(f"matrix = [\n{rows},\n]")
    mode = asir.init_mode
    lines += [
        "",
        "[asir]",
        f"alpha_prime = {asir.alpha_prime!r}",
        f"beta_prime = {asir.beta_prime!r}",
        f"s0 = {asir.s0}",
        f"i0 = {asir.i0}",
        f"r0 = {asir.r0}",
        f"horizon = {asir.horizon}",
        f"init_mode = {_toml_value(mode.kind.value)}",
        f"location = {mode.location}",
    ]
    if mode.infected_location is not None:
        lines.append(f"infected_location = {mode.infected_location}")
    lines.append(f"seed = {asir.seed}")
    return "\n".join(lines) + "\n"


def run_deduce(config: ExperimentConfig, out: Path) -> int:
    block = config.asir
    result = deduce_asir(
        config.sir.params, config.map.matrix, seed=block.seed, init_mode=block.init_mode
    )
    summary = result.summary()
    summary["warnings"] = "; ".join(summary["warnings"])
    write_csv(pd.DataFrame([summary]), out / "bridge.csv")

    print(f"alpha' = {result.asir_config.alpha_prime:.12g}")
    print(f"beta'  = {result.asir_config.beta_prime:.12g}")
    print(f"P(meetup) = {result.meetup:.12g}")
    for warning in result.warnings:
        print(f"warning: {warning}")

    if config.output.write_config:
        path = out / "asir.toml"
        path.write_text(render_asir_toml(config, result.asir_config), encoding="utf-8")
        logger.info(f"wrote {path}")
        print(f"Generated config: {path}")
    return EXIT_OK


def run_asir(config: ExperimentConfig, out: Path) -> int:
    asir = config.asir_config()
    frames, traces = [], []
    for replicate in range(config.asir.replicates):
        trajectory = simulate_replicate(asir, replicate, trace=config.output.trace)
        frames.append(trajectory.to_frame())
        if config.output.trace:
            check_transitions(trajectory.health_history)
            traces.append(trajectory.trace_frame())
    write_csv(pd.concat(frames, ignore_index=True), out / "trajectories.csv")
    if traces:
        write_csv(pd.concat(traces, ignore_index=True), out / "agents.csv")

    clamps = sum(int(frame["clamps"].sum()) for frame in frames)
    final = frames[0].iloc[-1]
    print(f"Replicates:          {config.asir.replicates}")
    print(f"Replicate 0 final:   S={final['S']} I={final['I']} R={final['R']}")
    print(f"Clamp events:        {clamps}")
    return EXIT_OK


def _ensemble(config: ExperimentConfig, asir: AsirConfig, workers: int | None):
    ensemble = config.ensemble
    if ensemble.backend == "flash":
        if not os.environ.get("RUNPOD_API_KEY"):
            raise InvalidParameter(
                "ensemble.backend", "flash", "RUNPOD_API_KEY environment variable not set"
            )
        return asyncio.run(
            run_ensemble_remote(
                asir,
                ensemble.replicates,
                batch_size=ensemble.batch_size,
                concurrency=ensemble.concurrency,
            )
        )
    return run_ensemble(asir, ensemble.replicates, workers=workers)


def _write_report(report: EnsembleReport, out: Path, name: str) -> None:
    write_csv(report.to_frame(), out / f"{name}.csv")
    (out / f"{name}_footer.txt").write_text(report.footer() + "\n", encoding="utf-8")


def run_verify(config: ExperimentConfig, out: Path, workers: int | None) -> int:
    asir = config.asir_config()
    reference = simulate_sir_euler(config.sir.params)
    started = time.perf_counter()
    report = equivalence_report(
        _ensemble(config, asir, workers),
        reference,
        z_threshold=config.ensemble.z_threshold,
        coverage_threshold=config.ensemble.coverage_threshold,
    )
    _write_report(report, out, "summary")

    print(f"alpha' = {asir.alpha_prime:.6g}  beta' = {asir.beta_prime:.6g}")
    print(f"Wall time: {time.perf_counter() - started:.2f}s")
    print(report.footer())
    return EXIT_OK if report.passed else EXIT_VERIFY_FAILED


def run_failure_mode(config: ExperimentConfig, out: Path, workers: int | None) -> int:
    failure = config.failure
    result = failure_mode_experiment(
        config.sir.params,
        config.map.matrix,
        side=failure.side,
        stay_prob=failure.stay_prob,
        n_agents=failure.n_agents,
        n_replicates=config.ensemble.replicates,
        seed=config.asir.seed,
        workers=workers,
        z_threshold=config.ensemble.z_threshold,
        coverage_threshold=config.ensemble.coverage_threshold,
        diagnostics=failure.diagnostics,
    )
    _write_report(result.grid_report, out, "grid_summary")
    _write_report(result.contrast_report, out, "contrast_summary")
    path = out / "failure_summary.json"
    path.write_text(json.dumps(result.summary, indent=2) + "\n", encoding="utf-8")
    logger.info(f"wrote {path}")

    print("=== Sparse grid, corner-seeded ===")
    print(result.grid_report.footer())
    print(f"peak mean I: {result.summary['grid_peak_mean_I']:.6g}")
    print(f"final mean R: {result.summary['grid_final_mean_R']:.6g}")
    print("\n=== Reference map, stationary start ===")
    print(result.contrast_report.footer())
    return EXIT_OK


def execute(config: ExperimentConfig, out: Path, config_bytes: bytes = b"",
            workers: int | None = None) -> int:
    """Run the configured mode, writing artifacts and metadata.json into `out`."""
    out.mkdir(parents=True, exist_ok=True)
    workers = workers or config.ensemble.workers or os.cpu_count() or 1
    write_metadata(out, config.mode, config_bytes, config.asir.seed)

    if config.mode == "sir":
        return run_sir(config, out)
    if config.mode == "stationary":
        return run_stationary(config, out)
    if config.mode == "deduce":
        return run_deduce(config, out)
    if config.mode == "asir":
        return run_asir(config, out)
    if config.mode == "verify":
        return run_verify(config, out, workers)
    return run_failure_mode(config, out, workers)


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        prog="asir", description="Agent-based SIR equivalence toolkit"
    )
    parser.add_argument("mode", choices=MODES, help="Experiment to run")
    parser.add_argument("--config", required=True, type=Path, help="TOML experiment file")
    parser.add_argument(
        "--out", type=Path, default=None, help="Output directory (default: output.directory)"
    )
    parser.add_argument(
        "--workers",
        type=int,
        default=None,
        help="Local worker processes (default: ensemble.workers, else all CPUs)",
    )
    parser.add_argument("--verbose", action="store_true", help="Debug logging")
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    args = parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    try:
        if args.workers is not None and args.workers < 1:
            raise InvalidParameter("--workers", args.workers, "must be >= 1")
        config = load_config(args.config, mode=args.mode)
        out = args.out or config.output.directory
        return execute(config, out, args.config.read_bytes(), workers=args.workers)
    except ConfigurationError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except AsirError as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME_ERROR
    except OSError as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME_ERROR
    except Exception as e:
        # exit code 1 is reserved for a failed verdict
        logger.debug("unexpected failure", exc_info=True)
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
