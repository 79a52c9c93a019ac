"""Replicate ensembles and the equivalence verdict against the SIR reference.

Replicate r always draws from derive_stream(seed, r), and results are stored
by replicate index, so the ensemble does not depend on execution order,
worker count or backend (local processes or Flash CPU workers).
"""

from __future__ import annotations

import asyncio
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Awaitable, Callable

import numpy as np
import pandas as pd

from asir.bridge import deduce_asir
from asir.engine import AsirConfig, InitKind, InitMode, simulate_replicate
from asir.errors import (
    AsirError,
    HorizonMismatch,
    InvalidParameter,
    PopulationMismatch,
    ReplicateFailed,
)
from asir.markov import (
    TransitionMatrix,
    grid_walk_map,
    meetup_probability,
    stationary_distribution,
    total_variation_curve,
)
from asir.sir import SirCurve, SirParams, simulate_sir_euler

logger = logging.getLogger(__name__)

COMPARTMENTS = ("S", "I", "R")
DEFAULT_Z_THRESHOLD = 3.0
DEFAULT_COVERAGE_THRESHOLD = 0.95
EXACT_TOLERANCE = 1e-9


@dataclass(frozen=True, eq=False)
class Ensemble:
    """Stacked replicate results; axis 0 is the replicate index."""

    config: AsirConfig
    counts: np.ndarray  # (replicates, horizon + 1, 3)
    events: np.ndarray  # (replicates, 3, horizon + 1): new_inf, new_rec, clamps

    @property
    def n_replicates(self) -> int:
        return self.counts.shape[0]

    @property
    def horizon(self) -> int:
        return self.counts.shape[1] - 1

    @property
    def total_clamp_events(self) -> int:
        return int(self.events[:, 2].sum())

    def mean(self) -> np.ndarray:
        return self.counts.mean(axis=0)

    def standard_error(self) -> np.ndarray:
        return self.counts.std(axis=0, ddof=1) / math.sqrt(self.n_replicates)

    def to_frame(self) -> pd.DataFrame:
        """Replicate trajectories: replicate,t,S,I,R,new_inf,new_rec,clamps."""
        reps, steps, _ = self.counts.shape
        return pd.DataFrame(
            {
                "replicate": np.repeat(np.arange(reps), steps),
                "t": np.tile(np.arange(steps), reps),
                "S": self.counts[:, :, 0].ravel(),
                "I": self.counts[:, :, 1].ravel(),
                "R": self.counts[:, :, 2].ravel(),
                "new_inf": self.events[:, 0].ravel(),
                "new_rec": self.events[:, 1].ravel(),
                "clamps": self.events[:, 2].ravel(),
            }
        )


def _run_batch(config: AsirConfig, start: int, stop: int) -> tuple[int, np.ndarray, np.ndarray]:
    steps = config.horizon + 1
    counts = np.empty((stop - start, steps, 3), dtype=np.int64)
    events = np.empty((stop - start, 3, steps), dtype=np.int64)
    for k, replicate in enumerate(range(start, stop)):
        try:
            trajectory = simulate_replicate(config, replicate)
        except ReplicateFailed:
            raise
        except Exception as e:
            raise ReplicateFailed(replicate, f"{type(e).__name__}: {e}") from e
        counts[k] = trajectory.counts
        events[k] = (
            trajectory.new_infections,
            trajectory.new_recoveries,
            trajectory.clamp_events,
        )
    return start, counts, events


def _batches(n_replicates: int, batch_size: int) -> list[tuple[int, int]]:
    return [
        (start, min(start + batch_size, n_replicates))
        for start in range(0, n_replicates, batch_size)
    ]


def _check_replicates(n_replicates: int) -> None:
    if n_replicates < 2:
        raise InvalidParameter("replicates", n_replicates, "an ensemble needs at least 2")


def run_ensemble(
    config: AsirConfig,
    n_replicates: int,
    workers: int | None = 1,
    batch_size: int | None = None,
) -> Ensemble:
    """Run replicates 0..n_replicates-1 locally, optionally across worker processes."""
    _check_replicates(n_replicates)
    workers = workers or os.cpu_count() or 1
    if batch_size is None:
        batch_size = max(1, math.ceil(n_replicates / (4 * workers)))

    # resolve pi once so worker processes receive it with the pickled config
    if config.init_mode.kind is InitKind.STATIONARY:
        config.stationary

    steps = config.horizon + 1
    counts = np.empty((n_replicates, steps, 3), dtype=np.int64)
    events = np.empty((n_replicates, 3, steps), dtype=np.int64)

    started = time.perf_counter()
    batches = _batches(n_replicates, batch_size)
    if workers == 1 or len(batches) == 1:
        results = (_run_batch(config, start, stop) for start, stop in batches)
        for start, batch_counts, batch_events in results:
            counts[start : start + len(batch_counts)] = batch_counts
            events[start : start + len(batch_events)] = batch_events
    else:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            futures = [executor.submit(_run_batch, config, a, b) for a, b in batches]
            for future in futures:
                start, batch_counts, batch_events = future.result()
                counts[start : start + len(batch_counts)] = batch_counts
                events[start : start + len(batch_events)] = batch_events
            logger.debug(f"{len(batches)} batches completed on {workers} workers")

    elapsed = time.perf_counter() - started
    logger.info(
        f"ensemble of {n_replicates} replicates (N = {config.n_agents}, "
        f"horizon {config.horizon}) finished in {elapsed:.2f}s"
    )
    return Ensemble(config=config, counts=counts, events=events)


def run_batch_payload(payload: dict) -> dict:
    """Execute one replicate batch described by a JSON payload (Flash worker body)."""
    try:
        config = AsirConfig.from_payload(payload["config"])
        start, stop = (int(x) for x in payload["replicates"])
        start, counts, events = _run_batch(config, start, stop)
    except ReplicateFailed as e:
        return {"status": "error", "replicate": e.replicate, "message": str(e)}
    except (AsirError, KeyError, TypeError, ValueError) as e:
        return {"status": "error", "replicate": None, "message": f"{type(e).__name__}: {e}"}
    return {
        "status": "success",
        "start": start,
        "counts": counts.tolist(),
        "events": events.tolist(),
    }


Dispatch = Callable[[dict], Awaitable[dict]]


async def run_ensemble_remote(
    config: AsirConfig,
    n_replicates: int,
    batch_size: int = 50,
    concurrency: int = 10,
    dispatch: Dispatch | None = None,
) -> Ensemble:
    """Fan replicate batches out to the Flash CPU endpoint and reassemble them by index."""
    _check_replicates(n_replicates)
    if dispatch is None:
        from asir.replicate_worker import simulate_replicates

        dispatch = simulate_replicates

    config_payload = config.to_payload()
    semaphore = asyncio.Semaphore(concurrency)

    async def limited_request(start: int, stop: int) -> dict:
        async with semaphore:
            try:
                return await dispatch({"config": config_payload, "replicates": [start, stop]})
            except ReplicateFailed:
                raise
            except Exception as e:
                raise ReplicateFailed(start, f"batch [{start}, {stop}): {type(e).__name__}: {e}") from e

    started = time.perf_counter()
    batches = _batches(n_replicates, batch_size)
    responses = await asyncio.gather(*(limited_request(a, b) for a, b in batches))

    steps = config.horizon + 1
    counts = np.empty((n_replicates, steps, 3), dtype=np.int64)
    events = np.empty((n_replicates, 3, steps), dtype=np.int64)
    for (start, stop), response in zip(batches, responses):
        if response.get("status") != "success":
            replicate = response.get("replicate")
            raise ReplicateFailed(
                start if replicate is None else replicate,
                response.get("message", "remote worker error"),
            )
        counts[start:stop] = np.asarray(response["counts"], dtype=np.int64)
        events[start:stop] = np.asarray(response["events"], dtype=np.int64)

    elapsed = time.perf_counter() - started
    logger.info(
        f"remote ensemble of {n_replicates} replicates in {len(batches)} batches "
        f"finished in {elapsed:.2f}s"
    )
    return Ensemble(config=config, counts=counts, events=events)


@dataclass(frozen=True, eq=False)
class EnsembleReport:
    n_replicates: int
    mean: np.ndarray  # (horizon + 1, 3)
    se: np.ndarray
    reference: SirCurve
    z: np.ndarray
    coverage: dict[str, float]
    total_clamp_events: int
    passed: bool
    z_threshold: float = DEFAULT_Z_THRESHOLD
    coverage_threshold: float = DEFAULT_COVERAGE_THRESHOLD
    master_seed: int = 0
    notes: list[str] = field(default_factory=list)

    @property
    def reference_matrix(self) -> np.ndarray:
        return np.column_stack([self.reference.s, self.reference.i, self.reference.r])

    def peak_mean(self, compartment: str = "I") -> float:
        return float(self.mean[:, COMPARTMENTS.index(compartment)].max())

    def final_mean(self, compartment: str = "R") -> float:
        return float(self.mean[-1, COMPARTMENTS.index(compartment)])

    def to_frame(self) -> pd.DataFrame:
        frame = {"t": np.arange(self.mean.shape[0])}
        for k, name in enumerate(COMPARTMENTS):
            frame[f"mean_{name}"] = self.mean[:, k]
            frame[f"se_{name}"] = self.se[:, k]
        reference = self.reference_matrix
        for k, name in enumerate(COMPARTMENTS):
            frame[f"ref_{name}"] = reference[:, k]
        for k, name in enumerate(COMPARTMENTS):
            frame[f"z_{name}"] = self.z[:, k]
        return pd.DataFrame(frame)

    def footer(self) -> str:
        coverage = ", ".join(f"{name} {self.coverage[name]:.3f}" for name in COMPARTMENTS)
        lines = [
            f"verdict: {'PASS' if self.passed else 'FAIL'}",
            f"coverage (|z| <= {self.z_threshold:g}, required {self.coverage_threshold:g}): "
            f"{coverage}",
            f"total clamp events: {self.total_clamp_events}",
            f"replicates: {self.n_replicates}",
            f"master seed: {self.master_seed}",
        ]
        lines.extend(f"note: {note}" for note in self.notes)
        return "\n".join(lines)


def _z_scores(mean: np.ndarray, se: np.ndarray, reference: np.ndarray) -> np.ndarray:
    difference = mean - reference
    exact = np.abs(difference) <= EXACT_TOLERANCE
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, difference / se, np.where(exact, 0.0, np.sign(difference) * np.inf))
    return z


def equivalence_report(
    ensemble: Ensemble,
    reference: SirCurve,
    z_threshold: float = DEFAULT_Z_THRESHOLD,
    coverage_threshold: float = DEFAULT_COVERAGE_THRESHOLD,
) -> EnsembleReport:
    """Per-timestamp z-band check of the ensemble means against the reference curve.

    Passes when, for every compartment, at least coverage_threshold of the
    timestamps have |z| <= z_threshold and no draw was clamped. A timestamp
    with zero standard error counts as covered only if mean and reference agree.
    """
    if ensemble.horizon != reference.horizon:
        raise HorizonMismatch(ensemble.horizon, reference.horizon)
    if abs(ensemble.config.n_agents - reference.n_total) > EXACT_TOLERANCE:
        raise PopulationMismatch(ensemble.config.n_agents, reference.n_total)
    if not 0.0 < coverage_threshold <= 1.0:
        raise InvalidParameter("coverage_threshold", coverage_threshold, "must be in (0, 1]")

    mean = ensemble.mean()
    se = ensemble.standard_error()
    reference_matrix = np.column_stack([reference.s, reference.i, reference.r])
    z = _z_scores(mean, se, reference_matrix)

    covered = np.abs(z) <= z_threshold
    coverage = {name: float(covered[:, k].mean()) for k, name in enumerate(COMPARTMENTS)}
    clamps = ensemble.total_clamp_events
    passed = all(c >= coverage_threshold for c in coverage.values()) and clamps == 0

    notes = []
    if clamps:
        notes.append(f"{clamps} clamp events: the low-density regime was violated")
        logger.warning(notes[-1])
    if not passed:
        logger.warning(f"equivalence check failed: coverage {coverage}, clamps {clamps}")

    return EnsembleReport(
        n_replicates=ensemble.n_replicates,
        mean=mean,
        se=se,
        reference=reference,
        z=z,
        coverage=coverage,
        total_clamp_events=clamps,
        passed=passed,
        z_threshold=z_threshold,
        coverage_threshold=coverage_threshold,
        master_seed=ensemble.config.seed,
        notes=notes,
    )


@dataclass(frozen=True, eq=False)
class FailureModeResult:
    grid_report: EnsembleReport
    contrast_report: EnsembleReport
    summary: dict


def failure_mode_experiment(
    params: SirParams,
    reference_map: TransitionMatrix,
    side: int = 100,
    stay_prob: float = 0.2,
    n_agents: int = 100,
    n_replicates: int = 200,
    seed: int = 0,
    workers: int | None = 1,
    z_threshold: float = DEFAULT_Z_THRESHOLD,
    coverage_threshold: float = DEFAULT_COVERAGE_THRESHOLD,
    diagnostics: bool = True,
) -> FailureModeResult:
    """Sparse-grid, corner-seeded run against a stationary run with the same deduced parameters.

    alpha' and beta' are deduced from `params` on `reference_map`. The grid
    run puts the initially infected agents in the top-left cell and everyone
    else in the bottom-right cell; the contrast run starts from the stationary
    distribution of `reference_map`.
    """
    bridge = deduce_asir(params, reference_map, seed=seed)
    deduced = bridge.asir_config

    grid = grid_walk_map(side, stay_prob)
    i0 = deduced.i0
    r0 = min(deduced.r0, n_agents - i0)
    if i0 > n_agents:
        raise InvalidParameter("failure.n_agents", n_agents, f"must be at least i0 = {i0}")
    corner = grid.n_locations - 1
    grid_config = AsirConfig(
        alpha_prime=deduced.alpha_prime,
        beta_prime=deduced.beta_prime,
        map=grid,
        n_agents=n_agents,
        s0=n_agents - i0 - r0,
        i0=i0,
        r0=r0,
        horizon=params.horizon,
        init_mode=InitMode.point_mass(location=corner, infected_location=0),
        seed=seed,
    )
    grid_reference = simulate_sir_euler(
        replace(params, n_total=n_agents, s0=n_agents - i0 - r0, i0=i0, r0=r0)
    )
    logger.info(f"failure mode: {side}x{side} grid, N = {n_agents}, point-mass corners")
    grid_report = equivalence_report(
        run_ensemble(grid_config, n_replicates, workers=workers),
        grid_reference,
        z_threshold,
        coverage_threshold,
    )

    contrast_report = equivalence_report(
        run_ensemble(deduced, n_replicates, workers=workers),
        simulate_sir_euler(params),
        z_threshold,
        coverage_threshold,
    )

    summary = {
        "alpha_prime": deduced.alpha_prime,
        "beta_prime": deduced.beta_prime,
        "grid_side": side,
        "grid_n_agents": n_agents,
        "grid_i0": i0,
        "grid_peak_mean_I": grid_report.peak_mean("I"),
        "grid_final_mean_R": grid_report.final_mean("R"),
        "grid_pass": grid_report.passed,
        "contrast_peak_mean_I": contrast_report.peak_mean("I"),
        "contrast_final_mean_R": contrast_report.final_mean("R"),
        "contrast_pass": contrast_report.passed,
    }
    if diagnostics:
        grid_pi = stationary_distribution(grid)
        tv = total_variation_curve(grid, grid_pi, start=0, steps=params.horizon)
        summary["grid_meetup_probability"] = meetup_probability(grid_pi)
        summary["grid_tv_distance_at_horizon"] = float(tv[-1])
    return FailureModeResult(grid_report, contrast_report, summary)
