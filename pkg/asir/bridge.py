"""SIR <-> ASIR parameter correspondence.

alpha = alpha' * P(meetup) * N and beta = beta', with identical initial
compartments. P(meetup) is the sum of squared stationary probabilities of
the map.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from asir.engine import AsirConfig, InitMode
from asir.errors import AlphaPrimeOutOfRange, NegativeCompartment, NonIntegerCompartments
from asir.markov import (
    StationaryDistribution,
    TransitionMatrix,
    meetup_probability,
    stationary_distribution,
)
from asir.sir import SirParams, simulate_sir_euler

logger = logging.getLogger(__name__)

INTEGRALITY_TOLERANCE = 1e-9
# alpha' times a plausible crowded-cell infected count at or above this triggers a warning
LOW_DENSITY_WARNING = 0.5


@dataclass(frozen=True, eq=False)
class BridgeResult:
    asir_config: AsirConfig
    meetup: float
    pi: StationaryDistribution
    warnings: list[str] = field(default_factory=list)

    def summary(self) -> dict:
        config = self.asir_config
        return {
            "alpha_prime": config.alpha_prime,
            "beta_prime": config.beta_prime,
            "meetup_probability": self.meetup,
            "n_agents": config.n_agents,
            "s0": config.s0,
            "i0": config.i0,
            "r0": config.r0,
            "n_locations": config.map.n_locations,
            "warnings": list(self.warnings),
        }


def _as_integer(name: str, value: float) -> int:
    nearest = round(value)
    if abs(value - nearest) > INTEGRALITY_TOLERANCE:
        raise NonIntegerCompartments(name, value)
    return int(nearest)


def deduce_asir(
    params: SirParams,
    map: TransitionMatrix,
    seed: int = 0,
    init_mode: InitMode | None = None,
) -> BridgeResult:
    """Deduce alpha' and beta' for an agent model on `map` that reproduces `params`.

    Horizon is copied from params; seed and init mode are experiment choices
    and default to 0 and stationary.
    """
    n_agents = _as_integer("n", params.n_total)
    s0 = _as_integer("s0", params.s0)
    i0 = _as_integer("i0", params.i0)
    r0 = _as_integer("r0", params.r0)

    pi = stationary_distribution(map)
    meetup = meetup_probability(pi)
    alpha_prime = params.alpha / (meetup * n_agents)
    if alpha_prime > 1.0:
        raise AlphaPrimeOutOfRange(alpha_prime, minimum_n=params.alpha / meetup)

    config = AsirConfig(
        alpha_prime=alpha_prime,
        beta_prime=params.beta,
        map=map,
        n_agents=n_agents,
        s0=s0,
        i0=i0,
        r0=r0,
        horizon=params.horizon,
        init_mode=init_mode or InitMode.stationary(),
        seed=seed,
        pi=pi,
    )
    warnings = _low_density_warnings(params, pi, alpha_prime)
    for message in warnings:
        logger.warning(message)
    logger.info(
        f"deduced alpha' = {alpha_prime:.6g}, beta' = {params.beta:.6g} "
        f"(P(meetup) = {meetup:.6g}, N = {n_agents})"
    )
    return BridgeResult(asir_config=config, meetup=meetup, pi=pi, warnings=warnings)


def _low_density_warnings(
    params: SirParams, pi: StationaryDistribution, alpha_prime: float
) -> list[str]:
    """Flag maps where a crowded cell could push alpha' * k towards 1.

    k is the infected count expected at the busiest location at the reference
    epidemic peak, plus three Poisson standard deviations.
    """
    try:
        _, peak = simulate_sir_euler(params).peak()
    except NegativeCompartment:
        peak = params.n_total
    crowd = float(np.max(pi.probabilities)) * peak
    plausible = crowd + 3.0 * math.sqrt(crowd)
    pressure = alpha_prime * plausible
    if pressure >= LOW_DENSITY_WARNING:
        return [
            f"low-density assumption at risk: alpha' * k = {pressure:.3g} for a plausible "
            f"k = {plausible:.1f} infected at the busiest location; expect clamp events"
        ]
    return []


def implied_sir(config: AsirConfig) -> SirParams:
    """SIR parameters whose unit-step increments the agent configuration matches in expectation."""
    meetup = meetup_probability(config.stationary)
    return SirParams(
        alpha=config.alpha_prime * meetup * config.n_agents,
        beta=config.beta_prime,
        n_total=config.n_agents,
        s0=config.s0,
        i0=config.i0,
        r0=config.r0,
        horizon=config.horizon,
    )


def expected_increments(
    s: int, i: int, alpha_prime: float, beta_prime: float, meetup: float
) -> tuple[float, float, float]:
    """One-step expectations (dS, dI, dR) given counts at t and positions at stationarity.

    Exact as long as no draw is clamped (alpha' * k <= 1 everywhere).
    """
    infections = alpha_prime * meetup * s * i
    recoveries = beta_prime * i
    return -infections, infections - recoveries, recoveries
