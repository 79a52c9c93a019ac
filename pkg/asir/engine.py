"""Agent-based SIR (ASIR) engine.

Each timestamp runs three synchronous phases over the whole population:

1. move: every agent resamples its position from its current row of the
   map, one uniform draw per agent in ascending id order;
2. snapshot: neighbourhoods come from post-move positions and pre-step
   health;
3. transition: each pre-step Susceptible draws once and becomes Infected
   with probability min(1, alpha' * k) for k infected neighbours, then each
   pre-step Infected draws once and recovers with probability beta'.

New health takes effect after all draws. Random streams are numpy PCG64
generators derived per replicate from (seed, replicate index).
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import pandas as pd
import scipy.sparse

from asir.errors import (
    BadCompartmentSplit,
    InvalidParameter,
    SimulationError,
)
from asir.markov import (
    StationaryDistribution,
    TransitionMatrix,
    invert_cumulative,
    stationary_distribution,
    validate_matrix,
)

logger = logging.getLogger(__name__)

RNG_ALGORITHM = "numpy PCG64 seeded by SeedSequence(entropy=seed, spawn_key=(replicate,))"
MAX_SEED = 2**64


class Health(enum.IntEnum):
    SUSCEPTIBLE = 0
    INFECTED = 1
    RECOVERED = 2

    @property
    def letter(self) -> str:
        return self.name[0]


class InitKind(str, enum.Enum):
    STATIONARY = "stationary"
    POINT_MASS = "point_mass"
    UNIFORM = "uniform"


@dataclass(frozen=True)
class InitMode:
    """Initial position rule.

    point_mass puts every agent at `location`, except the initially infected
    ones, which go to `infected_location` when it is given.
    """

    kind: InitKind = InitKind.STATIONARY
    location: int = 0
    infected_location: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", InitKind(self.kind))

    @classmethod
    def stationary(cls) -> "InitMode":
        return cls(InitKind.STATIONARY)

    @classmethod
    def uniform(cls) -> "InitMode":
        return cls(InitKind.UNIFORM)

    @classmethod
    def point_mass(cls, location: int, infected_location: int | None = None) -> "InitMode":
        return cls(InitKind.POINT_MASS, location, infected_location)


@dataclass(frozen=True, eq=False)
class AsirConfig:
    alpha_prime: float
    beta_prime: float
    map: TransitionMatrix
    n_agents: int
    s0: int
    i0: int
    r0: int
    horizon: int
    init_mode: InitMode = field(default_factory=InitMode)
    seed: int = 0
    pi: StationaryDistribution | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        for name in ("alpha_prime", "beta_prime"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise InvalidParameter(name, value, "must be a probability in [0, 1]")
        if self.n_agents < 1:
            raise InvalidParameter("n_agents", self.n_agents, "must be positive")
        if min(self.s0, self.i0, self.r0) < 0 or self.s0 + self.i0 + self.r0 != self.n_agents:
            raise BadCompartmentSplit(self.s0, self.i0, self.r0, self.n_agents)
        if self.horizon < 1:
            raise InvalidParameter("horizon", self.horizon, "must be a positive integer")
        if not 0 <= self.seed < MAX_SEED:
            raise InvalidParameter("seed", self.seed, "must be a 64-bit unsigned integer")
        for name in ("location", "infected_location"):
            loc = getattr(self.init_mode, name)
            if loc is not None and not 0 <= loc < self.map.n_locations:
                raise InvalidParameter(
                    f"init_mode.{name}", loc, f"must be < {self.map.n_locations}"
                )

    @cached_property
    def stationary(self) -> StationaryDistribution:
        if self.pi is not None:
            return self.pi
        return stationary_distribution(self.map)

    def to_payload(self) -> dict:
        """JSON-safe form used by the Flash replicate worker."""
        csr = self.map.sparse
        return {
            "alpha_prime": self.alpha_prime,
            "beta_prime": self.beta_prime,
            "map": {
                "n": csr.shape[0],
                "indptr": csr.indptr.tolist(),
                "indices": csr.indices.tolist(),
                "data": csr.data.tolist(),
            },
            "n_agents": self.n_agents,
            "s0": self.s0,
            "i0": self.i0,
            "r0": self.r0,
            "horizon": self.horizon,
            "init_mode": {
                "kind": self.init_mode.kind.value,
                "location": self.init_mode.location,
                "infected_location": self.init_mode.infected_location,
            },
            "seed": self.seed,
            "pi": (
                self.stationary.probabilities.tolist()
                if self.init_mode.kind is InitKind.STATIONARY
                else None
            ),
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "AsirConfig":
        m = payload["map"]
        csr = scipy.sparse.csr_matrix(
            (m["data"], m["indices"], m["indptr"]), shape=(m["n"], m["n"])
        )
        mode = payload["init_mode"]
        pi = payload.get("pi")
        return cls(
            alpha_prime=payload["alpha_prime"],
            beta_prime=payload["beta_prime"],
            map=validate_matrix(csr),
            n_agents=payload["n_agents"],
            s0=payload["s0"],
            i0=payload["i0"],
            r0=payload["r0"],
            horizon=payload["horizon"],
            init_mode=InitMode(
                InitKind(mode["kind"]), mode["location"], mode["infected_location"]
            ),
            seed=payload["seed"],
            pi=None if pi is None else StationaryDistribution(np.array(pi, dtype=float)),
        )


@dataclass(frozen=True)
class AgentState:
    agent_id: int
    health: Health
    position: int


@dataclass(frozen=True, eq=False)
class Population:
    """Columnar agent state at one timestamp; index = agent id."""

    timestamp: int
    health: np.ndarray
    position: np.ndarray

    def agents(self) -> list[AgentState]:
        return [
            AgentState(k, Health(int(h)), int(p))
            for k, (h, p) in enumerate(zip(self.health, self.position))
        ]

    def counts(self) -> tuple[int, int, int]:
        c = np.bincount(self.health, minlength=3)
        return int(c[0]), int(c[1]), int(c[2])


@dataclass(frozen=True)
class StepRecord:
    timestamp: int
    counts: tuple[int, int, int]
    new_infections: int = 0
    new_recoveries: int = 0
    clamp_events: int = 0


def derive_stream(seed: int, replicate: int) -> np.random.Generator:
    """Independent stream for one replicate; does not depend on which other replicates run."""
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(replicate,)))
    )


def init_population(config: AsirConfig, rng: np.random.Generator) -> Population:
    """Health by id blocks (S, then I, then R); positions by the configured init mode."""
    health = np.repeat(
        np.array([Health.SUSCEPTIBLE, Health.INFECTED, Health.RECOVERED], dtype=np.int8),
        [config.s0, config.i0, config.r0],
    )

    mode = config.init_mode
    n = config.n_agents
    if mode.kind is InitKind.STATIONARY:
        position = invert_cumulative(config.stationary.cumulative, rng.random(n))
    elif mode.kind is InitKind.UNIFORM:
        n_loc = config.map.n_locations
        position = np.minimum((rng.random(n) * n_loc).astype(np.int64), n_loc - 1)
    else:
        position = np.full(n, mode.location, dtype=np.int64)
        if mode.infected_location is not None:
            position[health == Health.INFECTED] = mode.infected_location

    return Population(0, health, position.astype(np.int64))


def step(
    population: Population, config: AsirConfig, rng: np.random.Generator
) -> tuple[Population, StepRecord]:
    health = population.health

    position = config.map.sampler.sample(population.position, rng.random(config.n_agents))

    susceptible = np.flatnonzero(health == Health.SUSCEPTIBLE)
    infected = np.flatnonzero(health == Health.INFECTED)

    infected_here = np.bincount(position[infected], minlength=config.map.n_locations)
    pressure = config.alpha_prime * infected_here[position[susceptible]]
    clamps = int(np.count_nonzero(pressure > 1.0))

    infections = susceptible[rng.random(susceptible.size) < np.minimum(pressure, 1.0)]
    recoveries = infected[rng.random(infected.size) < config.beta_prime]

    nxt = health.copy()
    nxt[infections] = Health.INFECTED
    nxt[recoveries] = Health.RECOVERED

    population = Population(population.timestamp + 1, nxt, position)
    record = StepRecord(
        timestamp=population.timestamp,
        counts=population.counts(),
        new_infections=int(infections.size),
        new_recoveries=int(recoveries.size),
        clamp_events=clamps,
    )
    return population, record


@dataclass(frozen=True, eq=False)
class ReplicateTrajectory:
    """Counts and event totals per timestamp for one replicate; index 0 is the initial state."""

    replicate: int
    counts: np.ndarray
    new_infections: np.ndarray
    new_recoveries: np.ndarray
    clamp_events: np.ndarray
    health_history: np.ndarray | None = None
    position_history: np.ndarray | None = None

    def records(self) -> list[StepRecord]:
        return [
            StepRecord(
                timestamp=t,
                counts=tuple(int(x) for x in self.counts[t]),
                new_infections=int(self.new_infections[t]),
                new_recoveries=int(self.new_recoveries[t]),
                clamp_events=int(self.clamp_events[t]),
            )
            for t in range(len(self.counts))
        ]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "replicate": self.replicate,
                "t": np.arange(len(self.counts)),
                "S": self.counts[:, 0],
                "I": self.counts[:, 1],
                "R": self.counts[:, 2],
                "new_inf": self.new_infections,
                "new_rec": self.new_recoveries,
                "clamps": self.clamp_events,
            }
        )

    def trace_frame(self) -> pd.DataFrame:
        """Per-agent rows (replicate, t, agent_id, health, position), health as S/I/R."""
        if self.health_history is None:
            raise SimulationError("replicate was simulated without trace=True")
        steps, n_agents = self.health_history.shape
        letters = np.array([h.letter for h in Health])
        return pd.DataFrame(
            {
                "replicate": self.replicate,
                "t": np.repeat(np.arange(steps), n_agents),
                "agent_id": np.tile(np.arange(n_agents), steps),
                "health": letters[self.health_history.ravel()],
                "position": self.position_history.ravel(),
            }
        )


def simulate_replicate(
    config: AsirConfig, replicate: int = 0, trace: bool = False
) -> ReplicateTrajectory:
    rng = derive_stream(config.seed, replicate)
    population = init_population(config, rng)

    steps = config.horizon + 1
    counts = np.zeros((steps, 3), dtype=np.int64)
    events = np.zeros((3, steps), dtype=np.int64)
    counts[0] = population.counts()

    health_history = position_history = None
    if trace:
        health_history = np.empty((steps, config.n_agents), dtype=np.int8)
        position_history = np.empty((steps, config.n_agents), dtype=np.int64)
        health_history[0] = population.health
        position_history[0] = population.position

    for t in range(1, steps):
        population, record = step(population, config, rng)
        counts[t] = record.counts
        events[:, t] = (record.new_infections, record.new_recoveries, record.clamp_events)
        if trace:
            health_history[t] = population.health
            position_history[t] = population.position

    return ReplicateTrajectory(
        replicate=replicate,
        counts=counts,
        new_infections=events[0],
        new_recoveries=events[1],
        clamp_events=events[2],
        health_history=health_history,
        position_history=position_history,
    )


def run_replicate(config: AsirConfig, replicate: int = 0) -> list[StepRecord]:
    """horizon + 1 records; identical for identical (config, seed, replicate)."""
    return simulate_replicate(config, replicate).records()


def check_transitions(health_history: np.ndarray) -> None:
    """Raise SimulationError unless every per-agent change is S->I or I->R."""
    before, after = health_history[:-1], health_history[1:]
    changed = before != after
    legal = (after - before == 1) & (before != Health.RECOVERED)
    bad = np.argwhere(changed & ~legal)
    if bad.size:
        t, agent = (int(x) for x in bad[0])
        raise SimulationError(
            f"illegal transition for agent {agent} at t = {t + 1}: "
            f"{Health(int(before[t, agent])).letter} -> {Health(int(after[t, agent])).letter}"
        )
