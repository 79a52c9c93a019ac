"""Compartmental SIR reference curves.

The unit-step Euler recurrence is the reference the agent ensembles are
verified against; classical RK4 with substeps gives the continuous curve for
the discretization-gap diagnostic.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from asir.errors import InvalidParameter, NegativeCompartment

logger = logging.getLogger(__name__)

CONSERVATION_TOLERANCE = 1e-9
NEGATIVE_TOLERANCE = 1e-12

State = tuple[float, float, float]


@dataclass(frozen=True)
class SirParams:
    alpha: float
    beta: float
    n_total: float
    s0: float
    i0: float
    r0: float
    horizon: int

    def __post_init__(self) -> None:
        if not math.isfinite(self.alpha) or self.alpha < 0:
            raise InvalidParameter("alpha", self.alpha, "must be finite and >= 0")
        if not 0.0 <= self.beta <= 1.0:
            raise InvalidParameter("beta", self.beta, "must be in [0, 1]")
        if not self.n_total > 0:
            raise InvalidParameter("n", self.n_total, "must be positive")
        for name in ("s0", "i0", "r0"):
            if getattr(self, name) < 0:
                raise InvalidParameter(name, getattr(self, name), "must be >= 0")
        total = self.s0 + self.i0 + self.r0
        if abs(total - self.n_total) > CONSERVATION_TOLERANCE:
            raise InvalidParameter(
                "s0 + i0 + r0", total, f"must equal n = {self.n_total}"
            )
        if int(self.horizon) != self.horizon or self.horizon < 1:
            raise InvalidParameter("horizon", self.horizon, "must be a positive integer")

    @property
    def initial_state(self) -> State:
        return (self.s0, self.i0, self.r0)

    @property
    def basic_reproduction_number(self) -> float:
        return self.alpha / self.beta if self.beta > 0 else math.inf


@dataclass(frozen=True, eq=False)
class SirCurve:
    """(S, I, R) sampled at integer timestamps 0..horizon."""

    s: np.ndarray
    i: np.ndarray
    r: np.ndarray
    n_total: float

    @property
    def horizon(self) -> int:
        return len(self.s) - 1

    @property
    def timestamps(self) -> np.ndarray:
        return np.arange(len(self.s))

    def compartment(self, name: str) -> np.ndarray:
        return {"S": self.s, "I": self.i, "R": self.r}[name]

    def peak(self) -> tuple[int, float]:
        """Timestamp and value of the infected maximum."""
        t = int(np.argmax(self.i))
        return t, float(self.i[t])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"t": self.timestamps, "S": self.s, "I": self.i, "R": self.r})

    def write_csv(self, path: Path) -> Path:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")
        logger.info(f"wrote {path}")
        return path


def euler_unit_step(state: State, params: SirParams) -> State:
    """One unit interval with S*I and I held at their start-of-interval values."""
    s, i, r = state
    infections = params.alpha / params.n_total * s * i
    recoveries = params.beta * i
    nxt = (s - infections, i + infections - recoveries, r + recoveries)
    if min(nxt) < -NEGATIVE_TOLERANCE:
        raise NegativeCompartment(nxt)
    return nxt


def simulate_sir_euler(params: SirParams) -> SirCurve:
    curve = np.empty((params.horizon + 1, 3))
    state = params.initial_state
    curve[0] = state
    for t in range(params.horizon):
        try:
            state = euler_unit_step(state, params)
        except NegativeCompartment as e:
            raise NegativeCompartment(e.state, timestamp=t + 1) from e
        curve[t + 1] = state
    return SirCurve(curve[:, 0], curve[:, 1], curve[:, 2], params.n_total)


def _derivative(y: np.ndarray, alpha: float, beta: float, n_total: float) -> np.ndarray:
    s, i, _ = y
    infection = alpha * s * i / n_total
    recovery = beta * i
    return np.array([-infection, infection - recovery, recovery])


def simulate_sir_rk4(params: SirParams, substeps: int = 100) -> SirCurve:
    """Classical RK4 with step 1/substeps, sampled at integer timestamps."""
    if int(substeps) != substeps or substeps < 1:
        raise InvalidParameter("substeps", substeps, "must be a positive integer")

    h = 1.0 / substeps
    args = (params.alpha, params.beta, params.n_total)
    y = np.array(params.initial_state, dtype=float)
    curve = np.empty((params.horizon + 1, 3))
    curve[0] = y
    for t in range(params.horizon):
        for _ in range(substeps):
            k1 = _derivative(y, *args)
            k2 = _derivative(y + 0.5 * h * k1, *args)
            k3 = _derivative(y + 0.5 * h * k2, *args)
            k4 = _derivative(y + h * k3, *args)
            y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        curve[t + 1] = y
    return SirCurve(curve[:, 0], curve[:, 1], curve[:, 2], params.n_total)


def discretization_gap(euler: SirCurve, rk4: SirCurve) -> dict[str, float]:
    """Max absolute difference per compartment between two curves of equal horizon."""
    return {
        name: float(np.max(np.abs(euler.compartment(name) - rk4.compartment(name))))
        for name in ("S", "I", "R")
    }
