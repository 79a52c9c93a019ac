"""Exception hierarchy shared by every engine and the CLI.

ConfigurationError subclasses map to CLI exit code 2, SimulationError
subclasses to exit code 3.
"""

from __future__ import annotations


class AsirError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(AsirError, ValueError):
    """Invalid input: matrix, parameters or config document."""

    key_path: str | None = None

    def with_key_path(self, key_path: str) -> "ConfigurationError":
        """Prefix the message with the config key path; keeps the concrete type."""
        if self.key_path is None:
            self.key_path = key_path
            self.args = (f"{key_path}: {self.args[0] if self.args else ''}",)
        return self


class SimulationError(AsirError, RuntimeError):
    """Failure while running a numerical procedure or a replicate."""


class NonSquare(ConfigurationError):
    def __init__(self, shape: tuple[int, ...]):
        self.shape = shape
        super().__init__(f"transition matrix must be square, got shape {shape}")


class NonFinite(ConfigurationError):
    def __init__(self, row: int, col: int):
        self.row, self.col = row, col
        super().__init__(f"non-finite entry at ({row}, {col})")


class NegativeEntry(ConfigurationError):
    def __init__(self, row: int, col: int, value: float | None = None):
        self.row, self.col, self.value = row, col, value
        detail = f" ({value!r})" if value is not None else ""
        super().__init__(f"negative entry at ({row}, {col}){detail}")


class RowSumViolation(ConfigurationError):
    def __init__(self, row: int, total: float):
        self.row, self.total = row, total
        super().__init__(f"row {row} sums to {total!r}, expected 1")


class ZeroSide(ConfigurationError):
    def __init__(self, side: int):
        self.side = side
        super().__init__(f"grid side must be >= 1, got {side}")


class NotErgodic(ConfigurationError):
    def __init__(self, communicating_class_count: int, period: int):
        self.communicating_class_count = communicating_class_count
        self.period = period
        super().__init__(
            "transition matrix is not ergodic "
            f"(communicating classes = {communicating_class_count}, period = {period})"
        )


class BadCompartmentSplit(ConfigurationError):
    def __init__(self, s0: int, i0: int, r0: int, n_agents: int):
        self.s0, self.i0, self.r0, self.n_agents = s0, i0, r0, n_agents
        super().__init__(
            f"s0 + i0 + r0 = {s0 + i0 + r0} does not equal n_agents = {n_agents}"
        )


class NonIntegerCompartments(ConfigurationError):
    def __init__(self, name: str, value: float):
        self.name, self.value = name, value
        super().__init__(f"{name} = {value!r} is not within 1e-9 of an integer")


class AlphaPrimeOutOfRange(ConfigurationError):
    def __init__(self, alpha_prime: float, minimum_n: float):
        self.alpha_prime, self.minimum_n = alpha_prime, minimum_n
        super().__init__(
            f"deduced alpha' = {alpha_prime:.6g} exceeds 1; the population must be "
            f"at least N = {minimum_n:.6g} on this map (or the map must have a lower "
            "meetup probability)"
        )


class InvalidParameter(ConfigurationError):
    def __init__(self, name: str, value: object, reason: str):
        self.name, self.value = name, value
        super().__init__(f"{name} = {value!r}: {reason}")


class ParseError(ConfigurationError):
    def __init__(self, location: str, reason: str):
        self.location = location
        super().__init__(f"cannot parse config at {location}: {reason}")


class MissingBlock(ConfigurationError):
    def __init__(self, mode: str, block: str):
        self.mode, self.block = mode, block
        super().__init__(f"mode '{mode}' requires a [{block}] block")


class HorizonMismatch(ConfigurationError):
    def __init__(self, ensemble_horizon: int, reference_horizon: int):
        super().__init__(
            f"ensemble horizon {ensemble_horizon} != reference horizon {reference_horizon}"
        )


class PopulationMismatch(ConfigurationError):
    def __init__(self, n_agents: int, n_total: float):
        super().__init__(f"ensemble population {n_agents} != reference N {n_total!r}")


class NoConvergence(SimulationError):
    def __init__(self, iterations: int, difference: float):
        self.iterations, self.difference = iterations, difference
        super().__init__(
            f"power iteration did not converge after {iterations} iterations "
            f"(last difference {difference:.3e})"
        )


class NegativeCompartment(SimulationError):
    def __init__(self, state: tuple[float, float, float], timestamp: int | None = None):
        self.state, self.timestamp = state, timestamp
        where = f" at t = {timestamp}" if timestamp is not None else ""
        super().__init__(
            f"unit-step Euler left the simplex{where}: (S, I, R) = {state}; "
            "alpha or beta too large for a unit step"
        )


class ReplicateFailed(SimulationError):
    def __init__(self, replicate: int, reason: str):
        self.replicate, self.reason = replicate, reason
        super().__init__(f"replicate {replicate} failed: {reason}")

    def __reduce__(self):
        # crosses process-pool boundaries
        return (type(self), (self.replicate, self.reason))
