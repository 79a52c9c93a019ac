"""Experiment configuration: one TOML document per run.

Blocks: [sir], [map] (inline `matrix` or [map.grid]), [asir], [ensemble],
[failure], [output]. Domain errors raised while building a block carry the
TOML key path in their message.
"""

from __future__ import annotations

import logging
import math
import tomllib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from asir.bridge import deduce_asir
from asir.engine import AsirConfig, InitKind, InitMode
from asir.errors import ConfigurationError, InvalidParameter, MissingBlock, ParseError
from asir.markov import TransitionMatrix, grid_walk_map, validate_matrix
from asir.sir import SirParams

logger = logging.getLogger(__name__)

MODES = ("sir", "stationary", "deduce", "asir", "verify", "failure-mode")
BACKENDS = ("local", "flash")

REQUIRED_BLOCKS = {
    "sir": ("sir",),
    "stationary": ("map",),
    "deduce": ("sir", "map"),
    "asir": ("map",),
    "verify": ("sir", "map", "ensemble"),
    "failure-mode": ("sir", "map"),
}

# [asir] keys that a [sir] block determines
SIR_OWNED_KEYS = ("n_agents", "s0", "i0", "r0", "horizon")


@dataclass(frozen=True)
class SirBlock:
    params: SirParams
    substeps: int = 100


@dataclass(frozen=True)
class MapBlock:
    matrix: TransitionMatrix
    side: int | None = None
    stay_prob: float | None = None

    @property
    def is_grid(self) -> bool:
        return self.side is not None


@dataclass(frozen=True)
class AsirBlock:
    """Agent-model settings; alpha_prime / beta_prime override the deduced values."""

    alpha_prime: float | None = None
    beta_prime: float | None = None
    n_agents: int | None = None
    s0: int | None = None
    i0: int | None = None
    r0: int | None = None
    horizon: int | None = None
    init_mode: InitMode = field(default_factory=InitMode)
    seed: int = 0
    replicates: int = 1


@dataclass(frozen=True)
class EnsembleBlock:
    replicates: int = 200
    z_threshold: float = 3.0
    coverage_threshold: float = 0.95
    workers: int | None = None
    backend: str = "local"
    batch_size: int = 50
    concurrency: int = 10


@dataclass(frozen=True)
class FailureBlock:
    side: int = 100
    stay_prob: float = 0.2
    n_agents: int = 100
    diagnostics: bool = True


@dataclass(frozen=True)
class OutputBlock:
    directory: Path = Path("out")
    trace: bool = False
    write_config: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str
    sir: SirBlock | None = None
    map: MapBlock | None = None
    asir: AsirBlock = field(default_factory=AsirBlock)
    ensemble: EnsembleBlock = field(default_factory=EnsembleBlock)
    failure: FailureBlock = field(default_factory=FailureBlock)
    output: OutputBlock = field(default_factory=OutputBlock)

    def asir_config(self) -> AsirConfig:
        """ASIR configuration for the run: deduced from [sir] unless overridden in [asir]."""
        block = self.asir
        if self.sir is not None:
            config = deduce_asir(
                self.sir.params, self.map.matrix, seed=block.seed, init_mode=block.init_mode
            ).asir_config
            overrides = {
                name: getattr(block, name)
                for name in ("alpha_prime", "beta_prime")
                if getattr(block, name) is not None
            }
            if overrides:
                logger.info(f"overriding deduced parameters: {overrides}")
                config = _with_path("asir", lambda: replace(config, **overrides))
            return config

        missing = [
            name
            for name in ("alpha_prime", "beta_prime", "s0", "i0", "r0", "horizon")
            if getattr(block, name) is None
        ]
        if missing:
            raise InvalidParameter(
                f"asir.{missing[0]}", None, "required when there is no [sir] block"
            )
        n_agents = block.s0 + block.i0 + block.r0
        return _with_path(
            "asir",
            lambda: AsirConfig(
                alpha_prime=block.alpha_prime,
                beta_prime=block.beta_prime,
                map=self.map.matrix,
                n_agents=block.n_agents if block.n_agents is not None else n_agents,
                s0=block.s0,
                i0=block.i0,
                r0=block.r0,
                horizon=block.horizon,
                init_mode=block.init_mode,
                seed=block.seed,
            ),
        )


class _Block:
    """Typed reads from one TOML table, reporting errors by key path."""

    def __init__(self, path: str, table: Any):
        if not isinstance(table, dict):
            raise ParseError(path, "expected a table")
        self.path = path
        self.table = table
        self.seen: set[str] = set()

    def key(self, name: str) -> str:
        return f"{self.path}.{name}" if self.path else name

    def get(self, name: str, kind: type | tuple[type, ...], default: Any = None,
            required: bool = False) -> Any:
        self.seen.add(name)
        if name not in self.table:
            if required:
                raise ParseError(self.key(name), "missing required key")
            return default
        value = self.table[name]
        # bool is an int subclass; never accept it for numbers
        if isinstance(value, bool) and bool not in _as_tuple(kind):
            raise ParseError(self.key(name), f"expected {_kind_name(kind)}, got a boolean")
        if float in _as_tuple(kind) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if not isinstance(value, kind):
            raise ParseError(
                self.key(name), f"expected {_kind_name(kind)}, got {type(value).__name__}"
            )
        return value

    def sub(self, name: str) -> "_Block | None":
        self.seen.add(name)
        if name not in self.table:
            return None
        return _Block(self.key(name), self.table[name])

    def finish(self) -> None:
        unknown = sorted(set(self.table) - self.seen)
        if unknown:
            raise ParseError(self.key(unknown[0]), "unknown key")


def _as_tuple(kind) -> tuple:
    return kind if isinstance(kind, tuple) else (kind,)


def _kind_name(kind) -> str:
    return " or ".join(k.__name__ for k in _as_tuple(kind))


def _with_path(key_path: str, build):
    try:
        return build()
    except ConfigurationError as e:
        raise e.with_key_path(key_path)


def _parse_sir(block: _Block) -> SirBlock:
    values = {
        "alpha": block.get("alpha", float, required=True),
        "beta": block.get("beta", float, required=True),
        "n_total": block.get("n", float, required=True),
        "s0": block.get("s0", float, required=True),
        "i0": block.get("i0", float, required=True),
        "r0": block.get("r0", float, 0.0),
        "horizon": block.get("horizon", int, required=True),
    }
    substeps = block.get("substeps", int, 100)
    block.finish()
    if substeps < 1:
        raise InvalidParameter("sir.substeps", substeps, "must be a positive integer")
    params = _with_path(block.path, lambda: SirParams(**values))
    return SirBlock(params=params, substeps=substeps)


def _parse_map(block: _Block) -> MapBlock:
    raw = block.get("matrix", list)
    grid = block.sub("grid")
    block.finish()
    if (raw is None) == (grid is None):
        raise ParseError(block.path, "give exactly one of `matrix` or [map.grid]")

    if raw is not None:
        matrix = _with_path(block.key("matrix"), lambda: validate_matrix(raw))
        return MapBlock(matrix=matrix)

    side = grid.get("side", int, required=True)
    stay_prob = grid.get("stay_prob", float, 0.2)
    grid.finish()
    matrix = _with_path(grid.path, lambda: grid_walk_map(side, stay_prob))
    return MapBlock(matrix=matrix, side=side, stay_prob=stay_prob)


def _parse_init_mode(block: _Block) -> InitMode:
    kind = block.get("init_mode", str, "stationary")
    try:
        kind = InitKind(kind)
    except ValueError:
        choices = ", ".join(k.value for k in InitKind)
        raise ParseError(block.key("init_mode"), f"expected one of {choices}") from None
    location = block.get("location", int, 0)
    infected_location = block.get("infected_location", int)
    for name, value in (("location", location), ("infected_location", infected_location)):
        if value is not None and value < 0:
            raise InvalidParameter(block.key(name), value, "must be >= 0")
    return InitMode(kind, location, infected_location)


def _parse_asir(block: _Block) -> AsirBlock:
    values = {
        "alpha_prime": block.get("alpha_prime", float),
        "beta_prime": block.get("beta_prime", float),
        "n_agents": block.get("n_agents", int),
        "s0": block.get("s0", int),
        "i0": block.get("i0", int),
        "r0": block.get("r0", int),
        "horizon": block.get("horizon", int),
        "init_mode": _parse_init_mode(block),
        "seed": block.get("seed", int, 0),
        "replicates": block.get("replicates", int, 1),
    }
    block.finish()
    if values["r0"] is None and values["s0"] is not None and values["i0"] is not None:
        values["r0"] = 0
    for name in ("alpha_prime", "beta_prime"):
        value = values[name]
        if value is not None and not 0.0 <= value <= 1.0:
            raise InvalidParameter(block.key(name), value, "must be a probability in [0, 1]")
    if values["seed"] < 0:
        raise InvalidParameter(block.key("seed"), values["seed"], "must be >= 0")
    if values["replicates"] < 1:
        raise InvalidParameter(block.key("replicates"), values["replicates"], "must be >= 1")
    return AsirBlock(**values)


def _parse_ensemble(block: _Block) -> EnsembleBlock:
    ensemble = EnsembleBlock(
        replicates=block.get("replicates", int, 200),
        z_threshold=block.get("z_threshold", float, 3.0),
        coverage_threshold=block.get("coverage_threshold", float, 0.95),
        workers=block.get("workers", int),
        backend=block.get("backend", str, "local"),
        batch_size=block.get("batch_size", int, 50),
        concurrency=block.get("concurrency", int, 10),
    )
    block.finish()
    if ensemble.replicates < 2:
        raise InvalidParameter(block.key("replicates"), ensemble.replicates, "must be >= 2")
    if not ensemble.z_threshold > 0 or not math.isfinite(ensemble.z_threshold):
        raise InvalidParameter(block.key("z_threshold"), ensemble.z_threshold, "must be > 0")
    if not 0.0 < ensemble.coverage_threshold <= 1.0:
        raise InvalidParameter(
            block.key("coverage_threshold"), ensemble.coverage_threshold, "must be in (0, 1]"
        )
    if ensemble.workers is not None and ensemble.workers < 1:
        raise InvalidParameter(block.key("workers"), ensemble.workers, "must be >= 1")
    if ensemble.backend not in BACKENDS:
        raise ParseError(block.key("backend"), f"expected one of {', '.join(BACKENDS)}")
    for name in ("batch_size", "concurrency"):
        if getattr(ensemble, name) < 1:
            raise InvalidParameter(block.key(name), getattr(ensemble, name), "must be >= 1")
    return ensemble


def _parse_failure(block: _Block) -> FailureBlock:
    failure = FailureBlock(
        side=block.get("side", int, 100),
        stay_prob=block.get("stay_prob", float, 0.2),
        n_agents=block.get("n_agents", int, 100),
        diagnostics=block.get("diagnostics", bool, True),
    )
    block.finish()
    if failure.n_agents < 1:
        raise InvalidParameter(block.key("n_agents"), failure.n_agents, "must be positive")
    return failure


def _parse_output(block: _Block) -> OutputBlock:
    output = OutputBlock(
        directory=Path(block.get("directory", str, "out")),
        trace=block.get("trace", bool, False),
        write_config=block.get("write_config", bool, False),
    )
    block.finish()
    return output


def parse_config(text: str, mode: str | None = None, source: str = "<config>") -> ExperimentConfig:
    """Parse and validate a TOML experiment document.

    `mode` (the CLI subcommand) wins over a top-level `mode` key. Raises
    ParseError for malformed documents, MissingBlock when the mode's required
    blocks are absent, and domain errors prefixed with their key path.
    """
    try:
        document = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ParseError(source, str(e)) from e

    root = _Block("", document)
    declared = root.get("mode", str)
    mode = mode or declared
    if mode is None:
        raise ParseError("mode", "no mode given on the command line or in the document")
    if mode not in MODES:
        raise ParseError("mode", f"expected one of {', '.join(MODES)}, got {mode!r}")

    blocks = {name: root.sub(name) for name in ("sir", "map", "asir", "ensemble", "failure", "output")}
    root.finish()

    for required in REQUIRED_BLOCKS[mode]:
        if blocks[required] is None:
            raise MissingBlock(mode, required)
    if mode == "asir" and blocks["sir"] is None and blocks["asir"] is None:
        raise MissingBlock(mode, "asir")

    parsers = {
        "sir": _parse_sir,
        "map": _parse_map,
        "asir": _parse_asir,
        "ensemble": _parse_ensemble,
        "failure": _parse_failure,
        "output": _parse_output,
    }
    parsed = {name: parsers[name](block) for name, block in blocks.items() if block is not None}

    config = ExperimentConfig(mode=mode, **parsed)
    if config.sir is not None:
        _check_population_source(config.asir)
    if mode == "failure-mode" and config.sir is not None:
        _with_path("failure", lambda: _check_failure(config))
    logger.debug(f"parsed {source} for mode {mode}")
    return config


def _check_population_source(block: AsirBlock) -> None:
    """With a [sir] block, population and horizon come from [sir] only."""
    for name in SIR_OWNED_KEYS:
        if getattr(block, name) is not None:
            raise ParseError(f"asir.{name}", "set by [sir]; remove it here or drop the [sir] block")


def _check_failure(config: ExperimentConfig) -> None:
    i0 = config.sir.params.i0
    if config.failure.n_agents < i0:
        raise InvalidParameter("n_agents", config.failure.n_agents, f"must be at least i0 = {i0:g}")


def load_config(path: str | Path, mode: str | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ParseError(str(path), e.strerror or str(e)) from e
    return parse_config(text, mode=mode, source=str(path))
