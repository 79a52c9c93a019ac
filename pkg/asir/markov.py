"""Location map as a finite Markov chain.

Validation, ergodicity diagnostics, stationary distribution, meetup
probability, mixing diagnostics and the sampling primitives the agent engine
draws positions with.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property, reduce
from typing import Sequence

import numpy as np
import scipy.sparse
import scipy.sparse.csgraph as csgraph

from asir.errors import (
    InvalidParameter,
    NegativeEntry,
    NoConvergence,
    NonFinite,
    NonSquare,
    NotErgodic,
    RowSumViolation,
    ZeroSide,
)

logger = logging.getLogger(__name__)

ROW_SUM_TOLERANCE = 1e-12
STATIONARY_TOLERANCE = 1e-14
STATIONARY_MAX_ITERATIONS = 1_000_000


@dataclass(frozen=True, eq=False)
class TransitionMatrix:
    """Row-stochastic movement kernel; row = current location, column = next.

    Stored as CSR: a 100 x 100 grid has 10^4 locations and a dense kernel
    would not fit comfortably in memory.
    """

    sparse: scipy.sparse.csr_matrix

    @property
    def n_locations(self) -> int:
        return self.sparse.shape[0]

    @cached_property
    def probabilities(self) -> np.ndarray:
        dense = self.sparse.toarray()
        dense.setflags(write=False)
        return dense

    @cached_property
    def sampler(self) -> "_RowSampler":
        return _RowSampler.from_csr(self.sparse)

    def to_rows(self) -> list[list[float]]:
        return self.probabilities.tolist()


@dataclass(frozen=True, eq=False)
class StationaryDistribution:
    probabilities: np.ndarray
    iterations: int = 0
    residual: float = 0.0

    def __post_init__(self) -> None:
        self.probabilities.setflags(write=False)

    @property
    def n_locations(self) -> int:
        return self.probabilities.shape[0]

    @cached_property
    def cumulative(self) -> np.ndarray:
        return _support_cumulative(self.probabilities)


@dataclass(frozen=True)
class ErgodicityReport:
    irreducible: bool
    aperiodic: bool
    communicating_class_count: int
    period: int

    @property
    def ergodic(self) -> bool:
        return self.irreducible and self.aperiodic


def validate_matrix(
    raw: Sequence[Sequence[float]] | np.ndarray | scipy.sparse.spmatrix,
) -> TransitionMatrix:
    """Validate a row-major matrix (nested lists, array or scipy sparse) as a TransitionMatrix.

    Raises NonSquare, NonFinite, NegativeEntry or RowSumViolation.
    """
    if scipy.sparse.issparse(raw):
        matrix = scipy.sparse.csr_matrix(raw, dtype=float)
    else:
        try:
            dense = np.array(raw, dtype=float)
        except ValueError as e:
            # ragged rows
            raise NonSquare((len(raw),)) from e
        if dense.ndim != 2:
            raise NonSquare(dense.shape)
        matrix = scipy.sparse.csr_matrix(dense)

    if matrix.shape[0] != matrix.shape[1] or matrix.shape[0] == 0:
        raise NonSquare(matrix.shape)

    matrix.sum_duplicates()
    matrix.eliminate_zeros()
    matrix.sort_indices()
    entries = matrix.tocoo()

    bad = np.flatnonzero(~np.isfinite(entries.data))
    if bad.size:
        k = _first_row_major(entries, bad)
        raise NonFinite(int(entries.row[k]), int(entries.col[k]))

    negative = np.flatnonzero(entries.data < 0)
    if negative.size:
        k = _first_row_major(entries, negative)
        raise NegativeEntry(
            int(entries.row[k]), int(entries.col[k]), float(entries.data[k])
        )

    # entries above 1 are impossible once rows are nonnegative and sum to 1
    row_sums = np.asarray(matrix.sum(axis=1)).ravel()
    off = np.flatnonzero(np.abs(row_sums - 1.0) > ROW_SUM_TOLERANCE)
    if off.size:
        raise RowSumViolation(int(off[0]), float(row_sums[off[0]]))

    return TransitionMatrix(matrix)


def _first_row_major(entries: scipy.sparse.coo_matrix, candidates: np.ndarray) -> int:
    order = np.lexsort((entries.col[candidates], entries.row[candidates]))
    return int(candidates[order[0]])


def ergodicity(T: TransitionMatrix) -> ErgodicityReport:
    """Count communicating classes and compute the chain period.

    The period is the gcd of cycle lengths inside each communicating class,
    combined across classes; one BFS level assignment per class gives every
    cycle length as a combination of level[u] + 1 - level[v] over its edges.
    """
    graph = T.sparse
    n = T.n_locations
    n_classes, labels = csgraph.connected_components(
        graph, directed=True, connection="strong"
    )
    irreducible = n_classes == 1

    if irreducible and np.any(T.sparse.diagonal() > 0):
        return ErgodicityReport(True, True, 1, 1)

    period = _period(graph, labels, n_classes, n)
    return ErgodicityReport(
        irreducible=irreducible,
        aperiodic=period == 1,
        communicating_class_count=int(n_classes),
        period=period,
    )


def _period(
    graph: scipy.sparse.csr_matrix, labels: np.ndarray, n_classes: int, n: int
) -> int:
    coo = graph.tocoo()
    inside = labels[coo.row] == labels[coo.col]
    src, dst = coo.row[inside], coo.col[inside]
    if src.size == 0:
        # no class carries a cycle (cannot happen for a stochastic matrix)
        return 1

    # one BFS root per class, reached through a virtual source node n
    roots = np.unique(labels, return_index=True)[1]
    rows = np.concatenate([src, np.full(roots.size, n)])
    cols = np.concatenate([dst, roots])
    augmented = scipy.sparse.csr_matrix(
        (np.ones(rows.size), (rows, cols)), shape=(n + 1, n + 1)
    )
    levels = csgraph.shortest_path(augmented, unweighted=True, indices=n)
    levels = levels.astype(np.int64)

    differences = np.abs(levels[src] + 1 - levels[dst])
    return int(reduce(math.gcd, differences.tolist(), 0)) or 1


def stationary_distribution(
    T: TransitionMatrix,
    tolerance: float = STATIONARY_TOLERANCE,
    max_iterations: int = STATIONARY_MAX_ITERATIONS,
) -> StationaryDistribution:
    """Power iteration from the uniform vector until the iterate difference drops below tolerance."""
    report = ergodicity(T)
    if not report.ergodic:
        raise NotErgodic(report.communicating_class_count, report.period)

    transposed = T.sparse.T.tocsr()
    pi = np.full(T.n_locations, 1.0 / T.n_locations)
    difference = math.inf
    for iteration in range(1, max_iterations + 1):
        nxt = transposed @ pi
        nxt /= nxt.sum()
        difference = float(np.max(np.abs(nxt - pi)))
        pi = nxt
        if difference < tolerance:
            break
        if iteration % 10_000 == 0:
            logger.debug(f"power iteration {iteration}: difference {difference:.3e}")
    else:
        raise NoConvergence(max_iterations, difference)

    residual = float(np.max(np.abs(transposed @ pi - pi)))
    logger.info(
        f"stationary distribution over {T.n_locations} locations: "
        f"{iteration} iterations, residual {residual:.3e}"
    )
    return StationaryDistribution(pi, iterations=iteration, residual=residual)


def meetup_probability(pi: StationaryDistribution) -> float:
    """Probability that two independent walkers at stationarity share a location: sum of pi_p^2."""
    p = pi.probabilities
    return float(np.dot(p, p))


def sample_next(T: TransitionMatrix, current: int, rng: np.random.Generator) -> int:
    """Draw the next location from row `current`; consumes one uniform draw."""
    return int(T.sampler.sample(np.array([current]), rng.random(1))[0])


def sample_stationary(pi: StationaryDistribution, rng: np.random.Generator) -> int:
    """Draw a location from pi; consumes one uniform draw."""
    return int(invert_cumulative(pi.cumulative, rng.random(1))[0])


def invert_cumulative(cumulative: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Cumulative-sum inversion in ascending index order.

    Returns j with cumulative[j-1] <= u < cumulative[j]; zero-probability
    columns are never selected.
    """
    return np.searchsorted(cumulative, u, side="right")


def _support_cumulative(probabilities: np.ndarray) -> np.ndarray:
    cumulative = np.cumsum(probabilities)
    # pin the last supported column to 1 so u close to 1 never falls off the end
    last = int(np.flatnonzero(probabilities)[-1])
    cumulative[last:] = 1.0
    return cumulative


@dataclass(frozen=True)
class _RowSampler:
    """Cumulative rows in CSR layout for vectorised per-agent inversion."""

    indptr: np.ndarray
    indices: np.ndarray
    cumulative: np.ndarray
    max_degree: int = field(default=1)

    @classmethod
    def from_csr(cls, matrix: scipy.sparse.csr_matrix) -> "_RowSampler":
        matrix = matrix.copy()
        matrix.eliminate_zeros()
        matrix.sort_indices()
        cumulative = np.empty_like(matrix.data)
        for row in range(matrix.shape[0]):
            start, stop = matrix.indptr[row], matrix.indptr[row + 1]
            cumulative[start:stop] = np.cumsum(matrix.data[start:stop])
            cumulative[stop - 1] = 1.0
        degrees = np.diff(matrix.indptr)
        return cls(
            indptr=matrix.indptr.astype(np.int64),
            indices=matrix.indices.astype(np.int64),
            cumulative=cumulative,
            max_degree=int(degrees.max()),
        )

    def sample(self, current: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Per-element inversion of row current[k] with draw u[k], by vectorised binary search."""
        lo = self.indptr[current]
        hi = self.indptr[current + 1] - 1
        # first position in [lo, hi] whose cumulative value exceeds u
        for _ in range(max(1, math.ceil(math.log2(self.max_degree + 1)))):
            active = lo < hi
            if not active.any():
                break
            mid = (lo + hi) // 2
            right = self.cumulative[mid] <= u
            lo = np.where(active & right, mid + 1, lo)
            hi = np.where(active & ~right, mid, hi)
        return self.indices[lo]


def grid_walk_map(side: int, stay_prob: float) -> TransitionMatrix:
    """Lazy 4-neighbour walk on a side x side grid, cells indexed row-major.

    Each cell keeps stay_prob and splits the rest equally over the neighbours
    that exist; a 1x1 grid keeps all its mass.
    """
    if side < 1:
        raise ZeroSide(side)
    if not 0.0 <= stay_prob < 1.0:
        raise InvalidParameter("stay_prob", stay_prob, "must be in [0, 1)")

    n = side * side
    cells = np.arange(n)
    r, c = np.divmod(cells, side)

    rows, cols = [], []
    for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        rr, cc = r + dr, c + dc
        ok = (rr >= 0) & (rr < side) & (cc >= 0) & (cc < side)
        rows.append(cells[ok])
        cols.append((rr * side + cc)[ok])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)

    degree = np.bincount(rows, minlength=n)
    moves = (1.0 - stay_prob) / degree[rows]
    stays = np.where(degree == 0, 1.0, stay_prob)
    data = np.concatenate([moves, stays])
    src = np.concatenate([rows, cells])
    dst = np.concatenate([cols, cells])
    matrix = scipy.sparse.coo_matrix((data, (src, dst)), shape=(n, n))

    T = validate_matrix(matrix)
    logger.debug(f"grid walk map: side {side}, stay_prob {stay_prob}, {n} locations")
    return T


def total_variation_curve(
    T: TransitionMatrix, pi: StationaryDistribution, start: int, steps: int
) -> np.ndarray:
    """TV distance to pi of a walker started at `start`, for t = 0..steps."""
    transposed = T.sparse.T.tocsr()
    dist = np.zeros(T.n_locations)
    dist[start] = 1.0
    curve = np.empty(steps + 1)
    curve[0] = 0.5 * np.abs(dist - pi.probabilities).sum()
    for t in range(1, steps + 1):
        dist = transposed @ dist
        curve[t] = 0.5 * np.abs(dist - pi.probabilities).sum()
    return curve


def mixing_time(
    T: TransitionMatrix,
    pi: StationaryDistribution,
    starts: Sequence[int] | None = None,
    epsilon: float = 0.25,
    max_steps: int = 10_000,
) -> int | None:
    """First t where the worst TV distance over `starts` is <= epsilon, or None."""
    if starts is None:
        starts = range(T.n_locations)
    starts = np.asarray(list(starts), dtype=np.int64)

    transposed = T.sparse.T.tocsr()
    dist = np.zeros((T.n_locations, starts.size))
    dist[starts, np.arange(starts.size)] = 1.0
    target = pi.probabilities[:, None]
    for t in range(max_steps + 1):
        worst = 0.5 * np.abs(dist - target).sum(axis=0).max()
        if worst <= epsilon:
            return t
        dist = transposed @ dist
    return None
