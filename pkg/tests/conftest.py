import numpy as np
import pytest

from asir.markov import validate_matrix
from asir.sir import SirParams

UNIFORM3_ROWS = [
    [0.5, 0.3, 0.2],
    [0.3, 0.3, 0.4],
    [0.2, 0.4, 0.4],
]

UNIFORM3_TOML = """
[map]
matrix = [
  [0.5, 0.3, 0.2],
  [0.3, 0.3, 0.4],
  [0.2, 0.4, 0.4],
]
"""

REFERENCE_SIR_TOML = """
[sir]
alpha = 0.4
beta = 0.1
n = 300
s0 = 297
i0 = 3
r0 = 0
horizon = 100
"""


@pytest.fixture
def uniform3():
    """Doubly stochastic 3-location map; pi is uniform and P(meetup) = 1/3."""
    return validate_matrix(UNIFORM3_ROWS)


@pytest.fixture
def two_cell():
    return validate_matrix([[0.5, 0.5], [0.5, 0.5]])


@pytest.fixture
def reference_params():
    return SirParams(alpha=0.4, beta=0.1, n_total=300, s0=297, i0=3, r0=0, horizon=100)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_stochastic(rng: np.random.Generator, n: int, density: float = 1.0) -> np.ndarray:
    """Random row-stochastic matrix with a positive diagonal (always aperiodic)."""
    matrix = rng.random((n, n)) * (rng.random((n, n)) < density)
    np.fill_diagonal(matrix, rng.random(n) + 0.1)
    # a cycle through every location keeps the chain irreducible
    matrix[np.arange(n), (np.arange(n) + 1) % n] += 0.1
    return matrix / matrix.sum(axis=1, keepdims=True)
