"""
Row/column normalisation, SoftMax and log-domain Sinkhorn scaling.

Main functions:
- row_normalize / col_normalize: one normalisation sweep on a positive kernel
- softmax: K^1, the row-normalised exp(C)
- sinkhorn: alternating potential updates starting from g = 0
- marginal_violation: deviation of row and column sums from 1
- extend_potential: soft c-transform of converged potentials at a new query

Convention: the stored kernel K has rows and columns summing to 1. The
continuous kernel used by the flow and mean-field services is k = n·K, which
integrates to 1 against the empirical measure.
"""

import time
from dataclasses import dataclass, field
from typing import Literal, Optional, Tuple, Union

import numpy as np

from config import settings
from services.errors import (
    InvalidParameterError,
    NonConvergenceError,
    NonPositiveEntryError,
    NonSquareError,
)
from services.numerics import DenseMatrix, ParticleCloud, logsumexp_cols, logsumexp_rows
from utils.logger import logger


@dataclass(frozen=True)
class CostMatrix:
    """Pairwise log-affinities C[i, j] with the clouds that generated them."""

    C: np.ndarray
    X: Optional[ParticleCloud] = None
    Y: Optional[ParticleCloud] = None

    def __post_init__(self) -> None:
        C = np.array(self.C, dtype=np.float64)
        if C.ndim != 2:
            raise InvalidParameterError(f"cost must be a matrix, got shape {C.shape}")
        if not np.all(np.isfinite(C)):
            raise InvalidParameterError("cost entries must be finite")
        C.setflags(write=False)
        object.__setattr__(self, "C", C)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.C.shape

    @property
    def is_square(self) -> bool:
        return self.C.shape[0] == self.C.shape[1]


CostLike = Union[CostMatrix, np.ndarray]


def as_cost_array(C: CostLike) -> np.ndarray:
    if isinstance(C, CostMatrix):
        return C.C
    return CostMatrix(C).C


@dataclass
class SinkhornResult:
    """Scaled kernel K = exp(C + f 1ᵀ + 1 gᵀ) with its log-scalings."""

    K: np.ndarray
    f: np.ndarray
    g: np.ndarray
    iterations: int
    marginal_violation: Tuple[float, float]
    elapsed: float = field(default=0.0, compare=False)

    @property
    def n(self) -> int:
        return self.K.shape[0]

    def continuous_potentials(self) -> Tuple[np.ndarray, np.ndarray]:
        """Potentials of the continuous kernel k = n·K = exp(C + f_c + g)."""
        return self.f + np.log(self.n), self.g.copy()


# ════════════════════════════════════════════════════════════════════════════
# Normalisations
# ════════════════════════════════════════════════════════════════════════════


def row_normalize(K: DenseMatrix) -> np.ndarray:
    K = np.asarray(K, dtype=np.float64)
    if K.ndim != 2:
        raise InvalidParameterError(f"kernel must be a matrix, got shape {K.shape}")
    if not np.all(K > 0):
        bad = np.argwhere(~(K > 0))[0]
        raise NonPositiveEntryError(
            f"kernel must be strictly positive, entry {tuple(bad)} = {K[tuple(bad)]}"
        )
    return K / K.sum(axis=1, keepdims=True)


def col_normalize(K: DenseMatrix) -> np.ndarray:
    return row_normalize(np.asarray(K, dtype=np.float64).T).T


def marginal_violation(
    K: DenseMatrix,
    norm: Literal["max", "l1"] = "max",
) -> Tuple[float, float]:
    """
    (row error, column error) of a kernel against unit marginals.

    "max" is max_i |sum_j K_ij - 1|; "l1" sums the deviations instead, which
    never increases from one Sinkhorn sweep to the next.
    """
    K = np.asarray(K, dtype=np.float64)
    row_dev = np.abs(K.sum(axis=1) - 1.0)
    col_dev = np.abs(K.sum(axis=0) - 1.0)
    if norm == "max":
        return float(row_dev.max()), float(col_dev.max())
    if norm == "l1":
        return float(row_dev.sum()), float(col_dev.sum())
    raise InvalidParameterError(f"unknown norm '{norm}'")


def softmax(C: CostLike) -> np.ndarray:
    """K^1 = row_normalize(exp(C)) evaluated in log domain."""
    C = as_cost_array(C)
    f = -logsumexp_rows(C)
    return np.exp(C + f[:, None])


# ════════════════════════════════════════════════════════════════════════════
# Sinkhorn
# ════════════════════════════════════════════════════════════════════════════


def sinkhorn(
    C: CostLike,
    iterations: Optional[int] = None,
    tolerance: Optional[float] = None,
    max_iterations: Optional[int] = None,
) -> SinkhornResult:
    """
    Log-domain Sinkhorn scaling of exp(C).

    Odd iterations update f (row normalisation), even iterations update g
    (column normalisation); g starts at zero so iteration 1 is SoftMax.

    Args:
        C: square cost matrix
        iterations: run exactly this many updates (no convergence test)
        tolerance: otherwise stop once both max-norm marginal violations
            (largest |row sum - 1| and largest |column sum - 1|) are below it;
            the L1 totals are available from marginal_violation(K, norm="l1")
        max_iterations: cap for the tolerance stop

    Returns:
        SinkhornResult; with a fixed odd count its rows sum to 1.

    Raises:
        NonConvergenceError: max_iterations reached above tolerance.
    """
    C = as_cost_array(C)
    if not C.shape[0] == C.shape[1]:
        raise NonSquareError(f"Sinkhorn scaling needs a square cost, got {C.shape}")
    if iterations is not None and iterations < 1:
        raise InvalidParameterError(f"iterations must be >= 1, got {iterations}")

    fixed = iterations is not None
    if not fixed:
        tolerance = settings.sinkhorn_tolerance if tolerance is None else tolerance
        max_iterations = settings.sinkhorn_max_iterations if max_iterations is None else max_iterations
        if not tolerance > 0:
            raise InvalidParameterError(f"tolerance must be > 0, got {tolerance}")
    budget = iterations if fixed else max_iterations

    n = C.shape[0]
    f = np.zeros(n)
    g = np.zeros(n)
    start = time.time()
    violation = (np.inf, np.inf)
    done = 0

    for step in range(1, budget + 1):
        if step % 2 == 1:
            f = -logsumexp_rows(C + g[None, :])
        else:
            g = -logsumexp_cols(C + f[:, None])
        done = step
        if not fixed:
            violation = marginal_violation(np.exp(C + f[:, None] + g[None, :]))
            if max(violation) <= tolerance:
                break

    K = np.exp(C + f[:, None] + g[None, :])
    violation = marginal_violation(K)
    elapsed = time.time() - start

    if not fixed and max(violation) > tolerance:
        logger.warning(
            f"Sinkhorn stopped at {done} iterations, violation {max(violation):.3e} > {tolerance:.1e}"
        )
        raise NonConvergenceError("Sinkhorn did not reach tolerance", done, max(violation))

    logger.debug(
        f"Sinkhorn n={n}: {done} iterations, row={violation[0]:.2e} col={violation[1]:.2e} "
        f"in {elapsed:.3f}s"
    )
    return SinkhornResult(K=K, f=f, g=g, iterations=done, marginal_violation=violation, elapsed=elapsed)


def extend_potential(C_row: np.ndarray, g: np.ndarray) -> Union[float, np.ndarray]:
    """
    Soft c-transform at a query x.

    f(x) = -log((1/n) sum_j exp(g_j + c(x, x_j))), with C_row[j] = c(x, x_j)
    and g the continuous-convention column potential. A q×n block of cost
    rows gives one value per query.
    """
    C = np.asarray(C_row, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64).reshape(-1)
    if C.ndim not in (1, 2) or C.shape[-1] != g.size:
        raise InvalidParameterError(f"cost rows of shape {C.shape} do not match potential length {g.size}")
    f = np.log(g.size) - logsumexp_rows(np.atleast_2d(C) + g[None, :])
    return float(f[0]) if C.ndim == 1 else f
