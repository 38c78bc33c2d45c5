"""
Dense-matrix primitives shared by every service.

Main pieces:
- ParticleCloud: n points in R^d, the empirical measure (1/n) sum delta_{x_i}
- logsumexp_rows / logsumexp_cols: max-shifted reductions
- SeededRng: counter-based (Philox) generator with reproducible substreams
- gaussian_sample: isotropic Gaussian clouds
- finite_diff_gradient: central-difference gradient oracle
"""

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
from scipy.special import logsumexp

from services.errors import DimensionMismatchError, InvalidParameterError

DenseMatrix = np.ndarray


# ════════════════════════════════════════════════════════════════════════════
# Particle clouds
# ════════════════════════════════════════════════════════════════════════════


@dataclass(frozen=True)
class ParticleCloud:
    """n×d positions of a uniformly weighted point cloud."""

    points: np.ndarray

    def __post_init__(self) -> None:
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2:
            raise DimensionMismatchError(f"cloud must be an n×d array, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise InvalidParameterError("cloud positions must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def mean(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def variance(self) -> np.ndarray:
        """Per-coordinate population variance."""
        return self.points.var(axis=0)

    def permuted(self, permutation: Sequence[int]) -> "ParticleCloud":
        return ParticleCloud(self.points[np.asarray(permutation)])


CloudLike = Union[ParticleCloud, np.ndarray]


def as_points(X: CloudLike) -> np.ndarray:
    """Return the n×d float64 array behind a cloud or array argument."""
    if isinstance(X, ParticleCloud):
        return X.points
    pts = np.asarray(X, dtype=np.float64)
    if pts.ndim != 2:
        raise DimensionMismatchError(f"expected an n×d array, got shape {pts.shape}")
    return pts


# ════════════════════════════════════════════════════════════════════════════
# Stable reductions
# ════════════════════════════════════════════════════════════════════════════


def logsumexp_rows(M: DenseMatrix) -> np.ndarray:
    """log sum_j exp(M[i, j]) for every row i, max-shifted."""
    return logsumexp(np.asarray(M, dtype=np.float64), axis=1)


def logsumexp_cols(M: DenseMatrix) -> np.ndarray:
    return logsumexp_rows(np.asarray(M, dtype=np.float64).T)


# ════════════════════════════════════════════════════════════════════════════
# Random streams
# ════════════════════════════════════════════════════════════════════════════


class SeededRng:
    """
    Philox-backed generator.

    Identical seeds give identical streams on every platform. Parallel
    consumers take substreams from split(); the parent stream is not shared.
    """

    def __init__(self, seed: int, _sequence: Optional[np.random.SeedSequence] = None):
        self.seed = int(seed)
        self._sequence = _sequence if _sequence is not None else np.random.SeedSequence(self.seed)
        self.generator = np.random.Generator(np.random.Philox(self._sequence))

    def split(self, count: int) -> List["SeededRng"]:
        if count < 1:
            raise InvalidParameterError(f"split count must be >= 1, got {count}")
        return [SeededRng(self.seed, child) for child in self._sequence.spawn(count)]

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed})"


def gaussian_sample(
    rng: SeededRng,
    n: int,
    d: int,
    mean: Union[float, Sequence[float], np.ndarray] = 0.0,
    stddev: float = 1.0,
) -> ParticleCloud:
    """Draw n i.i.d. points from N(mean, stddev² I_d)."""
    if n < 1:
        raise InvalidParameterError(f"sample size must be >= 1, got {n}")
    if d < 1:
        raise InvalidParameterError(f"dimension must be >= 1, got {d}")
    if not stddev > 0:
        raise InvalidParameterError(f"stddev must be > 0, got {stddev}")
    center = np.broadcast_to(np.asarray(mean, dtype=np.float64), (d,))
    return ParticleCloud(center + stddev * rng.generator.standard_normal((n, d)))


# ════════════════════════════════════════════════════════════════════════════
# Finite differences
# ════════════════════════════════════════════════════════════════════════════


def finite_diff_gradient(
    fn: Callable[[np.ndarray], float],
    point: np.ndarray,
    step: float = 1e-5,
) -> np.ndarray:
    """
    Central-difference gradient of a scalar function.

    Args:
        fn: scalar function of an array shaped like point
        point: evaluation point (any shape)
        step: h in (f(x + h e_k) - f(x - h e_k)) / 2h

    Returns:
        Array with the shape of point.
    """
    if not step > 0:
        raise InvalidParameterError(f"finite-difference step must be > 0, got {step}")
    x = np.array(point, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for k in range(flat.size):
        original = flat[k]
        flat[k] = original + step
        upper = fn(x)
        flat[k] = original - step
        lower = fn(x)
        flat[k] = original
        out[k] = (upper - lower) / (2.0 * step)
    return grad
